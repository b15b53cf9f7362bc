#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dgmr/distill.hpp"
#include "dgmr/error.hpp"
#include "dgmr/eval.hpp"
#include "dgmr/io.hpp"
#include "dgmr/model.hpp"
#include "dgmr/parallel.hpp"
#include "dgmr/pruning.hpp"

namespace dgmr::cli {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Collects what went into one invocation; written as <artifact>.manifest.json.
struct Manifest {
  std::string subcommand;
  std::vector<std::string> argv;
  ojson flags = ojson::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void write_next_to(const fs::path& artifact) const {
    ojson j;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["flags"] = flags;
    j["seed"] = flags.contains("seed") ? flags["seed"] : ojson(nullptr);
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["toolkit_version"] = kVersion;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::ofstream os(artifact.string() + ".manifest.json");
    if (!os) throw IoError("cannot write manifest next to '" + artifact.string() + "'");
    os << j.dump(2) << '\n';
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

struct GenArgs {
  std::string preset;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t dataset = 0;
  std::string data_out;
  std::size_t num_classes = 10;
  std::string pixel_dtype = "f32";
};

struct PruneArgs {
  std::string model;
  std::string criterion = "dgmr";
  double ratio = 1.0;
  std::uint64_t seed = 0;
  std::string out;
  std::string report;
  std::string data;
  std::size_t calib_batches = 4;
  std::size_t calib_batch = 16;
  double eps = 1e-10;
};

struct DistillArgs {
  std::string teacher, student, data, out, log;
  std::size_t epochs = 10;
  std::optional<std::size_t> steps;
  std::string loss = "cls,patch";
  double lambda = 0.0;
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::string freeze;
};

struct EvalArgs {
  std::string teacher, student, data, out, embeddings_out;
  std::size_t knn_k = 20;
  std::string metric = "all";
  double split = 0.9;
  std::uint64_t seed = 0;
};

struct DiversityArgs {
  std::string model, out;
  std::size_t block = 0;
  std::string layer = "hidden";
};

struct ReportArgs {
  std::string preset;
  double ratio = 1.0;
  std::string json;
};

int cmd_gen(const GenArgs& a, Manifest& m, std::ostream& out) {
  const ModelConfig cfg = preset(a.preset);
  const Model model = init_model(cfg, a.seed);
  io::write_model(model, a.out);
  m.outputs.push_back(a.out);
  out << "wrote model '" << cfg.name << "' (" << param_count(model) << " params) to " << a.out << '\n';
  if (a.dataset > 0) {
    if (a.data_out.empty()) throw ValidationError("gen: --dataset needs --data-out");
    if (a.pixel_dtype != "f32" && a.pixel_dtype != "f64") throw ValidationError("gen: --pixel-dtype must be f32|f64");
    const Dataset data = gen_synthetic_dataset(cfg, a.dataset, a.seed, a.num_classes > 0 ? &model : nullptr,
                                               a.num_classes);
    io::write_dataset(data, a.data_out, a.pixel_dtype == "f32" ? io::DType::f32 : io::DType::f64);
    m.outputs.push_back(a.data_out);
    out << "wrote dataset of " << a.dataset << " images to " << a.data_out << '\n';
  }
  m.write_next_to(a.out);
  return kExitOk;
}

int cmd_prune(const PruneArgs& a, Manifest& m, std::ostream& out) {
  const Criterion criterion = parse_criterion(a.criterion);
  const Model model = io::read_model(a.model);
  m.inputs.push_back(a.model);
  PruneOptions opts;
  opts.seed = a.seed;
  opts.rel_eps = a.eps;
  if (criterion == Criterion::taylor) {
    if (a.data.empty()) throw ValidationError("prune: taylor criterion needs --data (labeled dataset)");
    const Dataset data = io::read_dataset(a.data);
    m.inputs.push_back(a.data);
    opts.taylor_grads = taylor_hidden_grads(model, data, a.calib_batches, a.calib_batch);
  }
  const PruneOutcome result = prune_model(model, criterion, a.ratio, opts);
  io::write_model(result.model, a.out);
  m.outputs.push_back(a.out);
  if (!a.report.empty()) {
    write_text(a.report, result.report.to_json() + "\n");
    m.outputs.push_back(a.report);
  }
  out << "pruned " << to_string(criterion) << " r=" << a.ratio << ": hidden " << result.report.original_hidden
      << " -> " << result.report.pruned_hidden << ", params " << result.report.original_params << " -> "
      << result.report.pruned_params << '\n';
  if (!result.report.rounding_note.empty()) out << "note: " << result.report.rounding_note << '\n';
  m.write_next_to(a.out);
  return kExitOk;
}

int cmd_distill(const DistillArgs& a, Manifest& m, std::ostream& out) {
  const Model teacher = io::read_model(a.teacher);
  Model student = io::read_model(a.student);
  const Dataset data = io::read_dataset(a.data);
  m.inputs = {a.teacher, a.student, a.data};
  check_distill_compatible(teacher.config, student.config);

  DistillConfig cfg;
  cfg.loss = LossSpec::parse(a.loss, a.lambda);
  cfg.freeze = FreezeMask::parse(a.freeze);
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.base_lr = a.base_lr;
  cfg.min_lr = a.min_lr;
  cfg.warmup_fraction = a.warmup_frac;
  cfg.optimizer.beta1 = a.beta1;
  cfg.optimizer.beta2 = a.beta2;
  cfg.optimizer.weight_decay = a.weight_decay;
  cfg.max_steps = a.steps;

  const DistillResult result = run_distillation(teacher, std::move(student), data, cfg, a.epochs);
  io::write_model(result.student, a.out);
  m.outputs.push_back(a.out);
  if (!a.log.empty()) {
    std::ofstream os(a.log);
    if (!os) throw IoError("cannot open '" + a.log + "' for writing");
    write_loss_csv(os, result.curve, cfg.loss.xent);
    m.outputs.push_back(a.log);
  }
  if (!result.curve.empty()) {
    out << "distilled " << result.curve.size() << " steps, loss " << result.curve.front().loss.total << " -> "
        << result.curve.back().loss.total << '\n';
  }
  m.write_next_to(a.out);
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, Manifest& m, std::ostream& out) {
  if (a.metric != "knn" && a.metric != "mse" && a.metric != "all") {
    throw ValidationError("eval: --metric must be knn|mse|all");
  }
  const Model teacher = io::read_model(a.teacher);
  const Dataset data = io::read_dataset(a.data);
  m.inputs = {a.teacher, a.data};
  std::optional<Model> student;
  if (!a.student.empty()) {
    student = io::read_model(a.student);
    m.inputs.push_back(a.student);
  }
  ojson report;
  report["samples"] = data.size();
  const bool want_knn = a.metric == "knn" || a.metric == "all";
  const bool want_mse = a.metric == "mse" || a.metric == "all";
  if (want_knn) {
    if (!data.labeled()) throw ValidationError("eval: kNN needs a labeled dataset");
    report["knn"]["k"] = a.knn_k;
    report["knn"]["split"] = a.split;
    report["knn"]["teacher_accuracy"] = knn_accuracy(teacher, data, a.knn_k, a.split, a.seed);
    if (student) report["knn"]["student_accuracy"] = knn_accuracy(*student, data, a.knn_k, a.split, a.seed);
  }
  if (want_mse && student) {
    const FunctionalMse mse = functional_mse(teacher, *student, data.images);
    report["functional_mse"]["cls"] = mse.cls;
    report["functional_mse"]["patch"] = mse.patch;
    report["functional_mse"]["combined"] = mse.combined();
  }
  if (!a.embeddings_out.empty()) {
    io::write_embeddings(embed(student ? *student : teacher, data), a.embeddings_out);
    m.outputs.push_back(a.embeddings_out);
  }
  const std::string text = report.dump(2);
  out << text << '\n';
  if (!a.out.empty()) {
    write_text(a.out, text + "\n");
    m.outputs.push_back(a.out);
    m.write_next_to(a.out);
  }
  return kExitOk;
}

int cmd_diversity(const DiversityArgs& a, Manifest& m, std::ostream& out) {
  const Model model = io::read_model(a.model);
  m.inputs.push_back(a.model);
  if (a.block >= model.blocks.size()) {
    throw BoundsError("diversity: block " + std::to_string(a.block) + " out of range (depth " +
                      std::to_string(model.blocks.size()) + ")");
  }
  const MlpWeights& mlp = model.blocks[a.block].mlp;
  Matrix w;
  if (a.layer == "hidden") w = mlp.w_hidden;
  else if (a.layer == "output") w = transpose(mlp.w_output);
  else throw ValidationError("diversity: --layer must be hidden|output");

  const DiversitySpectrum spec = diversity_spectrum(w, a.block, a.layer);
  const std::size_t keep = std::min(w.rows(), w.cols());
  std::ostringstream csv;
  csv << "component_index,variance\n" << std::setprecision(17);
  for (std::size_t i = 0; i < keep; ++i) csv << i << ',' << spec.variances[i] << '\n';
  write_text(a.out, csv.str());
  m.outputs.push_back(a.out);
  out << "wrote " << keep << " components for block " << a.block << " (" << a.layer << ") to " << a.out << '\n';
  m.write_next_to(a.out);
  return kExitOk;
}

int cmd_report(const ReportArgs& a, Manifest& m, std::ostream& out) {
  const CompressionReport r = compression_report(a.preset, a.ratio);
  out << std::fixed << std::setprecision(3);
  out << "preset " << r.preset << ": MLP hidden " << r.original_hidden << " -> " << r.pruned_hidden
      << " (r=" << r.ratio << ")\n";
  out << "params " << static_cast<double>(r.original_params) / 1e9 << "B -> "
      << static_cast<double>(r.pruned_params) / 1e9 << "B (" << 100.0 * r.param_reduction() << "% reduction)\n";
  out << "FLOPs  " << static_cast<double>(r.original_flops) / 1e12 << "T -> "
      << static_cast<double>(r.pruned_flops) / 1e12 << "T (" << 100.0 * r.flops_reduction() << "% reduction)\n";
  out << "MLP parameter share " << 100.0 * r.mlp_param_share << "%\n";
  out.unsetf(std::ios::floatfield);
  if (!a.json.empty()) {
    write_text(a.json, r.to_json().dump(2) + "\n");
    m.outputs.push_back(a.json);
    m.write_next_to(a.json);
  }
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth);

int cmd_replay(const std::string& manifest_path, std::ostream& out, std::ostream& err, int depth) {
  if (depth > 0) throw ValidationError("replay: manifests cannot replay other manifests");
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest '" + manifest_path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("replay: manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.contains("argv") || !j["argv"].is_array()) throw ValidationError("replay: manifest has no argv");
  return dispatch(j["argv"].get<std::vector<std::string>>(), out, err, depth + 1);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth) {
  CLI::App app{"Diversity-guided MLP reduction toolkit", "dgmr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenArgs gen;
  auto* sc_gen = app.add_subcommand("gen", "Initialize a model (and optionally a synthetic dataset)");
  sc_gen->add_option("--preset", gen.preset, "Architecture preset")->required();
  sc_gen->add_option("--seed", gen.seed, "Random seed");
  sc_gen->add_option("--out", gen.out, "Model container to write")->required();
  sc_gen->add_option("--dataset", gen.dataset, "Also generate N synthetic images");
  sc_gen->add_option("--data-out", gen.data_out, "Dataset container to write");
  sc_gen->add_option("--num-classes", gen.num_classes, "Label classes (0 = unlabeled)");
  sc_gen->add_option("--pixel-dtype", gen.pixel_dtype, "Pixel storage dtype f32|f64");

  PruneArgs prune;
  auto* sc_prune = app.add_subcommand("prune", "Prune every MLP block to a target expansion ratio");
  sc_prune->add_option("--model", prune.model, "Input model container")->required();
  sc_prune->add_option("--criterion", prune.criterion, "dgmr|l2|random|taylor");
  sc_prune->add_option("--ratio", prune.ratio, "Target expansion ratio r = M'/C")->required();
  sc_prune->add_option("--seed", prune.seed, "Seed for the random criterion");
  sc_prune->add_option("--out", prune.out, "Pruned model container")->required();
  sc_prune->add_option("--report", prune.report, "PruneReport JSON path");
  sc_prune->add_option("--data", prune.data, "Labeled dataset for taylor calibration");
  sc_prune->add_option("--calib-batches", prune.calib_batches, "Taylor calibration batches");
  sc_prune->add_option("--calib-batch", prune.calib_batch, "Taylor calibration batch size");
  sc_prune->add_option("--eps", prune.eps, "Degenerate-pivot threshold relative to mean row norm");

  DistillArgs dist;
  auto* sc_dist = app.add_subcommand("distill", "Distill a pruned student from its teacher");
  sc_dist->add_option("--teacher", dist.teacher)->required();
  sc_dist->add_option("--student", dist.student)->required();
  sc_dist->add_option("--data", dist.data)->required();
  sc_dist->add_option("--epochs", dist.epochs);
  sc_dist->add_option("--steps", dist.steps, "Fixed step budget (overrides --epochs)");
  sc_dist->add_option("--loss", dist.loss, "Loss terms: cls,patch[,xent]");
  sc_dist->add_option("--lambda", dist.lambda, "Cross-entropy coefficient");
  sc_dist->add_option("--base-lr", dist.base_lr);
  sc_dist->add_option("--min-lr", dist.min_lr);
  sc_dist->add_option("--batch", dist.batch);
  sc_dist->add_option("--seed", dist.seed);
  sc_dist->add_option("--warmup-frac", dist.warmup_frac);
  sc_dist->add_option("--weight-decay", dist.weight_decay);
  sc_dist->add_option("--beta1", dist.beta1);
  sc_dist->add_option("--beta2", dist.beta2);
  sc_dist->add_option("--freeze", dist.freeze, "Comma list of frozen groups: embedding,norm,attention,mlp");
  sc_dist->add_option("--out", dist.out)->required();
  sc_dist->add_option("--log", dist.log, "Loss curve CSV");

  EvalArgs ev;
  auto* sc_eval = app.add_subcommand("eval", "kNN accuracy and teacher/student functional distance");
  sc_eval->add_option("--teacher", ev.teacher)->required();
  sc_eval->add_option("--student", ev.student);
  sc_eval->add_option("--data", ev.data)->required();
  sc_eval->add_option("--knn-k", ev.knn_k);
  sc_eval->add_option("--metric", ev.metric, "knn|mse|all");
  sc_eval->add_option("--split", ev.split, "Fraction used as the kNN memory bank");
  sc_eval->add_option("--seed", ev.seed);
  sc_eval->add_option("--out", ev.out, "JSON report path");
  sc_eval->add_option("--embeddings-out", ev.embeddings_out, "Write class-token embeddings container");

  DiversityArgs div;
  auto* sc_div = app.add_subcommand("diversity", "PCA variance spectrum of one MLP layer");
  sc_div->add_option("--model", div.model)->required();
  sc_div->add_option("--block", div.block);
  sc_div->add_option("--layer", div.layer, "hidden|output");
  sc_div->add_option("--out", div.out)->required();

  ReportArgs rep;
  auto* sc_rep = app.add_subcommand("report", "Parameter/FLOPs accounting for a preset at ratio r");
  sc_rep->add_option("--preset", rep.preset)->required();
  sc_rep->add_option("--ratio", rep.ratio);
  sc_rep->add_option("--json", rep.json, "Also write the numbers as JSON");

  std::string manifest_path;
  auto* sc_replay = app.add_subcommand("replay", "Re-run the invocation recorded in a manifest");
  sc_replay->add_option("manifest", manifest_path)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Manifest manifest;
  manifest.argv = args;
  for (const CLI::App* sub : app.get_subcommands()) {
    manifest.subcommand = sub->get_name();
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help" || opt->count() == 0) continue;
      manifest.flags[opt->get_name()] = opt->as<std::string>();
    }
  }

  if (sc_gen->parsed()) return cmd_gen(gen, manifest, out);
  if (sc_prune->parsed()) return cmd_prune(prune, manifest, out);
  if (sc_dist->parsed()) return cmd_distill(dist, manifest, out);
  if (sc_eval->parsed()) return cmd_eval(ev, manifest, out);
  if (sc_div->parsed()) return cmd_diversity(div, manifest, out);
  if (sc_rep->parsed()) return cmd_report(rep, manifest, out);
  if (sc_replay->parsed()) return cmd_replay(manifest_path, out, err, depth);
  return kExitUsage;
}

}  // namespace

double CompressionReport::param_reduction() const {
  return 1.0 - static_cast<double>(pruned_params) / static_cast<double>(original_params);
}

double CompressionReport::flops_reduction() const {
  return 1.0 - static_cast<double>(pruned_flops) / static_cast<double>(original_flops);
}

nlohmann::ordered_json CompressionReport::to_json() const {
  ojson j;
  j["preset"] = preset;
  j["ratio"] = ratio;
  j["original_hidden"] = original_hidden;
  j["pruned_hidden"] = pruned_hidden;
  j["original_params"] = original_params;
  j["pruned_params"] = pruned_params;
  j["param_reduction"] = param_reduction();
  j["original_flops"] = original_flops;
  j["pruned_flops"] = pruned_flops;
  j["flops_reduction"] = flops_reduction();
  j["mlp_param_share"] = mlp_param_share;
  return j;
}

CompressionReport compression_report(const std::string& preset_name, double ratio) {
  const ModelConfig cfg = preset(preset_name);
  if (!(ratio > 0.0) || ratio > cfg.mlp_ratio() + 1e-12) {
    throw BoundsError("report: ratio " + std::to_string(ratio) + " outside (0, " +
                      std::to_string(cfg.mlp_ratio()) + "]");
  }
  CompressionReport r;
  r.preset = cfg.name;
  r.ratio = ratio;
  r.original_hidden = cfg.mlp_hidden;
  r.pruned_hidden = hidden_for_ratio(cfg, ratio);
  r.original_params = param_count(cfg);
  r.pruned_params = param_count(cfg, ratio);
  r.original_flops = flops_estimate(cfg);
  r.pruned_flops = flops_estimate(cfg, ratio);
  const std::uint64_t c = cfg.embed_dim;
  const std::uint64_t mlp = cfg.depth * (2 * c * cfg.mlp_hidden + cfg.mlp_hidden + c);
  r.mlp_param_share = static_cast<double>(mlp) / static_cast<double>(r.original_params);
  return r;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  parallel::configure_from_env();
  try {
    return dispatch(args, out, err, 0);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace dgmr::cli
