#include "dgmr/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "dgmr/error.hpp"

namespace dgmr::io {
namespace {

std::size_t align_up(std::size_t n) { return (n + kAlignment - 1) / kAlignment * kAlignment; }

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename U>
void put_le(std::vector<std::byte>& out, std::size_t at, U value) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out[at + b] = static_cast<std::byte>((value >> (8 * b)) & 0xFF);
}

template <typename U>
U get_le(std::span<const std::byte> in, std::size_t at) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(std::to_integer<unsigned>(in[at + b])) << (8 * b);
  return v;
}

DType parse_dtype(const std::string& s, const std::string& tensor) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw FormatError("tensor '" + tensor + "': unsupported dtype '" + s + "'");
}

Kind parse_kind(const std::string& s) {
  if (s == "model") return Kind::model;
  if (s == "dataset") return Kind::dataset;
  if (s == "embeddings") return Kind::embeddings;
  throw FormatError("unknown container kind '" + s + "'");
}

std::size_t shape_product(const std::vector<std::size_t>& shape, const std::string& tensor) {
  std::size_t p = 1;
  for (std::size_t d : shape) {
    if (d != 0 && p > SIZE_MAX / d) throw FormatError("tensor '" + tensor + "': shape overflows");
    p *= d;
  }
  return p;
}

std::vector<double> flatten(const Matrix& m) { return m.data(); }

Tensor make_tensor(std::string name, std::vector<std::size_t> shape, std::vector<double> values,
                   DType dtype = DType::f64) {
  return {std::move(name), dtype, std::move(shape), std::move(values)};
}

void expect_shape(const Tensor& t, const std::vector<std::size_t>& shape, const std::string& context) {
  if (t.shape != shape) {
    std::string got, want;
    for (auto d : t.shape) got += std::to_string(d) + ",";
    for (auto d : shape) want += std::to_string(d) + ",";
    throw FormatError(context + ": tensor '" + t.name + "' has shape [" + got + "], expected [" + want + "]");
  }
}

std::vector<int> labels_from(const Tensor& t) {
  std::vector<int> out;
  out.reserve(t.values.size());
  for (double v : t.values) {
    if (v != std::floor(v) || v < 0 || v > 2147483647.0) {
      throw FormatError("tensor '" + t.name + "': labels must be non-negative integers");
    }
    out.push_back(static_cast<int>(v));
  }
  return out;
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key, const std::string& context) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(context + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace

const char* to_string(Kind k) {
  switch (k) {
    case Kind::model: return "model";
    case Kind::dataset: return "dataset";
    case Kind::embeddings: return "embeddings";
  }
  return "?";
}

const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

const Tensor* Container::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& Container::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw FormatError(std::string(to_string(kind)) + " container: missing tensor '" + name + "'");
  return *t;
}

std::vector<std::byte> encode(const Container& c) {
  std::vector<const Tensor*> order;
  for (const auto& t : c.tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const Tensor* a, const Tensor* b) { return a->name < b->name; });

  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Tensor& t = *order[i];
    if (i > 0 && order[i - 1]->name == t.name) throw ValidationError("container: duplicate tensor '" + t.name + "'");
    const std::size_t count = shape_product(t.shape, t.name);
    if (count != t.values.size()) {
      throw DimensionError("container: tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                           " values for its shape");
    }
    const std::size_t len = count * dtype_size(t.dtype);
    offset = align_up(offset);
    offsets.push_back(offset);
    index.push_back({{"name", t.name},
                     {"dtype", to_string(t.dtype)},
                     {"shape", t.shape},
                     {"byte_offset", offset},
                     {"byte_len", len}});
    offset += len;
  }
  nlohmann::json header = {{"kind", to_string(c.kind)}, {"config", c.config}, {"tensors", index}};
  const std::string text = header.dump();

  const std::size_t payload_start = align_up(16 + text.size());
  std::vector<std::byte> out(payload_start + offset, std::byte{0});
  std::memcpy(out.data(), kMagic, 4);
  put_le<std::uint32_t>(out, 4, kVersion);
  put_le<std::uint64_t>(out, 8, text.size());
  std::memcpy(out.data() + 16, text.data(), text.size());

  for (std::size_t i = 0; i < order.size(); ++i) {
    const Tensor& t = *order[i];
    std::size_t at = payload_start + offsets[i];
    for (double v : t.values) {
      if (t.dtype == DType::f64) {
        put_le<std::uint64_t>(out, at, std::bit_cast<std::uint64_t>(v));
        at += 8;
      } else {
        put_le<std::uint32_t>(out, at, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        at += 4;
      }
    }
  }
  return out;
}

Container decode(std::span<const std::byte> bytes, const std::string& source) {
  if (bytes.size() < 16) throw FormatError(source + ": file too short for a container header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(source + ": bad magic, not a DGMR container");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kVersion) {
    throw FormatError(source + ": unsupported container version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError(source + ": header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data()) + 16,
                                   reinterpret_cast<const char*>(bytes.data()) + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": header is not valid JSON: " + e.what());
  }

  Container c;
  c.kind = parse_kind(json_get<std::string>(header, "kind", source));
  if (header.contains("config")) c.config = header["config"];
  const auto& index = header.contains("tensors") ? header["tensors"] : nlohmann::json();
  if (!index.is_array()) throw FormatError(source + ": header has no tensor index");

  const std::size_t payload_start = align_up(16 + header_len);
  const std::size_t payload_size = bytes.size() >= payload_start ? bytes.size() - payload_start : 0;

  struct Span {
    std::size_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;
  std::map<std::string, bool> seen;
  for (const auto& entry : index) {
    const auto name = json_get<std::string>(entry, "name", source + ": tensor entry");
    const std::string ctx = source + ": tensor '" + name + "'";
    if (seen[name]) throw FormatError(ctx + " listed twice");
    seen[name] = true;
    Tensor t;
    t.name = name;
    t.dtype = parse_dtype(json_get<std::string>(entry, "dtype", ctx), name);
    t.shape = json_get<std::vector<std::size_t>>(entry, "shape", ctx);
    const auto off = json_get<std::uint64_t>(entry, "byte_offset", ctx);
    const auto len = json_get<std::uint64_t>(entry, "byte_len", ctx);
    const std::size_t count = shape_product(t.shape, name);
    if (count > SIZE_MAX / dtype_size(t.dtype) || count * dtype_size(t.dtype) != len) {
      throw FormatError(ctx + ": byte_len " + std::to_string(len) + " does not match shape and dtype");
    }
    if (off % kAlignment != 0) throw FormatError(ctx + ": byte_offset not 64-byte aligned");
    if (off > payload_size || len > payload_size - off) {
      throw FormatError(ctx + ": data runs past end of file (truncated container)");
    }
    spans.push_back({off, off + len, name});

    t.values.resize(count);
    std::size_t at = payload_start + off;
    for (std::size_t k = 0; k < count; ++k) {
      double v;
      if (t.dtype == DType::f64) {
        v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, at));
        at += 8;
      } else {
        v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(bytes, at)));
        at += 4;
      }
      if (!std::isfinite(v)) throw FormatError(ctx + ": non-finite value at element " + std::to_string(k));
      t.values[k] = v;
    }
    c.tensors.push_back(std::move(t));
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].begin < spans[i - 1].end) {
      throw FormatError(source + ": tensors '" + spans[i - 1].name + "' and '" + spans[i].name + "' overlap");
    }
  }
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const auto bytes = encode(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (is.bad()) throw IoError("read failed for '" + path.string() + "'");
  return decode(std::as_bytes(std::span(raw)), path.string());
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"name", cfg.name},
          {"embed_dim", cfg.embed_dim},
          {"depth", cfg.depth},
          {"heads", cfg.heads},
          {"mlp_hidden", cfg.mlp_hidden},
          {"patch_size", cfg.patch_size},
          {"image_size", cfg.image_size},
          {"channels", cfg.channels}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  const std::string ctx = "model config";
  ModelConfig cfg;
  cfg.name = j.contains("name") ? json_get<std::string>(j, "name", ctx) : std::string();
  cfg.embed_dim = json_get<std::size_t>(j, "embed_dim", ctx);
  cfg.depth = json_get<std::size_t>(j, "depth", ctx);
  cfg.heads = json_get<std::size_t>(j, "heads", ctx);
  cfg.mlp_hidden = json_get<std::size_t>(j, "mlp_hidden", ctx);
  cfg.patch_size = json_get<std::size_t>(j, "patch_size", ctx);
  cfg.image_size = json_get<std::size_t>(j, "image_size", ctx);
  cfg.channels = json_get<std::size_t>(j, "channels", ctx);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config in container: ") + e.what());
  }
  return cfg;
}

Container to_container(const Model& model) {
  model.validate();
  Container c;
  c.kind = Kind::model;
  c.config = config_to_json(model.config);
  for (const auto& t : tensors(model)) {
    c.tensors.push_back(make_tensor(t.name, t.shape, std::vector<double>(t.data.begin(), t.data.end())));
  }
  return c;
}

Model model_from_container(const Container& c) {
  if (c.kind != Kind::model) throw FormatError(std::string("expected a model container, got ") + to_string(c.kind));
  const ModelConfig cfg = config_from_json(c.config);
  Model model = allocate_model(cfg);
  auto views = tensors(model);
  if (c.tensors.size() != views.size()) {
    throw FormatError("model container has " + std::to_string(c.tensors.size()) + " tensors, config implies " +
                      std::to_string(views.size()));
  }
  for (auto& v : views) {
    const Tensor& t = c.at(v.name);
    if (t.dtype != DType::f64) throw FormatError("model tensor '" + t.name + "' must be stored as f64");
    expect_shape(t, v.shape, "model container");
    std::copy(t.values.begin(), t.values.end(), v.data.begin());
  }
  model.validate();
  return model;
}

Container to_container(const Dataset& data, DType pixel_dtype) {
  Container c;
  c.kind = Kind::dataset;
  const auto& im = data.images;
  c.config = {{"count", im.count},
              {"channels", im.channels},
              {"height", im.height},
              {"width", im.width},
              {"num_classes", data.num_classes}};
  c.tensors.push_back(make_tensor("images", {im.count, im.channels, im.height, im.width}, im.pixels, pixel_dtype));
  if (data.labeled()) {
    std::vector<double> labels(data.labels.begin(), data.labels.end());
    c.tensors.push_back(make_tensor("labels", {data.labels.size()}, std::move(labels)));
    c.tensors.push_back(make_tensor("label_head", {data.label_head.rows(), data.label_head.cols()},
                                    flatten(data.label_head)));
  }
  return c;
}

Dataset dataset_from_container(const Container& c) {
  if (c.kind != Kind::dataset) throw FormatError(std::string("expected a dataset container, got ") + to_string(c.kind));
  const std::string ctx = "dataset config";
  Dataset d;
  d.images.count = json_get<std::size_t>(c.config, "count", ctx);
  d.images.channels = json_get<std::size_t>(c.config, "channels", ctx);
  d.images.height = json_get<std::size_t>(c.config, "height", ctx);
  d.images.width = json_get<std::size_t>(c.config, "width", ctx);
  d.num_classes = json_get<std::size_t>(c.config, "num_classes", ctx);
  const Tensor& images = c.at("images");
  expect_shape(images, {d.images.count, d.images.channels, d.images.height, d.images.width}, "dataset container");
  d.images.pixels = images.values;
  if (const Tensor* labels = c.find("labels")) {
    expect_shape(*labels, {d.images.count}, "dataset container");
    d.labels = labels_from(*labels);
    const Tensor& head = c.at("label_head");
    if (head.shape.size() != 2 || head.shape[0] != d.num_classes) {
      throw FormatError("dataset container: label_head rows must equal num_classes");
    }
    d.label_head = Matrix(head.shape[0], head.shape[1], head.values);
    for (int l : d.labels) {
      if (static_cast<std::size_t>(l) >= d.num_classes) {
        throw FormatError("dataset container: label " + std::to_string(l) + " outside [0, num_classes)");
      }
    }
  }
  return d;
}

Container to_container(const EmbeddingSet& set, DType dtype) {
  set.validate();
  Container c;
  c.kind = Kind::embeddings;
  c.config = {{"count", set.vectors.rows()}, {"dim", set.vectors.cols()}};
  c.tensors.push_back(make_tensor("vectors", {set.vectors.rows(), set.vectors.cols()}, flatten(set.vectors), dtype));
  if (set.labeled()) {
    c.tensors.push_back(make_tensor("labels", {set.labels.size()}, std::vector<double>(set.labels.begin(), set.labels.end())));
  }
  return c;
}

EmbeddingSet embeddings_from_container(const Container& c) {
  if (c.kind != Kind::embeddings) {
    throw FormatError(std::string("expected an embeddings container, got ") + to_string(c.kind));
  }
  const std::string ctx = "embeddings config";
  const auto count = json_get<std::size_t>(c.config, "count", ctx);
  const auto dim = json_get<std::size_t>(c.config, "dim", ctx);
  const Tensor& vectors = c.at("vectors");
  expect_shape(vectors, {count, dim}, "embeddings container");
  EmbeddingSet set;
  set.vectors = Matrix(count, dim, vectors.values);
  if (const Tensor* labels = c.find("labels")) {
    expect_shape(*labels, {count}, "embeddings container");
    set.labels = labels_from(*labels);
  }
  return set;
}

void write_model(const Model& model, const std::filesystem::path& path) { write_container(to_container(model), path); }
Model read_model(const std::filesystem::path& path) { return model_from_container(read_container(path)); }

void write_dataset(const Dataset& data, const std::filesystem::path& path, DType pixel_dtype) {
  write_container(to_container(data, pixel_dtype), path);
}
Dataset read_dataset(const std::filesystem::path& path) { return dataset_from_container(read_container(path)); }

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path, DType dtype) {
  write_container(to_container(set, dtype), path);
}
EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  return embeddings_from_container(read_container(path));
}

}  // namespace dgmr::io
