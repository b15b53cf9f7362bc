#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgmr/distill.hpp"
#include "dgmr/eval.hpp"
#include "dgmr/model.hpp"

namespace dgmr::io {

// Layout (all integers little-endian):
//   "DGMR" | u32 version (=1) | u64 header_len | header (UTF-8 JSON) |
//   zero padding to a 64-byte boundary | payload
// Each header tensor entry carries name, dtype (f32|f64), shape, and
// byte_offset / byte_len relative to the payload start. Offsets are
// multiples of 64 and tensors are laid out in name order.

inline constexpr char kMagic[4] = {'D', 'G', 'M', 'R'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kAlignment = 64;

enum class Kind { model, dataset, embeddings };
enum class DType { f32, f64 };

const char* to_string(Kind k);
const char* to_string(DType d);

struct Tensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct Container {
  Kind kind = Kind::model;
  nlohmann::json config = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
  /// Throws FormatError when the tensor is missing.
  const Tensor& at(const std::string& name) const;
};

std::vector<std::byte> encode(const Container& c);
/// `source` names the origin in error messages.
Container decode(std::span<const std::byte> bytes, const std::string& source = "<memory>");

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

Container to_container(const Model& model);
Model model_from_container(const Container& c);
Container to_container(const Dataset& data, DType pixel_dtype = DType::f32);
Dataset dataset_from_container(const Container& c);
Container to_container(const EmbeddingSet& set, DType dtype = DType::f64);
EmbeddingSet embeddings_from_container(const Container& c);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void write_model(const Model& model, const std::filesystem::path& path);
Model read_model(const std::filesystem::path& path);
void write_dataset(const Dataset& data, const std::filesystem::path& path, DType pixel_dtype = DType::f32);
Dataset read_dataset(const std::filesystem::path& path);
void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path, DType dtype = DType::f64);
EmbeddingSet read_embeddings(const std::filesystem::path& path);

}  // namespace dgmr::io
