#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dgmr::cli {

inline constexpr const char* kVersion = "0.3.0";

/// Exit codes: 0 success, 2 usage/validation, 1 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Original vs pruned parameter and FLOPs totals for a preset.
struct CompressionReport {
  std::string preset;
  double ratio = 0.0;
  std::uint64_t original_hidden = 0;
  std::uint64_t pruned_hidden = 0;
  std::uint64_t original_params = 0;
  std::uint64_t pruned_params = 0;
  std::uint64_t original_flops = 0;
  std::uint64_t pruned_flops = 0;
  double mlp_param_share = 0.0;

  double param_reduction() const;
  double flops_reduction() const;
  nlohmann::ordered_json to_json() const;
};

CompressionReport compression_report(const std::string& preset_name, double ratio);

}  // namespace dgmr::cli
