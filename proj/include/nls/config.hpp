#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "nls/core.hpp"
#include "nls/eval.hpp"
#include "nls/neural.hpp"
#include "nls/simulate.hpp"

namespace nls {

using Json = nlohmann::ordered_json;

Json to_json(const GridSpec& g);
GridSpec grid_from_json(const Json& j);
Json to_json(const Architecture& a);
Architecture architecture_from_json(const Json& j);
Json to_json(const TrainConfig& c);
/// Keys not present keep their defaults; unknown keys raise ConfigurationError.
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
Json to_json(const Bounds& b);
Bounds bounds_from_json(const Json& j);

struct CalibrateConfig {
  int m = 300;
  int n = 50;
  Bounds bounds{{0.0, 2.0}, {0.0, 2.0}};
  int chunk_size = 256;
};

/// Whole-pipeline configuration. Sections: sim, train, calibrate, eval; the
/// root seed feeds every stage through derived seeds.
struct RunConfig {
  std::uint64_t seed = 0;
  SimConfig sim;
  TrainConfig train;
  Architecture arch;
  CalibrateConfig calibrate;
  EvalConfig eval;

  /// Desk-scale defaults for a process: 16x16 fields, m = 300, n = 50.
  static RunConfig defaults(ProcessKind process);
  /// Re-derives every stage seed from the root seed.
  void set_seed(std::uint64_t root);
  std::uint64_t permutation_seed() const;
  std::uint64_t calibration_seed() const;
  std::uint64_t calibration_permutation_seed() const;
  void validate() const;
};

/// Parses and validates a RunConfig document. Unknown keys anywhere raise
/// ConfigurationError.
RunConfig parse_run_config(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);
Json to_json(const RunConfig& c);

}  // namespace nls
