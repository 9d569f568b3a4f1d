#include "nls/config.hpp"

#include <fstream>
#include <set>

#include "nls/errors.hpp"
#include "nls/rng.hpp"

namespace nls {

namespace {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigurationError("section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigurationError("unknown key '" + key + "' in section '" + section + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigurationError("key '" + std::string(key) + "' in section '" + section + "' has the wrong type");
  }
}

// Fixed tags for the per-stage seeds derived from the root seed.
enum : std::uint64_t { kSimSeed = 11, kPermSeed, kTrainSeed, kCalSeed, kCalPermSeed, kEvalSeed };

}  // namespace

Json to_json(const GridSpec& g) {
  return Json{{"side", g.side}, {"domain_min", {g.lo[0], g.lo[1]}}, {"domain_max", {g.hi[0], g.hi[1]}}};
}

GridSpec grid_from_json(const Json& j) {
  check_keys(j, {"side", "domain_min", "domain_max"}, "grid");
  GridSpec g;
  read(j, "side", g.side, "grid");
  std::vector<double> lo{g.lo[0], g.lo[1]}, hi{g.hi[0], g.hi[1]};
  read(j, "domain_min", lo, "grid");
  read(j, "domain_max", hi, "grid");
  if (lo.size() != 2 || hi.size() != 2) throw ConfigurationError("grid domain bounds need two entries");
  g.lo = {lo[0], lo[1]};
  g.hi = {hi[0], hi[1]};
  try {
    g.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigurationError(std::string("grid: ") + e.what());
  }
  return g;
}

Json to_json(const Architecture& a) {
  return Json{{"input_side", a.input_side}, {"param_dim", a.param_dim}, {"filters", a.filters},
              {"padding", a.padding},       {"dense", a.dense}};
}

Architecture architecture_from_json(const Json& j) {
  check_keys(j, {"input_side", "param_dim", "filters", "padding", "dense"}, "architecture");
  Architecture a;
  read(j, "input_side", a.input_side, "architecture");
  read(j, "param_dim", a.param_dim, "architecture");
  read(j, "filters", a.filters, "architecture");
  read(j, "padding", a.padding, "architecture");
  read(j, "dense", a.dense, "architecture");
  a.validate();
  return a;
}

Json to_json(const TrainConfig& c) {
  return Json{{"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"lr_initial", c.lr_initial},
              {"lr_hold_epochs", c.lr_hold_epochs},
              {"lr_decay_factor", c.lr_decay_factor},
              {"seed", c.seed},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"validation_fraction", c.validation_fraction},
              {"chunk_size", c.chunk_size},
              {"plateau_epochs", c.plateau_epochs},
              {"plateau_margin", c.plateau_margin},
              {"max_restarts", c.max_restarts}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  check_keys(j,
             {"batch_size", "epochs", "lr_initial", "lr_hold_epochs", "lr_decay_factor", "seed", "beta1", "beta2",
              "epsilon", "validation_fraction", "chunk_size", "plateau_epochs", "plateau_margin", "max_restarts"},
             "train");
  const std::string s = "train";
  read(j, "batch_size", c.batch_size, s);
  read(j, "epochs", c.epochs, s);
  read(j, "lr_initial", c.lr_initial, s);
  read(j, "lr_hold_epochs", c.lr_hold_epochs, s);
  read(j, "lr_decay_factor", c.lr_decay_factor, s);
  read(j, "seed", c.seed, s);
  read(j, "beta1", c.beta1, s);
  read(j, "beta2", c.beta2, s);
  read(j, "epsilon", c.epsilon, s);
  read(j, "validation_fraction", c.validation_fraction, s);
  read(j, "chunk_size", c.chunk_size, s);
  read(j, "plateau_epochs", c.plateau_epochs, s);
  read(j, "plateau_margin", c.plateau_margin, s);
  read(j, "max_restarts", c.max_restarts, s);
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigurationError(std::string("train: ") + e.what());
  }
  return c;
}

Json to_json(const Bounds& b) {
  Json j = Json::array();
  for (const auto& [lo, hi] : b) j.push_back(Json::array({lo, hi}));
  return j;
}

Bounds bounds_from_json(const Json& j) {
  Bounds b;
  if (!j.is_array()) throw ConfigurationError("bounds must be a list of [lo, hi] pairs");
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
      throw ConfigurationError("bounds must be a list of [lo, hi] pairs");
    }
    b.emplace_back(e[0].get<double>(), e[1].get<double>());
  }
  return b;
}

RunConfig RunConfig::defaults(ProcessKind process) {
  RunConfig c;
  c.sim.process = process;
  c.sim.grid = GridSpec::square(16, -10.0, 10.0);
  c.sim.m = 300;
  c.sim.n = 50;
  c.sim.bounds = SimConfig::default_bounds(process);
  c.train = process == ProcessKind::Gaussian ? TrainConfig::gp_defaults() : TrainConfig::br_defaults();
  c.train.batch_size = process == ProcessKind::Gaussian ? 512 : 50;
  c.arch = Architecture::for_side(c.sim.grid.side);
  c.eval.process = process;
  c.eval.grid = c.sim.grid;
  if (process == ProcessKind::Gaussian) {
    c.eval.methods = {MethodSpec::parse("neural-calibrated"), MethodSpec::parse("neural-uncalibrated"),
                      MethodSpec::parse("gp-exact")};
  } else {
    c.eval.methods = {MethodSpec::parse("neural-calibrated"), MethodSpec::parse("neural-uncalibrated"),
                      MethodSpec::parse("pairwise:2")};
  }
  c.set_seed(0);
  return c;
}

void RunConfig::set_seed(std::uint64_t root) {
  seed = root;
  sim.seed = derive_seed(root, {kSimSeed});
  train.seed = derive_seed(root, {kTrainSeed});
  eval.seed = derive_seed(root, {kEvalSeed});
}

std::uint64_t RunConfig::permutation_seed() const { return derive_seed(seed, {kPermSeed}); }
std::uint64_t RunConfig::calibration_seed() const { return derive_seed(seed, {kCalSeed}); }
std::uint64_t RunConfig::calibration_permutation_seed() const { return derive_seed(seed, {kCalPermSeed}); }

void RunConfig::validate() const {
  try {
    sim.validate();
    train.validate();
    arch.validate();
    eval.validate();
    if (calibrate.m < 1 || calibrate.n < 1 || calibrate.chunk_size < 1) {
      throw InvalidArgument("calibrate m, n and chunk_size must be >= 1");
    }
    if (calibrate.bounds.size() != 2) throw InvalidArgument("calibrate bounds must have two axes");
    if (arch.input_side != sim.grid.side) throw InvalidArgument("architecture input side differs from the grid side");
    if (!(eval.grid == sim.grid) || eval.process != sim.process) {
      throw InvalidArgument("eval grid and process must match the sim section");
    }
  } catch (const InvalidArgument& e) {
    throw ConfigurationError(e.what());
  }
}

RunConfig parse_run_config(const Json& j) {
  check_keys(j, {"seed", "sim", "train", "calibrate", "eval"}, "root");
  ProcessKind process = ProcessKind::Gaussian;
  if (j.contains("sim") && j["sim"].is_object() && j["sim"].contains("process")) {
    try {
      process = process_from_string(j["sim"]["process"].get<std::string>());
    } catch (const Json::exception&) {
      throw ConfigurationError("sim.process must be a string");
    } catch (const InvalidArgument& e) {
      throw ConfigurationError(e.what());
    }
  }
  RunConfig c = RunConfig::defaults(process);
  std::uint64_t root = 0;
  read(j, "seed", root, "root");
  c.set_seed(root);

  if (j.contains("sim")) {
    const Json& s = j["sim"];
    check_keys(s, {"process", "grid", "m", "n", "bounds", "seed", "n_spectral", "anchor"}, "sim");
    if (s.contains("grid")) c.sim.grid = grid_from_json(s["grid"]);
    read(s, "m", c.sim.m, "sim");
    read(s, "n", c.sim.n, "sim");
    if (s.contains("bounds")) c.sim.bounds = bounds_from_json(s["bounds"]);
    read(s, "seed", c.sim.seed, "sim");
    read(s, "n_spectral", c.sim.br.n_spectral, "sim");
    if (s.contains("anchor")) {
      std::string a;
      read(s, "anchor", a, "sim");
      if (a == "corner") {
        c.sim.br.anchor = SpectralAnchor::Corner;
      } else if (a == "normalized-random") {
        c.sim.br.anchor = SpectralAnchor::NormalizedRandom;
      } else {
        throw ConfigurationError("sim.anchor must be 'corner' or 'normalized-random'");
      }
    }
    try {
      c.arch = Architecture::for_side(c.sim.grid.side, c.arch.filters);
    } catch (const InvalidArgument& e) {
      throw ConfigurationError(std::string("sim: ") + e.what());
    }
  }
  if (j.contains("train")) {
    Json t = j["train"];
    if (!t.is_object()) throw ConfigurationError("section 'train' must be an object");
    std::array<int, 3> filters = c.arch.filters;
    std::vector<int> dense = c.arch.dense;
    if (t.contains("filters")) {
      read(t, "filters", filters, "train");
      t.erase("filters");
    }
    if (t.contains("dense")) {
      read(t, "dense", dense, "train");
      t.erase("dense");
    }
    try {
      c.arch = Architecture::for_side(c.sim.grid.side, filters);
      c.arch.dense = dense;
    } catch (const InvalidArgument& e) {
      throw ConfigurationError(std::string("train: ") + e.what());
    }
    c.train = train_config_from_json(t, c.train);
  }
  if (j.contains("calibrate")) {
    const Json& s = j["calibrate"];
    check_keys(s, {"m", "n", "bounds", "chunk_size"}, "calibrate");
    read(s, "m", c.calibrate.m, "calibrate");
    read(s, "n", c.calibrate.n, "calibrate");
    read(s, "chunk_size", c.calibrate.chunk_size, "calibrate");
    if (s.contains("bounds")) c.calibrate.bounds = bounds_from_json(s["bounds"]);
  }
  c.eval.grid = c.sim.grid;
  c.eval.br = c.sim.br;
  if (j.contains("eval")) {
    const Json& s = j["eval"];
    check_keys(s,
               {"space", "true_counts", "replicates", "surface_counts", "alpha", "realizations", "methods", "seed",
                "godambe_fields", "fd_step", "sqrt_method", "timing_fields", "timing_deltas", "timing_threads"},
               "eval");
    const std::string e = "eval";
    if (s.contains("space")) c.eval.space = bounds_from_json(s["space"]);
    read(s, "true_counts", c.eval.true_counts, e);
    read(s, "replicates", c.eval.replicates, e);
    read(s, "surface_counts", c.eval.surface_counts, e);
    read(s, "alpha", c.eval.alpha, e);
    read(s, "realizations", c.eval.realizations, e);
    read(s, "seed", c.eval.seed, e);
    read(s, "godambe_fields", c.eval.godambe_fields, e);
    read(s, "fd_step", c.eval.fd_step, e);
    read(s, "timing_fields", c.eval.timing_fields, e);
    read(s, "timing_deltas", c.eval.timing_deltas, e);
    read(s, "timing_threads", c.eval.timing_threads, e);
    if (s.contains("sqrt_method")) {
      std::string m;
      read(s, "sqrt_method", m, e);
      try {
        c.eval.sqrt_method = sqrt_method_from_string(m);
      } catch (const InvalidArgument& ex) {
        throw ConfigurationError(ex.what());
      }
    }
    if (s.contains("methods")) {
      std::vector<std::string> names;
      read(s, "methods", names, e);
      c.eval.methods.clear();
      try {
        for (const auto& n : names) c.eval.methods.push_back(MethodSpec::parse(n));
      } catch (const InvalidArgument& ex) {
        throw ConfigurationError(ex.what());
      }
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigurationError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::exception& e) {
    throw ConfigurationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["sim"] = {{"process", to_string(c.sim.process)},
              {"grid", to_json(c.sim.grid)},
              {"m", c.sim.m},
              {"n", c.sim.n},
              {"bounds", to_json(c.sim.bounds)},
              {"seed", c.sim.seed},
              {"n_spectral", c.sim.br.n_spectral},
              {"anchor", c.sim.br.anchor == SpectralAnchor::Corner ? "corner" : "normalized-random"}};
  Json t = to_json(c.train);
  t["filters"] = c.arch.filters;
  t["dense"] = c.arch.dense;
  j["train"] = t;
  j["calibrate"] = {{"m", c.calibrate.m},
                    {"n", c.calibrate.n},
                    {"bounds", to_json(c.calibrate.bounds)},
                    {"chunk_size", c.calibrate.chunk_size}};
  std::vector<std::string> methods;
  for (const auto& m : c.eval.methods) methods.push_back(m.name());
  j["eval"] = {{"space", to_json(c.eval.space)},
               {"true_counts", c.eval.true_counts},
               {"replicates", c.eval.replicates},
               {"surface_counts", c.eval.surface_counts},
               {"alpha", c.eval.alpha},
               {"realizations", c.eval.realizations},
               {"methods", methods},
               {"seed", c.eval.seed},
               {"godambe_fields", c.eval.godambe_fields},
               {"fd_step", c.eval.fd_step},
               {"sqrt_method", to_string(c.eval.sqrt_method)},
               {"timing_fields", c.eval.timing_fields},
               {"timing_deltas", c.eval.timing_deltas},
               {"timing_threads", c.eval.timing_threads}};
  return j;
}

}  // namespace nls
