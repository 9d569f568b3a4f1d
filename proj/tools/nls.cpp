// nls: command-line front end for the neural likelihood toolkit.
//
//   nls simulate  --config C --out DIR [--calibration]
//   nls train     --config C --data DIR --out DIR
//   nls calibrate --config C --model DIR [--data DIR] --out DIR
//   nls surface   --config C --method M (--field F | --data DIR --index K) --out DIR
//   nls mle       --surface DIR --out DIR
//   nls region    --surface DIR --alpha A --out DIR
//   nls study     --config C [--model DIR] [--platt DIR] --out DIR
//   nls bench     --config C [--model DIR] --out DIR

#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "nls/br_pairwise.hpp"
#include "nls/calibrate.hpp"
#include "nls/config.hpp"
#include "nls/errors.hpp"
#include "nls/eval.hpp"
#include "nls/gp_likelihood.hpp"
#include "nls/inference.hpp"
#include "nls/neural.hpp"
#include "nls/parallel.hpp"
#include "nls/rng.hpp"
#include "nls/simulate.hpp"
#include "nls/tensor_io.hpp"

namespace fs = std::filesystem;
using nls::Json;

namespace {

constexpr const char* kVersion = "1.0.0";

void setup_logging() {
  auto log = spdlog::stderr_logger_st("nls");
  log->set_pattern(R"({"time":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","msg":"%v"})");
  log->set_level(spdlog::level::warn);
  if (const char* env = std::getenv("NL_LOG")) {
    const std::string v = env;
    if (v == "debug") log->set_level(spdlog::level::debug);
    if (v == "info") log->set_level(spdlog::level::info);
  }
  spdlog::set_default_logger(log);
}

// 64-bit FNV-1a.
struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void add(const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 0x100000001b3ull;
    }
  }
  void add(const std::string& s) { add(s.data(), s.size()); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

void hash_file(Fnv& f, const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw nls::ConfigurationError("cannot read " + p.string());
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    f.add(buf, static_cast<std::size_t>(is.gcount()));
  }
}

// Files of a directory are hashed in sorted relative-path order.
std::string hash_path(const fs::path& p) {
  Fnv f;
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), p));
    }
    std::sort(files.begin(), files.end());
    for (const auto& r : files) {
      f.add(r.generic_string());
      hash_file(f, p / r);
    }
  } else {
    hash_file(f, p);
  }
  return f.hex();
}

// Output directory written under a temporary name and renamed into place on
// commit; an uncommitted directory is removed.
class Output {
 public:
  explicit Output(fs::path final) : final_(std::move(final)) {
    if (final_.empty()) throw nls::ConfigurationError("--out is required");
    const fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
    fs::create_directories(parent);
    tmp_ = parent / ("." + final_.filename().string() + ".tmp-" + std::to_string(::getpid()));
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  Output(const Output&) = delete;
  Output& operator=(const Output&) = delete;
  ~Output() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }
  const fs::path& dir() const { return tmp_; }
  fs::path operator/(const char* name) const { return tmp_ / name; }

  void commit(const Json& provenance) {
    write_json(tmp_ / "provenance.json", provenance);
    fs::remove_all(final_);
    fs::rename(tmp_, final_);
    committed_ = true;
    spdlog::info("wrote {}", final_.string());
  }

  static void write_json(const fs::path& p, const Json& j) {
    std::ofstream os(p);
    if (!os) throw nls::ConfigurationError("cannot write " + p.string());
    os << j.dump(2) << "\n";
  }

 private:
  fs::path final_;
  fs::path tmp_;
  bool committed_ = false;
};

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string process;
  std::optional<int> batch;
  std::optional<double> delta;
  std::optional<double> alpha;
  bool no_calibration = false;
  bool calibration_set = false;
  std::string data;
  std::string model;
  std::string platt;
  std::string surface;
  std::string field;
  std::string method = "neural";
  std::optional<std::size_t> index;
};

nls::RunConfig load_config(const Options& o) {
  nls::RunConfig c;
  if (!o.config.empty()) {
    c = nls::load_run_config(o.config);
    if (!o.process.empty() && nls::process_from_string(o.process) != c.sim.process) {
      throw nls::ConfigurationError("--process " + o.process + " contradicts the config's sim.process");
    }
  } else {
    c = nls::RunConfig::defaults(o.process.empty() ? nls::ProcessKind::Gaussian : nls::process_from_string(o.process));
  }
  if (o.seed) c.set_seed(*o.seed);
  if (o.batch) c.train.batch_size = *o.batch;
  if (o.alpha) c.eval.alpha = *o.alpha;
  c.validate();
  return c;
}

Json provenance(const std::string& command, const nls::RunConfig* config, const std::vector<std::string>& inputs) {
  Json j;
  j["command"] = command;
  j["version"] = kVersion;
  if (config) {
    const Json cj = nls::to_json(*config);
    Fnv f;
    f.add(cj.dump());
    j["config"] = cj;
    j["config_hash"] = f.hex();
    j["seed"] = config->seed;
  }
  Json in = Json::object();
  for (const auto& p : inputs) {
    if (!p.empty()) in[p] = hash_path(p);
  }
  j["inputs"] = in;
  j["hash"] = "fnv1a64";
  return j;
}

void require(const std::string& value, const char* flag, const char* what) {
  if (value.empty()) throw nls::ConfigurationError(std::string(what) + " is missing: pass " + flag);
}

nls::PairDataset simulate_dataset(const nls::RunConfig& c, bool calibration) {
  nls::SimConfig s = c.sim;
  std::uint64_t perm = c.permutation_seed();
  if (calibration) {
    s.m = c.calibrate.m;
    s.n = c.calibrate.n;
    s.bounds = c.calibrate.bounds;
    s.seed = c.calibration_seed();
    perm = c.calibration_permutation_seed();
  }
  spdlog::info("simulating {} x {} {} fields", s.m, s.n, nls::to_string(s.process));
  return nls::build_second_class(nls::build_first_class(s), perm);
}

int cmd_simulate(const Options& o) {
  const auto c = load_config(o);
  const auto d = simulate_dataset(c, o.calibration_set);
  Output out(o.out);
  nls::write_dataset(out.dir(), d);
  auto p = provenance("simulate", &c, {o.config});
  p["calibration_set"] = o.calibration_set;
  out.commit(p);
  return 0;
}

int cmd_train(const Options& o) {
  const auto c = load_config(o);
  require(o.data, "--data", "training dataset");
  const auto d = nls::read_dataset(o.data);
  if (d.grid.side != c.arch.input_side) {
    throw nls::ConfigurationError("dataset grid side " + std::to_string(d.grid.side) +
                                  " differs from the configured input side " + std::to_string(c.arch.input_side));
  }
  if (d.process != c.sim.process) throw nls::ConfigurationError("dataset process differs from the config");
  nls::TrainingLog log;
  const auto model = nls::train(d, c.arch, c.train, &log, nullptr, [](const nls::EpochRecord& e) {
    spdlog::info("attempt {} epoch {} lr {:.3g} train {:.5f} validation {:.5f}", e.attempt, e.epoch, e.lr,
                 e.train_loss, e.validation_loss);
  });
  if (log.plateaued) spdlog::warn("training ended on the log(2) plateau after {} attempts", log.attempts);
  Output out(o.out);
  nls::save_model(out.dir(), model);
  Json lj;
  lj["attempts"] = log.attempts;
  lj["plateaued"] = log.plateaued;
  Json ep = Json::array();
  for (const auto& e : log.epochs) {
    ep.push_back({{"attempt", e.attempt},
                  {"epoch", e.epoch},
                  {"lr", e.lr},
                  {"train_loss", e.train_loss},
                  {"validation_loss", e.validation_loss}});
  }
  lj["epochs"] = ep;
  Output::write_json(out / "training_log.json", lj);
  out.commit(provenance("train", &c, {o.config, o.data}));
  return 0;
}

int cmd_calibrate(const Options& o) {
  const auto c = load_config(o);
  require(o.model, "--model", "trained model");
  const auto model = nls::load_model(o.model);
  const auto d = o.data.empty() ? simulate_dataset(c, true) : nls::read_dataset(o.data);
  if (d.grid.side != model.net.architecture().input_side) {
    throw nls::ConfigurationError("calibration fields do not match the model input side");
  }
  std::vector<double> probs;
  std::vector<int> labels;
  nls::classifier_outputs(model, d, probs, labels, c.calibrate.chunk_size);
  auto platt = nls::fit_platt(probs, labels);
  platt.id = hash_path(o.model).substr(0, 12);
  if (!platt.monotone()) spdlog::warn("Platt slope {} is not positive; calibration reverses the ordering", platt.beta1);
  Output out(o.out);
  nls::save_platt(out / "platt.json", platt);
  Json rel = Json::array();
  for (const auto& b : nls::reliability_curve(probs, labels, 10)) {
    rel.push_back({{"lower", b.lower},
                   {"upper", b.upper},
                   {"count", b.count},
                   {"mean_predicted", b.empty ? Json(nullptr) : Json(b.mean_predicted)},
                   {"frequency", b.empty ? Json(nullptr) : Json(b.frequency)}});
  }
  Output::write_json(out / "reliability.json",
                     {{"bins", rel},
                      {"log_loss_raw", nls::log_loss(probs, labels)},
                      {"pairs", probs.size()}});
  out.commit(provenance("calibrate", &c, {o.config, o.model, o.data}));
  return 0;
}

nls::PlattModel load_platt_arg(const std::string& p) {
  return nls::load_platt(fs::is_directory(p) ? fs::path(p) / "platt.json" : fs::path(p));
}

nls::SpatialField load_field(const Options& o, const nls::RunConfig& c, std::string& id) {
  if (!o.field.empty() && !o.data.empty()) throw nls::ConfigurationError("pass either --field or --data, not both");
  if (!o.data.empty()) {
    if (!o.index) throw nls::ConfigurationError("--data needs --index");
    const auto d = nls::read_dataset(o.data);
    if (*o.index >= d.fields.size()) {
      throw nls::ConfigurationError("--index " + std::to_string(*o.index) + " is out of range (dataset has " +
                                    std::to_string(d.fields.size()) + " fields)");
    }
    id = fs::path(o.data).filename().string() + ":" + std::to_string(*o.index);
    return d.fields[*o.index];
  }
  require(o.field, "--field or --data", "input field");
  const auto t = nls::read_tensor(o.field);
  const auto side = static_cast<std::int64_t>(c.sim.grid.side);
  const bool square = (t.shape.size() == 2 && t.shape[0] == side && t.shape[1] == side) ||
                      (t.shape.size() == 3 && t.shape[0] == 1 && t.shape[1] == side && t.shape[2] == side);
  if (!square) {
    throw nls::FormatError("field tensor " + o.field + " does not have shape [" + std::to_string(side) + ", " +
                           std::to_string(side) + "]");
  }
  id = fs::path(o.field).filename().string();
  try {
    return nls::SpatialField(c.sim.grid, std::vector<double>(t.data.begin(), t.data.end()));
  } catch (const nls::InvalidArgument& e) {
    throw nls::FormatError(o.field + ": " + e.what());
  }
}

int cmd_surface(const Options& o) {
  const auto c = load_config(o);
  std::string id;
  const auto y = load_field(o, c, id);
  const auto grid = c.eval.surface_grid();
  nls::Surface s;
  std::vector<std::string> inputs{o.config, o.field, o.data};
  if (o.method == "neural") {
    require(o.model, "--model", "trained model");
    const auto model = nls::load_model(o.model);
    if (model.process != c.sim.process) throw nls::ConfigurationError("model was trained on a different process");
    std::optional<nls::PlattModel> platt;
    if (!o.no_calibration) {
      if (o.platt.empty()) {
        throw nls::ConfigurationError("calibration model is missing: pass --platt or --no-calibration");
      }
      platt = load_platt_arg(o.platt);
    }
    s = nls::neural_surface(model, platt ? &*platt : nullptr, y, grid);
    inputs.push_back(o.model);
    inputs.push_back(o.platt);
  } else if (o.method == "gp-exact") {
    if (c.sim.process != nls::ProcessKind::Gaussian) throw nls::ConfigurationError("gp-exact needs a Gaussian config");
    s = nls::gp_surface(y, grid);
  } else if (o.method == "pairwise" || o.method == "pairwise-adjusted") {
    if (c.sim.process != nls::ProcessKind::BrownResnick) {
      throw nls::ConfigurationError(o.method + " needs a Brown-Resnick config");
    }
    if (!o.delta) throw nls::ConfigurationError(o.method + " needs --delta");
    s = nls::pairwise_surface(y, grid, *o.delta);
    if (o.method == "pairwise-adjusted") {
      const auto mle = nls::grid_mle(s);
      spdlog::info("estimating the Godambe adjustment at ({}, {})", mle.theta[0], mle.theta[1]);
      const auto adj = nls::adjustment_matrix(
          nls::estimate_godambe(mle.theta, c.sim.grid, *o.delta, c.eval.godambe_fields,
                                nls::derive_seed(c.eval.seed, {nls::stream::kGodambe}), c.eval.fd_step, c.sim.br),
          c.eval.sqrt_method);
      s = nls::adjusted_surface(y, s, adj);
    }
  } else {
    throw nls::ConfigurationError("unknown --method '" + o.method +
                                  "' (neural, gp-exact, pairwise, pairwise-adjusted)");
  }
  s.metadata.field_id = id;
  if (s.metadata.failed_points > 0) spdlog::warn("{} grid points failed and hold -inf", s.metadata.failed_points);
  Output out(o.out);
  nls::save_surface(out.dir(), s);
  auto p = provenance("surface", &c, inputs);
  p["kind"] = nls::to_string(s.kind);
  out.commit(p);
  return 0;
}

int cmd_mle(const Options& o) {
  require(o.surface, "--surface", "surface");
  const auto s = nls::load_surface(o.surface);
  const auto e = nls::grid_mle(s);
  Output out(o.out);
  Output::write_json(out / "mle.json", {{"index", e.index},
                                        {"theta", e.theta.values},
                                        {"value", e.value},
                                        {"kind", nls::to_string(s.kind)},
                                        {"field_id", s.metadata.field_id}});
  out.commit(provenance("mle", nullptr, {o.surface}));
  return 0;
}

int cmd_region(const Options& o) {
  require(o.surface, "--surface", "surface");
  const auto s = nls::load_surface(o.surface);
  const auto r = nls::confidence_region(s, o.alpha.value_or(0.05));
  Output out(o.out);
  nls::save_region(out.dir(), r);
  auto p = provenance("region", nullptr, {o.surface});
  p["members"] = r.member_count();
  p["area"] = nls::region_area(r);
  out.commit(p);
  return 0;
}

int cmd_study(const Options& o) {
  const auto c = load_config(o);
  std::optional<nls::CnnModel> model;
  std::optional<nls::PlattModel> platt;
  if (!o.model.empty()) model = nls::load_model(o.model);
  if (!o.platt.empty()) platt = load_platt_arg(o.platt);
  const auto r = nls::run_study(c.eval, {model ? &*model : nullptr, platt ? &*platt : nullptr});
  for (const auto& m : r.methods) {
    spdlog::info("{}: coverage {:.3f}, area {:.4f}, rmse {:.4f}", m.method.name(), m.mean_coverage, m.mean_area,
                 m.metrics.rmse);
  }
  Output out(o.out);
  nls::write_study_csv(out / "study.csv", r);
  nls::write_study_json(out / "study.json", r);
  out.commit(provenance("study", &c, {o.config, o.model, o.platt}));
  return 0;
}

int cmd_bench(const Options& o) {
  const auto c = load_config(o);
  nls::CnnModel model;
  if (!o.model.empty()) {
    model = nls::load_model(o.model);
  } else {
    // Timings do not depend on the weights.
    model.net = nls::Network<float>(nls::Architecture::for_side(c.eval.grid.side));
    model.net.initialize(nls::derive_seed(c.eval.seed, {nls::stream::kInit}));
    spdlog::info("no --model given; timing a randomly initialized network");
  }
  const auto t = nls::run_timing_study(c.eval, model);
  Output out(o.out);
  nls::write_timing_json(out / "timing.json", t);
  auto p = provenance("bench", &c, {o.config, o.model});
  p["model"] = o.model.empty() ? "random-init" : "loaded";
  out.commit(p);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Neural likelihood surfaces for spatial processes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options o;

  auto common = [&](CLI::App* s, bool config) {
    s->add_option("--out", o.out, "Output directory")->required();
    s->add_option("--threads", o.threads, "Parallelism budget (default: all cores)")->check(CLI::PositiveNumber);
    if (config) {
      s->add_option("--config", o.config, "Run configuration (JSON)");
      s->add_option("--seed", o.seed, "Root seed (overrides the config)");
      s->add_option("--process", o.process, "gp or br when no config is given");
    }
  };

  auto* sim = app.add_subcommand("simulate", "Simulate a two-class training dataset");
  common(sim, true);
  sim->add_flag("--calibration", o.calibration_set, "Simulate the calibration set instead");

  auto* tr = app.add_subcommand("train", "Train the classifier");
  common(tr, true);
  tr->add_option("--data", o.data, "Dataset directory")->required();
  tr->add_option("--batch", o.batch, "Mini-batch size")->check(CLI::PositiveNumber);

  auto* cal = app.add_subcommand("calibrate", "Fit Platt scaling on a calibration set");
  common(cal, true);
  cal->add_option("--model", o.model, "Model directory")->required();
  cal->add_option("--data", o.data, "Calibration dataset (simulated from the config when absent)");

  auto* sur = app.add_subcommand("surface", "Evaluate a likelihood surface for one field");
  common(sur, true);
  sur->add_option("--method", o.method, "neural, gp-exact, pairwise or pairwise-adjusted");
  sur->add_option("--model", o.model, "Model directory (neural)");
  sur->add_option("--platt", o.platt, "Calibration file or directory (neural)");
  sur->add_flag("--no-calibration", o.no_calibration, "Uncalibrated neural surface");
  sur->add_option("--delta", o.delta, "Pairwise distance cutoff")->check(CLI::PositiveNumber);
  sur->add_option("--field", o.field, "Field tensor (.nlt, shape [side, side])");
  sur->add_option("--data", o.data, "Dataset directory to take the field from");
  sur->add_option("--index", o.index, "Field index within --data");

  auto* mle = app.add_subcommand("mle", "Grid maximum of a surface");
  common(mle, false);
  mle->add_option("--surface", o.surface, "Surface directory")->required();

  auto* reg = app.add_subcommand("region", "Approximate confidence region of a surface");
  common(reg, false);
  reg->add_option("--surface", o.surface, "Surface directory")->required();
  reg->add_option("--alpha", o.alpha, "Significance level")->check(CLI::Range(0.0, 1.0));

  auto* st = app.add_subcommand("study", "Coverage, area and estimation study");
  common(st, true);
  st->add_option("--model", o.model, "Model directory");
  st->add_option("--platt", o.platt, "Calibration file or directory");
  st->add_option("--alpha", o.alpha, "Significance level")->check(CLI::Range(0.0, 1.0));

  auto* be = app.add_subcommand("bench", "Surface evaluation timings");
  common(be, true);
  be->add_option("--model", o.model, "Model directory (random weights when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (o.threads) nls::set_thread_budget(*o.threads);
    if (sim->parsed()) return cmd_simulate(o);
    if (tr->parsed()) return cmd_train(o);
    if (cal->parsed()) return cmd_calibrate(o);
    if (sur->parsed()) return cmd_surface(o);
    if (mle->parsed()) return cmd_mle(o);
    if (reg->parsed()) return cmd_region(o);
    if (st->parsed()) return cmd_study(o);
    if (be->parsed()) return cmd_bench(o);
  } catch (const nls::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return nls::exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
