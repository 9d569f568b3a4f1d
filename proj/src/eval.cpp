#include "nls/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>

#include "nls/config.hpp"
#include "nls/errors.hpp"
#include "nls/gp_likelihood.hpp"
#include "nls/inference.hpp"
#include "nls/parallel.hpp"
#include "nls/rng.hpp"

namespace nls {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

bool is_neural(SurfaceKind k) { return k == SurfaceKind::NeuralCalibrated || k == SurfaceKind::NeuralUncalibrated; }
bool is_pairwise(SurfaceKind k) { return k == SurfaceKind::Pairwise || k == SurfaceKind::PairwiseAdjusted; }

struct Outcome {
  Eigen::Vector2d estimate = Eigen::Vector2d::Zero();
  bool covered = false;
  double area = 0.0;
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

class ThreadBudgetScope {
 public:
  explicit ThreadBudgetScope(int threads) : saved_(thread_budget()) { set_thread_budget(threads); }
  ~ThreadBudgetScope() { set_thread_budget(saved_); }
  ThreadBudgetScope(const ThreadBudgetScope&) = delete;
  ThreadBudgetScope& operator=(const ThreadBudgetScope&) = delete;

 private:
  int saved_;
};

TimingResult summarize(std::string method, std::optional<double> delta, const std::vector<double>& t) {
  TimingResult r;
  r.method = std::move(method);
  r.delta = delta;
  r.fields = t.size();
  r.mean_seconds = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  double ss = 0.0;
  for (double x : t) ss += (x - r.mean_seconds) * (x - r.mean_seconds);
  r.sd_seconds = t.size() > 1 ? std::sqrt(ss / static_cast<double>(t.size() - 1)) : 0.0;
  return r;
}

std::vector<SpatialField> simulate_fields(ProcessKind process, const Parameter& theta, const GridSpec& grid,
                                          const BrownResnickOptions& br, std::uint64_t seed, std::uint64_t group,
                                          std::size_t count) {
  std::vector<SpatialField> out(count);
  if (process == ProcessKind::Gaussian) {
    const GaussianSimulator sim(theta, grid);
    parallel_for(count, [&](std::size_t f) { out[f] = sim.sample(derive_seed(seed, {stream::kEval, group, f})); });
  } else {
    const BrownResnickSimulator sim(theta, grid, br);
    parallel_for(count, [&](std::size_t f) { out[f] = sim.sample(derive_seed(seed, {stream::kEval, group, f})); });
  }
  return out;
}

}  // namespace

std::string MethodSpec::name() const {
  std::string s = to_string(kind);
  if (delta) {
    std::ostringstream os;
    os << *delta;
    s += ":" + os.str();
  }
  return s;
}

MethodSpec MethodSpec::parse(const std::string& s) {
  MethodSpec m;
  const auto colon = s.find(':');
  try {
    m.kind = surface_kind_from_string(s.substr(0, colon));
  } catch (const FormatError&) {
    throw InvalidArgument("unknown method '" + s + "'");
  }
  if (colon != std::string::npos) {
    try {
      std::size_t used = 0;
      const std::string tail = s.substr(colon + 1);
      m.delta = std::stod(tail, &used);
      if (used != tail.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw InvalidArgument("invalid method delta in '" + s + "'");
    }
  }
  if (is_pairwise(m.kind) != m.delta.has_value()) {
    throw InvalidArgument("method '" + s + "': pairwise methods need ':delta', other methods take none");
  }
  if (m.delta && !(*m.delta > 0.0)) throw InvalidArgument("method '" + s + "': delta must be positive");
  return m;
}

void EvalConfig::validate() const {
  grid.validate();
  if (space.size() != 2 || true_counts.size() != 2 || surface_counts.size() != 2) {
    throw InvalidArgument("evaluation space, true_counts and surface_counts must be two-dimensional");
  }
  for (const auto& [lo, hi] : space) {
    if (!(hi > lo) || lo < 0.0) throw InvalidArgument("evaluation space must be positive and increasing");
  }
  for (int c : true_counts) {
    if (c < 1) throw InvalidArgument("true_counts must be >= 1");
  }
  for (int c : surface_counts) {
    if (c < 1) throw InvalidArgument("surface_counts must be >= 1");
  }
  if (replicates < 1 || realizations < 1) throw InvalidArgument("replicates and realizations must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("alpha must lie in (0, 1)");
  if (methods.empty()) throw InvalidArgument("at least one method is required");
  for (const auto& m : methods) {
    if (m.kind == SurfaceKind::GpExact && process != ProcessKind::Gaussian) {
      throw InvalidArgument("gp-exact needs Gaussian process fields");
    }
    if (is_pairwise(m.kind) && process != ProcessKind::BrownResnick) {
      throw InvalidArgument("pairwise methods need Brown-Resnick fields");
    }
    if (m.kind == SurfaceKind::PairwiseAdjusted && realizations != 1) {
      throw InvalidArgument("pairwise-adjusted supports a single realization per estimate");
    }
  }
  if (godambe_fields < 1 || !(fd_step > 0.0)) throw InvalidArgument("invalid Godambe settings");
  if (timing_fields < 1 || timing_threads < 1) throw InvalidArgument("invalid timing settings");
}

ParameterGrid EvalConfig::surface_grid() const { return make_parameter_grid(space, surface_counts); }

std::vector<Parameter> EvalConfig::true_parameters() const {
  const ParameterGrid truth = make_parameter_grid(space, true_counts);
  const ParameterGrid surf = surface_grid();
  const auto names = parameter_names(process);
  std::vector<Parameter> out;
  for (std::size_t l = 0; l < truth.size(); ++l) {
    out.emplace_back(surf.point(surf.nearest_index(truth.point(l))), names);
  }
  return out;
}

ErrorMetrics error_metrics(const std::vector<std::vector<Eigen::Vector2d>>& groups) {
  ErrorMetrics m;
  double sq = 0.0, ab = 0.0;
  std::size_t n = 0;
  std::vector<double> medians;
  for (const auto& g : groups) {
    if (g.empty()) continue;
    std::vector<double> norms;
    for (const auto& e : g) {
      const double d = e.norm();
      sq += d * d;
      ab += d;
      norms.push_back(d);
      ++n;
    }
    medians.push_back(median(std::move(norms)));
  }
  if (n == 0) throw InvalidArgument("no estimation errors to summarize");
  m.rmse = std::sqrt(sq / static_cast<double>(n));
  m.mae = ab / static_cast<double>(n);
  m.mmae = median(std::move(medians));
  return m;
}

Interval binomial_interval(std::size_t successes, std::size_t trials, double level) {
  if (trials == 0 || successes > trials) throw InvalidArgument("binomial interval needs 0 <= successes <= trials > 0");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("confidence level must lie in (0, 1)");
  const double a = 1.0 - level;
  const auto x = static_cast<double>(successes);
  const auto n = static_cast<double>(trials);
  Interval ci;
  ci.lower = successes == 0 ? 0.0 : boost::math::ibeta_inv(x, n - x + 1.0, a / 2.0);
  ci.upper = successes == trials ? 1.0 : boost::math::ibeta_inv(x + 1.0, n - x, 1.0 - a / 2.0);
  return ci;
}

StudyResult run_study(const EvalConfig& config, const StudyModels& models) {
  config.validate();
  for (const auto& m : config.methods) {
    if (is_neural(m.kind) && !models.model) throw ConfigurationError("method " + m.name() + " needs a trained model");
    if (m.kind == SurfaceKind::NeuralCalibrated && !models.platt) {
      throw ConfigurationError("method " + m.name() + " needs a calibration model");
    }
    if (is_neural(m.kind) && models.model->net.architecture().input_side != config.grid.side) {
      throw ConfigurationError("model input side does not match the evaluation grid");
    }
  }
  const ParameterGrid grid = config.surface_grid();
  const std::vector<Parameter> truths = config.true_parameters();
  const auto reps = static_cast<std::size_t>(config.replicates);
  const auto rz = static_cast<std::size_t>(config.realizations);
  const std::size_t per_truth = reps * rz;

  std::vector<std::vector<SpatialField>> fields(truths.size());
  for (std::size_t t = 0; t < truths.size(); ++t) {
    fields[t] = simulate_fields(config.process, truths[t], config.grid, config.br, config.seed, t, per_truth);
  }

  StudyResult result;
  for (const auto& method : config.methods) {
    MethodResult mr;
    mr.method = method;
    std::vector<std::vector<Eigen::Vector2d>> errors(truths.size());
    std::optional<PairScheme> scheme;
    if (method.delta) scheme = make_pair_scheme(config.grid, *method.delta);

    for (std::size_t t = 0; t < truths.size(); ++t) {
      PointResult pr;
      pr.truth = truths[t];
      std::optional<AdjustmentModel> adj;
      if (method.kind == SurfaceKind::PairwiseAdjusted) {
        try {
          adj = adjustment_matrix(estimate_godambe(truths[t], config.grid, *method.delta, config.godambe_fields,
                                                  derive_seed(config.seed, {stream::kGodambe, t}), config.fd_step,
                                                  config.br),
                                  config.sqrt_method);
        } catch (const NumericError&) {
          pr.masked = true;
        }
      }
      if (pr.masked) {
        mr.points.push_back(std::move(pr));
        continue;
      }

      std::vector<Surface> surfaces(per_truth);
      const auto& fs = fields[t];
      if (method.kind == SurfaceKind::GpExact) {
        surfaces = gp_surfaces(fs, grid);
      } else {
        parallel_for(per_truth, [&](std::size_t f) {
          switch (method.kind) {
            case SurfaceKind::NeuralCalibrated:
              surfaces[f] = neural_surface(*models.model, models.platt, fs[f], grid);
              break;
            case SurfaceKind::NeuralUncalibrated:
              surfaces[f] = neural_surface(*models.model, nullptr, fs[f], grid);
              break;
            case SurfaceKind::Pairwise:
              surfaces[f] = pairwise_surface(fs[f], grid, *scheme);
              break;
            case SurfaceKind::PairwiseAdjusted:
              surfaces[f] = adjusted_surface(fs[f], pairwise_surface(fs[f], grid, *scheme), *adj);
              break;
            case SurfaceKind::GpExact:
              break;
          }
        });
      }
      std::vector<Outcome> outcomes(reps);
      parallel_for(reps, [&](std::size_t r) {
        const Surface s = multi_surface(std::span<const Surface>(surfaces.data() + r * rz, rz));
        const GridEstimate est = grid_mle(s);
        const ConfidenceRegion region = confidence_region(s, config.alpha);
        outcomes[r].estimate = Eigen::Vector2d(est.theta[0], est.theta[1]);
        outcomes[r].covered = region.contains(truths[t].values);
        outcomes[r].area = region_area(region);
      });
      std::vector<double> norms;
      double area = 0.0;
      const Eigen::Vector2d truth(truths[t][0], truths[t][1]);
      for (const auto& o : outcomes) {
        pr.estimates.emplace_back(std::vector<double>{o.estimate(0), o.estimate(1)}, truths[t].names);
        pr.covered += o.covered ? 1 : 0;
        area += o.area;
        errors[t].push_back(o.estimate - truth);
        norms.push_back((o.estimate - truth).norm());
      }
      pr.trials = reps;
      pr.coverage = static_cast<double>(pr.covered) / static_cast<double>(reps);
      pr.coverage_ci = binomial_interval(pr.covered, reps);
      pr.mean_area = area / static_cast<double>(reps);
      const ErrorMetrics local = error_metrics({errors[t]});
      pr.rmse = local.rmse;
      pr.mae = local.mae;
      pr.median_error = median(norms);
      mr.points.push_back(std::move(pr));
    }

    std::size_t unmasked = 0;
    for (const auto& p : mr.points) {
      if (p.masked) continue;
      ++unmasked;
      mr.mean_coverage += p.coverage;
      mr.mean_area += p.mean_area;
    }
    if (unmasked > 0) {
      mr.mean_coverage /= static_cast<double>(unmasked);
      mr.mean_area /= static_cast<double>(unmasked);
      mr.metrics = error_metrics(errors);
    } else {
      mr.mean_coverage = mr.mean_area = std::numeric_limits<double>::quiet_NaN();
      mr.metrics = {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                    std::numeric_limits<double>::quiet_NaN()};
    }
    result.methods.push_back(std::move(mr));
  }
  return result;
}

StudyResult run_estimation_study(const EvalConfig& config, const StudyModels& models) { return run_study(config, models); }

StudyResult run_coverage_study(const EvalConfig& config, const StudyModels& models) { return run_study(config, models); }

std::vector<TimingResult> run_timing_study(const EvalConfig& config, const CnnModel& model) {
  if (config.grid.side != model.net.architecture().input_side) {
    throw ConfigurationError("model input side does not match the timing grid");
  }
  if (config.timing_fields < 1 || config.timing_threads < 1) throw InvalidArgument("invalid timing settings");
  const ThreadBudgetScope scope(config.timing_threads);
  const ParameterGrid grid = config.surface_grid();
  const auto n = static_cast<std::size_t>(config.timing_fields);
  // Centre of the evaluation space.
  const Parameter mid({0.5 * (config.space[0].first + config.space[0].second),
                       0.5 * (config.space[1].first + config.space[1].second)});
  const auto gp_fields = simulate_fields(ProcessKind::Gaussian, mid, config.grid, config.br, config.seed, 1u << 20, n + 1);
  std::vector<TimingResult> out;

  auto time_each = [&](const std::vector<SpatialField>& fs, auto&& fn) {
    fn(fs[n]);  // warm-up on an extra field
    std::vector<double> t;
    for (std::size_t f = 0; f < n; ++f) {
      Stopwatch sw;
      fn(fs[f]);
      t.push_back(sw.seconds());
    }
    return t;
  };
  out.push_back(summarize("gp-exact", std::nullopt,
                          time_each(gp_fields, [&](const SpatialField& y) { (void)gp_surface(y, grid); })));
  out.push_back(summarize("neural-unvectorized", std::nullopt, time_each(gp_fields, [&](const SpatialField& y) {
                            (void)neural_surface_unvectorized(model, nullptr, y, grid);
                          })));
  out.push_back(summarize("neural-vectorized", std::nullopt, time_each(gp_fields, [&](const SpatialField& y) {
                            (void)neural_surface(model, nullptr, y, grid);
                          })));
  if (!config.timing_deltas.empty()) {
    const auto br_fields =
        simulate_fields(ProcessKind::BrownResnick, mid, config.grid, config.br, config.seed, (1u << 20) + 1, n + 1);
    for (double delta : config.timing_deltas) {
      out.push_back(summarize("pairwise", delta, time_each(br_fields, [&](const SpatialField& y) {
                                (void)pairwise_surface(y, grid, delta);
                              })));
    }
  }
  return out;
}

void write_study_csv(const std::filesystem::path& path, const StudyResult& result) {
  std::ofstream os(path);
  os << std::setprecision(10);
  os << "method,delta,theta0,theta1,replicates,coverage,coverage_lo,coverage_hi,mean_area,rmse,mae,mmae,masked\n";
  for (const auto& m : result.methods) {
    for (const auto& p : m.points) {
      os << to_string(m.method.kind) << ',';
      if (m.method.delta) os << *m.method.delta;
      os << ',' << p.truth[0] << ',' << p.truth[1] << ',' << p.trials << ',';
      if (p.masked) {
        os << ",,,,,,,1\n";
        continue;
      }
      os << p.coverage << ',' << p.coverage_ci.lower << ',' << p.coverage_ci.upper << ',' << p.mean_area << ','
         << p.rmse << ',' << p.mae << ',' << p.median_error << ",0\n";
    }
  }
  if (!os) throw FormatError("cannot write " + path.string());
}

void write_study_json(const std::filesystem::path& path, const StudyResult& result) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  Json j = Json::array();
  for (const auto& m : result.methods) {
    std::size_t masked = 0;
    for (const auto& p : m.points) masked += p.masked ? 1 : 0;
    j.push_back({{"method", m.method.name()},
                 {"points", m.points.size()},
                 {"masked_points", masked},
                 {"mean_coverage", num(m.mean_coverage)},
                 {"mean_area", num(m.mean_area)},
                 {"rmse", num(m.metrics.rmse)},
                 {"mae", num(m.metrics.mae)},
                 {"mmae", num(m.metrics.mmae)}});
  }
  std::ofstream os(path);
  os << Json{{"methods", j}}.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + path.string());
}

void write_timing_json(const std::filesystem::path& path, const std::vector<TimingResult>& timings) {
  Json j = Json::array();
  for (const auto& t : timings) {
    Json e{{"method", t.method}, {"fields", t.fields}, {"mean_seconds", t.mean_seconds}, {"sd_seconds", t.sd_seconds}};
    if (t.delta) e["delta"] = *t.delta;
    j.push_back(e);
  }
  std::ofstream os(path);
  os << Json{{"timings", j}}.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + path.string());
}

}  // namespace nls
