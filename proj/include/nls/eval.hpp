#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nls/br_pairwise.hpp"
#include "nls/calibrate.hpp"
#include "nls/core.hpp"
#include "nls/neural.hpp"
#include "nls/simulate.hpp"

namespace nls {

struct MethodSpec {
  SurfaceKind kind = SurfaceKind::GpExact;
  std::optional<double> delta;  // pairwise methods only

  std::string name() const;
  static MethodSpec parse(const std::string& s);
};

struct EvalConfig {
  ProcessKind process = ProcessKind::Gaussian;
  GridSpec grid;
  /// Evaluation parameter space; true parameters and the surface grid cover it.
  Bounds space{{0.0, 2.0}, {0.0, 2.0}};
  std::vector<int> true_counts{9, 9};
  int replicates = 100;
  std::vector<int> surface_counts{40, 40};
  double alpha = 0.05;
  /// Independent realizations combined into each estimate.
  int realizations = 1;
  std::vector<MethodSpec> methods;
  std::uint64_t seed = 0;
  BrownResnickOptions br;
  int godambe_fields = 1000;
  double fd_step = 0.05;
  SqrtMethod sqrt_method = SqrtMethod::Cholesky;
  // Timing study.
  int timing_fields = 50;
  std::vector<double> timing_deltas{1.0, 2.0, 5.0, 10.0};
  int timing_threads = 1;

  void validate() const;
  ParameterGrid surface_grid() const;
  /// True parameters: the true_counts lattice over space, each snapped to the
  /// nearest surface-grid point.
  std::vector<Parameter> true_parameters() const;
};

/// Models used by neural methods; missing entries make those methods fail
/// with ConfigurationError.
struct StudyModels {
  const CnnModel* model = nullptr;
  const PlattModel* platt = nullptr;
};

struct ErrorMetrics {
  double rmse = 0.0;  // sqrt(mean |e|^2)
  double mae = 0.0;   // mean |e|
  double mmae = 0.0;  // median over parameters of the per-parameter median |e|
};

/// |.| is the Euclidean norm of the estimate error vector; groups[t] holds
/// the errors of true parameter t.
ErrorMetrics error_metrics(const std::vector<std::vector<Eigen::Vector2d>>& groups);

struct Interval {
  double lower = 0.0;
  double upper = 1.0;
};

/// Exact (Clopper-Pearson) two-sided interval for a binomial proportion.
Interval binomial_interval(std::size_t successes, std::size_t trials, double level = 0.95);

struct PointResult {
  Parameter truth;
  std::vector<Parameter> estimates;
  std::size_t covered = 0;
  std::size_t trials = 0;
  double coverage = 0.0;
  Interval coverage_ci;
  double mean_area = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  double median_error = 0.0;
  /// The Godambe adjustment could not be formed at this parameter.
  bool masked = false;
};

struct MethodResult {
  MethodSpec method;
  std::vector<PointResult> points;
  ErrorMetrics metrics;
  double mean_coverage = 0.0;  // over unmasked points
  double mean_area = 0.0;
};

struct StudyResult {
  std::vector<MethodResult> methods;
};

/// Simulates replicates at every true parameter and evaluates every method's
/// grid MLE and LRT region on the same fields.
StudyResult run_study(const EvalConfig& config, const StudyModels& models);
StudyResult run_estimation_study(const EvalConfig& config, const StudyModels& models);
StudyResult run_coverage_study(const EvalConfig& config, const StudyModels& models);

struct TimingResult {
  std::string method;
  std::optional<double> delta;
  std::size_t fields = 0;
  double mean_seconds = 0.0;
  double sd_seconds = 0.0;
};

/// Wall time per field of each surface method, measured after one warm-up
/// evaluation, with the thread budget fixed to timing_threads. The neural
/// methods use `model`; pairwise timings run on Brown-Resnick fields of the
/// same grid.
std::vector<TimingResult> run_timing_study(const EvalConfig& config, const CnnModel& model);

/// One CSV row per method x true parameter.
void write_study_csv(const std::filesystem::path& path, const StudyResult& result);
void write_study_json(const std::filesystem::path& path, const StudyResult& result);
void write_timing_json(const std::filesystem::path& path, const std::vector<TimingResult>& timings);

}  // namespace nls
