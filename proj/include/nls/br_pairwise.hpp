#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nls/core.hpp"
#include "nls/simulate.hpp"

namespace nls {

double std_normal_cdf(double x);
/// log Phi(x), accurate far into the lower tail.
double log_std_normal_cdf(double x);

/// Hüsler-Reiss exponent V(z1, z2) and its partials for a = sqrt(2 gamma(h)).
struct ExponentTerms {
  double V = 0.0;
  double V1 = 0.0;
  double V2 = 0.0;
  double V12 = 0.0;
};

ExponentTerms hr_exponent(double z1, double z2, double a);

/// log(V1 V2 - V12) - V, the bivariate log density of a Brown-Resnick pair
/// with unit Frechet margins. Evaluated in log space.
double bivariate_log_density(double z1, double z2, double a);

/// Location pairs (j1 < j2) within distance delta, grouped by distance so
/// that per-distance quantities are computed once per parameter.
struct PairScheme {
  double delta = 0.0;
  GridSpec grid;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> distances;  // per pair
  std::vector<double> group_distance;
  std::vector<std::size_t> group_offsets;  // pairs of group g: [offsets[g], offsets[g+1])

  std::size_t size() const { return pairs.size(); }
};

PairScheme make_pair_scheme(const GridSpec& grid, double delta);

/// Sum over scheme pairs of the bivariate log density. Throws InvalidArgument
/// for an empty scheme, invalid theta or non-positive field values.
double pairwise_log_likelihood(const SpatialField& y, const Parameter& theta, const PairScheme& scheme);

Surface pairwise_surface(const SpatialField& y, const ParameterGrid& grid, double delta);
Surface pairwise_surface(const SpatialField& y, const ParameterGrid& grid, const PairScheme& scheme);

using ScalarFunction = std::function<double(const Eigen::VectorXd&)>;

/// Forward differences (f(x + h e_k) - f(x)) / h.
Eigen::VectorXd fd_gradient(const ScalarFunction& f, const Eigen::VectorXd& x, double h);

/// One-sided second-difference Hessian for two parameters. The stencil steps
/// by h*s1 on axis 0 and h*s2 on axis 1 (s1, s2 in {-1, +1}):
///   D_kk = (f(x + 2h s_k e_k) - 2 f(x + h s_k e_k) + f(x)) / h^2
///   D_01 = s1 s2 (f(x + h s1 e_0 + h s2 e_1) - f(x + h s1 e_0) - f(x + h s2 e_1) + f(x)) / h^2
Eigen::Matrix2d fd_hessian_stencil(const ScalarFunction& f, const Eigen::Vector2d& x, double h, int s1, int s2);

/// Stencils in the order they are tried: upper right (+,+), lower left
/// (-,-), lower right (+,-), upper left (-,+).
const std::vector<std::pair<int, int>>& hessian_stencil_order();

enum class SqrtMethod { Cholesky, Eigen };

std::string to_string(SqrtMethod m);
SqrtMethod sqrt_method_from_string(const std::string& s);

struct AdjustmentModel {
  Parameter theta_star;
  double delta = 0.0;
  double fd_step = 0.05;
  std::size_t n_fields = 0;
  std::size_t n_used = 0;    // fields with an accepted Hessian
  std::size_t n_used_j = 0;  // fields with a finite gradient
  Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d J = Eigen::Matrix2d::Zero();
  std::optional<Eigen::Matrix2d> C;
  SqrtMethod sqrt_method = SqrtMethod::Cholesky;
  std::optional<std::vector<double>> pairwise_mle;
};

/// Monte Carlo estimates of J (mean outer product of gradients) and H (minus
/// the mean accepted Hessian) at theta_star from n_fields simulated fields.
AdjustmentModel estimate_godambe(const Parameter& theta_star, const GridSpec& grid, double delta, int n_fields,
                                 std::uint64_t seed, double fd_step = 0.05, BrownResnickOptions sim = {});

/// Same estimator with a caller-supplied log-likelihood per field index.
AdjustmentModel estimate_godambe(const std::function<double(std::size_t, const Eigen::Vector2d&)>& loglik,
                                 const Eigen::Vector2d& theta_star, int n_fields, double fd_step);

/// C = M^{-1} M_adj with M^T M = H and M_adj^T M_adj = H J^{-1} H.
AdjustmentModel adjustment_matrix(AdjustmentModel model, SqrtMethod method = SqrtMethod::Cholesky);

/// Surface of l_pwl(theta + (C - I)(theta - theta_hat)), theta_hat being the
/// grid MLE of the unadjusted surface. Transformed points outside the
/// parameter domain hold -inf.
Surface adjusted_surface(const SpatialField& y, const ParameterGrid& grid, double delta, const AdjustmentModel& model);
Surface adjusted_surface(const SpatialField& y, const Surface& unadjusted, const AdjustmentModel& model);

void save_adjustment(const std::filesystem::path& path, const AdjustmentModel& model);
AdjustmentModel load_adjustment(const std::filesystem::path& path);

}  // namespace nls
