#pragma once

#include <span>

#include <Eigen/Dense>

#include "nls/core.hpp"

namespace nls {

/// Lower-triangular L with L * L^T = sigma. Throws NumericError naming the
/// first pivot that is not strictly positive.
Eigen::MatrixXd cholesky(const Eigen::MatrixXd& sigma);

/// Sigma_ij = nu * exp(-|x_i - x_j| / ell) for theta = (nu, ell).
Eigen::MatrixXd exp_covariance(const Parameter& theta, const GridSpec& grid);

/// Zero-mean Gaussian log density under the exponential covariance, via one
/// Cholesky factorization (triangular solve + sum of log diagonal).
double gp_log_likelihood(const SpatialField& y, const Parameter& theta, const GridSpec& grid);

/// Exact surface for one field. Points whose factorization fails hold -inf
/// and are counted in metadata.failed_points.
Surface gp_surface(const SpatialField& y, const ParameterGrid& grid);

/// Exact surfaces for many fields on the same spatial grid. Each grid point
/// is factored once and the triangular solve runs over all fields together.
std::vector<Surface> gp_surfaces(std::span<const SpatialField> fields, const ParameterGrid& grid);

}  // namespace nls
