#include "nls/gp_likelihood.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "nls/errors.hpp"
#include "nls/parallel.hpp"

namespace nls {

namespace {

// Unblocked factorization; only used to locate the failing pivot once the
// blocked Eigen factorization has reported a problem.
Eigen::Index first_bad_pivot(const Eigen::MatrixXd& a) {
  const Eigen::Index n = a.rows();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) return j;
    l(j, j) = std::sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
    }
  }
  return n;
}

void check_gp_theta(const Parameter& theta) {
  if (theta.size() != 2) throw InvalidArgument("GP parameter must be (nu, ell)");
  if (!(theta[0] > 0.0) || !(theta[1] > 0.0) || !theta.finite()) {
    std::ostringstream os;
    os << "GP parameters must be positive, got nu=" << theta[0] << " ell=" << theta[1];
    throw InvalidArgument(os.str());
  }
}

}  // namespace

Eigen::MatrixXd cholesky(const Eigen::MatrixXd& sigma) {
  if (sigma.rows() < 1 || sigma.rows() != sigma.cols()) throw InvalidArgument("cholesky needs a non-empty square matrix");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) {
    const auto pivot = first_bad_pivot(sigma);
    throw NumericError("matrix is not positive definite (failing pivot " + std::to_string(pivot) + ")");
  }
  Eigen::MatrixXd l = llt.matrixL();
  return l;
}

Eigen::MatrixXd exp_covariance(const Parameter& theta, const GridSpec& grid) {
  check_gp_theta(theta);
  grid.validate();
  const double nu = theta[0];
  const double ell = theta[1];
  const auto xy = grid.coordinates();
  const Eigen::Index s = xy.rows();
  Eigen::MatrixXd sigma(s, s);
  for (Eigen::Index j = 0; j < s; ++j) {
    sigma(j, j) = nu;
    for (Eigen::Index i = j + 1; i < s; ++i) {
      const double d = (xy.row(i) - xy.row(j)).norm();
      sigma(i, j) = sigma(j, i) = nu * std::exp(-d / ell);
    }
  }
  return sigma;
}

double gp_log_likelihood(const SpatialField& y, const Parameter& theta, const GridSpec& grid) {
  if (!(y.grid == grid)) throw InvalidArgument("field grid does not match likelihood grid");
  y.validate();
  Eigen::LLT<Eigen::MatrixXd> llt(exp_covariance(theta, grid));
  if (llt.info() != Eigen::Success) {
    std::ostringstream os;
    os << "covariance not positive definite at nu=" << theta[0] << " ell=" << theta[1];
    throw NumericError(os.str());
  }
  const Eigen::VectorXd x = llt.matrixL().solve(y.vector());
  const double half_logdet = llt.matrixLLT().diagonal().array().log().sum();
  const double s = static_cast<double>(grid.size());
  return -0.5 * x.squaredNorm() - 0.5 * s * std::log(2.0 * std::numbers::pi) - half_logdet;
}

Surface gp_surface(const SpatialField& y, const ParameterGrid& grid) {
  Surface out;
  out.grid = grid;
  out.kind = SurfaceKind::GpExact;
  out.values.assign(grid.size(), 0.0);
  std::vector<char> failed(grid.size(), 0);
  parallel_for(grid.size(), [&](std::size_t l) {
    try {
      out.values[l] = gp_log_likelihood(y, Parameter(grid.point(l)), y.grid);
    } catch (const NumericError&) {
      out.values[l] = -std::numeric_limits<double>::infinity();
      failed[l] = 1;
    }
  });
  for (char f : failed) out.metadata.failed_points += static_cast<std::size_t>(f);
  return out;
}

std::vector<Surface> gp_surfaces(std::span<const SpatialField> fields, const ParameterGrid& grid) {
  std::vector<Surface> out(fields.size());
  if (fields.empty()) return out;
  const GridSpec spatial = fields.front().grid;
  const auto s = static_cast<Eigen::Index>(spatial.size());
  Eigen::MatrixXd ys(s, static_cast<Eigen::Index>(fields.size()));
  for (std::size_t f = 0; f < fields.size(); ++f) {
    if (!(fields[f].grid == spatial)) throw InvalidArgument("all fields must share one spatial grid");
    fields[f].validate();
    ys.col(static_cast<Eigen::Index>(f)) = fields[f].vector();
  }
  for (auto& sf : out) {
    sf.grid = grid;
    sf.kind = SurfaceKind::GpExact;
    sf.values.assign(grid.size(), 0.0);
  }
  std::vector<char> failed(grid.size(), 0);
  const double norm_const = 0.5 * static_cast<double>(s) * std::log(2.0 * std::numbers::pi);
  parallel_for(grid.size(), [&](std::size_t l) {
    const Parameter theta(grid.point(l));
    Eigen::LLT<Eigen::MatrixXd> llt(exp_covariance(theta, spatial));
    if (llt.info() != Eigen::Success) {
      failed[l] = 1;
      for (auto& sf : out) sf.values[l] = -std::numeric_limits<double>::infinity();
      return;
    }
    const Eigen::MatrixXd x = llt.matrixL().solve(ys);
    const double half_logdet = llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd quad = x.colwise().squaredNorm().transpose();
    for (std::size_t f = 0; f < out.size(); ++f) {
      out[f].values[l] = -0.5 * quad(static_cast<Eigen::Index>(f)) - norm_const - half_logdet;
    }
  });
  std::size_t n_failed = 0;
  for (char f : failed) n_failed += static_cast<std::size_t>(f);
  for (auto& sf : out) sf.metadata.failed_points = n_failed;
  return out;
}

}  // namespace nls
