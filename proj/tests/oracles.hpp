#pragma once

// Reference implementations used only by tests. They deliberately take the
// slow, direct route so they share no code with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include "nls/core.hpp"

namespace nls::test {

inline Eigen::MatrixXd dense_exp_covariance(double nu, double ell, const GridSpec& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd s(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto p = g.location(static_cast<std::size_t>(a));
      const auto q = g.location(static_cast<std::size_t>(b));
      s(a, b) = nu * std::exp(-std::hypot(p[0] - q[0], p[1] - q[1]) / ell);
    }
  }
  return s;
}

// -0.5 y' S^-1 y - 0.5 log det S - n/2 log 2 pi with an explicit inverse and an
// LU determinant.
inline double dense_mvn_logpdf(const Eigen::VectorXd& y, const Eigen::MatrixXd& s) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(s);
  const Eigen::MatrixXd inv = lu.inverse();
  const double q = y.dot(inv * y);
  double logdet = 0.0;
  const Eigen::MatrixXd u = lu.matrixLU().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < u.rows(); ++i) logdet += std::log(std::abs(u(i, i)));
  return -0.5 * q - 0.5 * logdet - 0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

// sup |F_n - F| of a sample against a continuous CDF.
inline double ks_distance(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

// Central difference gradient.
inline Eigen::VectorXd central_gradient(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                        double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double x0 = x(k);
    x(k) = x0 + h;
    const double fp = f(x);
    x(k) = x0 - h;
    const double fm = f(x);
    x(k) = x0;
    g(k) = (fp - fm) / (2 * h);
  }
  return g;
}

struct ExponentReference {
  double V = 0.0;
  double V1 = 0.0;
  double V2 = 0.0;
  double V12 = 0.0;
};

template <unsigned Bits>
ExponentReference hr_exponent_reference_at(double z1d, double z2d, double ad) {
  using R = boost::multiprecision::number<boost::multiprecision::cpp_bin_float<Bits, boost::multiprecision::digit_base_2>>;
  const R a = ad, z1 = z1d, z2 = z2d;
  auto phi = [](const R& x) { return R(0.5) * boost::math::erfc(-x / boost::multiprecision::sqrt(R(2))); };
  auto V = [&](const R& x1, const R& x2) {
    using boost::multiprecision::log;
    return phi(a / 2 + log(x2 / x1) / a) / x1 + phi(a / 2 + log(x1 / x2) / a) / x2;
  };
  const R h1 = R("1e-20") * z1, h2 = R("1e-20") * z2;
  ExponentReference r;
  r.V = static_cast<double>(V(z1, z2));
  r.V1 = static_cast<double>((V(z1 + h1, z2) - V(z1 - h1, z2)) / (2 * h1));
  r.V2 = static_cast<double>((V(z1, z2 + h2) - V(z1, z2 - h2)) / (2 * h2));
  r.V12 = static_cast<double>(
      (V(z1 + h1, z2 + h2) - V(z1 + h1, z2 - h2) - V(z1 - h1, z2 + h2) + V(z1 - h1, z2 - h2)) / (4 * h1 * h2));
  return r;
}

// Husler-Reiss exponent and its partials by central differences in extended
// precision. Partials many orders below V/z^2 lose digits to cancellation in
// the differences, so those cases are redone with 800 bits.
inline ExponentReference hr_exponent_reference(double z1, double z2, double a) {
  const auto r = hr_exponent_reference_at<256>(z1, z2, a);
  const double scale = 1e-25 * r.V / (z1 * z2);
  if (std::abs(r.V1) * z1 < 1e-25 * r.V || std::abs(r.V2) * z2 < 1e-25 * r.V || std::abs(r.V12) < scale) {
    return hr_exponent_reference_at<800>(z1, z2, a);
  }
  return r;
}

}  // namespace nls::test
