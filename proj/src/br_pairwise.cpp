#include "nls/br_pairwise.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "nls/errors.hpp"
#include "nls/parallel.hpp"
#include "nls/rng.hpp"

namespace nls {

namespace {

using json = nlohmann::ordered_json;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

struct FieldLogs {
  std::vector<double> log_z;
  std::vector<double> inv_z;
};

FieldLogs field_logs(const SpatialField& y) {
  FieldLogs out;
  out.log_z.resize(y.values.size());
  out.inv_z.resize(y.values.size());
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    const double v = y.values[i];
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("pairwise likelihood needs positive finite field values");
    out.log_z[i] = std::log(v);
    out.inv_z[i] = 1.0 / v;
  }
  return out;
}

bool br_theta_valid(double lambda, double nu) {
  return std::isfinite(lambda) && std::isfinite(nu) && lambda > 0.0 && nu > 0.0 && nu <= 2.0;
}

// Bivariate log density from precomputed logs; a > 0.
inline double pair_term(double lz1, double lz2, double iz1, double iz2, double a, double log_a) {
  const double l = (lz2 - lz1) / a;
  const double w = 0.5 * a + l;
  const double v = 0.5 * a - l;
  const double pw = std_normal_cdf(w);
  const double pv = std_normal_cdf(v);
  const double lpw = pw > 1e-300 ? std::log(pw) : log_std_normal_cdf(w);
  const double lpv = pv > 1e-300 ? std::log(pv) : log_std_normal_cdf(v);
  const double t1 = lpw + lpv - lz2;
  const double t2 = -0.5 * w * w - kLogSqrt2Pi - log_a;
  const double hi = std::max(t1, t2);
  const double lse = hi + std::log1p(std::exp(std::min(t1, t2) - hi));
  return -2.0 * lz1 - lz2 + lse - (pw * iz1 + pv * iz2);
}

double sum_pairs(const FieldLogs& f, double lambda, double nu, const PairScheme& scheme) {
  double total = 0.0;
  for (std::size_t g = 0; g + 1 < scheme.group_offsets.size(); ++g) {
    const double a = std::sqrt(2.0 * std::pow(scheme.group_distance[g] / lambda, nu));
    const double log_a = std::log(a);
    double part = 0.0;
    for (std::size_t p = scheme.group_offsets[g]; p < scheme.group_offsets[g + 1]; ++p) {
      const auto [i, j] = scheme.pairs[p];
      part += pair_term(f.log_z[i], f.log_z[j], f.inv_z[i], f.inv_z[j], a, log_a);
    }
    total += part;
  }
  return total;
}

std::size_t argmax_index(const std::vector<double>& v) {
  std::size_t best = v.size();
  for (std::size_t l = 0; l < v.size(); ++l) {
    if (v[l] == kNegInf) continue;
    if (best == v.size() || v[l] > v[best]) best = l;
  }
  if (best == v.size()) throw NoValidPoint("surface has no finite value");
  return best;
}

bool negative_definite(const Eigen::Matrix2d& h) {
  if (!h.allFinite()) return false;
  Eigen::LLT<Eigen::Matrix2d> llt(-h);
  return llt.info() == Eigen::Success;
}

json matrix_json(const Eigen::Matrix2d& m) { return json::array({m(0, 0), m(0, 1), m(1, 0), m(1, 1)}); }

Eigen::Matrix2d matrix_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("adjustment matrix must hold 4 values");
  Eigen::Matrix2d m;
  m << j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>();
  return m;
}

// M with M^T M = a.
Eigen::Matrix2d sqrt_factor(const Eigen::Matrix2d& a, SqrtMethod method, const char* what) {
  if (method == SqrtMethod::Cholesky) {
    Eigen::LLT<Eigen::Matrix2d> llt(a);
    if (llt.info() != Eigen::Success) throw NumericError(std::string(what) + " is not positive definite");
    return llt.matrixU();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(a);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0)) {
    throw NumericError(std::string(what) + " is not positive definite");
  }
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double log_std_normal_cdf(double x) {
  if (x > -35.0) {
    const double p = std_normal_cdf(x);
    return p > 0.5 ? std::log1p(-std_normal_cdf(-x)) : std::log(p);
  }
  // Asymptotic series of the Mills ratio.
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - kLogSqrt2Pi + std::log(series);
}

ExponentTerms hr_exponent(double z1, double z2, double a) {
  if (!(z1 > 0.0) || !(z2 > 0.0) || !(a > 0.0) || !std::isfinite(a)) {
    throw InvalidArgument("hr_exponent needs z1, z2, a > 0");
  }
  const double l = std::log(z2 / z1) / a;
  const double w = 0.5 * a + l;
  const double v = 0.5 * a - l;
  const double pw = std_normal_cdf(w);
  const double pv = std_normal_cdf(v);
  const double dw = std::exp(-0.5 * w * w - kLogSqrt2Pi);
  ExponentTerms t;
  t.V = pw / z1 + pv / z2;
  t.V1 = -pw / (z1 * z1);
  t.V2 = -pv / (z2 * z2);
  t.V12 = -dw / (a * z1 * z1 * z2);
  return t;
}

double bivariate_log_density(double z1, double z2, double a) {
  if (!(z1 > 0.0) || !(z2 > 0.0) || !(a > 0.0) || !std::isfinite(a)) {
    throw InvalidArgument("bivariate density needs z1, z2, a > 0");
  }
  return pair_term(std::log(z1), std::log(z2), 1.0 / z1, 1.0 / z2, a, std::log(a));
}

PairScheme make_pair_scheme(const GridSpec& grid, double delta) {
  grid.validate();
  if (!(delta > 0.0) || !std::isfinite(delta)) throw InvalidArgument("delta must be positive and finite");
  const auto xy = grid.coordinates();
  const auto s = static_cast<std::size_t>(xy.rows());
  const double limit = delta * (1.0 + 1e-9);
  struct Entry {
    double d;
    std::size_t i, j;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = i + 1; j < s; ++j) {
      const double d = (xy.row(static_cast<Eigen::Index>(i)) - xy.row(static_cast<Eigen::Index>(j))).norm();
      if (d <= limit) entries.push_back({d, i, j});
    }
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.d < b.d; });
  PairScheme out;
  out.delta = delta;
  out.grid = grid;
  out.pairs.reserve(entries.size());
  out.distances.reserve(entries.size());
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& e = entries[p];
    if (out.group_distance.empty() || e.d > out.group_distance.back() * (1.0 + 1e-12)) {
      out.group_distance.push_back(e.d);
      out.group_offsets.push_back(p);
    }
    out.pairs.emplace_back(e.i, e.j);
    out.distances.push_back(e.d);
  }
  out.group_offsets.push_back(entries.size());
  return out;
}

double pairwise_log_likelihood(const SpatialField& y, const Parameter& theta, const PairScheme& scheme) {
  if (scheme.pairs.empty()) throw InvalidArgument("pair scheme is empty (delta below minimum grid spacing)");
  if (!(y.grid == scheme.grid)) throw InvalidArgument("field grid does not match pair scheme grid");
  check_br_theta(theta);
  return sum_pairs(field_logs(y), theta[0], theta[1], scheme);
}

Surface pairwise_surface(const SpatialField& y, const ParameterGrid& grid, double delta) {
  return pairwise_surface(y, grid, make_pair_scheme(y.grid, delta));
}

Surface pairwise_surface(const SpatialField& y, const ParameterGrid& grid, const PairScheme& scheme) {
  if (scheme.pairs.empty()) throw InvalidArgument("pair scheme is empty (delta below minimum grid spacing)");
  if (!(y.grid == scheme.grid)) throw InvalidArgument("field grid does not match pair scheme grid");
  if (grid.dim() != 2) throw InvalidArgument("pairwise surface needs a two-dimensional parameter grid");
  const FieldLogs f = field_logs(y);
  Surface out;
  out.grid = grid;
  out.kind = SurfaceKind::Pairwise;
  out.metadata.delta = scheme.delta;
  out.values.assign(grid.size(), 0.0);
  std::vector<char> failed(grid.size(), 0);
  parallel_for(grid.size(), [&](std::size_t l) {
    const double lambda = grid.points()(static_cast<Eigen::Index>(l), 0);
    const double nu = grid.points()(static_cast<Eigen::Index>(l), 1);
    double v = br_theta_valid(lambda, nu) ? sum_pairs(f, lambda, nu, scheme) : kNegInf;
    if (!std::isfinite(v)) {
      v = kNegInf;
      failed[l] = 1;
    }
    out.values[l] = v;
  });
  for (char c : failed) out.metadata.failed_points += static_cast<std::size_t>(c);
  return out;
}

Eigen::VectorXd fd_gradient(const ScalarFunction& f, const Eigen::VectorXd& x, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  const double f0 = f(x);
  Eigen::VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Eigen::VectorXd xk = x;
    xk(k) += h;
    g(k) = (f(xk) - f0) / h;
  }
  return g;
}

Eigen::Matrix2d fd_hessian_stencil(const ScalarFunction& f, const Eigen::Vector2d& x, double h, int s1, int s2) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  if ((s1 != 1 && s1 != -1) || (s2 != 1 && s2 != -1)) throw InvalidArgument("stencil signs must be +1 or -1");
  const Eigen::Vector2d e0(h * s1, 0.0);
  const Eigen::Vector2d e1(0.0, h * s2);
  const double f0 = f(x);
  const double f_0 = f(x + e0);
  const double f_00 = f(x + 2.0 * e0);
  const double f_1 = f(x + e1);
  const double f_11 = f(x + 2.0 * e1);
  const double f_01 = f(x + e0 + e1);
  const double h2 = h * h;
  Eigen::Matrix2d out;
  out(0, 0) = (f_00 - 2.0 * f_0 + f0) / h2;
  out(1, 1) = (f_11 - 2.0 * f_1 + f0) / h2;
  out(0, 1) = out(1, 0) = s1 * s2 * (f_01 - f_0 - f_1 + f0) / h2;
  return out;
}

const std::vector<std::pair<int, int>>& hessian_stencil_order() {
  static const std::vector<std::pair<int, int>> order{{1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
  return order;
}

std::string to_string(SqrtMethod m) { return m == SqrtMethod::Cholesky ? "cholesky" : "eigen"; }

SqrtMethod sqrt_method_from_string(const std::string& s) {
  if (s == "cholesky") return SqrtMethod::Cholesky;
  if (s == "eigen") return SqrtMethod::Eigen;
  throw InvalidArgument("unknown square-root method '" + s + "'");
}

AdjustmentModel estimate_godambe(const std::function<double(std::size_t, const Eigen::Vector2d&)>& loglik,
                                 const Eigen::Vector2d& theta_star, int n_fields, double fd_step) {
  if (n_fields < 1) throw InvalidArgument("n_fields must be >= 1");
  if (!(fd_step > 0.0)) throw InvalidArgument("fd_step must be positive");
  const auto nf = static_cast<std::size_t>(n_fields);
  std::vector<Eigen::Matrix2d> outer(nf, Eigen::Matrix2d::Zero());
  std::vector<Eigen::Matrix2d> hess(nf, Eigen::Matrix2d::Zero());
  std::vector<char> has_grad(nf, 0), has_hess(nf, 0);
  parallel_for(nf, [&](std::size_t f) {
    // Evaluations outside the domain (or failing numerically) make the stencil
    // that needed them unusable.
    const ScalarFunction fn = [&](const Eigen::VectorXd& t) {
      try {
        const double v = loglik(f, Eigen::Vector2d(t(0), t(1)));
        return std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN();
      } catch (const Error&) {
        return std::numeric_limits<double>::quiet_NaN();
      }
    };
    const Eigen::VectorXd g = fd_gradient(fn, theta_star, fd_step);
    if (g.allFinite()) {
      outer[f] = g * g.transpose();
      has_grad[f] = 1;
    }
    for (const auto& [s1, s2] : hessian_stencil_order()) {
      const Eigen::Matrix2d h = fd_hessian_stencil(fn, theta_star, fd_step, s1, s2);
      if (negative_definite(h)) {
        hess[f] = h;
        has_hess[f] = 1;
        break;
      }
    }
  });
  AdjustmentModel model;
  model.theta_star = Parameter({theta_star(0), theta_star(1)});
  model.fd_step = fd_step;
  model.n_fields = nf;
  for (std::size_t f = 0; f < nf; ++f) {
    if (has_grad[f]) {
      model.J += outer[f];
      ++model.n_used_j;
    }
    if (has_hess[f]) {
      model.H -= hess[f];
      ++model.n_used;
    }
  }
  if (model.n_used == 0) throw AdjustmentUnavailable("no negative-definite finite-difference Hessian for any field");
  if (model.n_used_j == 0) throw AdjustmentUnavailable("no finite gradient for any field");
  model.J /= static_cast<double>(model.n_used_j);
  model.H /= static_cast<double>(model.n_used);
  return model;
}

AdjustmentModel estimate_godambe(const Parameter& theta_star, const GridSpec& grid, double delta, int n_fields,
                                 std::uint64_t seed, double fd_step, BrownResnickOptions sim) {
  check_br_theta(theta_star);
  if (n_fields < 1) throw InvalidArgument("n_fields must be >= 1");
  const PairScheme scheme = make_pair_scheme(grid, delta);
  if (scheme.pairs.empty()) throw InvalidArgument("pair scheme is empty (delta below minimum grid spacing)");
  const BrownResnickSimulator simulator(theta_star, grid, sim);
  std::vector<FieldLogs> logs(static_cast<std::size_t>(n_fields));
  parallel_for(logs.size(), [&](std::size_t f) {
    logs[f] = field_logs(simulator.sample(derive_seed(seed, {stream::kGodambe, f})));
  });
  auto loglik = [&](std::size_t f, const Eigen::Vector2d& t) {
    if (!br_theta_valid(t(0), t(1))) throw InvalidArgument("outside parameter domain");
    return sum_pairs(logs[f], t(0), t(1), scheme);
  };
  AdjustmentModel model = estimate_godambe(loglik, Eigen::Vector2d(theta_star[0], theta_star[1]), n_fields, fd_step);
  model.theta_star = theta_star;
  model.delta = delta;
  return model;
}

AdjustmentModel adjustment_matrix(AdjustmentModel model, SqrtMethod method) {
  if (!model.H.allFinite() || !model.J.allFinite()) throw NumericError("adjustment inputs are not finite");
  Eigen::LLT<Eigen::Matrix2d> jllt(model.J);
  if (jllt.info() != Eigen::Success || !(jllt.matrixLLT().diagonal().minCoeff() > 1e-12 * std::sqrt(model.J.trace()))) {
    throw NumericError("J is singular");
  }
  Eigen::Matrix2d h_adj;
  if (model.J == model.H) {
    h_adj = model.H;
  } else {
    h_adj = model.H * jllt.solve(model.H);
    h_adj = 0.5 * (h_adj + h_adj.transpose()).eval();
  }
  const Eigen::Matrix2d m = sqrt_factor(model.H, method, "H");
  const Eigen::Matrix2d m_adj = sqrt_factor(h_adj, method, "H J^-1 H");
  Eigen::Matrix2d c;
  if (h_adj == model.H) {
    c.setIdentity();
  } else if (method == SqrtMethod::Cholesky) {
    c = m.triangularView<Eigen::Upper>().solve(m_adj);
  } else {
    c = m.partialPivLu().solve(m_adj);
  }
  if (!c.allFinite()) throw NumericError("adjustment matrix is not finite");
  model.C = c;
  model.sqrt_method = method;
  return model;
}

Surface adjusted_surface(const SpatialField& y, const ParameterGrid& grid, double delta, const AdjustmentModel& model) {
  return adjusted_surface(y, pairwise_surface(y, grid, delta), model);
}

Surface adjusted_surface(const SpatialField& y, const Surface& unadjusted, const AdjustmentModel& model) {
  if (!model.C) throw InvalidArgument("adjustment model has no C matrix");
  if (unadjusted.kind != SurfaceKind::Pairwise || !unadjusted.metadata.delta) {
    throw InvalidArgument("adjusted surface needs an unadjusted pairwise surface");
  }
  const ParameterGrid& grid = unadjusted.grid;
  const PairScheme scheme = make_pair_scheme(y.grid, *unadjusted.metadata.delta);
  if (scheme.pairs.empty()) throw InvalidArgument("pair scheme is empty (delta below minimum grid spacing)");
  const FieldLogs f = field_logs(y);
  const std::size_t best = argmax_index(unadjusted.values);
  const Eigen::Vector2d theta_hat = grid.points().row(static_cast<Eigen::Index>(best)).transpose();
  // theta + (C - I)(theta - theta_hat) equals theta_hat + C(theta - theta_hat)
  // and reproduces theta exactly when C = I.
  const Eigen::Matrix2d d = *model.C - Eigen::Matrix2d::Identity();
  Surface out;
  out.grid = grid;
  out.kind = SurfaceKind::PairwiseAdjusted;
  out.metadata = unadjusted.metadata;
  out.metadata.failed_points = 0;
  out.metadata.pairwise_mle = std::vector<double>{theta_hat(0), theta_hat(1)};
  out.values.assign(grid.size(), kNegInf);
  std::vector<char> failed(grid.size(), 0);
  parallel_for(grid.size(), [&](std::size_t l) {
    const Eigen::Vector2d theta = grid.points().row(static_cast<Eigen::Index>(l)).transpose();
    const Eigen::Vector2d t = theta + d * (theta - theta_hat);
    double v = br_theta_valid(t(0), t(1)) ? sum_pairs(f, t(0), t(1), scheme) : kNegInf;
    if (!std::isfinite(v)) {
      v = kNegInf;
      failed[l] = 1;
    }
    out.values[l] = v;
  });
  for (char c : failed) out.metadata.failed_points += static_cast<std::size_t>(c);
  return out;
}

void save_adjustment(const std::filesystem::path& path, const AdjustmentModel& model) {
  json j;
  j["theta_star"] = model.theta_star.values;
  j["delta"] = model.delta;
  j["fd_step"] = model.fd_step;
  j["n_fields"] = model.n_fields;
  j["n_used"] = model.n_used;
  j["n_used_j"] = model.n_used_j;
  j["H_hat"] = matrix_json(model.H);
  j["J_hat"] = matrix_json(model.J);
  if (model.C) j["C"] = matrix_json(*model.C);
  j["sqrt_method"] = to_string(model.sqrt_method);
  if (model.pairwise_mle) j["pairwise_mle"] = *model.pairwise_mle;
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + path.string());
}

AdjustmentModel load_adjustment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigurationError("adjustment model missing: " + path.string());
  AdjustmentModel m;
  try {
    const json j = json::parse(is);
    m.theta_star = Parameter(j.at("theta_star").get<std::vector<double>>(), {"lambda", "nu"});
    m.delta = j.at("delta").get<double>();
    m.fd_step = j.at("fd_step").get<double>();
    m.n_fields = j.at("n_fields").get<std::size_t>();
    m.n_used = j.at("n_used").get<std::size_t>();
    m.n_used_j = j.value("n_used_j", m.n_used);
    m.H = matrix_from_json(j.at("H_hat"));
    m.J = matrix_from_json(j.at("J_hat"));
    if (j.contains("C")) m.C = matrix_from_json(j["C"]);
    m.sqrt_method = sqrt_method_from_string(j.at("sqrt_method").get<std::string>());
    if (j.contains("pairwise_mle")) m.pairwise_mle = j["pairwise_mle"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("adjustment model: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("adjustment model: ") + e.what());
  }
  if (m.theta_star.size() != 2) throw FormatError("adjustment model: theta_star must have two entries");
  return m;
}

}  // namespace nls
