#include "nls/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "nls/errors.hpp"
#include "nls/parallel.hpp"
#include "nls/rng.hpp"
#include "nls/tensor_io.hpp"

namespace nls {

namespace {

using json = nlohmann::ordered_json;

double open_unit(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  while (x <= 0.0) x = u(rng);
  return x;
}

template <typename E>
[[noreturn]] void rethrow_with(const E& e, const std::string& ctx) {
  throw E(ctx + ": " + e.what());
}

// Re-raises the active nls error with the (i, j) task prefixed.
[[noreturn]] void rethrow_in_context(std::size_t i, std::size_t j) {
  const std::string ctx = "simulating field (" + std::to_string(i) + ", " + std::to_string(j) + ")";
  try {
    throw;
  } catch (const InvalidArgument& e) {
    rethrow_with(e, ctx);
  } catch (const NumericError& e) {
    rethrow_with(e, ctx);
  }
}

// Symmetric positive semidefinite square root by eigendecomposition, negative
// eigenvalues (round-off) clipped to zero.
Eigen::MatrixXd psd_root(const Eigen::MatrixXd& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal();
}

}  // namespace

std::vector<Parameter> lhs_sample(int m, const Bounds& bounds, std::uint64_t seed,
                                  const std::vector<std::string>& names) {
  if (m < 1) throw InvalidArgument("lhs_sample needs m >= 1");
  if (bounds.empty()) throw InvalidArgument("lhs_sample needs at least one axis");
  for (const auto& [lo, hi] : bounds) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(hi > lo)) throw InvalidArgument("degenerate LHS bounds");
  }
  Rng rng(derive_seed(seed, {stream::kLhs}));
  const std::size_t k = bounds.size();
  std::vector<std::vector<double>> cols(k, std::vector<double>(static_cast<std::size_t>(m)));
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<int> strata(static_cast<std::size_t>(m));
    std::iota(strata.begin(), strata.end(), 0);
    std::shuffle(strata.begin(), strata.end(), rng);
    const auto [lo, hi] = bounds[a];
    const double w = (hi - lo) / m;
    for (int i = 0; i < m; ++i) {
      double x = lo + w * (strata[static_cast<std::size_t>(i)] + open_unit(rng));
      // Keep the point inside its stratum and strictly inside (lo, hi).
      const double top = lo + w * (strata[static_cast<std::size_t>(i)] + 1);
      if (x >= top) x = std::nextafter(top, lo);
      if (x >= hi) x = std::nextafter(hi, lo);
      cols[a][static_cast<std::size_t>(i)] = x;
    }
  }
  std::vector<Parameter> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    std::vector<double> v(k);
    for (std::size_t a = 0; a < k; ++a) v[a] = cols[a][static_cast<std::size_t>(i)];
    out.emplace_back(std::move(v), names);
  }
  return out;
}

GaussianSimulator::GaussianSimulator(const Parameter& theta, const GridSpec& grid) : grid_(grid), theta_(theta) {
  try {
    factor_ = cholesky(exp_covariance(theta, grid));
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << e.what() << " at nu=" << theta[0] << " ell=" << theta[1];
    throw NumericError(os.str());
  }
}

SpatialField GaussianSimulator::sample(std::uint64_t seed) const {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd z(factor_.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = nd(rng);
  const Eigen::VectorXd y = factor_.triangularView<Eigen::Lower>() * z;
  return SpatialField(grid_, std::vector<double>(y.data(), y.data() + y.size()));
}

SpatialField simulate_gp(const Parameter& theta, const GridSpec& grid, std::uint64_t seed) {
  return GaussianSimulator(theta, grid).sample(seed);
}

double semivariogram(double h, double lambda, double nu) {
  if (!(h >= 0.0) || !(lambda > 0.0) || !(nu > 0.0) || !(nu <= 2.0) || !std::isfinite(h) || !std::isfinite(lambda)) {
    throw InvalidArgument("semivariogram needs h >= 0, lambda > 0, 0 < nu <= 2");
  }
  if (h == 0.0) return 0.0;
  return std::pow(h / lambda, nu);
}

void check_br_theta(const Parameter& theta) {
  if (theta.size() != 2) throw InvalidArgument("Brown-Resnick parameter must be (lambda, nu)");
  if (!theta.finite() || !(theta[0] > 0.0) || !(theta[1] > 0.0) || !(theta[1] <= 2.0)) {
    std::ostringstream os;
    os << "Brown-Resnick parameters need lambda > 0 and 0 < nu <= 2, got lambda=" << theta[0] << " nu=" << theta[1];
    throw InvalidArgument(os.str());
  }
}

BrownResnickSimulator::BrownResnickSimulator(const Parameter& theta, const GridSpec& grid, BrownResnickOptions options)
    : grid_(grid), options_(options) {
  check_br_theta(theta);
  grid.validate();
  if (options.n_spectral < 1) throw InvalidArgument("n_spectral must be >= 1");
  const double lambda = theta[0];
  const double nu = theta[1];
  const auto xy = grid.coordinates();
  const Eigen::Index s = xy.rows();
  gamma_.resize(s, s);
  for (Eigen::Index a = 0; a < s; ++a) {
    gamma_(a, a) = 0.0;
    for (Eigen::Index b = a + 1; b < s; ++b) {
      gamma_(a, b) = gamma_(b, a) = semivariogram((xy.row(a) - xy.row(b)).norm(), lambda, nu);
    }
  }
  if (s == 1) return;
  // Cov(G(s), G(t)) = gamma(s - s0) + gamma(t - s0) - gamma(s - t) with s0 the
  // corner; G(s0) = 0 so only the remaining sites are factored.
  const Eigen::Index r = s - 1;
  Eigen::MatrixXd c(r, r);
  for (Eigen::Index a = 0; a < r; ++a) {
    for (Eigen::Index b = 0; b < r; ++b) c(a, b) = gamma_(a + 1, 0) + gamma_(b + 1, 0) - gamma_(a + 1, b + 1);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() == Eigen::Success) {
    root_ = llt.matrixL();
  } else {
    // nu = 2 gives a rank-2 covariance; other near-singular cases land here too.
    root_ = psd_root(c);
  }
}

SpatialField BrownResnickSimulator::sample(std::uint64_t seed) const {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  std::exponential_distribution<double> ed(1.0);
  const Eigen::Index s = gamma_.rows();
  const Eigen::Index r = s - 1;
  const bool normalized = options_.anchor == SpectralAnchor::NormalizedRandom;
  const double log_n = std::log(static_cast<double>(s));
  std::uniform_int_distribution<Eigen::Index> pick(0, s - 1);

  Eigen::VectorXd log_z = Eigen::VectorXd::Constant(s, -std::numeric_limits<double>::infinity());
  Eigen::VectorXd g(s);
  Eigen::VectorXd z(r);
  Eigen::VectorXd log_w(s);
  double gamma_sum = 0.0;
  for (int k = 0; k < options_.n_spectral; ++k) {
    gamma_sum += ed(rng);
    const double log_eta = -std::log(gamma_sum);
    // Normalized spectral functions satisfy W <= s, so once eta * s falls
    // below every current value no later point can change the field.
    if (normalized && k > 0 && log_eta + log_n < log_z.minCoeff()) break;
    g(0) = 0.0;
    if (r > 0) {
      for (Eigen::Index i = 0; i < r; ++i) z(i) = nd(rng);
      g.tail(r).noalias() = root_ * z;
    }
    if (normalized) {
      const Eigen::Index anchor = pick(rng);
      log_w = (g.array() - g(anchor)).matrix() - gamma_.col(anchor);
      const double mx = log_w.maxCoeff();
      const double lse = mx + std::log((log_w.array() - mx).exp().sum());
      log_w.array() += log_n - lse;
    } else {
      log_w = g - gamma_.col(0);
    }
    log_z = log_z.cwiseMax((log_w.array() + log_eta).matrix());
  }
  std::vector<double> v(static_cast<std::size_t>(s));
  for (Eigen::Index i = 0; i < s; ++i) {
    v[static_cast<std::size_t>(i)] = std::exp(log_z(i));
    if (!(v[static_cast<std::size_t>(i)] > 0.0) || !std::isfinite(v[static_cast<std::size_t>(i)])) {
      throw NumericError("Brown-Resnick value out of floating-point range");
    }
  }
  return SpatialField(grid_, std::move(v));
}

SpatialField simulate_brown_resnick(const Parameter& theta, const GridSpec& grid, std::uint64_t seed, int n_spectral) {
  BrownResnickOptions opt;
  opt.n_spectral = n_spectral;
  return BrownResnickSimulator(theta, grid, opt).sample(seed);
}

Bounds SimConfig::default_bounds(ProcessKind p) {
  if (p == ProcessKind::Gaussian) return {{0.0, 2.5}, {0.0, 2.5}};
  return {{0.0, 2.0}, {0.0, 2.0}};
}

void SimConfig::validate() const {
  grid.validate();
  if (m < 1 || n < 1) throw InvalidArgument("m and n must be >= 1");
  if (bounds.size() != 2) throw InvalidArgument("parameter bounds must have two axes");
  for (const auto& [lo, hi] : bounds) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(hi > lo) || lo < 0.0) {
      throw InvalidArgument("parameter bounds must be finite, positive and increasing");
    }
  }
  if (process == ProcessKind::BrownResnick && bounds[1].second > 2.0) {
    throw InvalidArgument("Brown-Resnick smoothness bound must not exceed 2");
  }
  if (br.n_spectral < 1) throw InvalidArgument("n_spectral must be >= 1");
}

std::uint64_t field_seed(std::uint64_t root, std::size_t i, std::size_t j) {
  return derive_seed(root, {stream::kField, i, j});
}

PairDataset build_first_class(const SimConfig& config) {
  config.validate();
  PairDataset d;
  d.process = config.process;
  d.grid = config.grid;
  d.bounds = config.bounds;
  d.m = config.m;
  d.n = config.n;
  d.seed = config.seed;
  d.params = lhs_sample(config.m, config.bounds, config.seed, parameter_names(config.process));
  const auto m = static_cast<std::size_t>(config.m);
  const auto n = static_cast<std::size_t>(config.n);
  d.fields.resize(m * n);
  parallel_for(m, [&](std::size_t i) {
    std::size_t j = 0;
    try {
      if (config.process == ProcessKind::Gaussian) {
        GaussianSimulator sim(d.params[i], config.grid);
        for (j = 0; j < n; ++j) d.fields[i * n + j] = sim.sample(field_seed(config.seed, i, j));
      } else {
        BrownResnickSimulator sim(d.params[i], config.grid, config.br);
        for (j = 0; j < n; ++j) d.fields[i * n + j] = sim.sample(field_seed(config.seed, i, j));
      }
    } catch (const Error&) {
      rethrow_in_context(i, j);
    }
  });
  d.pairs.reserve(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) d.pairs.push_back({i * n + j, i, Label::Dependent});
  }
  return d;
}

std::vector<std::vector<std::size_t>> sample_permutations(int m, int n, std::uint64_t seed) {
  if (m < 1 || n < 1) throw InvalidArgument("sample_permutations needs m, n >= 1");
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(n));
  for (std::size_t j = 0; j < out.size(); ++j) {
    Rng rng(derive_seed(seed, {stream::kPermutation, j}));
    auto& p = out[j];
    p.resize(static_cast<std::size_t>(m));
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), rng);
  }
  return out;
}

PairDataset build_second_class(const PairDataset& first, std::uint64_t seed) {
  if (first.m < 1 || first.n < 1) throw InvalidArgument("dataset has no class-1 layout");
  PairDataset d = build_second_class(first, sample_permutations(first.m, first.n, seed));
  d.permutation_seed = seed;
  return d;
}

PairDataset build_second_class(const PairDataset& first, const std::vector<std::vector<std::size_t>>& permutations) {
  const auto m = static_cast<std::size_t>(first.m);
  const auto n = static_cast<std::size_t>(first.n);
  if (first.m < 1 || first.n < 1 || first.params.size() != m || first.fields.size() != m * n ||
      first.pairs.size() != m * n) {
    throw InvalidArgument("first class must hold exactly m*n class-1 pairs");
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& r = first.pairs[i * n + j];
      if (r.field != i * n + j || r.param != i || r.label != Label::Dependent) {
        throw InvalidArgument("first class pairs are not in the (i, j) layout");
      }
    }
  }
  if (permutations.size() != n) throw InvalidArgument("need one permutation per replicate column");
  for (const auto& p : permutations) {
    if (p.size() != m) throw InvalidArgument("permutation length must equal m");
    std::vector<char> seen(m, 0);
    for (auto v : p) {
      if (v >= m || seen[v]) throw InvalidArgument("not a permutation of 0..m-1");
      seen[v] = 1;
    }
  }
  PairDataset d = first;
  d.permutation_seed.reset();
  d.pairs.reserve(2 * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) d.pairs.push_back({i * n + j, permutations[j][i], Label::Independent});
  }
  return d;
}

std::string default_input_transform(ProcessKind p) { return p == ProcessKind::BrownResnick ? "log" : "none"; }

void write_dataset(const std::filesystem::path& dir, const PairDataset& data) {
  namespace fs = std::filesystem;
  const auto m = static_cast<std::size_t>(data.m);
  const auto n = static_cast<std::size_t>(data.n);
  const std::size_t mn = m * n;
  if (data.params.size() != m || data.fields.size() != mn || (data.pairs.size() != mn && data.pairs.size() != 2 * mn)) {
    throw InvalidArgument("dataset layout is inconsistent with m and n");
  }
  const bool both = data.pairs.size() == 2 * mn;
  const std::size_t k = data.params.empty() ? 0 : data.params.front().size();
  const auto side = static_cast<std::int64_t>(data.grid.side);
  fs::create_directories(dir);

  std::vector<float> fields;
  fields.reserve(mn * data.grid.size());
  for (const auto& f : data.fields) {
    if (!(f.grid == data.grid)) throw InvalidArgument("field grid differs from dataset grid");
    for (double v : f.values) fields.push_back(static_cast<float>(v));
  }
  const std::int64_t fshape[] = {static_cast<std::int64_t>(mn), side, side};
  write_tensor(dir / "fields.nlt", fshape, std::span<const float>(fields));

  std::vector<double> params;
  for (const auto& p : data.params) params.insert(params.end(), p.values.begin(), p.values.end());
  const std::int64_t pshape[] = {static_cast<std::int64_t>(m), static_cast<std::int64_t>(k)};
  write_tensor(dir / "params.nlt", pshape, std::span<const double>(params));

  std::vector<float> labels(both ? 2 * mn : mn, 1.0f);
  if (both) {
    std::vector<double> permuted;
    std::vector<float> index;
    permuted.reserve(mn * k);
    for (std::size_t t = mn; t < 2 * mn; ++t) {
      const auto& r = data.pairs[t];
      if (r.field != t - mn || r.label != Label::Independent) throw InvalidArgument("class-2 pairs are out of layout");
      const auto& v = data.params[r.param].values;
      permuted.insert(permuted.end(), v.begin(), v.end());
      index.push_back(static_cast<float>(r.param));
      labels[t] = 2.0f;
    }
    const std::int64_t qshape[] = {static_cast<std::int64_t>(mn), static_cast<std::int64_t>(k)};
    write_tensor(dir / "permuted_params.nlt", qshape, std::span<const double>(permuted));
    const std::int64_t ishape[] = {static_cast<std::int64_t>(mn)};
    write_tensor(dir / "permutation.nlt", ishape, std::span<const float>(index));
  }
  const std::int64_t lshape[] = {static_cast<std::int64_t>(labels.size())};
  write_tensor(dir / "labels.nlt", lshape, std::span<const float>(labels));

  json man;
  man["format"] = "nls-dataset";
  man["version"] = 1;
  man["process"] = to_string(data.process);
  man["parameter_names"] = parameter_names(data.process);
  man["grid"] = {{"side", data.grid.side},
                 {"domain_min", {data.grid.lo[0], data.grid.lo[1]}},
                 {"domain_max", {data.grid.hi[0], data.grid.hi[1]}}};
  json b = json::array();
  for (const auto& [lo, hi] : data.bounds) b.push_back({lo, hi});
  man["bounds"] = b;
  man["m"] = data.m;
  man["n"] = data.n;
  man["seed"] = data.seed;
  if (data.permutation_seed) man["permutation_seed"] = *data.permutation_seed;
  man["classes"] = both ? 2 : 1;
  man["class_layout"] =
      "labels[0:m*n] = 1 pairs field i*n+j with params[i]; labels[m*n:2*m*n] = 2 pairs field i*n+j with "
      "permuted_params[i*n+j]";
  man["input_transform"] = default_input_transform(data.process);
  std::ofstream os(dir / "manifest.json");
  os << man.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
}

PairDataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigurationError("dataset manifest missing in " + dir.string());
  json man;
  try {
    man = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  PairDataset d;
  std::size_t classes = 1;
  try {
    if (man.at("format").get<std::string>() != "nls-dataset") throw FormatError("not a dataset manifest");
    d.process = process_from_string(man.at("process").get<std::string>());
    const auto& g = man.at("grid");
    d.grid.side = g.at("side").get<int>();
    d.grid.lo = {g.at("domain_min").at(0).get<double>(), g.at("domain_min").at(1).get<double>()};
    d.grid.hi = {g.at("domain_max").at(0).get<double>(), g.at("domain_max").at(1).get<double>()};
    for (const auto& b : man.at("bounds")) d.bounds.emplace_back(b.at(0).get<double>(), b.at(1).get<double>());
    d.m = man.at("m").get<int>();
    d.n = man.at("n").get<int>();
    d.seed = man.at("seed").get<std::uint64_t>();
    if (man.contains("permutation_seed")) d.permutation_seed = man["permutation_seed"].get<std::uint64_t>();
    classes = man.at("classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  } catch (const ConfigurationError& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  if (d.m < 1 || d.n < 1 || d.grid.side < 1 || (classes != 1 && classes != 2)) {
    throw FormatError("dataset manifest has invalid sizes");
  }
  const auto m = static_cast<std::size_t>(d.m);
  const auto n = static_cast<std::size_t>(d.n);
  const std::size_t mn = m * n;
  const auto side = static_cast<std::int64_t>(d.grid.side);
  const auto names = parameter_names(d.process);
  const auto k = static_cast<std::int64_t>(names.size());

  auto expect = [](const Tensor& t, std::vector<std::int64_t> shape, const char* what) {
    if (t.shape != shape) throw FormatError(std::string(what) + " has unexpected shape");
  };
  const Tensor fields = read_tensor(dir / "fields.nlt");
  expect(fields, {static_cast<std::int64_t>(mn), side, side}, "fields.nlt");
  const Tensor params = read_tensor(dir / "params.nlt");
  expect(params, {static_cast<std::int64_t>(m), k}, "params.nlt");
  const Tensor labels = read_tensor(dir / "labels.nlt");
  expect(labels, {static_cast<std::int64_t>(classes * mn)}, "labels.nlt");

  const std::size_t s = d.grid.size();
  d.fields.reserve(mn);
  for (std::size_t t = 0; t < mn; ++t) {
    std::vector<double> v(fields.data.begin() + static_cast<std::ptrdiff_t>(t * s),
                          fields.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * s));
    try {
      d.fields.emplace_back(d.grid, std::move(v));
    } catch (const InvalidArgument& e) {
      throw FormatError(std::string("fields.nlt: ") + e.what());
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> v(params.data.begin() + static_cast<std::ptrdiff_t>(i * k),
                          params.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    d.params.emplace_back(std::move(v), names);
  }
  for (std::size_t t = 0; t < mn; ++t) {
    if (labels.data[t] != 1.0f) throw FormatError("labels.nlt: class-1 block holds a non-1 label");
    d.pairs.push_back({t, t / n, Label::Dependent});
  }
  if (classes == 2) {
    const Tensor perm = read_tensor(dir / "permutation.nlt");
    expect(perm, {static_cast<std::int64_t>(mn)}, "permutation.nlt");
    for (std::size_t t = 0; t < mn; ++t) {
      if (labels.data[mn + t] != 2.0f) throw FormatError("labels.nlt: class-2 block holds a non-2 label");
      const float p = perm.data[t];
      if (!(p >= 0.0f) || p != std::floor(p) || static_cast<std::size_t>(p) >= m) {
        throw FormatError("permutation.nlt holds an invalid index");
      }
      d.pairs.push_back({t, static_cast<std::size_t>(p), Label::Independent});
    }
  }
  return d;
}

}  // namespace nls
