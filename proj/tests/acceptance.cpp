// Acceptance suite: one PASS/FAIL line per criterion.
//   nls_acceptance [--only N]...

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/tanh_sinh.hpp>

#include "gradcheck.hpp"
#include "nls/br_pairwise.hpp"
#include "nls/calibrate.hpp"
#include "nls/errors.hpp"
#include "nls/eval.hpp"
#include "nls/gp_likelihood.hpp"
#include "nls/inference.hpp"
#include "nls/neural.hpp"
#include "nls/simulate.hpp"
#include "oracles.hpp"

using namespace nls;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " FAILED: " << what << ";";
    }
  }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// ---------------------------------------------------------------- 1
void gp_oracle(Outcome& out) {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.2, 2.5);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int c = 0; c < 200; ++c) {
    const int side = 1 + c % 6;
    const auto g = GridSpec::square(side, 0.0, std::max(1.0, side - 1.0));
    const Parameter theta({u(rng), u(rng)});
    SpatialField y;
    if (c % 2 == 0) {
      y = simulate_gp(theta, g, rng());
    } else {
      std::vector<double> v(g.size());
      for (auto& x : v) x = 2.0 * nd(rng);
      y = SpatialField(g, v);
    }
    const Eigen::MatrixXd s = test::dense_exp_covariance(theta[0], theta[1], g);
    const double want = test::dense_mvn_logpdf(y.vector(), s);
    worst = std::max(worst, rel_err(gp_log_likelihood(y, theta, g), want));
  }
  out.detail << "max relative error " << worst << " over 200 instances";
  out.require(worst <= 1e-8, "relative error above 1e-8");
}

// ---------------------------------------------------------------- 2
void gradient(Outcome& out) {
  double worst = 0.0, worst_norm = 0.0;
  for (std::uint64_t s = 1; s <= 20; ++s) {
    const auto r = test::gradient_check(s);
    worst = std::max(worst, r.max_relative);
    worst_norm = std::max(worst_norm, r.norm_relative);
  }
  out.detail << "max componentwise relative error " << worst << ", max norm-relative error " << worst_norm
             << " over 20 draws";
  out.require(worst < 1e-4, "componentwise relative error >= 1e-4");
}

// ---------------------------------------------------------------- 3
void class_invariants(Outcome& out) {
  std::mt19937_64 rng(303);
  int failures = 0;
  for (int c = 0; c < 100; ++c) {
    SimConfig cfg;
    cfg.process = c % 4 == 3 ? ProcessKind::BrownResnick : ProcessKind::Gaussian;
    cfg.grid = GridSpec::square(3, -2, 2);
    cfg.m = 1 + static_cast<int>(rng() % 20);
    cfg.n = 1 + static_cast<int>(rng() % 10);
    cfg.bounds = SimConfig::default_bounds(cfg.process);
    cfg.br.n_spectral = 50;
    cfg.seed = rng();
    const auto d = build_second_class(build_first_class(cfg), rng());
    const auto mn = static_cast<std::size_t>(cfg.m * cfg.n);
    std::map<std::size_t, int> c1, c2;
    std::multiset<std::size_t> f1, f2;
    for (const auto& r : d.pairs) {
      (r.label == Label::Dependent ? c1 : c2)[r.param]++;
      (r.label == Label::Dependent ? f1 : f2).insert(r.field);
    }
    bool ok = d.pairs.size() == 2 * mn && d.count(Label::Dependent) == mn && d.count(Label::Independent) == mn;
    ok = ok && c1 == c2 && f1 == f2 && c1.size() == static_cast<std::size_t>(cfg.m);
    for (auto [i, k] : c1) ok = ok && k == cfg.n;
    failures += ok ? 0 : 1;
  }
  out.detail << failures << " of 100 random cases violate an invariant";
  out.require(failures == 0, "invariant violated");
}

// ---------------------------------------------------------------- 4
// Two parameters, each always producing the same constant field. Class 1
// pairs a field with its own parameter; the permuted class pairs it with
// either parameter half the time, so the posterior is 2/3 for matched
// (field, theta) and 0 for mismatched.
void degenerate_task(Outcome& out) {
  const int m = 40, n = 50;
  const auto g = GridSpec::square(8, -1, 1);
  const Parameter ta({0.5, 0.5}), tb({1.5, 1.5});
  const SpatialField fa(g, std::vector<double>(g.size(), 1.0)), fb(g, std::vector<double>(g.size(), -1.0));
  PairDataset first;
  first.grid = g;
  first.bounds = {{0.0, 2.0}, {0.0, 2.0}};
  first.m = m;
  first.n = n;
  for (int i = 0; i < m; ++i) {
    first.params.push_back(i < m / 2 ? ta : tb);
    for (int j = 0; j < n; ++j) {
      first.fields.push_back(i < m / 2 ? fa : fb);
      const auto k = static_cast<std::size_t>(i * n + j);
      first.pairs.push_back({k, static_cast<std::size_t>(i), Label::Dependent});
    }
  }
  const auto data = build_second_class(first, 404);

  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.epochs = 100;
  cfg.lr_initial = 1e-3;
  cfg.lr_hold_epochs = 40;
  cfg.seed = 4;
  const auto model = train(data, Architecture::for_side(8, {16, 16, 8}), cfg);

  const std::array<std::pair<const SpatialField*, const Parameter*>, 4> combos{
      {{&fa, &ta}, {&fa, &tb}, {&fb, &ta}, {&fb, &tb}}};
  const std::array<double, 4> want{2.0 / 3.0, 0.0, 0.0, 2.0 / 3.0};
  const char* names[] = {"(A, theta_A)", "(A, theta_B)", "(B, theta_A)", "(B, theta_B)"};
  double worst = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double h = forward(model, *combos[k].first, *combos[k].second)[0];
    worst = std::max(worst, std::abs(h - want[k]));
    out.detail << names[k] << " h=" << h << " (target " << want[k] << ") ";
  }
  out.detail << "max deviation " << worst;
  out.require(worst <= 0.05, "deviation above 0.05");
}

// ---------------------------------------------------------------- 5
void transforms_and_regions(Outcome& out) {
  out.require(log_psi(0.5) == 0.0, "log_psi(0.5) != 0");
  const double q = chi2_quantile(0.01, 2);
  out.detail << "chi2_quantile(0.01, 2)=" << q;
  out.require(std::abs(q - 9.21) <= 0.01, "chi-squared quantile");

  const auto pg = make_parameter_grid({{0.0, 2.0}, {0.0, 2.0}}, {20, 20});
  const auto fg = GridSpec::square(5, -4, 4);
  int shift_fail = 0, nest_fail = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto y = simulate_gp(Parameter({1.0, 1.5}), fg, 500 + s);
    const Surface base = gp_surface(y, pg);
    Surface shifted = base;
    const double c = 137.25 * (static_cast<double>(s) - 10.0);
    for (auto& v : shifted.values) v += c;
    if (grid_mle(base).index != grid_mle(shifted).index) ++shift_fail;
    if (confidence_region(base, 0.05).membership != confidence_region(shifted, 0.05).membership) ++shift_fail;
    const auto r01 = confidence_region(base, 0.01), r05 = confidence_region(base, 0.05),
               r20 = confidence_region(base, 0.2);
    for (std::size_t i = 0; i < base.values.size(); ++i) {
      if ((r20.membership[i] && !r05.membership[i]) || (r05.membership[i] && !r01.membership[i])) ++nest_fail;
    }
  }
  out.detail << ", shift failures " << shift_fail << ", nesting failures " << nest_fail;
  out.require(shift_fail == 0, "shift invariance");
  out.require(nest_fail == 0, "nesting in alpha");

  CnnModel model;
  model.net = Network<float>(Architecture::for_side(8, {4, 4, 4}));
  model.net.initialize(55);
  PlattModel platt;
  platt.beta0 = 0.3;
  platt.beta1 = 0.7;
  int argmax_fail = 0;
  const auto g8 = GridSpec::square(8, -4, 4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto y = simulate_gp(Parameter({0.8, 1.2}), g8, 900 + s);
    if (grid_mle(neural_surface(model, nullptr, y, pg)).index != grid_mle(neural_surface(model, &platt, y, pg)).index) {
      ++argmax_fail;
    }
  }
  out.detail << ", Platt argmax changes " << argmax_fail;
  out.require(argmax_fail == 0, "argmax moved under monotone Platt");
}

// ---------------------------------------------------------------- 6
double partials_error(double z1, double z2, double a) {
  const auto want = test::hr_exponent_reference(z1, z2, a);
  const auto t = hr_exponent(z1, z2, a);
  return std::max({rel_err(t.V1, want.V1), rel_err(t.V2, want.V2), rel_err(t.V12, want.V12)});
}

void bivariate(Outcome& out) {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> lz(-3, 3), la(-2, 1.5);
  double sym = 0.0, hom = 0.0, part = 0.0;
  for (int c = 0; c < 200; ++c) {
    const double z1 = std::exp(lz(rng)), z2 = std::exp(lz(rng)), a = std::exp(la(rng)), k = std::exp(lz(rng));
    const double v = hr_exponent(z1, z2, a).V;
    sym = std::max(sym, rel_err(hr_exponent(z2, z1, a).V, v));
    hom = std::max(hom, rel_err(hr_exponent(k * z1, k * z2, a).V, v / k));
    if (c < 50) part = std::max(part, partials_error(z1, z2, a));
  }
  double lim = 0.0;
  for (double z : {0.1, 1.0, 3.0}) {
    for (double a : {0.5, 1.0, 2.0}) lim = std::max(lim, std::abs(hr_exponent(z, 1e8, a).V - 1.0 / z));
  }
  out.detail << "symmetry " << sym << ", homogeneity " << hom << ", V(z, 1e8) - 1/z " << lim
             << ", partials rel. error " << part;
  out.require(sym <= 1e-10, "symmetry");
  out.require(hom <= 1e-10, "homogeneity");
  out.require(lim <= 1e-6, "V(z, 1e8) limit");
  out.require(part <= 1e-5, "analytic partials");

  boost::math::quadrature::tanh_sinh<double> ts;
  auto z_of = [](double u) { return -1.0 / std::log(u); };
  auto jac = [](double u) {
    const double l = std::log(u);
    return 1.0 / (u * l * l);
  };
  for (double a : {0.5, 1.0, 2.0}) {
    auto inner = [&](double u1) {
      return ts.integrate(
          [&](double u2) { return std::exp(bivariate_log_density(z_of(u1), z_of(u2), a)) * jac(u1) * jac(u2); }, 0.0,
          1.0, 1e-9);
    };
    const double total = ts.integrate(inner, 0.0, 1.0, 1e-8);
    out.detail << ", integral(a=" << a << ")=" << total;
    out.require(std::abs(total - 1.0) <= 1e-3, "density integral");
  }
}

// ---------------------------------------------------------------- 7
void adjustment(Outcome& out) {
  AdjustmentModel m;
  m.H << 2.0, 0.3, 0.3, 1.1;
  m.J = m.H;
  bool identity = true;
  for (auto method : {SqrtMethod::Cholesky, SqrtMethod::Eigen}) {
    identity = identity && *adjustment_matrix(m, method).C == Eigen::Matrix2d::Identity();
  }
  out.require(identity, "H = J does not give C = I");
  const auto g = GridSpec::square(5, -10, 10);
  const auto pg = make_parameter_grid({{0, 2}, {0, 2}}, {10, 10});
  bool same = true;
  const auto mi = adjustment_matrix(m);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto y = simulate_brown_resnick(Parameter({1.0, 1.0}), g, 70 + s);
    const auto raw = pairwise_surface(y, pg, 5.0);
    same = same && adjusted_surface(y, raw, mi).values == raw.values;
  }
  out.require(same, "identity adjustment changed the surface");

  std::mt19937_64 rng(707);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    Eigen::Matrix2d x, z;
    x << nd(rng), nd(rng), nd(rng), nd(rng);
    z << nd(rng), nd(rng), nd(rng), nd(rng);
    m.H = x * x.transpose() + 0.1 * Eigen::Matrix2d::Identity();
    m.J = z * z.transpose() + 0.1 * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d h_adj = m.H * m.J.inverse() * m.H;
    for (auto method : {SqrtMethod::Cholesky, SqrtMethod::Eigen}) {
      const auto r = adjustment_matrix(m, method);
      worst = std::max(worst, (r.C->transpose() * m.H * *r.C - h_adj).norm() / h_adj.norm());
    }
  }
  out.detail << "recomposition relative error " << worst;
  out.require(worst <= 1e-8, "recomposition");

  Eigen::Matrix2d a;
  a << 1.5, 0.25, 0.25, 0.75;
  const ScalarFunction f = [&](const Eigen::VectorXd& v) { return -v.dot(a * v) + 0.5 * v(0); };
  bool exact = true;
  for (auto [s1, s2] : hessian_stencil_order()) {
    exact = exact && fd_hessian_stencil(f, Eigen::Vector2d(0.5, 1.25), 0.25, s1, s2) == -2.0 * a;
  }
  out.require(exact, "quadratic Hessian not exact");
}

// ---------------------------------------------------------------- 8
void end_to_end(Outcome& out) {
  auto t0 = std::chrono::steady_clock::now();
  auto minutes = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  };
  SimConfig sim;
  sim.process = ProcessKind::Gaussian;
  sim.grid = GridSpec::square(16, -10, 10);
  sim.m = 300;
  sim.n = 50;
  sim.bounds = SimConfig::default_bounds(sim.process);
  sim.seed = 8001;
  const auto data = build_second_class(build_first_class(sim), 8002);
  TrainConfig tc = TrainConfig::gp_defaults();
  tc.batch_size = 512;
  tc.seed = 8003;
  TrainingLog log;
  const auto model = train(data, Architecture::for_side(16), tc, &log);
  std::cerr << "  [8] trained in " << minutes() << " min, attempts " << log.attempts << ", final train loss "
            << log.epochs.back().train_loss << ", validation loss " << log.epochs.back().validation_loss << "\n";

  SimConfig cal = sim;
  cal.m = 100;
  cal.n = 20;
  cal.bounds = {{0.0, 2.0}, {0.0, 2.0}};
  cal.seed = 8004;
  const auto platt = calibrate_model(model, build_second_class(build_first_class(cal), 8005));
  std::cerr << "  [8] Platt beta0 " << platt.beta0 << ", beta1 " << platt.beta1 << "\n";

  EvalConfig ec;
  ec.grid = sim.grid;
  ec.true_counts = {5, 5};
  ec.replicates = 100;
  ec.surface_counts = {40, 40};
  ec.methods = {MethodSpec::parse("neural-calibrated"), MethodSpec::parse("gp-exact")};
  ec.seed = 8006;
  const auto r = run_study(ec, {&model, &platt});
  std::cerr << "  [8] study done at " << minutes() << " min\n";
  const auto& nm = r.methods[0];
  const auto& gm = r.methods[1];
  out.detail << "neural coverage " << nm.mean_coverage << ", exact coverage " << gm.mean_coverage << ", neural RMSE "
             << nm.metrics.rmse << ", exact RMSE " << gm.metrics.rmse << ", " << minutes() << " min";
  const bool neural_ok = nm.mean_coverage >= 0.85 && nm.mean_coverage <= 1.0;
  const bool exact_ok = gm.mean_coverage >= 0.90 && gm.mean_coverage <= 0.99;
  out.require(neural_ok, "neural coverage outside [0.85, 1.00]");
  out.require(exact_ok, "exact coverage outside [0.90, 0.99]");
  out.require(nm.metrics.rmse <= 2.0 * gm.metrics.rmse, "neural RMSE above twice the exact RMSE");
  if (!neural_ok || !exact_ok) {
    for (const auto* m : {&nm, &gm}) {
      for (const auto& p : m->points) {
        std::cerr << "  [8] " << m->method.name() << " theta=(" << p.truth[0] << ", " << p.truth[1]
                  << ") coverage " << p.coverage << " [" << p.coverage_ci.lower << ", " << p.coverage_ci.upper
                  << "]\n";
      }
    }
  }
}

// ---------------------------------------------------------------- 9
void timing(Outcome& out) {
  EvalConfig ec;
  ec.grid = GridSpec::square(25, -10, 10);
  ec.surface_counts = {40, 40};
  ec.methods = {MethodSpec::parse("gp-exact")};
  ec.timing_fields = 50;
  ec.timing_deltas = {1.0, 2.0, 5.0, 10.0};
  ec.seed = 9001;
  CnnModel model;
  model.net = Network<float>(Architecture::for_side(25));
  model.net.initialize(9002);
  const auto t = run_timing_study(ec, model);
  std::map<std::string, double> sec;
  std::vector<double> pw;
  for (const auto& r : t) {
    out.detail << r.method << (r.delta ? ":" + std::to_string(static_cast<int>(*r.delta)) : "") << " "
               << r.mean_seconds << "s ";
    if (r.delta) {
      pw.push_back(r.mean_seconds);
    } else {
      sec[r.method] = r.mean_seconds;
    }
  }
  const double vec = sec.at("neural-vectorized"), unvec = sec.at("neural-unvectorized"), gp = sec.at("gp-exact");
  out.detail << "(per field)";
  out.require(unvec >= 3.0 * vec, "vectorized neural not 3x faster than unvectorized");
  out.require(vec < gp, "vectorized neural not faster than the exact GP surface");
  out.require(std::is_sorted(pw.begin(), pw.end()), "pairwise time decreases in delta");
}

// ---------------------------------------------------------------- 10
void marginals(Outcome& out) {
  const int n = 20000;
  GaussianSimulator gs(Parameter({1.0, 1.0}), GridSpec::square(1, 0, 1));
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double y = gs.sample(static_cast<std::uint64_t>(k) + 1).values[0];
    s += y;
    s2 += y * y;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  // Four Monte Carlo standard errors: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n).
  const double mean_band = 4.0 / std::sqrt(n), var_band = 4.0 * std::sqrt(2.0 / n);
  out.detail << "GP mean " << mean << " (band " << mean_band << "), variance " << var << " (band 1 +- " << var_band
             << ")";
  out.require(std::abs(mean) <= mean_band, "GP mean");
  out.require(std::abs(var - 1.0) <= var_band, "GP variance");

  const auto g = GridSpec::square(16, -10, 10);
  BrownResnickSimulator br(Parameter({1.0, 1.0}), g);
  const std::size_t site = g.size() / 2 + 8;
  std::vector<double> x;
  for (int k = 0; k < 2000; ++k) x.push_back(br.sample(derive_seed(10001, {static_cast<std::uint64_t>(k)})).values[site]);
  const double d = test::ks_distance(x, [](double z) { return std::exp(-1.0 / z); });
  out.detail << ", Brown-Resnick KS distance " << d;
  out.require(d <= 0.03, "Brown-Resnick KS distance above 0.03");
}

struct Criterion {
  int id;
  const char* name;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only.insert(std::stoi(argv[++i]));
    } else {
      std::cerr << "usage: nls_acceptance [--only N]...\n";
      return 2;
    }
  }
  const std::vector<Criterion> all{
      {1, "GP likelihood matches the dense oracle", gp_oracle},
      {2, "CNN gradient check", gradient},
      {3, "class construction invariants", class_invariants},
      {4, "degenerate task Bayes optimality", degenerate_task},
      {5, "transform and region exactness", transforms_and_regions},
      {6, "Brown-Resnick bivariate checks", bivariate},
      {7, "adjustment sanity", adjustment},
      {8, "desk-scale GP end to end", end_to_end},
      {9, "timing ratios", timing},
      {10, "simulator marginals", marginals},
  };
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %s: %s (%.1f s) %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, sec,
                o.detail.str().c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
