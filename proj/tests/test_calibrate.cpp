#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "nls/calibrate.hpp"
#include "nls/errors.hpp"
#include "nls/simulate.hpp"
#include "support.hpp"

using namespace nls;

namespace {

struct Sample {
  std::vector<double> probs;
  std::vector<int> labels;
};

// Labels drawn from P(class 1) = sigmoid(b0 + b1 logit(p)).
Sample logistic_sample(std::size_t n, double b0, double b1, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  Sample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = u(rng);
    const double q = 1.0 / (1.0 + std::exp(-(b0 + b1 * std::log(p / (1 - p)))));
    s.probs.push_back(p);
    s.labels.push_back(u(rng) < q ? 1 : 2);
  }
  return s;
}

}  // namespace

TEST_CASE("logit and sigmoid") {
  CHECK(logit(0.5) == 0.0);
  CHECK(sigmoid(0.0) == 0.5);
  for (double x : {-30.0, -2.0, 0.3, 5.0, 20.0}) CHECK(logit(sigmoid(x)) == doctest::Approx(x).epsilon(1e-6));
  CHECK(sigmoid(-800.0) == 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("Platt fit") {
  SUBCASE("recovers generating coefficients") {
    const auto s = logistic_sample(40000, 0.4, 0.6, 1);
    const auto m = fit_platt(s.probs, s.labels);
    CHECK(m.converged);
    CHECK(m.beta0 == doctest::Approx(0.4).epsilon(0.1));
    CHECK(m.beta1 == doctest::Approx(0.6).epsilon(0.1));
    // Score equations vanish at the fit.
    double g0 = 0, g1 = 0;
    for (std::size_t i = 0; i < s.probs.size(); ++i) {
      const double x = std::log(s.probs[i] / (1 - s.probs[i]));
      const double r = (s.labels[i] == 1 ? 1.0 : 0.0) - 1.0 / (1.0 + std::exp(-(m.beta0 + m.beta1 * x)));
      g0 += r;
      g1 += r * x;
    }
    CHECK(std::abs(g0) / s.probs.size() < 1e-8);
    CHECK(std::abs(g1) / s.probs.size() < 1e-8);
  }
  SUBCASE("calibrated input stays close to identity") {
    const auto s = logistic_sample(40000, 0.0, 1.0, 2);
    const auto m = fit_platt(s.probs, s.labels);
    CHECK(std::abs(m.beta0) < 0.06);
    CHECK(m.beta1 == doctest::Approx(1.0).epsilon(0.06));
    CHECK(m.monotone());
  }
  SUBCASE("fit lowers log loss") {
    const auto s = logistic_sample(5000, -0.7, 2.0, 3);
    const auto m = fit_platt(s.probs, s.labels);
    std::vector<double> cal;
    for (double p : s.probs) cal.push_back(apply_platt(m, p));
    CHECK(log_loss(cal, s.labels) < log_loss(s.probs, s.labels));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(fit_platt({0.2, 0.7}, {1, 1}), InvalidArgument);
    CHECK_THROWS_AS(fit_platt({0.2, 0.7}, {1, 3}), InvalidArgument);
    CHECK_THROWS_AS(fit_platt({0.2}, {1, 2}), InvalidArgument);
    CHECK_THROWS_AS(fit_platt({0.2, 1.7}, {1, 2}), InvalidArgument);
    CHECK_THROWS_AS(fit_platt({0.2, 0.7}, {1, 2}, 0.0), InvalidArgument);
    // Perfectly separated classes drive the slope to infinity.
    std::vector<double> p;
    std::vector<int> l;
    for (int i = 0; i < 50; ++i) {
      p.push_back(0.3 + 0.001 * i);
      l.push_back(2);
      p.push_back(0.7 + 0.001 * i);
      l.push_back(1);
    }
    CHECK_THROWS_AS(fit_platt(p, l), NumericError);
  }
}

TEST_CASE("Platt application") {
  PlattModel m;
  m.beta0 = 0.5;
  m.beta1 = 2.0;
  CHECK(apply_platt_logit(m, 0.5) == 0.5);
  CHECK(apply_platt(m, 0.5) == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))));
  bool clamped = false;
  CHECK(apply_platt_logit(m, 0.0, &clamped) == doctest::Approx(0.5 + 2.0 * std::log(1e-7 / (1 - 1e-7))));
  CHECK(clamped);
  apply_platt_logit(m, 0.3, &clamped);
  CHECK_FALSE(clamped);
  CHECK(std::isfinite(apply_platt_logit(m, 1.0)));
  CHECK_THROWS_AS(apply_platt_logit(m, std::nan("")), InvalidArgument);
  // Monotone for beta1 > 0, reversed for beta1 < 0.
  CHECK(apply_platt(m, 0.3) < apply_platt(m, 0.4));
  m.beta1 = -1.0;
  CHECK_FALSE(m.monotone());
  CHECK(apply_platt(m, 0.3) > apply_platt(m, 0.4));
}

TEST_CASE("reliability curve") {
  const std::vector<double> p{0.05, 0.15, 0.12, 0.95, 1.0, 0.55};
  const std::vector<int> l{2, 1, 2, 1, 1, 2};
  const auto bins = reliability_curve(p, l, 10);
  REQUIRE(bins.size() == 10);
  CHECK(bins[0].count == 1);
  CHECK(bins[1].count == 2);
  CHECK(bins[1].frequency == 0.5);
  CHECK(bins[1].mean_predicted == doctest::Approx(0.135));
  CHECK(bins[9].count == 2);
  CHECK(bins[9].frequency == 1.0);
  CHECK(bins[3].empty);
  CHECK_FALSE(bins[5].empty);
  CHECK(bins[9].upper == 1.0);
  CHECK_THROWS_AS(reliability_curve(p, l, 0), InvalidArgument);
}

TEST_CASE("log loss") {
  CHECK(log_loss({0.5, 0.5}, {1, 2}) == doctest::Approx(std::log(2.0)));
  CHECK(log_loss({0.8}, {1}) == doctest::Approx(-std::log(0.8)));
  CHECK(log_loss({0.8}, {2}) == doctest::Approx(-std::log(0.2)));
  CHECK(std::isfinite(log_loss({0.0}, {1})));
}

TEST_CASE("Platt persistence") {
  test::TempDir dir("platt");
  const auto s = logistic_sample(500, 0.2, 1.3, 4);
  auto m = fit_platt(s.probs, s.labels);
  m.id = "cal-7";
  save_platt(dir / "platt.json", m);
  const auto r = load_platt(dir / "platt.json");
  CHECK(r.beta0 == m.beta0);
  CHECK(r.beta1 == m.beta1);
  CHECK(r.epsilon == m.epsilon);
  CHECK(r.id == "cal-7");
  CHECK(r.iterations == m.iterations);
  CHECK(r.converged == m.converged);
  CHECK_THROWS_AS(load_platt(dir / "none.json"), ConfigurationError);
  std::ofstream(dir / "bad.json") << "{\"beta0\": \"x\"}";
  CHECK_THROWS_AS(load_platt(dir / "bad.json"), FormatError);
}

TEST_CASE("calibrating a model on a held-out dataset") {
  SimConfig s;
  s.grid = GridSpec::square(8, -4, 4);
  s.m = 4;
  s.n = 3;
  s.bounds = {{0.2, 2.0}, {0.2, 2.0}};
  s.seed = 31;
  const auto data = build_second_class(build_first_class(s), 32);
  CnnModel model;
  model.net = Network<float>(Architecture::for_side(8, {4, 4, 4}));
  model.net.initialize(33);
  std::vector<double> probs;
  std::vector<int> labels;
  classifier_outputs(model, data, probs, labels, 5);
  REQUIRE(probs.size() == 24);
  CHECK(std::count(labels.begin(), labels.end(), 1) == 12);
  CHECK(std::count(labels.begin(), labels.end(), 2) == 12);
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const auto& r = data.pairs[k];
    CHECK(probs[k] == doctest::Approx(forward(model, data.fields[r.field], data.params[r.param])[0]).epsilon(1e-6));
  }
  const auto a = calibrate_model(model, data, 5);
  const auto b = fit_platt(probs, labels);
  CHECK(a.beta0 == doctest::Approx(b.beta0).epsilon(1e-9));
  CHECK(a.beta1 == doctest::Approx(b.beta1).epsilon(1e-9));
  PairDataset empty = data;
  empty.pairs.clear();
  CHECK_THROWS_AS(calibrate_model(model, empty), InvalidArgument);
}
