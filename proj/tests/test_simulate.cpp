#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <fstream>
#include <random>
#include <set>

#include "nls/errors.hpp"
#include "nls/simulate.hpp"
#include "nls/tensor_io.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace nls;

TEST_CASE("latin hypercube strata") {
  SUBCASE("m = 1") {
    auto s = lhs_sample(1, {{0, 2}, {0, 2}}, 5);
    REQUIRE(s.size() == 1);
    CHECK(s[0][0] > 0.0);
    CHECK(s[0][0] < 2.0);
  }
  SUBCASE("one point per stratum, property over seeds and sizes") {
    std::mt19937_64 rng(11);
    for (int c = 0; c < 40; ++c) {
      const int m = 1 + static_cast<int>(rng() % 60);
      const double lo = -3.0 + static_cast<double>(rng() % 5);
      const double hi = lo + 0.5 + static_cast<double>(rng() % 7);
      auto s = lhs_sample(m, {{lo, hi}, {0.0, 1.0}}, rng());
      REQUIRE(s.size() == static_cast<std::size_t>(m));
      for (int a = 0; a < 2; ++a) {
        const double l = a == 0 ? lo : 0.0, h = a == 0 ? hi : 1.0;
        std::vector<int> hits(static_cast<std::size_t>(m), 0);
        for (const auto& p : s) {
          REQUIRE(p[a] > l);
          REQUIRE(p[a] < h);
          ++hits[static_cast<std::size_t>(std::floor((p[a] - l) / (h - l) * m))];
        }
        for (int x : hits) REQUIRE(x == 1);
      }
    }
  }
  SUBCASE("m = 4 on (0,1)^2") {
    auto s = lhs_sample(4, {{0, 1}, {0, 1}}, 9);
    for (int a = 0; a < 2; ++a) {
      std::vector<double> v;
      for (const auto& p : s) v.push_back(p[a]);
      std::sort(v.begin(), v.end());
      for (int q = 0; q < 4; ++q) {
        CHECK(v[static_cast<std::size_t>(q)] >= 0.25 * q);
        CHECK(v[static_cast<std::size_t>(q)] < 0.25 * (q + 1));
      }
    }
  }
  SUBCASE("deterministic") {
    auto a = lhs_sample(10, {{0, 1}, {0, 1}}, 3);
    auto b = lhs_sample(10, {{0, 1}, {0, 1}}, 3);
    auto c = lhs_sample(10, {{0, 1}, {0, 1}}, 4);
    for (int i = 0; i < 10; ++i) CHECK(a[static_cast<std::size_t>(i)].values == b[static_cast<std::size_t>(i)].values);
    CHECK(a[0].values != c[0].values);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(lhs_sample(0, {{0, 1}}, 1), InvalidArgument);
    CHECK_THROWS_AS(lhs_sample(3, {{1, 1}}, 1), InvalidArgument);
    CHECK_THROWS_AS(lhs_sample(3, {{0, INFINITY}}, 1), InvalidArgument);
    CHECK_THROWS_AS(lhs_sample(3, {}, 1), InvalidArgument);
  }
}

TEST_CASE("Gaussian simulation") {
  SUBCASE("1x1 standard normal moments") {
    const auto g = GridSpec::square(1, 0, 1);
    GaussianSimulator sim(Parameter({1.0, 1.0}), g);
    const int n = 10000;
    double s = 0.0, s2 = 0.0;
    for (int k = 0; k < n; ++k) {
      const double y = sim.sample(static_cast<std::uint64_t>(k) + 1).values[0];
      s += y;
      s2 += y * y;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
  }
  SUBCASE("2x2 sample covariance matches the kernel") {
    const auto g = GridSpec::square(2, 0, 1);
    const Parameter theta({1.5, 0.8});
    GaussianSimulator sim(theta, g);
    const Eigen::MatrixXd sigma = test::dense_exp_covariance(1.5, 0.8, g);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(4, 4);
    const int n = 20000;
    for (int k = 0; k < n; ++k) {
      const auto f = sim.sample(static_cast<std::uint64_t>(k));
      const Eigen::VectorXd y = f.vector();
      acc += y * y.transpose();
    }
    acc /= n;
    // Monte Carlo sd of a covariance estimate is about sqrt(2) * 1.5 / sqrt(n).
    CHECK((acc - sigma).cwiseAbs().maxCoeff() < 5 * std::sqrt(2.0) * 1.5 / std::sqrt(n));
  }
  SUBCASE("seed determinism") {
    const auto g = GridSpec::square(4, 0, 1);
    auto a = simulate_gp(Parameter({1.0, 1.0}), g, 7);
    auto b = simulate_gp(Parameter({1.0, 1.0}), g, 7);
    auto c = simulate_gp(Parameter({1.0, 1.0}), g, 8);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
  }
  SUBCASE("invalid parameters") {
    CHECK_THROWS_AS(simulate_gp(Parameter({0.0, 1.0}), GridSpec::square(3, 0, 1), 1), InvalidArgument);
    CHECK_THROWS_AS(simulate_gp(Parameter({1.0, -1.0}), GridSpec::square(3, 0, 1), 1), InvalidArgument);
  }
}

TEST_CASE("Brown-Resnick simulation") {
  SUBCASE("semivariogram") {
    CHECK(semivariogram(0.0, 1.0, 1.0) == 0.0);
    CHECK(semivariogram(2.0, 1.0, 1.0) == doctest::Approx(2.0));
    CHECK(semivariogram(3.0, 1.5, 2.0) == doctest::Approx(4.0));
    CHECK_THROWS_AS(semivariogram(1.0, 0.0, 1.0), InvalidArgument);
    CHECK_THROWS_AS(semivariogram(1.0, 1.0, 2.5), InvalidArgument);
    CHECK_THROWS_AS(semivariogram(-1.0, 1.0, 1.0), InvalidArgument);
  }
  SUBCASE("positive values and determinism") {
    const auto g = GridSpec::square(5, -10, 10);
    auto a = simulate_brown_resnick(Parameter({1.0, 1.0}), g, 3);
    auto b = simulate_brown_resnick(Parameter({1.0, 1.0}), g, 3);
    CHECK(a.values == b.values);
    for (double v : a.values) CHECK(v > 0.0);
  }
  SUBCASE("nu = 2 uses the semidefinite root") {
    auto f = simulate_brown_resnick(Parameter({1.0, 2.0}), GridSpec::square(4, 0, 3), 1);
    for (double v : f.values) CHECK(v > 0.0);
  }
  SUBCASE("single-site marginal is unit Frechet") {
    // The normalized anchor is exact on a rough field; the corner anchor
    // truncates after n_spectral terms, so it is only checked where the
    // semivariogram stays small.
    for (auto anchor : {SpectralAnchor::NormalizedRandom, SpectralAnchor::Corner}) {
      CAPTURE(static_cast<int>(anchor));
      const auto g = anchor == SpectralAnchor::Corner ? GridSpec::square(4, 0, 3) : GridSpec::square(4, -10, 10);
      BrownResnickOptions opt;
      opt.anchor = anchor;
      BrownResnickSimulator sim(Parameter({1.0, 1.0}), g, opt);
      std::vector<double> x;
      for (int k = 0; k < 800; ++k) x.push_back(sim.sample(static_cast<std::uint64_t>(k) + 100).values[5]);
      const double d = test::ks_distance(x, [](double z) { return std::exp(-1.0 / z); });
      // 0.1% critical value of the one-sample KS statistic at n = 800.
      CHECK(d < 1.95 / std::sqrt(800.0));
    }
  }
  SUBCASE("invalid parameters") {
    const auto g = GridSpec::square(3, 0, 1);
    CHECK_THROWS_AS(simulate_brown_resnick(Parameter({1.0, 2.5}), g, 1), InvalidArgument);
    CHECK_THROWS_AS(simulate_brown_resnick(Parameter({-1.0, 1.0}), g, 1), InvalidArgument);
    CHECK_THROWS_AS(simulate_brown_resnick(Parameter({1.0, 1.0}), g, 1, 0), InvalidArgument);
    CHECK_THROWS_AS(check_br_theta(Parameter({1.0})), InvalidArgument);
  }
}

namespace {

SimConfig small_config(int m, int n, std::uint64_t seed, ProcessKind p = ProcessKind::Gaussian) {
  SimConfig c;
  c.process = p;
  c.grid = GridSpec::square(3, -10, 10);
  c.m = m;
  c.n = n;
  c.bounds = SimConfig::default_bounds(p);
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("class construction invariants") {
  std::mt19937_64 rng(17);
  for (int c = 0; c < 20; ++c) {
    const int m = 1 + static_cast<int>(rng() % 20);
    const int n = 1 + static_cast<int>(rng() % 10);
    auto first = build_first_class(small_config(m, n, rng()));
    auto d = build_second_class(first, rng());
    const auto mn = static_cast<std::size_t>(m * n);
    REQUIRE(d.pairs.size() == 2 * mn);
    CHECK(d.count(Label::Dependent) == mn);
    CHECK(d.count(Label::Independent) == mn);
    std::map<std::size_t, int> c1, c2;
    std::multiset<std::size_t> f1, f2;
    for (const auto& r : d.pairs) {
      (r.label == Label::Dependent ? c1 : c2)[r.param]++;
      (r.label == Label::Dependent ? f1 : f2).insert(r.field);
    }
    CHECK(c1 == c2);
    for (auto [i, k] : c1) CHECK(k == n);
    CHECK(f1 == f2);
  }
}

TEST_CASE("class construction errors") {
  auto first = build_first_class(small_config(3, 2, 1));
  CHECK_THROWS_AS(build_second_class(first, std::vector<std::vector<std::size_t>>{{0, 1, 2}}), InvalidArgument);
  CHECK_THROWS_AS(build_second_class(first, std::vector<std::vector<std::size_t>>{{0, 1, 1}, {0, 1, 2}}),
                  InvalidArgument);
  CHECK_THROWS_AS(build_second_class(first, std::vector<std::vector<std::size_t>>{{0, 1, 3}, {0, 1, 2}}),
                  InvalidArgument);
  auto twice = build_second_class(first, 3);
  CHECK_THROWS_AS(build_second_class(twice, 4), InvalidArgument);
  auto bad = small_config(0, 2, 1);
  CHECK_THROWS_AS(build_first_class(bad), InvalidArgument);
  bad = small_config(2, 2, 1, ProcessKind::BrownResnick);
  bad.bounds[1].second = 2.5;
  CHECK_THROWS_AS(build_first_class(bad), InvalidArgument);
}

TEST_CASE("first class layout and determinism") {
  auto a = build_first_class(small_config(4, 3, 9));
  auto b = build_first_class(small_config(4, 3, 9));
  for (std::size_t t = 0; t < a.fields.size(); ++t) CHECK(a.fields[t].values == b.fields[t].values);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const auto& r = a.pairs[i * 3 + j];
      CHECK(r.field == i * 3 + j);
      CHECK(r.param == i);
      CHECK(a.fields[r.field].values == simulate_gp(a.params[i], a.grid, field_seed(9, i, j)).values);
    }
  }
}

TEST_CASE("permutations are uniform per column") {
  // Each position of a 3-permutation takes each value with probability 1/3.
  const int n = 3000;
  auto p = sample_permutations(3, n, 5);
  std::vector<int> zero_at(3, 0);
  for (const auto& col : p) {
    for (std::size_t i = 0; i < 3; ++i)
      if (col[i] == 0) ++zero_at[i];
  }
  for (int z : zero_at) CHECK(std::abs(z - n / 3.0) < 4 * std::sqrt(n * (1.0 / 3) * (2.0 / 3)));
  CHECK_THROWS_AS(sample_permutations(0, 3, 1), InvalidArgument);
}

TEST_CASE("dataset persistence") {
  test::TempDir dir("dataset");
  auto d = build_second_class(build_first_class(small_config(5, 2, 4, ProcessKind::BrownResnick)), 8);
  write_dataset(dir.path(), d);
  auto r = read_dataset(dir.path());
  CHECK(r.process == ProcessKind::BrownResnick);
  CHECK(r.m == 5);
  CHECK(r.n == 2);
  CHECK(r.grid == d.grid);
  CHECK(r.permutation_seed == d.permutation_seed);
  REQUIRE(r.pairs.size() == d.pairs.size());
  for (std::size_t t = 0; t < d.pairs.size(); ++t) {
    CHECK(r.pairs[t].field == d.pairs[t].field);
    CHECK(r.pairs[t].param == d.pairs[t].param);
    CHECK(r.pairs[t].label == d.pairs[t].label);
  }
  for (std::size_t t = 0; t < d.fields.size(); ++t) {
    for (std::size_t s = 0; s < d.fields[t].values.size(); ++s) {
      CHECK(r.fields[t].values[s] == static_cast<double>(static_cast<float>(d.fields[t].values[s])));
    }
  }

  SUBCASE("class-1 only") {
    test::TempDir one("dataset1");
    write_dataset(one.path(), build_first_class(small_config(2, 2, 1)));
    CHECK_FALSE(std::filesystem::exists(one / "permutation.nlt"));
    CHECK(read_dataset(one.path()).pairs.size() == 4);
  }
  SUBCASE("missing manifest") { CHECK_THROWS_AS(read_dataset(dir / "nowhere"), ConfigurationError); }
  SUBCASE("corrupted labels") {
    std::vector<float> bad(20, 1.0f);
    write_tensor(dir / "labels.nlt", std::vector<std::int64_t>{20}, std::span<const float>(bad));
    CHECK_THROWS_AS(read_dataset(dir.path()), FormatError);
  }
  SUBCASE("wrong field shape") {
    std::vector<float> bad(10, 1.0f);
    write_tensor(dir / "fields.nlt", std::vector<std::int64_t>{10}, std::span<const float>(bad));
    CHECK_THROWS_AS(read_dataset(dir.path()), FormatError);
  }
  SUBCASE("unknown process in manifest") {
    std::ofstream(dir / "manifest.json") << R"({"format":"nls-dataset","process":"x"})";
    CHECK_THROWS_AS(read_dataset(dir.path()), FormatError);
  }
}
