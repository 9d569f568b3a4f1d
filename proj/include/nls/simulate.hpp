#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nls/core.hpp"
#include "nls/gp_likelihood.hpp"

namespace nls {

/// Latin hypercube sample of m points: on every axis each of the m
/// equal-width strata of (lo, hi) holds exactly one point. Points lie
/// strictly inside the bounds.
std::vector<Parameter> lhs_sample(int m, const Bounds& bounds, std::uint64_t seed,
                                  const std::vector<std::string>& names = {});

/// Draws y = L z for a fixed theta; the factor is computed once and reused.
class GaussianSimulator {
 public:
  GaussianSimulator(const Parameter& theta, const GridSpec& grid);
  SpatialField sample(std::uint64_t seed) const;
  const Eigen::MatrixXd& factor() const { return factor_; }

 private:
  GridSpec grid_;
  Parameter theta_;
  Eigen::MatrixXd factor_;
};

SpatialField simulate_gp(const Parameter& theta, const GridSpec& grid, std::uint64_t seed);

/// How each spectral function picks the site where its Gaussian component is
/// pinned to zero.
enum class SpectralAnchor {
  /// Every function is anchored at the lower-left grid corner.
  Corner,
  /// Every function is anchored at a uniformly drawn grid site and divided by
  /// its mean over the grid, so that max_s W(s) <= site count.
  NormalizedRandom,
};

struct BrownResnickOptions {
  int n_spectral = 500;
  SpectralAnchor anchor = SpectralAnchor::NormalizedRandom;
};

/// Semivariogram (|h| / lambda)^nu.
double semivariogram(double h, double lambda, double nu);

/// Truncated spectral simulation of a Brown-Resnick field with unit Frechet
/// margins:
///   Z(s) = max_{k <= n_spectral} eta_k W_k(s),  eta_k = 1 / (E_1 + ... + E_k)
/// with W_k(s) = exp(eps_k(s) - gamma(s - a_k)) and eps_k a Gaussian process
/// with eps_k(a_k) = 0 and variogram 2 gamma.
class BrownResnickSimulator {
 public:
  BrownResnickSimulator(const Parameter& theta, const GridSpec& grid, BrownResnickOptions options = {});
  SpatialField sample(std::uint64_t seed) const;

 private:
  GridSpec grid_;
  BrownResnickOptions options_;
  // Square root of the covariance of the corner-anchored Gaussian component
  // restricted to the non-corner sites (site 0 is identically zero).
  Eigen::MatrixXd root_;
  // gamma(s_i - s_j) for all site pairs.
  Eigen::MatrixXd gamma_;
};

SpatialField simulate_brown_resnick(const Parameter& theta, const GridSpec& grid, std::uint64_t seed,
                                    int n_spectral = 500);

void check_br_theta(const Parameter& theta);

struct SimConfig {
  ProcessKind process = ProcessKind::Gaussian;
  GridSpec grid;
  int m = 1;
  int n = 1;
  Bounds bounds{{0.0, 2.5}, {0.0, 2.5}};
  std::uint64_t seed = 0;
  BrownResnickOptions br;

  void validate() const;
  static Bounds default_bounds(ProcessKind p);
};

/// Seed of replicate j of parameter i under a dataset root seed.
std::uint64_t field_seed(std::uint64_t root, std::size_t i, std::size_t j);

/// m LHS parameters with n simulated fields each, all labeled class 1.
PairDataset build_first_class(const SimConfig& config);

/// Column-wise uniform permutations of {0..m-1}; permutations[j][i] is the
/// parameter index assigned to field (i, j) in class 2.
std::vector<std::vector<std::size_t>> sample_permutations(int m, int n, std::uint64_t seed);

/// Adds the class-2 pairs (y_ij, theta_{pi_j(i)}) to a class-1 dataset.
PairDataset build_second_class(const PairDataset& first, std::uint64_t seed);
PairDataset build_second_class(const PairDataset& first, const std::vector<std::vector<std::size_t>>& permutations);

/// Transform applied to fields before they enter the network: "none" for GP,
/// "log" for Brown-Resnick.
std::string default_input_transform(ProcessKind p);

/// Dataset directory: manifest.json, fields.nlt [m*n, side, side],
/// params.nlt [m, k], permuted_params.nlt [m*n, k], permutation.nlt [m*n]
/// (class-2 parameter index of field i*n + j) and labels.nlt [2*m*n].
/// Class-1 records come first. A class-1-only dataset omits the class-2 files.
void write_dataset(const std::filesystem::path& dir, const PairDataset& data);
PairDataset read_dataset(const std::filesystem::path& dir);

}  // namespace nls
