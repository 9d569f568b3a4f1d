#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nls/calibrate.hpp"
#include "nls/core.hpp"
#include "nls/neural.hpp"

namespace nls {

inline constexpr double kProbabilityEpsilon = 1e-7;

/// log(h / (1 - h)) after clamping h to [eps, 1 - eps]; *clamped reports
/// whether the clamp changed h.
double log_psi(double h, bool* clamped = nullptr, double eps = kProbabilityEpsilon);

/// log psi-hat over the grid from one trunk pass and a batched head pass.
/// With platt == nullptr the surface is uncalibrated.
Surface neural_surface(const CnnModel& model, const PlattModel* platt, const SpatialField& y, const ParameterGrid& grid);

/// Same values, one full forward pass per grid point (the unvectorized path).
Surface neural_surface_unvectorized(const CnnModel& model, const PlattModel* platt, const SpatialField& y,
                                    const ParameterGrid& grid);

/// Pointwise sum of log surfaces of independent realizations.
Surface multi_surface(std::span<const Surface> surfaces);

struct GridEstimate {
  std::size_t index = 0;
  Parameter theta;
  double value = 0.0;
};

/// Argmax over finite values; ties go to the lowest linear index.
GridEstimate grid_mle(const Surface& surface);

/// 1 - alpha quantile of chi-squared with k degrees of freedom.
double chi2_quantile(double alpha, int k);

struct ConfidenceRegion {
  ParameterGrid grid;
  std::vector<char> membership;
  double alpha = 0.05;
  double cutoff = 0.0;
  SurfaceKind source = SurfaceKind::GpExact;
  std::string source_id;
  std::size_t argmax = 0;

  std::size_t member_count() const;
  /// Membership of the grid point nearest to theta.
  bool contains(const std::vector<double>& theta) const;
};

/// {theta : 2 (max - value(theta)) <= chi2_quantile(alpha, k)}.
ConfidenceRegion confidence_region(const Surface& surface, double alpha);

/// Member count times the grid cell area.
double region_area(const ConfidenceRegion& region);

/// Directory with values.nlt (shape = grid counts) and manifest.json.
void save_surface(const std::filesystem::path& dir, const Surface& surface);
Surface load_surface(const std::filesystem::path& dir);

/// Directory with mask.nlt (0/1 values, shape = grid counts) and manifest.json.
void save_region(const std::filesystem::path& dir, const ConfidenceRegion& region);
ConfidenceRegion load_region(const std::filesystem::path& dir);

}  // namespace nls
