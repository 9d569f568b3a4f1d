#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace nls {

/// Regular side x side lattice of observation locations over a rectangle.
/// Location (i, j) has coordinates (lo[0] + i*step(0), lo[1] + j*step(1));
/// linear index is i*side + j.
struct GridSpec {
  int side = 25;
  std::array<double, 2> lo{-10.0, -10.0};
  std::array<double, 2> hi{10.0, 10.0};

  static GridSpec square(int side, double lo, double hi);

  void validate() const;
  std::size_t size() const { return static_cast<std::size_t>(side) * side; }
  double step(int axis) const;
  std::array<double, 2> location(int i, int j) const;
  std::array<double, 2> location(std::size_t linear) const;
  /// size() x 2 matrix of coordinates in row-major location order.
  Eigen::MatrixX2d coordinates() const;

  bool operator==(const GridSpec&) const = default;
};

/// A point in the parameter space. GP fields use (nu, ell); Brown-Resnick
/// fields use (lambda, nu).
struct Parameter {
  std::vector<double> values;
  std::vector<std::string> names;

  Parameter() = default;
  explicit Parameter(std::vector<double> v, std::vector<std::string> n = {})
      : values(std::move(v)), names(std::move(n)) {}

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  bool finite() const;
};

/// One realization on a grid, values in row-major order.
struct SpatialField {
  GridSpec grid;
  std::vector<double> values;

  SpatialField() = default;
  SpatialField(GridSpec g, std::vector<double> v);

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * grid.side + j]; }
  void validate() const;
  Eigen::Map<const Eigen::VectorXd> vector() const {
    return {values.data(), static_cast<Eigen::Index>(values.size())};
  }
};

/// Per-axis interval (lo, hi).
using Bounds = std::vector<std::pair<double, double>>;

/// Regular evaluation lattice. Axis j holds points start[j] + spacing[j]*i
/// for i = 1..counts[j]; points are enumerated row-major (last axis fastest).
class ParameterGrid {
 public:
  ParameterGrid() = default;
  ParameterGrid(std::vector<double> start, std::vector<double> spacing, std::vector<int> counts);

  std::size_t dim() const { return start_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(points_.rows()); }
  const std::vector<double>& start() const { return start_; }
  const std::vector<double>& spacing() const { return spacing_; }
  const std::vector<int>& counts() const { return counts_; }

  /// Row l is the l-th grid point.
  const Eigen::MatrixXd& points() const { return points_; }
  std::vector<double> point(std::size_t l) const;
  double axis_value(std::size_t axis, int index) const { return start_[axis] + spacing_[axis] * (index + 1); }
  double cell_area() const;
  /// Linear index of the grid point nearest to theta (per-axis rounding).
  std::size_t nearest_index(const std::vector<double>& theta) const;

  bool operator==(const ParameterGrid& other) const;

 private:
  std::vector<double> start_;
  std::vector<double> spacing_;
  std::vector<int> counts_;
  Eigen::MatrixXd points_;
};

ParameterGrid make_parameter_grid(const Bounds& bounds, const std::vector<int>& counts);

enum class Label : std::uint8_t { Dependent = 1, Independent = 2 };

enum class ProcessKind { Gaussian, BrownResnick };

std::string to_string(ProcessKind p);
ProcessKind process_from_string(const std::string& s);
std::vector<std::string> parameter_names(ProcessKind p);

struct LabeledPair {
  const SpatialField& field;
  const Parameter& theta;
  Label label;
};

/// Indices into PairDataset::fields / PairDataset::params.
struct PairRecord {
  std::size_t field = 0;
  std::size_t param = 0;
  Label label = Label::Dependent;
};

/// Labeled (field, parameter) pairs. Fields are simulated once and shared by
/// both classes; field (i, j) lives at index i*n + j.
struct PairDataset {
  ProcessKind process = ProcessKind::Gaussian;
  GridSpec grid;
  Bounds bounds;
  int m = 0;
  int n = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> permutation_seed;
  std::vector<Parameter> params;
  std::vector<SpatialField> fields;
  std::vector<PairRecord> pairs;

  LabeledPair pair(std::size_t k) const {
    const auto& r = pairs[k];
    return {fields[r.field], params[r.param], r.label};
  }
  std::size_t count(Label label) const;
};

enum class SurfaceKind { NeuralUncalibrated, NeuralCalibrated, GpExact, Pairwise, PairwiseAdjusted };

std::string to_string(SurfaceKind k);
SurfaceKind surface_kind_from_string(const std::string& s);

struct SurfaceMetadata {
  std::string field_id;
  std::optional<double> delta;
  std::string calibration_id;
  /// Number of probabilities clamped to [eps, 1 - eps] before the logit.
  std::size_t clamped_points = 0;
  /// Points whose evaluation failed and hold the -inf sentinel.
  std::size_t failed_points = 0;
  std::optional<std::vector<double>> pairwise_mle;
};

/// Log-likelihood (or log psi-hat) values aligned with a ParameterGrid.
/// Failed points hold -infinity; every other value is finite.
struct Surface {
  ParameterGrid grid;
  std::vector<double> values;
  SurfaceKind kind = SurfaceKind::GpExact;
  SurfaceMetadata metadata;

  void validate() const;
};

}  // namespace nls
