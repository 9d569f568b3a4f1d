#include "nls/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nls/errors.hpp"

namespace nls {

GridSpec GridSpec::square(int side, double lo, double hi) {
  GridSpec g;
  g.side = side;
  g.lo = {lo, lo};
  g.hi = {hi, hi};
  g.validate();
  return g;
}

void GridSpec::validate() const {
  if (side < 1) throw InvalidArgument("grid side must be >= 1, got " + std::to_string(side));
  for (int a = 0; a < 2; ++a) {
    if (!(hi[a] > lo[a]) || !std::isfinite(lo[a]) || !std::isfinite(hi[a])) {
      throw InvalidArgument("grid domain must satisfy domain_max > domain_min on every axis");
    }
  }
}

double GridSpec::step(int axis) const {
  if (side == 1) return 0.0;
  return (hi[axis] - lo[axis]) / (side - 1);
}

std::array<double, 2> GridSpec::location(int i, int j) const {
  return {lo[0] + i * step(0), lo[1] + j * step(1)};
}

std::array<double, 2> GridSpec::location(std::size_t linear) const {
  return location(static_cast<int>(linear / side), static_cast<int>(linear % side));
}

Eigen::MatrixX2d GridSpec::coordinates() const {
  Eigen::MatrixX2d xy(static_cast<Eigen::Index>(size()), 2);
  for (std::size_t l = 0; l < size(); ++l) {
    auto p = location(l);
    xy(static_cast<Eigen::Index>(l), 0) = p[0];
    xy(static_cast<Eigen::Index>(l), 1) = p[1];
  }
  return xy;
}

bool Parameter::finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

SpatialField::SpatialField(GridSpec g, std::vector<double> v) : grid(g), values(std::move(v)) { validate(); }

void SpatialField::validate() const {
  grid.validate();
  if (values.size() != grid.size()) {
    throw InvalidArgument("field has " + std::to_string(values.size()) + " values, grid needs " +
                          std::to_string(grid.size()));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidArgument("field contains a non-finite value");
  }
}

ParameterGrid::ParameterGrid(std::vector<double> start, std::vector<double> spacing, std::vector<int> counts)
    : start_(std::move(start)), spacing_(std::move(spacing)), counts_(std::move(counts)) {
  if (start_.empty() || start_.size() != spacing_.size() || start_.size() != counts_.size()) {
    throw InvalidArgument("parameter grid axes are inconsistent");
  }
  std::size_t total = 1;
  for (std::size_t a = 0; a < dim(); ++a) {
    if (!(spacing_[a] > 0.0)) throw InvalidArgument("parameter grid spacing must be positive");
    if (counts_[a] < 1) throw InvalidArgument("parameter grid count must be >= 1");
    total *= static_cast<std::size_t>(counts_[a]);
  }
  points_.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(dim()));
  std::vector<int> idx(dim(), 0);
  for (std::size_t l = 0; l < total; ++l) {
    for (std::size_t a = 0; a < dim(); ++a) {
      points_(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(a)) = axis_value(a, idx[a]);
    }
    for (std::size_t a = dim(); a-- > 0;) {
      if (++idx[a] < counts_[a]) break;
      idx[a] = 0;
    }
  }
}

std::vector<double> ParameterGrid::point(std::size_t l) const {
  std::vector<double> p(dim());
  for (std::size_t a = 0; a < dim(); ++a) p[a] = points_(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(a));
  return p;
}

double ParameterGrid::cell_area() const {
  double area = 1.0;
  for (double s : spacing_) area *= s;
  return area;
}

std::size_t ParameterGrid::nearest_index(const std::vector<double>& theta) const {
  if (theta.size() != dim()) throw InvalidArgument("parameter dimension does not match grid");
  std::size_t linear = 0;
  for (std::size_t a = 0; a < dim(); ++a) {
    long i = std::lround((theta[a] - start_[a]) / spacing_[a]) - 1;
    i = std::clamp<long>(i, 0, counts_[a] - 1);
    linear = linear * static_cast<std::size_t>(counts_[a]) + static_cast<std::size_t>(i);
  }
  return linear;
}

bool ParameterGrid::operator==(const ParameterGrid& other) const {
  return start_ == other.start_ && spacing_ == other.spacing_ && counts_ == other.counts_;
}

ParameterGrid make_parameter_grid(const Bounds& bounds, const std::vector<int>& counts) {
  if (bounds.empty() || bounds.size() != counts.size()) {
    throw InvalidArgument("bounds and counts must have the same non-zero length");
  }
  std::vector<double> start, spacing;
  for (std::size_t a = 0; a < bounds.size(); ++a) {
    auto [lo, hi] = bounds[a];
    if (!(hi > lo)) throw InvalidArgument("parameter bounds must satisfy hi > lo");
    if (counts[a] < 1) throw InvalidArgument("parameter grid counts must be >= 1");
    start.push_back(lo);
    spacing.push_back((hi - lo) / counts[a]);
  }
  return ParameterGrid(std::move(start), std::move(spacing), counts);
}

std::string to_string(ProcessKind p) { return p == ProcessKind::Gaussian ? "gp" : "br"; }

ProcessKind process_from_string(const std::string& s) {
  if (s == "gp") return ProcessKind::Gaussian;
  if (s == "br" || s == "brown-resnick") return ProcessKind::BrownResnick;
  throw ConfigurationError("unknown process '" + s + "' (expected gp or br)");
}

std::vector<std::string> parameter_names(ProcessKind p) {
  if (p == ProcessKind::Gaussian) return {"nu", "ell"};
  return {"lambda", "nu"};
}

std::size_t PairDataset::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [label](const PairRecord& r) { return r.label == label; }));
}

std::string to_string(SurfaceKind k) {
  switch (k) {
    case SurfaceKind::NeuralUncalibrated: return "neural-uncalibrated";
    case SurfaceKind::NeuralCalibrated: return "neural-calibrated";
    case SurfaceKind::GpExact: return "gp-exact";
    case SurfaceKind::Pairwise: return "pairwise";
    case SurfaceKind::PairwiseAdjusted: return "pairwise-adjusted";
  }
  return "unknown";
}

SurfaceKind surface_kind_from_string(const std::string& s) {
  for (auto k : {SurfaceKind::NeuralUncalibrated, SurfaceKind::NeuralCalibrated, SurfaceKind::GpExact,
                 SurfaceKind::Pairwise, SurfaceKind::PairwiseAdjusted}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown surface kind '" + s + "'");
}

void Surface::validate() const {
  if (values.size() != grid.size()) throw InvalidArgument("surface length does not match its grid");
  for (double v : values) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw InvalidArgument("surface holds a NaN or +inf value");
    }
  }
}

}  // namespace nls
