#include "nls/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <boost/math/special_functions/gamma.hpp>

#include "nls/config.hpp"
#include "nls/errors.hpp"
#include "nls/parallel.hpp"
#include "nls/tensor_io.hpp"

namespace nls {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Surface neural_from_probabilities(const std::vector<double>& probs, const PlattModel* platt, const ParameterGrid& grid) {
  Surface out;
  out.grid = grid;
  out.kind = platt ? SurfaceKind::NeuralCalibrated : SurfaceKind::NeuralUncalibrated;
  if (platt) out.metadata.calibration_id = platt->id;
  out.values.resize(probs.size());
  for (std::size_t l = 0; l < probs.size(); ++l) {
    bool clamped = false;
    out.values[l] = platt ? apply_platt_logit(*platt, probs[l], &clamped) : log_psi(probs[l], &clamped);
    out.metadata.clamped_points += clamped ? 1 : 0;
  }
  return out;
}

std::vector<std::int64_t> grid_shape(const ParameterGrid& g) {
  std::vector<std::int64_t> s;
  for (int c : g.counts()) s.push_back(c);
  return s;
}

Json grid_json(const ParameterGrid& g) {
  return Json{{"start", g.start()}, {"spacing", g.spacing()}, {"counts", g.counts()}};
}

ParameterGrid grid_from(const Json& j) {
  return ParameterGrid(j.at("start").get<std::vector<double>>(), j.at("spacing").get<std::vector<double>>(),
                       j.at("counts").get<std::vector<int>>());
}

Json read_manifest(const std::filesystem::path& dir, const char* format) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigurationError(std::string(format) + " manifest missing in " + dir.string());
  try {
    Json j = Json::parse(is);
    if (j.at("format").get<std::string>() != format) throw FormatError(std::string("not a ") + format + " manifest");
    return j;
  } catch (const Json::exception& e) {
    throw FormatError(std::string(format) + " manifest: " + e.what());
  }
}

void write_manifest(const std::filesystem::path& dir, const Json& j) {
  std::ofstream os(dir / "manifest.json");
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
}

}  // namespace

double log_psi(double h, bool* clamped, double eps) {
  if (std::isnan(h)) throw InvalidArgument("probability is NaN");
  const double c = std::clamp(h, eps, 1.0 - eps);
  if (clamped) *clamped = c != h;
  return std::log(c) - std::log1p(-c);
}

Surface neural_surface(const CnnModel& model, const PlattModel* platt, const SpatialField& y, const ParameterGrid& grid) {
  if (grid.size() == 0) throw InvalidArgument("parameter grid is empty");
  return neural_from_probabilities(class_one_probabilities(model, y, grid.points()), platt, grid);
}

Surface neural_surface_unvectorized(const CnnModel& model, const PlattModel* platt, const SpatialField& y,
                                    const ParameterGrid& grid) {
  if (grid.size() == 0) throw InvalidArgument("parameter grid is empty");
  std::vector<double> probs(grid.size());
  for (std::size_t l = 0; l < grid.size(); ++l) probs[l] = forward(model, y, Parameter(grid.point(l)))[0];
  return neural_from_probabilities(probs, platt, grid);
}

Surface multi_surface(std::span<const Surface> surfaces) {
  if (surfaces.empty()) throw InvalidArgument("multi_surface needs at least one surface");
  Surface out = surfaces.front();
  for (std::size_t s = 1; s < surfaces.size(); ++s) {
    if (!(surfaces[s].grid == out.grid)) throw InvalidArgument("surfaces are on different grids");
    if (surfaces[s].kind != out.kind) throw InvalidArgument("surfaces are of different kinds");
    if (surfaces[s].values.size() != out.values.size()) throw InvalidArgument("surface lengths differ");
    for (std::size_t l = 0; l < out.values.size(); ++l) out.values[l] += surfaces[s].values[l];
    out.metadata.clamped_points += surfaces[s].metadata.clamped_points;
    out.metadata.field_id += (out.metadata.field_id.empty() ? "" : "+") + surfaces[s].metadata.field_id;
  }
  out.metadata.failed_points = static_cast<std::size_t>(std::count(out.values.begin(), out.values.end(), kNegInf));
  if (surfaces.size() > 1) out.metadata.pairwise_mle.reset();
  return out;
}

GridEstimate grid_mle(const Surface& surface) {
  if (surface.values.size() != surface.grid.size()) throw InvalidArgument("surface does not match its grid");
  std::size_t best = surface.values.size();
  for (std::size_t l = 0; l < surface.values.size(); ++l) {
    const double v = surface.values[l];
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) throw InvalidArgument("surface holds NaN or +inf");
    if (v == kNegInf) continue;
    if (best == surface.values.size() || v > surface.values[best]) best = l;
  }
  if (best == surface.values.size()) throw NoValidPoint("every surface value is -inf");
  return {best, Parameter(surface.grid.point(best)), surface.values[best]};
}

double chi2_quantile(double alpha, int k) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("alpha must lie in (0, 1)");
  if (k < 1) throw InvalidArgument("degrees of freedom must be >= 1");
  if (k == 2) return -2.0 * std::log(alpha);
  const double target = 1.0 - alpha;
  const double a = 0.5 * k;
  auto cdf = [&](double x) { return boost::math::gamma_p(a, 0.5 * x); };
  double lo = 0.0;
  double hi = std::max(1.0, static_cast<double>(k));
  while (cdf(hi) < target) hi *= 2.0;
  for (int it = 0; it < 400 && hi - lo > 1e-10 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::size_t ConfidenceRegion::member_count() const {
  return static_cast<std::size_t>(std::count(membership.begin(), membership.end(), char{1}));
}

bool ConfidenceRegion::contains(const std::vector<double>& theta) const {
  return membership[grid.nearest_index(theta)] != 0;
}

ConfidenceRegion confidence_region(const Surface& surface, double alpha) {
  const GridEstimate best = grid_mle(surface);
  ConfidenceRegion r;
  r.grid = surface.grid;
  r.alpha = alpha;
  r.cutoff = chi2_quantile(alpha, static_cast<int>(surface.grid.dim()));
  r.source = surface.kind;
  r.source_id = surface.metadata.field_id;
  r.argmax = best.index;
  r.membership.assign(surface.values.size(), 0);
  for (std::size_t l = 0; l < surface.values.size(); ++l) {
    const double v = surface.values[l];
    r.membership[l] = (v != kNegInf && 2.0 * (best.value - v) <= r.cutoff) ? 1 : 0;
  }
  return r;
}

double region_area(const ConfidenceRegion& region) {
  return static_cast<double>(region.member_count()) * region.grid.cell_area();
}

void save_surface(const std::filesystem::path& dir, const Surface& surface) {
  surface.validate();
  std::filesystem::create_directories(dir);
  const auto shape = grid_shape(surface.grid);
  write_tensor(dir / "values.nlt", shape, std::span<const double>(surface.values));
  Json j;
  j["format"] = "nls-surface";
  j["version"] = 1;
  j["kind"] = to_string(surface.kind);
  j["grid"] = grid_json(surface.grid);
  const auto& m = surface.metadata;
  j["field_id"] = m.field_id;
  if (m.delta) j["delta"] = *m.delta;
  j["calibration_id"] = m.calibration_id;
  j["clamped_points"] = m.clamped_points;
  j["failed_points"] = m.failed_points;
  if (m.pairwise_mle) j["pairwise_mle"] = *m.pairwise_mle;
  write_manifest(dir, j);
}

Surface load_surface(const std::filesystem::path& dir) {
  const Json j = read_manifest(dir, "nls-surface");
  Surface s;
  try {
    s.kind = surface_kind_from_string(j.at("kind").get<std::string>());
    s.grid = grid_from(j.at("grid"));
    s.metadata.field_id = j.value("field_id", std::string{});
    if (j.contains("delta")) s.metadata.delta = j["delta"].get<double>();
    s.metadata.calibration_id = j.value("calibration_id", std::string{});
    s.metadata.clamped_points = j.value("clamped_points", std::size_t{0});
    s.metadata.failed_points = j.value("failed_points", std::size_t{0});
    if (j.contains("pairwise_mle")) s.metadata.pairwise_mle = j["pairwise_mle"].get<std::vector<double>>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("surface manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("surface manifest: ") + e.what());
  }
  const Tensor t = read_tensor(dir / "values.nlt");
  if (t.shape != grid_shape(s.grid)) throw FormatError("surface values do not match the manifest grid");
  s.values.assign(t.data.begin(), t.data.end());
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("surface values: ") + e.what());
  }
  return s;
}

void save_region(const std::filesystem::path& dir, const ConfidenceRegion& region) {
  std::filesystem::create_directories(dir);
  std::vector<float> mask(region.membership.begin(), region.membership.end());
  write_tensor(dir / "mask.nlt", grid_shape(region.grid), std::span<const float>(mask));
  Json j;
  j["format"] = "nls-region";
  j["version"] = 1;
  j["alpha"] = region.alpha;
  j["cutoff"] = region.cutoff;
  j["source_kind"] = to_string(region.source);
  j["source_id"] = region.source_id;
  j["argmax"] = region.argmax;
  j["member_count"] = region.member_count();
  j["area"] = region_area(region);
  j["grid"] = grid_json(region.grid);
  write_manifest(dir, j);
}

ConfidenceRegion load_region(const std::filesystem::path& dir) {
  const Json j = read_manifest(dir, "nls-region");
  ConfidenceRegion r;
  try {
    r.alpha = j.at("alpha").get<double>();
    r.cutoff = j.at("cutoff").get<double>();
    r.source = surface_kind_from_string(j.at("source_kind").get<std::string>());
    r.source_id = j.value("source_id", std::string{});
    r.argmax = j.at("argmax").get<std::size_t>();
    r.grid = grid_from(j.at("grid"));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("region manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("region manifest: ") + e.what());
  }
  const Tensor t = read_tensor(dir / "mask.nlt");
  if (t.shape != grid_shape(r.grid)) throw FormatError("region mask does not match the manifest grid");
  r.membership.reserve(t.data.size());
  for (float v : t.data) {
    if (v != 0.0f && v != 1.0f) throw FormatError("region mask must hold 0 or 1");
    r.membership.push_back(v == 1.0f ? 1 : 0);
  }
  if (r.argmax >= r.membership.size() || !r.membership[r.argmax]) throw FormatError("region argmax is not a member");
  return r;
}

}  // namespace nls
