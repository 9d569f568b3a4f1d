#include "nls/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "nls/errors.hpp"

namespace nls {

namespace {

using json = nlohmann::ordered_json;

void check_labels(const std::vector<double>& probs, const std::vector<int>& labels) {
  if (probs.size() != labels.size()) throw InvalidArgument("probabilities and labels differ in length");
  for (int l : labels) {
    if (l != 1 && l != 2) throw InvalidArgument("labels must be class tags 1 or 2");
  }
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("probabilities must lie in [0, 1]");
  }
}

double clamp_prob(double p, double eps, bool* clamped) {
  const double c = std::clamp(p, eps, 1.0 - eps);
  if (clamped) *clamped = c != p;
  return c;
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double deviance(const std::vector<double>& x, const std::vector<double>& y, double b0, double b1) {
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double eta = b0 + b1 * x[i];
    d += softplus(eta) - y[i] * eta;
  }
  return 2.0 * d;
}

}  // namespace

double logit(double p) { return std::log(p) - std::log1p(-p); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

PlattModel fit_platt(const std::vector<double>& probs, const std::vector<int>& labels, double epsilon) {
  check_labels(probs, labels);
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw InvalidArgument("epsilon must be in (0, 0.5)");
  const std::size_t n = probs.size();
  std::size_t ones = 0;
  for (int l : labels) ones += l == 1 ? 1 : 0;
  if (ones == 0 || ones == n) throw InvalidArgument("calibration data must contain both classes");

  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = logit(clamp_prob(probs[i], epsilon, nullptr));
    y[i] = labels[i] == 1 ? 1.0 : 0.0;
  }
  // Separated classes (in either direction) have no finite maximum.
  double lo1 = INFINITY, hi1 = -INFINITY, lo2 = INFINITY, hi2 = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    auto& lo = y[i] == 1.0 ? lo1 : lo2;
    auto& hi = y[i] == 1.0 ? hi1 : hi2;
    lo = std::min(lo, x[i]);
    hi = std::max(hi, x[i]);
  }
  if (hi2 <= lo1 || hi1 <= lo2) throw NumericError("calibration classes are perfectly separated");
  PlattModel m;
  m.epsilon = epsilon;
  m.converged = false;
  double b0 = 0.0, b1 = 1.0;
  double dev = deviance(x, y, b0, b1);
  const double dn = static_cast<double>(n);
  for (int it = 0; it < 100; ++it) {
    double g0 = 0.0, g1 = 0.0, h00 = 0.0, h01 = 0.0, h11 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mu = sigmoid(b0 + b1 * x[i]);
      const double w = mu * (1.0 - mu);
      const double r = y[i] - mu;
      g0 += r;
      g1 += r * x[i];
      h00 += w;
      h01 += w * x[i];
      h11 += w * x[i] * x[i];
    }
    m.gradient_norm = std::hypot(g0, g1) / dn;
    m.iterations = it;
    if (m.gradient_norm < 1e-8) {
      m.converged = true;
      break;
    }
    const double det = h00 * h11 - h01 * h01;
    if (!(det > 0.0) || !std::isfinite(det)) throw NumericError("IRLS normal equations are singular");
    const double s0 = (h11 * g0 - h01 * g1) / det;
    const double s1 = (h00 * g1 - h01 * g0) / det;
    double t = 1.0;
    double nb0 = b0 + s0, nb1 = b1 + s1;
    double ndev = deviance(x, y, nb0, nb1);
    for (int half = 0; half < 30 && !(ndev <= dev); ++half) {
      t *= 0.5;
      nb0 = b0 + t * s0;
      nb1 = b1 + t * s1;
      ndev = deviance(x, y, nb0, nb1);
    }
    if (!std::isfinite(nb0) || !std::isfinite(nb1) || std::abs(nb0) > 1e6 || std::abs(nb1) > 1e6) {
      throw NumericError("IRLS diverged (classes may be perfectly separated)");
    }
    if (!(ndev <= dev)) {
      // No descent along the Newton direction: at the optimum up to round-off.
      m.converged = m.gradient_norm < 1e-6;
      break;
    }
    b0 = nb0;
    b1 = nb1;
    dev = ndev;
    m.iterations = it + 1;
  }
  if (!std::isfinite(b0) || !std::isfinite(b1)) throw NumericError("IRLS produced non-finite coefficients");
  m.beta0 = b0;
  m.beta1 = b1;
  m.deviance = dev;
  return m;
}

double apply_platt_logit(const PlattModel& model, double p, bool* clamped) {
  if (std::isnan(p)) throw InvalidArgument("probability is NaN");
  return model.beta0 + model.beta1 * logit(clamp_prob(p, model.epsilon, clamped));
}

double apply_platt(const PlattModel& model, double p) { return sigmoid(apply_platt_logit(model, p)); }

std::vector<ReliabilityBin> reliability_curve(const std::vector<double>& probs, const std::vector<int>& labels,
                                              int n_bins) {
  check_labels(probs, labels);
  if (n_bins < 1) throw InvalidArgument("n_bins must be >= 1");
  std::vector<ReliabilityBin> bins(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) {
    bins[static_cast<std::size_t>(b)].lower = static_cast<double>(b) / n_bins;
    bins[static_cast<std::size_t>(b)].upper = static_cast<double>(b + 1) / n_bins;
  }
  std::vector<double> sum_p(bins.size(), 0.0), sum_y(bins.size(), 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    auto b = static_cast<std::size_t>(std::floor(probs[i] * n_bins));
    b = std::min(b, bins.size() - 1);
    sum_p[b] += probs[i];
    sum_y[b] += labels[i] == 1 ? 1.0 : 0.0;
    ++bins[b].count;
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (bins[b].count == 0) continue;
    bins[b].empty = false;
    bins[b].mean_predicted = sum_p[b] / static_cast<double>(bins[b].count);
    bins[b].frequency = sum_y[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

double log_loss(const std::vector<double>& probs, const std::vector<int>& labels, double epsilon) {
  check_labels(probs, labels);
  if (probs.empty()) throw InvalidArgument("log_loss needs at least one sample");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], epsilon, 1.0 - epsilon);
    s -= labels[i] == 1 ? std::log(p) : std::log1p(-p);
  }
  return s / static_cast<double>(probs.size());
}

void classifier_outputs(const CnnModel& model, const PairDataset& data, std::vector<double>& probs,
                        std::vector<int>& labels, int chunk_size) {
  if (data.pairs.empty()) throw InvalidArgument("calibration dataset has no pairs");
  std::vector<SpatialField> fields;
  std::vector<Parameter> thetas;
  fields.reserve(data.pairs.size());
  thetas.reserve(data.pairs.size());
  labels.clear();
  for (const auto& r : data.pairs) {
    fields.push_back(data.fields.at(r.field));
    thetas.push_back(data.params.at(r.param));
    labels.push_back(static_cast<int>(r.label));
  }
  const auto out = forward_batch(model, fields, thetas, chunk_size);
  probs.resize(out.size());
  for (std::size_t k = 0; k < out.size(); ++k) probs[k] = out[k][0];
}

PlattModel calibrate_model(const CnnModel& model, const PairDataset& data, int chunk_size, double epsilon) {
  std::vector<double> probs;
  std::vector<int> labels;
  classifier_outputs(model, data, probs, labels, chunk_size);
  return fit_platt(probs, labels, epsilon);
}

void save_platt(const std::filesystem::path& path, const PlattModel& model) {
  json j;
  j["beta0"] = model.beta0;
  j["beta1"] = model.beta1;
  j["epsilon"] = model.epsilon;
  j["id"] = model.id;
  j["diagnostics"] = {{"iterations", model.iterations},
                      {"deviance", model.deviance},
                      {"gradient_norm", model.gradient_norm},
                      {"converged", model.converged}};
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + path.string());
}

PlattModel load_platt(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigurationError("calibration file missing: " + path.string());
  PlattModel m;
  try {
    const json j = json::parse(is);
    m.beta0 = j.at("beta0").get<double>();
    m.beta1 = j.at("beta1").get<double>();
    m.epsilon = j.at("epsilon").get<double>();
    m.id = j.value("id", std::string{});
    if (j.contains("diagnostics")) {
      const auto& d = j["diagnostics"];
      m.iterations = d.value("iterations", 0);
      m.deviance = d.value("deviance", 0.0);
      m.gradient_norm = d.value("gradient_norm", 0.0);
      m.converged = d.value("converged", true);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("calibration file: ") + e.what());
  }
  if (!std::isfinite(m.beta0) || !std::isfinite(m.beta1) || !(m.epsilon > 0.0 && m.epsilon < 0.5)) {
    throw FormatError("calibration file holds invalid coefficients");
  }
  return m;
}

}  // namespace nls
