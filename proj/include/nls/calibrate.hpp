#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "nls/core.hpp"
#include "nls/neural.hpp"

namespace nls {

/// pi(p) = sigmoid(beta0 + beta1 * logit(clamp(p, epsilon, 1 - epsilon))).
struct PlattModel {
  double beta0 = 0.0;
  double beta1 = 1.0;
  double epsilon = 1e-7;
  int iterations = 0;
  double deviance = 0.0;
  double gradient_norm = 0.0;
  bool converged = true;
  std::string id;

  /// Calibration preserves the ordering of probabilities only when beta1 > 0.
  bool monotone() const { return beta1 > 0.0; }
};

double logit(double p);
double sigmoid(double x);

/// Logistic regression of 1{label == 1} on logit(p) by iteratively reweighted
/// least squares with step halving. Labels are class tags 1 or 2.
/// Stops when the norm of the mean log-likelihood gradient drops below 1e-8
/// or after 100 iterations.
PlattModel fit_platt(const std::vector<double>& probs, const std::vector<int>& labels, double epsilon = 1e-7);

double apply_platt(const PlattModel& model, double p);
/// beta0 + beta1 * logit(clamp(p)): the calibrated probability on the logit
/// scale, without a round trip through the sigmoid.
double apply_platt_logit(const PlattModel& model, double p, bool* clamped = nullptr);

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  double mean_predicted = 0.0;
  double frequency = 0.0;  // empirical fraction of class-1 labels
  std::size_t count = 0;
  bool empty = true;
};

/// Equal-width bins over [0, 1]; p = 1 falls in the last bin.
std::vector<ReliabilityBin> reliability_curve(const std::vector<double>& probs, const std::vector<int>& labels,
                                              int n_bins);

/// Mean negative log-likelihood of the class-1 indicator under probs.
double log_loss(const std::vector<double>& probs, const std::vector<int>& labels, double epsilon = 1e-7);

/// h(y, theta) and class tags for every pair of a two-class dataset.
void classifier_outputs(const CnnModel& model, const PairDataset& data, std::vector<double>& probs,
                        std::vector<int>& labels, int chunk_size = 256);
/// Fits Platt scaling to the model's outputs on a held-out two-class dataset.
PlattModel calibrate_model(const CnnModel& model, const PairDataset& data, int chunk_size = 256,
                           double epsilon = 1e-7);

void save_platt(const std::filesystem::path& path, const PlattModel& model);
PlattModel load_platt(const std::filesystem::path& path);

}  // namespace nls
