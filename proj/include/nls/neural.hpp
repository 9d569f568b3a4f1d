#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nls/core.hpp"

namespace nls {

/// conv(3x3, ReLU) -> maxpool(2x2) -> conv -> maxpool -> conv -> flatten ->
/// concat(theta) -> dense(ReLU)... -> dense(2, softmax).
/// Convolutions have stride 1; padding is per conv layer (0 = valid).
/// Pooling uses floor semantics.
struct Architecture {
  int input_side = 25;
  int param_dim = 2;
  std::array<int, 3> filters{128, 128, 16};
  std::array<int, 3> padding{0, 0, 0};
  std::vector<int> dense{64, 16, 8};

  /// Default stack for a given field side. Padding is only added where the
  /// valid-convolution chain would otherwise vanish (e.g. 16x16 inputs).
  static Architecture for_side(int side, std::array<int, 3> filters = {128, 128, 16});

  void validate() const;
  /// Spatial side after each stage: conv1, pool1, conv2, pool2, conv3.
  std::array<int, 5> stage_sides() const;
  int flatten_size() const;
  /// Number of layers with parameters (3 conv + dense + output).
  std::size_t layer_count() const { return 3 + dense.size() + 1; }
  bool operator==(const Architecture&) const = default;
};

/// Classifier h(y, theta). Scalar is float in production and double for the
/// gradient check.
///
/// Batches are column-major: fields is (side*side) x B with each column a
/// row-major field, thetas is param_dim x B. Outputs are 2 x B softmax
/// probabilities; row 0 is P(class 1 | y, theta).
///
/// Activations are kept channels-last: a conv feature map is a C x (B*H*W)
/// matrix, so every sample's flattened map is one contiguous block.
/// Conv weights are stored as [out, ky, kx, in], dense weights as [out, in].
template <typename T>
class Network {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  Network() = default;
  explicit Network(Architecture arch);

  const Architecture& architecture() const { return arch_; }

  /// He-uniform weights, zero biases.
  void initialize(std::uint64_t seed);

  std::vector<Mat>& weights() { return w_; }
  std::vector<Vec>& biases() { return b_; }
  const std::vector<Mat>& weights() const { return w_; }
  const std::vector<Vec>& biases() const { return b_; }
  /// Persisted tensor shape of layer l's weight.
  std::vector<std::int64_t> weight_shape(std::size_t l) const;

  std::size_t parameter_count() const;
  Vec parameters() const;
  void set_parameters(const Vec& p);

  Mat forward(const Mat& fields, const Mat& thetas) const;
  /// Convolutional part only: flatten_size() x B.
  Mat trunk(const Mat& fields) const;
  /// Dense part for pre-computed trunk features: flat is flatten_size() x B.
  Mat head(const Mat& flat, const Mat& thetas) const;

  /// Sum of cross-entropy over the batch. When grad is non-null the gradient
  /// of (sum * scale) is added to it (layout of parameters()).
  /// labels[b] is 0 for class 1 and 1 for class 2.
  T loss(const Mat& fields, const Mat& thetas, const std::vector<int>& labels, Vec* grad, T scale) const;

 private:
  Architecture arch_;
  std::vector<Mat> w_;
  std::vector<Vec> b_;
};

extern template class Network<float>;
extern template class Network<double>;

struct TrainConfig {
  int batch_size = 512;
  int epochs = 20;
  double lr_initial = 1e-3;
  int lr_hold_epochs = 5;
  double lr_decay_factor = 0.9048374180359595;  // exp(-0.1)
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  /// Fraction of pairs held out for the validation loss when no separate
  /// validation set is passed.
  double validation_fraction = 0.1;
  /// Samples per forward/backward chunk; bounds memory, not the gradient.
  int chunk_size = 256;
  /// Restart from a fresh initialization when the training loss has not
  /// dropped below log(2) - plateau_margin after plateau_epochs epochs.
  int plateau_epochs = 3;
  double plateau_margin = 0.01;
  int max_restarts = 4;

  void validate() const;
  /// Learning rate of 0-based epoch e.
  double learning_rate(int epoch) const;
  static TrainConfig gp_defaults();
  static TrainConfig br_defaults();
};

struct CnnModel {
  Network<float> net;
  ProcessKind process = ProcessKind::Gaussian;
  std::string input_transform = "none";
  TrainConfig train;
  std::uint64_t init_seed = 0;
  int attempts = 0;
};

struct EpochRecord {
  int attempt = 0;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  int attempts = 0;
  bool plateaued = false;  // the final attempt still sat on the plateau
};

/// Field values as the network sees them ("none" or "log").
std::vector<float> transform_input(const SpatialField& y, const std::string& transform);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minimizes cross-entropy on the two-class task with Adam. The architecture
/// is taken from `arch` (its input_side must match the dataset grid).
CnnModel train(const PairDataset& data, const Architecture& arch, const TrainConfig& config, TrainingLog* log = nullptr,
               const PairDataset* validation = nullptr, const EpochCallback& on_epoch = {});

/// (h, 1 - h) for one pair.
std::array<double, 2> forward(const CnnModel& model, const SpatialField& y, const Parameter& theta);
/// Batched forward; items are processed in chunks of chunk_size.
std::vector<std::array<double, 2>> forward_batch(const CnnModel& model, const std::vector<SpatialField>& fields,
                                                 const std::vector<Parameter>& thetas, int chunk_size = 256);
/// h(y, theta_l) for every row of thetas (L x k): one trunk pass for y, then
/// the dense head over all parameters at once.
std::vector<double> class_one_probabilities(const CnnModel& model, const SpatialField& y, const Eigen::MatrixXd& thetas);

/// Mean cross-entropy of the model on a dataset.
double evaluate_loss(const CnnModel& model, const PairDataset& data, int chunk_size = 256);

void save_model(const std::filesystem::path& dir, const CnnModel& model);
CnnModel load_model(const std::filesystem::path& dir);

}  // namespace nls
