#include "nls/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "nls/config.hpp"
#include "nls/errors.hpp"
#include "nls/parallel.hpp"
#include "nls/rng.hpp"
#include "nls/tensor_io.hpp"

namespace nls {

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::for_side(int side, std::array<int, 3> filters) {
  static const std::array<std::array<int, 3>, 8> candidates{{
      {0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}, {0, 1, 1}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}}};
  Architecture a;
  a.input_side = side;
  a.filters = filters;
  for (const auto& p : candidates) {
    a.padding = p;
    const auto s = a.stage_sides();
    if (std::all_of(s.begin(), s.end(), [](int v) { return v >= 1; })) return a;
  }
  throw InvalidArgument("input side " + std::to_string(side) + " is too small for the convolutional stack");
}

std::array<int, 5> Architecture::stage_sides() const {
  std::array<int, 5> s{};
  s[0] = input_side + 2 * padding[0] - 2;
  s[1] = s[0] / 2;
  s[2] = s[1] + 2 * padding[1] - 2;
  s[3] = s[2] / 2;
  s[4] = s[3] + 2 * padding[2] - 2;
  return s;
}

void Architecture::validate() const {
  if (input_side < 1) throw InvalidArgument("input side must be positive");
  if (param_dim < 1) throw InvalidArgument("parameter dimension must be positive");
  for (int f : filters) {
    if (f < 1) throw InvalidArgument("filter counts must be positive");
  }
  for (int p : padding) {
    if (p < 0 || p > 1) throw InvalidArgument("padding must be 0 or 1");
  }
  for (int d : dense) {
    if (d < 1) throw InvalidArgument("dense widths must be positive");
  }
  const auto s = stage_sides();
  if (std::any_of(s.begin(), s.end(), [](int v) { return v < 1; })) {
    throw InvalidArgument("input side " + std::to_string(input_side) + " collapses in the convolutional stack");
  }
}

int Architecture::flatten_size() const {
  const int s = stage_sides()[4];
  return filters[2] * s * s;
}

// ---------------------------------------------------------------------------
// Kernels. Feature maps are C x (B*H*W), column-major, channels contiguous.

namespace {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
void im2col(const T* in, int c, int b, int h, int w, int pad, MatT<T>& cols) {
  const int ho = h + 2 * pad - 2;
  const int wo = w + 2 * pad - 2;
  const Eigen::Index rows = 9 * c;
  if (pad > 0) {
    cols.setZero(rows, static_cast<Eigen::Index>(b) * ho * wo);
  } else {
    cols.resize(rows, static_cast<Eigen::Index>(b) * ho * wo);
  }
  for (int n = 0; n < b; ++n) {
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        T* dst = cols.data() + ((static_cast<Eigen::Index>(n) * ho + y) * wo + x) * rows;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = x + kx - pad;
            if (ix < 0 || ix >= w) continue;
            const T* src = in + ((static_cast<Eigen::Index>(n) * h + iy) * w + ix) * c;
            std::copy(src, src + c, dst + (ky * 3 + kx) * c);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const MatT<T>& cols, int c, int b, int h, int w, int pad, MatT<T>& out) {
  const int ho = h + 2 * pad - 2;
  const int wo = w + 2 * pad - 2;
  const Eigen::Index rows = 9 * c;
  out.setZero(c, static_cast<Eigen::Index>(b) * h * w);
  for (int n = 0; n < b; ++n) {
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        const T* src = cols.data() + ((static_cast<Eigen::Index>(n) * ho + y) * wo + x) * rows;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = x + kx - pad;
            if (ix < 0 || ix >= w) continue;
            T* dst = out.data() + ((static_cast<Eigen::Index>(n) * h + iy) * w + ix) * c;
            const T* s = src + (ky * 3 + kx) * c;
            for (int k = 0; k < c; ++k) dst[k] += s[k];
          }
        }
      }
    }
  }
}

template <typename T>
void maxpool(const MatT<T>& in, int c, int b, int h, int w, MatT<T>& out, std::vector<Eigen::Index>& arg) {
  const int hp = h / 2;
  const int wp = w / 2;
  out.resize(c, static_cast<Eigen::Index>(b) * hp * wp);
  arg.resize(static_cast<std::size_t>(out.size()));
  for (int n = 0; n < b; ++n) {
    for (int y = 0; y < hp; ++y) {
      for (int x = 0; x < wp; ++x) {
        const Eigen::Index o = ((static_cast<Eigen::Index>(n) * hp + y) * wp + x) * c;
        const Eigen::Index i00 = ((static_cast<Eigen::Index>(n) * h + 2 * y) * w + 2 * x) * c;
        const Eigen::Index cand[4] = {i00, i00 + c, i00 + static_cast<Eigen::Index>(w) * c,
                                      i00 + static_cast<Eigen::Index>(w) * c + c};
        for (int k = 0; k < c; ++k) {
          Eigen::Index best = cand[0] + k;
          T v = in.data()[best];
          for (int q = 1; q < 4; ++q) {
            const T u = in.data()[cand[q] + k];
            if (u > v) {
              v = u;
              best = cand[q] + k;
            }
          }
          out.data()[o + k] = v;
          arg[static_cast<std::size_t>(o + k)] = best;
        }
      }
    }
  }
}

template <typename T>
void maxpool_backward(const MatT<T>& dout, const std::vector<Eigen::Index>& arg, Eigen::Index rows, Eigen::Index cols,
                      MatT<T>& din) {
  din.setZero(rows, cols);
  for (Eigen::Index k = 0; k < dout.size(); ++k) din.data()[arg[static_cast<std::size_t>(k)]] += dout.data()[k];
}

template <typename T>
struct Cache {
  MatT<T> cols[3];
  MatT<T> act[3];
  MatT<T> pooled[2];
  std::vector<Eigen::Index> arg[2];
  std::vector<MatT<T>> x;  // input of each dense layer; x[0] = [flatten; theta]
  MatT<T> logits;
};

template <typename T>
void relu(MatT<T>& m) {
  m = m.cwiseMax(T(0));
}

template <typename T>
void trunk_forward(const Architecture& a, const std::vector<MatT<T>>& w,
                   const std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>>& bias, const MatT<T>& fields, Cache<T>& c) {
  const int b = static_cast<int>(fields.cols());
  const auto s = a.stage_sides();
  const int side = a.input_side;
  im2col<T>(fields.data(), 1, b, side, side, a.padding[0], c.cols[0]);
  c.act[0].noalias() = w[0] * c.cols[0];
  c.act[0].colwise() += bias[0];
  relu<T>(c.act[0]);
  maxpool<T>(c.act[0], a.filters[0], b, s[0], s[0], c.pooled[0], c.arg[0]);

  im2col<T>(c.pooled[0].data(), a.filters[0], b, s[1], s[1], a.padding[1], c.cols[1]);
  c.act[1].noalias() = w[1] * c.cols[1];
  c.act[1].colwise() += bias[1];
  relu<T>(c.act[1]);
  maxpool<T>(c.act[1], a.filters[1], b, s[2], s[2], c.pooled[1], c.arg[1]);

  im2col<T>(c.pooled[1].data(), a.filters[1], b, s[3], s[3], a.padding[2], c.cols[2]);
  c.act[2].noalias() = w[2] * c.cols[2];
  c.act[2].colwise() += bias[2];
  relu<T>(c.act[2]);
}

template <typename T>
void head_forward(const Architecture& a, const std::vector<MatT<T>>& w,
                  const std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>>& bias, const T* flat, const MatT<T>& thetas,
                  Cache<T>& c) {
  const Eigen::Index b = thetas.cols();
  const int f = a.flatten_size();
  const std::size_t nd = a.dense.size() + 1;
  c.x.resize(nd);
  c.x[0].resize(f + a.param_dim, b);
  c.x[0].topRows(f) = Eigen::Map<const MatT<T>>(flat, f, b);
  c.x[0].bottomRows(a.param_dim) = thetas;
  for (std::size_t l = 0; l < nd; ++l) {
    MatT<T> z = w[3 + l] * c.x[l];
    z.colwise() += bias[3 + l];
    if (l + 1 < nd) {
      relu<T>(z);
      c.x[l + 1] = std::move(z);
    } else {
      c.logits = std::move(z);
    }
  }
}

template <typename T>
MatT<T> softmax(const MatT<T>& logits) {
  MatT<T> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T mx = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - mx).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

void check_batch(const Architecture& a, Eigen::Index field_rows, Eigen::Index field_cols, Eigen::Index theta_rows,
                 Eigen::Index theta_cols) {
  if (field_rows != static_cast<Eigen::Index>(a.input_side) * a.input_side) {
    throw InvalidArgument("field size does not match the network input side");
  }
  if (theta_rows != a.param_dim) throw InvalidArgument("parameter length does not match the network");
  if (field_cols != theta_cols) throw InvalidArgument("field and parameter batch sizes differ");
}

}  // namespace

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(Architecture arch) : arch_(std::move(arch)) {
  arch_.validate();
  const std::size_t nl = arch_.layer_count();
  w_.resize(nl);
  b_.resize(nl);
  int in = 1;
  for (int l = 0; l < 3; ++l) {
    w_[l] = Mat::Zero(arch_.filters[l], 9 * in);
    b_[l] = Vec::Zero(arch_.filters[l]);
    in = arch_.filters[l];
  }
  in = arch_.flatten_size() + arch_.param_dim;
  for (std::size_t l = 0; l <= arch_.dense.size(); ++l) {
    const int out = l < arch_.dense.size() ? arch_.dense[l] : 2;
    w_[3 + l] = Mat::Zero(out, in);
    b_[3 + l] = Vec::Zero(out);
    in = out;
  }
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l < w_.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w_[l].cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    // Fill in row-major (persisted) order so the draw order is layout-free.
    for (Eigen::Index r = 0; r < w_[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < w_[l].cols(); ++c) w_[l](r, c) = static_cast<T>(u(rng));
    }
    b_[l].setZero();
  }
}

template <typename T>
std::vector<std::int64_t> Network<T>::weight_shape(std::size_t l) const {
  if (l < 3) {
    const int in = l == 0 ? 1 : arch_.filters[l - 1];
    return {arch_.filters[l], 3, 3, in};
  }
  return {w_[l].rows(), w_[l].cols()};
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) n += static_cast<std::size_t>(w_[l].size() + b_[l].size());
  return n;
}

template <typename T>
typename Network<T>::Vec Network<T>::parameters() const {
  Vec p(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index o = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    p.segment(o, w_[l].size()) = Eigen::Map<const Vec>(w_[l].data(), w_[l].size());
    o += w_[l].size();
    p.segment(o, b_[l].size()) = b_[l];
    o += b_[l].size();
  }
  return p;
}

template <typename T>
void Network<T>::set_parameters(const Vec& p) {
  if (p.size() != static_cast<Eigen::Index>(parameter_count())) throw InvalidArgument("parameter vector length mismatch");
  Eigen::Index o = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    Eigen::Map<Vec>(w_[l].data(), w_[l].size()) = p.segment(o, w_[l].size());
    o += w_[l].size();
    b_[l] = p.segment(o, b_[l].size());
    o += b_[l].size();
  }
}

template <typename T>
typename Network<T>::Mat Network<T>::trunk(const Mat& fields) const {
  if (fields.rows() != static_cast<Eigen::Index>(arch_.input_side) * arch_.input_side) {
    throw InvalidArgument("field size does not match the network input side");
  }
  Cache<T> c;
  trunk_forward<T>(arch_, w_, b_, fields, c);
  return Eigen::Map<const Mat>(c.act[2].data(), arch_.flatten_size(), fields.cols());
}

template <typename T>
typename Network<T>::Mat Network<T>::head(const Mat& flat, const Mat& thetas) const {
  if (flat.rows() != arch_.flatten_size() || thetas.rows() != arch_.param_dim || flat.cols() != thetas.cols()) {
    throw InvalidArgument("head input shape mismatch");
  }
  Cache<T> c;
  head_forward<T>(arch_, w_, b_, flat.data(), thetas, c);
  return softmax<T>(c.logits);
}

template <typename T>
typename Network<T>::Mat Network<T>::forward(const Mat& fields, const Mat& thetas) const {
  check_batch(arch_, fields.rows(), fields.cols(), thetas.rows(), thetas.cols());
  Cache<T> c;
  trunk_forward<T>(arch_, w_, b_, fields, c);
  head_forward<T>(arch_, w_, b_, c.act[2].data(), thetas, c);
  return softmax<T>(c.logits);
}

template <typename T>
T Network<T>::loss(const Mat& fields, const Mat& thetas, const std::vector<int>& labels, Vec* grad, T scale) const {
  check_batch(arch_, fields.rows(), fields.cols(), thetas.rows(), thetas.cols());
  if (labels.size() != static_cast<std::size_t>(fields.cols())) throw InvalidArgument("label count mismatch");
  const int b = static_cast<int>(fields.cols());
  Cache<T> c;
  trunk_forward<T>(arch_, w_, b_, fields, c);
  head_forward<T>(arch_, w_, b_, c.act[2].data(), thetas, c);

  // Log-softmax cross-entropy.
  Mat dz(2, b);
  T total = 0;
  for (int j = 0; j < b; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y != 0 && y != 1) throw InvalidArgument("labels must be 0 or 1");
    const T mx = c.logits.col(j).maxCoeff();
    const T lse = mx + std::log(std::exp(c.logits(0, j) - mx) + std::exp(c.logits(1, j) - mx));
    total -= c.logits(y, j) - lse;
    dz(0, j) = std::exp(c.logits(0, j) - lse);
    dz(1, j) = std::exp(c.logits(1, j) - lse);
    dz(y, j) -= T(1);
  }
  if (grad == nullptr) return total;
  if (grad->size() != static_cast<Eigen::Index>(parameter_count())) throw InvalidArgument("gradient length mismatch");
  dz *= scale;

  std::vector<Eigen::Index> offset(w_.size());
  Eigen::Index o = 0;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    offset[l] = o;
    o += w_[l].size() + b_[l].size();
  }
  auto gw = [&](std::size_t l) { return Eigen::Map<Mat>(grad->data() + offset[l], w_[l].rows(), w_[l].cols()); };
  auto gb = [&](std::size_t l) { return Eigen::Map<Vec>(grad->data() + offset[l] + w_[l].size(), b_[l].size()); };

  // Dense stack.
  const std::size_t nd = arch_.dense.size() + 1;
  Mat dx;
  for (std::size_t k = nd; k-- > 0;) {
    const std::size_t l = 3 + k;
    gw(l).noalias() += dz * c.x[k].transpose();
    gb(l) += dz.rowwise().sum();
    dx.noalias() = w_[l].transpose() * dz;
    if (k > 0) {
      dz = dx.cwiseProduct((c.x[k].array() > T(0)).matrix().template cast<T>());
    }
  }
  const auto s = arch_.stage_sides();
  const int f = arch_.flatten_size();
  // dx holds the gradient w.r.t. [flatten; theta]; the flatten block of each
  // column is the channels-last conv3 map of that sample.
  Mat da(arch_.filters[2], static_cast<Eigen::Index>(b) * s[4] * s[4]);
  for (int j = 0; j < b; ++j) {
    std::copy(dx.col(j).data(), dx.col(j).data() + f, da.data() + static_cast<Eigen::Index>(j) * f);
  }

  Mat dcols, dpool, dact;
  // conv3
  da.array() *= (c.act[2].array() > T(0)).template cast<T>();
  gw(2).noalias() += da * c.cols[2].transpose();
  gb(2) += da.rowwise().sum();
  dcols.noalias() = w_[2].transpose() * da;
  col2im<T>(dcols, arch_.filters[1], b, s[3], s[3], arch_.padding[2], dpool);
  maxpool_backward<T>(dpool, c.arg[1], c.act[1].rows(), c.act[1].cols(), dact);
  // conv2
  dact.array() *= (c.act[1].array() > T(0)).template cast<T>();
  gw(1).noalias() += dact * c.cols[1].transpose();
  gb(1) += dact.rowwise().sum();
  dcols.noalias() = w_[1].transpose() * dact;
  col2im<T>(dcols, arch_.filters[0], b, s[1], s[1], arch_.padding[1], dpool);
  maxpool_backward<T>(dpool, c.arg[0], c.act[0].rows(), c.act[0].cols(), dact);
  // conv1
  dact.array() *= (c.act[0].array() > T(0)).template cast<T>();
  gw(0).noalias() += dact * c.cols[0].transpose();
  gb(0) += dact.rowwise().sum();
  return total;
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (!(lr_initial > 0.0)) throw InvalidArgument("lr_initial must be positive");
  if (lr_hold_epochs < 0) throw InvalidArgument("lr_hold_epochs must be >= 0");
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) throw InvalidArgument("lr_decay_factor must be in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
    throw InvalidArgument("invalid Adam hyperparameters");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument("validation_fraction must be in [0, 1)");
  }
  if (chunk_size < 1) throw InvalidArgument("chunk_size must be >= 1");
  if (plateau_epochs < 0 || max_restarts < 0) throw InvalidArgument("plateau settings must be non-negative");
}

double TrainConfig::learning_rate(int epoch) const {
  const int decays = std::max(0, epoch - lr_hold_epochs + 1);
  return lr_initial * std::pow(lr_decay_factor, decays);
}

TrainConfig TrainConfig::gp_defaults() {
  TrainConfig c;
  c.batch_size = 30000;
  c.lr_initial = 1e-3;
  return c;
}

TrainConfig TrainConfig::br_defaults() {
  TrainConfig c;
  c.batch_size = 50;
  c.lr_initial = 2e-3;
  return c;
}

std::vector<float> transform_input(const SpatialField& y, const std::string& transform) {
  std::vector<float> out(y.values.size());
  if (transform == "none") {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(y.values[i]);
  } else if (transform == "log") {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!(y.values[i] > 0.0)) throw InvalidArgument("log input transform needs positive field values");
      out[i] = static_cast<float>(std::log(y.values[i]));
    }
  } else {
    throw InvalidArgument("unknown input transform '" + transform + "'");
  }
  return out;
}

namespace {

using MatF = Network<float>::Mat;
using VecF = Network<float>::Vec;

// Pairs flattened to contiguous float storage for fast chunk assembly.
struct PackedPairs {
  int pixels = 0;
  int k = 0;
  std::vector<float> fields;  // per dataset field
  std::vector<float> params;  // per dataset parameter
  std::vector<PairRecord> pairs;
};

PackedPairs pack(const PairDataset& d, const std::string& transform) {
  PackedPairs p;
  p.pixels = static_cast<int>(d.grid.size());
  p.k = d.params.empty() ? 0 : static_cast<int>(d.params.front().size());
  p.fields.reserve(d.fields.size() * d.grid.size());
  for (const auto& f : d.fields) {
    const auto v = transform_input(f, transform);
    p.fields.insert(p.fields.end(), v.begin(), v.end());
  }
  for (const auto& q : d.params) {
    if (static_cast<int>(q.size()) != p.k) throw InvalidArgument("parameters have inconsistent lengths");
    for (double v : q.values) p.params.push_back(static_cast<float>(v));
  }
  p.pairs = d.pairs;
  return p;
}

void assemble(const PackedPairs& p, const std::size_t* idx, std::size_t count, MatF& fields, MatF& thetas,
              std::vector<int>& labels) {
  fields.resize(p.pixels, static_cast<Eigen::Index>(count));
  thetas.resize(p.k, static_cast<Eigen::Index>(count));
  labels.resize(count);
  for (std::size_t j = 0; j < count; ++j) {
    const auto& r = p.pairs[idx[j]];
    const float* f = p.fields.data() + r.field * static_cast<std::size_t>(p.pixels);
    std::copy(f, f + p.pixels, fields.col(static_cast<Eigen::Index>(j)).data());
    const float* t = p.params.data() + r.param * static_cast<std::size_t>(p.k);
    std::copy(t, t + p.k, thetas.col(static_cast<Eigen::Index>(j)).data());
    labels[j] = r.label == Label::Dependent ? 0 : 1;
  }
}

double mean_loss(const Network<float>& net, const PackedPairs& p, const std::vector<std::size_t>& idx, int chunk) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t nchunks = (idx.size() + chunk - 1) / chunk;
  std::vector<double> sums(nchunks, 0.0);
  parallel_for(nchunks, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t count = std::min<std::size_t>(chunk, idx.size() - begin);
    MatF f, t;
    std::vector<int> lab;
    assemble(p, idx.data() + begin, count, f, t, lab);
    sums[c] = net.loss(f, t, lab, nullptr, 1.0f);
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / static_cast<double>(idx.size());
}

void check_dataset(const PairDataset& d, const Architecture& a) {
  if (d.pairs.empty()) throw InvalidArgument("dataset has no pairs");
  if (d.grid.side != a.input_side) throw InvalidArgument("dataset grid side does not match the architecture");
  if (d.count(Label::Dependent) != d.count(Label::Independent)) throw InvalidArgument("dataset classes are not balanced");
  for (const auto& r : d.pairs) {
    if (r.field >= d.fields.size() || r.param >= d.params.size()) throw InvalidArgument("pair index out of range");
  }
  if (!d.params.empty() && static_cast<int>(d.params.front().size()) != a.param_dim) {
    throw InvalidArgument("parameter dimension does not match the architecture");
  }
}

}  // namespace

CnnModel train(const PairDataset& data, const Architecture& arch, const TrainConfig& config, TrainingLog* log,
               const PairDataset* validation, const EpochCallback& on_epoch) {
  config.validate();
  arch.validate();
  check_dataset(data, arch);
  if (validation) check_dataset(*validation, arch);

  CnnModel model;
  model.process = data.process;
  model.input_transform = default_input_transform(data.process);
  model.train = config;

  const PackedPairs packed = pack(data, model.input_transform);
  std::vector<std::size_t> all(packed.pairs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> train_idx = all;
  std::vector<std::size_t> val_idx;
  PackedPairs val_packed;
  const PackedPairs* val_source = &packed;
  if (validation) {
    val_packed = pack(*validation, model.input_transform);
    val_idx.resize(val_packed.pairs.size());
    std::iota(val_idx.begin(), val_idx.end(), std::size_t{0});
    val_source = &val_packed;
  } else if (config.validation_fraction > 0.0) {
    Rng rng(derive_seed(config.seed, {stream::kShuffle, 0xffffffffull}));
    std::shuffle(all.begin(), all.end(), rng);
    const auto nval = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(all.size())));
    val_idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nval));
    train_idx.assign(all.begin() + static_cast<std::ptrdiff_t>(nval), all.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
  }
  if (train_idx.empty()) throw InvalidArgument("no training pairs left after the validation split");

  TrainingLog local;
  TrainingLog& tl = log ? *log : local;
  tl = TrainingLog{};
  const double plateau_level = std::log(2.0) - config.plateau_margin;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto chunk = static_cast<std::size_t>(config.chunk_size);

  for (int attempt = 0; attempt <= config.max_restarts; ++attempt) {
    const std::uint64_t init_seed =
        attempt == 0 ? derive_seed(config.seed, {stream::kInit})
                     : derive_seed(config.seed, {stream::kRestart, static_cast<std::uint64_t>(attempt)});
    Network<float> net(arch);
    net.initialize(init_seed);
    model.init_seed = init_seed;
    tl.attempts = attempt + 1;
    model.attempts = attempt + 1;

    VecF params = net.parameters();
    VecF m1 = VecF::Zero(params.size());
    VecF m2 = VecF::Zero(params.size());
    std::int64_t step = 0;
    double best_train = std::numeric_limits<double>::infinity();
    bool restart = false;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const double lr = config.learning_rate(epoch);
      std::vector<std::size_t> order = train_idx;
      Rng rng(derive_seed(config.seed, {stream::kShuffle, static_cast<std::uint64_t>(attempt),
                                        static_cast<std::uint64_t>(epoch)}));
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t count = std::min(bs, order.size() - start);
        const std::size_t nchunks = (count + chunk - 1) / chunk;
        std::vector<VecF> grads(nchunks);
        std::vector<double> losses(nchunks, 0.0);
        const float scale = 1.0f / static_cast<float>(count);
        parallel_for(nchunks, [&](std::size_t c) {
          const std::size_t begin = c * chunk;
          const std::size_t n = std::min(chunk, count - begin);
          MatF f, t;
          std::vector<int> lab;
          assemble(packed, order.data() + start + begin, n, f, t, lab);
          grads[c] = VecF::Zero(params.size());
          losses[c] = net.loss(f, t, lab, &grads[c], scale);
        });
        VecF g = std::move(grads[0]);
        for (std::size_t c = 1; c < nchunks; ++c) g += grads[c];
        for (double l : losses) epoch_loss += l;
        if (!g.allFinite()) throw TrainingDiverged("non-finite gradient in epoch " + std::to_string(epoch), epoch);

        ++step;
        const auto b1 = static_cast<float>(config.beta1);
        const auto b2 = static_cast<float>(config.beta2);
        const double corr = std::sqrt(1.0 - std::pow(config.beta2, static_cast<double>(step))) /
                            (1.0 - std::pow(config.beta1, static_cast<double>(step)));
        const auto lr_t = static_cast<float>(lr * corr);
        const auto eps = static_cast<float>(config.epsilon);
        m1 = b1 * m1 + (1.0f - b1) * g;
        m2 = b2 * m2 + (1.0f - b2) * g.cwiseAbs2();
        params.array() -= lr_t * m1.array() / (m2.array().sqrt() + eps);
        net.set_parameters(params);
      }
      const double train_loss = epoch_loss / static_cast<double>(order.size());
      if (!std::isfinite(train_loss)) {
        throw TrainingDiverged("training loss became non-finite in epoch " + std::to_string(epoch), epoch);
      }
      best_train = std::min(best_train, train_loss);
      EpochRecord rec;
      rec.attempt = attempt;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.train_loss = train_loss;
      rec.validation_loss = mean_loss(net, *val_source, val_idx, config.chunk_size);
      tl.epochs.push_back(rec);
      if (on_epoch) on_epoch(rec);

      if (config.plateau_epochs > 0 && epoch + 1 == config.plateau_epochs && best_train > plateau_level) {
        if (attempt < config.max_restarts) {
          restart = true;
          break;
        }
        tl.plateaued = true;
      }
    }
    model.net = std::move(net);
    if (!restart) break;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Inference helpers

std::array<double, 2> forward(const CnnModel& model, const SpatialField& y, const Parameter& theta) {
  const auto& a = model.net.architecture();
  if (y.grid.side != a.input_side) throw InvalidArgument("field side does not match the model");
  if (static_cast<int>(theta.size()) != a.param_dim) throw InvalidArgument("parameter length does not match the model");
  const auto v = transform_input(y, model.input_transform);
  MatF f = Eigen::Map<const MatF>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
  MatF t(a.param_dim, 1);
  for (int i = 0; i < a.param_dim; ++i) t(i, 0) = static_cast<float>(theta[static_cast<std::size_t>(i)]);
  const MatF p = model.net.forward(f, t);
  return {static_cast<double>(p(0, 0)), static_cast<double>(p(1, 0))};
}

std::vector<std::array<double, 2>> forward_batch(const CnnModel& model, const std::vector<SpatialField>& fields,
                                                 const std::vector<Parameter>& thetas, int chunk_size) {
  if (fields.size() != thetas.size()) throw InvalidArgument("field and parameter batch sizes differ");
  if (chunk_size < 1) throw InvalidArgument("chunk size must be >= 1");
  const auto& a = model.net.architecture();
  const auto pixels = static_cast<Eigen::Index>(a.input_side) * a.input_side;
  for (std::size_t j = 0; j < fields.size(); ++j) {
    if (fields[j].grid.side != a.input_side) throw InvalidArgument("field side does not match the model");
    if (static_cast<int>(thetas[j].size()) != a.param_dim) throw InvalidArgument("parameter length does not match the model");
  }
  std::vector<std::array<double, 2>> out(fields.size());
  const auto chunk = static_cast<std::size_t>(chunk_size);
  const std::size_t nchunks = (fields.size() + chunk - 1) / chunk;
  parallel_for(nchunks, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t n = std::min(chunk, fields.size() - begin);
    MatF f(pixels, static_cast<Eigen::Index>(n));
    MatF t(a.param_dim, static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) {
      const auto v = transform_input(fields[begin + j], model.input_transform);
      std::copy(v.begin(), v.end(), f.col(static_cast<Eigen::Index>(j)).data());
      for (int i = 0; i < a.param_dim; ++i) {
        t(i, static_cast<Eigen::Index>(j)) = static_cast<float>(thetas[begin + j][static_cast<std::size_t>(i)]);
      }
    }
    const MatF p = model.net.forward(f, t);
    for (std::size_t j = 0; j < n; ++j) {
      out[begin + j] = {static_cast<double>(p(0, static_cast<Eigen::Index>(j))),
                        static_cast<double>(p(1, static_cast<Eigen::Index>(j)))};
    }
  });
  return out;
}

std::vector<double> class_one_probabilities(const CnnModel& model, const SpatialField& y, const Eigen::MatrixXd& thetas) {
  const auto& a = model.net.architecture();
  if (y.grid.side != a.input_side) throw InvalidArgument("field side does not match the model");
  if (thetas.cols() != a.param_dim) throw InvalidArgument("parameter length does not match the model");
  const auto v = transform_input(y, model.input_transform);
  const MatF f = Eigen::Map<const MatF>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
  const MatF flat = model.net.trunk(f);
  const Eigen::Index n = thetas.rows();
  std::vector<double> out(static_cast<std::size_t>(n));
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index begin = 0; begin < n; begin += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - begin);
    const MatF t = thetas.middleRows(begin, len).transpose().cast<float>();
    const MatF p = model.net.head(flat.replicate(1, len), t);
    for (Eigen::Index j = 0; j < len; ++j) out[static_cast<std::size_t>(begin + j)] = static_cast<double>(p(0, j));
  }
  return out;
}

double evaluate_loss(const CnnModel& model, const PairDataset& data, int chunk_size) {
  check_dataset(data, model.net.architecture());
  const PackedPairs p = pack(data, model.input_transform);
  std::vector<std::size_t> idx(p.pairs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return mean_loss(model.net, p, idx, chunk_size);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string layer_name(std::size_t l, std::size_t nl) {
  if (l < 3) return "conv" + std::to_string(l + 1);
  if (l + 1 == nl) return "output";
  return "dense" + std::to_string(l - 2);
}

}  // namespace

void save_model(const std::filesystem::path& dir, const CnnModel& model) {
  std::filesystem::create_directories(dir);
  const auto& net = model.net;
  const std::size_t nl = net.weights().size();
  Json tensors = Json::array();
  for (std::size_t l = 0; l < nl; ++l) {
    const std::string name = layer_name(l, nl);
    // Row-major payload of the [out, ...] weight matrix.
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = net.weights()[l];
    const auto wshape = net.weight_shape(l);
    write_tensor(dir / (name + "_weight.nlt"), wshape,
                 std::span<const float>(w.data(), static_cast<std::size_t>(w.size())));
    const std::int64_t bshape[] = {net.biases()[l].size()};
    write_tensor(dir / (name + "_bias.nlt"), bshape,
                 std::span<const float>(net.biases()[l].data(), static_cast<std::size_t>(net.biases()[l].size())));
    tensors.push_back({{"name", name + ".weight"}, {"file", name + "_weight.nlt"}, {"shape", wshape}});
    tensors.push_back({{"name", name + ".bias"}, {"file", name + "_bias.nlt"}, {"shape", {net.biases()[l].size()}}});
  }
  Json man;
  man["format"] = "nls-model";
  man["version"] = 1;
  man["architecture"] = to_json(net.architecture());
  man["conv_weight_layout"] = "out,ky,kx,in";
  man["process"] = to_string(model.process);
  man["input_transform"] = model.input_transform;
  man["init_seed"] = model.init_seed;
  man["attempts"] = model.attempts;
  man["train"] = to_json(model.train);
  man["tensors"] = tensors;
  std::ofstream os(dir / "manifest.json");
  os << man.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
}

CnnModel load_model(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigurationError("model manifest missing in " + dir.string());
  CnnModel model;
  Architecture arch;
  Json tensors;
  try {
    const Json man = Json::parse(is);
    if (man.at("format").get<std::string>() != "nls-model") throw FormatError("not a model manifest");
    arch = architecture_from_json(man.at("architecture"));
    model.process = process_from_string(man.at("process").get<std::string>());
    model.input_transform = man.at("input_transform").get<std::string>();
    model.init_seed = man.at("init_seed").get<std::uint64_t>();
    model.attempts = man.at("attempts").get<int>();
    model.train = train_config_from_json(man.at("train"));
    tensors = man.at("tensors");
  } catch (const Json::exception& e) {
    throw FormatError(std::string("model manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("model manifest: ") + e.what());
  } catch (const ConfigurationError& e) {
    throw FormatError(std::string("model manifest: ") + e.what());
  }
  if (model.input_transform != "none" && model.input_transform != "log") {
    throw FormatError("model manifest: unknown input transform");
  }
  model.net = Network<float>(arch);
  auto& net = model.net;
  const std::size_t nl = net.weights().size();
  if (!tensors.is_array() || tensors.size() != 2 * nl) throw FormatError("model manifest lists the wrong number of tensors");
  for (std::size_t l = 0; l < nl; ++l) {
    const std::string name = layer_name(l, nl);
    const Tensor w = read_tensor(dir / (name + "_weight.nlt"));
    if (w.shape != net.weight_shape(l)) throw FormatError(name + " weight shape does not match the manifest architecture");
    const Tensor b = read_tensor(dir / (name + "_bias.nlt"));
    if (b.shape != std::vector<std::int64_t>{net.biases()[l].size()}) {
      throw FormatError(name + " bias shape does not match the manifest architecture");
    }
    for (float v : w.data) {
      if (!std::isfinite(v)) throw FormatError(name + " weight holds non-finite values");
    }
    for (float v : b.data) {
      if (!std::isfinite(v)) throw FormatError(name + " bias holds non-finite values");
    }
    auto& wm = net.weights()[l];
    wm = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data.data(), wm.rows(),
                                                                                                   wm.cols());
    net.biases()[l] = Eigen::Map<const VecF>(b.data.data(), static_cast<Eigen::Index>(b.data.size()));
  }
  return model;
}

}  // namespace nls
