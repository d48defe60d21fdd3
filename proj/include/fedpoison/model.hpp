#pragma once

// Multinomial softmax regression over hashed features. Parameters are a
// class_count x hash_dim weight matrix stored row-major in a flat vector.

#include "fedpoison/common.hpp"
#include "fedpoison/data.hpp"

#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

namespace fedpoison {

struct ParamVector {
  VectorXd values;
  Index hash_dim = 0;
  Index class_count = 0;

  Index dim() const { return values.size(); }

  using WeightMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  WeightMap weights() const { return {values.data(), class_count, hash_dim}; }
};

// One client's parameter delta for one round.
struct UpdateVector {
  VectorXd delta;
  int client_id = -1;
  int round = -1;
};

inline ParamVector init_params(Index hash_dim, Index class_count, std::uint64_t /*seed*/ = 0) {
  if (hash_dim < 1 || class_count < 1) throw Error("init_params: dims must be >= 1");
  return {VectorXd::Zero(hash_dim * class_count), hash_dim, class_count};
}

inline VectorXd logits(const ParamVector& p, const VectorXd& x) {
  if (x.size() != p.hash_dim)
    throw Error(detail::concat("feature dim ", x.size(), " != model hash_dim ", p.hash_dim));
  return p.weights() * x;
}

inline VectorXd softmax(const VectorXd& z) {
  const double m = z.maxCoeff();
  VectorXd e = (z.array() - m).exp();
  return e / e.sum();
}

inline VectorXd predict_proba(const ParamVector& p, const VectorXd& x) { return softmax(logits(p, x)); }

// Argmax with ties resolved toward the lowest class id.
inline int predict(const ParamVector& p, const VectorXd& x) {
  const VectorXd z = logits(p, x);
  int best = 0;
  for (Index k = 1; k < z.size(); ++k)
    if (z[k] > z[best]) best = static_cast<int>(k);
  return best;
}

struct LossGrad {
  double loss = 0.0;
  VectorXd grad;
};

namespace detail {

// Accumulates the unnormalized cross-entropy and gradient of one example.
inline double accumulate_example(const ParamVector& p, const LabeledFeature& ex,
                                 Eigen::Ref<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> g) {
  if (ex.label < 0 || ex.label >= p.class_count)
    throw Error(detail::concat("loss_and_grad: label ", ex.label, " out of range"));
  const VectorXd z = logits(p, ex.x);
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  VectorXd resid = (z.array() - lse).exp().matrix();
  resid[ex.label] -= 1.0;
  g.noalias() += resid * ex.x.transpose();
  return lse - z[ex.label];
}

template <class Examples>
LossGrad batch_loss_and_grad(const ParamVector& p, const Examples& batch, double weight_decay) {
  if (batch.empty()) throw Error("loss_and_grad: empty batch");
  if (p.values.size() != p.hash_dim * p.class_count) throw Error("loss_and_grad: malformed params");
  LossGrad out{0.0, VectorXd::Zero(p.dim())};
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> g(
      out.grad.data(), p.class_count, p.hash_dim);
  for (const auto& ex : batch) out.loss += accumulate_example(p, ex, g);
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  out.grad *= inv;
  if (weight_decay != 0.0) {
    out.loss += 0.5 * weight_decay * p.values.squaredNorm();
    out.grad += weight_decay * p.values;
  }
  return out;
}

// Non-owning view of dataset rows selected by index.
struct IndexedBatch {
  std::span<const LabeledFeature> data;
  std::span<const std::size_t> idx;

  struct Iter {
    const IndexedBatch* b;
    std::size_t i;
    const LabeledFeature& operator*() const { return b->data[b->idx[i]]; }
    Iter& operator++() { ++i; return *this; }
    bool operator!=(const Iter& o) const { return i != o.i; }
  };
  Iter begin() const { return {this, 0}; }
  Iter end() const { return {this, idx.size()}; }
  bool empty() const { return idx.empty(); }
  std::size_t size() const { return idx.size(); }
};

}  // namespace detail

// Mean cross-entropy of softmax(Wx) over the batch, plus optional
// 0.5 * weight_decay * ||W||^2.
inline LossGrad loss_and_grad(const ParamVector& p, std::span<const LabeledFeature> batch,
                              double weight_decay = 0.0) {
  return detail::batch_loss_and_grad(p, batch, weight_decay);
}

struct TrainOptions {
  int epochs = 2;
  double lr = 0.5;
  int batch_size = 32;
  double weight_decay = 0.0;
};

// Mini-batch SGD from a copy of the global parameters; returns trained - global.
inline UpdateVector local_train(const ParamVector& global, std::span<const LabeledFeature> dataset,
                                const TrainOptions& opt, std::uint64_t seed) {
  if (dataset.empty()) throw Error("local_train: empty dataset");
  if (opt.epochs < 1) throw Error("local_train: epochs must be >= 1");
  if (opt.lr < 0.0) throw Error("local_train: lr must be >= 0");
  if (opt.batch_size < 1) throw Error("local_train: batch_size must be >= 1");

  ParamVector p = global;
  if (opt.lr == 0.0) return {VectorXd::Zero(global.dim()), -1, -1};

  Rng rng(derive_seed(seed, 0x7A1A));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t len = std::min(order.size() - start, bs);
      const detail::IndexedBatch batch{dataset, std::span<const std::size_t>(order).subspan(start, len)};
      p.values -= opt.lr * detail::batch_loss_and_grad(p, batch, opt.weight_decay).grad;
    }
  }
  return {p.values - global.values, -1, -1};
}

inline double evaluate_accuracy(const ParamVector& p, std::span<const LabeledFeature> testset) {
  if (testset.empty()) throw Error("evaluate_accuracy: empty test set");
  std::size_t correct = 0;
  for (const auto& ex : testset) correct += predict(p, ex.x) == ex.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(testset.size());
}

// Fraction of the trigger subset predicted as dst_class.
inline double evaluate_asr(const ParamVector& p, std::span<const LabeledFeature> asr_subset, int dst_class) {
  if (asr_subset.empty()) throw Error("evaluate_asr: empty subset");
  std::size_t hit = 0;
  for (const auto& ex : asr_subset) hit += predict(p, ex.x) == dst_class ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(asr_subset.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte little-endian dim header followed by little-endian
// IEEE-754 doubles.

namespace detail {

inline void put_le64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, 8);
}

inline std::uint64_t get_le64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw Error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_params(std::ostream& out, const VectorXd& values) {
  detail::put_le64(out, static_cast<std::uint64_t>(values.size()));
  for (Index i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    const double v = values[i];
    std::memcpy(&bits, &v, sizeof bits);
    detail::put_le64(out, bits);
  }
}

inline VectorXd read_params(std::istream& in) {
  const std::uint64_t dim = detail::get_le64(in);
  if (dim > (std::uint64_t{1} << 32)) throw Error("checkpoint dim header implausible");
  VectorXd v(static_cast<Index>(dim));
  for (Index i = 0; i < v.size(); ++i) {
    const std::uint64_t bits = detail::get_le64(in);
    std::memcpy(&v[i], &bits, sizeof bits);
  }
  return v;
}

}  // namespace fedpoison
