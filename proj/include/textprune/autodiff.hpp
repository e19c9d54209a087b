// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding row-major data and an
// optional gradient slot. Primitives record themselves on the Tape that is
// active on the calling thread; with no active tape (or no input requiring
// gradients) they evaluate eagerly and record nothing.
//
// Every primitive checks its output for NaN/Inf and throws textprune::Error.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace textprune {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // Rank-2 extents. A rank-1 tensor of length n reads as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->data; }
  // Direct write access; intended for leaves (parameter updates, init).
  std::span<T> mutable_data() { return node_->data; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf with a copy of the values and no gradient history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of primitive applications. Constructing a Tape makes it the
// active tape for its element type on this thread until it is destroyed.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(TensorNode<T>& output)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept;

  void record(std::shared_ptr<TensorNode<T>> output, BackwardFn fn);

  // Propagates d(loss)/d(x) into the grad slot of every requires_grad leaf.
  // Leaf gradients accumulate across calls; callers zero them per step.
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Multiply-accumulate accounting for forward matmul and attention work.
// Counts are thread-local; a MacCounter reports the work done since it was
// constructed.
class MacCounter {
 public:
  MacCounter();
  std::uint64_t count() const;

  static void add(std::uint64_t macs) noexcept;

 private:
  std::uint64_t start_;
};

// Row range [offset, offset + length) of one sequence inside a stacked batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Per-head attention probabilities of one sequence: heads x length x length.
template <typename T>
struct AttentionRecord {
  std::size_t heads = 0;
  std::size_t length = 0;
  std::vector<T> weights;

  T weight(std::size_t head, std::size_t query, std::size_t key) const {
    return weights[(head * length + query) * length + key];
  }
};

// ---- primitives ------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// matrix (r x c) + row vector (1 x c or c)
template <typename T>
Tensor<T> add_row(const Tensor<T>& m, const Tensor<T>& row);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Tensor divided by a differentiable scalar tensor.
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& divisor);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// Indices are constants; gradients scatter-add into the selected rows.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> indices);

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids);

// axis 0 -> 1 x cols, axis 1 -> rows x 1
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis);

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);

// Natural log with inputs clamped to [eps, 1 - eps]; eps = 1e-7 (float),
// 1e-12 (double). The gradient is zero where the clamp is active.
template <typename T>
Tensor<T> log_clipped(const Tensor<T>& a);

template <typename T>
constexpr T log_epsilon();
template <>
constexpr float log_epsilon<float>() { return 1e-7f; }
template <>
constexpr double log_epsilon<double>() { return 1e-12; }

// Rank 1: over all entries. Rank 2: axis 1 normalizes rows, axis 0 columns.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis = 1);

// Row-wise log-softmax of a rank-2 tensor.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Row-wise L2 normalization.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a);

// Multi-head scaled dot-product self-attention applied independently to each
// segment of the stacked q/k/v rows. When `capture` is non-null it receives
// one AttentionRecord per segment.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const Segment> segments, std::size_t heads,
                    std::vector<AttentionRecord<T>>* capture = nullptr);

}  // namespace textprune
