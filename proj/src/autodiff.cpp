// SPDX-License-Identifier: Apache-2.0

#include "textprune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace textprune {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

// ---- Tensor ------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape.empty()) throw Error("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw Error("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_to_string(shape));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 1 ? 1 : node_->shape[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return rank() == 1 ? node_->shape[0] : node_->shape[1];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw Error("item() on non-scalar tensor " + shape_to_string(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

// ---- Tape --------------------------------------------------------------------

namespace {

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
Tape<T>::Tape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <typename T>
Tape<T>::~Tape() {
  active_tape<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::current() noexcept {
  return active_tape<T>();
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorNode<T>> output, BackwardFn fn) {
  entries_.push_back(Entry{std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("backward() requires a scalar loss, got " +
                (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  const auto& target = loss.node();
  bool on_tape = false;
  for (auto& e : entries_) {
    e.output->grad.clear();
    if (e.output == target) on_tape = true;
  }
  if (!on_tape) {
    if (!target->requires_grad) throw Error("loss is not reachable from any differentiable leaf");
    target->ensure_grad()[0] += T(1);
    return;
  }
  target->ensure_grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn(*it->output);
  }
}

// ---- MAC counter -------------------------------------------------------------

namespace {
std::uint64_t& mac_total() {
  thread_local std::uint64_t total = 0;
  return total;
}
}  // namespace

MacCounter::MacCounter() : start_(mac_total()) {}

std::uint64_t MacCounter::count() const { return mac_total() - start_; }

void MacCounter::add(std::uint64_t macs) noexcept { mac_total() += macs; }

// ---- helpers -----------------------------------------------------------------

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.requires_grad();
}

// Builds the output tensor, validates finiteness and records the backward
// closure when any input participates in differentiation.
template <typename T, typename Fn>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  for (const T& x : data) {
    if (!std::isfinite(x)) throw Error(std::string("non-finite value produced by ") + op);
  }
  Tensor<T> out(std::move(shape), std::move(data));
  auto* tape = Tape<T>::current();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  out.set_requires_grad(true);
  tape->record(out.node(), std::forward<Fn>(backward));
  return out;
}

template <typename T>
Tensor<T> finish_list(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs, typename Tape<T>::BackwardFn backward) {
  for (const T& x : data) {
    if (!std::isfinite(x)) throw Error(std::string("non-finite value produced by ") + op);
  }
  Tensor<T> out(std::move(shape), std::move(data));
  auto* tape = Tape<T>::current();
  if (tape == nullptr) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  out.set_requires_grad(true);
  tape->record(out.node(), std::move(backward));
  return out;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require(t.defined(), std::string(op) + ": undefined tensor");
  require(t.rank() == 2, std::string(op) + ": expected a rank-2 tensor, got " + shape_to_string(t.shape()));
}

// c[m x n] (+)= a[m x k] * b[k x n]; accumulation runs over k in order.
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t r, std::size_t c) {
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

}  // namespace

// ---- primitives --------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul: shape mismatch " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  std::vector<T> out(m * n);
  gemm(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  NodePtr<T> an = a.node(), bn = b.node();
  return finish<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto bt = transposed(bn->data.data(), k, n);
      gemm(m, n, k, o.grad.data(), bt.data(), an->ensure_grad().data(), true);
    }
    if (bn->requires_grad) {
      auto at = transposed(an->data.data(), m, k);
      gemm(k, m, n, at.data(), o.grad.data(), bn->ensure_grad().data(), true);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return finish<T>("add", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode<T>& o) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& m, const Tensor<T>& row) {
  require_rank2(m, "add_row");
  const std::size_t r = m.rows(), c = m.cols();
  require(row.numel() == c && row.rows() == 1,
          "add_row: row " + shape_to_string(row.shape()) + " does not broadcast over " + shape_to_string(m.shape()));
  std::vector<T> out(m.numel());
  auto md = m.data();
  auto rd = row.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = md[i * c + j] + rd[j];
  NodePtr<T> mn = m.node(), rn = row.node();
  return finish<T>("add_row", m.shape(), std::move(out), {&m, &row}, [mn, rn, r, c](TensorNode<T>& o) {
    if (mn->requires_grad) {
      auto g = mn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (rn->requires_grad) {
      auto g = rn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return finish<T>("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  NodePtr<T> an = a.node(), bn = b.node();
  return finish<T>("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  NodePtr<T> an = a.node();
  return finish<T>("scale", a.shape(), std::move(out), {&a}, [an, factor](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& divisor) {
  require(divisor.numel() == 1, "div_scalar: divisor must be a scalar, got " + shape_to_string(divisor.shape()));
  const T s = divisor.item();
  require(s != T(0), "div_scalar: division by zero");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / s;
  NodePtr<T> an = a.node(), sn = divisor.node();
  return finish<T>("div_scalar", a.shape(), std::move(out), {&a, &divisor}, [an, sn, s](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / s;
    }
    if (sn->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * an->data[i];
      sn->ensure_grad()[0] -= acc / (s * s);
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  require(axis < 2, "concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank2(p, "concat");
  std::size_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = parts[0].cols();
    for (const auto& p : parts) {
      require(p.cols() == cols, "concat: column mismatch " + shape_to_string(parts[0].shape()) + " vs " + shape_to_string(p.shape()));
      rows += p.rows();
    }
  } else {
    rows = parts[0].rows();
    for (const auto& p : parts) {
      require(p.rows() == rows, "concat: row mismatch " + shape_to_string(parts[0].shape()) + " vs " + shape_to_string(p.shape()));
      cols += p.cols();
    }
  }
  std::vector<T> out(rows * cols);
  std::vector<NodePtr<T>> nodes;
  nodes.reserve(parts.size());
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto d = p.data();
    if (axis == 0) {
      std::copy(d.begin(), d.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += p.rows();
    } else {
      const std::size_t pc = p.cols();
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * pc), pc, out.begin() + static_cast<std::ptrdiff_t>(i * cols + offset));
      offset += pc;
    }
    nodes.push_back(p.node());
  }
  return finish_list<T>("concat", Shape{rows, cols}, std::move(out), parts,
                        [nodes, axis, rows, cols](TensorNode<T>& o) {
                          std::size_t off = 0;
                          for (const auto& n : nodes) {
                            const std::size_t pr = n->shape[0], pc = n->shape[1];
                            if (n->requires_grad) {
                              auto g = n->ensure_grad();
                              for (std::size_t i = 0; i < pr; ++i)
                                for (std::size_t j = 0; j < pc; ++j) {
                                  const std::size_t src = axis == 0 ? (off + i) * cols + j : i * cols + off + j;
                                  g[i * pc + j] += o.grad[src];
                                }
                            }
                            off += axis == 0 ? pr : pc;
                          }
                          (void)rows;
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> indices) {
  require_rank2(a, "gather_rows");
  require(!indices.empty(), "gather_rows: empty index list");
  const std::size_t c = a.cols();
  std::vector<T> out(indices.size() * c);
  auto d = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < a.rows(), "gather_rows: index " + std::to_string(indices[i]) + " out of range for " + shape_to_string(a.shape()));
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  NodePtr<T> an = a.node();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return finish<T>("gather_rows", Shape{indices.size(), c}, std::move(out), {&a},
                   [an, idx = std::move(idx), c](TensorNode<T>& o) {
                     auto g = an->ensure_grad();
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
                   });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids) {
  return gather_rows(table, ids);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  require_rank2(a, "mean");
  require(axis < 2, "mean: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  auto d = a.data();
  std::vector<T> out(axis == 0 ? c : r, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += d[i * c + j];
  const T denom = static_cast<T>(axis == 0 ? r : c);
  for (auto& x : out) x /= denom;
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  NodePtr<T> an = a.node();
  return finish<T>("mean", std::move(shape), std::move(out), {&a}, [an, axis, r, c, denom](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[axis == 0 ? j : i] / denom;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (const T& x : a.data()) acc += x;
  NodePtr<T> an = a.node();
  return finish<T>("sum", Shape{1}, std::vector<T>{acc}, {&a}, [an](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (auto& x : g) x += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require_rank2(x, "layernorm");
  const std::size_t r = x.rows(), c = x.cols();
  require(gamma.numel() == c && beta.numel() == c, "layernorm: affine parameters do not match width " + std::to_string(c));
  constexpr T eps = T(1e-6);
  std::vector<T> out(r * c), normed(r * c), inv_std(r);
  auto d = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = d.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * is;
      normed[i * c + j] = h;
      out[i * c + j] = h * gd[j] + bd[j];
    }
  }
  NodePtr<T> xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish<T>("layernorm", x.shape(), std::move(out), {&x, &gamma, &beta},
                   [xn, gn, bn, r, c, normed = std::move(normed), inv_std = std::move(inv_std)](TensorNode<T>& o) {
                     if (gn->requires_grad) {
                       auto g = gn->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * normed[i * c + j];
                     }
                     if (bn->requires_grad) {
                       auto g = bn->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
                     }
                     if (xn->requires_grad) {
                       auto g = xn->ensure_grad();
                       std::vector<T> dh(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         T mean_dh = 0, mean_dh_h = 0;
                         for (std::size_t j = 0; j < c; ++j) {
                           dh[j] = o.grad[i * c + j] * gn->data[j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * normed[i * c + j];
                         }
                         mean_dh /= static_cast<T>(c);
                         mean_dh_h /= static_cast<T>(c);
                         for (std::size_t j = 0; j < c; ++j)
                           g[i * c + j] += inv_std[i] * (dh[j] - mean_dh - normed[i * c + j] * mean_dh_h);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(a.numel());
  auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * d[i] * (T(1) + std::erf(d[i] * inv_sqrt2));
  NodePtr<T> an = a.node();
  return finish<T>("gelu", a.shape(), std::move(out), {&a}, [an, inv_sqrt2](TensorNode<T>& o) {
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = an->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      g[i] += o.grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = d[i];
    if (x >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  NodePtr<T> an = a.node();
  auto y = out;
  return finish<T>("sigmoid", a.shape(), std::move(out), {&a}, [an, y = std::move(y)](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Tensor<T> log_clipped(const Tensor<T>& a) {
  constexpr T lo = log_epsilon<T>();
  constexpr T hi = T(1) - log_epsilon<T>();
  std::vector<T> out(a.numel());
  auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::clamp(d[i], lo, hi));
  NodePtr<T> an = a.node();
  return finish<T>("log", a.shape(), std::move(out), {&a}, [an, lo, hi](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = an->data[i];
      if (x >= lo && x <= hi) g[i] += o.grad[i] / x;
    }
  });
}

namespace {

// In-place softmax over `n` values spaced `stride` apart.
template <typename T>
void softmax_strided(const T* in, T* out, std::size_t n, std::size_t stride) {
  T mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i * stride]);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i * stride] = std::exp(in[i * stride] - mx);
    total += out[i * stride];
  }
  for (std::size_t i = 0; i < n; ++i) out[i * stride] /= total;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  require(a.defined(), "softmax: undefined tensor");
  if (a.numel() == 0) throw Error("empty softmax domain");
  require(a.rank() <= 2, "softmax: rank must be 1 or 2");
  require(axis < 2, "softmax: axis must be 0 or 1");
  // Groups of `len` entries spaced `stride` apart, one group per `count`.
  std::size_t count, len, stride, step;
  if (a.rank() == 1) {
    count = 1, len = a.numel(), stride = 1, step = 0;
  } else if (axis == 1) {
    count = a.rows(), len = a.cols(), stride = 1, step = a.cols();
  } else {
    count = a.cols(), len = a.rows(), stride = a.cols(), step = 1;
  }
  std::vector<T> out(a.numel());
  auto d = a.data();
  for (std::size_t gi = 0; gi < count; ++gi) softmax_strided(d.data() + gi * step, out.data() + gi * step, len, stride);
  NodePtr<T> an = a.node();
  auto y = out;
  return finish<T>("softmax", a.shape(), std::move(out), {&a},
                   [an, y = std::move(y), count, len, stride, step](TensorNode<T>& o) {
                     auto g = an->ensure_grad();
                     for (std::size_t gi = 0; gi < count; ++gi) {
                       const std::size_t base = gi * step;
                       T dot = 0;
                       for (std::size_t i = 0; i < len; ++i) dot += o.grad[base + i * stride] * y[base + i * stride];
                       for (std::size_t i = 0; i < len; ++i) {
                         const std::size_t at = base + i * stride;
                         g[at] += y[at] * (o.grad[at] - dot);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  require_rank2(a, "log_softmax");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c), prob(r * c);
  auto d = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = d.data() + i * c;
    T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = row[j] - lse;
      prob[i * c + j] = std::exp(out[i * c + j]);
    }
  }
  NodePtr<T> an = a.node();
  return finish<T>("log_softmax", a.shape(), std::move(out), {&a}, [an, r, c, prob = std::move(prob)](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      T total = 0;
      for (std::size_t j = 0; j < c; ++j) total += o.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] - prob[i * c + j] * total;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  auto out = transposed(a.data().data(), r, c);
  NodePtr<T> an = a.node();
  return finish<T>("transpose", Shape{c, r}, std::move(out), {&a}, [an, r, c](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  NodePtr<T> an = a.node();
  return finish<T>("reshape", std::move(shape), std::move(out), {&a}, [an](TensorNode<T>& o) {
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a) {
  require_rank2(a, "normalize_rows");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c), norms(r);
  auto d = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += d[i * c + j] * d[i * c + j];
    norms[i] = std::max(std::sqrt(ss), T(1e-12));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = d[i * c + j] / norms[i];
  }
  NodePtr<T> an = a.node();
  auto y = out;
  return finish<T>("normalize_rows", a.shape(), std::move(out), {&a},
                   [an, r, c, y = std::move(y), norms = std::move(norms)](TensorNode<T>& o) {
                     auto g = an->ensure_grad();
                     for (std::size_t i = 0; i < r; ++i) {
                       T dot = 0;
                       for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * o.grad[i * c + j];
                       for (std::size_t j = 0; j < c; ++j)
                         g[i * c + j] += (o.grad[i * c + j] - y[i * c + j] * dot) / norms[i];
                     }
                   });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const Segment> segments, std::size_t heads,
                    std::vector<AttentionRecord<T>>* capture) {
  require_rank2(q, "attention");
  require(q.shape() == k.shape() && q.shape() == v.shape(), "attention: q/k/v shape mismatch " +
                                                                shape_to_string(q.shape()) + ", " +
                                                                shape_to_string(k.shape()) + ", " +
                                                                shape_to_string(v.shape()));
  const std::size_t d = q.cols();
  require(heads > 0 && d % heads == 0, "attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::size_t covered = 0;
  for (const auto& s : segments) {
    require(s.length > 0 && s.offset + s.length <= q.rows(), "attention: segment out of range");
    covered += s.length;
  }
  require(covered == q.rows(), "attention: segments do not cover all rows");

  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<T> out(q.numel(), T(0));
  // Probabilities for every (segment, head), stored contiguously.
  std::vector<std::size_t> prob_offset(segments.size());
  std::size_t total_probs = 0;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    prob_offset[si] = total_probs;
    total_probs += heads * segments[si].length * segments[si].length;
  }
  std::vector<T> probs(total_probs);
  std::uint64_t macs = 0;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto [off, len] = segments[si];
    macs += 2ull * len * len * d;
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + prob_offset[si] + h * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = qd.data() + (off + i) * d + h * dh;
        T* prow = p + i * len;
        for (std::size_t j = 0; j < len; ++j) {
          const T* kj = kd.data() + (off + j) * d + h * dh;
          T acc = 0;
          for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
          prow[j] = acc * inv_scale;
        }
        softmax_strided(prow, prow, len, 1);
        T* oi = out.data() + (off + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const T w = prow[j];
          const T* vj = vd.data() + (off + j) * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += w * vj[t];
        }
      }
    }
  }
  MacCounter::add(macs);
  if (capture != nullptr) {
    capture->clear();
    for (std::size_t si = 0; si < segments.size(); ++si) {
      const std::size_t len = segments[si].length;
      AttentionRecord<T> rec;
      rec.heads = heads;
      rec.length = len;
      auto first = probs.begin() + static_cast<std::ptrdiff_t>(prob_offset[si]);
      rec.weights.assign(first, first + static_cast<std::ptrdiff_t>(heads * len * len));
      capture->push_back(std::move(rec));
    }
  }
  NodePtr<T> qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<Segment> segs(segments.begin(), segments.end());
  return finish<T>(
      "attention", q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, segs = std::move(segs), probs = std::move(probs), prob_offset = std::move(prob_offset), heads, d, dh,
       inv_scale](TensorNode<T>& o) {
        const auto& qd = qn->data;
        const auto& kd = kn->data;
        const auto& vd = vn->data;
        std::span<T> gq, gk, gv;
        if (qn->requires_grad) gq = qn->ensure_grad();
        if (kn->requires_grad) gk = kn->ensure_grad();
        if (vn->requires_grad) gv = vn->ensure_grad();
        std::vector<T> ds;
        for (std::size_t si = 0; si < segs.size(); ++si) {
          const auto [off, len] = segs[si];
          ds.assign(len * len, T(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + prob_offset[si] + h * len * len;
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
            for (std::size_t i = 0; i < len; ++i) {
              const T* goi = o.grad.data() + (off + i) * d + h * dh;
              T dot = 0;
              for (std::size_t j = 0; j < len; ++j) {
                const T* vj = vd.data() + (off + j) * d + h * dh;
                T acc = 0;
                for (std::size_t t = 0; t < dh; ++t) acc += goi[t] * vj[t];
                ds[i * len + j] = acc;
                dot += acc * p[i * len + j];
              }
              for (std::size_t j = 0; j < len; ++j) ds[i * len + j] = p[i * len + j] * (ds[i * len + j] - dot);
            }
            if (!gv.empty()) {
              for (std::size_t i = 0; i < len; ++i) {
                const T* goi = o.grad.data() + (off + i) * d + h * dh;
                for (std::size_t j = 0; j < len; ++j) {
                  const T w = p[i * len + j];
                  T* gvj = gv.data() + (off + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gvj[t] += w * goi[t];
                }
              }
            }
            for (std::size_t i = 0; i < len; ++i) {
              for (std::size_t j = 0; j < len; ++j) {
                const T s = ds[i * len + j] * inv_scale;
                if (!gq.empty()) {
                  const T* kj = kd.data() + (off + j) * d + h * dh;
                  T* gqi = gq.data() + (off + i) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gqi[t] += s * kj[t];
                }
                if (!gk.empty()) {
                  const T* qi = qd.data() + (off + i) * d + h * dh;
                  T* gkj = gk.data() + (off + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gkj[t] += s * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---- explicit instantiation --------------------------------------------------

#define TEXTPRUNE_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                            \
  template class Tape<T>;                                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> div_scalar(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                      \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> mean_all(const Tensor<T>&);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                           \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                        \
  template Tensor<T> log_clipped(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> log_softmax(const Tensor<T>&);                                                    \
  template Tensor<T> transpose(const Tensor<T>&);                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> normalize_rows(const Tensor<T>&);                                                 \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                               std::span<const Segment>, std::size_t, std::vector<AttentionRecord<T>>*);

TEXTPRUNE_INSTANTIATE(float)
TEXTPRUNE_INSTANTIATE(double)

#undef TEXTPRUNE_INSTANTIATE

}  // namespace textprune
