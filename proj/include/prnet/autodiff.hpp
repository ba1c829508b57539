// Minimal reverse-mode automatic differentiation over dense row-major
// float64 tensors.
//
// Every primitive computes its forward value eagerly. When any operand
// requires a gradient (and recording is enabled), the primitive appends a
// node to the calling thread's tape holding a vector-Jacobian product
// closure. backward() replays the tape in reverse recording order, so each
// node's operands are processed after every consumer of them, and then clears
// the tape. Tapes are thread-local; tensors of one graph must stay on the
// thread that built it.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "prnet/errors.hpp"
#include "prnet/procrustes.hpp"

namespace prnet::ad {

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NotScalar : public Error {
 public:
  using Error::Error;
};

class DisconnectedLoss : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->data.assign(1, 0.0); }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size())
      throw ShapeMismatch("Tensor: data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel_of(shape);
    return {std::move(shape), std::vector<double>(n, 0.0)};
  }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = numel_of(shape);
    return {std::move(shape), std::vector<double>(n, value)};
  }
  static Tensor scalar(double v) { return {Shape{}, {v}}; }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
  }
  /// A trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
  }

  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
  [[nodiscard]] std::size_t numel() const { return impl_->data.size(); }
  [[nodiscard]] std::span<double> data() { return impl_->data; }
  [[nodiscard]] std::span<const double> data() const { return impl_->data; }
  [[nodiscard]] const std::vector<double>& values() const { return impl_->data; }
  [[nodiscard]] double item() const {
    if (numel() != 1) throw NotScalar("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  /// 2-D element access.
  [[nodiscard]] double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape.back() + c];
  }

  [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  [[nodiscard]] bool is_leaf() const { return impl_->leaf; }

  /// Same values, cut from the graph.
  [[nodiscard]] Tensor detach() const { return {impl_->shape, impl_->data}; }
  /// Deep copy that keeps the trainable flag (for per-thread parameter copies).
  [[nodiscard]] Tensor clone() const {
    Tensor t(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad && impl_->leaf;
    return t;
  }

  [[nodiscard]] const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  [[nodiscard]] bool same_handle(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

class GradientMap;
class Tensor;
GradientMap backward(const Tensor& loss);

struct Node {
  std::shared_ptr<TensorImpl> output;
  std::function<void()> backward;
};

class Tape {
 public:
  [[nodiscard]] bool recording() const { return enabled_; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] std::size_t nonfinite_events() const { return nonfinite_; }
  void note_nonfinite() { ++nonfinite_; }
  void reset_nonfinite() { nonfinite_ = 0; }

  void push(std::shared_ptr<TensorImpl> out, std::function<void()> fn) {
    out->requires_grad = true;
    out->leaf = false;
    nodes_.push_back({std::move(out), std::move(fn)});
  }

  void register_leaf(TensorImpl* leaf) { leaves_.push_back(leaf); }

  void clear() {
    for (TensorImpl* leaf : leaves_) leaf->grad.clear();
    for (auto& n : nodes_) {
      n.output->grad.clear();
      n.output->grad.shrink_to_fit();
    }
    nodes_.clear();
    leaves_.clear();
  }

 private:
  friend class NoGradGuard;
  friend class GradientMap;
  friend GradientMap backward(const Tensor& loss);
  std::vector<Node> nodes_;
  std::vector<TensorImpl*> leaves_;
  bool enabled_ = true;
  std::size_t nonfinite_ = 0;
};

inline Tape& tape() {
  thread_local Tape t;
  return t;
}

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(tape().enabled_) { tape().enabled_ = false; }
  ~NoGradGuard() { tape().enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Leaf handle -> gradient, produced by backward().
class GradientMap {
 public:
  [[nodiscard]] bool contains(const Tensor& t) const { return grads_.count(t.impl().get()) != 0; }

  /// Gradient for `t`; zeros when `t` did not influence the loss.
  [[nodiscard]] Tensor get(const Tensor& t) const {
    auto it = grads_.find(t.impl().get());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return {t.shape(), it->second};
  }

  [[nodiscard]] const std::vector<double>* find(const Tensor& t) const {
    auto it = grads_.find(t.impl().get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  [[nodiscard]] std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backward(const Tensor& loss);
  std::unordered_map<const TensorImpl*, std::vector<double>> grads_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!tape().recording()) return false;
  return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->requires_grad(); });
}

inline Tensor make_result(Shape shape, std::vector<double> data) {
  for (double v : data)
    if (!std::isfinite(v)) {
      tape().note_nonfinite();
      break;
    }
  return {std::move(shape), std::move(data)};
}

// Gradient buffer of an operand; leaves are registered for collection.
inline std::vector<double>& grad_of(TensorImpl& t) {
  if (t.grad.size() != t.data.size()) {
    t.grad.assign(t.data.size(), 0.0);
    if (t.leaf) tape().register_leaf(&t);
  }
  return t.grad;
}

template <typename F>
void record(const Tensor& out, F&& fn) {
  tape().push(out.impl(), std::function<void()>(std::forward<F>(fn)));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " differ");
}

inline std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw ShapeMismatch(std::string(op) + ": needs rank >= 1");
  return t.shape().back();
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& x, Fwd fwd, Dfdx dfdx) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor y = make_result(x.shape(), std::move(out));
  if (any_requires_grad({&x})) {
    record(y, [xi = x.impl(), yi = y.impl().get(), dfdx] {
      if (yi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] * dfdx(xi->data[i], yi->data[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y = detail::make_result(a.shape(), std::move(out));
  if (detail::any_requires_grad({&a, &b})) {
    detail::record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      for (TensorImpl* t : {ai.get(), bi.get()}) {
        if (!t->requires_grad) continue;
        auto& g = detail::grad_of(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y = detail::make_result(a.shape(), std::move(out));
  if (detail::any_requires_grad({&a, &b})) {
    detail::record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = detail::grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = detail::grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= yi->grad[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y = detail::make_result(a.shape(), std::move(out));
  if (detail::any_requires_grad({&a, &b})) {
    detail::record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = detail::grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = detail::grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * ai->data[i];
      }
    });
  }
  return y;
}

/// x * c for a constant c.
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

/// x * s for a single-element tensor s.
inline Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeMismatch("scale: factor must have one element");
  const double c = s.item();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  Tensor y = detail::make_result(x.shape(), std::move(out));
  if (detail::any_requires_grad({&x, &s})) {
    detail::record(y, [xi = x.impl(), si = s.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      const double c = si->data[0];
      if (xi->requires_grad) {
        auto& g = detail::grad_of(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * c;
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < yi->grad.size(); ++i) acc += yi->grad[i] * xi->data[i];
        detail::grad_of(*si)[0] += acc;
      }
    });
  }
  return y;
}

/// x / s for a single-element tensor s.
inline Tensor divide(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeMismatch("divide: divisor must have one element");
  const double c = s.item();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / c;
  Tensor y = detail::make_result(x.shape(), std::move(out));
  if (detail::any_requires_grad({&x, &s})) {
    detail::record(y, [xi = x.impl(), si = s.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      const double c = si->data[0];
      if (xi->requires_grad) {
        auto& g = detail::grad_of(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] / c;
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < yi->grad.size(); ++i) acc += yi->grad[i] * yi->data[i];
        detail::grad_of(*si)[0] -= acc / c;
      }
    });
  }
  return y;
}

inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
  return detail::unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                       [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

/// Gradient at 0 is taken as 0.
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

/// log(1 + e^x), evaluated stably.
inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor y = detail::make_result(std::move(shape), x.values());
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

/// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeMismatch("transpose_last2: needs rank >= 2");
  const std::size_t r = x.shape()[x.rank() - 2];
  const std::size_t c = x.shape()[x.rank() - 1];
  const std::size_t batch = x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  Tensor y = detail::make_result(std::move(shape), std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), r, c, batch] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += yi->grad[b * r * c + j * r + i];
    });
  }
  return y;
}

/// Concatenates along the last axis; leading axes must agree.
inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_lastdim: no operands");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeMismatch("concat_lastdim: needs rank >= 1");
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    if (l.empty()) throw ShapeMismatch("concat_lastdim: needs rank >= 1");
    widths.push_back(l.back());
    total += l.back();
    l.pop_back();
    if (l != lead) throw ShapeMismatch("concat_lastdim: leading shapes differ");
  }
  const std::size_t rows = numel_of(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor y = detail::make_result(std::move(shape), std::move(out));
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs && tape().recording()) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record(y, [impls, widths, rows, total, yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (impls[k]->requires_grad) {
          auto& g = detail::grad_of(*impls[k]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c)
              g[r * widths[k] + c] += yi->grad[r * total + offset + c];
        }
        offset += widths[k];
      }
    });
  }
  return y;
}

/// Rows of x (first axis) selected by `index`; indices are constants.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.rank() < 1) throw ShapeMismatch("gather_rows: needs rank >= 1");
  const std::size_t n = x.dim(0);
  const std::size_t width = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(index.size() * width);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw ShapeMismatch("gather_rows: index out of range");
    std::copy_n(x.data().data() + index[r] * width, width, out.data() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  Tensor y = detail::make_result(std::move(shape), std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), index, width] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t c = 0; c < width; ++c) g[index[r] * width + c] += yi->grad[r * width + c];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (m x n) * (n x p).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<RowMat>;
  using CMap = Eigen::Map<const RowMat>;
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto n = static_cast<Eigen::Index>(a.dim(1));
  const auto p = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * p));
  Map(out.data(), m, p).noalias() = CMap(a.data().data(), m, n) * CMap(b.data().data(), n, p);
  Tensor y = detail::make_result({a.dim(0), b.dim(1)}, std::move(out));
  if (detail::any_requires_grad({&a, &b})) {
    detail::record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl().get(), m, n, p] {
      if (yi->grad.empty()) return;
      const CMap g(yi->grad.data(), m, p);
      if (ai->requires_grad)
        Map(detail::grad_of(*ai).data(), m, n).noalias() += g * CMap(bi->data.data(), n, p).transpose();
      if (bi->requires_grad)
        Map(detail::grad_of(*bi).data(), n, p).noalias() += CMap(ai->data.data(), m, n).transpose() * g;
    });
  }
  return y;
}

/// x + b broadcast over every leading index; b holds last_dim(x) values.
inline Tensor broadcast_add_row(const Tensor& x, const Tensor& b) {
  const std::size_t d = detail::last_dim(x, "broadcast_add_row");
  if (b.numel() != d || b.rank() > 2)
    throw ShapeMismatch("broadcast_add_row: bias " + shape_str(b.shape()) + " vs " +
                        shape_str(x.shape()));
  const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] + b[c];
  Tensor y = detail::make_result(x.shape(), std::move(out));
  if (detail::any_requires_grad({&x, &b})) {
    detail::record(y, [xi = x.impl(), bi = b.impl(), yi = y.impl().get(), rows, d] {
      if (yi->grad.empty()) return;
      if (xi->requires_grad) {
        auto& g = detail::grad_of(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = detail::grad_of(*bi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) g[c] += yi->grad[r * d + c];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

inline Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = detail::make_result({}, {s});
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (auto& v : g) v += yi->grad[0];
    });
  }
  return y;
}

inline Tensor reduce_mean(const Tensor& x) {
  return scale(reduce_sum(x), 1.0 / static_cast<double>(std::max<std::size_t>(x.numel(), 1)));
}

/// Mean over the first axis of an (R x D) tensor -> (1 x D).
inline Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ShapeMismatch("mean_rows: needs non-empty (R x D)");
  const std::size_t r = x.dim(0), d = x.dim(1);
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t c = 0; c < d; ++c) out[c] += x[i * d + c];
  for (auto& v : out) v /= static_cast<double>(r);
  Tensor y = detail::make_result({1, d}, std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), r, d] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      const double inv = 1.0 / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t c = 0; c < d; ++c) g[i * d + c] += yi->grad[c] * inv;
    });
  }
  return y;
}

/// Max over the last axis. The gradient goes to the first maximal element.
inline Tensor reduce_max_lastdim(const Tensor& x) {
  const std::size_t d = detail::last_dim(x, "reduce_max_lastdim");
  if (d == 0) throw ShapeMismatch("reduce_max_lastdim: empty last axis");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < d; ++c)
      if (x[r * d + c] > x[r * d + best]) best = c;
    arg[r] = best;
    out[r] = x[r * d + best];
  }
  Shape shape = x.shape();
  shape.pop_back();
  Tensor y = detail::make_result(std::move(shape), std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), arg = std::move(arg), d] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (std::size_t r = 0; r < arg.size(); ++r) g[r * d + arg[r]] += yi->grad[r];
    });
  }
  return y;
}

/// Row-wise softmax over the last axis, stabilized by the row max.
inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t d = detail::last_dim(x, "softmax_lastdim");
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < d; ++c) o[c] /= z;
  }
  Tensor y = detail::make_result(x.shape(), std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), rows, d] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = yi->data.data() + r * d;
        const double* gy = yi->grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += gy[c] * p[c];
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += p[c] * (gy[c] - dot);
      }
    });
  }
  return y;
}

/// (x - mean) / sqrt(var + eps) over the last axis, no affine terms.
inline Tensor layer_norm_lastdim(const Tensor& x, double eps = 1e-5) {
  const std::size_t d = detail::last_dim(x, "layer_norm_lastdim");
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (in[c] - mean) * inv_std[r];
  }
  Tensor y = detail::make_result(x.shape(), std::move(out));
  if (detail::any_requires_grad({&x})) {
    detail::record(y, [xi = x.impl(), yi = y.impl().get(), inv_std = std::move(inv_std), rows, d] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*xi);
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yy = yi->data.data() + r * d;
        const double* gy = yi->grad.data() + r * d;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          mg += gy[c];
          mgy += gy[c] * yy[c];
        }
        mg *= inv_d;
        mgy *= inv_d;
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += inv_std[r] * (gy[c] - mg - yy[c] * mgy);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Registration-specific primitives

/// Forward: the values of `hard` (a constant). Backward: the upstream
/// gradient is handed to `soft` unchanged.
inline Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  detail::require_same_shape(hard, soft, "straight_through");
  Tensor y = detail::make_result(hard.shape(), hard.values());
  if (detail::any_requires_grad({&soft})) {
    detail::record(y, [si = soft.impl(), yi = y.impl().get()] {
      if (yi->grad.empty()) return;
      auto& g = detail::grad_of(*si);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

/// Closest proper rotation for a 3x3 cross-covariance H = U S V^T:
/// R = V diag(1, 1, det(V U^T)) U^T.
///
/// The VJP differentiates R as the rotation polar factor of M = H^T = R P,
/// P = U diag(s1, s2, d s3) U^T: with K = R^T G and
/// Z = U (C o U^T K U) U^T, C_ij = 1 / (p_i + p_j), dL/dH = (Z^T - Z) R^T.
inline Tensor rotation_from_covariance(const Tensor& h) {
  if (h.shape() != Shape{3, 3}) throw ShapeMismatch("rotation_from_covariance: needs 3x3");
  Mat3 hm;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) hm(i, j) = h.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  const Svd3 svd = svd3(hm);
  const Mat3 r = rotation_from_svd(svd);
  std::vector<double> out(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[static_cast<std::size_t>(3 * i + j)] = r(i, j);
  Tensor y = detail::make_result({3, 3}, std::move(out));
  if (detail::any_requires_grad({&h})) {
    detail::record(y, [hi = h.impl(), yi = y.impl().get(), svd, r] {
      if (yi->grad.empty()) return;
      Mat3 g;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) g(i, j) = yi->grad[static_cast<std::size_t>(3 * i + j)];
      const double d = (svd.v * svd.u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
      const Vec3 p(svd.s[0], svd.s[1], d * svd.s[2]);
      const Mat3 kt = svd.u.transpose() * (r.transpose() * g) * svd.u;
      Mat3 c = Mat3::Zero();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          if (i == j) continue;
          const double den = p[i] + p[j];
          c(i, j) = std::abs(den) > 1e-12 ? kt(i, j) / den : 0.0;
        }
      const Mat3 z = svd.u * c * svd.u.transpose();
      const Mat3 gh = (z.transpose() - z) * r.transpose();
      auto& gx = detail::grad_of(*hi);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) gx[static_cast<std::size_t>(3 * i + j)] += gh(i, j);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Backward

/// Reverse sweep from a scalar loss. Returns the gradient of every leaf that
/// requires grad and was reached; clears the tape.
inline GradientMap backward(const Tensor& loss) {
  Tape& t = tape();
  if (loss.numel() != 1) {
    t.clear();
    throw NotScalar("backward: loss has " + std::to_string(loss.numel()) + " elements");
  }
  if (!loss.requires_grad() || loss.is_leaf()) {
    // A leaf loss differentiates trivially only w.r.t. itself.
    if (loss.requires_grad()) {
      GradientMap gm;
      gm.grads_[loss.impl().get()] = {1.0};
      t.clear();
      return gm;
    }
    t.clear();
    throw DisconnectedLoss("backward: loss is not connected to the tape");
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = t.nodes_.rbegin(); it != t.nodes_.rend(); ++it) it->backward();
  GradientMap gm;
  for (TensorImpl* leaf : t.leaves_) {
    gm.grads_[leaf] = std::move(leaf->grad);
    leaf->grad.clear();
  }
  t.clear();
  return gm;
}

/// Max relative error between backward() and central differences over every
/// element of every input; denominators are max(1, |analytic|, |numeric|).
inline double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, double epsilon = 1e-6) {
  if (!(epsilon > 0.0)) throw InvalidArgument("gradient_check: epsilon must be positive");
  for (auto& in : inputs) in.set_requires_grad(true);
  tape().clear();
  const GradientMap grads = backward(f(inputs));
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& in : inputs) {
    const Tensor analytic = grads.get(in);
    auto data = in.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + epsilon;
      const double up = f(inputs).item();
      data[i] = saved - epsilon;
      const double down = f(inputs).item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace prnet::ad
