#pragma once

// Minimal reverse-mode autodiff over 2-D double tensors.
//
// A Tensor is a shared handle to a graph node. Ops executed while grad mode is
// enabled record their parents and a backward closure on the result node;
// backward() topologically sorts the reachable graph from a scalar loss and
// runs the closures in reverse order. Leaf gradients accumulate across calls
// until the caller resets them (zero_grad).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "narvid/error.hpp"
#include "narvid/matrix.hpp"

namespace narvid {

inline constexpr double kNormEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_matrix(const Matrix& m, bool requires_grad = false) {
    return make_leaf(m.rows, m.cols, m.data, requires_grad);
  }
  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return make_leaf(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }
  static Tensor full(std::size_t rows, std::size_t cols, double v, bool requires_grad = false) {
    return make_leaf(rows, cols, std::vector<double>(rows * cols, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return full(1, 1, v, requires_grad); }
  static Tensor row_vector(std::vector<double> v, bool requires_grad = false) {
    const std::size_t n = v.size();
    return make_leaf(1, n, std::move(v), requires_grad);
  }
  static Tensor make_leaf(std::size_t rows, std::size_t cols, std::vector<double> values,
                          bool requires_grad) {
    if (values.size() != rows * cols) throw ShapeError("Tensor: value count does not match shape");
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("Tensor: non-finite leaf value");
    auto n = std::make_shared<detail::Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& data() const { return node_->value; }
  // Mutable access is meant for leaves (optimizer updates, finite differences).
  std::vector<double>& mutable_data() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    if (size() != 1) throw UsageError("Tensor::item on non-scalar");
    return node_->value[0];
  }
  Matrix matrix() const { return Matrix(rows(), cols(), node_->value); }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; zeros if nothing has been accumulated yet.
  std::vector<double> grad() const {
    return node_->grad.empty() ? std::vector<double>(size(), 0.0) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const { return make_leaf(rows(), cols(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds a result node; records history only if some parent needs grads.
inline Tensor make_result(const char* op, std::size_t rows, std::size_t cols,
                          std::vector<double> value, std::initializer_list<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_list(const char* op, std::size_t rows, std::size_t cols,
                               std::vector<double> value, const std::vector<Tensor>& parents,
                               std::function<void(Node&)> backward_fn) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& s) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants(s, p)) continue;
      auto& g = s.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result("sub", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& s) {
    if (detail::wants(s, 0)) {
      auto& g = s.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    }
    if (detail::wants(s, 1)) {
      auto& g = s.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s.grad[i];
    }
  });
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& s) {
    const auto& lhs = s.parents[0]->value;
    const auto& rhs = s.parents[1]->value;
    if (detail::wants(s, 0)) {
      auto& g = s.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * rhs[i];
    }
    if (detail::wants(s, 1)) {
      auto& g = s.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * lhs[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * k;
  return detail::make_result("scale", a.rows(), a.cols(), std::move(out), {a}, [k](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * k;
  });
}

inline Tensor add_constant(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return detail::make_result("add_constant", a.rows(), a.cols(), std::move(out), {a},
                             [](detail::Node& s) {
                               auto& g = s.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
                             });
}

// a (m x n) + bias (1 x n) broadcast over rows.
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row_bias: bias must be 1 x cols");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return detail::make_result("add_row_bias", m, n, std::move(out), {a, bias}, [m, n](detail::Node& s) {
    if (detail::wants(s, 0)) {
      auto& g = s.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    }
    if (detail::wants(s, 1)) {
      auto& g = s.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += s.grad[i * n + j];
    }
  });
}

// a * s where s is a 1x1 tensor.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: expected 1x1 scalar");
  const double k = s.item();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * k;
  return detail::make_result("mul_scalar", a.rows(), a.cols(), std::move(out), {a, s}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const double kk = self.parents[1]->value[0];
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * kk;
    }
    if (detail::wants(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      self.parents[1]->grad_buffer()[0] += acc;
    }
  });
}

// a + s where s is a 1x1 tensor, broadcast to every entry.
inline Tensor add_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("add_scalar: expected 1x1 scalar");
  const double k = s.item();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + k;
  return detail::make_result("add_scalar", a.rows(), a.cols(), std::move(out), {a, s}, [](detail::Node& self) {
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      double acc = 0.0;
      for (double x : self.grad) acc += x;
      self.parents[1]->grad_buffer()[0] += acc;
    }
  });
}

// a / s where s is a 1x1 tensor.
inline Tensor div_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_scalar: expected 1x1 scalar");
  const double d = s.item();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / d;
  return detail::make_result("div_scalar", a.rows(), a.cols(), std::move(out), {a, s}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const double dd = self.parents[1]->value[0];
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / dd;
    }
    if (detail::wants(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc -= self.grad[i] * av[i] / (dd * dd);
      self.parents[1]->grad_buffer()[0] += acc;
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
  return detail::make_result("relu", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& s) {
    const auto& av = s.parents[0]->value;
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) g[i] += s.grad[i];
  });
}

// tanh approximation of GELU; smooth everywhere, which keeps gradient checks clean.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return detail::make_result("gelu", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& s) {
    const auto& av = s.parents[0]->value;
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double t = std::tanh(c * (x + k * x * x * x));
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      g[i] += s.grad[i] * d;
    }
  });
}

// ------------------------------------------------------------------ structure

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }
  return detail::make_result("matmul", m, n, std::move(out), {a, b}, [m, k, n](detail::Node& s) {
    const auto& lhs = s.parents[0]->value;
    const auto& rhs = s.parents[1]->value;
    if (detail::wants(s, 0)) {
      auto& g = s.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += s.grad[i * n + j] * rhs[p * n + j];
          g[i * k + p] += acc;
        }
    }
    if (detail::wants(s, 1)) {
      auto& g = s.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = lhs[i * k + p];
          for (std::size_t j = 0; j < n; ++j) g[p * n + j] += x * s.grad[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result("transpose", n, m, std::move(out), {a}, [m, n](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += s.grad[j * m + i];
  });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return detail::make_result("sum", 1, 1, {acc}, {a}, [](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (double& x : g) x += s.grad[0];
  });
}

inline Tensor element(const Tensor& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) throw ShapeError("element: index out of range");
  const std::size_t idx = r * a.cols() + c;
  return detail::make_result("element", 1, 1, {a.data()[idx]}, {a}, [idx](detail::Node& s) {
    s.parents[0]->grad_buffer()[idx] += s.grad[0];
  });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  const std::size_t n = a.cols();
  std::vector<double> out;
  out.reserve(idx.size() * n);
  for (std::size_t r : idx) {
    if (r >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.insert(out.end(), a.data().begin() + static_cast<std::ptrdiff_t>(r * n),
               a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  }
  return detail::make_result("gather_rows", idx.size(), n, std::move(out), {a}, [idx, n](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < n; ++j) g[idx[k] * n + j] += s.grad[k * n + j];
  });
}

inline Tensor gather_cols(const Tensor& a, const std::vector<std::size_t>& idx) {
  const std::size_t m = a.rows(), n = a.cols(), k = idx.size();
  std::vector<double> out(m * k);
  for (std::size_t c = 0; c < k; ++c) {
    if (idx[c] >= n) throw ShapeError("gather_cols: index out of range");
    for (std::size_t i = 0; i < m; ++i) out[i * k + c] = a.data()[i * n + idx[c]];
  }
  return detail::make_result("gather_cols", m, k, std::move(out), {a}, [idx, m, n, k](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < m; ++i) g[i * n + idx[c]] += s.grad[i * k + c];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ShapeError("slice_cols: bad range");
  std::vector<std::size_t> idx;
  for (std::size_t c = begin; c < end; ++c) idx.push_back(c);
  return gather_cols(a, idx);
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows: bad range");
  std::vector<std::size_t> idx;
  for (std::size_t r = begin; r < end; ++r) idx.push_back(r);
  return gather_rows(a, idx);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    offsets.push_back(n);
    n += p.cols();
  }
  std::vector<double> out(m * n);
  for (std::size_t t = 0; t < parts.size(); ++t) {
    const std::size_t w = parts[t].cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + offsets[t] + j] = parts[t].data()[i * w + j];
  }
  return detail::make_result_list("concat_cols", m, n, std::move(out), parts, [offsets, m, n](detail::Node& s) {
    for (std::size_t t = 0; t < s.parents.size(); ++t) {
      if (!detail::wants(s, t)) continue;
      auto& g = s.parents[t]->grad_buffer();
      const std::size_t w = s.parents[t]->cols;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += s.grad[i * n + offsets[t] + j];
    }
  });
}

// Assembles 1x1 tensors (row-major) into a rows x cols matrix.
inline Tensor stack_scalars(const std::vector<Tensor>& items, std::size_t rows, std::size_t cols) {
  if (items.size() != rows * cols) throw ShapeError("stack_scalars: count does not match shape");
  std::vector<double> out(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() != 1) throw ShapeError("stack_scalars: expected 1x1 inputs");
    out[i] = items[i].item();
  }
  return detail::make_result_list("stack_scalars", rows, cols, std::move(out), items, [](detail::Node& s) {
    for (std::size_t i = 0; i < s.parents.size(); ++i)
      if (detail::wants(s, i)) s.parents[i]->grad_buffer()[0] += s.grad[i];
  });
}

// ------------------------------------------------------------------ reductions

// Per-row maximum, m x 1. Ties route the gradient to the first maximal column.
inline Tensor max_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw ShapeError("max_rows: empty rows");
  std::vector<double> out(m);
  std::vector<std::size_t> arg(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (a.data()[i * n + j] > a.data()[i * n + best]) best = j;
    arg[i] = best;
    out[i] = a.data()[i * n + best];
  }
  return detail::make_result("max_rows", m, 1, std::move(out), {a}, [arg, n](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[i * n + arg[i]] += s.grad[i];
  });
}

inline Tensor logsumexp_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m);
  std::vector<double> probs(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.data()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.data()[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a.data()[i * n + j] - mx);
    out[i] = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(a.data()[i * n + j] - out[i]);
  }
  return detail::make_result("logsumexp_rows", m, 1, std::move(out), {a}, [probs, n](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < s.rows; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += s.grad[i] * probs[i * n + j];
  });
}

// Row-wise softmax of a / tau.
inline Tensor softmax_rows(const Tensor& a, double tau) {
  if (!(tau > 0.0)) throw ConfigError("softmax: temperature must be positive");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.data()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.data()[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp((a.data()[i * n + j] - mx) / tau);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  std::vector<double> y = out;
  return detail::make_result("softmax", m, n, std::move(out), {a}, [y, n, tau](detail::Node& s) {
    auto& g = s.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < s.rows; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += s.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += y[i * n + j] * (s.grad[i * n + j] - inner) / tau;
    }
  });
}

// Softmax of a plain vector at temperature tau.
inline std::vector<double> softmax_temp(std::span<const double> x, double tau) {
  if (!(tau > 0.0)) throw ConfigError("softmax_temp: temperature must be positive");
  if (x.empty()) throw ShapeError("softmax_temp: empty input");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("softmax_temp: non-finite input");
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp((x[i] - mx) / tau);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

// Row-wise layer normalization with learned gain and bias (both 1 x n).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw ShapeError("layer_norm_rows: gain/bias must be 1 x cols");
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x.data()[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.data()[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x.data()[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = gain.data()[j] * xhat[i * n + j] + bias.data()[j];
    }
  }
  return detail::make_result(
      "layer_norm", m, n, std::move(out), {x, gain, bias}, [xhat, inv_std, m, n](detail::Node& s) {
        const auto& gv = s.parents[1]->value;
        if (detail::wants(s, 0)) {
          auto& g = s.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = s.grad[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = s.grad[i * n + j] * gv[j];
              g[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
        if (detail::wants(s, 1)) {
          auto& g = s.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += s.grad[i * n + j] * xhat[i * n + j];
        }
        if (detail::wants(s, 2)) {
          auto& g = s.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += s.grad[i * n + j];
        }
      });
}

// Pairwise cosine similarity between the rows of a (m x d) and b (n x d):
// a_i . b_j / (max(|a_i|, eps) * max(|b_j|, eps)).
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw ShapeError("cosine: dimension mismatch " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  std::vector<double> na(m), nb(n), out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    na[i] = norm(std::span<const double>(a.data().data() + i * d, d));
  for (std::size_t j = 0; j < n; ++j)
    nb[j] = norm(std::span<const double>(b.data().data() + j * d, d));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double ab = dot(std::span<const double>(a.data().data() + i * d, d),
                            std::span<const double>(b.data().data() + j * d, d));
      out[i * n + j] = ab / (std::max(na[i], kNormEps) * std::max(nb[j], kNormEps));
    }
  std::vector<double> c = out;
  return detail::make_result("cosine", m, n, std::move(out), {a, b}, [na, nb, c, m, n, d](detail::Node& s) {
    const auto& av = s.parents[0]->value;
    const auto& bv = s.parents[1]->value;
    // d c_ij / d a_i = b_j / (Na Nb) - c_ij a_i / |a_i|^2   (second term only when |a_i| > eps)
    if (detail::wants(s, 0)) {
      auto& g = s.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double Na = std::max(na[i], kNormEps);
        const bool live = na[i] > kNormEps;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = s.grad[i * n + j];
          if (gij == 0.0) continue;
          const double Nb = std::max(nb[j], kNormEps);
          for (std::size_t k = 0; k < d; ++k) {
            double v = bv[j * d + k] / (Na * Nb);
            if (live) v -= c[i * n + j] * av[i * d + k] / (na[i] * na[i]);
            g[i * d + k] += gij * v;
          }
        }
      }
    }
    if (detail::wants(s, 1)) {
      auto& g = s.parents[1]->grad_buffer();
      for (std::size_t j = 0; j < n; ++j) {
        const double Nb = std::max(nb[j], kNormEps);
        const bool live = nb[j] > kNormEps;
        for (std::size_t i = 0; i < m; ++i) {
          const double gij = s.grad[i * n + j];
          if (gij == 0.0) continue;
          const double Na = std::max(na[i], kNormEps);
          for (std::size_t k = 0; k < d; ++k) {
            double v = av[i * d + k] / (Na * Nb);
            if (live) v -= c[i * n + j] * bv[j * d + k] / (nb[j] * nb[j]);
            g[j * d + k] += gij * v;
          }
        }
      }
    }
  });
}

// Cosine of two plain vectors with the same eps guard.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  return dot(a, b) / (std::max(norm(a), kNormEps) * std::max(norm(b), kNormEps));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

// ------------------------------------------------------------------- backward

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Interior gradients are recomputed from scratch on every call.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) throw UsageError("backward: loss must be a 1x1 scalar");
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.contains(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf()) n->backward_fn(*n);
  }
}

}  // namespace narvid
