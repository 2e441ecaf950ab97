#pragma once

// Minimal reverse-mode autodiff over 2-D tensors.
//
// A computation builds a graph of reference-counted Nodes; backward() walks
// the graph in reverse topological order and accumulates gradients into every
// node that carries one. Parameters are long-lived nodes shared across many
// graphs; their gradients accumulate until zero_grad(), which is what batch
// accumulation relies on.
//
// Determinism: every reduction here runs in a fixed order. Matrix products go
// through the kernels module, whose parallel path is bitwise identical to the
// serial one, so a whole forward/backward pass is reproducible at any thread
// count. The scalar type is a template parameter: float for training,
// double for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vmlab/kernels.hpp"

namespace vmlab::ad {

class NnError : public std::runtime_error {
 public:
  enum class Kind {
    ShapeMismatch,
    OddModelDim,
    HeadDivisibility,
  };
  NnError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

[[noreturn]] inline void shape_error(const std::string& msg) {
  throw NnError(NnError::Kind::ShapeMismatch, msg);
}

template <typename T>
struct Node {
  std::size_t rows = 0, cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> back;  // pushes this->grad into parents

  Node(std::size_t r, std::size_t c) : rows(r), cols(c), value(r * c, T(0)), grad(r * c, T(0)) {}

  std::size_t size() const { return rows * cols; }
  T& at(std::size_t r, std::size_t c) { return value[r * cols + c]; }
  T at(std::size_t r, std::size_t c) const { return value[r * cols + c]; }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_tensor(std::size_t rows, std::size_t cols) {
  return std::make_shared<Node<T>>(rows, cols);
}

template <typename T>
Var<T> make_tensor(std::size_t rows, std::size_t cols, std::vector<T> values) {
  if (values.size() != rows * cols) shape_error("value buffer does not match shape");
  auto n = std::make_shared<Node<T>>(rows, cols);
  n->value = std::move(values);
  return n;
}

// ---- primitive ops ---------------------------------------------------------

/// C = A * B
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a->cols != b->rows)
    shape_error("matmul: " + std::to_string(a->cols) + " vs " + std::to_string(b->rows));
  auto out = make_tensor<T>(a->rows, b->cols);
  kern::matmul_nn(a->value.data(), b->value.data(), out->value.data(), a->rows,
                  a->cols, b->cols);
  out->parents = {a, b};
  out->back = [a, b](Node<T>& o) {
    // dA += dC * B^T ; dB += A^T * dC
    kern::matmul_nt(o.grad.data(), b->value.data(), a->grad.data(), o.rows,
                    o.cols, b->rows, /*accumulate=*/true);
    kern::matmul_tn(a->value.data(), o.grad.data(), b->grad.data(), a->cols,
                    a->rows, o.cols, /*accumulate=*/true);
  };
  return out;
}

/// C = A * B^T  (a: n x k, b: m x k -> n x m)
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a->cols != b->cols)
    shape_error("matmul_nt: " + std::to_string(a->cols) + " vs " + std::to_string(b->cols));
  auto out = make_tensor<T>(a->rows, b->rows);
  kern::matmul_nt(a->value.data(), b->value.data(), out->value.data(), a->rows,
                  a->cols, b->rows);
  out->parents = {a, b};
  out->back = [a, b](Node<T>& o) {
    // dA += dC * B ; dB += dC^T * A
    kern::matmul_nn(o.grad.data(), b->value.data(), a->grad.data(), o.rows,
                    o.cols, b->cols, /*accumulate=*/true);
    kern::matmul_tn(o.grad.data(), a->value.data(), b->grad.data(), o.cols,
                    o.rows, a->cols, /*accumulate=*/true);
  };
  return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("add: shape mismatch");
  auto out = make_tensor<T>(a->rows, a->cols);
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
  out->parents = {a, b};
  out->back = [a, b](Node<T>& o) {
    for (std::size_t i = 0; i < o.size(); ++i) {
      a->grad[i] += o.grad[i];
      b->grad[i] += o.grad[i];
    }
  };
  return out;
}

/// x[i,:] + v  with v a 1 x d row vector (bias broadcast).
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  if (v->rows != 1 || v->cols != x->cols) shape_error("add_rowvec: bias shape");
  auto out = make_tensor<T>(x->rows, x->cols);
  for (std::size_t i = 0; i < x->rows; ++i)
    for (std::size_t j = 0; j < x->cols; ++j)
      out->at(i, j) = x->at(i, j) + v->value[j];
  out->parents = {x, v};
  out->back = [x, v](Node<T>& o) {
    for (std::size_t i = 0; i < o.size(); ++i) x->grad[i] += o.grad[i];
    for (std::size_t i = 0; i < o.rows; ++i)
      for (std::size_t j = 0; j < o.cols; ++j) v->grad[j] += o.grad[i * o.cols + j];
  };
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  auto out = make_tensor<T>(x->rows, x->cols);
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = x->value[i] * s;
  out->parents = {x};
  out->back = [x, s](Node<T>& o) {
    for (std::size_t i = 0; i < o.size(); ++i) x->grad[i] += o.grad[i] * s;
  };
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  auto out = make_tensor<T>(x->rows, x->cols);
  for (std::size_t i = 0; i < x->size(); ++i)
    out->value[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  out->parents = {x};
  out->back = [x](Node<T>& o) {
    for (std::size_t i = 0; i < o.size(); ++i)
      if (x->value[i] > T(0)) x->grad[i] += o.grad[i];
  };
  return out;
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  auto out = make_tensor<T>(x->rows, x->cols);
  for (std::size_t i = 0; i < x->size(); ++i)
    out->value[i] = T(1) / (T(1) + std::exp(-x->value[i]));
  out->parents = {x};
  out->back = [x](Node<T>& o) {
    for (std::size_t i = 0; i < o.size(); ++i) {
      const T y = o.value[i];
      x->grad[i] += o.grad[i] * y * (T(1) - y);
    }
  };
  return out;
}

/// Per-last-axis normalization then affine: gain * (x - mean)/sqrt(var + eps) + bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  if (gain->rows != 1 || gain->cols != x->cols || bias->rows != 1 || bias->cols != x->cols)
    shape_error("layer_norm: gain/bias shape");
  const std::size_t n = x->rows, d = x->cols;
  auto out = make_tensor<T>(n, d);
  auto xhat = std::make_shared<std::vector<T>>(n * d);
  auto inv_std = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += x->at(i, j);
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x->at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (x->at(i, j) - mean) * is;
      (*xhat)[i * d + j] = xh;
      out->at(i, j) = gain->value[j] * xh + bias->value[j];
    }
  }
  out->parents = {x, gain, bias};
  out->back = [x, gain, bias, xhat, inv_std](Node<T>& o) {
    const std::size_t n = o.rows, d = o.cols;
    for (std::size_t i = 0; i < n; ++i) {
      // dxhat_j = dy_j * gain_j; then the standard layer-norm backward.
      T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        const T dy = o.grad[i * d + j];
        const T xh = (*xhat)[i * d + j];
        const T dxh = dy * gain->value[j];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xh;
        gain->grad[j] += dy * xh;
        bias->grad[j] += dy;
      }
      const T is = (*inv_std)[i];
      const T inv_d = T(1) / static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const T dy = o.grad[i * d + j];
        const T xh = (*xhat)[i * d + j];
        const T dxh = dy * gain->value[j];
        x->grad[i * d + j] += is * (dxh - inv_d * sum_dxhat - xh * inv_d * sum_dxhat_xhat);
      }
    }
  };
  return out;
}

/// Row-wise softmax. When key_valid is given (size = cols), invalid keys get
/// probability exactly zero, as if their logits were -inf.
template <typename T>
Var<T> softmax_rows(const Var<T>& x, const std::vector<std::uint8_t>* key_valid = nullptr) {
  if (key_valid && key_valid->size() != x->cols)
    shape_error("softmax_rows: mask length");
  const std::size_t n = x->rows, d = x->cols;
  auto out = make_tensor<T>(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < d; ++j)
      if (!key_valid || (*key_valid)[j]) mx = std::max(mx, x->at(i, j));
    T denom = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T e = (!key_valid || (*key_valid)[j]) ? std::exp(x->at(i, j) - mx) : T(0);
      out->at(i, j) = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::size_t j = 0; j < d; ++j) out->at(i, j) *= inv;
  }
  out->parents = {x};
  out->back = [x](Node<T>& o) {
    const std::size_t n = o.rows, d = o.cols;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += o.grad[i * d + j] * o.value[i * d + j];
      for (std::size_t j = 0; j < d; ++j)
        x->grad[i * d + j] += o.value[i * d + j] * (o.grad[i * d + j] - dot);
    }
  };
  return out;
}

/// Columns [c0, c0+width) of x.
template <typename T>
Var<T> col_slice(const Var<T>& x, std::size_t c0, std::size_t width) {
  if (c0 + width > x->cols) shape_error("col_slice: out of range");
  auto out = make_tensor<T>(x->rows, width);
  for (std::size_t i = 0; i < x->rows; ++i)
    for (std::size_t j = 0; j < width; ++j) out->at(i, j) = x->at(i, c0 + j);
  out->parents = {x};
  out->back = [x, c0, width](Node<T>& o) {
    for (std::size_t i = 0; i < o.rows; ++i)
      for (std::size_t j = 0; j < width; ++j)
        x->grad[i * x->cols + c0 + j] += o.grad[i * width + j];
  };
  return out;
}

/// Horizontal concatenation of equally-tall blocks.
template <typename T>
Var<T> col_concat(const std::vector<Var<T>>& xs) {
  if (xs.empty()) shape_error("col_concat: empty list");
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x->rows != xs[0]->rows) shape_error("col_concat: row mismatch");
    total += x->cols;
  }
  auto out = make_tensor<T>(xs[0]->rows, total);
  std::size_t off = 0;
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < x->rows; ++i)
      for (std::size_t j = 0; j < x->cols; ++j) out->at(i, off + j) = x->at(i, j);
    off += x->cols;
  }
  out->parents.assign(xs.begin(), xs.end());
  out->back = [xs](Node<T>& o) {
    std::size_t off = 0;
    for (const auto& x : xs) {
      for (std::size_t i = 0; i < x->rows; ++i)
        for (std::size_t j = 0; j < x->cols; ++j)
          x->grad[i * x->cols + j] += o.grad[i * o.cols + off + j];
      off += x->cols;
    }
  };
  return out;
}

/// Column means: n x d -> 1 x d.
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  const std::size_t n = x->rows, d = x->cols;
  auto out = make_tensor<T>(1, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out->value[j] += x->at(i, j);
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t j = 0; j < d; ++j) out->value[j] *= inv;
  out->parents = {x};
  out->back = [x, inv](Node<T>& o) {
    for (std::size_t i = 0; i < x->rows; ++i)
      for (std::size_t j = 0; j < x->cols; ++j)
        x->grad[i * x->cols + j] += o.grad[j] * inv;
  };
  return out;
}

/// Mean binary cross-entropy against fixed 0/1 targets, with probabilities
/// clamped to [1e-7, 1 - 1e-7]. Clamped entries get zero gradient.
template <typename T>
Var<T> bce(const Var<T>& probs, const std::vector<T>& targets) {
  if (probs->size() != targets.size()) shape_error("bce: target count");
  const std::size_t n = targets.size();
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  auto out = make_tensor<T>(1, 1);
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::min(hi, std::max(lo, probs->value[i]));
    const T t = targets[i];
    acc += -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
  }
  out->value[0] = acc / static_cast<T>(n);
  out->parents = {probs};
  out->back = [probs, targets, lo, hi](Node<T>& o) {
    const T g = o.grad[0] / static_cast<T>(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const T raw = probs->value[i];
      if (raw < lo || raw > hi) continue;  // clamped: flat region
      const T t = targets[i];
      probs->grad[i] += g * (-(t / raw) + (T(1) - t) / (T(1) - raw));
    }
  };
  return out;
}

// ---- graph execution -------------------------------------------------------

template <typename T>
void topo_order(const Var<T>& root, std::vector<Node<T>*>& order) {
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Var<T>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto child = node->parents[next++];
      if (seen.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node.get());
      stack.pop_back();
    }
  }
}

/// Reverse-mode sweep from a scalar root. Gradients accumulate; call
/// zero_grad on persistent parameters between steps.
template <typename T>
void backward(const Var<T>& root) {
  if (root->size() != 1) shape_error("backward: root must be scalar");
  std::vector<Node<T>*> order;
  topo_order(root, order);
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->back) (*it)->back(**it);
}

template <typename T>
void zero_grad(const std::vector<Var<T>>& params) {
  for (const auto& p : params) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

}  // namespace vmlab::ad
