#pragma once

// Layers and optimizer built on the autodiff core: linear, sinusoidal
// positional encoding, multi-head self-attention, pre-norm encoder layer,
// Adam. Parameter structs hold shared Vars so one parameter set can be wired
// into many graphs (one per sequence) while gradients accumulate in place.

#include <cmath>
#include <cstdint>
#include <vector>

#include "vmlab/rng.hpp"
#include "vmlab/tensor.hpp"

namespace vmlab::ad {

template <typename T>
struct LinearParams {
  Var<T> w;  // d_in x d_out
  Var<T> b;  // 1 x d_out
};

template <typename T>
struct LayerNormParams {
  Var<T> gain;  // 1 x d
  Var<T> bias;  // 1 x d
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;  // all d x d
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  LinearParams<T> ffn1, ffn2;  // d -> hidden -> d
};

template <typename T>
LinearParams<T> make_linear(std::size_t d_in, std::size_t d_out) {
  return {make_tensor<T>(d_in, d_out), make_tensor<T>(1, d_out)};
}

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t d) {
  auto p = LayerNormParams<T>{make_tensor<T>(1, d), make_tensor<T>(1, d)};
  std::fill(p.gain->value.begin(), p.gain->value.end(), T(1));
  return p;
}

/// Uniform init in [-bound, bound] with bound = 1/sqrt(fan_in). Draws are
/// doubles from the pinned stream, then narrowed, so float and double builds
/// see the same underlying sequence.
template <typename T>
void init_uniform(const Var<T>& w, Rng& rng, double bound) {
  for (auto& x : w->value) x = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void init_linear(LinearParams<T>& p, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.w->rows));
  init_uniform(p.w, rng, bound);
  init_uniform(p.b, rng, bound);
}

template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p) {
  return add_rowvec(matmul(x, p.w), p.b);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gain, p.bias);
}

/// Constant sinusoidal position table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)). Angles are computed in double
/// regardless of T.
template <typename T>
Var<T> positional_encoding(std::size_t seq_len, std::size_t d_model) {
  if (d_model % 2 != 0)
    throw NnError(NnError::Kind::OddModelDim,
                  "positional encoding needs an even model width, got " +
                      std::to_string(d_model));
  auto pe = make_tensor<T>(seq_len, d_model);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double freq =
          std::pow(10000.0, -(2.0 * static_cast<double>(i)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * freq;
      pe->at(pos, 2 * i) = static_cast<T>(std::sin(angle));
      pe->at(pos, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

/// Scaled dot-product attention over n_heads head slices, concatenated and
/// output-projected. key_valid, when given, removes padded key positions from
/// every softmax (their weights become exactly zero).
template <typename T>
Var<T> multi_head_self_attention(const Var<T>& x, const AttentionParams<T>& p,
                                 std::size_t n_heads,
                                 const std::vector<std::uint8_t>* key_valid = nullptr) {
  const std::size_t d = x->cols;
  if (n_heads == 0 || d % n_heads != 0)
    throw NnError(NnError::Kind::HeadDivisibility,
                  "model width " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  const T inv_sqrt_dh = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

  const auto q = linear(x, p.q);
  const auto k = linear(x, p.k);
  const auto v = linear(x, p.v);

  std::vector<Var<T>> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto qh = col_slice(q, h * dh, dh);
    const auto kh = col_slice(k, h * dh, dh);
    const auto vh = col_slice(v, h * dh, dh);
    const auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    const auto weights = softmax_rows(scores, key_valid);
    heads.push_back(matmul(weights, vh));
  }
  return linear(col_concat(heads), p.out);
}

/// Pre-norm encoder block: x + Attn(LN(x)), then y + FFN(LN(y)),
/// FFN = linear -> ReLU -> linear.
template <typename T>
Var<T> encoder_layer(const Var<T>& x, const EncoderLayerParams<T>& p,
                     std::size_t n_heads,
                     const std::vector<std::uint8_t>* key_valid = nullptr) {
  const auto y = add(x, multi_head_self_attention(layer_norm(x, p.ln1), p.attn,
                                                  n_heads, key_valid));
  return add(y, linear(relu(linear(layer_norm(y, p.ln2), p.ffn1)), p.ffn2));
}

/// Adam with bias correction: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Var<T>> params, T lr, T beta1 = T(0.9),
                T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  /// One update from the gradients currently held by the parameters.
  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = *params_[pi];
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const T g = p.grad[i];
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
        const T m_hat = m[i] / bc1;
        const T v_hat = v[i] / bc2;
        p.value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
      }
    }
  }

  long step_count() const { return t_; }
  const std::vector<Var<T>>& params() const { return params_; }

 private:
  std::vector<Var<T>> params_;
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace vmlab::ad
