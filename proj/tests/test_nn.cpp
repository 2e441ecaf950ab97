#include "vmlab/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "vmlab/rng.hpp"

using namespace vmlab;
using namespace vmlab::ad;

namespace {

using D = double;

Var<D> rand_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  auto t = make_tensor<D>(r, c);
  for (auto& x : t->value) x = rng.uniform(lo, hi);
  return t;
}

// Central-difference gradient check, h = 1e-3. Relative error floor 1e-2 in
// the denominator keeps finite-difference noise from dominating gradients
// that are legitimately near zero.
void check_grads(const std::vector<Var<D>>& params,
                 const std::function<Var<D>()>& f, double tol = 1e-4) {
  const double h = 1e-3;
  zero_grad(params);
  backward(f());
  std::vector<std::vector<D>> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const D saved = p.value[i];
      p.value[i] = saved + h;
      const D fp = f()->value[0];
      p.value[i] = saved - h;
      const D fm = f()->value[0];
      p.value[i] = saved;
      const D num = (fp - fm) / (2 * h);
      const D ana = analytic[pi][i];
      const D rel = std::abs(num - ana) /
                    std::max({std::abs(num), std::abs(ana), 1e-2});
      ASSERT_LE(rel, tol) << "param " << pi << " elem " << i << ": numeric "
                          << num << " vs analytic " << ana;
    }
  }
}

// Hand-rolled attention reference: plain loops, no autodiff machinery.
std::vector<double> reference_mhsa(const std::vector<double>& x, std::size_t n,
                                   std::size_t d, std::size_t heads,
                                   const AttentionParams<D>& p) {
  auto apply_linear = [&](const std::vector<double>& in, const Var<D>& w,
                          const Var<D>& b) {
    std::vector<double> out(n * w->cols, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w->cols; ++j) {
        double acc = b->value[j];
        for (std::size_t k = 0; k < d; ++k)
          acc += in[i * d + k] * w->value[k * w->cols + j];
        out[i * w->cols + j] = acc;
      }
    return out;
  };
  const auto q = apply_linear(x, p.q.w, p.q.b);
  const auto k = apply_linear(x, p.k.w, p.k.b);
  const auto v = apply_linear(x, p.v.w, p.v.b);
  const std::size_t dh = d / heads;
  std::vector<double> concat(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c)
          dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        logits[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double denom = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double w_ij = logits[j] / denom;
        for (std::size_t c = 0; c < dh; ++c)
          concat[i * d + h * dh + c] += w_ij * v[j * d + h * dh + c];
      }
    }
  }
  return apply_linear(concat, p.out.w, p.out.b);
}

AttentionParams<D> rand_attention(std::size_t d, Rng& rng) {
  AttentionParams<D> p{make_linear<D>(d, d), make_linear<D>(d, d),
                       make_linear<D>(d, d), make_linear<D>(d, d)};
  for (auto* lp : {&p.q, &p.k, &p.v, &p.out}) init_linear(*lp, rng);
  return p;
}

std::vector<Var<D>> attention_vars(const AttentionParams<D>& p) {
  return {p.q.w, p.q.b, p.k.w, p.k.b, p.v.w, p.v.b, p.out.w, p.out.b};
}

}  // namespace

TEST(Linear, IdentityWeightsPassThrough) {
  auto x = make_tensor<D>(2, 3, {1, 2, 3, 4, 5, 6});
  auto p = make_linear<D>(3, 3);
  for (int i = 0; i < 3; ++i) p.w->at(i, i) = 1;
  const auto y = linear(x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y->value[i], x->value[i]);
}

TEST(Linear, HandArithmetic) {
  auto x = make_tensor<D>(1, 2, {1, 2});
  auto p = make_linear<D>(2, 1);
  p.w->value = {1, 1};
  p.b->value = {1};
  EXPECT_DOUBLE_EQ(linear(x, p)->value[0], 4.0);
}

TEST(Linear, ShapeMismatchThrows) {
  auto x = make_tensor<D>(1, 3);
  auto p = make_linear<D>(2, 1);
  try {
    linear(x, p);
    FAIL() << "expected ShapeMismatch";
  } catch (const NnError& e) {
    EXPECT_EQ(e.kind(), NnError::Kind::ShapeMismatch);
  }
}

TEST(Linear, GradientCheck) {
  Rng rng(1);
  auto x = rand_tensor(3, 4, rng);
  auto p = make_linear<D>(4, 2);
  init_linear(p, rng);
  auto w = make_tensor<D>(2, 1, {0.7, -1.3});
  check_grads({x, p.w, p.b}, [&] { return matmul(mean_rows(linear(x, p)), w); });
}

TEST(LayerNorm, ConstantRowGoesToZero) {
  auto x = make_tensor<D>(1, 3, {5, 5, 5});
  auto p = make_layer_norm<D>(3);
  const auto y = layer_norm(x, p);
  for (auto v : y->value) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalizedRowAlmostUnchanged) {
  auto x = make_tensor<D>(1, 2, {1, -1});
  auto p = make_layer_norm<D>(2);
  const auto y = layer_norm(x, p);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);  // eps inside the sqrt
  EXPECT_DOUBLE_EQ(y->value[0], expect);
  EXPECT_DOUBLE_EQ(y->value[1], -expect);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Rng rng(3);
  auto x = rand_tensor(4, 5, rng);
  auto p = make_layer_norm<D>(5);
  std::fill(p.gain->value.begin(), p.gain->value.end(), 0.0);
  p.bias->value = {1, 2, 3, 4, 5};
  const auto y = layer_norm(x, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_DOUBLE_EQ(y->at(i, j), static_cast<double>(j + 1));
}

TEST(LayerNorm, RowMeansNearZero) {
  Rng rng(4);
  auto x = rand_tensor(8, 16, rng, -3, 3);
  auto p = make_layer_norm<D>(16);
  const auto y = layer_norm(x, p);
  for (std::size_t i = 0; i < 8; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < 16; ++j) mean += y->at(i, j);
    EXPECT_NEAR(mean / 16, 0.0, 1e-6);
  }
}

TEST(LayerNorm, GradientCheck) {
  Rng rng(5);
  auto x = rand_tensor(3, 6, rng);
  auto p = make_layer_norm<D>(6);
  init_uniform(p.gain, rng, 1.0);
  init_uniform(p.bias, rng, 0.5);
  auto w = make_tensor<D>(6, 1, {1, -2, 3, 0.5, -0.5, 2});
  check_grads({x, p.gain, p.bias},
              [&] { return matmul(mean_rows(layer_norm(x, p)), w); });
}

TEST(PositionalEncoding, RowZeroAlternates) {
  const auto pe = positional_encoding<D>(4, 8);
  for (std::size_t j = 0; j < 8; j += 2) {
    EXPECT_DOUBLE_EQ(pe->at(0, j), 0.0);
    EXPECT_DOUBLE_EQ(pe->at(0, j + 1), 1.0);
  }
}

TEST(PositionalEncoding, KnownValues) {
  const auto pe = positional_encoding<D>(2, 24);
  EXPECT_NEAR(pe->at(1, 0), 0.8414709848, 1e-10);  // sin(1)
  EXPECT_NEAR(pe->at(1, 1), 0.5403023059, 1e-10);  // cos(1)
  // pair i=1: angle = 1 / 10000^(2/24)
  const double angle = 1.0 / std::pow(10000.0, 2.0 / 24.0);
  EXPECT_NEAR(pe->at(1, 2), std::sin(angle), 1e-12);
  EXPECT_NEAR(pe->at(1, 3), std::cos(angle), 1e-12);
}

TEST(PositionalEncoding, OddWidthRejected) {
  try {
    positional_encoding<D>(4, 3);
    FAIL() << "expected OddModelDim";
  } catch (const NnError& e) {
    EXPECT_EQ(e.kind(), NnError::Kind::OddModelDim);
  }
}

TEST(Softmax, RowsSumToOneAndNonNegative) {
  Rng rng(6);
  auto x = rand_tensor(5, 9, rng, -30, 30);
  const auto y = softmax_rows(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(y->at(i, j), 0.0);
      sum += y->at(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, GradientCheck) {
  Rng rng(7);
  auto x = rand_tensor(3, 4, rng);
  auto w = make_tensor<D>(4, 1, {0.3, -1.1, 2.0, 0.9});
  check_grads({x}, [&] { return matmul(mean_rows(softmax_rows(x)), w); });
}

TEST(ReluSigmoid, GradientCheck) {
  Rng rng(8);
  // Keep inputs away from the ReLU kink relative to h=1e-3.
  auto x = make_tensor<D>(2, 4);
  for (auto& v : x->value) {
    v = rng.uniform(0.05, 1.0);
    if (rng.next_below(2)) v = -v;
  }
  auto w = make_tensor<D>(4, 1, {1, 2, -1, 0.5});
  check_grads({x}, [&] { return matmul(mean_rows(sigmoid(relu(x))), w); });
}

TEST(Attention, SinglePositionIsValueProjection) {
  Rng rng(9);
  const std::size_t d = 8;
  auto p = rand_attention(d, rng);
  auto x = rand_tensor(1, d, rng);
  const auto y = multi_head_self_attention(x, p, 2);
  // softmax over one key has weight 1: output = out(v(x)).
  const auto v = linear(x, p.v);
  const auto expect = linear(v, p.out);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(y->value[j], expect->value[j], 1e-12);
}

TEST(Attention, AllMaskedButOneKeyGetsFullWeight) {
  Rng rng(10);
  const std::size_t n = 5, d = 8;
  auto p = rand_attention(d, rng);
  auto x = rand_tensor(n, d, rng);
  std::vector<std::uint8_t> mask(n, 0);
  mask[3] = 1;
  const auto y = multi_head_self_attention(x, p, 2, &mask);
  // Every query attends only to key 3: rows all equal out(v(x))[3].
  const auto v = linear(x, p.v);
  const auto expect = linear(v, p.out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      EXPECT_NEAR(y->at(i, j), expect->at(3, j), 1e-12) << i << "," << j;
}

TEST(Attention, MatchesIndependentReference) {
  Rng rng(11);
  const std::size_t n = 4, d = 8;
  auto p = rand_attention(d, rng);
  auto x = rand_tensor(n, d, rng);
  const auto got = multi_head_self_attention(x, p, 2);
  const auto want = reference_mhsa(x->value, n, d, 2, p);
  for (std::size_t i = 0; i < n * d; ++i) EXPECT_NEAR(got->value[i], want[i], 1e-12);
}

TEST(Attention, HeadDivisibilityEnforced) {
  Rng rng(12);
  auto p = rand_attention(8, rng);
  auto x = rand_tensor(2, 8, rng);
  try {
    multi_head_self_attention(x, p, 3);
    FAIL() << "expected HeadDivisibility";
  } catch (const NnError& e) {
    EXPECT_EQ(e.kind(), NnError::Kind::HeadDivisibility);
  }
}

TEST(Attention, GradientCheck) {
  Rng rng(13);
  const std::size_t n = 3, d = 4;
  auto p = rand_attention(d, rng);
  auto x = rand_tensor(n, d, rng);
  auto w = make_tensor<D>(d, 1, {1, -1, 0.5, 2});
  auto vars = attention_vars(p);
  vars.push_back(x);
  check_grads(vars, [&] {
    return matmul(mean_rows(multi_head_self_attention(x, p, 2)), w);
  });
}

namespace {

EncoderLayerParams<D> rand_encoder(std::size_t d, std::size_t hidden, Rng& rng) {
  EncoderLayerParams<D> p{make_layer_norm<D>(d), make_layer_norm<D>(d),
                          rand_attention(d, rng), make_linear<D>(d, hidden),
                          make_linear<D>(hidden, d)};
  init_linear(p.ffn1, rng);
  init_linear(p.ffn2, rng);
  return p;
}

std::vector<Var<D>> encoder_vars(const EncoderLayerParams<D>& p) {
  auto vars = attention_vars(p.attn);
  for (const auto& v : {p.ln1.gain, p.ln1.bias, p.ln2.gain, p.ln2.bias, p.ffn1.w,
                        p.ffn1.b, p.ffn2.w, p.ffn2.b})
    vars.push_back(v);
  return vars;
}

}  // namespace

TEST(EncoderLayer, ZeroInputZeroOutProjectionsGiveZero) {
  Rng rng(14);
  auto p = rand_encoder(6, 10, rng);
  // Zero the residual writers: attention output projection and FFN down
  // projection (weights and biases).
  std::fill(p.attn.out.w->value.begin(), p.attn.out.w->value.end(), 0.0);
  std::fill(p.attn.out.b->value.begin(), p.attn.out.b->value.end(), 0.0);
  std::fill(p.ffn2.w->value.begin(), p.ffn2.w->value.end(), 0.0);
  std::fill(p.ffn2.b->value.begin(), p.ffn2.b->value.end(), 0.0);
  auto x = make_tensor<D>(4, 6);
  const auto y = encoder_layer(x, p, 2);
  for (auto v : y->value) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(EncoderLayer, GradientCheck) {
  Rng rng(15);
  const std::size_t n = 8, d = 6;
  auto p = rand_encoder(d, 5, rng);
  auto x = rand_tensor(n, d, rng);
  auto w = make_tensor<D>(d, 1, {1, -1, 0.5, 2, -0.3, 0.8});
  auto vars = encoder_vars(p);
  vars.push_back(x);
  check_grads(vars, [&] { return matmul(mean_rows(encoder_layer(x, p, 2)), w); });
}

TEST(EncoderLayer, StackingIsComposition) {
  Rng rng(16);
  auto p1 = rand_encoder(6, 8, rng);
  auto p2 = rand_encoder(6, 8, rng);
  auto x = rand_tensor(3, 6, rng);
  const auto composed = encoder_layer(encoder_layer(x, p1, 2), p2, 2);
  auto mid = encoder_layer(x, p1, 2);
  const auto stepwise = encoder_layer(mid, p2, 2);
  for (std::size_t i = 0; i < composed->size(); ++i)
    EXPECT_DOUBLE_EQ(composed->value[i], stepwise->value[i]);
}

TEST(Bce, HalfProbabilityIsLnTwo) {
  auto p = make_tensor<D>(2, 1, {0.5, 0.5});
  EXPECT_NEAR(bce(p, {1.0, 0.0})->value[0], std::log(2.0), 1e-12);
}

TEST(Bce, PerfectPredictionNearZero) {
  auto p = make_tensor<D>(2, 1, {1.0, 0.0});
  EXPECT_NEAR(bce(p, {1.0, 0.0})->value[0], 0.0, 1e-6);
}

TEST(Bce, KnownValue) {
  auto p = make_tensor<D>(1, 1, {0.9});
  EXPECT_NEAR(bce(p, {0.0})->value[0], 2.302585092994046, 1e-9);
}

TEST(Bce, GradientCheck) {
  auto p = make_tensor<D>(3, 1, {0.2, 0.7, 0.45});
  check_grads({p}, [&] { return bce(p, {1.0, 0.0, 1.0}); });
}

TEST(Bce, ClampedRegionHasZeroGradient) {
  auto p = make_tensor<D>(1, 1, {1.5});
  auto loss = bce(p, {0.0});
  backward(loss);
  EXPECT_DOUBLE_EQ(p->grad[0], 0.0);
}

TEST(Adam, ClosedFormFirstStep) {
  auto p = make_tensor<D>(1, 1, {1.0});
  Adam<D> opt({p}, 0.1);
  p->grad[0] = 1.0;
  opt.step();
  // m_hat = v_hat = 1 at t=1, so delta = -lr / (1 + eps).
  EXPECT_NEAR(p->value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientNoMove) {
  auto p = make_tensor<D>(2, 2, {1, 2, 3, 4});
  Adam<D> opt({p}, 0.1);
  opt.step();
  EXPECT_EQ(p->value, (std::vector<D>{1, 2, 3, 4}));
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(77);
    auto p = make_tensor<D>(3, 3);
    init_uniform(p, rng, 0.5);
    Adam<D> opt({p}, 0.01);
    for (int step = 0; step < 5; ++step) {
      zero_grad<D>({p});
      auto w = make_tensor<D>(3, 1, {1, 2, 3});
      backward(matmul(mean_rows(relu(p)), w));
      opt.step();
    }
    return p->value;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);  // element-wise bitwise equality via operator==
}

TEST(Graph, DiamondAccumulatesBothPaths) {
  auto x = make_tensor<D>(1, 1, {3.0});
  // y = 2x + relu(x): dy/dx = 3 for x > 0
  auto y = add(scale(x, 2.0), relu(x));
  backward(y);
  EXPECT_DOUBLE_EQ(x->grad[0], 3.0);
}

TEST(Graph, BackwardRequiresScalarRoot) {
  auto x = make_tensor<D>(2, 2);
  EXPECT_THROW(backward(x), NnError);
}

TEST(MeanRows, AveragesColumns) {
  auto x = make_tensor<D>(2, 3, {1, 2, 3, 3, 4, 5});
  const auto y = mean_rows(x);
  EXPECT_DOUBLE_EQ(y->value[0], 2.0);
  EXPECT_DOUBLE_EQ(y->value[1], 3.0);
  EXPECT_DOUBLE_EQ(y->value[2], 4.0);
}

TEST(ColOps, SliceConcatRoundTrip) {
  Rng rng(17);
  auto x = rand_tensor(3, 6, rng);
  auto a = col_slice(x, 0, 2);
  auto b = col_slice(x, 2, 4);
  auto back = col_concat<D>({a, b});
  EXPECT_EQ(back->value, x->value);
}
