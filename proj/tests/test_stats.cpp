#include "vmlab/stats.hpp"

#include <gmpxx.h>
#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vmlab/rng.hpp"

using vmlab::FeatureMatrix;
using vmlab::Rng;
using namespace vmlab::stats;

namespace {

// Big-rational oracle for P(X >= k), p0 = nu/de. Everything stays an exact
// integer until one final rational-to-double conversion.
double oracle_binom(unsigned long n, unsigned long k, unsigned long nu,
                    unsigned long de) {
  mpz_class num = 0;
  for (unsigned long i = k; i <= n; ++i) {
    mpz_class c, a, b;
    mpz_bin_uiui(c.get_mpz_t(), n, i);
    mpz_ui_pow_ui(a.get_mpz_t(), nu, i);
    mpz_ui_pow_ui(b.get_mpz_t(), de - nu, n - i);
    num += c * a * b;
  }
  mpz_class den;
  mpz_ui_pow_ui(den.get_mpz_t(), de, n);
  mpq_class q(num, den);
  q.canonicalize();
  return q.get_d();
}

// Average ranks of |d|, O(m^2) counting (deliberately unlike the sort-based
// ranking in the implementation).
std::vector<double> oracle_ranks(const std::vector<double>& d) {
  std::vector<double> rank(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t less = 0, eq = 0;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (std::fabs(d[j]) < std::fabs(d[i])) ++less;
      else if (std::fabs(d[j]) == std::fabs(d[i])) ++eq;
    }
    rank[i] = static_cast<double>(less) + 0.5 * static_cast<double>(eq + 1);
  }
  return rank;
}

// Exhaustive two-sided Wilcoxon: every one of the 2^m sign assignments is
// enumerated literally. Rank sums are multiples of 0.5 below 2^10, so the
// double comparisons below are exact.
double oracle_wilcoxon(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const std::size_t m = d.size();
  const std::vector<double> rank = oracle_ranks(d);
  double w = 0;
  for (std::size_t i = 0; i < m; ++i)
    if (d[i] > 0) w += rank[i];
  std::uint64_t le = 0, ge = 0;
  const std::uint64_t total = std::uint64_t{1} << m;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < m; ++i)
      if ((mask >> i) & 1) s += rank[i];
    if (s <= w) ++le;
    if (s >= w) ++ge;
  }
  const double p =
      2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(total);
  return std::min(1.0, p);
}

// Test-local normal approximation (tie-corrected variance, 0.5 continuity
// correction toward the mean), for the crossover comparison at m = 20.
double approx_wilcoxon(const std::vector<double>& d) {
  const std::vector<double> rank = oracle_ranks(d);
  const double m = static_cast<double>(d.size());
  double w = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) w += rank[i];
  double var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0;
  // tie sizes: count how many share each |d| value, once per group
  std::vector<bool> seen(d.size(), false);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (seen[i]) continue;
    double t = 0;
    for (std::size_t j = 0; j < d.size(); ++j)
      if (std::fabs(d[j]) == std::fabs(d[i])) {
        t += 1.0;
        seen[j] = true;
      }
    var -= (t * t * t - t) / 48.0;
  }
  double z = w - m * (m + 1.0) / 4.0;
  z -= z > 0 ? 0.5 : (z < 0 ? -0.5 : 0.0);
  z /= std::sqrt(var);
  return std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
}

StatsError::Kind thrown_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const StatsError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a StatsError";
  return StatsError::Kind::DomainError;
}

}  // namespace

TEST(Binomial, SpecExamples) {
  EXPECT_DOUBLE_EQ(binomial_p(10, 10), 1.0 / 1024.0);
  EXPECT_EQ(binomial_p(1, 0), 1.0);
  const double orc = oracle_binom(100, 55, 1, 2);
  EXPECT_NEAR(binomial_p(100, 55), orc, orc * 1e-13);
}

TEST(Binomial, OracleAgreementExhaustiveSmall) {
  for (unsigned long n = 1; n <= 64; ++n) {
    for (unsigned long k = 0; k <= n; ++k) {
      const double orc = oracle_binom(n, k, 1, 2);
      const double got = binomial_p(n, k);
      ASSERT_LE(std::fabs(got - orc), orc * 1e-12)
          << "n=" << n << " k=" << k << " got=" << got << " oracle=" << orc;
    }
  }
}

TEST(Binomial, OracleAgreementOtherP0) {
  for (unsigned long n = 1; n <= 40; ++n) {
    for (unsigned long k = 0; k <= n; ++k) {
      const double o25 = oracle_binom(n, k, 1, 4);
      const double o75 = oracle_binom(n, k, 3, 4);
      ASSERT_LE(std::fabs(binomial_p(n, k, 0.25) - o25), o25 * 1e-12)
          << "p0=0.25 n=" << n << " k=" << k;
      ASSERT_LE(std::fabs(binomial_p(n, k, 0.75) - o75), o75 * 1e-12)
          << "p0=0.75 n=" << n << " k=" << k;
    }
  }
}

TEST(Binomial, OracleAgreementLargeN) {
  const unsigned long ks1000[] = {450, 500, 550, 600, 999, 1000};
  for (unsigned long k : ks1000) {
    const double orc = oracle_binom(1000, k, 1, 2);
    EXPECT_NEAR(binomial_p(1000, k), orc, orc * 1e-9) << "n=1000 k=" << k;
  }
  const unsigned long ks10000[] = {5000, 5100, 6000};
  for (unsigned long k : ks10000) {
    const double orc = oracle_binom(10000, k, 1, 2);
    EXPECT_NEAR(binomial_p(10000, k), orc, orc * 1e-9) << "n=10000 k=" << k;
  }
}

TEST(Binomial, MonotoneInK) {
  // Strictly decreasing wherever the step is representable in a double;
  // near k=0 for large n the tail difference falls below double epsilon
  // (e.g. p(60,1) = 1 - 2^-60 rounds to 1), where only <= can hold.
  for (unsigned long n : {10ul, 60ul, 301ul}) {
    for (unsigned long k = 0; k < n; ++k) {
      const double p0 = binomial_p(n, k);
      const double p1 = binomial_p(n, k + 1);
      ASSERT_LE(p1, p0) << "n=" << n << " k=" << k;
      const double o0 = oracle_binom(n, k, 1, 2);
      const double o1 = oracle_binom(n, k + 1, 1, 2);
      if (o0 - o1 > o0 * 1e-14)
        ASSERT_LT(p1, p0) << "n=" << n << " k=" << k;
    }
  }
}

TEST(Binomial, DomainErrors) {
  EXPECT_EQ(thrown_kind([] { binomial_p(0, 0); }), StatsError::Kind::DomainError);
  EXPECT_EQ(thrown_kind([] { binomial_p(5, 6); }), StatsError::Kind::DomainError);
  EXPECT_EQ(thrown_kind([] { binomial_p(5, 2, 0.0); }), StatsError::Kind::DomainError);
  EXPECT_EQ(thrown_kind([] { binomial_p(5, 2, 1.0); }), StatsError::Kind::DomainError);
  EXPECT_EQ(thrown_kind([] { binomial_p(5, 2, -0.3); }), StatsError::Kind::DomainError);
}

TEST(Binomial, TinyTailStaysPositive) {
  // 2^-2000 underflows double; the reported p must still be > 0.
  const double p = binomial_p(2000, 2000);
  EXPECT_GT(p, 0.0);
  EXPECT_LE(p, 1.0);
}

TEST(Significance, Text) {
  EXPECT_EQ(significance_text(0.0009), "< 0.001");
  EXPECT_EQ(significance_text(0.001), "0.001");
  EXPECT_EQ(significance_text(0.136), "0.136");
  EXPECT_EQ(significance_text(0.25), "0.250");
  EXPECT_EQ(significance_text(1.0), "1.000");
}

TEST(Wilcoxon, SixAllPositiveIsTwoOverSixtyFour) {
  const std::vector<double> b = {0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  const std::vector<double> a = {0.51, 0.52, 0.53, 0.54, 0.55, 0.56};
  EXPECT_DOUBLE_EQ(wilcoxon_signed_rank(a, b), 2.0 / 64.0);
  EXPECT_DOUBLE_EQ(oracle_wilcoxon(a, b), 2.0 / 64.0);
}

TEST(Wilcoxon, MatchesEnumerationOracle) {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 5 + trial % 9;
    std::vector<double> a(n), b(n);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = rng.uniform(0.0, 1.0);
      // grid differences force ties and occasional zeros
      const double d = (static_cast<double>(rng.next_below(9)) - 4.0) / 4.0;
      a[i] = b[i] + d;
      if (d != 0.0) ++nonzero;
    }
    if (nonzero < 5) continue;
    ++checked;
    EXPECT_NEAR(wilcoxon_signed_rank(a, b), oracle_wilcoxon(a, b), 1e-12)
        << "trial " << trial;
  }
  EXPECT_GE(checked, 30);
}

TEST(Wilcoxon, ExactMeetsApproximationAtCrossover) {
  // Continuous magnitudes (ties are measure-zero; with heavy tie groups the
  // exact distribution is lumpy and the two are legitimately farther apart).
  Rng rng(777);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 20;
    std::vector<double> a(m), b(m), d(m);
    for (std::size_t i = 0; i < m; ++i) {
      b[i] = rng.uniform(0.0, 1.0);
      const double mag = rng.uniform(0.05, 1.0);
      d[i] = rng.next_below(2) ? mag : -mag;
      a[i] = b[i] + d[i];
    }
    const double exact = wilcoxon_signed_rank(a, b);  // m = 20: exact path
    EXPECT_NEAR(exact, approx_wilcoxon(d), 0.02) << "trial " << trial;
  }
}

TEST(Wilcoxon, NullPmfSumsToOne) {
  const std::vector<std::vector<long>> rank_sets = {
      {2, 4, 6, 8, 10},                      // m=5, no ties
      {3, 3, 8, 8, 8, 12},                   // m=6 with tie groups
      {2, 4, 6, 8, 10, 12, 14, 16, 18, 20,   // m=20, distinct
       22, 24, 26, 28, 30, 32, 34, 36, 38, 40},
  };
  for (const auto& ranks : rank_sets) {
    const std::vector<double> pmf = wilcoxon_null_pmf(ranks);
    double sum = 0;
    for (double p : pmf) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Wilcoxon, Errors) {
  const std::vector<double> same = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(thrown_kind([&] { wilcoxon_signed_rank(same, same); }),
            StatsError::Kind::AllZeroDifferences);
  const std::vector<double> a = {1, 2, 3, 4, 9};
  const std::vector<double> b = {0, 1, 2, 3, 9};  // only 4 nonzero differences
  EXPECT_EQ(thrown_kind([&] { wilcoxon_signed_rank(a, b); }),
            StatsError::Kind::TooFewPairs);
  const std::vector<double> shorter = {1, 2};
  EXPECT_EQ(thrown_kind([&] { wilcoxon_signed_rank(a, shorter); }),
            StatsError::Kind::DomainError);
}

TEST(Wilcoxon, PairedSampleOverloadMatchesVectors) {
  PairedSample s;
  s.attributes = {"q", "r", "s", "t", "u", "v"};
  s.real_accuracy = {0.9, 0.85, 0.8, 0.95, 0.7, 0.75};
  s.null_accuracy = {0.5, 0.52, 0.48, 0.51, 0.5, 0.49};
  EXPECT_DOUBLE_EQ(wilcoxon_signed_rank(s),
                   wilcoxon_signed_rank(s.real_accuracy, s.null_accuracy));
}

namespace {

// Fold with `n_per_class` users per class; `correct_users` of them scored on
// the right side of 0.5. Sequences: per-class counts may differ.
FoldPredictions make_fold(std::size_t n_per_class, std::size_t correct_users,
                          std::size_t seq_a, std::size_t seq_b,
                          std::size_t correct_seqs) {
  FoldPredictions fold;
  std::size_t made = 0;
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    UserResult u;
    u.user_id = "u" + std::to_string(i);
    u.label_b = i >= n_per_class;
    const bool correct = made++ < correct_users;
    u.score = (u.label_b == correct) ? 0.8 : 0.2;
    fold.users.push_back(u);
  }
  made = 0;
  for (std::size_t i = 0; i < seq_a + seq_b; ++i) {
    SequencePrediction s;
    s.label_b = i >= seq_a;
    const bool correct = made++ < correct_seqs;
    s.prob = (s.label_b == correct) ? 0.9 : 0.1;
    fold.sequences.push_back(s);
  }
  return fold;
}

}  // namespace

TEST(EvaluateAttribute, PooledTableRow) {
  // 3 folds x 20 test users, 55 correct -> 91.7%, p < 0.001.
  std::vector<FoldPredictions> folds = {
      make_fold(10, 19, 30, 25, 40),
      make_fold(10, 18, 28, 31, 45),
      make_fold(10, 18, 33, 27, 39),
  };
  const AttributeEval ev = evaluate_attribute("grip", 311, folds);

  EXPECT_EQ(ev.attribute, "grip");
  EXPECT_EQ(ev.total_users, 311u);
  EXPECT_EQ(ev.user_total, 60u);
  EXPECT_EQ(ev.user_correct, 55u);
  EXPECT_NEAR(ev.user_accuracy * 100.0, 91.7, 0.05);
  EXPECT_LT(ev.user_p, 0.001);
  const double orc = oracle_binom(60, 55, 1, 2);
  EXPECT_NEAR(ev.user_p, orc, orc * 1e-12);

  // pooled counts equal fold sums, recomputed independently
  EXPECT_EQ(ev.seq_total, 30u + 25 + 28 + 31 + 33 + 27);
  EXPECT_EQ(ev.seq_correct, 40u + 45 + 39);
  std::size_t sc = 0, st = 0;
  for (const auto& f : folds) {
    st += f.sequences.size();
    for (const auto& s : f.sequences)
      if ((s.prob >= 0.5) == s.label_b) ++sc;
  }
  EXPECT_EQ(ev.seq_correct, sc);
  EXPECT_EQ(ev.seq_total, st);
  EXPECT_DOUBLE_EQ(ev.seq_accuracy,
                   static_cast<double>(sc) / static_cast<double>(st));
  ASSERT_EQ(ev.fold_user_total.size(), 3u);
  EXPECT_EQ(ev.fold_user_correct[0] + ev.fold_user_correct[1] + ev.fold_user_correct[2],
            ev.user_correct);

  EXPECT_GT(ev.seq_p, 0.0);
  EXPECT_LE(ev.seq_p, 1.0);
  EXPECT_GT(ev.user_p, 0.0);
}

TEST(EvaluateAttribute, AllCorrectAndHalfCorrect) {
  std::vector<FoldPredictions> all = {make_fold(10, 20, 10, 10, 20)};
  const AttributeEval ea = evaluate_attribute("x", 40, all);
  EXPECT_DOUBLE_EQ(ea.user_accuracy, 1.0);
  EXPECT_NEAR(ea.user_p, std::ldexp(1.0, -20), std::ldexp(1.0, -20) * 1e-12);
  EXPECT_DOUBLE_EQ(ea.seq_accuracy, 1.0);
  EXPECT_NEAR(ea.seq_p, std::ldexp(1.0, -20), std::ldexp(1.0, -20) * 1e-12);

  std::vector<FoldPredictions> half = {make_fold(10, 10, 12, 12, 12)};
  const AttributeEval eh = evaluate_attribute("y", 40, half);
  EXPECT_DOUBLE_EQ(eh.user_accuracy, 0.5);
  EXPECT_GT(eh.user_p, 0.5);
  EXPECT_DOUBLE_EQ(eh.seq_accuracy, 0.5);
  EXPECT_GT(eh.seq_p, 0.5);
}

TEST(EvaluateAttribute, UnbalancedTestUsersThrow) {
  FoldPredictions fold = make_fold(10, 15, 10, 10, 10);
  fold.users[0].label_b = true;  // now 9 class-A vs 11 class-B
  std::vector<FoldPredictions> folds = {fold};
  EXPECT_EQ(thrown_kind([&] { evaluate_attribute("z", 20, folds); }),
            StatsError::Kind::UnbalancedTestSet);
}

namespace {

FeatureMatrix noise_matrix(std::size_t rows, std::size_t valid, Rng& rng) {
  FeatureMatrix m;
  m.rows = rows;
  m.valid_rows = valid;
  m.values.assign(rows * FeatureMatrix::kCols, 0.0f);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
      // padding rows get wild sentinels that ranges must ignore
      const double v = r < valid ? rng.uniform(-1.0, 2.0) : 1000.0;
      m.values[r * FeatureMatrix::kCols + c] = static_cast<float>(v);
    }
  return m;
}

}  // namespace

TEST(NullInputs, RangesUseValidRowsOnly) {
  Rng rng(11);
  FeatureMatrix m1 = noise_matrix(16, 9, rng);
  FeatureMatrix m2 = noise_matrix(16, 12, rng);
  const ChannelRanges r = channel_ranges({&m1, &m2});
  for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
    EXPECT_GE(r.lo[c], -1.0f);
    EXPECT_LE(r.hi[c], 2.0f);  // sentinels in padding rows were skipped
    EXPECT_LT(r.lo[c], r.hi[c]);
  }
}

TEST(NullInputs, SampleDeterministicAndInRange) {
  Rng seedr(31);
  FeatureMatrix m = noise_matrix(32, 32, seedr);
  const ChannelRanges r = channel_ranges({&m});

  Rng g1(99), g2(99);
  const FeatureMatrix s1 = sample_null_input(r, 24, g1);
  const FeatureMatrix s2 = sample_null_input(r, 24, g2);
  EXPECT_EQ(s1.rows, 24u);
  EXPECT_EQ(s1.valid_rows, 24u);  // noise inputs are full length
  ASSERT_EQ(s1.values.size(), s2.values.size());
  for (std::size_t i = 0; i < s1.values.size(); ++i)
    ASSERT_EQ(s1.values[i], s2.values[i]);
  for (std::size_t row = 0; row < s1.rows; ++row)
    for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
      ASSERT_GE(s1.at(row, c), r.lo[c]);
      ASSERT_LE(s1.at(row, c), r.hi[c]);
    }
}

TEST(NullBaseline, ConcentratesNearHalfAndPreservesOrder) {
  ChannelRanges unit;
  for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
    unit.lo[c] = 0.0f;
    unit.hi[c] = 1.0f;
  }
  std::vector<std::uint8_t> labels(100);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;

  std::vector<NullEvalInput> inputs;
  for (int a = 0; a < 24; ++a) {
    NullEvalInput in;
    in.attribute = "attr" + std::to_string(a);
    const std::size_t channel = static_cast<std::size_t>(a) % FeatureMatrix::kCols;
    // decision driven purely by the noise: threshold one channel's mean
    in.predict = [channel](const FeatureMatrix& f) {
      double s = 0;
      for (std::size_t r = 0; r < f.rows; ++r) s += f.at(r, channel);
      return s / static_cast<double>(f.rows) >= 0.5 ? 0.8 : 0.2;
    };
    in.labels_b = labels;
    in.ranges = unit;
    in.rows = 16;
    in.real_accuracy = 0.9;
    inputs.push_back(std::move(in));
  }

  const PairedSample s = null_baseline(inputs, 4242);
  ASSERT_EQ(s.attributes.size(), 24u);
  ASSERT_EQ(s.null_accuracy.size(), 24u);
  for (int a = 0; a < 24; ++a) {
    EXPECT_EQ(s.attributes[a], "attr" + std::to_string(a));
    EXPECT_DOUBLE_EQ(s.real_accuracy[a], 0.9);
  }
  double mean = 0;
  for (double v : s.null_accuracy) mean += v;
  mean /= 24.0;
  EXPECT_GE(mean, 0.45);
  EXPECT_LE(mean, 0.55);

  const PairedSample again = null_baseline(inputs, 4242);
  for (int a = 0; a < 24; ++a)
    EXPECT_DOUBLE_EQ(s.null_accuracy[a], again.null_accuracy[a]);
}

TEST(PairwiseR2, ExamplesAndInvariances) {
  Rng rng(5);
  const std::size_t n_users = 1000;
  std::vector<int> x(n_users), y(n_users), inv(n_users), constant(n_users, 1);
  for (std::size_t u = 0; u < n_users; ++u) {
    x[u] = static_cast<int>(rng.next_below(2));
    y[u] = static_cast<int>(rng.next_below(2));
    inv[u] = 1 - x[u];
  }

  const auto m = pairwise_r2({x, y, inv, constant});
  // self
  EXPECT_DOUBLE_EQ(m[0][0], 1.0);
  EXPECT_DOUBLE_EQ(m[1][1], 1.0);
  // independent labels over 1000 users
  EXPECT_LT(m[0][1], 0.02);
  EXPECT_GE(m[0][1], 0.0);
  // sign-blind: perfectly anti-correlated is 1
  EXPECT_NEAR(m[0][2], 1.0, 1e-12);
  // degenerate column reports missing everywhere, including its diagonal
  EXPECT_DOUBLE_EQ(m[3][3], kMissingR2);
  EXPECT_DOUBLE_EQ(m[0][3], kMissingR2);
  // symmetry
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) EXPECT_DOUBLE_EQ(m[i][j], m[j][i]);

  // swapping class labels of one attribute leaves R^2 unchanged
  const auto swapped = pairwise_r2({x, inv, y});
  EXPECT_NEAR(m[0][1], swapped[1][2], 1e-12);
}

TEST(PairwiseR2, MissingLabelsRestrictToOverlap) {
  // users 0..9; attr B observed only on users {0, 1}
  std::vector<int> a = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  std::vector<int> b = {1, 0, -1, -1, -1, -1, -1, -1, -1, -1};
  const auto m = pairwise_r2({a, b});
  EXPECT_NEAR(m[0][1], 1.0, 1e-12);  // anti-correlated over the 2 shared users

  // overlap below 2 users -> missing
  std::vector<int> c = {1, -1, -1, -1, -1, -1, -1, -1, -1, -1};
  EXPECT_DOUBLE_EQ(pairwise_r2({a, c})[0][1], kMissingR2);

  // degenerate within overlap -> missing
  std::vector<int> d = {1, 1, -1, -1, -1, -1, -1, -1, -1, -1};
  EXPECT_DOUBLE_EQ(pairwise_r2({a, d})[0][1], kMissingR2);

  // ragged table -> domain error
  std::vector<int> ragged = {0, 1};
  EXPECT_EQ(thrown_kind([&] { pairwise_r2({a, ragged}); }),
            StatsError::Kind::DomainError);
}
