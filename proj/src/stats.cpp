#include "vmlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace vmlab::stats {

namespace {

[[noreturn]] void domain_error(const std::string& msg) {
  throw StatsError(StatsError::Kind::DomainError, msg);
}

}  // namespace

double binomial_p(std::uint64_t n, std::uint64_t k, double p0) {
  if (n < 1) domain_error("binomial_p needs n >= 1");
  if (k > n) domain_error("binomial_p needs k <= n");
  if (!(p0 > 0.0 && p0 < 1.0)) domain_error("binomial_p needs p0 in (0,1)");
  if (k == 0) return 1.0;

  // Start at the first tail term via log-gamma, then walk the ratio
  // recurrence; Kahan summation keeps the long-double error negligible.
  const long double lp = std::log(static_cast<long double>(p0));
  const long double lq = std::log(1.0L - static_cast<long double>(p0));
  const long double nl = static_cast<long double>(n);
  long double term = std::exp(
      std::lgamma(nl + 1.0L) - std::lgamma(static_cast<long double>(k) + 1.0L) -
      std::lgamma(nl - static_cast<long double>(k) + 1.0L) +
      static_cast<long double>(k) * lp + (nl - static_cast<long double>(k)) * lq);
  const long double ratio_base = static_cast<long double>(p0) / (1.0L - static_cast<long double>(p0));

  long double sum = 0.0L, comp = 0.0L;
  for (std::uint64_t i = k;; ++i) {
    const long double y = term - comp;
    const long double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
    if (i == n) break;
    term *= (nl - static_cast<long double>(i)) /
            (static_cast<long double>(i) + 1.0L) * ratio_base;
  }
  const double p = static_cast<double>(sum);
  if (p <= 0.0) return std::numeric_limits<double>::denorm_min();
  return std::min(1.0, p);
}

std::string significance_text(double p) {
  if (p < 0.001) return "< 0.001";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", p);
  return buf;
}

AttributeEval evaluate_attribute(const std::string& attribute, std::size_t total_users,
                                 const std::vector<FoldPredictions>& folds) {
  AttributeEval ev;
  ev.attribute = attribute;
  ev.total_users = total_users;

  for (std::size_t f = 0; f < folds.size(); ++f) {
    const FoldPredictions& fold = folds[f];
    std::size_t users_a = 0, users_b = 0;
    for (const UserResult& u : fold.users) (u.label_b ? users_b : users_a)++;
    if (users_a != users_b)
      throw StatsError(StatsError::Kind::UnbalancedTestSet,
                       attribute + " fold " + std::to_string(f) + " has " +
                           std::to_string(users_a) + " class-A vs " +
                           std::to_string(users_b) + " class-B test users");

    std::size_t sc = 0, uc = 0;
    for (const SequencePrediction& s : fold.sequences)
      if ((s.prob >= 0.5) == s.label_b) ++sc;
    for (const UserResult& u : fold.users)
      if ((u.score >= 0.5) == u.label_b) ++uc;

    ev.fold_seq_correct.push_back(sc);
    ev.fold_seq_total.push_back(fold.sequences.size());
    ev.fold_user_correct.push_back(uc);
    ev.fold_user_total.push_back(fold.users.size());
    ev.seq_correct += sc;
    ev.seq_total += fold.sequences.size();
    ev.user_correct += uc;
    ev.user_total += fold.users.size();
  }

  if (ev.seq_total > 0) {
    ev.seq_accuracy = static_cast<double>(ev.seq_correct) / static_cast<double>(ev.seq_total);
    ev.seq_p = binomial_p(ev.seq_total, ev.seq_correct);
  }
  if (ev.user_total > 0) {
    ev.user_accuracy =
        static_cast<double>(ev.user_correct) / static_cast<double>(ev.user_total);
    ev.user_p = binomial_p(ev.user_total, ev.user_correct);
  }
  return ev;
}

double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    domain_error("wilcoxon: pairing length mismatch " + std::to_string(a.size()) +
                 " vs " + std::to_string(b.size()));

  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty())
    throw StatsError(StatsError::Kind::AllZeroDifferences,
                     "every paired difference is zero");
  const std::size_t m = diffs.size();
  if (m < 5)
    throw StatsError(StatsError::Kind::TooFewPairs,
                     "only " + std::to_string(m) + " nonzero differences (need >= 5)");

  // Rank |d| ascending with average ranks for ties. Doubled ranks stay
  // integral (average of consecutive integers), which the exact path uses.
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&diffs](std::size_t x, std::size_t y) {
    return std::abs(diffs[x]) < std::abs(diffs[y]);
  });
  std::vector<long> rank2(m, 0);  // 2 * rank
  std::vector<std::size_t> tie_sizes;
  for (std::size_t s = 0; s < m;) {
    std::size_t e = s + 1;
    while (e < m && std::abs(diffs[idx[e]]) == std::abs(diffs[idx[s]])) ++e;
    // positions s..e-1 (0-based) share ranks s+1..e -> average (s+1+e)/2
    const long avg2 = static_cast<long>(s + 1 + e);
    for (std::size_t i = s; i < e; ++i) rank2[idx[i]] = avg2;
    if (e - s > 1) tie_sizes.push_back(e - s);
    s = e;
  }

  long w_plus2 = 0;  // 2 * W+
  for (std::size_t i = 0; i < m; ++i)
    if (diffs[i] > 0) w_plus2 += rank2[i];
  const long total2 = static_cast<long>(m * (m + 1));  // 2 * sum of ranks

  if (m <= 20) {
    const std::vector<double> pmf = wilcoxon_null_pmf(rank2);
    double le = 0, ge = 0;
    for (long s = 0; s <= total2; ++s) {
      if (s <= w_plus2) le += pmf[static_cast<std::size_t>(s)];
      if (s >= w_plus2) ge += pmf[static_cast<std::size_t>(s)];
    }
    return std::min(1.0, 2.0 * std::min(le, ge));
  }

  // Normal approximation with tie-corrected variance and continuity correction.
  const double md = static_cast<double>(m);
  const double mu = md * (md + 1.0) / 4.0;
  double var = md * (md + 1.0) * (2.0 * md + 1.0) / 24.0;
  for (std::size_t t : tie_sizes) {
    const double td = static_cast<double>(t);
    var -= (td * td * td - td) / 48.0;
  }
  const double w = static_cast<double>(w_plus2) / 2.0;
  double z = w - mu;
  z -= z > 0 ? 0.5 : (z < 0 ? -0.5 : 0.0);
  z /= std::sqrt(var);
  const double p = std::erfc(std::abs(z) / std::sqrt(2.0));
  return std::min(1.0, p);
}

std::vector<double> wilcoxon_null_pmf(const std::vector<long>& doubled_ranks) {
  long total2 = 0;
  for (long r : doubled_ranks) {
    if (r <= 0) domain_error("wilcoxon_null_pmf: ranks must be positive");
    total2 += r;
  }
  if (doubled_ranks.size() > 62)
    domain_error("wilcoxon_null_pmf: counting capacity is 62 ranks");
  // Subset-sum counting: ways[s] = #sign assignments with 2*W+ == s. The
  // counts over 2^m assignments fit a uint64 for m <= 62.
  std::vector<std::uint64_t> ways(static_cast<std::size_t>(total2) + 1, 0);
  ways[0] = 1;
  for (long r : doubled_ranks)
    for (long s = total2; s >= r; --s) ways[s] += ways[s - r];
  const double denom = std::ldexp(1.0, static_cast<int>(doubled_ranks.size()));
  std::vector<double> pmf(ways.size());
  for (std::size_t s = 0; s < ways.size(); ++s)
    pmf[s] = static_cast<double>(ways[s]) / denom;
  return pmf;
}

ChannelRanges channel_ranges(const std::vector<const FeatureMatrix*>& test_set) {
  ChannelRanges r;
  for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
    r.lo[c] = 0.0f;
    r.hi[c] = 0.0f;
  }
  bool first = true;
  for (const FeatureMatrix* m : test_set) {
    for (std::size_t i = 0; i < m->valid_rows; ++i) {
      for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
        const float v = m->at(i, c);
        if (first) {
          r.lo[c] = v;
          r.hi[c] = v;
        } else {
          r.lo[c] = std::min(r.lo[c], v);
          r.hi[c] = std::max(r.hi[c], v);
        }
      }
      first = false;
    }
  }
  return r;
}

FeatureMatrix sample_null_input(const ChannelRanges& ranges, std::size_t rows, Rng& rng) {
  FeatureMatrix m;
  m.rows = rows;
  m.valid_rows = rows;
  m.values.resize(rows * FeatureMatrix::kCols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c)
      m.values[i * FeatureMatrix::kCols + c] = static_cast<float>(
          rng.uniform(static_cast<double>(ranges.lo[c]), static_cast<double>(ranges.hi[c])));
  return m;
}

double null_accuracy(const std::function<double(const FeatureMatrix&)>& predict,
                     const std::vector<std::uint8_t>& labels_b,
                     const ChannelRanges& ranges, std::size_t rows,
                     std::uint64_t seed) {
  if (labels_b.empty()) return 0.0;
  Rng rng(seed);
  std::size_t correct = 0;
  for (std::uint8_t label : labels_b) {
    const FeatureMatrix input = sample_null_input(ranges, rows, rng);
    const bool predicted_b = predict(input) >= 0.5;
    if (predicted_b == (label != 0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels_b.size());
}

PairedSample null_baseline(const std::vector<NullEvalInput>& inputs, std::uint64_t seed) {
  PairedSample out;
  for (const NullEvalInput& in : inputs) {
    out.attributes.push_back(in.attribute);
    out.real_accuracy.push_back(in.real_accuracy);
    out.null_accuracy.push_back(null_accuracy(in.predict, in.labels_b, in.ranges,
                                              in.rows,
                                              derive_seed(seed, "null:" + in.attribute)));
  }
  return out;
}

std::vector<std::vector<double>> pairwise_r2(const std::vector<std::vector<int>>& labels) {
  const std::size_t n_attr = labels.size();
  std::vector<std::vector<double>> out(n_attr, std::vector<double>(n_attr, kMissingR2));
  for (std::size_t x = 0; x < n_attr; ++x) {
    for (std::size_t y = x; y < n_attr; ++y) {
      if (labels[x].size() != labels[y].size())
        domain_error("pairwise_r2: ragged label table");
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      std::size_t n = 0;
      for (std::size_t u = 0; u < labels[x].size(); ++u) {
        const int lx = labels[x][u], ly = labels[y][u];
        if (lx < 0 || ly < 0) continue;
        const double dx = lx, dy = ly;
        sx += dx;
        sy += dy;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
        ++n;
      }
      if (n < 2) continue;
      const double nd = static_cast<double>(n);
      const double vx = sxx - sx * sx / nd;
      const double vy = syy - sy * sy / nd;
      if (vx <= 0.0 || vy <= 0.0) continue;  // degenerate: reported missing
      const double cov = sxy - sx * sy / nd;
      const double r2 = (cov * cov) / (vx * vy);
      out[x][y] = out[y][x] = std::min(1.0, r2);
    }
  }
  return out;
}

}  // namespace vmlab::stats
