#pragma once

// Exact significance machinery: one-sided binomial tail tests on pooled
// fold counts, two-sided Wilcoxon signed-rank for real-vs-fictitious accuracy
// pairings, fictitious-input (null) evaluation, and pairwise label R^2.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmlab/featurize.hpp"
#include "vmlab/rng.hpp"

namespace vmlab::stats {

class StatsError : public std::runtime_error {
 public:
  enum class Kind {
    DomainError,
    UnbalancedTestSet,
    TooFewPairs,
    AllZeroDifferences,
  };
  StatsError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// One-sided upper tail P(X >= k) for X ~ Binomial(n, p0), summed exactly in
/// extended precision (no normal approximation at any n). Tails too small for
/// double report as the smallest positive double so p stays in (0, 1].
double binomial_p(std::uint64_t n, std::uint64_t k, double p0 = 0.5);

/// Human-readable significance in the reporting style "< 0.001" / "0.136".
std::string significance_text(double p);

// ---- per-attribute evaluation ----------------------------------------------

struct SequencePrediction {
  double prob = 0;      // model probability of class B
  bool label_b = false; // true class
};

struct UserResult {
  std::string user_id;
  double score = 0;     // mean per-sequence probability
  bool label_b = false;
};

struct FoldPredictions {
  std::vector<SequencePrediction> sequences;
  std::vector<UserResult> users;
};

struct AttributeEval {
  std::string attribute;
  std::size_t total_users = 0;     // labeled users eligible for the attribute
  std::size_t seq_total = 0;       // pooled across folds
  std::size_t seq_correct = 0;
  std::size_t user_total = 0;
  std::size_t user_correct = 0;
  double seq_accuracy = 0;
  double seq_p = 1;
  double user_accuracy = 0;
  double user_p = 1;
  std::vector<std::size_t> fold_seq_correct, fold_seq_total;
  std::vector<std::size_t> fold_user_correct, fold_user_total;
};

/// Pools correct/total across folds and applies binomial_p to the pooled
/// counts. Each fold must have equally many test USERS per class (that is
/// what licenses p0 = 0.5); sequence counts may differ between classes when
/// users own different recording counts, which is tolerated.
AttributeEval evaluate_attribute(const std::string& attribute, std::size_t total_users,
                                 const std::vector<FoldPredictions>& folds);

// ---- Wilcoxon signed-rank ----------------------------------------------------

struct PairedSample {
  std::vector<std::string> attributes;
  std::vector<double> real_accuracy;
  std::vector<double> null_accuracy;
};

/// Two-sided Wilcoxon signed-rank test on paired values. Zero differences are
/// dropped; tied absolute differences get average ranks. Exact null
/// distribution (all sign assignments, via counting DP) for m <= 20 nonzero
/// differences, normal approximation with tie-corrected variance and 0.5
/// continuity correction above.
double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

inline double wilcoxon_signed_rank(const PairedSample& s) {
  return wilcoxon_signed_rank(s.real_accuracy, s.null_accuracy);
}

/// Exact null pmf of the doubled statistic 2*W+ over all sign assignments of
/// the given doubled ranks: result[s] = P(2*W+ = s) for s in [0, sum(ranks)].
/// This is the distribution the m <= 20 path of wilcoxon_signed_rank tails.
std::vector<double> wilcoxon_null_pmf(const std::vector<long>& doubled_ranks);

// ---- fictitious-input baseline ----------------------------------------------

struct ChannelRanges {
  float lo[FeatureMatrix::kCols];
  float hi[FeatureMatrix::kCols];
};

/// Per-channel empirical min/max over the valid rows of a real test set.
ChannelRanges channel_ranges(const std::vector<const FeatureMatrix*>& test_set);

/// Full-length random input: every cell uniform in its channel's range.
FeatureMatrix sample_null_input(const ChannelRanges& ranges, std::size_t rows, Rng& rng);

/// Accuracy of a model on fictitious inputs: one random input per real test
/// label, scored against that label. Deterministic given seed.
double null_accuracy(const std::function<double(const FeatureMatrix&)>& predict,
                     const std::vector<std::uint8_t>& labels_b,
                     const ChannelRanges& ranges, std::size_t rows,
                     std::uint64_t seed);

/// One attribute's inputs to the fictitious-input comparison.
struct NullEvalInput {
  std::string attribute;
  std::function<double(const FeatureMatrix&)> predict;
  std::vector<std::uint8_t> labels_b;  // real test labels, one noise draw each
  ChannelRanges ranges;
  std::size_t rows = 0;
  double real_accuracy = 0;
};

/// Runs null_accuracy for every attribute (seed derived per attribute name,
/// so evaluation order does not matter) and pairs the results with the real
/// accuracies in the same attribute order.
PairedSample null_baseline(const std::vector<NullEvalInput>& inputs, std::uint64_t seed);

// ---- label correlation --------------------------------------------------------

/// Entry for "missing" in the R^2 matrix (degenerate column or no overlap).
inline constexpr double kMissingR2 = -1.0;

/// labels[attr][user]: 0 = class A, 1 = class B, -1 = missing. Returns the
/// symmetric matrix of squared Pearson correlations over users holding both
/// labels; entries that cannot be computed (zero variance in the overlap, or
/// fewer than 2 shared users) are kMissingR2.
std::vector<std::vector<double>> pairwise_r2(const std::vector<std::vector<int>>& labels);

}  // namespace vmlab::stats
