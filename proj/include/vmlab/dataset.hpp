#pragma once

// Survey ingestion, attribute binarization, per-user recording inventory,
// and the balanced split / resampling protocol that feeds training.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmlab::dataset {

class DatasetError : public std::runtime_error {
 public:
  enum class Kind {
    ParseError,         // malformed survey / manifest / spec file
    UnparsableValue,    // numeric rule applied to a non-numeric raw value
    RuleConflict,       // class_a and class_b provably overlap
    InsufficientUsers,  // a class cannot fill the requested split
    EmptyClass,         // resampling from a class with no recordings
  };

  DatasetError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

  // populated for InsufficientUsers / EmptyClass
  char class_label = '?';
  std::size_t have = 0;
  std::size_t need = 0;

  static DatasetError insufficient_users(char cls, std::size_t have, std::size_t need);
  static DatasetError empty_class(char cls);

 private:
  Kind kind_;
};

// ---- survey table ------------------------------------------------------------

/// Tab-separated survey: header row `user_id<TAB>attr...`, one row per user.
/// An empty cell (or a short row) means the answer is missing; internally a
/// missing answer is an absent map entry, never an empty string.
struct SurveyTable {
  std::vector<std::string> attributes;  // header order
  std::map<std::string, std::map<std::string, std::string>> rows;  // by user_id

  std::optional<std::string> value(const std::string& user_id,
                                   const std::string& attribute) const;
};

SurveyTable read_survey_tsv(std::istream& in);
SurveyTable read_survey_tsv_file(const std::string& path);

// ---- attribute specs ---------------------------------------------------------

/// One matching rule. Three leaf kinds plus two combinators:
///   Values : raw string is (or, with token matching, contains) one of a set
///   Range  : numeric interval with independently open/closed ends
///   All/Any: conjunction / disjunction over child rules, each naming a field
/// A leaf with an empty `field` reads the spec's default survey column.
struct Rule {
  enum class Kind { Values, Range, All, Any };
  Kind kind = Kind::Values;
  std::string field;

  // Values
  std::vector<std::string> values;
  bool token_match = false;  // split raw value on ';' or ',' before matching

  // Range: absent bound = unbounded on that side
  std::optional<double> min, max;
  bool min_closed = true;
  bool max_closed = false;

  // All / Any
  std::vector<Rule> children;
};

struct AttributeSpec {
  std::string name;   // reporting label
  std::string field;  // default survey column; defaults to name
  std::string units;  // informational
  Rule class_a, class_b;
};

/// Parses the JSON spec text and validates class disjointness (see
/// validate_disjoint). ParseError on malformed input.
AttributeSpec parse_attribute_spec(const std::string& json_text);
AttributeSpec load_attribute_spec(const std::string& path);

/// Static disjointness check: any provable overlap between class_a and
/// class_b (shared-field value-set intersections, interval overlaps, numeric
/// values inside ranges) throws RuleConflict. Rules under an `all` combinator
/// cannot be decided statically and are skipped; binarize resolves any
/// residual overlap deterministically in favor of class A.
void validate_disjoint(const AttributeSpec& spec);

enum class BinLabel { A, B, Rejected, Missing };
char to_char(BinLabel label);  // 'A' 'B' 'R' 'M'

/// Labels every surveyed user. A user missing any survey field referenced by
/// either class rule is Missing; otherwise class_a is tried, then class_b,
/// and users matching neither are Rejected. Pure: row order never matters.
std::map<std::string, BinLabel> binarize(const SurveyTable& table,
                                         const AttributeSpec& spec);

// ---- recording inventory -------------------------------------------------------

struct RecordingRef {
  std::string recording_id;
  std::string path;        // replay file location, as written in the manifest
  std::int64_t timestamp;  // ordering key, larger = more recent
};

/// Tab-separated manifest: header `user_id<TAB>recording_id<TAB>path<TAB>timestamp`.
struct Inventory {
  std::map<std::string, std::vector<RecordingRef>> by_user;
};

Inventory read_manifest(std::istream& in);
Inventory read_manifest_file(const std::string& path);

// ---- labeled users and splits ---------------------------------------------------

inline constexpr std::size_t kMaxRecordingsPerUser = 100;

struct LabeledUser {
  std::string user_id;
  bool label_b = false;
  std::vector<std::string> recording_ids;  // most recent first, at most 100
};

/// Joins binarized labels with the inventory: users labeled A or B that own
/// at least one recording, sorted by user_id, each keeping only their latest
/// kMaxRecordingsPerUser recordings (newest first; ties on timestamp break
/// by recording_id so the cut is reproducible).
std::vector<LabeledUser> labeled_users(const SurveyTable& table,
                                       const AttributeSpec& spec,
                                       const Inventory& inventory);

struct SplitCounts {
  std::size_t test_per_class = 10;
  std::size_t val_per_class = 10;
};

struct SplitPlan {
  std::string attribute;
  std::uint64_t fold_seed = 0;
  std::vector<LabeledUser> test_users, val_users, train_users;
};

/// Samples test_per_class + val_per_class users per class without
/// replacement (class A drawn first), assigns the first test_per_class of
/// each draw to test and the rest to validation, and puts every remaining
/// labeled user in train. Deterministic given (labels, fold_seed, counts).
SplitPlan make_split(const std::string& attribute,
                     const std::vector<LabeledUser>& labels,
                     std::uint64_t fold_seed, SplitCounts counts = {});

/// k independent Monte Carlo splits with fold_seed = base_seed + fold index.
/// Test sets may overlap across folds by design.
std::vector<SplitPlan> monte_carlo_folds(const std::string& attribute,
                                         const std::vector<LabeledUser>& labels,
                                         std::uint64_t base_seed, std::size_t k,
                                         SplitCounts counts = {});

struct TrainingSample {
  std::string recording_id;
  bool label_b = false;
  std::size_t fold = 0;
};

/// Uniform with-replacement draw of exactly n_per_class recordings from each
/// class's training users, then one deterministic shuffle of the combined
/// list. n_per_class = 0 yields an empty list without touching the classes.
std::vector<TrainingSample> resample_training(const SplitPlan& plan,
                                              std::size_t n_per_class,
                                              std::uint64_t seed,
                                              std::size_t fold_index = 0);

}  // namespace vmlab::dataset
