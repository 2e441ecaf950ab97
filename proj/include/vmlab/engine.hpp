#pragma once

// Experiment orchestration: config files, the lazy feature cache, attribute x
// fold training jobs with hash-keyed resume, fictitious-input comparison runs,
// label correlation, and the report writers behind the command-line front end.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmlab/dataset.hpp"
#include "vmlab/model.hpp"
#include "vmlab/stats.hpp"
#include "vmlab/synth.hpp"

namespace vmlab::engine {

class EngineError : public std::runtime_error {
 public:
  enum class Kind {
    InvalidConfig,       // bad experiment/cohort config (schema or semantics)
    ParseError,          // unreadable JSON / results files
    IoError,             // filesystem failures
    MissingCheckpoints,  // null run pointed at a run without model.ckpt files
  };
  EngineError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// ---- experiment configuration -------------------------------------------------

struct DataPaths {
  std::string manifest;     // recording inventory TSV
  std::string survey;       // survey answer TSV
  std::string replay_root;  // base for relative manifest paths; default = manifest dir
};

struct AttributeEntry {
  dataset::AttributeSpec spec;
  std::string source_text;  // canonical JSON the spec was parsed from (hashed for resume)
  std::string slug;         // directory-safe name, unique within the experiment
};

struct ExperimentConfig {
  std::string preset = "paper";  // "paper" or "desk"
  DataPaths data;
  std::vector<AttributeEntry> attributes;
  std::size_t folds = 3;
  ModelConfig model;                    // preset defaults with file overrides applied
  std::size_t train_per_class = 10000;  // resampled training sequences per class
  dataset::SplitCounts split;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out_dir = "runs/experiment";
};

/// Baseline settings for a named preset. "paper" is the full-scale run
/// (seq_len 1024, 2x4 heads, 100 epochs, 10,000 sequences/class, 10+10 test
/// and validation users per class); "desk" shrinks everything to minutes
/// (seq_len 128, embed 16, ffn 64, 1 layer, 2 heads, 10 epochs, 200
/// sequences/class, 5+5 users per class). InvalidConfig otherwise.
ExperimentConfig preset_config(const std::string& name);

/// Command-line values that win over the config file.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  std::optional<std::size_t> jobs;
  std::optional<std::string> out;
};

/// Reads a JSON experiment config. Relative paths inside the file resolve
/// against the file's directory. Attribute entries are either a path to a
/// spec file or an inline spec object. An override preset replaces the
/// file's preset before the file's own field overrides are applied.
ExperimentConfig load_experiment_config(const std::string& path,
                                        const CliOverrides& overrides = {});

/// InvalidConfig unless: folds >= 1, at least one attribute, slugs unique,
/// model config valid, split counts nonzero, and the data files exist.
void validate(const ExperimentConfig& cfg);

/// Directory-safe attribute name: non [A-Za-z0-9._-] bytes become '_'.
std::string slugify(const std::string& name);

/// Stable content hash (FNV-1a over the resolved settings and the data file
/// bytes) identifying a run for resume checks and the run manifest.
std::string experiment_hash(const ExperimentConfig& cfg);

// ---- recording access ----------------------------------------------------------

/// Loads one replay file, sniffing the container: files opening with the
/// binary magic parse as BSOR, anything else as canonical text.
Recording load_recording_file(const std::string& path);

/// Lazy featurization cache keyed by recording id. Thread-safe; entries are
/// featurized once on first request and live for the store's lifetime.
class FeatureStore {
 public:
  FeatureStore(std::string replay_root, std::size_t rows)
      : root_(std::move(replay_root)), rows_(rows) {}

  /// Featurized matrix for one manifest entry (ref.path resolves against the
  /// store's replay root unless absolute).
  const FeatureMatrix& get(const dataset::RecordingRef& ref);

  std::size_t size() const;
  std::size_t rows() const { return rows_; }

 private:
  std::string root_;
  std::size_t rows_;
  mutable std::mutex mu_;
  std::map<std::string, FeatureMatrix> cache_;
};

// ---- run -----------------------------------------------------------------------

struct FoldOutcome {
  std::size_t fold = 0;
  std::uint64_t fold_seed = 0;
  std::size_t best_epoch = 0;
  bool resumed = false;  // predictions restored from a completed job directory
  stats::FoldPredictions predictions;
};

struct AttributeOutcome {
  std::string attribute;
  std::string slug;
  bool ok = false;
  std::string error;  // set when !ok
  std::size_t total_users = 0;
  stats::AttributeEval eval;  // valid when ok
  std::vector<FoldOutcome> folds;
};

struct RunOutcome {
  bool all_ok = false;
  std::filesystem::path out_dir;
  std::vector<AttributeOutcome> attributes;
};

using RunLog = std::function<void(const std::string&)>;

/// Full experiment: binarize -> split -> resample -> featurize -> train ->
/// evaluate per attribute x fold, with a worker pool of cfg.jobs threads.
/// Completed jobs (matching done.json content key) are loaded, not retrained.
/// Per-attribute failures are recorded and the run continues. Writes
/// run_config.json, run_manifest.json, results.json and report.tsv under
/// cfg.out_dir and per-job artifacts under <slug>/fold<k>/.
RunOutcome run_experiment(const ExperimentConfig& cfg, const RunLog& log = {});

// ---- fictitious-input comparison ------------------------------------------------

struct NullPair {
  std::string attribute;
  std::size_t fold = 0;
  double real_accuracy = 0;
  double null_accuracy = 0;
};

struct NullAttributeSummary {
  std::string attribute;
  double real_mean = 0;
  double null_mean = 0;
};

struct NullOutcome {
  std::uint64_t seed = 0;
  std::vector<NullPair> pairs;  // one per successful attribute x fold
  std::vector<NullAttributeSummary> attributes;
  double wilcoxon_p = 1.0;  // NaN when the test is undefined (see note)
  std::string note;         // why wilcoxon_p is missing, if it is
};

/// Reloads a completed run, scores every fold's checkpoint on fictitious
/// inputs drawn uniformly inside the real test set's per-channel ranges, and
/// pairs those accuracies with the recorded real ones (two-sided Wilcoxon
/// over attribute x fold pairs). Writes null.json and refreshes report.tsv
/// with the macro-significance block. MissingCheckpoints if any fold of a
/// successful attribute lacks model.ckpt.
NullOutcome run_null(const std::string& results_dir, std::uint64_t seed,
                     const RunLog& log = {});

// ---- label correlation -----------------------------------------------------------

struct CorrOutcome {
  std::vector<std::string> attributes;
  std::vector<std::vector<double>> r2;  // stats::kMissingR2 marks degenerate pairs
  std::filesystem::path matrix_path;    // wide TSV, one row/column per attribute
  std::filesystem::path long_path;      // plot-ready rows: attr_a, attr_b, r2, status
};

/// Binarizes every spec against the survey and writes the pairwise R^2 matrix
/// of the resulting class labels. Degenerate entries (no overlap or a class
/// with zero variance) are flagged, not dropped.
CorrOutcome run_corr(const std::string& survey_path,
                     const std::vector<std::string>& spec_paths,
                     const std::string& out_dir);

// ---- cohorts ---------------------------------------------------------------------

struct CohortSpecFile {
  synth::CohortSpec spec;
  bool null_cohort = false;  // generate with every planted effect forced to zero
};

/// JSON cohort description; see README for the schema. InvalidConfig on
/// unknown signal kinds or malformed fields (range checks happen in synth).
CohortSpecFile load_cohort_spec(const std::string& path);

// ---- conversion ------------------------------------------------------------------

enum class ReplayFormat { Bsor, Canonical };

std::optional<ReplayFormat> replay_format_from_string(const std::string& text);

/// File extension (without dot) written for a format: "bsor" / "vmt".
std::string extension_for(ReplayFormat format);

struct ConvertReport {
  std::size_t converted = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // input path -> error
  bool io_error = false;
  bool stopped_early = false;  // failure without keep_going
};

/// Converts one file or every matching file in a directory tree. A file that
/// fails to parse produces no output file at all; without keep_going the
/// batch stops at the first failure.
ConvertReport convert_path(const std::string& input, const std::string& output,
                           ReplayFormat from, ReplayFormat to, bool keep_going);

// ---- reports ---------------------------------------------------------------------

/// Rebuilds report.tsv from results.json (and null.json when present).
/// Returns the report path.
std::filesystem::path write_report_files(const std::filesystem::path& run_dir);

}  // namespace vmlab::engine
