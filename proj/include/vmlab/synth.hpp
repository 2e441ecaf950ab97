#pragma once

// Deterministic synthetic cohorts: seeded head-and-hand motion with planted
// class signals, emitted as canonical telemetry plus the manifest and survey
// files the dataset layer ingests. Every byte is a pure function of the spec.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmlab/replay.hpp"

namespace vmlab::synth {

class SynthError : public std::runtime_error {
 public:
  enum class Kind { InvalidProfile, InvalidSpec, IoError };
  SynthError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// What a planted attribute shifts between classes.
enum class SignalKind {
  HeadHeight,    // anthropometric analog: head y offset
  OscFrequency,  // behavioral analog: hand arc speed
  OscAmplitude,  // reach analog: hand arc radius
};

const char* to_string(SignalKind kind);
std::optional<SignalKind> signal_kind_from_string(const std::string& text);

/// Class-conditional spread of the drawn parameter, per kind.
double class_sd(SignalKind kind);

struct PlantedAttribute {
  std::string name;
  SignalKind kind = SignalKind::HeadHeight;
  double effect = 0;  // separation of class means, in the kind's native unit
};

struct MotionProfile {
  double head_height = 1.76;    // m; must lie in [1.0, 2.2]
  double arm_length = 0.70;     // m
  double osc_frequency = 1.2;   // Hz
  double osc_amplitude = 0.35;  // m
  double jitter = 1.0;          // multiplies the cohort noise scale
};

void validate(const MotionProfile& profile);  // throws InvalidProfile

struct FramesRange {
  std::size_t min = 600;
  std::size_t max = 2000;
};

struct CohortSpec {
  std::size_t users_per_class = 40;
  std::size_t recordings_per_user = 100;
  FramesRange frames;
  double frame_rate = 90.0;
  double noise_scale = 0.01;             // meters of motion noise at jitter 1
  MotionProfile base;                    // cohort-wide center profile
  std::vector<PlantedAttribute> planted; // independent labels per attribute
  std::uint64_t seed = 0;
};

void validate(const CohortSpec& spec);  // throws InvalidSpec

/// Per-attribute class assignment: labels[attr][user], exactly
/// users_per_class true per attribute, shuffled by a seed derived from
/// (spec.seed, attribute name). Independent of every other attribute.
std::vector<std::vector<bool>> planted_labels(const CohortSpec& spec);

/// The profile a given user actually plays with: base profile, shifted
/// +-effect/2 per planted attribute by that user's class, plus a seeded
/// class-conditional draw of class_sd per kind, clamped to plausible ranges.
MotionProfile drawn_profile(const CohortSpec& spec,
                            const std::vector<bool>& class_b_per_attr,
                            std::uint64_t user_seed);

/// n_recordings seeded recordings for one user. Head y follows the profile
/// height plus a leaky random walk (the leak keeps the mean pinned to the
/// profile); hands trace tilted sinusoidal arcs around shoulder height;
/// orientations are unit quaternions facing the direction of motion.
std::vector<Recording> generate_user(const MotionProfile& profile,
                                     std::uint64_t user_seed,
                                     std::size_t n_recordings,
                                     FramesRange frames,
                                     double frame_rate = 90.0,
                                     double noise_scale = 0.01,
                                     const std::string& user_id = "user");

struct GeneratedCohort {
  std::string root;
  std::string manifest_path;
  std::string survey_path;
  std::size_t n_users = 0;
  std::size_t n_recordings = 0;
};

/// Writes <out_dir>/replays/*.vmt, <out_dir>/manifest.tsv and
/// <out_dir>/survey.tsv. The survey holds, per planted attribute, a class
/// column (A/B) and a numeric <name>_value column with the drawn parameter.
GeneratedCohort generate_cohort(const CohortSpec& spec, const std::string& out_dir);

/// Same motion distribution for both classes: every planted effect is forced
/// to zero while the balanced seeded label assignment is kept, so the labels
/// carry no motion information at all.
GeneratedCohort generate_null_cohort(const CohortSpec& spec, const std::string& out_dir);

}  // namespace vmlab::synth
