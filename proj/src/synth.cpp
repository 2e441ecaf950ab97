#include "vmlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vmlab/rng.hpp"

namespace vmlab::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr double kMinHeadHeight = 1.0, kMaxHeadHeight = 2.2;
constexpr double kMinFrequency = 0.1, kMaxFrequency = 10.0;
constexpr double kMinAmplitude = 0.02, kMaxAmplitude = 1.5;

[[noreturn]] void invalid_spec(const std::string& msg) {
  throw SynthError(SynthError::Kind::InvalidSpec, msg);
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

struct DVec {
  double x = 0, y = 0, z = 0;
};

DVec cross(const DVec& a, const DVec& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

double dot(const DVec& a, const DVec& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

DVec normalized(const DVec& v) {
  const double n = std::sqrt(dot(v, v));
  return {v.x / n, v.y / n, v.z / n};
}

/// Unit quaternion rotating the +z axis onto unit direction d.
Quat facing(const DVec& d) {
  const DVec fwd{0, 0, 1};
  const double c = dot(fwd, d);
  if (c < -0.999999) return Quat{0, 1, 0, 0};  // 180 degrees about y
  const DVec axis = cross(fwd, d);
  const double w = 1.0 + c;
  const double n = std::sqrt(axis.x * axis.x + axis.y * axis.y + axis.z * axis.z + w * w);
  return Quat{static_cast<float>(axis.x / n), static_cast<float>(axis.y / n),
              static_cast<float>(axis.z / n), static_cast<float>(w / n)};
}

Quat yaw_pitch(double yaw, double pitch) {
  const double cy = std::cos(yaw / 2), sy = std::sin(yaw / 2);
  const double cp = std::cos(pitch / 2), sp = std::sin(pitch / 2);
  // yaw about y then pitch about x
  return Quat{static_cast<float>(sp * cy), static_cast<float>(cp * sy),
              static_cast<float>(-sp * sy), static_cast<float>(cp * cy)};
}

Vec3 narrowed(const DVec& v) {
  return Vec3{static_cast<float>(v.x), static_cast<float>(v.y), static_cast<float>(v.z)};
}

}  // namespace

const char* to_string(SignalKind kind) {
  switch (kind) {
    case SignalKind::HeadHeight: return "head_height";
    case SignalKind::OscFrequency: return "osc_frequency";
    case SignalKind::OscAmplitude: return "osc_amplitude";
  }
  return "?";
}

std::optional<SignalKind> signal_kind_from_string(const std::string& text) {
  if (text == "head_height") return SignalKind::HeadHeight;
  if (text == "osc_frequency") return SignalKind::OscFrequency;
  if (text == "osc_amplitude") return SignalKind::OscAmplitude;
  return std::nullopt;
}

double class_sd(SignalKind kind) {
  switch (kind) {
    case SignalKind::HeadHeight: return 0.04;
    case SignalKind::OscFrequency: return 0.08;
    case SignalKind::OscAmplitude: return 0.02;
  }
  return 0;
}

void validate(const MotionProfile& profile) {
  const auto bad = [&](const std::string& msg) {
    throw SynthError(SynthError::Kind::InvalidProfile, msg);
  };
  if (!(profile.head_height >= kMinHeadHeight && profile.head_height <= kMaxHeadHeight))
    bad("head height " + std::to_string(profile.head_height) + " outside [1.0, 2.2] m");
  if (!(profile.arm_length > 0 && profile.arm_length <= 1.5))
    bad("arm length must be in (0, 1.5] m");
  if (!(profile.osc_frequency >= kMinFrequency && profile.osc_frequency <= kMaxFrequency))
    bad("oscillation frequency must be in [0.1, 10] Hz");
  if (!(profile.osc_amplitude >= kMinAmplitude && profile.osc_amplitude <= kMaxAmplitude))
    bad("oscillation amplitude must be in [0.02, 1.5] m");
  if (!(profile.jitter >= 0) || !std::isfinite(profile.jitter))
    bad("jitter must be finite and non-negative");
}

void validate(const CohortSpec& spec) {
  if (spec.users_per_class < 1) invalid_spec("users_per_class must be >= 1");
  if (spec.recordings_per_user < 1) invalid_spec("recordings_per_user must be >= 1");
  if (spec.frames.min < 1 || spec.frames.min > spec.frames.max)
    invalid_spec("frames range needs 1 <= min <= max");
  if (!(spec.frame_rate > 0) || !std::isfinite(spec.frame_rate))
    invalid_spec("frame_rate must be positive");
  if (!(spec.noise_scale >= 0) || !std::isfinite(spec.noise_scale))
    invalid_spec("noise_scale must be finite and non-negative");
  validate(spec.base);
  std::vector<std::string> names;
  for (const PlantedAttribute& attr : spec.planted) {
    if (attr.name.empty()) invalid_spec("planted attribute needs a name");
    if (std::find(names.begin(), names.end(), attr.name) != names.end())
      invalid_spec("duplicate planted attribute " + attr.name);
    names.push_back(attr.name);
    if (!(attr.effect >= 0) || !std::isfinite(attr.effect))
      invalid_spec(attr.name + ": effect size must be finite and non-negative");
  }
}

std::vector<std::vector<bool>> planted_labels(const CohortSpec& spec) {
  const std::size_t n = 2 * spec.users_per_class;
  std::vector<std::vector<bool>> labels;
  for (const PlantedAttribute& attr : spec.planted) {
    std::vector<int> assign(n, 0);
    for (std::size_t i = spec.users_per_class; i < n; ++i) assign[i] = 1;
    Rng rng(derive_seed(spec.seed, "labels:" + attr.name));
    rng.shuffle(assign);
    labels.emplace_back(assign.begin(), assign.end());
  }
  return labels;
}

MotionProfile drawn_profile(const CohortSpec& spec,
                            const std::vector<bool>& class_b_per_attr,
                            std::uint64_t user_seed) {
  MotionProfile p = spec.base;
  for (std::size_t i = 0; i < spec.planted.size(); ++i) {
    const PlantedAttribute& attr = spec.planted[i];
    const double sign = class_b_per_attr.at(i) ? 0.5 : -0.5;
    Rng rng(derive_seed(user_seed, "param:" + attr.name));
    const double value = sign * attr.effect + rng.normal(0.0, class_sd(attr.kind));
    switch (attr.kind) {
      case SignalKind::HeadHeight: p.head_height += value; break;
      case SignalKind::OscFrequency: p.osc_frequency += value; break;
      case SignalKind::OscAmplitude: p.osc_amplitude += value; break;
    }
  }
  p.head_height = clampd(p.head_height, kMinHeadHeight, kMaxHeadHeight);
  p.osc_frequency = clampd(p.osc_frequency, kMinFrequency, kMaxFrequency);
  p.osc_amplitude = clampd(p.osc_amplitude, kMinAmplitude, kMaxAmplitude);
  return p;
}

std::vector<Recording> generate_user(const MotionProfile& profile,
                                     std::uint64_t user_seed,
                                     std::size_t n_recordings, FramesRange frames,
                                     double frame_rate, double noise_scale,
                                     const std::string& user_id) {
  validate(profile);
  if (frames.min < 1 || frames.min > frames.max)
    invalid_spec("frames range needs 1 <= min <= max");
  if (!(frame_rate > 0) || !std::isfinite(frame_rate))
    invalid_spec("frame_rate must be positive");

  const double noise = noise_scale * profile.jitter;
  const double dt = 1.0 / frame_rate;
  const double shoulder_y = profile.head_height - 0.22;
  // arc radius cannot exceed the arm's reach
  const double radius = std::min(profile.osc_amplitude, 0.9 * profile.arm_length);
  const std::int32_t fps = static_cast<std::int32_t>(std::lround(frame_rate));

  std::vector<Recording> out;
  out.reserve(n_recordings);
  for (std::size_t r = 0; r < n_recordings; ++r) {
    Rng rng(derive_seed(user_seed, "rec:" + std::to_string(r)));
    const std::size_t n =
        frames.min + static_cast<std::size_t>(rng.next_below(frames.max - frames.min + 1));

    const double phase_head = rng.uniform(0.0, 2 * kPi);
    const double phase_left = rng.uniform(0.0, 2 * kPi);
    const double phase_right = rng.uniform(0.0, 2 * kPi);
    const double tilt_left = rng.normal(0.0, 0.15);
    const double tilt_right = rng.normal(0.0, 0.15);

    Recording rec;
    rec.user_id = user_id;
    rec.recording_id = user_id + "-r" + std::to_string(r);
    rec.metadata["platform"] = "synthetic";
    rec.metadata["hmd"] = "SynthHMD";

    double walk_y = 0, walk_x = 0, walk_z = 0;
    rec.frames.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) * dt;
      // the 0.995 leak bounds the walk so mean head y stays at the profile
      walk_y = 0.995 * walk_y + rng.normal(0.0, noise * 0.05);
      walk_x = 0.995 * walk_x + rng.normal(0.0, noise * 0.05);
      walk_z = 0.995 * walk_z + rng.normal(0.0, noise * 0.05);

      Frame f;
      f.time = static_cast<float>(t);
      f.fps = fps;

      const DVec head_pos{
          0.02 * std::sin(2 * kPi * 0.07 * t + phase_head) + walk_x +
              rng.normal(0.0, noise * 0.3),
          profile.head_height + 0.015 * std::sin(2 * kPi * 0.4 * t + phase_head) +
              walk_y + rng.normal(0.0, noise * 0.3),
          0.01 * std::sin(2 * kPi * 0.05 * t) + walk_z + rng.normal(0.0, noise * 0.3)};
      f.head.position = narrowed(head_pos);
      f.head.orientation = yaw_pitch(0.15 * std::sin(2 * kPi * 0.05 * t + phase_head),
                                     0.10 * std::sin(2 * kPi * 0.03 * t));

      const struct {
        double side, phase, tilt;
        Pose* pose;
      } hands[2] = {{-1.0, phase_left, tilt_left, &f.left_hand},
                    {+1.0, phase_right, tilt_right, &f.right_hand}};
      for (const auto& h : hands) {
        const DVec u1{std::cos(h.tilt), 0.0, std::sin(h.tilt)};
        const DVec u2{0.0, 1.0, 0.0};
        const double theta = 2 * kPi * profile.osc_frequency * t + h.phase;
        const DVec center{h.side * 0.22, shoulder_y, 0.35};
        const DVec pos{
            center.x + radius * (std::cos(theta) * u1.x + std::sin(theta) * u2.x) +
                rng.normal(0.0, noise),
            center.y + radius * (std::cos(theta) * u1.y + std::sin(theta) * u2.y) +
                rng.normal(0.0, noise),
            center.z + radius * (std::cos(theta) * u1.z + std::sin(theta) * u2.z) +
                rng.normal(0.0, noise)};
        h.pose->position = narrowed(pos);
        // tangent of the arc: the direction the hand is moving
        const DVec vel{-std::sin(theta) * u1.x + std::cos(theta) * u2.x,
                       -std::sin(theta) * u1.y + std::cos(theta) * u2.y,
                       -std::sin(theta) * u1.z + std::cos(theta) * u2.z};
        h.pose->orientation = facing(normalized(vel));
      }
      rec.frames.push_back(f);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

std::string user_name(std::size_t idx) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "u%03zu", idx);
  return buf;
}

}  // namespace

GeneratedCohort generate_cohort(const CohortSpec& spec, const std::string& out_dir) {
  validate(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "replays", ec);
  if (ec)
    throw SynthError(SynthError::Kind::IoError,
                     "cannot create " + out_dir + ": " + ec.message());

  const std::size_t n_users = 2 * spec.users_per_class;
  const std::vector<std::vector<bool>> labels = planted_labels(spec);

  struct UserRows {
    std::string manifest, survey;
  };
  std::vector<UserRows> rows(n_users);
  bool io_failed = false;
  std::string io_message;

// each user is an independent seeded stream; file writes touch distinct paths
#pragma omp parallel for schedule(dynamic)
  for (std::size_t u = 0; u < n_users; ++u) {
    const std::string uid = user_name(u);
    const std::uint64_t user_seed = derive_seed(spec.seed, "user:" + uid);
    std::vector<bool> classes(spec.planted.size());
    for (std::size_t a = 0; a < spec.planted.size(); ++a) classes[a] = labels[a][u];
    const MotionProfile profile = drawn_profile(spec, classes, user_seed);

    const std::vector<Recording> recs =
        generate_user(profile, user_seed, spec.recordings_per_user, spec.frames,
                      spec.frame_rate, spec.noise_scale, uid);

    std::ostringstream manifest;
    for (std::size_t r = 0; r < recs.size(); ++r) {
      const std::string rel = "replays/" + recs[r].recording_id + ".vmt";
      std::ofstream file(fs::path(out_dir) / rel, std::ios::binary);
      file << write_canonical(recs[r]);
      if (!file) {
#pragma omp critical
        {
          io_failed = true;
          io_message = "cannot write " + rel;
        }
        continue;
      }
      manifest << recs[r].user_id << '\t' << recs[r].recording_id << '\t' << rel
               << '\t' << 1700000000 + 3600 * r << '\n';
    }

    std::ostringstream survey;
    survey << uid;
    for (std::size_t a = 0; a < spec.planted.size(); ++a) {
      double value = 0;
      switch (spec.planted[a].kind) {
        case SignalKind::HeadHeight: value = profile.head_height; break;
        case SignalKind::OscFrequency: value = profile.osc_frequency; break;
        case SignalKind::OscAmplitude: value = profile.osc_amplitude; break;
      }
      survey << '\t' << (classes[a] ? "B" : "A") << '\t' << format_double(value);
    }
    survey << '\n';

    rows[u] = {manifest.str(), survey.str()};
  }
  if (io_failed) throw SynthError(SynthError::Kind::IoError, io_message);

  GeneratedCohort result;
  result.root = out_dir;
  result.manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
  result.survey_path = (fs::path(out_dir) / "survey.tsv").string();
  result.n_users = n_users;
  result.n_recordings = n_users * spec.recordings_per_user;

  std::ofstream manifest(result.manifest_path, std::ios::binary);
  manifest << "user_id\trecording_id\tpath\ttimestamp\n";
  for (const UserRows& r : rows) manifest << r.manifest;
  if (!manifest) throw SynthError(SynthError::Kind::IoError, "cannot write manifest");

  std::ofstream survey(result.survey_path, std::ios::binary);
  survey << "user_id";
  for (const PlantedAttribute& attr : spec.planted)
    survey << '\t' << attr.name << '\t' << attr.name << "_value";
  survey << '\n';
  for (const UserRows& r : rows) survey << r.survey;
  if (!survey) throw SynthError(SynthError::Kind::IoError, "cannot write survey");

  return result;
}

GeneratedCohort generate_null_cohort(const CohortSpec& spec, const std::string& out_dir) {
  CohortSpec null_spec = spec;
  for (PlantedAttribute& attr : null_spec.planted) attr.effect = 0;
  return generate_cohort(null_spec, out_dir);
}

}  // namespace vmlab::synth
