#pragma once

// Motion replay I/O.
//
// Two formats are supported:
//
//  * BSOR v1, the binary replay container written by the BeatLeader mod.
//    Little-endian; layout:
//      int32  magic = 0x442D3D69
//      uint8  file version (only 1 is understood)
//      sections, each introduced by a uint8 tag:
//        0 info    fixed field list (strings are int32-length-prefixed UTF-8)
//        1 frames  int32 count, then per frame:
//                    float time; int32 fps;
//                    head, left hand, right hand each as
//                    3 position floats + 4 rotation floats (x, y, z, w)
//        2 notes / 3 walls / 4 heights / 5 pauses
//                  length-validated and skipped
//    An unknown trailing tag stops parsing with a warning instead of an
//    error, since section bodies of unknown layout cannot be sized.
//
//  * A canonical line-oriented text format used for fixtures and synthetic
//    data:
//      H <recording_id> <user_id> <key="value" ...>
//      F <time> <fps> <21 coordinates: head(px py pz qx qy qz qw) left right>
//    Numbers are written with shortest round-trip precision, so text
//    round-trips are bit-exact. Ids and values containing whitespace or
//    quotes are JSON-string quoted.
//
// BSOR has no dedicated replay-id field; the info section's playerID carries
// user_id and its timestamp carries recording_id. The remaining info fields
// live in Recording::metadata under their BSOR field names, numeric values
// formatted as decimal strings.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vmlab {

class ReplayError : public std::runtime_error {
 public:
  enum class Kind {
    BadMagic,
    UnsupportedVersion,
    TruncatedSection,
    NonFiniteValue,
    MalformedRecord,
    MissingHeader,
  };

  ReplayError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Vec3 {
  float x = 0, y = 0, z = 0;
};

struct Quat {
  float x = 0, y = 0, z = 0, w = 1;
};

struct Pose {
  Vec3 position;
  Quat orientation;
};

struct Frame {
  float time = 0;
  std::int32_t fps = 0;
  Pose head;
  Pose left_hand;
  Pose right_hand;
};

struct Recording {
  std::string recording_id;
  std::string user_id;
  std::vector<Frame> frames;
  std::map<std::string, std::string> metadata;
};

// Bitwise equality (distinguishes -0.0f from 0.0f; all coordinates are
// required finite, so NaN never enters the comparison).
bool bits_equal(float a, float b);
bool operator==(const Pose& a, const Pose& b);
bool operator==(const Frame& a, const Frame& b);
bool operator==(const Recording& a, const Recording& b);

/// Parses a complete BSOR byte buffer. Frames are returned in file order.
/// Non-fatal oddities (non-monotonic times, out-of-band quaternion norms,
/// unknown trailing sections) are appended to *warnings when given.
Recording parse_bsor(std::span<const std::uint8_t> bytes,
                     std::vector<std::string>* warnings = nullptr);

/// Serializes a Recording as a minimal BSOR v1 file (info + frames sections).
/// Throws NonFiniteValue if any coordinate or time is NaN/Inf. Metadata keys
/// outside the BSOR info schema are not representable and are dropped.
std::vector<std::uint8_t> write_bsor(const Recording& recording);

Recording read_canonical(std::string_view text);
std::string write_canonical(const Recording& recording);

/// Pose/Frame invariant check used by generators and tests: finite values,
/// times >= 0, quaternion norms inside the [0.5, 2.0] sanity band.
std::vector<std::string> validate(const Recording& recording);

/// Shortest decimal representation that parses back to the same float bits.
std::string format_float(float v);
std::string format_double(double v);

}  // namespace vmlab
