#pragma once

// Recording -> fixed-shape model input.
//
// Each frame contributes one row of 21 coordinates in the order
//   [head, left hand, right hand] x [px, py, pz, qx, qy, qz, qw]
// (the canonical text format's column order). The first `rows` frames are
// taken as-is, shorter recordings are zero-padded, and nothing is resampled,
// interpolated, or normalized. Frame time and fps are not features.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmlab/replay.hpp"

namespace vmlab {

class FeaturizeError : public std::runtime_error {
 public:
  explicit FeaturizeError(std::string recording_id)
      : std::runtime_error("recording '" + recording_id + "' has no frames"),
        recording_id_(std::move(recording_id)) {}
  const std::string& recording_id() const { return recording_id_; }

 private:
  std::string recording_id_;
};

struct FeatureMatrix {
  std::size_t rows = 0;        // sequence length (padded shape)
  std::size_t valid_rows = 0;  // rows holding real frames; the rest are zero
  static constexpr std::size_t kCols = 21;
  std::vector<float> values;  // rows x kCols, row-major

  float at(std::size_t r, std::size_t c) const { return values[r * kCols + c]; }
};

inline constexpr std::size_t kDefaultSeqLen = 1024;

/// One row per frame, truncated/zero-padded to `rows`. Throws FeaturizeError
/// on a frameless recording.
FeatureMatrix featurize_rows(const Recording& recording, std::size_t rows);

/// The fixed 1024-row model input.
inline FeatureMatrix featurize(const Recording& recording) {
  return featurize_rows(recording, kDefaultSeqLen);
}

/// Element-wise featurize; output order equals input order.
std::vector<FeatureMatrix> featurize_batch(const std::vector<Recording>& recordings,
                                           std::size_t rows = kDefaultSeqLen);

/// Fixture dump: one text line per row, full-precision floats.
std::string feature_matrix_text(const FeatureMatrix& m);

}  // namespace vmlab
