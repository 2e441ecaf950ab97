#include "vmlab/featurize.hpp"

namespace vmlab {

namespace {

void fill_row(float* row, const Frame& f) {
  const Pose* poses[] = {&f.head, &f.left_hand, &f.right_hand};
  std::size_t c = 0;
  for (const Pose* p : poses) {
    row[c++] = p->position.x;
    row[c++] = p->position.y;
    row[c++] = p->position.z;
    row[c++] = p->orientation.x;
    row[c++] = p->orientation.y;
    row[c++] = p->orientation.z;
    row[c++] = p->orientation.w;
  }
}

}  // namespace

FeatureMatrix featurize_rows(const Recording& recording, std::size_t rows) {
  if (recording.frames.empty()) throw FeaturizeError(recording.recording_id);
  FeatureMatrix m;
  m.rows = rows;
  m.valid_rows = std::min(recording.frames.size(), rows);
  m.values.assign(rows * FeatureMatrix::kCols, 0.0f);
  for (std::size_t i = 0; i < m.valid_rows; ++i)
    fill_row(m.values.data() + i * FeatureMatrix::kCols, recording.frames[i]);
  return m;
}

std::vector<FeatureMatrix> featurize_batch(const std::vector<Recording>& recordings,
                                           std::size_t rows) {
  // Validate up front so the parallel loop below cannot throw.
  for (const Recording& r : recordings)
    if (r.frames.empty()) throw FeaturizeError(r.recording_id);

  std::vector<FeatureMatrix> out(recordings.size());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(recordings.size()); ++i)
    out[i] = featurize_rows(recordings[i], rows);
  return out;
}

std::string feature_matrix_text(const FeatureMatrix& m) {
  std::string out;
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < FeatureMatrix::kCols; ++c) {
      if (c) out += ' ';
      out += format_float(m.at(r, c));
    }
    out += '\n';
  }
  return out;
}

}  // namespace vmlab
