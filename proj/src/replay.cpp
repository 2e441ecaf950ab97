#include "vmlab/replay.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "BSOR I/O assumes a little-endian host");

namespace vmlab {

namespace {

constexpr std::uint32_t kMagic = 0x442D3D69u;
constexpr std::uint8_t kVersion = 1;

constexpr std::size_t kFrameBytes = 4 + 4 + 3 * 7 * 4;

// Info section fields beyond playerID (-> user_id) and timestamp
// (-> recording_id), in file order.
enum class FieldType { Str, I32, F32, Bool };
struct InfoField {
  const char* name;
  FieldType type;
};

constexpr InfoField kInfoTail[] = {
    {"playerName", FieldType::Str},  {"platform", FieldType::Str},
    {"trackingSystem", FieldType::Str}, {"hmd", FieldType::Str},
    {"controller", FieldType::Str},  {"hash", FieldType::Str},
    {"songName", FieldType::Str},    {"mapper", FieldType::Str},
    {"difficulty", FieldType::Str},  {"score", FieldType::I32},
    {"mode", FieldType::Str},        {"environment", FieldType::Str},
    {"modifiers", FieldType::Str},   {"jumpDistance", FieldType::F32},
    {"leftHanded", FieldType::Bool}, {"height", FieldType::F32},
    {"startTime", FieldType::F32},   {"failTime", FieldType::F32},
    {"speed", FieldType::F32},
};

[[noreturn]] void fail(ReplayError::Kind kind, const std::string& msg) {
  throw ReplayError(kind, msg);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool eof() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n)
      fail(ReplayError::Kind::TruncatedSection,
           std::string("truncated ") + what + " at offset " + std::to_string(pos_));
  }

  std::uint8_t u8(const char* what) {
    require(1, what);
    return bytes_[pos_++];
  }

  std::int32_t i32(const char* what) {
    require(4, what);
    std::int32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::int64_t i64(const char* what) {
    require(8, what);
    std::int64_t v;
    std::memcpy(&v, bytes_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }

  float f32(const char* what) {
    require(4, what);
    float v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::string str(const char* what) {
    const std::int32_t len = i32(what);
    if (len < 0 || static_cast<std::size_t>(len) > remaining())
      fail(ReplayError::Kind::TruncatedSection,
           std::string("string length ") + std::to_string(len) + " exceeds remaining input in " + what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_),
                  static_cast<std::size_t>(len));
    pos_ += static_cast<std::size_t>(len);
    return s;
  }

  void skip(std::size_t n, const char* what) {
    require(n, what);
    pos_ += n;
  }

  // Validated element count: non-negative and count*item_bytes within input.
  std::size_t count(std::size_t item_bytes, const char* what) {
    const std::int32_t raw = i32(what);
    if (raw < 0 || static_cast<std::size_t>(raw) > remaining() / item_bytes)
      fail(ReplayError::Kind::TruncatedSection,
           std::string(what) + " count " + std::to_string(raw) +
               " exceeds remaining input");
    return static_cast<std::size_t>(raw);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void f32(float v) { raw(&v, 4); }
  void str(const std::string& s) {
    i32(static_cast<std::int32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> out_;
};

void check_finite(const Frame& f, std::size_t index) {
  const float coords[] = {f.time,
                          f.head.position.x, f.head.position.y, f.head.position.z,
                          f.head.orientation.x, f.head.orientation.y,
                          f.head.orientation.z, f.head.orientation.w,
                          f.left_hand.position.x, f.left_hand.position.y,
                          f.left_hand.position.z, f.left_hand.orientation.x,
                          f.left_hand.orientation.y, f.left_hand.orientation.z,
                          f.left_hand.orientation.w,
                          f.right_hand.position.x, f.right_hand.position.y,
                          f.right_hand.position.z, f.right_hand.orientation.x,
                          f.right_hand.orientation.y, f.right_hand.orientation.z,
                          f.right_hand.orientation.w};
  for (float v : coords)
    if (!std::isfinite(v))
      fail(ReplayError::Kind::NonFiniteValue,
           "non-finite value in frame " + std::to_string(index));
}

float quat_norm(const Quat& q) {
  return std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z + q.w * q.w);
}

Pose read_pose(ByteReader& r) {
  Pose p;
  p.position.x = r.f32("pose");
  p.position.y = r.f32("pose");
  p.position.z = r.f32("pose");
  p.orientation.x = r.f32("pose");
  p.orientation.y = r.f32("pose");
  p.orientation.z = r.f32("pose");
  p.orientation.w = r.f32("pose");
  return p;
}

void write_pose(ByteWriter& w, const Pose& p) {
  w.f32(p.position.x);
  w.f32(p.position.y);
  w.f32(p.position.z);
  w.f32(p.orientation.x);
  w.f32(p.orientation.y);
  w.f32(p.orientation.z);
  w.f32(p.orientation.w);
}

void warn(std::vector<std::string>* warnings, std::string msg) {
  if (warnings) warnings->push_back(std::move(msg));
}

std::int32_t parse_i32_or_zero(const std::string& s) {
  std::int32_t v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

float parse_f32_or_zero(const std::string& s) {
  float v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

std::string meta_or(const Recording& r, const char* key, const char* dflt = "") {
  auto it = r.metadata.find(key);
  return it == r.metadata.end() ? std::string(dflt) : it->second;
}

}  // namespace

bool bits_equal(float a, float b) {
  return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
}

bool operator==(const Pose& a, const Pose& b) {
  return bits_equal(a.position.x, b.position.x) &&
         bits_equal(a.position.y, b.position.y) &&
         bits_equal(a.position.z, b.position.z) &&
         bits_equal(a.orientation.x, b.orientation.x) &&
         bits_equal(a.orientation.y, b.orientation.y) &&
         bits_equal(a.orientation.z, b.orientation.z) &&
         bits_equal(a.orientation.w, b.orientation.w);
}

bool operator==(const Frame& a, const Frame& b) {
  return bits_equal(a.time, b.time) && a.fps == b.fps && a.head == b.head &&
         a.left_hand == b.left_hand && a.right_hand == b.right_hand;
}

bool operator==(const Recording& a, const Recording& b) {
  return a.recording_id == b.recording_id && a.user_id == b.user_id &&
         a.frames == b.frames && a.metadata == b.metadata;
}

std::string format_float(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Recording parse_bsor(std::span<const std::uint8_t> bytes,
                     std::vector<std::string>* warnings) {
  ByteReader r(bytes);

  r.require(4, "magic");
  std::uint32_t magic;
  {
    std::int32_t m = r.i32("magic");
    std::memcpy(&magic, &m, 4);
  }
  if (magic != kMagic)
    fail(ReplayError::Kind::BadMagic, "bad magic word");

  const std::uint8_t version = r.u8("file version");
  if (version != kVersion)
    fail(ReplayError::Kind::UnsupportedVersion,
         "unsupported file version " + std::to_string(version));

  Recording rec;
  rec.metadata["fileVersion"] = std::to_string(version);

  bool prev_time_valid = false;
  float prev_time = 0;
  bool warned_nonmono = false;
  bool warned_negative = false;
  std::size_t quat_band_violations = 0;

  while (!r.eof()) {
    const std::uint8_t tag = r.u8("section tag");
    switch (tag) {
      case 0: {  // info
        rec.metadata["version"] = r.str("info");
        rec.metadata["gameVersion"] = r.str("info");
        rec.recording_id = r.str("info");  // timestamp field
        rec.user_id = r.str("info");       // playerID field
        for (const InfoField& f : kInfoTail) {
          switch (f.type) {
            case FieldType::Str:
              rec.metadata[f.name] = r.str("info");
              break;
            case FieldType::I32:
              rec.metadata[f.name] = std::to_string(r.i32("info"));
              break;
            case FieldType::F32:
              rec.metadata[f.name] = format_float(r.f32("info"));
              break;
            case FieldType::Bool:
              rec.metadata[f.name] = r.u8("info") ? "1" : "0";
              break;
          }
        }
        break;
      }
      case 1: {  // frames
        const std::size_t n = r.count(kFrameBytes, "frames");
        rec.frames.reserve(rec.frames.size() + n);
        for (std::size_t i = 0; i < n; ++i) {
          Frame f;
          f.time = r.f32("frame");
          f.fps = r.i32("frame");
          f.head = read_pose(r);
          f.left_hand = read_pose(r);
          f.right_hand = read_pose(r);
          check_finite(f, i);
          if (f.time < 0 && !warned_negative) {
            warn(warnings, "negative frame time " + format_float(f.time));
            warned_negative = true;
          }
          if (prev_time_valid && f.time < prev_time && !warned_nonmono) {
            warn(warnings, "non-monotonic frame times starting at frame " +
                               std::to_string(rec.frames.size()));
            warned_nonmono = true;
          }
          prev_time = f.time;
          prev_time_valid = true;
          for (const Quat* q :
               {&f.head.orientation, &f.left_hand.orientation, &f.right_hand.orientation}) {
            const float norm = quat_norm(*q);
            if (norm < 0.5f || norm > 2.0f) ++quat_band_violations;
          }
          rec.frames.push_back(f);
        }
        break;
      }
      case 2: {  // notes: variable-size entries, skipped
        const std::size_t n = r.count(16, "notes");
        for (std::size_t i = 0; i < n; ++i) {
          r.skip(4 + 4 + 4, "note");
          const std::int32_t event_type = r.i32("note");
          if (event_type == 0 || event_type == 1) r.skip(72, "note cut info");
        }
        break;
      }
      case 3: {  // walls
        const std::size_t n = r.count(16, "walls");
        r.skip(n * 16, "walls");
        break;
      }
      case 4: {  // heights
        const std::size_t n = r.count(8, "heights");
        r.skip(n * 8, "heights");
        break;
      }
      case 5: {  // pauses
        const std::size_t n = r.count(12, "pauses");
        r.skip(n * 12, "pauses");
        break;
      }
      default:
        warn(warnings, "unknown section tag " + std::to_string(tag) +
                           " at offset " + std::to_string(r.pos() - 1) +
                           "; skipping rest of file");
        return rec;
    }
  }

  if (quat_band_violations > 0)
    warn(warnings, std::to_string(quat_band_violations) +
                       " orientation(s) outside the [0.5, 2.0] norm band");
  return rec;
}

std::vector<std::uint8_t> write_bsor(const Recording& recording) {
  for (std::size_t i = 0; i < recording.frames.size(); ++i)
    check_finite(recording.frames[i], i);

  ByteWriter w;
  w.i32(static_cast<std::int32_t>(kMagic));
  w.u8(kVersion);

  w.u8(0);  // info
  w.str(meta_or(recording, "version"));
  w.str(meta_or(recording, "gameVersion"));
  w.str(recording.recording_id);
  w.str(recording.user_id);
  for (const InfoField& f : kInfoTail) {
    const std::string v = meta_or(recording, f.name);
    switch (f.type) {
      case FieldType::Str:
        w.str(v);
        break;
      case FieldType::I32:
        w.i32(parse_i32_or_zero(v));
        break;
      case FieldType::F32:
        w.f32(parse_f32_or_zero(v));
        break;
      case FieldType::Bool:
        w.u8(v == "1" || v == "true" ? 1 : 0);
        break;
    }
  }

  w.u8(1);  // frames
  w.i32(static_cast<std::int32_t>(recording.frames.size()));
  for (const Frame& f : recording.frames) {
    w.f32(f.time);
    w.i32(f.fps);
    write_pose(w, f.head);
    write_pose(w, f.left_hand);
    write_pose(w, f.right_hand);
  }
  return w.take();
}

namespace {

bool is_bare_id_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.' || c == ':';
}

bool needs_quoting(const std::string& s) {
  if (s.empty()) return true;
  for (char c : s)
    if (!is_bare_id_char(c)) return true;
  return false;
}

void append_quoted(std::string& out, const std::string& s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  out += '"';
}

void append_token(std::string& out, const std::string& s) {
  if (needs_quoting(s))
    append_quoted(out, s);
  else
    out += s;
}

struct TokenCursor {
  std::string_view line;
  std::size_t pos = 0;

  void skip_ws() {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
  }

  bool done() {
    skip_ws();
    return pos >= line.size();
  }

  // Reads either a bare token (up to whitespace) or a quoted string.
  std::string token() {
    skip_ws();
    if (pos >= line.size())
      fail(ReplayError::Kind::MalformedRecord, "unexpected end of line");
    if (line[pos] == '"') return quoted();
    const std::size_t start = pos;
    while (pos < line.size() && line[pos] != ' ' && line[pos] != '\t') ++pos;
    return std::string(line.substr(start, pos - start));
  }

  std::string quoted() {
    ++pos;  // opening quote
    std::string out;
    while (true) {
      if (pos >= line.size())
        fail(ReplayError::Kind::MalformedRecord, "unterminated quoted string");
      char c = line[pos++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (pos >= line.size())
        fail(ReplayError::Kind::MalformedRecord, "dangling escape");
      char e = line[pos++];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 'r': out += '\r'; break;
        case 't': out += '\t'; break;
        case 'u': {
          if (pos + 4 > line.size())
            fail(ReplayError::Kind::MalformedRecord, "bad \\u escape");
          unsigned code = 0;
          for (int i = 0; i < 4; ++i) {
            char h = line[pos++];
            code <<= 4;
            if (h >= '0' && h <= '9') code |= static_cast<unsigned>(h - '0');
            else if (h >= 'a' && h <= 'f') code |= static_cast<unsigned>(h - 'a' + 10);
            else if (h >= 'A' && h <= 'F') code |= static_cast<unsigned>(h - 'A' + 10);
            else fail(ReplayError::Kind::MalformedRecord, "bad \\u escape");
          }
          if (code > 0xFF)
            fail(ReplayError::Kind::MalformedRecord, "\\u escape out of byte range");
          out += static_cast<char>(code);
          break;
        }
        default:
          fail(ReplayError::Kind::MalformedRecord, "unknown escape");
      }
    }
  }
};

float parse_f32_strict(const std::string& tok, const char* what) {
  float v;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    fail(ReplayError::Kind::MalformedRecord,
         std::string("bad ") + what + " value '" + tok + "'");
  if (!std::isfinite(v))
    fail(ReplayError::Kind::MalformedRecord,
         std::string("non-finite ") + what + " value '" + tok + "'");
  return v;
}

std::int32_t parse_i32_strict(const std::string& tok, const char* what) {
  std::int32_t v;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    fail(ReplayError::Kind::MalformedRecord,
         std::string("bad ") + what + " value '" + tok + "'");
  return v;
}

}  // namespace

std::string write_canonical(const Recording& recording) {
  for (std::size_t i = 0; i < recording.frames.size(); ++i)
    check_finite(recording.frames[i], i);

  std::string out;
  out += "H ";
  append_token(out, recording.recording_id);
  out += ' ';
  append_token(out, recording.user_id);
  for (const auto& [key, value] : recording.metadata) {
    if (key.empty() || needs_quoting(key))
      fail(ReplayError::Kind::MalformedRecord,
           "metadata key '" + key + "' is not a bare token");
    out += ' ';
    out += key;
    out += '=';
    append_token(out, value);
  }
  out += '\n';

  for (const Frame& f : recording.frames) {
    out += "F ";
    out += format_float(f.time);
    out += ' ';
    out += std::to_string(f.fps);
    for (const Pose* p : {&f.head, &f.left_hand, &f.right_hand}) {
      out += ' ';
      out += format_float(p->position.x);
      out += ' ';
      out += format_float(p->position.y);
      out += ' ';
      out += format_float(p->position.z);
      out += ' ';
      out += format_float(p->orientation.x);
      out += ' ';
      out += format_float(p->orientation.y);
      out += ' ';
      out += format_float(p->orientation.z);
      out += ' ';
      out += format_float(p->orientation.w);
    }
    out += '\n';
  }
  return out;
}

Recording read_canonical(std::string_view text) {
  Recording rec;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;

  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos
                                                 ? std::string_view::npos
                                                 : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    TokenCursor cur{line};
    if (cur.done()) continue;

    const std::string kind = cur.token();
    if (!have_header) {
      if (kind != "H")
        fail(ReplayError::Kind::MissingHeader,
             "first record must be a header line");
      rec.recording_id = cur.token();
      rec.user_id = cur.token();
      while (!cur.done()) {
        std::string key;
        while (cur.pos < line.size() && line[cur.pos] != '=' &&
               line[cur.pos] != ' ' && line[cur.pos] != '\t')
          key += line[cur.pos++];
        if (key.empty() || cur.pos >= line.size() || line[cur.pos] != '=')
          fail(ReplayError::Kind::MalformedRecord,
               "bad metadata token on line " + std::to_string(line_no));
        ++cur.pos;  // '='
        std::string value;
        if (cur.pos < line.size() && line[cur.pos] == '"') {
          value = cur.quoted();
        } else {
          while (cur.pos < line.size() && line[cur.pos] != ' ' && line[cur.pos] != '\t')
            value += line[cur.pos++];
        }
        rec.metadata[key] = value;
      }
      have_header = true;
      continue;
    }

    if (kind != "F")
      fail(ReplayError::Kind::MalformedRecord,
           "unknown record '" + kind + "' on line " + std::to_string(line_no));

    std::vector<std::string> toks;
    while (!cur.done()) toks.push_back(cur.token());
    if (toks.size() != 23)
      fail(ReplayError::Kind::MalformedRecord,
           "frame line " + std::to_string(line_no) + " has " +
               std::to_string(toks.size()) + " fields, expected 23");

    Frame f;
    f.time = parse_f32_strict(toks[0], "time");
    f.fps = parse_i32_strict(toks[1], "fps");
    float* coords[] = {
        &f.head.position.x, &f.head.position.y, &f.head.position.z,
        &f.head.orientation.x, &f.head.orientation.y, &f.head.orientation.z,
        &f.head.orientation.w,
        &f.left_hand.position.x, &f.left_hand.position.y, &f.left_hand.position.z,
        &f.left_hand.orientation.x, &f.left_hand.orientation.y,
        &f.left_hand.orientation.z, &f.left_hand.orientation.w,
        &f.right_hand.position.x, &f.right_hand.position.y,
        &f.right_hand.position.z, &f.right_hand.orientation.x,
        &f.right_hand.orientation.y, &f.right_hand.orientation.z,
        &f.right_hand.orientation.w};
    for (int i = 0; i < 21; ++i) *coords[i] = parse_f32_strict(toks[2 + i], "coordinate");
    rec.frames.push_back(f);
  }

  if (!have_header)
    fail(ReplayError::Kind::MissingHeader, "no header line found");
  return rec;
}

std::vector<std::string> validate(const Recording& recording) {
  std::vector<std::string> issues;
  float prev_time = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < recording.frames.size(); ++i) {
    const Frame& f = recording.frames[i];
    try {
      check_finite(f, i);
    } catch (const ReplayError& e) {
      issues.push_back(e.what());
      continue;
    }
    if (f.time < 0)
      issues.push_back("frame " + std::to_string(i) + " has negative time");
    if (f.time < prev_time)
      issues.push_back("frame " + std::to_string(i) + " time decreases");
    prev_time = f.time;
    for (const Quat* q :
         {&f.head.orientation, &f.left_hand.orientation, &f.right_hand.orientation}) {
      const float n = quat_norm(*q);
      if (n < 0.5f || n > 2.0f)
        issues.push_back("frame " + std::to_string(i) +
                         " orientation norm outside [0.5, 2.0]");
    }
  }
  return issues;
}

}  // namespace vmlab
