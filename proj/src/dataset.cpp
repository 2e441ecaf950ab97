#include "vmlab/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vmlab/rng.hpp"

namespace vmlab::dataset {

namespace {

using nlohmann::json;

[[noreturn]] void parse_fail(const std::string& msg) {
  throw DatasetError(DatasetError::Kind::ParseError, msg);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

std::optional<double> parse_number(std::string_view raw) {
  const std::string_view t = trim(raw);
  if (t.empty()) return std::nullopt;
  double v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size() || !std::isfinite(v))
    return std::nullopt;
  return v;
}

std::optional<std::int64_t> parse_int(std::string_view raw) {
  const std::string_view t = trim(raw);
  if (t.empty()) return std::nullopt;
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

}  // namespace

DatasetError DatasetError::insufficient_users(char cls, std::size_t have,
                                              std::size_t need) {
  DatasetError e(Kind::InsufficientUsers,
                 std::string("class ") + cls + " has " + std::to_string(have) +
                     " eligible users, needs " + std::to_string(need));
  e.class_label = cls;
  e.have = have;
  e.need = need;
  return e;
}

DatasetError DatasetError::empty_class(char cls) {
  DatasetError e(Kind::EmptyClass,
                 std::string("class ") + cls + " has no training recordings");
  e.class_label = cls;
  return e;
}

// ---- survey table ------------------------------------------------------------

std::optional<std::string> SurveyTable::value(const std::string& user_id,
                                              const std::string& attribute) const {
  const auto row = rows.find(user_id);
  if (row == rows.end()) return std::nullopt;
  const auto cell = row->second.find(attribute);
  if (cell == row->second.end()) return std::nullopt;
  return cell->second;
}

SurveyTable read_survey_tsv(std::istream& in) {
  SurveyTable table;
  std::string line;
  if (!std::getline(in, line)) parse_fail("survey: empty input");
  const std::vector<std::string> header = split_tabs(strip_cr(line));
  if (header.empty() || header[0] != "user_id")
    parse_fail("survey: header must start with user_id");
  std::set<std::string> seen_attr;
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i].empty()) parse_fail("survey: empty attribute name in header");
    if (!seen_attr.insert(header[i]).second)
      parse_fail("survey: duplicate attribute " + header[i]);
    table.attributes.push_back(header[i]);
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_tabs(line);
    if (cells.size() > header.size())
      parse_fail("survey line " + std::to_string(line_no) + ": more cells than header columns");
    if (cells[0].empty())
      parse_fail("survey line " + std::to_string(line_no) + ": empty user_id");
    if (table.rows.count(cells[0]))
      parse_fail("survey line " + std::to_string(line_no) + ": duplicate user " + cells[0]);
    std::map<std::string, std::string>& row = table.rows[cells[0]];
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (cells[i].empty()) continue;  // missing answer: no entry at all
      row[table.attributes[i - 1]] = cells[i];
    }
  }
  return table;
}

SurveyTable read_survey_tsv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_fail("cannot open survey file " + path);
  return read_survey_tsv(in);
}

// ---- attribute specs ---------------------------------------------------------

namespace {

Rule parse_rule(const json& j) {
  if (!j.is_object()) parse_fail("rule must be a JSON object");
  Rule r;
  const std::string kind = j.value("kind", "");
  r.field = j.value("field", "");
  if (kind == "values") {
    r.kind = Rule::Kind::Values;
    if (!j.contains("values") || !j["values"].is_array() || j["values"].empty())
      parse_fail("values rule needs a non-empty \"values\" array");
    for (const auto& v : j["values"]) {
      if (!v.is_string()) parse_fail("values rule entries must be strings");
      r.values.push_back(v.get<std::string>());
    }
    const std::string match = j.value("match", "exact");
    if (match == "token") r.token_match = true;
    else if (match != "exact") parse_fail("values rule: match must be exact or token");
  } else if (kind == "range") {
    r.kind = Rule::Kind::Range;
    if (j.contains("min")) {
      if (!j["min"].is_number()) parse_fail("range rule: min must be a number");
      r.min = j["min"].get<double>();
    }
    if (j.contains("max")) {
      if (!j["max"].is_number()) parse_fail("range rule: max must be a number");
      r.max = j["max"].get<double>();
    }
    if (!r.min && !r.max) parse_fail("range rule needs min and/or max");
    if (r.min && r.max && *r.min > *r.max) parse_fail("range rule: min exceeds max");
    r.min_closed = j.value("min_closed", true);
    r.max_closed = j.value("max_closed", false);
  } else if (kind == "all" || kind == "any") {
    r.kind = kind == "all" ? Rule::Kind::All : Rule::Kind::Any;
    if (!j.contains("rules") || !j["rules"].is_array() || j["rules"].empty())
      parse_fail(kind + " rule needs a non-empty \"rules\" array");
    for (const auto& child : j["rules"]) r.children.push_back(parse_rule(child));
  } else {
    parse_fail("rule kind must be values, range, all, or any (got \"" + kind + "\")");
  }
  return r;
}

bool in_range(const Rule& r, double x) {
  if (r.min && !(x > *r.min || (x == *r.min && r.min_closed))) return false;
  if (r.max && !(x < *r.max || (x == *r.max && r.max_closed))) return false;
  return true;
}

const std::string& leaf_field(const Rule& r, const AttributeSpec& spec) {
  if (!r.field.empty()) return r.field;
  return spec.field;
}

// Disjunction expansion: a list of leaves such that the rule matches iff any
// leaf matches. Unavailable (nullopt) when an `all` combinator is involved.
std::optional<std::vector<const Rule*>> expand_any(const Rule& r) {
  if (r.kind == Rule::Kind::All) return std::nullopt;
  if (r.kind != Rule::Kind::Any) return std::vector<const Rule*>{&r};
  std::vector<const Rule*> leaves;
  for (const Rule& child : r.children) {
    auto sub = expand_any(child);
    if (!sub) return std::nullopt;
    leaves.insert(leaves.end(), sub->begin(), sub->end());
  }
  return leaves;
}

[[noreturn]] void conflict(const AttributeSpec& spec, const std::string& why) {
  throw DatasetError(DatasetError::Kind::RuleConflict,
                     spec.name + ": class rules overlap (" + why + ")");
}

void check_leaf_pair(const AttributeSpec& spec, const Rule& a, const Rule& b) {
  if (leaf_field(a, spec) != leaf_field(b, spec)) return;
  if (a.kind == Rule::Kind::Values && b.kind == Rule::Kind::Values) {
    for (const std::string& v : a.values)
      if (std::find(b.values.begin(), b.values.end(), v) != b.values.end())
        conflict(spec, "both classes accept \"" + v + "\"");
  } else if (a.kind == Rule::Kind::Range && b.kind == Rule::Kind::Range) {
    const double lo = std::max(a.min.value_or(-std::numeric_limits<double>::infinity()),
                               b.min.value_or(-std::numeric_limits<double>::infinity()));
    const double hi = std::min(a.max.value_or(std::numeric_limits<double>::infinity()),
                               b.max.value_or(std::numeric_limits<double>::infinity()));
    if (lo < hi || (lo == hi && in_range(a, lo) && in_range(b, lo)))
      conflict(spec, "numeric intervals intersect");
  } else {
    const Rule& vals = a.kind == Rule::Kind::Values ? a : b;
    const Rule& range = a.kind == Rule::Kind::Values ? b : a;
    for (const std::string& v : vals.values)
      if (const auto x = parse_number(v); x && in_range(range, *x))
        conflict(spec, "value \"" + v + "\" lies inside the other class's interval");
  }
}

}  // namespace

void validate_disjoint(const AttributeSpec& spec) {
  const auto a = expand_any(spec.class_a);
  const auto b = expand_any(spec.class_b);
  if (!a || !b) return;  // conjunctions: not statically decidable
  for (const Rule* la : *a)
    for (const Rule* lb : *b) check_leaf_pair(spec, *la, *lb);
}

AttributeSpec parse_attribute_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    parse_fail(std::string("attribute spec: ") + e.what());
  }
  if (!j.is_object()) parse_fail("attribute spec must be a JSON object");
  AttributeSpec spec;
  spec.name = j.value("name", "");
  if (spec.name.empty()) parse_fail("attribute spec needs a name");
  spec.field = j.value("field", spec.name);
  spec.units = j.value("units", "");
  if (!j.contains("class_a") || !j.contains("class_b"))
    parse_fail(spec.name + ": attribute spec needs class_a and class_b rules");
  try {
    spec.class_a = parse_rule(j["class_a"]);
    spec.class_b = parse_rule(j["class_b"]);
  } catch (const json::exception& e) {
    parse_fail(spec.name + ": " + e.what());
  }
  validate_disjoint(spec);
  return spec;
}

AttributeSpec load_attribute_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_fail("cannot open attribute spec " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_attribute_spec(text.str());
}

// ---- binarize ----------------------------------------------------------------

namespace {

void collect_fields(const Rule& r, const AttributeSpec& spec,
                    std::set<std::string>& out) {
  if (r.kind == Rule::Kind::All || r.kind == Rule::Kind::Any) {
    for (const Rule& child : r.children) collect_fields(child, spec, out);
  } else {
    out.insert(leaf_field(r, spec));
  }
}

bool matches(const Rule& r, const AttributeSpec& spec,
             const std::map<std::string, std::string>& row) {
  switch (r.kind) {
    case Rule::Kind::All:
      for (const Rule& child : r.children)
        if (!matches(child, spec, row)) return false;
      return true;
    case Rule::Kind::Any:
      for (const Rule& child : r.children)
        if (matches(child, spec, row)) return true;
      return false;
    case Rule::Kind::Values: {
      const std::string& raw = row.at(leaf_field(r, spec));
      if (!r.token_match)
        return std::find(r.values.begin(), r.values.end(), raw) != r.values.end();
      std::size_t start = 0;
      while (start <= raw.size()) {
        std::size_t end = raw.find_first_of(";,", start);
        if (end == std::string::npos) end = raw.size();
        const std::string token(trim(std::string_view(raw).substr(start, end - start)));
        if (!token.empty() &&
            std::find(r.values.begin(), r.values.end(), token) != r.values.end())
          return true;
        start = end + 1;
      }
      return false;
    }
    case Rule::Kind::Range: {
      const std::string& raw = row.at(leaf_field(r, spec));
      const std::optional<double> x = parse_number(raw);
      if (!x)
        throw DatasetError(DatasetError::Kind::UnparsableValue,
                           spec.name + ": numeric rule on field \"" +
                               leaf_field(r, spec) + "\" cannot parse \"" + raw + "\"");
      return in_range(r, *x);
    }
  }
  return false;
}

}  // namespace

char to_char(BinLabel label) {
  switch (label) {
    case BinLabel::A: return 'A';
    case BinLabel::B: return 'B';
    case BinLabel::Rejected: return 'R';
    case BinLabel::Missing: return 'M';
  }
  return '?';
}

std::map<std::string, BinLabel> binarize(const SurveyTable& table,
                                         const AttributeSpec& spec) {
  std::set<std::string> fields;
  collect_fields(spec.class_a, spec, fields);
  collect_fields(spec.class_b, spec, fields);

  std::map<std::string, BinLabel> out;
  for (const auto& [user, row] : table.rows) {
    bool missing = false;
    for (const std::string& f : fields)
      if (!row.count(f)) {
        missing = true;
        break;
      }
    if (missing) {
      out[user] = BinLabel::Missing;
    } else if (matches(spec.class_a, spec, row)) {
      out[user] = BinLabel::A;
    } else if (matches(spec.class_b, spec, row)) {
      out[user] = BinLabel::B;
    } else {
      out[user] = BinLabel::Rejected;
    }
  }
  return out;
}

// ---- inventory ---------------------------------------------------------------

Inventory read_manifest(std::istream& in) {
  Inventory inv;
  std::string line;
  if (!std::getline(in, line)) parse_fail("manifest: empty input");
  if (strip_cr(line) != "user_id\trecording_id\tpath\ttimestamp")
    parse_fail("manifest: header must be user_id<TAB>recording_id<TAB>path<TAB>timestamp");

  std::set<std::pair<std::string, std::string>> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_tabs(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    if (cells.size() != 4) parse_fail(where + ": expected 4 columns");
    if (cells[0].empty() || cells[1].empty() || cells[2].empty())
      parse_fail(where + ": empty user_id, recording_id, or path");
    const std::optional<std::int64_t> ts = parse_int(cells[3]);
    if (!ts) parse_fail(where + ": bad timestamp \"" + cells[3] + "\"");
    if (!seen.insert({cells[0], cells[1]}).second)
      parse_fail(where + ": duplicate recording " + cells[1] + " for user " + cells[0]);
    inv.by_user[cells[0]].push_back({cells[1], cells[2], *ts});
  }
  return inv;
}

Inventory read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) parse_fail("cannot open manifest " + path);
  return read_manifest(in);
}

// ---- labeled users and splits --------------------------------------------------

std::vector<LabeledUser> labeled_users(const SurveyTable& table,
                                       const AttributeSpec& spec,
                                       const Inventory& inventory) {
  const std::map<std::string, BinLabel> labels = binarize(table, spec);
  std::vector<LabeledUser> out;
  for (const auto& [user, label] : labels) {
    if (label != BinLabel::A && label != BinLabel::B) continue;
    const auto recs = inventory.by_user.find(user);
    if (recs == inventory.by_user.end() || recs->second.empty()) continue;

    std::vector<RecordingRef> sorted = recs->second;
    std::sort(sorted.begin(), sorted.end(),
              [](const RecordingRef& x, const RecordingRef& y) {
                if (x.timestamp != y.timestamp) return x.timestamp > y.timestamp;
                return x.recording_id < y.recording_id;
              });
    if (sorted.size() > kMaxRecordingsPerUser) sorted.resize(kMaxRecordingsPerUser);

    LabeledUser u;
    u.user_id = user;
    u.label_b = label == BinLabel::B;
    for (const RecordingRef& ref : sorted) u.recording_ids.push_back(ref.recording_id);
    out.push_back(std::move(u));
  }
  return out;  // map iteration already sorted by user_id
}

SplitPlan make_split(const std::string& attribute,
                     const std::vector<LabeledUser>& labels,
                     std::uint64_t fold_seed, SplitCounts counts) {
  std::vector<const LabeledUser*> by_class[2];
  for (const LabeledUser& u : labels) by_class[u.label_b ? 1 : 0].push_back(&u);

  const std::size_t need = counts.test_per_class + counts.val_per_class;
  for (int cls = 0; cls < 2; ++cls)
    if (by_class[cls].size() < need)
      throw DatasetError::insufficient_users(cls ? 'B' : 'A', by_class[cls].size(), need);

  SplitPlan plan;
  plan.attribute = attribute;
  plan.fold_seed = fold_seed;
  Rng rng(fold_seed);
  std::set<std::string> held_out;
  for (int cls = 0; cls < 2; ++cls) {
    const auto draw = rng.sample_without_replacement(by_class[cls].size(), need);
    for (std::size_t i = 0; i < need; ++i) {
      const LabeledUser& u = *by_class[cls][draw[i]];
      (i < counts.test_per_class ? plan.test_users : plan.val_users).push_back(u);
      held_out.insert(u.user_id);
    }
  }
  for (const LabeledUser& u : labels)
    if (!held_out.count(u.user_id)) plan.train_users.push_back(u);
  return plan;
}

std::vector<SplitPlan> monte_carlo_folds(const std::string& attribute,
                                         const std::vector<LabeledUser>& labels,
                                         std::uint64_t base_seed, std::size_t k,
                                         SplitCounts counts) {
  std::vector<SplitPlan> plans;
  plans.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    plans.push_back(make_split(attribute, labels, base_seed + i, counts));
  return plans;
}

std::vector<TrainingSample> resample_training(const SplitPlan& plan,
                                              std::size_t n_per_class,
                                              std::uint64_t seed,
                                              std::size_t fold_index) {
  std::vector<TrainingSample> out;
  if (n_per_class == 0) return out;

  std::vector<const std::string*> recs[2];
  for (const LabeledUser& u : plan.train_users)
    for (const std::string& id : u.recording_ids)
      recs[u.label_b ? 1 : 0].push_back(&id);
  for (int cls = 0; cls < 2; ++cls)
    if (recs[cls].empty()) throw DatasetError::empty_class(cls ? 'B' : 'A');

  Rng rng(seed);
  out.reserve(2 * n_per_class);
  for (int cls = 0; cls < 2; ++cls)
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::size_t pick = static_cast<std::size_t>(rng.next_below(recs[cls].size()));
      out.push_back({*recs[cls][pick], cls == 1, fold_index});
    }
  rng.shuffle(out);
  return out;
}

}  // namespace vmlab::dataset
