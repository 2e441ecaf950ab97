#include "vmlab/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "vmlab/featurize.hpp"
#include "vmlab/replay.hpp"
#include "vmlab/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace vmlab::engine {

namespace {

constexpr const char* kToolVersion = "1.0.0";
constexpr int kResultsVersion = 1;

[[noreturn]] void invalid(const std::string& msg) {
  throw EngineError(EngineError::Kind::InvalidConfig, msg);
}
[[noreturn]] void parse_fail(const std::string& msg) {
  throw EngineError(EngineError::Kind::ParseError, msg);
}
[[noreturn]] void io_fail(const std::string& msg) {
  throw EngineError(EngineError::Kind::IoError, msg);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) io_fail("read failed for '" + path + "'");
  return std::move(buf).str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) io_fail("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) io_fail("short write to '" + path.string() + "'");
}

json parse_json(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) parse_fail(what + ": malformed JSON");
  return j;
}

json load_json_file(const std::string& path) {
  return parse_json(read_file(path), path);
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// %.1f percent text for the human-readable report columns.
std::string percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", ratio * 100.0);
  return buf;
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      invalid(where + ": unknown key \"" + key + "\"");
  }
}

std::string resolve_against(const fs::path& base, const std::string& p) {
  fs::path fp(p);
  if (fp.is_absolute()) return fp.lexically_normal().string();
  return (base / fp).lexically_normal().string();
}

void assign_unique_slugs(std::vector<AttributeEntry>& attrs) {
  std::vector<std::string> taken;
  for (auto& a : attrs) {
    std::string slug = slugify(a.spec.name);
    std::string candidate = slug;
    for (int n = 2; std::find(taken.begin(), taken.end(), candidate) != taken.end(); ++n)
      candidate = slug + "_" + std::to_string(n);
    taken.push_back(candidate);
    a.slug = candidate;
  }
}

/// Shared by user config files and run_config.json: applies every field
/// present in `j` on top of the preset baseline. Relative paths resolve
/// against `base_dir`.
ExperimentConfig config_from_json(const json& j, const fs::path& base_dir,
                                  const CliOverrides& overrides) {
  if (!j.is_object()) invalid("experiment config must be a JSON object");
  reject_unknown_keys(j,
                      {"format", "version", "preset", "data", "attributes", "folds",
                       "model", "train_sequences_per_class", "split", "seed", "jobs",
                       "out"},
                      "experiment config");

  std::string preset = j.value("preset", std::string("paper"));
  if (overrides.preset) preset = *overrides.preset;
  ExperimentConfig cfg = preset_config(preset);

  if (!j.contains("data") || !j["data"].is_object())
    invalid("experiment config needs a \"data\" object");
  const json& data = j["data"];
  reject_unknown_keys(data, {"manifest", "survey", "replays"}, "data");
  if (!data.contains("manifest") || !data.contains("survey"))
    invalid("\"data\" needs \"manifest\" and \"survey\" paths");
  cfg.data.manifest = resolve_against(base_dir, data["manifest"].get<std::string>());
  cfg.data.survey = resolve_against(base_dir, data["survey"].get<std::string>());
  cfg.data.replay_root =
      data.contains("replays")
          ? resolve_against(base_dir, data["replays"].get<std::string>())
          : fs::path(cfg.data.manifest).parent_path().string();

  if (!j.contains("attributes") || !j["attributes"].is_array() || j["attributes"].empty())
    invalid("experiment config needs a non-empty \"attributes\" array");
  for (const json& entry : j["attributes"]) {
    std::string text;
    if (entry.is_string()) {
      const std::string spec_path = resolve_against(base_dir, entry.get<std::string>());
      text = read_file(spec_path);
    } else if (entry.is_object()) {
      text = entry.dump();
    } else {
      invalid("attribute entries must be spec file paths or inline spec objects");
    }
    AttributeEntry a;
    a.spec = dataset::parse_attribute_spec(text);
    a.source_text = parse_json(text, "attribute spec").dump();  // canonical key order
    cfg.attributes.push_back(std::move(a));
  }
  assign_unique_slugs(cfg.attributes);

  if (j.contains("folds")) cfg.folds = j["folds"].get<std::size_t>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("jobs")) cfg.jobs = j["jobs"].get<std::size_t>();
  if (j.contains("out")) cfg.out_dir = j["out"].get<std::string>();
  if (j.contains("train_sequences_per_class"))
    cfg.train_per_class = j["train_sequences_per_class"].get<std::size_t>();

  if (j.contains("split")) {
    const json& split = j["split"];
    reject_unknown_keys(split, {"test_users_per_class", "val_users_per_class"}, "split");
    if (split.contains("test_users_per_class"))
      cfg.split.test_per_class = split["test_users_per_class"].get<std::size_t>();
    if (split.contains("val_users_per_class"))
      cfg.split.val_per_class = split["val_users_per_class"].get<std::size_t>();
  }

  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown_keys(m,
                        {"seq_len", "embed_dim", "ffn_hidden", "n_layers", "n_heads",
                         "lr", "epochs", "batch_size", "input_layernorm", "pad_mask"},
                        "model");
    if (m.contains("seq_len")) cfg.model.seq_len = m["seq_len"].get<std::size_t>();
    if (m.contains("embed_dim")) cfg.model.embed_dim = m["embed_dim"].get<std::size_t>();
    if (m.contains("ffn_hidden")) cfg.model.ffn_hidden = m["ffn_hidden"].get<std::size_t>();
    if (m.contains("n_layers")) cfg.model.n_layers = m["n_layers"].get<std::size_t>();
    if (m.contains("n_heads")) cfg.model.n_heads = m["n_heads"].get<std::size_t>();
    if (m.contains("lr")) cfg.model.lr = m["lr"].get<double>();
    if (m.contains("epochs")) cfg.model.epochs = m["epochs"].get<std::size_t>();
    if (m.contains("batch_size")) cfg.model.batch_size = m["batch_size"].get<std::size_t>();
    if (m.contains("input_layernorm"))
      cfg.model.input_layernorm = m["input_layernorm"].get<bool>();
    if (m.contains("pad_mask")) cfg.model.pad_mask = m["pad_mask"].get<bool>();
  }

  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.jobs) cfg.jobs = *overrides.jobs;
  if (overrides.out) cfg.out_dir = *overrides.out;
  return cfg;
}

// ---- seed plumbing (one derivation scheme for run and null) --------------------

std::uint64_t fold_base_seed(const ExperimentConfig& cfg, const std::string& attr) {
  return derive_seed(cfg.seed, "folds:" + attr);
}
std::uint64_t model_seed(const ExperimentConfig& cfg, const std::string& attr,
                         std::size_t fold) {
  return derive_seed(cfg.seed, "model:" + attr + ":fold" + std::to_string(fold));
}
std::uint64_t resample_seed(const ExperimentConfig& cfg, const std::string& attr,
                            std::size_t fold) {
  return derive_seed(cfg.seed, "resample:" + attr + ":fold" + std::to_string(fold));
}

std::string job_key(const std::string& exp_hash, const AttributeEntry& attr,
                    std::size_t fold, std::uint64_t fold_seed, std::uint64_t mseed,
                    std::uint64_t rseed) {
  std::string text = exp_hash;
  text += "\nattribute=" + attr.source_text;
  text += "\nfold=" + std::to_string(fold);
  text += "\nfold_seed=" + std::to_string(fold_seed);
  text += "\nmodel_seed=" + std::to_string(mseed);
  text += "\nresample_seed=" + std::to_string(rseed);
  return hex16(fnv1a64(text));
}

json fold_predictions_to_json(const stats::FoldPredictions& p) {
  json seqs = json::array();
  for (const auto& s : p.sequences) seqs.push_back({s.prob, s.label_b ? 1 : 0});
  json users = json::array();
  for (const auto& u : p.users) users.push_back({u.user_id, u.score, u.label_b ? 1 : 0});
  return json{{"sequences", std::move(seqs)}, {"users", std::move(users)}};
}

stats::FoldPredictions fold_predictions_from_json(const json& j) {
  stats::FoldPredictions p;
  for (const json& s : j.at("sequences"))
    p.sequences.push_back({s.at(0).get<double>(), s.at(1).get<int>() != 0});
  for (const json& u : j.at("users"))
    p.users.push_back({u.at(0).get<std::string>(), u.at(1).get<double>(),
                       u.at(2).get<int>() != 0});
  return p;
}

struct LoadedRun {
  ExperimentConfig cfg;  // out_dir = the run directory
  std::string config_hash;
  json results;
};

LoadedRun load_run_dir(const fs::path& dir) {
  const fs::path cfg_path = dir / "run_config.json";
  const fs::path res_path = dir / "results.json";
  if (!fs::exists(cfg_path) || !fs::exists(res_path))
    parse_fail("'" + dir.string() + "' is not a completed run directory (missing " +
               std::string(fs::exists(cfg_path) ? "results.json" : "run_config.json") +
               ")");
  LoadedRun run;
  run.cfg = config_from_json(load_json_file(cfg_path.string()), dir, {});
  run.cfg.out_dir = dir.string();
  run.results = load_json_file(res_path.string());
  if (run.results.value("format", std::string()) != "vmlab-results")
    parse_fail(res_path.string() + ": not a results file");
  run.config_hash = run.results.value("config_hash", std::string());
  return run;
}

// ---- fold job --------------------------------------------------------------------

struct JobContext {
  const ExperimentConfig* cfg = nullptr;
  const std::map<std::string, const dataset::RecordingRef*>* rec_by_id = nullptr;
  FeatureStore* store = nullptr;
  std::string exp_hash;
};

const FeatureMatrix& features_for(const JobContext& ctx, const std::string& rec_id) {
  auto it = ctx.rec_by_id->find(rec_id);
  if (it == ctx.rec_by_id->end())
    parse_fail("recording id '" + rec_id + "' is not in the manifest");
  return ctx.store->get(*it->second);
}

FoldOutcome run_fold_job(const JobContext& ctx, const AttributeEntry& attr,
                         const dataset::SplitPlan& plan, std::size_t fold,
                         const fs::path& dir, const RunLog& log) {
  const ExperimentConfig& cfg = *ctx.cfg;
  const std::uint64_t mseed = model_seed(cfg, attr.spec.name, fold);
  const std::uint64_t rseed = resample_seed(cfg, attr.spec.name, fold);
  const std::string key = job_key(ctx.exp_hash, attr, fold, plan.fold_seed, mseed, rseed);

  FoldOutcome out;
  out.fold = fold;
  out.fold_seed = plan.fold_seed;

  const fs::path done_path = dir / "done.json";
  const fs::path pred_path = dir / "predictions.json";
  if (fs::exists(done_path) && fs::exists(pred_path)) {
    const json done = load_json_file(done_path.string());
    if (done.value("key", std::string()) == key) {
      const json pred = load_json_file(pred_path.string());
      out.predictions = fold_predictions_from_json(pred);
      out.best_epoch = pred.value("best_epoch", std::size_t{0});
      out.resumed = true;
      if (log) log(attr.spec.name + " fold " + std::to_string(fold) + ": resumed");
      return out;
    }
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) io_fail("cannot create '" + dir.string() + "': " + ec.message());

  const auto samples = dataset::resample_training(plan, cfg.train_per_class, rseed, fold);
  std::vector<TrainSample> train_set;
  train_set.reserve(samples.size());
  for (const auto& s : samples)
    train_set.push_back({&features_for(ctx, s.recording_id), s.label_b ? 1.0f : 0.0f});

  std::vector<TrainSample> val_set;
  for (const auto& u : plan.val_users)
    for (const auto& rec : u.recording_ids)
      val_set.push_back({&features_for(ctx, rec), u.label_b ? 1.0f : 0.0f});

  ModelConfig mc = cfg.model;
  mc.seed = mseed;
  std::ostringstream epochs;
  epochs << "epoch\ttrain_loss\tval_accuracy\n";
  auto trained = train(build_model<float>(mc), train_set, val_set,
                       [&](const EpochStats& s) {
                         epochs << s.epoch << '\t' << format_double(s.train_loss) << '\t'
                                << format_double(s.val_accuracy) << '\n';
                       });

  stats::FoldPredictions preds;
  for (const auto& u : plan.test_users) {
    std::vector<double> probs;
    probs.reserve(u.recording_ids.size());
    for (const auto& rec : u.recording_ids) {
      const double p = static_cast<double>(trained.model.predict(features_for(ctx, rec)));
      preds.sequences.push_back({p, u.label_b});
      probs.push_back(p);
    }
    const UserPrediction up = user_prediction_from_probs(probs);
    preds.users.push_back({u.user_id, up.score, u.label_b});
  }

  write_file(dir / "epochs.tsv", std::move(epochs).str());
  save_checkpoint(trained.model, (dir / "model.ckpt").string());

  json pred_doc = fold_predictions_to_json(preds);
  pred_doc["format"] = "vmlab-fold";
  pred_doc["version"] = kResultsVersion;
  pred_doc["key"] = key;
  pred_doc["fold"] = fold;
  pred_doc["fold_seed"] = plan.fold_seed;
  pred_doc["best_epoch"] = trained.best_epoch;
  write_file(pred_path, pred_doc.dump(2) + "\n");
  // written last: its presence marks the directory resumable
  write_file(done_path, json{{"key", key}, {"best_epoch", trained.best_epoch}}.dump(2) + "\n");

  out.predictions = std::move(preds);
  out.best_epoch = trained.best_epoch;
  if (log)
    log(attr.spec.name + " fold " + std::to_string(fold) + ": trained (best epoch " +
        std::to_string(trained.best_epoch) + ")");
  return out;
}

void run_pool(std::size_t width, std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (width <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
  };
  std::vector<std::thread> threads;
  const std::size_t k = std::min(width, n);
  threads.reserve(k);
  for (std::size_t t = 0; t < k; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
}

json results_to_json(const ExperimentConfig& cfg, const std::string& exp_hash,
                     const std::vector<AttributeOutcome>& outcomes) {
  json attrs = json::array();
  for (const auto& a : outcomes) {
    json entry{{"name", a.attribute}, {"slug", a.slug}};
    if (!a.ok) {
      entry["status"] = "error";
      entry["error"] = a.error;
    } else {
      entry["status"] = "ok";
      entry["total_users"] = a.eval.total_users;
      entry["sequence"] = {{"correct", a.eval.seq_correct},
                           {"total", a.eval.seq_total},
                           {"accuracy", a.eval.seq_accuracy},
                           {"p", a.eval.seq_p}};
      entry["user"] = {{"correct", a.eval.user_correct},
                       {"total", a.eval.user_total},
                       {"accuracy", a.eval.user_accuracy},
                       {"p", a.eval.user_p}};
      json folds = json::array();
      for (const auto& f : a.folds)
        folds.push_back({{"fold", f.fold},
                         {"fold_seed", f.fold_seed},
                         {"best_epoch", f.best_epoch},
                         {"seq_correct", a.eval.fold_seq_correct[f.fold]},
                         {"seq_total", a.eval.fold_seq_total[f.fold]},
                         {"user_correct", a.eval.fold_user_correct[f.fold]},
                         {"user_total", a.eval.fold_user_total[f.fold]}});
      entry["folds"] = std::move(folds);
    }
    attrs.push_back(std::move(entry));
  }
  return json{{"format", "vmlab-results"}, {"version", kResultsVersion},
              {"tool_version", kToolVersion}, {"config_hash", exp_hash},
              {"preset", cfg.preset},        {"seed", cfg.seed},
              {"folds", cfg.folds},          {"attributes", std::move(attrs)}};
}

json run_config_to_json(const ExperimentConfig& cfg) {
  json attrs = json::array();
  for (const auto& a : cfg.attributes) attrs.push_back(json::parse(a.source_text));
  return json{
      {"format", "vmlab-run-config"},
      {"version", kResultsVersion},
      {"preset", cfg.preset},
      {"seed", cfg.seed},
      {"folds", cfg.folds},
      {"jobs", cfg.jobs},
      {"train_sequences_per_class", cfg.train_per_class},
      {"split",
       {{"test_users_per_class", cfg.split.test_per_class},
        {"val_users_per_class", cfg.split.val_per_class}}},
      {"data",
       {{"manifest", fs::absolute(cfg.data.manifest).lexically_normal().string()},
        {"survey", fs::absolute(cfg.data.survey).lexically_normal().string()},
        {"replays", fs::absolute(cfg.data.replay_root).lexically_normal().string()}}},
      {"model",
       {{"seq_len", cfg.model.seq_len},
        {"embed_dim", cfg.model.embed_dim},
        {"ffn_hidden", cfg.model.ffn_hidden},
        {"n_layers", cfg.model.n_layers},
        {"n_heads", cfg.model.n_heads},
        {"lr", cfg.model.lr},
        {"epochs", cfg.model.epochs},
        {"batch_size", cfg.model.batch_size},
        {"input_layernorm", cfg.model.input_layernorm},
        {"pad_mask", cfg.model.pad_mask}}},
      {"attributes", std::move(attrs)}};
}

}  // namespace

// ---- configuration ----------------------------------------------------------------

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig cfg;
  cfg.preset = name;
  if (name == "paper") {
    // ModelConfig defaults are the full-scale settings already.
    cfg.model.seed = 0;
    cfg.train_per_class = 10000;
    cfg.split = {10, 10};
    return cfg;
  }
  if (name == "desk") {
    cfg.model.seq_len = 128;
    cfg.model.embed_dim = 16;
    cfg.model.ffn_hidden = 64;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.epochs = 10;
    // 130 optimizer steps total; the full-scale rate barely moves the weights
    cfg.model.lr = 0.001;
    cfg.train_per_class = 200;
    cfg.split = {5, 5};
    return cfg;
  }
  invalid("unknown preset \"" + name + "\" (expected \"paper\" or \"desk\")");
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const CliOverrides& overrides) {
  const json j = load_json_file(path);
  ExperimentConfig cfg =
      config_from_json(j, fs::path(path).parent_path(), overrides);
  validate(cfg);
  return cfg;
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.folds < 1) invalid("folds must be >= 1");
  if (cfg.attributes.empty()) invalid("at least one attribute spec is required");
  if (cfg.split.test_per_class < 1 || cfg.split.val_per_class < 1)
    invalid("split needs at least one test and one validation user per class");
  if (cfg.train_per_class < 1) invalid("train_sequences_per_class must be >= 1");
  if (cfg.jobs < 1) invalid("jobs must be >= 1");
  if (cfg.out_dir.empty()) invalid("output directory must not be empty");
  try {
    validate_config(cfg.model);
  } catch (const ModelError& e) {
    invalid(std::string("model config: ") + e.what());
  }
  std::vector<std::string> slugs;
  for (const auto& a : cfg.attributes) {
    if (std::find(slugs.begin(), slugs.end(), a.slug) != slugs.end())
      invalid("duplicate attribute slug '" + a.slug + "'");
    slugs.push_back(a.slug);
  }
  if (!fs::exists(cfg.data.manifest))
    invalid("manifest does not exist: '" + cfg.data.manifest + "'");
  if (!fs::exists(cfg.data.survey))
    invalid("survey does not exist: '" + cfg.data.survey + "'");
  if (!fs::is_directory(cfg.data.replay_root))
    invalid("replay root is not a directory: '" + cfg.data.replay_root + "'");
}

std::string slugify(const std::string& name) {
  std::string out;
  out.reserve(name.size());
  for (char c : name) {
    const bool keep = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                      (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
    out.push_back(keep ? c : '_');
  }
  if (out.empty()) out = "attr";
  return out;
}

std::string experiment_hash(const ExperimentConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.seed = 0;  // per-job seeds are derived; the master seed is hashed below
  std::string text = "vmlab-run-v1\n";
  text += config_text(mc);
  text += "\npreset=" + cfg.preset;
  text += "\nfolds=" + std::to_string(cfg.folds);
  text += "\nseed=" + std::to_string(cfg.seed);
  text += "\ntrain_per_class=" + std::to_string(cfg.train_per_class);
  text += "\nsplit=" + std::to_string(cfg.split.test_per_class) + "," +
          std::to_string(cfg.split.val_per_class);
  for (const auto& a : cfg.attributes) text += "\nattribute=" + a.source_text;
  text += "\nsurvey_fnv=" + hex16(fnv1a64(read_file(cfg.data.survey)));
  text += "\nmanifest_fnv=" + hex16(fnv1a64(read_file(cfg.data.manifest)));
  return hex16(fnv1a64(text));
}

// ---- recording access ----------------------------------------------------------

Recording load_recording_file(const std::string& path) {
  const std::string bytes = read_file(path);
  const unsigned char* b = reinterpret_cast<const unsigned char*>(bytes.data());
  const bool bsor = bytes.size() >= 4 && b[0] == 0x69 && b[1] == 0x3d && b[2] == 0x2d &&
                    b[3] == 0x44;  // little-endian magic
  if (bsor)
    return parse_bsor({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  return read_canonical(bytes);
}

const FeatureMatrix& FeatureStore::get(const dataset::RecordingRef& ref) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find(ref.recording_id);
  if (it != cache_.end()) return it->second;
  fs::path p(ref.path);
  if (!p.is_absolute()) p = fs::path(root_) / p;
  const Recording rec = load_recording_file(p.string());
  auto [pos, inserted] =
      cache_.emplace(ref.recording_id, featurize_rows(rec, rows_));
  (void)inserted;
  return pos->second;
}

std::size_t FeatureStore::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return cache_.size();
}

// ---- run -----------------------------------------------------------------------

RunOutcome run_experiment(const ExperimentConfig& cfg, const RunLog& log) {
  validate(cfg);
  RunOutcome outcome;
  outcome.out_dir = fs::path(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(outcome.out_dir, ec);
  if (ec) io_fail("cannot create '" + cfg.out_dir + "': " + ec.message());

  std::mutex log_mu;
  RunLog safe_log;
  if (log)
    safe_log = [&](const std::string& line) {
      std::lock_guard<std::mutex> lock(log_mu);
      log(line);
    };

  const auto survey = dataset::read_survey_tsv_file(cfg.data.survey);
  const auto inventory = dataset::read_manifest_file(cfg.data.manifest);
  std::map<std::string, const dataset::RecordingRef*> rec_by_id;
  for (const auto& [user, refs] : inventory.by_user)
    for (const auto& ref : refs) rec_by_id[ref.recording_id] = &ref;

  const std::string exp_hash = experiment_hash(cfg);
  write_file(outcome.out_dir / "run_config.json", run_config_to_json(cfg).dump(2) + "\n");
  write_file(outcome.out_dir / "run_manifest.json",
             json{{"format", "vmlab-run-manifest"},
                  {"version", kResultsVersion},
                  {"tool_version", kToolVersion},
                  {"config_hash", exp_hash},
                  {"preset", cfg.preset},
                  {"seed", cfg.seed},
                  {"folds", cfg.folds}}
                     .dump(2) +
                 "\n");

  FeatureStore store(cfg.data.replay_root, cfg.model.seq_len);
  JobContext ctx{&cfg, &rec_by_id, &store, exp_hash};

  outcome.attributes.resize(cfg.attributes.size());
  std::vector<std::vector<dataset::SplitPlan>> plans(cfg.attributes.size());

  struct Job {
    std::size_t attr = 0;
    std::size_t fold = 0;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < cfg.attributes.size(); ++i) {
    AttributeOutcome& a = outcome.attributes[i];
    a.attribute = cfg.attributes[i].spec.name;
    a.slug = cfg.attributes[i].slug;
    try {
      const auto labeled = dataset::labeled_users(survey, cfg.attributes[i].spec, inventory);
      plans[i] = dataset::monte_carlo_folds(a.attribute, labeled,
                                            fold_base_seed(cfg, a.attribute), cfg.folds,
                                            cfg.split);
      a.total_users = labeled.size();
      a.folds.resize(cfg.folds);
      for (std::size_t f = 0; f < cfg.folds; ++f) jobs.push_back({i, f});
    } catch (const std::exception& e) {
      a.ok = false;
      a.error = e.what();
      if (safe_log) safe_log(a.attribute + ": " + a.error);
    }
  }

  std::vector<std::string> job_errors(jobs.size());
  run_pool(cfg.jobs, jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    const AttributeEntry& attr = cfg.attributes[job.attr];
    const fs::path dir = outcome.out_dir / attr.slug / ("fold" + std::to_string(job.fold));
    try {
      outcome.attributes[job.attr].folds[job.fold] =
          run_fold_job(ctx, attr, plans[job.attr][job.fold], job.fold, dir, safe_log);
    } catch (const std::exception& e) {
      job_errors[j] = e.what();
      if (safe_log)
        safe_log(attr.spec.name + " fold " + std::to_string(job.fold) + ": " + e.what());
    }
  });

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    AttributeOutcome& a = outcome.attributes[jobs[j].attr];
    if (!job_errors[j].empty() && a.error.empty()) {
      a.error = "fold " + std::to_string(jobs[j].fold) + ": " + job_errors[j];
    }
  }

  outcome.all_ok = true;
  for (std::size_t i = 0; i < cfg.attributes.size(); ++i) {
    AttributeOutcome& a = outcome.attributes[i];
    if (plans[i].empty() || !a.error.empty()) {
      a.ok = false;
      outcome.all_ok = false;
      continue;
    }
    try {
      std::vector<stats::FoldPredictions> folds;
      folds.reserve(a.folds.size());
      for (const auto& f : a.folds) folds.push_back(f.predictions);
      a.eval = stats::evaluate_attribute(a.attribute, a.total_users, folds);
      a.ok = true;
    } catch (const std::exception& e) {
      a.ok = false;
      a.error = e.what();
      outcome.all_ok = false;
    }
  }

  write_file(outcome.out_dir / "results.json",
             results_to_json(cfg, exp_hash, outcome.attributes).dump(2) + "\n");
  write_report_files(outcome.out_dir);
  if (safe_log)
    safe_log("results: " + (outcome.out_dir / "results.json").string());
  return outcome;
}

// ---- fictitious-input comparison ------------------------------------------------

NullOutcome run_null(const std::string& results_dir, std::uint64_t seed,
                     const RunLog& log) {
  const fs::path dir(results_dir);
  LoadedRun run = load_run_dir(dir);
  const ExperimentConfig& cfg = run.cfg;

  const std::string live_hash = experiment_hash(cfg);
  if (live_hash != run.config_hash)
    invalid("run directory is stale: data or config changed since the run (hash " +
            run.config_hash + " vs " + live_hash + ")");

  const auto survey = dataset::read_survey_tsv_file(cfg.data.survey);
  const auto inventory = dataset::read_manifest_file(cfg.data.manifest);
  std::map<std::string, const dataset::RecordingRef*> rec_by_id;
  for (const auto& [user, refs] : inventory.by_user)
    for (const auto& ref : refs) rec_by_id[ref.recording_id] = &ref;
  FeatureStore store(cfg.data.replay_root, cfg.model.seq_len);

  // Keeps every reloaded model alive for the predict closures below.
  std::vector<std::unique_ptr<Model<float>>> models;
  std::vector<stats::NullEvalInput> inputs;
  std::vector<NullPair> pair_meta;

  for (std::size_t i = 0; i < cfg.attributes.size(); ++i) {
    const AttributeEntry& attr = cfg.attributes[i];
    const json& rec = run.results.at("attributes").at(i);
    if (rec.value("status", std::string()) != "ok") {
      if (log) log(attr.spec.name + ": skipped (run recorded an error)");
      continue;
    }
    const auto labeled = dataset::labeled_users(survey, attr.spec, inventory);
    const auto plans = dataset::monte_carlo_folds(
        attr.spec.name, labeled, fold_base_seed(cfg, attr.spec.name), cfg.folds,
        cfg.split);
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      const json& fold_rec = rec.at("folds").at(f);
      if (fold_rec.at("fold_seed").get<std::uint64_t>() != plans[f].fold_seed)
        invalid(attr.spec.name + " fold " + std::to_string(f) +
                ": recorded fold seed does not match the recomputed split");

      const fs::path ckpt = dir / attr.slug / ("fold" + std::to_string(f)) / "model.ckpt";
      if (!fs::exists(ckpt))
        throw EngineError(EngineError::Kind::MissingCheckpoints,
                          "missing checkpoint: '" + ckpt.string() + "'");
      ModelConfig mc = cfg.model;
      mc.seed = model_seed(cfg, attr.spec.name, f);
      models.push_back(
          std::make_unique<Model<float>>(load_checkpoint(ckpt.string(), mc)));
      const Model<float>* model = models.back().get();

      std::vector<const FeatureMatrix*> test_feats;
      std::vector<std::uint8_t> labels_b;
      for (const auto& u : plans[f].test_users)
        for (const auto& rec_id : u.recording_ids) {
          auto it = rec_by_id.find(rec_id);
          if (it == rec_by_id.end())
            parse_fail("recording id '" + rec_id + "' is not in the manifest");
          test_feats.push_back(&store.get(*it->second));
          labels_b.push_back(u.label_b ? 1 : 0);
        }

      stats::NullEvalInput in;
      in.attribute = attr.spec.name + "#fold" + std::to_string(f);
      in.predict = [model](const FeatureMatrix& m) {
        return static_cast<double>(model->predict(m));
      };
      in.labels_b = std::move(labels_b);
      in.ranges = stats::channel_ranges(test_feats);
      in.rows = cfg.model.seq_len;
      in.real_accuracy =
          static_cast<double>(fold_rec.at("seq_correct").get<std::size_t>()) /
          static_cast<double>(fold_rec.at("seq_total").get<std::size_t>());
      inputs.push_back(std::move(in));
      pair_meta.push_back({attr.spec.name, f, inputs.back().real_accuracy, 0.0});
    }
    if (log) log(attr.spec.name + ": " + std::to_string(cfg.folds) + " folds loaded");
  }

  if (inputs.empty())
    invalid("no successful attributes in '" + results_dir + "' to compare");

  const stats::PairedSample sample = stats::null_baseline(inputs, seed);

  NullOutcome out;
  out.seed = seed;
  out.pairs = std::move(pair_meta);
  for (std::size_t i = 0; i < out.pairs.size(); ++i)
    out.pairs[i].null_accuracy = sample.null_accuracy[i];
  try {
    out.wilcoxon_p = stats::wilcoxon_signed_rank(sample);
  } catch (const stats::StatsError& e) {
    // too few pairs or all-zero differences: the macro test is undefined,
    // which is a reportable outcome for a small run, not a failure
    out.wilcoxon_p = std::numeric_limits<double>::quiet_NaN();
    out.note = e.what();
  }

  for (const auto& attr : cfg.attributes) {
    double real_sum = 0, null_sum = 0;
    std::size_t n = 0;
    for (const auto& p : out.pairs)
      if (p.attribute == attr.spec.name) {
        real_sum += p.real_accuracy;
        null_sum += p.null_accuracy;
        ++n;
      }
    if (n > 0)
      out.attributes.push_back({attr.spec.name, real_sum / static_cast<double>(n),
                                null_sum / static_cast<double>(n)});
  }

  json pairs = json::array();
  for (const auto& p : out.pairs)
    pairs.push_back({{"attribute", p.attribute},
                     {"fold", p.fold},
                     {"real_accuracy", p.real_accuracy},
                     {"null_accuracy", p.null_accuracy}});
  json attrs = json::array();
  for (const auto& a : out.attributes)
    attrs.push_back({{"attribute", a.attribute},
                     {"real_mean", a.real_mean},
                     {"null_mean", a.null_mean}});
  json null_doc{{"format", "vmlab-null"},
                {"version", kResultsVersion},
                {"config_hash", run.config_hash},
                {"seed", seed},
                {"n_pairs", out.pairs.size()},
                {"wilcoxon_p", std::isnan(out.wilcoxon_p) ? json() : json(out.wilcoxon_p)},
                {"pairs", std::move(pairs)},
                {"attributes", std::move(attrs)}};
  if (!out.note.empty()) null_doc["note"] = out.note;
  write_file(dir / "null.json", null_doc.dump(2) + "\n");
  write_report_files(dir);
  if (log) {
    if (std::isnan(out.wilcoxon_p))
      log("wilcoxon p undefined over " + std::to_string(out.pairs.size()) +
          " pairs: " + out.note);
    else
      log("wilcoxon p = " + format_double(out.wilcoxon_p) + " over " +
          std::to_string(out.pairs.size()) + " pairs");
  }
  return out;
}

// ---- label correlation ------------------------------------------------------------

CorrOutcome run_corr(const std::string& survey_path,
                     const std::vector<std::string>& spec_paths,
                     const std::string& out_dir) {
  if (spec_paths.empty()) invalid("corr needs at least one attribute spec");
  const auto survey = dataset::read_survey_tsv_file(survey_path);

  CorrOutcome out;
  std::vector<std::vector<int>> labels;
  for (const auto& path : spec_paths) {
    const auto spec = dataset::load_attribute_spec(path);
    const auto binned = dataset::binarize(survey, spec);
    std::vector<int> column;
    column.reserve(survey.rows.size());
    for (const auto& [user, answers] : survey.rows) {
      (void)answers;
      const auto it = binned.find(user);
      int v = -1;
      if (it != binned.end()) {
        if (it->second == dataset::BinLabel::A) v = 0;
        if (it->second == dataset::BinLabel::B) v = 1;
      }
      column.push_back(v);
    }
    out.attributes.push_back(spec.name);
    labels.push_back(std::move(column));
  }

  out.r2 = stats::pairwise_r2(labels);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) io_fail("cannot create '" + out_dir + "': " + ec.message());

  auto cell = [](double v) {
    return v == stats::kMissingR2 ? std::string("NA") : format_double(v);
  };

  std::ostringstream matrix;
  matrix << "attribute";
  for (const auto& name : out.attributes) matrix << '\t' << name;
  matrix << '\n';
  for (std::size_t i = 0; i < out.attributes.size(); ++i) {
    matrix << out.attributes[i];
    for (std::size_t j = 0; j < out.attributes.size(); ++j)
      matrix << '\t' << cell(out.r2[i][j]);
    matrix << '\n';
  }
  out.matrix_path = fs::path(out_dir) / "r2_matrix.tsv";
  write_file(out.matrix_path, std::move(matrix).str());

  std::ostringstream pairs;
  pairs << "attr_a\tattr_b\tr2\tstatus\n";
  for (std::size_t i = 0; i < out.attributes.size(); ++i)
    for (std::size_t j = i; j < out.attributes.size(); ++j)
      pairs << out.attributes[i] << '\t' << out.attributes[j] << '\t'
            << cell(out.r2[i][j]) << '\t'
            << (out.r2[i][j] == stats::kMissingR2 ? "degenerate" : "ok") << '\n';
  out.long_path = fs::path(out_dir) / "r2_pairs.tsv";
  write_file(out.long_path, std::move(pairs).str());
  return out;
}

// ---- cohorts -----------------------------------------------------------------------

CohortSpecFile load_cohort_spec(const std::string& path) {
  const json j = load_json_file(path);
  if (!j.is_object()) invalid("cohort spec must be a JSON object");
  reject_unknown_keys(j,
                      {"users_per_class", "recordings_per_user", "frames", "frame_rate",
                       "noise_scale", "seed", "base_profile", "planted", "null_cohort"},
                      "cohort spec");
  CohortSpecFile out;
  synth::CohortSpec& spec = out.spec;
  if (j.contains("users_per_class"))
    spec.users_per_class = j["users_per_class"].get<std::size_t>();
  if (j.contains("recordings_per_user"))
    spec.recordings_per_user = j["recordings_per_user"].get<std::size_t>();
  if (j.contains("frames")) {
    const json& f = j["frames"];
    reject_unknown_keys(f, {"min", "max"}, "frames");
    if (f.contains("min")) spec.frames.min = f["min"].get<std::size_t>();
    if (f.contains("max")) spec.frames.max = f["max"].get<std::size_t>();
  }
  if (j.contains("frame_rate")) spec.frame_rate = j["frame_rate"].get<double>();
  if (j.contains("noise_scale")) spec.noise_scale = j["noise_scale"].get<double>();
  if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("base_profile")) {
    const json& b = j["base_profile"];
    reject_unknown_keys(
        b, {"head_height", "arm_length", "osc_frequency", "osc_amplitude", "jitter"},
        "base_profile");
    if (b.contains("head_height")) spec.base.head_height = b["head_height"].get<double>();
    if (b.contains("arm_length")) spec.base.arm_length = b["arm_length"].get<double>();
    if (b.contains("osc_frequency"))
      spec.base.osc_frequency = b["osc_frequency"].get<double>();
    if (b.contains("osc_amplitude"))
      spec.base.osc_amplitude = b["osc_amplitude"].get<double>();
    if (b.contains("jitter")) spec.base.jitter = b["jitter"].get<double>();
  }
  if (j.contains("planted")) {
    if (!j["planted"].is_array()) invalid("\"planted\" must be an array");
    for (const json& p : j["planted"]) {
      reject_unknown_keys(p, {"name", "kind", "effect"}, "planted attribute");
      synth::PlantedAttribute attr;
      if (!p.contains("name")) invalid("planted attribute needs a \"name\"");
      attr.name = p["name"].get<std::string>();
      if (!p.contains("kind")) invalid(attr.name + ": planted attribute needs a \"kind\"");
      const auto kind = synth::signal_kind_from_string(p["kind"].get<std::string>());
      if (!kind)
        invalid(attr.name + ": unknown signal kind \"" +
                p["kind"].get<std::string>() +
                "\" (expected head_height, osc_frequency or osc_amplitude)");
      attr.kind = *kind;
      if (p.contains("effect")) attr.effect = p["effect"].get<double>();
      spec.planted.push_back(std::move(attr));
    }
  }
  if (j.contains("null_cohort")) out.null_cohort = j["null_cohort"].get<bool>();
  synth::validate(spec);
  return out;
}

// ---- conversion --------------------------------------------------------------------

std::optional<ReplayFormat> replay_format_from_string(const std::string& text) {
  if (text == "bsor") return ReplayFormat::Bsor;
  if (text == "canonical") return ReplayFormat::Canonical;
  return std::nullopt;
}

std::string extension_for(ReplayFormat format) {
  return format == ReplayFormat::Bsor ? "bsor" : "vmt";
}

namespace {

bool convert_one(const fs::path& in, const fs::path& out_file, ReplayFormat from,
                 ReplayFormat to, ConvertReport& rep) {
  std::string bytes;
  try {
    bytes = read_file(in.string());
  } catch (const EngineError& e) {
    rep.io_error = true;
    rep.failures.emplace_back(in.string(), e.what());
    return false;
  }

  Recording rec;
  try {
    if (from == ReplayFormat::Bsor)
      rec = parse_bsor({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
    else
      rec = read_canonical(bytes);
  } catch (const ReplayError& e) {
    rep.failures.emplace_back(in.string(), e.what());
    return false;
  }

  std::string out_bytes;
  if (to == ReplayFormat::Bsor) {
    const auto raw = write_bsor(rec);
    out_bytes.assign(reinterpret_cast<const char*>(raw.data()), raw.size());
  } else {
    out_bytes = write_canonical(rec);
  }

  try {
    std::error_code ec;
    fs::create_directories(out_file.parent_path(), ec);
    if (ec) io_fail("cannot create '" + out_file.parent_path().string() + "'");
    write_file(out_file, out_bytes);
  } catch (const EngineError& e) {
    rep.io_error = true;
    rep.failures.emplace_back(in.string(), e.what());
    return false;
  }
  ++rep.converted;
  return true;
}

}  // namespace

ConvertReport convert_path(const std::string& input, const std::string& output,
                           ReplayFormat from, ReplayFormat to, bool keep_going) {
  ConvertReport rep;
  const fs::path in(input);
  const fs::path out(output);

  if (fs::is_regular_file(in)) {
    fs::path out_file = out;
    if (fs::is_directory(out) || (!output.empty() && output.back() == '/'))
      out_file = out / in.stem().concat("." + extension_for(to)).filename();
    if (!convert_one(in, out_file, from, to, rep) && !keep_going) rep.stopped_early = true;
    return rep;
  }

  if (!fs::is_directory(in)) {
    rep.io_error = true;
    rep.failures.emplace_back(input, "no such file or directory");
    return rep;
  }

  const std::string want_ext = "." + extension_for(from);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(in))
    if (entry.is_regular_file() && entry.path().extension() == want_ext)
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  for (const auto& file : files) {
    fs::path rel = file.lexically_relative(in);
    rel.replace_extension("." + extension_for(to));
    if (!convert_one(file, out / rel, from, to, rep) && !keep_going) {
      rep.stopped_early = true;
      break;
    }
  }
  return rep;
}

// ---- reports -------------------------------------------------------------------------

std::filesystem::path write_report_files(const std::filesystem::path& run_dir) {
  const fs::path results_path = run_dir / "results.json";
  if (!fs::exists(results_path))
    parse_fail("no results.json in '" + run_dir.string() + "'");
  const json results = load_json_file(results_path.string());
  if (results.value("format", std::string()) != "vmlab-results")
    parse_fail(results_path.string() + ": not a results file");

  std::ostringstream t;
  t << "attribute\ttotal_users\ttest_users\ttest_sequences\tseq_accuracy\t"
       "seq_significance\tuser_accuracy\tuser_significance\tseq_p\tuser_p\n";
  for (const json& a : results.at("attributes")) {
    if (a.value("status", std::string()) != "ok") continue;
    const json& seq = a.at("sequence");
    const json& user = a.at("user");
    t << a.at("name").get<std::string>() << '\t' << a.at("total_users").get<std::size_t>()
      << '\t' << user.at("total").get<std::size_t>() << '\t'
      << seq.at("total").get<std::size_t>() << '\t'
      << percent(seq.at("accuracy").get<double>()) << '\t'
      << stats::significance_text(seq.at("p").get<double>()) << '\t'
      << percent(user.at("accuracy").get<double>()) << '\t'
      << stats::significance_text(user.at("p").get<double>()) << '\t'
      << format_double(seq.at("p").get<double>()) << '\t'
      << format_double(user.at("p").get<double>()) << '\n';
  }

  const fs::path null_path = run_dir / "null.json";
  if (fs::exists(null_path)) {
    const json null_doc = load_json_file(null_path.string());
    // a stale comparison (different config hash) is dropped, not reported
    if (null_doc.value("format", std::string()) == "vmlab-null" &&
        null_doc.value("config_hash", std::string()) ==
            results.value("config_hash", std::string())) {
      t << "\n# fictitious-input comparison (seed "
        << null_doc.at("seed").get<std::uint64_t>() << ", "
        << null_doc.at("n_pairs").get<std::size_t>() << " attribute-fold pairs)\n";
      const json& wp = null_doc.at("wilcoxon_p");
      if (wp.is_null())
        t << "wilcoxon_p\tNA\t" << null_doc.value("note", std::string("undefined"))
          << '\n';
      else
        t << "wilcoxon_p\t" << format_double(wp.get<double>()) << '\t'
          << stats::significance_text(wp.get<double>()) << '\n';
      t << "attribute\treal_accuracy\tnull_accuracy\n";
      for (const json& a : null_doc.at("attributes"))
        t << a.at("attribute").get<std::string>() << '\t'
          << percent(a.at("real_mean").get<double>()) << '\t'
          << percent(a.at("null_mean").get<double>()) << '\n';
    }
  }

  const fs::path report_path = run_dir / "report.tsv";
  write_file(report_path, std::move(t).str());
  return report_path;
}

}  // namespace vmlab::engine
