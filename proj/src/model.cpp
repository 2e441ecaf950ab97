#include "vmlab/model.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vmlab/replay.hpp"

namespace vmlab {

namespace {

constexpr const char* kMagicLine = "vmlab-checkpoint 1";

[[noreturn]] void corrupt(const std::string& msg) {
  throw ModelError(ModelError::Kind::CorruptPayload, msg);
}

[[noreturn]] void version_mismatch(const std::string& msg) {
  throw ModelError(ModelError::Kind::VersionMismatch, msg);
}

}  // namespace

void validate_config(const ModelConfig& c) {
  auto bad = [](const std::string& msg) {
    throw ModelError(ModelError::Kind::InvalidConfig, msg);
  };
  if (c.seq_len < 1 || c.input_dim < 1 || c.embed_dim < 1 || c.ffn_hidden < 1 ||
      c.n_layers < 1 || c.n_heads < 1 || c.batch_size < 1)
    bad("all model dimensions must be >= 1");
  if (c.out_dim != 1) bad("binary classifier needs out_dim == 1");
  if (c.embed_dim % c.n_heads != 0)
    bad("embed_dim " + std::to_string(c.embed_dim) + " not divisible by " +
        std::to_string(c.n_heads) + " heads");
  if (c.embed_dim % 2 != 0)
    bad("embed_dim must be even for the sinusoidal position table");
  if (!(c.lr > 0) || !std::isfinite(c.lr)) bad("learning rate must be positive");
}

std::string config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "seq_len=" << c.seq_len << " input_dim=" << c.input_dim
     << " embed_dim=" << c.embed_dim << " ffn_hidden=" << c.ffn_hidden
     << " n_layers=" << c.n_layers << " n_heads=" << c.n_heads
     << " out_dim=" << c.out_dim << " lr=" << format_double(c.lr)
     << " epochs=" << c.epochs << " batch_size=" << c.batch_size
     << " seed=" << c.seed << " input_layernorm=" << (c.input_layernorm ? 1 : 0)
     << " pad_mask=" << (c.pad_mask ? 1 : 0);
  return os.str();
}

std::uint64_t config_hash(const ModelConfig& c) { return fnv1a64(config_text(c)); }

UserPrediction user_prediction_from_probs(const std::vector<double>& probs) {
  if (probs.empty())
    throw ModelError(ModelError::Kind::NoRecordings, "no per-sequence probabilities");
  double sum = 0;
  for (double p : probs) sum += p;
  UserPrediction up;
  up.score = sum / static_cast<double>(probs.size());
  up.class_b = up.score >= 0.5;
  return up;
}

void save_checkpoint(const Model<float>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) corrupt("cannot open '" + path + "' for writing");
  out << kMagicLine << "\n";
  out << "config " << config_text(model.config) << "\n";
  out << "params " << model.params.size() << "\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& p = *model.params[i];
    out << model.param_names[i] << " " << p.rows << " " << p.cols << "\n";
    total += p.size();
  }
  out << "payload " << total << "\n";
  for (const auto& p : model.params)
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  if (!out) corrupt("short write to '" + path + "'");
}

Model<float> load_checkpoint(const std::string& path, const ModelConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) corrupt("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line) || line != kMagicLine)
    version_mismatch("not a recognized checkpoint: '" + line + "'");
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0)
    corrupt("missing config line");
  const std::string stored_config = line.substr(7);
  if (stored_config != config_text(expected))
    version_mismatch("checkpoint config does not match: stored '" + stored_config +
                     "' vs expected '" + config_text(expected) + "'");

  if (!std::getline(in, line) || line.rfind("params ", 0) != 0)
    corrupt("missing params line");
  std::size_t n_params = 0;
  {
    const std::string v = line.substr(7);
    auto res = std::from_chars(v.data(), v.data() + v.size(), n_params);
    if (res.ec != std::errc()) corrupt("bad params count");
  }

  Model<float> model = build_model<float>(expected);
  if (n_params != model.params.size())
    version_mismatch("parameter count " + std::to_string(n_params) + " != " +
                     std::to_string(model.params.size()));

  std::size_t total = 0;
  for (std::size_t i = 0; i < n_params; ++i) {
    if (!std::getline(in, line)) corrupt("truncated parameter manifest");
    std::istringstream ls(line);
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(ls >> name >> rows >> cols)) corrupt("bad manifest line '" + line + "'");
    const auto& p = *model.params[i];
    if (name != model.param_names[i] || rows != p.rows || cols != p.cols)
      version_mismatch("parameter " + std::to_string(i) + " is '" + name +
                       "' [" + std::to_string(rows) + "x" + std::to_string(cols) +
                       "], expected '" + model.param_names[i] + "'");
    total += rows * cols;
  }

  if (!std::getline(in, line) || line.rfind("payload ", 0) != 0)
    corrupt("missing payload line");
  std::size_t declared = 0;
  {
    const std::string v = line.substr(8);
    auto res = std::from_chars(v.data(), v.data() + v.size(), declared);
    if (res.ec != std::errc()) corrupt("bad payload count");
  }
  if (declared != total)
    corrupt("payload count " + std::to_string(declared) + " != manifest total " +
            std::to_string(total));

  for (const auto& p : model.params) {
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(p->value.size() * sizeof(float)))
      corrupt("truncated payload");
  }
  char extra;
  if (in.read(&extra, 1) && in.gcount() == 1) corrupt("trailing bytes after payload");
  for (const auto& p : model.params)
    for (float v : p->value)
      if (!std::isfinite(v)) corrupt("non-finite parameter value");
  return model;
}

}  // namespace vmlab
