#pragma once

// Sequence classifier: input projection -> optional input layer-norm ->
// sinusoidal positional encoding -> pre-norm encoder stack -> mean pooling ->
// linear head -> sigmoid. Head weights start at zero so an untrained model
// outputs exactly 0.5. Training is Adam + BCE over seeded mini-batch shuffles
// with best-epoch selection by per-sequence validation accuracy.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmlab/featurize.hpp"
#include "vmlab/nn.hpp"
#include "vmlab/rng.hpp"
#include "vmlab/tensor.hpp"

namespace vmlab {

class ModelError : public std::runtime_error {
 public:
  enum class Kind {
    InvalidConfig,
    DivergedLoss,
    EmptyTrainingSet,
    EmptyTrainingSchedule,
    NoRecordings,
    VersionMismatch,
    CorruptPayload,
  };
  ModelError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct ModelConfig {
  std::size_t seq_len = 1024;
  std::size_t input_dim = 21;
  std::size_t embed_dim = 24;
  std::size_t ffn_hidden = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t out_dim = 1;
  double lr = 0.00002;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool input_layernorm = true;
  bool pad_mask = false;

  bool operator==(const ModelConfig&) const = default;
};

void validate_config(const ModelConfig& c);

/// Key for "same config" checks in checkpoints and resume logic.
std::string config_text(const ModelConfig& c);
std::uint64_t config_hash(const ModelConfig& c);

template <typename T>
struct Model {
  ModelConfig config;
  ad::LinearParams<T> input_proj;
  ad::LayerNormParams<T> input_ln;  // wired only when config.input_layernorm
  ad::Var<T> pe;                    // constant, excluded from params
  std::vector<ad::EncoderLayerParams<T>> layers;
  ad::LinearParams<T> head;

  std::vector<std::string> param_names;
  std::vector<ad::Var<T>> params;

  void zero_grad() const {
    ad::zero_grad(params);
    std::fill(pe->grad.begin(), pe->grad.end(), T(0));
  }

  /// Builds the graph for one sequence and returns the probability node (1x1).
  ad::Var<T> forward(const FeatureMatrix& m) const {
    if (m.rows != config.seq_len || FeatureMatrix::kCols != config.input_dim)
      ad::shape_error("feature matrix is " + std::to_string(m.rows) + "x" +
                      std::to_string(FeatureMatrix::kCols) + ", model expects " +
                      std::to_string(config.seq_len) + "x" +
                      std::to_string(config.input_dim));
    auto x = ad::make_tensor<T>(m.rows, FeatureMatrix::kCols);
    for (std::size_t i = 0; i < m.values.size(); ++i)
      x->value[i] = static_cast<T>(m.values[i]);

    std::vector<std::uint8_t> key_valid;
    const std::vector<std::uint8_t>* mask = nullptr;
    if (config.pad_mask && m.valid_rows < m.rows) {
      key_valid.assign(m.rows, 0);
      std::fill(key_valid.begin(), key_valid.begin() + static_cast<long>(m.valid_rows), 1);
      mask = &key_valid;
    }

    auto h = ad::linear(x, input_proj);
    if (config.input_layernorm) h = ad::layer_norm(h, input_ln);
    h = ad::add(h, pe);
    for (const auto& layer : layers) h = ad::encoder_layer(h, layer, config.n_heads, mask);
    return ad::sigmoid(ad::linear(ad::mean_rows(h), head));
  }

  T predict(const FeatureMatrix& m) const { return forward(m)->value[0]; }
};

/// Seeded build: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every linear in
/// declaration order, layer-norms at gain 1 / bias 0, head zeroed.
template <typename T>
Model<T> build_model(const ModelConfig& config) {
  validate_config(config);
  Model<T> m;
  m.config = config;
  Rng rng(derive_seed(config.seed, "model-init"));

  auto reg = [&m](const std::string& name, const ad::Var<T>& v) {
    m.param_names.push_back(name);
    m.params.push_back(v);
  };
  auto reg_linear = [&reg](const std::string& name, ad::LinearParams<T>& p) {
    reg(name + ".w", p.w);
    reg(name + ".b", p.b);
  };
  auto reg_ln = [&reg](const std::string& name, ad::LayerNormParams<T>& p) {
    reg(name + ".gain", p.gain);
    reg(name + ".bias", p.bias);
  };

  m.input_proj = ad::make_linear<T>(config.input_dim, config.embed_dim);
  ad::init_linear(m.input_proj, rng);
  reg_linear("input_proj", m.input_proj);

  m.input_ln = ad::make_layer_norm<T>(config.embed_dim);
  if (config.input_layernorm) reg_ln("input_ln", m.input_ln);

  m.pe = ad::positional_encoding<T>(config.seq_len, config.embed_dim);

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    ad::EncoderLayerParams<T> layer{
        ad::make_layer_norm<T>(config.embed_dim),
        ad::make_layer_norm<T>(config.embed_dim),
        {ad::make_linear<T>(config.embed_dim, config.embed_dim),
         ad::make_linear<T>(config.embed_dim, config.embed_dim),
         ad::make_linear<T>(config.embed_dim, config.embed_dim),
         ad::make_linear<T>(config.embed_dim, config.embed_dim)},
        ad::make_linear<T>(config.embed_dim, config.ffn_hidden),
        ad::make_linear<T>(config.ffn_hidden, config.embed_dim)};
    ad::init_linear(layer.attn.q, rng);
    ad::init_linear(layer.attn.k, rng);
    ad::init_linear(layer.attn.v, rng);
    ad::init_linear(layer.attn.out, rng);
    ad::init_linear(layer.ffn1, rng);
    ad::init_linear(layer.ffn2, rng);

    const std::string base = "layer" + std::to_string(l);
    reg_ln(base + ".ln1", layer.ln1);
    reg_linear(base + ".attn.q", layer.attn.q);
    reg_linear(base + ".attn.k", layer.attn.k);
    reg_linear(base + ".attn.v", layer.attn.v);
    reg_linear(base + ".attn.out", layer.attn.out);
    reg_ln(base + ".ln2", layer.ln2);
    reg_linear(base + ".ffn1", layer.ffn1);
    reg_linear(base + ".ffn2", layer.ffn2);
    m.layers.push_back(std::move(layer));
  }

  m.head = ad::make_linear<T>(config.embed_dim, config.out_dim);  // zeros
  reg_linear("head", m.head);
  return m;
}

struct TrainSample {
  const FeatureMatrix* features = nullptr;
  float label = 0;  // 0 = class A, 1 = class B
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_accuracy = 0;
};

using ProgressSink = std::function<void(const EpochStats&)>;

template <typename T>
struct TrainedModel {
  Model<T> model;
  std::size_t best_epoch = 0;  // 1-based
  std::vector<EpochStats> history;
};

template <typename T>
double sequence_accuracy(const Model<T>& model, const std::vector<TrainSample>& set) {
  std::size_t correct = 0;
  for (const auto& s : set) {
    const bool predicted_b = model.predict(*s.features) >= T(0.5);
    correct += predicted_b == (s.label >= 0.5f) ? 1 : 0;
  }
  return set.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(set.size());
}

/// Deterministic training run. The same (model seed, data, config) always
/// returns bitwise-identical parameters.
template <typename T>
TrainedModel<T> train(Model<T> model, const std::vector<TrainSample>& train_samples,
                      const std::vector<TrainSample>& val_set,
                      const ProgressSink& sink = {}) {
  const ModelConfig& cfg = model.config;
  if (cfg.epochs == 0)
    throw ModelError(ModelError::Kind::EmptyTrainingSchedule, "epochs is 0");
  if (train_samples.empty())
    throw ModelError(ModelError::Kind::EmptyTrainingSet, "no training samples");
  if (val_set.empty())
    throw ModelError(ModelError::Kind::EmptyTrainingSet, "validation set is empty");

  Rng shuffle_rng(derive_seed(cfg.seed, "epoch-shuffle"));
  ad::Adam<T> opt(model.params, static_cast<T>(cfg.lr));

  std::vector<std::size_t> order(train_samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainedModel<T> result;
  result.best_epoch = 0;
  double best_acc = -1.0;
  std::vector<std::vector<T>> best_params;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const T inv_batch = T(1) / static_cast<T>(end - start);
      model.zero_grad();
      double batch_loss = 0;
      for (std::size_t s = start; s < end; ++s) {
        const TrainSample& sample = train_samples[order[s]];
        auto prob = model.forward(*sample.features);
        // The BCE clamp would hide a NaN activation, so check the raw output.
        if (!std::isfinite(prob->value[0]))
          throw ModelError(ModelError::Kind::DivergedLoss,
                           "non-finite model output in epoch " + std::to_string(epoch));
        auto loss = ad::scale(ad::bce(prob, {static_cast<T>(sample.label)}), inv_batch);
        ad::backward(loss);
        batch_loss += static_cast<double>(loss->value[0]);
      }
      if (!std::isfinite(batch_loss))
        throw ModelError(ModelError::Kind::DivergedLoss,
                         "non-finite loss in epoch " + std::to_string(epoch));
      loss_sum += batch_loss;
      ++n_batches;
      opt.step();
    }
    const double epoch_loss = loss_sum / static_cast<double>(n_batches);
    const double val_acc = sequence_accuracy(model, val_set);

    result.history.push_back({epoch, epoch_loss, val_acc});
    if (sink) sink(result.history.back());

    if (val_acc > best_acc) {  // strict: ties keep the earliest epoch
      best_acc = val_acc;
      result.best_epoch = epoch;
      best_params.clear();
      for (const auto& p : model.params) best_params.push_back(p->value);
    }
  }

  for (std::size_t i = 0; i < model.params.size(); ++i)
    model.params[i]->value = best_params[i];
  result.model = std::move(model);
  return result;
}

struct UserPrediction {
  double score = 0;       // mean per-sequence probability
  bool class_b = false;   // score >= 0.5
};

template <typename T>
UserPrediction predict_user(const Model<T>& model, const std::vector<FeatureMatrix>& recs) {
  if (recs.empty())
    throw ModelError(ModelError::Kind::NoRecordings, "predict_user with no recordings");
  double sum = 0;
  for (const auto& m : recs) sum += static_cast<double>(model.predict(m));
  UserPrediction p;
  p.score = sum / static_cast<double>(recs.size());
  p.class_b = p.score >= 0.5;
  return p;
}

UserPrediction user_prediction_from_probs(const std::vector<double>& probs);

void save_checkpoint(const Model<float>& model, const std::string& path);
Model<float> load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace vmlab
