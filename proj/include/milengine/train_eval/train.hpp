#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "milengine/aggregators/model.hpp"
#include "milengine/data/manifest.hpp"
#include "milengine/nn/loss.hpp"
#include "milengine/nn/optim.hpp"
#include "milengine/random.hpp"
#include "milengine/train_eval/metrics.hpp"

namespace milengine::eval {

using agg::AggregatorKind;
using agg::LabeledBag;
using agg::Model;

struct TrainConfig {
  AggregatorKind aggregator = AggregatorKind::Abmil;
  std::size_t epochs = 20;
  double peak_lr = 1e-4;
  std::size_t bag_batch = 1;
  nn::AdamWConfig adamw;
  agg::ModelHyper hyper;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(c.peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (c.bag_batch != 1) throw ConfigError("only bag_batch = 1 (one optimizer step per slide) is supported");
}

struct TrainResult {
  Model<float> model;
  std::vector<double> loss_curve;
  std::uint64_t optimizer_steps = 0;
};

// Trainable aggregators: each epoch visits the bags in a freshly shuffled order
// and takes one AdamW step per bag, with the learning rate following the cosine
// schedule over epochs * n_train steps. SimpleShot only fits prototypes.
inline TrainResult train_model(std::span<const LabeledBag> train, std::size_t num_classes, const TrainConfig& config) {
  validate(config);
  if (train.empty()) throw ConfigError("empty training set");
  const std::size_t dim = train.front().bag->d;
  for (const auto& item : train) {
    if (item.bag->d != dim) {
      throw DimensionError("slide '" + item.bag->slide_id + "' has d=" + std::to_string(item.bag->d) +
                           ", expected " + std::to_string(dim));
    }
    if (item.label >= num_classes) throw DimensionError("slide '" + item.bag->slide_id + "' label out of range");
  }

  TrainResult result{agg::make_model<float>(config.aggregator, dim, num_classes, config.seed, config.hyper), {}, 0};
  if (config.aggregator == AggregatorKind::SimpleShot) {
    result.model.impl = agg::fit_prototypes(train, num_classes);
    return result;
  }

  std::vector<nn::Matrix<float>> inputs;
  inputs.reserve(train.size());
  for (const auto& item : train) inputs.push_back(agg::bag_matrix<float>(*item.bag));

  auto params = result.model.params();
  nn::AdamW<float> optimizer(params, config.adamw);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(mix_seed(config.seed, 0x5eed));
  const std::uint64_t total_steps = static_cast<std::uint64_t>(config.epochs) * train.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t idx : order) {
      optimizer.zero_grad();
      nn::Tape<float> tape;
      nn::Var x = tape.constant(inputs[idx], "bag");
      nn::Var probs = result.model.forward(tape, x);
      nn::Var loss = nn::cross_entropy(tape, probs, train[idx].label);
      epoch_loss += tape.scalar(loss);
      tape.backward(loss);
      optimizer.step(nn::cosine_lr(optimizer.steps(), config.peak_lr, total_steps));
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(train.size()));
  }
  result.optimizer_steps = optimizer.steps();
  return result;
}

inline MetricsReport evaluate(Model<float>& model, std::span<const LabeledBag> test, std::size_t num_classes,
                              std::vector<double> loss_curve = {}) {
  if (test.empty()) throw ConfigError("empty test set");
  Confusion confusion(num_classes, std::vector<std::size_t>(num_classes, 0));
  auto wide = model.cast<double>();
  for (const auto& item : test) {
    if (item.label >= num_classes) throw DimensionError("slide '" + item.bag->slide_id + "' label out of range");
    ++confusion[item.label][agg::predict(wide, *item.bag)];
  }
  return metrics_from_confusion(std::move(confusion), std::move(loss_curve));
}

// Bags loaded from a manifest, ready to be split.
struct Dataset {
  data::Manifest manifest;
  std::vector<data::EmbeddingBag> bags;

  std::size_t num_classes() const { return manifest.num_classes(); }
  std::size_t dim() const { return bags.empty() ? 0 : bags.front().d; }

  std::vector<LabeledBag> select(std::span<const std::size_t> indices) const {
    std::vector<LabeledBag> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back({&bags[i], manifest.records[i].label});
    return out;
  }

  std::vector<LabeledBag> all() const {
    std::vector<LabeledBag> out;
    out.reserve(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) out.push_back({&bags[i], manifest.records[i].label});
    return out;
  }
};

inline Dataset load_dataset(data::Manifest manifest) {
  data::validate_manifest(manifest);
  Dataset ds{std::move(manifest), {}};
  ds.bags = data::load_bags(ds.manifest);
  return ds;
}

}  // namespace milengine::eval
