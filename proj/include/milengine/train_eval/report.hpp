#pragma once

// JSON views of splits, metrics and cross-validation runs. Reports carry no
// timestamps or timings so identical runs give byte-identical files.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "milengine/data/folds.hpp"
#include "milengine/train_eval/cv.hpp"
#include "milengine/version.hpp"

namespace milengine::eval {

using Json = nlohmann::ordered_json;

inline Json to_json(const nn::AdamWConfig& c) {
  return Json{{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["aggregator"] = std::string(agg::to_string(c.aggregator));
  j["epochs"] = c.epochs;
  j["peak_lr"] = c.peak_lr;
  j["bag_batch"] = c.bag_batch;
  j["adamw"] = to_json(c.adamw);
  j["abmil_hidden"] = c.hyper.abmil_hidden;
  j["transmil"] = {{"width", c.hyper.transmil.width},
                   {"layers", c.hyper.transmil.layers},
                   {"heads", c.hyper.transmil.heads}};
  j["seed"] = c.seed;
  return j;
}

inline Json to_json(const data::FoldPlan& plan, const data::Manifest& manifest) {
  Json slides = Json::array();
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    slides.push_back({{"slide_id", manifest.records[i].slide_id},
                      {"label", manifest.classes[manifest.records[i].label]},
                      {"fold", plan.assignment[i]}});
  }
  return Json{{"engine_version", kEngineVersion}, {"k", plan.k}, {"seed", plan.seed}, {"slides", slides}};
}

// Inverse of the fold-plan JSON above; the plan must cover exactly the
// manifest's slides.
inline data::FoldPlan fold_plan_from_json(const Json& j, const data::Manifest& manifest) {
  try {
    data::FoldPlan plan;
    plan.k = j.at("k").get<std::size_t>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    const auto& slides = j.at("slides");
    if (slides.size() != manifest.records.size())
      throw ConfigError("fold plan lists " + std::to_string(slides.size()) + " slides, manifest has " +
                        std::to_string(manifest.records.size()));
    std::map<std::string, std::size_t> fold_of;
    for (const auto& s : slides) {
      const auto fold = s.at("fold").get<std::size_t>();
      if (fold >= plan.k) throw ConfigError("fold index out of range in fold plan");
      fold_of[s.at("slide_id").get<std::string>()] = fold;
    }
    plan.assignment.resize(manifest.records.size());
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto it = fold_of.find(manifest.records[i].slide_id);
      if (it == fold_of.end()) throw ConfigError("slide '" + manifest.records[i].slide_id + "' missing from fold plan");
      plan.assignment[i] = it->second;
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed fold plan: ") + e.what());
  }
}

inline Json to_json(const MetricsReport& m) {
  return Json{{"confusion", m.confusion},
              {"per_class_recall", m.per_class_recall},
              {"balanced_accuracy", m.balanced_accuracy},
              {"loss_curve", m.loss_curve}};
}

inline Json slide_ids(const data::Manifest& manifest, const std::vector<std::size_t>& indices) {
  Json out = Json::array();
  for (auto i : indices) out.push_back(manifest.records[i].slide_id);
  return out;
}

inline Json to_json(const CvReport& r, const data::Manifest& manifest, const TrainConfig& config) {
  Json folds = Json::array();
  for (const auto& f : r.folds) {
    Json fj{{"fold", f.fold}, {"seed", f.seed}, {"test_slides", slide_ids(manifest, f.test_indices)}};
    fj.update(to_json(f.metrics));
    folds.push_back(std::move(fj));
  }
  Json j;
  j["engine_version"] = kEngineVersion;
  j["classes"] = manifest.classes;
  j["k"] = r.plan.k;
  j["seed"] = config.seed;
  j["config"] = to_json(config);
  j["folds"] = std::move(folds);
  j["mean_of_folds"] = {{"balanced_accuracy_mean", r.mean_balanced_accuracy},
                        {"balanced_accuracy_std", r.std_balanced_accuracy}};
  j["pooled"] = to_json(r.pooled);
  return j;
}

// Evaluation report for a single trained model on a set of slides.
inline Json eval_report(const MetricsReport& m, const std::vector<std::string>& classes, std::string_view aggregator,
                        const Json& slides) {
  Json j;
  j["engine_version"] = kEngineVersion;
  j["aggregator"] = std::string(aggregator);
  j["classes"] = classes;
  j["slides"] = slides;
  j.update(to_json(m));
  return j;
}

inline void write_json(const Json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace milengine::eval
