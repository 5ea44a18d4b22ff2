#pragma once

#include <atomic>
#include <cmath>
#include <exception>
#include <thread>
#include <vector>

#include "milengine/data/folds.hpp"
#include "milengine/train_eval/train.hpp"

namespace milengine::eval {

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;  // seed used for this fold's model and shuffling
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  MetricsReport metrics;
  Model<float> model;
};

struct CvReport {
  data::FoldPlan plan;
  std::vector<FoldResult> folds;
  double mean_balanced_accuracy = 0.0;
  double std_balanced_accuracy = 0.0;  // sample standard deviation over folds
  MetricsReport pooled;                // metrics of the summed confusion matrix
};

inline FoldResult run_fold(const Dataset& ds, const data::FoldPlan& plan, std::size_t fold, const TrainConfig& config) {
  FoldResult r;
  r.fold = fold;
  r.seed = config.seed + fold;
  r.train_indices = plan.train_indices(fold);
  r.test_indices = plan.test_indices(fold);
  TrainConfig fold_config = config;
  fold_config.seed = r.seed;
  const auto train = ds.select(r.train_indices);
  const auto test = ds.select(r.test_indices);
  auto trained = train_model(train, ds.num_classes(), fold_config);
  r.metrics = evaluate(trained.model, test, ds.num_classes(), std::move(trained.loss_curve));
  r.model = std::move(trained.model);
  return r;
}

// k-fold protocol: the split is seeded with config.seed, fold i trains with seed
// config.seed + i. `jobs` > 1 runs folds on worker threads; results are joined
// in fold order and are identical to the sequential run.
inline CvReport run_cv(const Dataset& ds, std::size_t k, const TrainConfig& config, std::size_t jobs = 1) {
  validate(config);
  CvReport report;
  report.plan = data::stratified_kfold(ds.manifest, k, config.seed);
  report.folds.resize(k);

  std::vector<std::exception_ptr> errors(k);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f = next++; f < k; f = next++) {
      try {
        report.folds[f] = run_fold(ds, report.plan, f, config);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, k));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  double sum = 0.0;
  for (const auto& f : report.folds) sum += f.metrics.balanced_accuracy;
  report.mean_balanced_accuracy = sum / static_cast<double>(k);
  double sq = 0.0;
  for (const auto& f : report.folds) {
    const double dev = f.metrics.balanced_accuracy - report.mean_balanced_accuracy;
    sq += dev * dev;
  }
  report.std_balanced_accuracy = std::sqrt(sq / static_cast<double>(k - 1));

  const std::size_t s = ds.num_classes();
  Confusion pooled(s, std::vector<std::size_t>(s, 0));
  for (const auto& f : report.folds)
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) pooled[i][j] += f.metrics.confusion[i][j];
  report.pooled = metrics_from_confusion(std::move(pooled));
  return report;
}

}  // namespace milengine::eval
