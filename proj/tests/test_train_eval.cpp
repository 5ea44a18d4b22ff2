#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "milengine/aggregators/model_io.hpp"
#include "milengine/train_eval/report.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace milengine;
using namespace milengine::eval;

namespace {

TrainConfig config_for(AggregatorKind kind, std::uint64_t seed = 3) {
  TrainConfig c;
  c.aggregator = kind;
  c.seed = seed;
  return c;
}

}  // namespace

// ---- metrics ----

TEST(Metrics, BalancedAccuracyExamples) {
  EXPECT_DOUBLE_EQ(balanced_accuracy({{9, 1}, {4, 6}}), 0.75);
  EXPECT_NEAR(balanced_accuracy({{2, 0, 0}, {0, 1, 1}, {0, 1, 2}}), (1.0 + 0.5 + 2.0 / 3.0) / 3.0, 1e-15);
  // always predicting class 0
  EXPECT_DOUBLE_EQ(balanced_accuracy({{7, 0}, {3, 0}}), 0.5);
  try {
    balanced_accuracy({{3, 0}, {0, 0}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("class absent from test fold"), std::string::npos);
  }
  EXPECT_THROW(balanced_accuracy({{1, 2}}), DimensionError);
}

TEST(Metrics, BalancedAccuracyInUnitIntervalProperty) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t s = 2 + rng.below(6);
    Confusion c(s, std::vector<std::size_t>(s));
    for (auto& row : c) {
      for (auto& v : row) v = rng.below(5);
      row[rng.below(s)] += 1;
    }
    const auto m = metrics_from_confusion(c);
    ASSERT_GE(m.balanced_accuracy, 0.0);
    ASSERT_LE(m.balanced_accuracy, 1.0);
    double mean = 0.0;
    for (double r : m.per_class_recall) mean += r / static_cast<double>(s);
    ASSERT_NEAR(m.balanced_accuracy, mean, 1e-15);
  }
}

// ---- training ----

TEST(Train, ConfigValidation) {
  auto c = config_for(AggregatorKind::Bgap);
  c.epochs = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = config_for(AggregatorKind::Bgap);
  c.peak_lr = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = config_for(AggregatorKind::Bgap);
  c.bag_batch = 4;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Train, SimpleShotTakesNoOptimizerSteps) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto r = train_model(ds.all(), ds.num_classes(), config_for(AggregatorKind::SimpleShot));
  EXPECT_EQ(r.optimizer_steps, 0u);
  EXPECT_TRUE(r.loss_curve.empty());
  EXPECT_TRUE(std::holds_alternative<agg::Prototypes>(r.model.impl));
}

TEST(Train, StepsAndCurveLength) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Bgap);
  c.epochs = 3;
  const auto r = train_model(ds.all(), ds.num_classes(), c);
  EXPECT_EQ(r.optimizer_steps, 3u * ds.bags.size());
  EXPECT_EQ(r.loss_curve.size(), 3u);
}

TEST(Train, LossFallsOverTwentyEpochsForEveryTrainableAggregator) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec(5));
  for (auto kind : {AggregatorKind::Bgap, AggregatorKind::Abmil, AggregatorKind::Transmil}) {
    const auto r = train_model(ds.all(), ds.num_classes(), config_for(kind));
    ASSERT_EQ(r.loss_curve.size(), 20u);
    EXPECT_LT(r.loss_curve.back(), r.loss_curve.front()) << agg::to_string(kind);
  }
}

TEST(Train, SameSeedGivesBitIdenticalModels) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  for (auto kind : {AggregatorKind::Abmil, AggregatorKind::Transmil}) {
    auto c = config_for(kind, 11);
    c.epochs = 2;
    c.hyper.transmil = {.width = 32, .layers = 1, .heads = 2};
    auto a = train_model(ds.all(), ds.num_classes(), c);
    auto b = train_model(ds.all(), ds.num_classes(), c);
    EXPECT_EQ(agg::encode_model(a.model, ds.manifest.classes), agg::encode_model(b.model, ds.manifest.classes));
    EXPECT_EQ(a.loss_curve, b.loss_curve);
    c.seed = 12;
    auto other = train_model(ds.all(), ds.num_classes(), c);
    EXPECT_NE(agg::encode_model(a.model, ds.manifest.classes), agg::encode_model(other.model, ds.manifest.classes));
  }
}

TEST(Train, MixedDimensionsAreRejected) {
  const data::EmbeddingBag a("a", 2, 3, std::vector<float>(6, 1.0f));
  const data::EmbeddingBag b("b", 2, 4, std::vector<float>(8, 1.0f));
  const std::vector<LabeledBag> train{{&a, 0}, {&b, 1}};
  EXPECT_THROW(train_model(train, 2, config_for(AggregatorKind::Bgap)), DimensionError);
}

TEST(Evaluate, ConfusionRowsCountTestSlides) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto trained = train_model(ds.all(), ds.num_classes(), config_for(AggregatorKind::SimpleShot));
  const auto m = evaluate(trained.model, ds.all(), ds.num_classes());
  const auto counts = ds.manifest.class_counts();
  for (std::size_t s = 0; s < counts.size(); ++s) {
    std::size_t row = 0;
    for (auto v : m.confusion[s]) row += v;
    EXPECT_EQ(row, counts[s]);
  }
}

// Scaling a bag by a positive constant moves BGAP's embedding along a ray;
// the prediction of the scaled bag must still agree with that of its
// permutation.
TEST(Evaluate, BgapPredictionPermutationEqualityUnderScalingProperty) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Bgap);
  c.epochs = 2;
  auto trained = train_model(ds.all(), ds.num_classes(), c);
  Rng rng(2);
  for (const auto& bag : ds.bags) {
    const double scale = std::exp(rng.uniform(-3.0, 3.0));
    data::EmbeddingBag scaled = bag, perm = bag;
    for (auto& v : scaled.data) v = static_cast<float>(v * scale);
    std::vector<std::size_t> order(bag.n);
    for (std::size_t i = 0; i < bag.n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < bag.n; ++i)
      std::copy_n(scaled.row(order[i]).begin(), bag.d, perm.row(i).begin());
    ASSERT_EQ(agg::predict(trained.model, scaled), agg::predict(trained.model, perm));
  }
}

// ---- cross-validation ----

TEST(CrossValidation, FiveFoldsPartitionTheManifest) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Bgap);
  c.epochs = 2;
  const auto r = run_cv(ds, 5, c);
  ASSERT_EQ(r.folds.size(), 5u);
  std::multiset<std::size_t> seen;
  for (std::size_t f = 0; f < 5; ++f) {
    EXPECT_EQ(r.folds[f].fold, f);
    EXPECT_EQ(r.folds[f].seed, c.seed + f);
    for (auto i : r.folds[f].test_indices) seen.insert(i);
    std::set<std::size_t> train(r.folds[f].train_indices.begin(), r.folds[f].train_indices.end());
    for (auto i : r.folds[f].test_indices) EXPECT_EQ(train.count(i), 0u);
    EXPECT_EQ(r.folds[f].train_indices.size() + r.folds[f].test_indices.size(), ds.bags.size());
  }
  ASSERT_EQ(seen.size(), ds.bags.size());
  for (std::size_t i = 0; i < ds.bags.size(); ++i) EXPECT_EQ(seen.count(i), 1u);

  std::size_t pooled_total = 0;
  for (const auto& row : r.pooled.confusion)
    for (auto v : row) pooled_total += v;
  EXPECT_EQ(pooled_total, ds.bags.size());
}

TEST(CrossValidation, MeanAndSampleStd) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto r = run_cv(ds, 5, config_for(AggregatorKind::SimpleShot));
  std::vector<double> ba;
  for (const auto& f : r.folds) ba.push_back(f.metrics.balanced_accuracy);
  double mean = 0.0;
  for (double v : ba) mean += v / 5.0;
  double var = 0.0;
  for (double v : ba) var += (v - mean) * (v - mean) / 4.0;
  EXPECT_NEAR(r.mean_balanced_accuracy, mean, 1e-15);
  EXPECT_NEAR(r.std_balanced_accuracy, std::sqrt(var), 1e-15);
}

TEST(CrossValidation, PrototypesComeFromTrainingFoldsOnly) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto r = run_cv(ds, 5, config_for(AggregatorKind::SimpleShot));
  for (const auto& f : r.folds) {
    const auto& fitted = std::get<agg::Prototypes>(f.model.impl);
    const auto expected = agg::fit_prototypes(ds.select(f.train_indices), ds.num_classes());
    EXPECT_EQ(fitted.values, expected.values);
    const auto with_test = agg::fit_prototypes(ds.all(), ds.num_classes());
    EXPECT_NE(fitted.values, with_test.values);
  }
}

TEST(CrossValidation, TrainedFoldModelDependsOnTrainSplitOnly) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Abmil);
  c.epochs = 2;
  const auto r = run_cv(ds, 5, c);
  // Retrain fold 2 from its train split alone with the fold seed.
  auto fold_config = c;
  fold_config.seed = r.folds[2].seed;
  auto retrained = train_model(ds.select(r.folds[2].train_indices), ds.num_classes(), fold_config);
  auto fold_model = r.folds[2].model;
  EXPECT_EQ(agg::encode_model(retrained.model, ds.manifest.classes),
            agg::encode_model(fold_model, ds.manifest.classes));
}

TEST(CrossValidation, ParallelFoldsMatchSequentialRun) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Abmil);
  c.epochs = 2;
  const auto seq = run_cv(ds, 5, c, 1);
  const auto par = run_cv(ds, 5, c, 3);
  EXPECT_EQ(to_json(seq, ds.manifest, c).dump(), to_json(par, ds.manifest, c).dump());
}

TEST(CrossValidation, RepeatedRunIsIdentical) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  auto c = config_for(AggregatorKind::Bgap);
  c.epochs = 3;
  const auto a = run_cv(ds, 5, c), b = run_cv(ds, 5, c);
  EXPECT_EQ(a.mean_balanced_accuracy, b.mean_balanced_accuracy);
  EXPECT_EQ(a.std_balanced_accuracy, b.std_balanced_accuracy);
}

TEST(CrossValidation, SeparableDataIsLearned) {
  data::SynthSpec spec;  // 6 classes, 30 slides per class, d=64
  spec.seed = 9;
  const auto ds = fixture::synth_in_memory(spec);
  const auto r = run_cv(ds, 5, config_for(AggregatorKind::Abmil));
  EXPECT_GE(r.mean_balanced_accuracy, 0.95);
}

TEST(CrossValidation, FoldSmallerThanClassIsAnError) {
  auto spec = fixture::small_spec();
  spec.slides_per_class = 3;
  const auto ds = fixture::synth_in_memory(spec);
  EXPECT_THROW(run_cv(ds, 5, config_for(AggregatorKind::SimpleShot)), ConfigError);
}

// ---- JSON reports ----

TEST(Report, CvReportLayout) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto c = config_for(AggregatorKind::SimpleShot);
  const auto r = run_cv(ds, 5, c);
  const auto j = to_json(r, ds.manifest, c);
  EXPECT_EQ(j["engine_version"], kEngineVersion);
  EXPECT_EQ(j["k"], 5);
  EXPECT_EQ(j["config"]["aggregator"], "simpleshot");
  ASSERT_EQ(j["folds"].size(), 5u);
  EXPECT_EQ(j["folds"][0]["confusion"].size(), 3u);
  EXPECT_DOUBLE_EQ(j["mean_of_folds"]["balanced_accuracy_mean"].get<double>(), r.mean_balanced_accuracy);
  EXPECT_TRUE(j["pooled"].contains("balanced_accuracy"));
  // round trip through text keeps every double
  const auto back = Json::parse(j.dump(2));
  EXPECT_EQ(back, j);
}

TEST(Report, FoldPlanRoundTrip) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto plan = data::stratified_kfold(ds.manifest, 4, 9);
  const auto j = to_json(plan, ds.manifest);
  const auto back = fold_plan_from_json(j, ds.manifest);
  EXPECT_EQ(back.k, plan.k);
  EXPECT_EQ(back.seed, plan.seed);
  EXPECT_EQ(back.assignment, plan.assignment);

  auto missing = j;
  missing["slides"].erase(0);
  EXPECT_THROW(fold_plan_from_json(missing, ds.manifest), ConfigError);
  auto out_of_range = j;
  out_of_range["slides"][0]["fold"] = 7;
  EXPECT_THROW(fold_plan_from_json(out_of_range, ds.manifest), ConfigError);
  EXPECT_THROW(fold_plan_from_json(Json{{"k", 4}}, ds.manifest), FormatError);
}

TEST(Report, ReadJsonErrors) {
  const auto dir = oracle::temp_dir("json");
  EXPECT_THROW(read_json(dir / "absent.json"), IoError);
  {
    std::ofstream bad(dir / "bad.json");
    bad << "{\"k\": ";
  }
  EXPECT_THROW(read_json(dir / "bad.json"), FormatError);
  write_json(Json{{"a", 1}}, dir / "sub" / "ok.json");
  EXPECT_EQ(read_json(dir / "sub" / "ok.json")["a"], 1);
  std::filesystem::remove_all(dir);
}
