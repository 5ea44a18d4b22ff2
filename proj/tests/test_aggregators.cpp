#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "milengine/aggregators/model_io.hpp"
#include "milengine/data/folds.hpp"
#include "milengine/nn/grad_check.hpp"
#include "milengine/nn/loss.hpp"
#include "milengine/train_eval/train.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace milengine;
using namespace milengine::agg;

namespace {

data::EmbeddingBag random_bag(std::size_t n, std::size_t d, Rng& rng, const std::string& id = "bag") {
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return data::EmbeddingBag(id, n, d, std::move(v));
}

data::EmbeddingBag permuted(const data::EmbeddingBag& bag, Rng& rng) {
  std::vector<std::size_t> order(bag.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  data::EmbeddingBag out(bag.slide_id, bag.n, bag.d, std::vector<float>(bag.data.size()));
  for (std::size_t i = 0; i < bag.n; ++i) std::copy_n(bag.row(order[i]).begin(), bag.d, out.row(i).begin());
  return out;
}

template <class T>
void fill(ParamTensor<T>& p, std::initializer_list<double> values) {
  ASSERT_EQ(static_cast<std::size_t>(p.value.size()), values.size()) << p.name;
  std::size_t i = 0;
  for (double v : values) p.value.data()[i++] = static_cast<T>(v);
}

// Deterministic, asymmetric fill for hand-set parameters.
template <class T>
void fill_pattern(ParamTensor<T>& p, double phase) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = static_cast<T>(0.6 * std::sin(1.3 * static_cast<double>(i) + phase));
}

void expect_near(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

// ---- bgap ----

TEST(Bgap, Examples) {
  const data::EmbeddingBag single("s", 1, 3, {1.5f, -2.0f, 0.25f});
  EXPECT_EQ(bgap(single), (std::vector<double>{1.5, -2.0, 0.25}));
  const data::EmbeddingBag two("t", 2, 2, {1.0f, 0.0f, 0.0f, 1.0f});
  EXPECT_EQ(bgap(two), (std::vector<double>{0.5, 0.5}));
  EXPECT_THROW(bgap(data::EmbeddingBag("e", 0, 2, {})), DimensionError);
}

// ---- abmil ----

TEST(Abmil, HandSetMatchesScalarEvaluation) {
  Rng rng(0);
  auto m = AbmilModel<double>::init(2, 2, rng, 2);
  fill(m.V, {0.5, -1.0, 0.25, 2.0});
  fill(m.U, {1.0, 0.0, -0.5, 0.75});
  fill(m.w, {1.5, -0.8});
  const data::EmbeddingBag bag("b", 3, 2, {1.0f, 2.0f, -1.0f, 0.5f, 0.0f, -3.0f});
  const auto got = abmil_attend(bag, m);
  const auto ref = oracle::abmil(oracle::bag_rows(bag), oracle::to_mat(m.V.value), oracle::to_mat(m.U.value),
                                 oracle::to_mat(m.w.value));
  expect_near(got.attention, ref.a, 1e-12);
  expect_near(got.embedding, ref.z, 1e-12);
}

TEST(Abmil, SingletonBagGetsAllAttention) {
  Rng rng(2);
  auto m = AbmilModel<float>::init(4, 3, rng, 8);
  const data::EmbeddingBag bag("one", 1, 4, {0.1f, -0.2f, 0.3f, 4.0f});
  const auto out = abmil_attend(bag, m);
  EXPECT_EQ(out.attention, std::vector<double>{1.0});
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.embedding[j], static_cast<double>(bag.at(0, j)));
}

TEST(Abmil, ZeroAttentionVectorReducesToBgap) {
  Rng rng(3);
  auto m = AbmilModel<double>::init(6, 2, rng, 8);
  m.w.value.setZero();
  const auto bag = random_bag(7, 6, rng);
  const auto out = abmil_attend(bag, m);
  for (double a : out.attention) EXPECT_NEAR(a, 1.0 / 7.0, 1e-15);
  expect_near(out.embedding, bgap(bag), 1e-12);
}

TEST(Abmil, RandomBagsMatchOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = AbmilModel<double>::init(5, 3, rng, 6);
    const auto bag = random_bag(1 + rng.below(12), 5, rng);
    const auto got = abmil_attend(bag, m);
    const auto ref = oracle::abmil(oracle::bag_rows(bag), oracle::to_mat(m.V.value), oracle::to_mat(m.U.value),
                                   oracle::to_mat(m.w.value));
    expect_near(got.attention, ref.a, 1e-12);
    expect_near(got.embedding, ref.z, 1e-12);
  }
}

TEST(Abmil, AttentionIsNormalizedProperty) {
  Rng rng(5);
  auto m = AbmilModel<float>::init(32, 4, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const auto bag = random_bag(1 + rng.below(200), 32, rng);
    const auto a = abmil_attend(bag, m).attention;
    ASSERT_EQ(a.size(), bag.n);
    double s = 0.0;
    for (double v : a) {
      ASSERT_GE(v, 0.0);
      s += v;
    }
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Abmil, DimensionMismatch) {
  Rng rng(6);
  auto m = AbmilModel<float>::init(4, 2, rng, 8);
  EXPECT_THROW(abmil_attend(random_bag(3, 5, rng), m), DimensionError);
}

// ---- transmil ----

TEST(Transmil, HandSetSingleHeadMatchesStepByStep) {
  Rng rng(0);
  auto m = TransmilModel<double>::init(3, 2, rng, {.width = 4, .layers = 1, .heads = 1});
  double phase = 0.0;
  for (auto* p : m.params()) fill_pattern(*p, phase += 0.7);
  const data::EmbeddingBag bag("b", 2, 3, {0.5f, -1.0f, 2.0f, 1.5f, 0.25f, -0.75f});
  expect_near(transmil_forward(bag, m), oracle::transmil_embed(oracle::bag_rows(bag), m), 1e-10);
}

TEST(Transmil, RandomMultiHeadMatchesOracle) {
  Rng rng(8);
  for (std::size_t heads : {2u, 4u}) {
    auto m = TransmilModel<double>::init(5, 3, rng, {.width = 8, .layers = 2, .heads = heads});
    for (auto* p : m.params())
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.1 * rng.normal();
    const auto bag = random_bag(6, 5, rng);
    expect_near(transmil_forward(bag, m), oracle::transmil_embed(oracle::bag_rows(bag), m), 1e-10);
  }
}

TEST(Transmil, ZeroLayersIgnoresTheBag) {
  Rng rng(9);
  auto m = TransmilModel<float>::init(4, 2, rng, {.width = 8, .layers = 0, .heads = 2});
  const auto a = transmil_forward(random_bag(3, 4, rng), m);
  const auto b = transmil_forward(random_bag(11, 4, rng), m);
  EXPECT_EQ(a, b);
}

TEST(Transmil, WidthMustSplitAcrossHeads) {
  Rng rng(1);
  EXPECT_THROW(TransmilModel<float>::init(4, 2, rng, {.width = 10, .layers = 1, .heads = 4}), ConfigError);
}

// ---- permutation invariance, all four aggregators ----

TEST(Aggregators, PermutationInvarianceProperty) {
  Rng rng(10);
  auto abmil = AbmilModel<float>::init(24, 3, rng);
  auto transmil = TransmilModel<float>::init(24, 3, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto bag = random_bag(2 + rng.below(40), 24, rng);
    const auto perm = permuted(bag, rng);

    expect_near(bgap(bag), bgap(perm), 1e-6);

    const auto a = abmil_attend(bag, abmil), b = abmil_attend(perm, abmil);
    expect_near(a.embedding, b.embedding, 1e-6);
    auto sorted_a = a.attention, sorted_b = b.attention;
    std::sort(sorted_a.begin(), sorted_a.end());
    std::sort(sorted_b.begin(), sorted_b.end());
    expect_near(sorted_a, sorted_b, 1e-6);

    expect_near(transmil_forward(bag, transmil), transmil_forward(perm, transmil), 1e-6);

    const auto other = random_bag(5, 24, rng);
    const std::vector<LabeledBag> train{{&bag, 0}, {&other, 1}};
    const std::vector<LabeledBag> train_perm{{&perm, 0}, {&other, 1}};
    const auto p1 = fit_prototypes(train, 2), p2 = fit_prototypes(train_perm, 2);
    for (std::size_t i = 0; i < p1.values.size(); ++i) ASSERT_NEAR(p1.values[i], p2.values[i], 1e-6);
    EXPECT_EQ(simpleshot_predict(bag, p1), simpleshot_predict(perm, p1));
  }
}

// ---- classifier head ----

TEST(Head, ScoresAreAProbabilityVector) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    auto head = MlpHead<float>::init(16, 2 + rng.below(6), rng);
    std::vector<double> z(16);
    for (auto& v : z) v = rng.normal(0.0, 5.0);
    const auto p = classify(z, head);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(Head, ZeroParametersGiveUniformScores) {
  Rng rng(12);
  auto head = MlpHead<double>::init(8, 5, rng);
  for (auto* p : head.params()) p->value.setZero();
  const std::vector<double> z{1, 2, 3, 4, 5, 6, 7, 8};
  for (double v : classify(z, head)) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Head, HandSetTwoClassHead) {
  Rng rng(13);
  auto head = MlpHead<double>::init(2, 2, rng);
  for (auto* p : head.params()) p->value.setZero();
  head.w1.value(0, 0) = 1.0;
  head.w1.value(1, 0) = 2.0;
  head.b1.value(0, 0) = 0.5;
  head.w2.value(0, 0) = 1.0;
  head.w2.value(0, 1) = -1.0;
  head.b2.value(0, 1) = 0.25;
  const std::vector<double> z{0.5, -1.0};
  // hidden unit 0 = tanh(0.5*1 - 1*2 + 0.5) = tanh(-1), other hidden units are 0
  const double h = std::tanh(-1.0);
  const double l0 = h, l1 = -h + 0.25;
  const double p1 = 1.0 / (1.0 + std::exp(l0 - l1));
  const auto p = classify(z, head);
  EXPECT_NEAR(p[0], 1.0 - p1, 1e-15);
  EXPECT_NEAR(p[1], p1, 1e-15);
}

TEST(Head, DimensionMismatch) {
  Rng rng(14);
  auto head = MlpHead<float>::init(4, 2, rng);
  const std::vector<double> z(5, 1.0);
  EXPECT_THROW(classify(z, head), DimensionError);
}

// ---- prototypes and simpleshot ----

TEST(Prototypes, ZeroNoiseSynthRecoversCentroids) {
  data::SynthSpec spec = fixture::small_spec(3);
  spec.slides_per_class = 1;
  spec.sigma_within = 0.0;
  spec.salient_fraction = 1.0;
  auto gen = data::synth_generate(spec);
  std::vector<LabeledBag> train;
  for (const auto& s : gen.slides) train.push_back({&s.bag, s.label});
  const auto p = fit_prototypes(train, spec.num_classes);
  for (std::size_t s = 0; s < spec.num_classes; ++s)
    for (std::size_t j = 0; j < spec.dim; ++j) EXPECT_EQ(p.row(s)[j], static_cast<float>(gen.centroids[s][j]));
}

TEST(Prototypes, PooledRowsWeighBagsByInstanceCount) {
  const data::EmbeddingBag a("a", 1, 2, {3.0f, 0.0f});                          // mean u = (3, 0), n1 = 1
  const data::EmbeddingBag b("b", 3, 2, {0.0f, 1.0f, 0.0f, 2.0f, 0.0f, 3.0f});  // mean v = (0, 2), n2 = 3
  const data::EmbeddingBag c("c", 1, 2, {-1.0f, -1.0f});
  const std::vector<LabeledBag> train{{&a, 0}, {&b, 0}, {&c, 1}};
  const auto p = fit_prototypes(train, 2);
  // (1*(3,0) + 3*(0,2)) / 4
  EXPECT_FLOAT_EQ(p.row(0)[0], 0.75f);
  EXPECT_FLOAT_EQ(p.row(0)[1], 1.5f);
  const std::vector<LabeledBag> reordered{{&c, 1}, {&b, 0}, {&a, 0}};
  EXPECT_EQ(fit_prototypes(reordered, 2).values, p.values);
  EXPECT_EQ(param_count(p), 0u);
}

TEST(Prototypes, MissingClassIsAnError) {
  const data::EmbeddingBag a("a", 1, 2, {1.0f, 0.0f});
  const std::vector<LabeledBag> train{{&a, 0}};
  EXPECT_THROW(fit_prototypes(train, 2), ConfigError);
}

TEST(SimpleShot, Examples) {
  Prototypes p{3, 2, {1.0f, 0.0f, 0.0f, 1.0f, -1.0f, -1.0f}, false};
  EXPECT_EQ(simpleshot_predict(data::EmbeddingBag("q", 1, 2, {-1.0f, -1.0f}), p), 2u);
  // equal cosine to prototypes 0 and 1
  EXPECT_EQ(simpleshot_predict(data::EmbeddingBag("q", 2, 2, {1.0f, 0.0f, 0.0f, 1.0f}), p), 0u);
  // zero-norm query: every similarity is 0, lowest index wins
  EXPECT_EQ(simpleshot_predict(data::EmbeddingBag("q", 1, 2, {0.0f, 0.0f}), p), 0u);
  EXPECT_THROW(simpleshot_predict(data::EmbeddingBag("q", 1, 3, {1.0f, 0.0f, 0.0f}), p), DimensionError);
}

TEST(SimpleShot, MatchesExhaustiveOracle) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Prototypes p{3, 8, std::vector<float>(24), false};
    for (auto& v : p.values) v = static_cast<float>(rng.normal());
    const auto bag = random_bag(1 + rng.below(6), 8, rng);
    oracle::Mat protos(3, oracle::Vec(8));
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t j = 0; j < 8; ++j) protos[s][j] = p.values[s * 8 + j];
    EXPECT_EQ(simpleshot_predict(bag, p), oracle::nearest_prototype(oracle::mean_rows(oracle::bag_rows(bag)), protos));
  }
}

// ---- parameter counts ----

TEST(ParamCount, ShapeArithmetic) {
  Rng rng(16);
  auto abmil = AbmilModel<float>::init(512, 6, rng, 128);
  EXPECT_EQ(attention_param_count(abmil), 131200u);
  auto head = MlpHead<float>::init(512, 6, rng);
  EXPECT_EQ(param_count(head), 66438u);
  auto model = make_model<float>(AggregatorKind::Abmil, 512, 6, 0);
  EXPECT_EQ(param_count(model), 131200u + 66438u);
  auto proto = make_model<float>(AggregatorKind::SimpleShot, 512, 6, 0);
  EXPECT_EQ(param_count(proto), 0u);
}

// ---- gradient checks of every trainable graph ----

namespace {

template <class M>
nn::GradCheckResult check_model(M& model, const data::EmbeddingBag& bag, std::size_t label, std::uint64_t seed) {
  const auto x = bag_matrix<double>(bag);
  auto params = model.params();
  return nn::grad_check(
      [&](nn::Tape<double>& t) { return nn::cross_entropy(t, model.forward(t, t.constant(x)), label); }, params,
      {.seed = seed});
}

}  // namespace

TEST(AggregatorGradients, AbmilD16N5) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(200 + seed);
    auto m = AbmilModel<double>::init(16, 3, rng);
    const auto r = check_model(m, random_bag(5, 16, rng), seed % 3, seed);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
    EXPECT_EQ(r.non_differentiable, 0u);
  }
}

TEST(AggregatorGradients, TransmilSmall) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(300 + seed);
    auto m = TransmilModel<double>::init(6, 3, rng, {.width = 8, .layers = 2, .heads = 2});
    const auto r = check_model(m, random_bag(4, 6, rng), 1, seed);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(AggregatorGradients, BgapAndHead) {
  Rng rng(400);
  auto m = BgapModel<double>::init(10, 4, rng);
  const auto r = check_model(m, random_bag(6, 10, rng), 3, 0);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

// ---- model files ----

TEST(ModelIo, RoundTripEveryKind) {
  const auto ds = fixture::synth_in_memory(fixture::small_spec());
  const auto all = ds.all();
  for (auto kind : {AggregatorKind::Bgap, AggregatorKind::Abmil, AggregatorKind::Transmil, AggregatorKind::SimpleShot}) {
    ModelHyper hyper;
    hyper.abmil_hidden = 12;
    hyper.transmil = {.width = 16, .layers = 1, .heads = 2};
    auto m = make_model<float>(kind, ds.dim(), ds.num_classes(), 5, hyper);
    if (kind == AggregatorKind::SimpleShot) m.impl = fit_prototypes(all, ds.num_classes());
    const auto bytes = encode_model(m, ds.manifest.classes);
    auto back = decode_model(bytes);
    EXPECT_EQ(back.classes, ds.manifest.classes);
    EXPECT_EQ(back.model.kind, kind);
    EXPECT_EQ(encode_model(back.model, back.classes), bytes);
    for (const auto& bag : ds.bags) ASSERT_EQ(predict_scores(back.model, bag), predict_scores(m, bag));
  }
}

TEST(ModelIo, CorruptFilesAreRejected) {
  auto m = make_model<float>(AggregatorKind::Bgap, 4, 2, 1);
  const std::vector<std::string> classes{"a", "b"};
  auto bytes = encode_model(m, classes);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_model(bad_magic), FormatError);

  const std::vector<char> truncated(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(decode_model(truncated), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_model(trailing), FormatError);

  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(decode_model(version), FormatError);

  EXPECT_THROW(encode_model(m, {"only"}), ConfigError);
  EXPECT_THROW(load_model("/nonexistent/model.milm"), IoError);
}

// ---- salience ----

TEST(Abmil, TrainedModelAttendsToSalientInstances) {
  data::SynthSpec spec = fixture::small_spec(21);
  spec.slides_per_class = 20;
  spec.salient_fraction = 0.3;
  spec.centroid_scale = 2.0;
  std::vector<std::size_t> salient;
  const auto ds = fixture::synth_in_memory(spec, &salient);
  const auto plan = data::stratified_kfold(ds.manifest, 4, 3);
  const auto train_idx = plan.train_indices(0), test_idx = plan.test_indices(0);

  eval::TrainConfig config;
  config.aggregator = AggregatorKind::Abmil;
  config.seed = 4;
  auto trained = eval::train_model(ds.select(train_idx), ds.num_classes(), config);
  auto& model = std::get<AbmilModel<float>>(trained.model.impl);

  for (auto i : test_idx) {
    const auto a = abmil_attend(ds.bags[i], model).attention;
    const std::size_t k = salient[i];
    ASSERT_LT(k, a.size());
    const double sal = std::accumulate(a.begin(), a.begin() + static_cast<long>(k), 0.0) / static_cast<double>(k);
    const double bg = std::accumulate(a.begin() + static_cast<long>(k), a.end(), 0.0) /
                      static_cast<double>(a.size() - k);
    EXPECT_GT(sal, bg) << ds.bags[i].slide_id;
  }
}
