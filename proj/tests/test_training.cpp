#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace osrvit;
using namespace osrvit::testing;

namespace {

ModelConfig small_model(std::size_t k) {
  ModelConfig c;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.num_classes = k;
  return c.validated();
}

struct Fixture {
  SplitSpec split;
  DatasetBundle data;
  Normalizer norm;
};

Fixture synthetic_fixture(std::size_t known = 3, std::size_t per_class = 12) {
  Fixture f;
  f.split.dataset = "mnist";
  f.split.protocol = "six-four";
  for (std::size_t k = 0; k < known; ++k) f.split.known.push_back(static_cast<int>(k));
  f.split.unknown = {static_cast<int>(known)};
  f.data.train = synthetic_images(known + 1, per_class, 28, 28, 1, 1);
  f.data.test = synthetic_images(known + 1, per_class / 2, 28, 28, 1, 2);
  f.norm = Normalizer::fit(known_training_images(f.split, f.data.train));
  return f;
}

TrainConfig quick_config(std::size_t steps) {
  TrainConfig t;
  t.learning_rate = 0.05;
  t.batch_size = 8;
  t.max_steps = steps;
  t.seed = 3;
  t.deterministic = true;
  return t;
}

double closed_set_accuracy(const VitModel<D>& m, const Stream& s) {
  std::size_t hits = 0, n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.tag(i) != Openness::known) continue;
    ++n;
    hits += m.classify_features(m.features(s.image(i), 1)).labels[0] == s.label(i);
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TEST(CrossEntropy, PerfectPredictionIsZero) {
  Tensor<D> logits({1, 3}, std::vector<D>{800, 0, 0});
  const std::vector<int> y{0};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(y)).item(), 0.0, 1e-300);
}

TEST(CrossEntropy, UniformOverFourIsLogFour) {
  Tensor<D> logits({1, 4}, std::vector<D>{0.3, 0.3, 0.3, 0.3});
  const std::vector<int> y{2};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(y)).item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(CrossEntropy, BatchIsMeanOfSamples) {
  Tensor<D> a({1, 3}, std::vector<D>{1, 2, 3}), b({1, 3}, std::vector<D>{0, -1, 4});
  Tensor<D> both({2, 3}, std::vector<D>{1, 2, 3, 0, -1, 4});
  const std::vector<int> ya{0}, yb{1}, yab{0, 1};
  const D la = cross_entropy(a, std::span<const int>(ya)).item();
  const D lb = cross_entropy(b, std::span<const int>(yb)).item();
  EXPECT_NEAR(cross_entropy(both, std::span<const int>(yab)).item(), (la + lb) / 2, 1e-15);
}

TEST(CrossEntropy, LabelOutOfRangeIsContractError) {
  Tensor<D> logits({1, 2});
  const std::vector<int> y{2};
  EXPECT_THROW(cross_entropy(logits, std::span<const int>(y)), ContractError);
}

TEST(Sgd, ZeroMomentumIsPlainSgd) {
  Tensor<D> w({2}, std::vector<D>{1.0, -2.0});
  w.set_requires_grad();
  w.grad()[0] = 0.5;
  w.grad()[1] = -1.0;
  std::vector<NamedTensor<D>> params{{"w", w}};
  auto state = OptimizerState<D>::for_parameters(params);
  sgd_momentum_step<D>(params, state, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(w[1], -2.0 + 0.1);
}

TEST(Sgd, ZeroGradientLeavesParametersUnchanged) {
  Tensor<D> w({3}, std::vector<D>{1, 2, 3});
  w.set_requires_grad();
  std::vector<NamedTensor<D>> params{{"w", w}};
  auto state = OptimizerState<D>::for_parameters(params);
  for (int i = 0; i < 10; ++i) sgd_momentum_step<D>(params, state, 0.1, 0.9);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[2], 3.0);
}

TEST(Sgd, ClassicMomentumTwoSteps) {
  Tensor<D> w({1}, std::vector<D>{0.0});
  w.set_requires_grad();
  std::vector<NamedTensor<D>> params{{"w", w}};
  auto state = OptimizerState<D>::for_parameters(params);
  EXPECT_EQ(state.velocity.size(), 1u);
  EXPECT_EQ(state.velocity[0].size(), 1u);
  EXPECT_EQ(state.velocity[0][0], 0.0);
  w.grad()[0] = 1.0;
  sgd_momentum_step<D>(params, state, 0.1, 0.9);
  EXPECT_NEAR(w[0], -0.1, 1e-15);
  sgd_momentum_step<D>(params, state, 0.1, 0.9);
  EXPECT_NEAR(w[0], -0.1 - 0.19, 1e-15);
}

TEST(TrainConfig, ValidatesRanges) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.momentum = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.max_steps = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Stage1, LossDecreases) {
  auto f = synthetic_fixture();
  const TrainConfig cfg = quick_config(200);
  Stream train(f.split, f.data, Phase::train, cfg.batch_size, cfg.seed, f.norm);
  auto m = VitModel<D>::init(small_model(3), 5);
  auto full_loss = [&] {
    Tensor<D> feats = m.features(train.pixels(), train.size());
    return cross_entropy(m.classify_features(feats).logits, train.labels()).item();
  };
  const double before = full_loss();
  const auto r = train_stage1(m, train, cfg);
  EXPECT_EQ(r.steps, 200u);
  EXPECT_LT(full_loss(), before);
}

TEST(Stage1, SingleClassLossIsZero) {
  auto f = synthetic_fixture(1, 6);
  TrainConfig cfg = quick_config(3);
  Stream train(f.split, f.data, Phase::train, cfg.batch_size, cfg.seed, f.norm);
  auto m = VitModel<D>::init(small_model(1), 0);
  const auto r = train_stage1(m, train, cfg);
  for (double l : r.step_losses) EXPECT_NEAR(l, 0.0, 1e-12);
}

TEST(Stage1, DeterministicRunsAreBitIdentical) {
  auto f = synthetic_fixture();
  auto run = [&](std::size_t prefetch) {
    TrainConfig cfg = quick_config(30);
    cfg.prefetch_depth = prefetch;
    set_deterministic(true);
    Stream train(f.split, f.data, Phase::train, cfg.batch_size, cfg.seed, f.norm, Augmentation{true, 2});
    auto m = VitModel<float>::init(small_model(3), 9);
    const auto r = train_stage1(m, train, cfg);
    set_deterministic(false);
    return std::make_pair(parameter_hash(m.parameters()), r.step_losses);
  };
  const auto a = run(2), b = run(2), c = run(0), d = run(5);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.first, d.first);
  EXPECT_EQ(a.second, d.second);
}

TEST(Stage1, StreamModelMismatchIsProtocolError) {
  auto f = synthetic_fixture();
  Stream train(f.split, f.data, Phase::train, 8, 0, f.norm);
  auto m = VitModel<D>::init(small_model(4), 0);
  EXPECT_THROW(train_stage1(m, train, quick_config(1)), ProtocolError);
  Stream test(f.split, f.data, Phase::test, 8, 0, f.norm);
  auto m3 = VitModel<D>::init(small_model(3), 0);
  EXPECT_THROW(train_stage1(m3, test, quick_config(1)), ProtocolError);
}

TEST(Stage1, FullBatchStepIndependentOfSampleOrder) {
  auto f = synthetic_fixture(3, 4);
  Stream train(f.split, f.data, Phase::train, 64, 0, f.norm);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto step = [&](const std::vector<std::size_t>& ord) {
    auto m = VitModel<D>::init(small_model(3), 1);
    Batch b = train.batch(0, 0, ord);
    auto params = m.parameters();
    auto state = OptimizerState<D>::for_parameters(params);
    ComputationRecord<D> rec;
    {
      auto scope = rec.activate();
      Tensor<D> loss = cross_entropy(m.classify_features(m.features(std::span<const float>(b.images), b.size())).logits,
                                     std::span<const int>(b.labels));
      rec.backward(loss);
    }
    sgd_momentum_step<D>(params, state, 0.1, 0.9);
    std::vector<D> flat;
    for (auto& p : params) flat.insert(flat.end(), p.tensor.values().begin(), p.tensor.values().end());
    return flat;
  };
  const auto ref = step(order);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 3; ++t) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto other = step(order);
    ASSERT_EQ(ref.size(), other.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(ref[i], other[i], 1e-13);
  }
}

class Stage2Test : public ::testing::Test {
 protected:
  void SetUp() override {
    f = synthetic_fixture();
    cfg = quick_config(60);
    train = std::make_unique<Stream>(f.split, f.data, Phase::train, cfg.batch_size, cfg.seed, f.norm);
    test = std::make_unique<Stream>(f.split, f.data, Phase::test, 64, 0, f.norm);
    model = VitModel<D>::init(small_model(3), 2);
    train_stage1(model, *train, cfg);
    head = DetectionHead<D>::init(16, DetectionInit::identity, 2);
    centers = anchor_centers(model, head, train->pixels(), train->labels());
  }

  Fixture f;
  TrainConfig cfg;
  std::unique_ptr<Stream> train, test;
  VitModel<D> model;
  DetectionHead<D> head;
  ClassCenters<D> centers;
};

TEST_F(Stage2Test, FreezesEverythingButTheDetectionHead) {
  const auto frozen_before = parameter_hash(model.parameters());
  const auto centers_before = centers;
  const auto head_before = parameter_hash(head.parameters());
  const double acc_before = closed_set_accuracy(model, *test);
  const double dist_before = mean_center_distance(model, head, centers, *train);
  TrainConfig s2 = cfg;
  s2.learning_rate = 0.01;
  Stream full_batch(f.split, f.data, Phase::train, train->size(), cfg.seed, f.norm);
  train_stage2(model, head, centers, full_batch, s2);
  EXPECT_EQ(parameter_hash(model.parameters()), frozen_before);
  EXPECT_EQ(centers, centers_before);
  EXPECT_NE(parameter_hash(head.parameters()), head_before);
  EXPECT_EQ(closed_set_accuracy(model, *test), acc_before);
  EXPECT_LT(mean_center_distance(model, head, centers, *train), dist_before);
}

TEST_F(Stage2Test, HeldOutCenterLossDecreases) {
  Stream held_out(f.split, f.data, Phase::test, 64, 0, f.norm);
  std::vector<float> px;
  std::vector<int> ys;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    if (held_out.tag(i) != Openness::known) continue;
    px.insert(px.end(), held_out.image(i).begin(), held_out.image(i).end());
    ys.push_back(held_out.label(i));
  }
  auto loss = [&] {
    Tensor<D> e = detect_embed(model.features(std::span<const float>(px), ys.size()), head);
    return center_loss(e, std::span<const int>(ys), centers).item();
  };
  const double before = loss();
  TrainConfig s2 = cfg;
  s2.learning_rate = 0.01;
  train_stage2(model, head, centers, *train, s2);
  EXPECT_LT(loss(), before);
}

TEST_F(Stage2Test, UnanchoredCentersAreProtocolError) {
  EXPECT_THROW(train_stage2(model, head, ClassCenters<D>{}, *train, cfg), ProtocolError);
  ClassCenters<D> unfrozen(3, 16, std::vector<D>(48, 0.0), false);
  EXPECT_THROW(train_stage2(model, head, unfrozen, *train, cfg), ProtocolError);
}

TEST_F(Stage2Test, AugmentedAndCachedPathsAgreeWithoutAugmentation) {
  auto h2 = DetectionHead<D>::init(16, DetectionInit::identity, 2);
  TrainConfig s2 = cfg;
  s2.learning_rate = 0.01;
  s2.max_steps = 10;
  train_stage2(model, head, centers, *train, s2);
  train_stage2(model, h2, centers, *train, s2);
  EXPECT_EQ(parameter_hash(head.parameters()), parameter_hash(h2.parameters()));
}

TEST(MetricsLog, WritesOneJsonRecordPerStep) {
  std::ostringstream out;
  MetricsLog log(&out);
  log.record(1, 1, 0.5);
  log.record(2, 7, 0.25);
  std::istringstream in(out.str());
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["stage"], 2);
  EXPECT_EQ(rows[1]["step"], 7);
  EXPECT_EQ(rows[1]["loss"], 0.25);
  EXPECT_TRUE(rows[0].contains("wall_time"));
}

TEST(RunEpochs, StopsOnPlateauAndEpochCap) {
  auto f = synthetic_fixture();
  TrainConfig cfg = quick_config(100000);
  cfg.max_epochs = 3;
  Stream train(f.split, f.data, Phase::train, cfg.batch_size, cfg.seed, f.norm);
  auto m = VitModel<D>::init(small_model(3), 0);
  const auto r = train_stage1(m, train, cfg);
  EXPECT_EQ(r.epochs, 3u);
  EXPECT_EQ(r.steps, 3 * train.batches_per_epoch());
  EXPECT_EQ(r.epoch_losses.size(), 3u);

  auto m2 = VitModel<D>::init(small_model(3), 0);
  auto h = DetectionHead<D>::init(16, DetectionInit::identity, 0);
  auto c = anchor_centers(m2, h, train.pixels(), train.labels());
  TrainConfig s2 = quick_config(100000);
  s2.learning_rate = 1e-12;
  s2.plateau_patience = 2;
  s2.plateau_min_delta = 0.5;
  const auto r2 = train_stage2(m2, h, c, train, s2);
  EXPECT_EQ(r2.epochs, 3u);
}
