#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "../common/oracles.hpp"
#include "mocomsi/datasets/synthetic.hpp"
#include "mocomsi/moco/moco.hpp"
#include "mocomsi/pipeline/config.hpp"
#include "test_support.hpp"

namespace mocomsi {
namespace {

nn::Tensor<double> rows(std::vector<std::vector<double>> r) {
  nn::Tensor<double> t({static_cast<int>(r.size()), static_cast<int>(r[0].size())});
  for (std::size_t i = 0; i < r.size(); ++i) std::copy(r[i].begin(), r[i].end(), t.item(static_cast<int>(i)));
  return t;
}

TEST(InfoNce, AlignedPositiveOrthogonalQueue) {
  const auto q = rows({{1, 0, 0}});
  const auto queue = rows({{0, 1, 0}, {0, 0, 1}});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  EXPECT_NEAR(infonce_loss(q, q, queue, 1.0), expected, 1e-12);
  EXPECT_NEAR(expected, 0.5514, 1e-4);
  EXPECT_NEAR(infonce_loss(q, q, queue, 1.0), oracle::infonce(q, q, queue, 1.0), 1e-12);
}

TEST(InfoNce, UniformLogitsGiveLogKPlusOne) {
  const auto q = rows({{1, 0, 0, 0, 0}});
  const auto k = rows({{0, 1, 0, 0, 0}});
  const auto queue = rows({{0, 0, 1, 0, 0}, {0, 0, 0, 1, 0}, {0, 0, 0, 0, 1}});
  EXPECT_NEAR(infonce_loss(q, k, queue, 1.0), std::log(4.0), 1e-12);
}

TEST(InfoNce, HalfTemperature) {
  const auto q = rows({{1, 0, 0}});
  const auto queue = rows({{0, 1, 0}, {0, 0, 1}});
  const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + 2.0));
  EXPECT_NEAR(infonce_loss(q, q, queue, 0.5), expected, 1e-12);
  EXPECT_NEAR(expected, 0.2395, 1e-4);
}

TEST(InfoNce, NonPositiveTemperatureIsDomainError) {
  const auto q = rows({{1, 0}});
  EXPECT_THROW(infonce_loss(q, q, q, 0.0), DomainError);
  EXPECT_THROW(infonce_loss(q, q, q, -1.0), DomainError);
}

TEST(InfoNce, UnnormalizedInputIsContractViolation) {
  const auto q = rows({{1.01, 0}});
  const auto u = rows({{0, 1}});
  EXPECT_THROW(infonce_loss(q, u, u, 1.0), ContractViolation);
  EXPECT_THROW(infonce_loss(u, q, u, 1.0), ContractViolation);
  EXPECT_THROW(infonce_loss(u, u, q, 1.0), ContractViolation);
}

TEST(InfoNce, MatchesSoftmaxOracleOnRandomInstances) {
  EXPECT_LE(oracle::infonce_loss_oracle_error(100, 17), 1e-6);
}

TEST(InfoNce, LossBoundForTemperatureAtLeastOne) {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 500; ++t) {
    const int b = 1 + static_cast<int>(gen() % 4), k = 1 + static_cast<int>(gen() % 16), d = 2 + static_cast<int>(gen() % 7);
    const double tau = 1.0 + 3.0 * std::uniform_real_distribution<double>()(gen);
    const auto q = oracle::random_unit_rows(gen, b, d), kp = oracle::random_unit_rows(gen, b, d),
               queue = oracle::random_unit_rows(gen, k, d);
    const double loss = infonce_loss(q, kp, queue, tau);
    ASSERT_GT(loss, 0.0);
    // With unit vectors logits lie in [-1/tau, 1/tau]; the loss is capped by
    // the case of a minimal positive and maximal negatives.
    ASSERT_LE(loss, std::log(1.0 + k * std::exp(2.0 / tau)) + 1e-12);
  }
}

TEST(InfoNce, QueryGradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(5);
  const auto q = oracle::random_unit_rows(gen, 3, 5), k = oracle::random_unit_rows(gen, 3, 5),
             queue = oracle::random_unit_rows(gen, 7, 5);
  const auto res = infonce_loss_and_grad(q, k, queue, 0.3);
  // Perturb q freely (the oracle does not require unit rows).
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    auto up = q, down = q;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    const double fd = (oracle::infonce(up, k, queue, 0.3) - oracle::infonce(down, k, queue, 0.3)) / 2e-6;
    EXPECT_NEAR(res.grad_q.data[i], fd, 1e-7);
  }
}

TEST(InfoNce, EncoderGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) EXPECT_LE(oracle::infonce_encoder_gradient_error(seed), 1e-4) << seed;
}

TEST(L2Normalize, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> nd;
  nn::Tensor<double> z({2, 4});
  for (auto& v : z.data) v = nd(gen);
  nn::Tensor<double> w({2, 4});
  for (auto& v : w.data) v = nd(gen);
  auto f = [&](const nn::Tensor<double>& zz) {
    const auto u = l2_normalize_rows(zz).unit;
    double s = 0.0;
    for (std::size_t i = 0; i < u.data.size(); ++i) s += u.data[i] * w.data[i];
    return s;
  };
  const auto fwd = l2_normalize_rows(z);
  const auto g = l2_normalize_backward(w, fwd);
  for (std::size_t i = 0; i < z.data.size(); ++i) {
    auto up = z, down = z;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    EXPECT_NEAR(g.data[i], (f(up) - f(down)) / 2e-6, 1e-7);
  }
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.tiny_widths = {4, 8};
  e.output_dim = 8;
  e.projection_dim = 4;
  return e;
}

Stage1Config tiny_stage1() {
  Stage1Config c;
  c.queue_size = 8;
  c.batch_size = 2;
  c.seed = 3;
  return c;
}

TEST(InitMoco, KeyEncoderIsExactCopy) {
  auto s = init_moco<float>(tiny_encoder(), tiny_stage1(), 3);
  const auto q = s.query.parameters(), k = s.key.parameters();
  ASSERT_EQ(q.size(), k.size());
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_EQ(q[i]->value, k[i]->value);
  EXPECT_EQ(s.queue_ptr, 0);
}

TEST(InitMoco, QueueRowsAreUnitNorm) {
  auto s = init_moco<float>(tiny_encoder(), tiny_stage1(), 3);
  for (int i = 0; i < s.queue.dim(0); ++i) {
    double n = 0.0;
    for (int j = 0; j < s.queue.dim(1); ++j) n += double(s.queue.item(i)[j]) * s.queue.item(i)[j];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
}

TEST(InitMoco, SameSeedSameWeights) {
  auto a = init_moco<float>(tiny_encoder(), tiny_stage1(), 3);
  auto b = init_moco<float>(tiny_encoder(), tiny_stage1(), 3);
  auto c = init_moco<float>(tiny_encoder(), tiny_stage1(), 4);
  EXPECT_EQ(encoder_state(a.query), encoder_state(b.query));
  EXPECT_NE(encoder_state(a.query), encoder_state(c.query));
}

TEST(InitMoco, QueueNotDivisibleByBatchIsConfigError) {
  auto cfg = tiny_stage1();
  cfg.queue_size = 7;
  EXPECT_THROW(init_moco<float>(tiny_encoder(), cfg, 0), ConfigError);
}

TEST(MomentumUpdate, BoundaryAndScalarCases) {
  auto make = [](double v) {
    nn::Parameter<double> p;
    p.shape = {1};
    p.value = {v};
    p.grad = {0.0};
    return p;
  };
  auto q = make(0.0), k = make(1.0);
  momentum_update<double>({&q}, {&k}, 1.0);
  EXPECT_EQ(k.value[0], 1.0);
  momentum_update<double>({&q}, {&k}, 0.999);
  EXPECT_NEAR(k.value[0], 0.999, 1e-15);
  EXPECT_EQ(q.value[0], 0.0);
  momentum_update<double>({&q}, {&k}, 0.0);
  EXPECT_EQ(k.value[0], 0.0);
}

TEST(MomentumUpdate, ShapeMismatchIsContractViolation) {
  nn::Parameter<double> q, k;
  q.value = {1, 2};
  k.value = {1};
  EXPECT_THROW(momentum_update<double>({&q}, {&k}, 0.5), ContractViolation);
  EXPECT_THROW(momentum_update<double>({&q}, {}, 0.5), ContractViolation);
}

TEST(Enqueue, ReplacesRowsAndAdvances) {
  auto cfg = tiny_stage1();
  cfg.queue_size = 4;
  auto s = init_moco<double>(tiny_encoder(), cfg, 1);
  std::mt19937_64 gen(1);
  const auto before = s.queue;
  const auto keys = oracle::random_unit_rows(gen, 2, 4);
  enqueue(s, keys);
  EXPECT_EQ(s.queue_ptr, 2);
  EXPECT_TRUE(std::equal(keys.item(0), keys.item(0) + 4, s.queue.item(0)));
  EXPECT_TRUE(std::equal(keys.item(1), keys.item(1) + 4, s.queue.item(1)));
  EXPECT_TRUE(std::equal(before.item(2), before.item(2) + 8, s.queue.item(2)));
}

TEST(Enqueue, WrapsAround) {
  auto cfg = tiny_stage1();
  cfg.queue_size = 4;
  cfg.batch_size = 1;
  auto s = init_moco<double>(tiny_encoder(), cfg, 1);
  s.queue_ptr = 3;
  std::mt19937_64 gen(2);
  const auto before = s.queue;
  const auto keys = oracle::random_unit_rows(gen, 2, 4);
  enqueue(s, keys);
  EXPECT_EQ(s.queue_ptr, 1);
  EXPECT_TRUE(std::equal(keys.item(0), keys.item(0) + 4, s.queue.item(3)));
  EXPECT_TRUE(std::equal(keys.item(1), keys.item(1) + 4, s.queue.item(0)));
  EXPECT_TRUE(std::equal(before.item(1), before.item(1) + 8, s.queue.item(1)));
}

TEST(Enqueue, FullCycleReplacesEveryRowOnce) {
  auto cfg = tiny_stage1();
  auto s = init_moco<double>(tiny_encoder(), cfg, 1);
  std::mt19937_64 gen(4);
  std::vector<nn::Tensor<double>> pushed;
  for (int i = 0; i < cfg.queue_size / cfg.batch_size; ++i) {
    pushed.push_back(oracle::random_unit_rows(gen, cfg.batch_size, 4));
    enqueue(s, pushed.back());
  }
  EXPECT_EQ(s.queue_ptr, 0);
  for (int r = 0; r < cfg.queue_size; ++r) {
    const auto& src = pushed[static_cast<std::size_t>(r / cfg.batch_size)];
    EXPECT_TRUE(std::equal(src.item(r % cfg.batch_size), src.item(r % cfg.batch_size) + 4, s.queue.item(r)));
  }
}

TEST(Enqueue, BatchLargerThanQueueIsContractViolation) {
  auto cfg = tiny_stage1();
  cfg.queue_size = 4;
  auto s = init_moco<double>(tiny_encoder(), cfg, 1);
  std::mt19937_64 gen(5);
  EXPECT_THROW(enqueue(s, oracle::random_unit_rows(gen, 5, 4)), ContractViolation);
}

TEST(Enqueue, ExhaustiveRingBuffer) {
  for (int k : {4, 8})
    for (int b : {1, 2, 4}) EXPECT_TRUE(oracle::queue_ring_buffer_matches(k, b)) << "K=" << k << " B=" << b;
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 0.03), 0.03);
  EXPECT_NEAR(cosine_lr(10, 10, 0.03), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(5, 10, 0.03), 0.015, 1e-15);
  EXPECT_THROW(cosine_lr(0, 0, 0.03), DomainError);
  EXPECT_THROW(cosine_lr(11, 10, 0.03), DomainError);
}

TEST(TrainStep, KeyEncoderFollowsMomentumRule) {
  EXPECT_LE(oracle::key_trajectory_error(50, 0.9, 1), 1e-6);
  EXPECT_LE(oracle::key_trajectory_error(50, 0.999, 2), 1e-6);
}

TEST(TrainStep, OneStepUpdateOrder) {
  auto cfg = tiny_stage1();
  cfg.momentum = 0.7;
  AugmentConfig aug;
  aug.output_size = 8;
  MoCoTrainer<float> tr(init_moco<float>(tiny_encoder(), cfg, 9), cfg, aug);
  std::vector<Raster> imgs(2, Raster(8, 8));
  std::mt19937_64 gen(9);
  for (auto& im : imgs)
    for (auto& p : im.pixels) p = static_cast<std::uint8_t>(gen());
  const auto k_before = encoder_state(tr.state().key);
  std::vector<const Raster*> batch{&imgs[0], &imgs[1]};
  const double loss = tr.train_step(batch, RngStream(1), 0.1);
  EXPECT_TRUE(std::isfinite(loss));
  const auto q_after = encoder_state(tr.state().query);
  const auto k_after = encoder_state(tr.state().key);
  const auto nq = nn::parameter_count(tr.state().query.backbone()) + nn::parameter_count(tr.state().query.projection());
  ASSERT_EQ(nq, q_after.size());  // tiny_conv has no buffers
  for (std::size_t i = 0; i < k_after.size(); ++i)
    ASSERT_NEAR(k_after[i], 0.7f * k_before[i] + 0.3f * q_after[i], 1e-6);
  EXPECT_EQ(tr.state().queue_ptr, 2);
  tr.train_step(batch, RngStream(2), 0.1);
  tr.train_step(batch, RngStream(3), 0.1);
  tr.train_step(batch, RngStream(4), 0.1);
  EXPECT_EQ(tr.state().queue_ptr, 0);
}

TEST(TrainStep, WrongBatchSizeIsContractViolation) {
  const auto cfg = tiny_stage1();
  AugmentConfig aug;
  aug.output_size = 8;
  MoCoTrainer<float> tr(init_moco<float>(tiny_encoder(), cfg, 9), cfg, aug);
  Raster img(8, 8);
  std::vector<const Raster*> batch{&img};
  EXPECT_THROW(tr.train_step(batch, RngStream(1), 0.1), ContractViolation);
}

TEST(TrainStep, NonFiniteLossIsTrainingFault) {
  const auto cfg = tiny_stage1();
  MoCoTrainer<double> tr(init_moco<double>(tiny_encoder(), cfg, 9), cfg, AugmentConfig{});
  // The ReLUs would swallow NaN pixels, so poison the last projection bias.
  auto& bias = tr.state().query.parameters().back()->value;
  std::fill(bias.begin(), bias.end(), std::numeric_limits<double>::quiet_NaN());
  nn::Tensor<double> x({2, 3, 8, 8});
  for (auto& v : x.data) v = 0.1;
  try {
    tr.train_step_on_views(x, x, 0.1);
    FAIL() << "no fault raised";
  } catch (const TrainingFault& e) {
    EXPECT_EQ(e.step(), 0);
  }
}

// Small synthetic dataset shared by the stage-1 tests below.
class Stage1OnSynthetic : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir;
    SyntheticConfig cfg;
    cfg.train_patients_per_class = 4;
    cfg.validation_patients_per_class = 1;
    cfg.min_patches = cfg.max_patches = 12;
    cfg.patch_size = 16;
    cfg.signal_fraction = 0.5;
    const auto ds = generate_synthetic(cfg, dir_->path());
    train_ = new std::vector<PatientRecord>(load_patients(ds.manifest, Split::kTrain));
    val_ = new std::vector<PatientRecord>(load_patients(ds.manifest, Split::kValidation));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete val_;
    delete dir_;
  }

  static EncoderConfig encoder() {
    EncoderConfig e;
    e.tiny_widths = {8, 16};
    e.output_dim = 32;
    e.projection_dim = 16;
    return e;
  }
  static Stage1Config stage1(int epochs) {
    Stage1Config c;
    c.queue_size = 32;
    c.batch_size = 16;
    c.momentum = 0.99;
    c.epochs = epochs;
    c.seed = 5;
    return c;
  }
  static AugmentConfig aug() {
    AugmentConfig a;
    a.output_size = 16;
    a.crop_scale_lo = 0.5;
    a.jitter_strength = 0.2;
    a.blur_prob = 0.0;
    return a;
  }

  static inline testing::TempDir* dir_ = nullptr;
  static inline std::vector<PatientRecord>* train_ = nullptr;
  static inline std::vector<PatientRecord>* val_ = nullptr;
};

// The small fixture never gets past its random-queue first epoch, so this one
// trains on the reference desk-scale config (about two and a half minutes).
TEST(Stage1Reference, LossDecreasesByEpochThirty) {
  auto cfg = load_run_config(std::filesystem::path(MOCOMSI_SOURCE_DIR) / "configs" / "reference.ini");
  cfg.stage1.epochs = 30;
  testing::TempDir dir;
  const auto ds = generate_synthetic(cfg.synthetic, dir.path());
  const auto train = load_patients(ds.manifest, Split::kTrain);
  const auto r = train_moco(train, cfg.encoder, cfg.stage1, cfg.augment);
  ASSERT_EQ(r.loss_curve.size(), 30u);
  EXPECT_LT(r.loss_curve[29], r.loss_curve[0]);
}

TEST_F(Stage1OnSynthetic, CheckpointIsArgminAndDeterministic) {
  const auto a = train_moco(*train_, encoder(), stage1(4), aug());
  const auto b = train_moco(*train_, encoder(), stage1(4), aug());
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.checkpoint.values, b.checkpoint.values);
  const auto best = std::min_element(a.loss_curve.begin(), a.loss_curve.end()) - a.loss_curve.begin() + 1;
  EXPECT_EQ(a.best_epoch, best);
  EXPECT_EQ(a.checkpoint.header.at("best_epoch").get<int>(), best);
}

TEST_F(Stage1OnSynthetic, RejectsValidationPatients) {
  EXPECT_THROW(train_moco(*val_, encoder(), stage1(1), aug()), ContractViolation);
}

TEST_F(Stage1OnSynthetic, DatasetSmallerThanBatchIsConfigError) {
  std::vector<PatientRecord> one(train_->begin(), train_->begin() + 1);
  auto cfg = stage1(1);
  cfg.batch_size = 32;
  cfg.queue_size = 64;
  EXPECT_THROW(train_moco(one, encoder(), cfg, aug()), ConfigError);
}

TEST_F(Stage1OnSynthetic, EncoderCheckpointRoundTrip) {
  const auto r = train_moco(*train_, encoder(), stage1(1), aug());
  testing::TempDir dir;
  write_checkpoint(dir / "enc.ckpt", r.checkpoint);
  const auto back = read_checkpoint(dir / "enc.ckpt");
  EXPECT_EQ(back.values, r.checkpoint.values);
  EXPECT_EQ(back.fingerprint(), r.checkpoint.fingerprint());
  auto enc = load_encoder(back);
  EXPECT_EQ(encoder_state(enc), r.checkpoint.values);
}

TEST(Checkpoint, MissingFileIsDependencyError) {
  testing::TempDir dir;
  EXPECT_THROW(read_checkpoint(dir / "none.ckpt"), DependencyError);
}

}  // namespace
}  // namespace mocomsi
