#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "icnn/training.hpp"

using namespace icnn;

namespace {

const NetworkSpec kToySpec{9, 1, parse_layers("conv:3x3x4,relu,maxpool:2,conv:3x3x4,relu,fc:8,relu,softmax"), 2};

// Class 1: a bright column through the centre on a noisy background.
TrainExample toy_example(std::mt19937_64& rng, int label) {
  std::normal_distribution<double> noise(0.3, 0.1);
  Tensor t({1, 9, 9});
  for (double& v : t.values()) v = noise(rng);
  if (label == 1)
    for (std::size_t y = 0; y < 9; ++y) t(0, y, 4) = 0.9;
  return {t, label};
}

std::vector<TrainExample> toy_set(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::vector<TrainExample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(toy_example(rng, static_cast<int>(i % 2)));
  return out;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.batch_size = 16;
  cfg.max_epochs = 20;
  cfg.patience = 20;
  cfg.patches_per_epoch = 256;
  cfg.val_patches = 128;
  return cfg;
}

}  // namespace

TEST(Train, ToyProblemConverges) {
  const auto val = toy_set(99, 128);
  const ExampleSource src = [](std::size_t epoch) { return toy_set(1000 + epoch, 256); };
  const TrainResult r = train_classifier(kToySpec, src, val, toy_config());
  ASSERT_FALSE(r.history.diverged);
  EXPECT_LT(r.history.best_val_loss(), 0.05);
  EXPECT_LE(r.history.epochs.size(), 20u);
}

TEST(Train, ZeroPatienceRunsOneEpoch) {
  TrainConfig cfg = toy_config();
  cfg.patience = 0;
  const auto val = toy_set(99, 16);
  const TrainResult r = train_classifier(kToySpec, [](std::size_t e) { return toy_set(e, 32); }, val, cfg);
  EXPECT_EQ(r.history.epochs.size(), 1u);
  EXPECT_EQ(r.history.best_epoch, 1u);
}

TEST(Train, DeterministicForFixedSeed) {
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 3;
  const auto val = toy_set(99, 32);
  const ExampleSource src = [](std::size_t e) { return toy_set(e, 64); };
  const TrainResult a = train_classifier(kToySpec, src, val, cfg);
  const TrainResult b = train_classifier(kToySpec, src, val, cfg);
  EXPECT_EQ(a.params, b.params);
  cfg.seed = 2;
  EXPECT_NE(train_classifier(kToySpec, src, val, cfg).params, a.params);
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 2;
  const auto val = toy_set(99, 32);
  const ExampleSource src = [](std::size_t e) { return toy_set(e, 64); };
  const TrainResult a = train_classifier(kToySpec, src, val, cfg);
  cfg.threads = 4;
  EXPECT_EQ(train_classifier(kToySpec, src, val, cfg).params, a.params);
}

TEST(Train, EarlyStoppingReturnsBestSnapshot) {
  // A large step size makes validation loss bounce so the best epoch is
  // usually not the last one.
  TrainConfig cfg = toy_config();
  cfg.lr = 0.05;
  cfg.max_epochs = 10;
  cfg.patience = 3;
  const auto val = toy_set(99, 64);
  const TrainResult r = train_classifier(kToySpec, [](std::size_t e) { return toy_set(e, 64); }, val, cfg);
  ASSERT_GT(r.history.best_epoch, 0u);
  EXPECT_NEAR(mean_loss(kToySpec, r.params, val), r.history.best_val_loss(), 1e-12);
  for (const auto& e : r.history.epochs) EXPECT_GE(e.val_loss, r.history.best_val_loss());
}

TEST(Train, DivergenceIsReported) {
  // The third epoch feeds inputs large enough to overflow the logits.
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 5;
  const auto val = toy_set(99, 16);
  const ExampleSource src = [](std::size_t e) {
    auto ex = toy_set(e, 64);
    if (e == 2)
      for (auto& x : ex) x.patch.fill(1e300);
    return ex;
  };
  const TrainResult r = train_classifier(kToySpec, src, val, cfg);
  EXPECT_TRUE(r.history.diverged);
  EXPECT_NE(r.history.diagnostic.find("epoch 3"), std::string::npos);
  EXPECT_EQ(r.history.epochs.size(), 2u);
  EXPECT_TRUE(r.params.all_finite());
  EXPECT_NEAR(mean_loss(kToySpec, r.params, val), r.history.best_val_loss(), 1e-12);
}

TEST(Train, RejectsBadConfig) {
  TrainConfig cfg;
  cfg.lr = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = TrainConfig{};
  cfg.patches_per_epoch = 3;
  EXPECT_THROW(validate(cfg), ConfigError);
  EXPECT_EQ(parse_mask_mode("uniform_noise"), MaskMode::uniform_noise);
  EXPECT_THROW(parse_mask_mode("zero"), ConfigError);
}

TEST(Train, HistoryCsv) {
  TrainHistory h;
  h.epochs = {{1, 0.5, 0.25}, {2, 0.125, 0.5}};
  h.best_epoch = 1;
  std::ostringstream os;
  write_history_csv(os, h);
  EXPECT_EQ(os.str(), "epoch,train_loss,val_loss,is_best\n1,0.5,0.25,1\n2,0.125,0.5,0\n");
}

TEST(Calibration, RecoversCalibratedInput) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> raw(10000);
  std::vector<int> labels(10000);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = u(rng);
    labels[i] = u(rng) < raw[i] ? 1 : 0;
  }
  const CalibrationCurve c = fit_calibration(raw, labels, 10);
  ASSERT_EQ(c.bins(), 10u);
  std::vector<double> pos(10), tot(10);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::size_t b = calibration_bin(raw[i], 10);
    tot[b] += 1, pos[b] += labels[i];
  }
  for (std::size_t b = 0; b < 10; ++b) {
    EXPECT_LE(std::abs(c.values[b] - c.center(b)), 0.1) << b;
    EXPECT_LE(std::abs(c.values[b] - pos[b] / tot[b]), 0.1) << b;
    if (b) EXPECT_LE(c.values[b - 1], c.values[b]);
  }
}

TEST(Calibration, AllPositiveLabels) {
  std::vector<double> raw{0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95};
  std::vector<int> labels(10, 1);
  const CalibrationCurve c = fit_calibration(raw, labels, 10);
  for (double v : c.values) EXPECT_DOUBLE_EQ(v, 2.0 / 3.0);  // (1 + 1) / (1 + 2)
}

TEST(Calibration, AntiMonotoneInputPoolsToConstant) {
  std::vector<double> raw;
  std::vector<int> labels;
  for (int b = 0; b < 10; ++b)
    for (int i = 0; i < 100; ++i) {
      raw.push_back(b / 10.0 + 0.05);
      labels.push_back(i < 100 - 10 * b ? 1 : 0);  // positive rate falls with the bin
    }
  const CalibrationCurve c = fit_calibration(raw, labels, 10);
  for (std::size_t b = 1; b < 10; ++b) EXPECT_NEAR(c.values[b], c.values[0], 1e-12);
  EXPECT_NEAR(c.values[0], (550.0 + 10) / (1000.0 + 20), 1e-12);
}

TEST(Calibration, PavMatchesHandExample) {
  EXPECT_EQ(isotonic_fit({1, 3, 2, 4}, {1, 1, 1, 1}), (std::vector<double>{1, 2.5, 2.5, 4}));
  const auto w = isotonic_fit({3, 1}, {3, 1});
  EXPECT_DOUBLE_EQ(w[0], 2.5);
  EXPECT_DOUBLE_EQ(w[1], 2.5);
}

TEST(Calibration, InterpolatesBetweenCentresAndIsMonotone) {
  CalibrationCurve c;
  c.edges = {0.0, 0.5, 1.0};
  c.values = {0.2, 0.6};
  EXPECT_DOUBLE_EQ(c(0.0), 0.2);
  EXPECT_DOUBLE_EQ(c(0.25), 0.2);
  EXPECT_DOUBLE_EQ(c(0.5), 0.4);
  EXPECT_DOUBLE_EQ(c(0.75), 0.6);
  EXPECT_DOUBLE_EQ(c(1.0), 0.6);
  double prev = -1;
  for (int i = 0; i <= 1000; ++i) {
    const double v = c(i / 1000.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_EQ(CalibrationCurve{}(0.3), 0.3);
}

TEST(Calibration, FileRoundTrip) {
  std::vector<double> raw{0.1, 0.4, 0.6, 0.9};
  std::vector<int> labels{0, 1, 0, 1};
  const CalibrationCurve c = fit_calibration(raw, labels, 4);
  std::stringstream ss;
  write_calibration(ss, c);
  EXPECT_EQ(read_calibration(ss), c);
  std::stringstream empty;
  EXPECT_TRUE(read_calibration(empty).is_identity());
  std::stringstream bad("0 0.5\n0 0.5\n");
  EXPECT_THROW(read_calibration(bad), FormatError);
}
