#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "icnn/inference.hpp"
#include "icnn/synth.hpp"

using namespace icnn;

namespace {

GrayImage random_plane(std::uint64_t seed, std::size_t h, std::size_t w) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  GrayImage g(h, w);
  for (double& v : g.values) v = u(rng);
  return g;
}

const NetworkSpec kTiny{9, 1, parse_layers("conv:3x3x4,relu,maxpool:2,conv:3x3x4,relu,fc:8,relu,softmax"), 2};

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.patches_per_epoch = 64;
  cfg.val_patches = 32;
  cfg.max_epochs = 2;
  cfg.patience = 2;
  cfg.calib_pixels = 200;
  return cfg;
}

SynthConfig tiny_synth() {
  SynthConfig s;
  s.height = s.width = 32;
  s.cell_count = 4;
  return s;
}

}  // namespace

TEST(Patchwise, ConstantPlaneGivesConstantMap) {
  const NetworkSpec spec = desk_spec();
  const NetworkParams p = init_params(spec, 3);
  const ProbMap m = infer_map_patchwise(spec, p, GrayImage(20, 24, 0.4));
  const double want = predict(spec, p, Tensor({1, 17, 17}, 0.4));
  for (double v : m.values) EXPECT_EQ(v, want);
}

TEST(Patchwise, MatchesPerPixelLoopOracle) {
  const NetworkSpec spec = kTiny;
  const NetworkParams p = init_params(spec, 4);
  const GrayImage g = random_plane(1, 11, 13);
  const ProbMap m = infer_map_patchwise(spec, p, g);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      Tensor patch({1, 9, 9});
      for (int dy = -4; dy <= 4; ++dy)
        for (int dx = -4; dx <= 4; ++dx) {
          // Reflect without edge repeat, written out by hand.
          int sy = static_cast<int>(y) + dy, sx = static_cast<int>(x) + dx;
          if (sy < 0) sy = -sy;
          if (sy >= 11) sy = 2 * 10 - sy;
          if (sx < 0) sx = -sx;
          if (sx >= 13) sx = 2 * 12 - sx;
          patch(0, dy + 4, dx + 4) = g(sy, sx);
        }
      ASSERT_EQ(m(y, x), forward(spec, p, patch).prob_membrane);
    }
}

TEST(Patchwise, IdentityCurveAndCalibration) {
  const NetworkParams p = init_params(kTiny, 5);
  const GrayImage g = random_plane(2, 10, 10);
  const ProbMap raw = infer_map_patchwise(kTiny, p, g);
  CalibrationCurve c;
  c.edges = {0, 0.5, 1};
  c.values = {0.1, 0.9};
  const ProbMap cal = infer_map_patchwise(kTiny, p, g, c);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(cal.values[i], c(raw.values[i]));
  EXPECT_THROW(infer_map_patchwise(kTiny, p, GrayImage(4, 4, 0.5)), Error);
}

TEST(Dense, MatchesPatchwiseOnDeskSpec) {
  const NetworkSpec spec = desk_spec();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const NetworkParams p = init_params(spec, 10 + s);
    const GrayImage g = random_plane(20 + s, 32, 32);
    const ProbMap a = infer_map_patchwise(spec, p, g), b = infer_map_dense(spec, p, g);
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Dense, HandlesOddSizesAndOtherSpecs) {
  const NetworkSpec base = base_spec();
  const NetworkParams bp = init_params(base, 1);
  const GrayImage g = random_plane(3, 67, 70);
  const ProbMap dense = infer_map_dense(base, bp, g);
  const GrayImage padded = mirror_pad(g, 32);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 25; ++i) {
    const std::size_t x = rng() % 70, y = rng() % 67;
    EXPECT_EQ(dense(y, x), predict(base, bp, extract_patch(padded, x, y, PatchSpec{65, 1})));
  }
  const NetworkParams tp = init_params(kTiny, 2);
  const GrayImage h = random_plane(4, 15, 9);
  EXPECT_EQ(infer_map_dense(kTiny, tp, h), infer_map_patchwise(kTiny, tp, h));
}

TEST(Tta, ExactlyEquivariant) {
  const NetworkSpec spec = kTiny;
  const NetworkParams p = init_params(spec, 6);
  const GrayImage g = random_plane(5, 12, 15);
  const ProbMap base = infer_map_tta(spec, p, g);
  for (int k = 0; k < 8; ++k)
    EXPECT_EQ(infer_map_tta(spec, p, d8_apply(g, k)), d8_apply(base, k)) << "k=" << k;
  EXPECT_EQ(infer_map_tta(spec, p, g, {}, 1, InferenceMode::dense), base);
}

TEST(Average, PixelwiseMean) {
  const std::vector<ProbMap> maps{ProbMap(2, 2, 0.2), ProbMap(2, 2, 0.4), ProbMap(2, 2, 0.9)};
  const ProbMap m = average_maps(maps);
  for (double v : m.values) EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_THROW(average_maps(std::vector<ProbMap>{}), Error);
  EXPECT_THROW(average_maps(std::vector<ProbMap>{ProbMap(2, 2), ProbMap(2, 3)}), ShapeError);
}

TEST(Mdpm, ThreeFoldGenerationIsLeakFree) {
  const SynthStack data = synth_stack(tiny_synth(), 6, 3);
  const FoldPlan plan = kfold_plan(6, 3, 1);
  MdpmOptions opts;
  opts.train = tiny_train();
  opts.n_val = 1;
  opts.tta = false;
  std::size_t calls = 0;
  const MdpmGeneration gen =
      gen_training_mdpms(data.images, data.labels, plan, kTiny, opts, [&](const FoldModel&) { ++calls; });
  EXPECT_EQ(calls, 3u);
  ASSERT_EQ(gen.maps.size(), 6u);
  ASSERT_EQ(gen.provenance.size(), 6u);
  EXPECT_TRUE(provenance_is_leak_free(plan, gen.provenance, 6));
  for (const auto& rec : gen.provenance) {
    const auto& fm = gen.models[rec.fold];
    EXPECT_EQ(gen.maps[rec.plane],
              infer_map_dense(kTiny, fm.model.params, data.images[rec.plane], fm.model.curve));
  }
  // A record naming a fold that trained on the plane is a leak.
  auto bad = gen.provenance;
  bad[0].fold = (bad[0].fold + 1) % 3;
  EXPECT_FALSE(provenance_is_leak_free(plan, bad, 6));
}

TEST(Mdpm, HeldOutImageNeverInfluencesItsModel) {
  SynthStack data = synth_stack(tiny_synth(), 6, 4);
  const FoldPlan plan = kfold_plan(6, 3, 2);
  MdpmOptions opts;
  opts.train = tiny_train();
  opts.n_val = 1;
  opts.tta = false;
  const MdpmGeneration a = gen_training_mdpms(data.images, data.labels, plan, kTiny, opts);
  const std::size_t victim = plan.folds[0].heldout[0];
  for (double& v : data.images[victim].values) v = 1.0 - v;
  const MdpmGeneration b = gen_training_mdpms(data.images, data.labels, plan, kTiny, opts);
  EXPECT_EQ(a.models[0].model.params, b.models[0].model.params);
  for (std::size_t f = 1; f < 3; ++f)
    EXPECT_TRUE(a.models[f].model.params != b.models[f].model.params ||
                a.models[f].model.curve != b.models[f].model.curve);
}

TEST(Mdpm, EnsembleAveragesFoldModels) {
  const SynthStack data = synth_stack(tiny_synth(), 4, 5);
  const FoldPlan plan = kfold_plan(4, 2, 1);
  MdpmOptions opts;
  opts.train = tiny_train();
  opts.n_val = 1;
  opts.tta = false;
  const MdpmGeneration gen = gen_training_mdpms(data.images, data.labels, plan, kTiny, opts);
  const GrayImage test = synth_plane(tiny_synth(), 99).image;
  const ProbMap e = ensemble_map(kTiny, gen.models, test, false, InferenceMode::dense, 1);
  const ProbMap m0 = infer_map_dense(kTiny, gen.models[0].model.params, test, gen.models[0].model.curve);
  const ProbMap m1 = infer_map_dense(kTiny, gen.models[1].model.params, test, gen.models[1].model.curve);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_DOUBLE_EQ(e.values[i], (m0.values[i] + m1.values[i]) / 2);
}
