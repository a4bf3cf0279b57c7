#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "icnn/metrics.hpp"

using namespace icnn;

namespace {

// O(n^2) pair enumeration over ground-truth foreground pixels.
double rand_error_pairs(const LabelMap& prop, const LabelMap& gt) {
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt.values[i] != 0) fg.push_back(i);
  std::uint64_t disagree = 0, pairs = 0;
  for (std::size_t a = 0; a < fg.size(); ++a)
    for (std::size_t b = a + 1; b < fg.size(); ++b) {
      const bool same_p = prop.values[fg[a]] == prop.values[fg[b]];
      const bool same_g = gt.values[fg[a]] == gt.values[fg[b]];
      disagree += same_p != same_g;
      ++pairs;
    }
  return static_cast<double>(disagree) / static_cast<double>(pairs);
}

LabelMap random_labels(std::mt19937_64& rng, std::size_t h, std::size_t w, std::uint32_t k) {
  std::uniform_int_distribution<std::uint32_t> d(0, k);
  LabelMap m(h, w);
  for (auto& v : m.values) v = d(rng);
  return m;
}

// Union-find over 4-neighbour pairs below threshold.
std::vector<std::size_t> uf_components(const ProbMap& map, double t) {
  std::vector<std::size_t> parent(map.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const std::size_t i = y * map.width + x;
      if (map.values[i] >= t) continue;
      if (x + 1 < map.width && map.values[i + 1] < t) parent[find(i)] = find(i + 1);
      if (y + 1 < map.height && map.values[i + map.width] < t) parent[find(i)] = find(i + map.width);
    }
  std::vector<std::size_t> root(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) root[i] = find(i);
  return root;
}

}  // namespace

TEST(Segment, AllBackgroundIsOneSegment) {
  const LabelMap seg = threshold_segment(ProbMap(5, 7, 0.0), 0.5);
  for (auto v : seg.values) EXPECT_EQ(v, 1u);
}

TEST(Segment, VerticalLineSplitsInTwo) {
  ProbMap m(4, 5, 0.1);
  for (std::size_t y = 0; y < 4; ++y) m(y, 2) = 0.9;
  const LabelMap seg = threshold_segment(m, 0.5);
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_EQ(seg(y, 0), 1u);
    EXPECT_EQ(seg(y, 2), 0u);
    EXPECT_EQ(seg(y, 4), 2u);
  }
  // p >= t is membrane.
  EXPECT_EQ(threshold_segment(m, 0.9)(0, 2), 0u);
}

TEST(Segment, PartitionMatchesUnionFind) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    ProbMap m(12, 9);
    for (double& v : m.values) v = u(rng);
    const double t = 0.3 + 0.4 * u(rng);
    const LabelMap seg = threshold_segment(m, t);
    const auto root = uf_components(m, t);
    std::map<std::size_t, std::uint32_t> root_to_label;
    std::map<std::uint32_t, std::size_t> label_to_root;
    std::uint32_t max_label = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.values[i] >= t) {
        ASSERT_EQ(seg.values[i], 0u);
        continue;
      }
      ASSERT_NE(seg.values[i], 0u);
      max_label = std::max(max_label, seg.values[i]);
      auto [a, fa] = root_to_label.emplace(root[i], seg.values[i]);
      auto [b, fb] = label_to_root.emplace(seg.values[i], root[i]);
      ASSERT_EQ(a->second, seg.values[i]);
      ASSERT_EQ(b->second, root[i]);
    }
    EXPECT_EQ(max_label, root_to_label.size());  // labels are 1..C
  }
}

TEST(RandError, HandCase) {
  // Two 2-pixel ground-truth segments merged into one proposal segment:
  // 4 of 6 pairs disagree.
  const LabelMap gt(1, 4, std::vector<std::uint32_t>{1, 1, 2, 2});
  const LabelMap prop(1, 4, std::vector<std::uint32_t>{5, 5, 5, 5});
  EXPECT_NEAR(rand_error_fg(prop, gt), 0.6667, 1e-4);
  EXPECT_NEAR(rand_error_fg(prop, gt), 4.0 / 6.0, 1e-15);
  EXPECT_EQ(rand_error_fg(gt, gt), 0.0);
}

TEST(RandError, IgnoresGroundTruthBoundaryPixels) {
  const LabelMap gt(1, 5, std::vector<std::uint32_t>{1, 1, 0, 2, 2});
  const LabelMap prop(1, 5, std::vector<std::uint32_t>{1, 1, 1, 2, 2});
  EXPECT_EQ(rand_error_fg(prop, gt), 0.0);
  EXPECT_THROW(rand_error_fg(prop, LabelMap(1, 5, 0u)), Error);
}

TEST(RandError, MatchesPairEnumeration) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    LabelMap gt = random_labels(rng, 8, 8, 4), prop = random_labels(rng, 8, 8, 5);
    gt.values[0] = 1, gt.values[1] = 2;  // at least two foreground pixels
    ASSERT_NEAR(rand_error_fg(prop, gt), rand_error_pairs(prop, gt), 1e-12) << trial;
  }
}

TEST(RandError, InvariantToLabelPermutation) {
  std::mt19937_64 rng(3);
  const LabelMap gt = random_labels(rng, 10, 10, 6);
  LabelMap prop = random_labels(rng, 10, 10, 6);
  const double base = rand_error_fg(prop, gt);
  std::vector<std::uint32_t> perm{0, 1, 2, 3, 4, 5, 6};
  std::shuffle(perm.begin(), perm.end(), rng);
  for (auto& v : prop.values) v = perm[v] + 100;
  EXPECT_EQ(rand_error_fg(prop, gt), base);
}

TEST(PixelError, ConstantMapCases) {
  LabelMap gt(2, 5, 1u);
  gt.values[0] = gt.values[1] = gt.values[2] = 0;  // 3 membrane pixels of 10
  const ProbMap half(2, 5, 0.5);
  const std::vector<double> grid{0.25, 0.75};
  EXPECT_DOUBLE_EQ(pixel_error_at(half, gt, 0.25), 0.7);
  EXPECT_DOUBLE_EQ(pixel_error_at(half, gt, 0.75), 0.3);
  const auto best = pixel_error(half, gt, grid);
  EXPECT_EQ(best.threshold, 0.75);
  EXPECT_DOUBLE_EQ(best.error, 0.3);

  ProbMap perfect = membrane_indicator(gt);
  const auto ties = pixel_error(perfect, gt, grid);
  EXPECT_EQ(ties.error, 0.0);
  EXPECT_EQ(ties.threshold, 0.25);  // ties go to the smallest threshold
  perfect.values[5] = 1.0;  // one flipped pixel
  EXPECT_DOUBLE_EQ(pixel_error_at(perfect, gt, 0.5), 1.0 / 10.0);
}

TEST(Sweep, MatchesExhaustiveEvaluation) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  const auto grid = default_threshold_grid();
  ASSERT_EQ(grid.size(), 17u);
  EXPECT_NEAR(grid.front(), 0.10, 1e-12);
  EXPECT_NEAR(grid.back(), 0.90, 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    const LabelMap gt = random_labels(rng, 10, 10, 3);
    ProbMap m(10, 10);
    for (std::size_t i = 0; i < m.size(); ++i)
      m.values[i] = gt.values[i] == 0 ? 0.5 + 0.5 * u(rng) : 0.5 * u(rng);
    const auto best = best_threshold_sweep(m, gt, grid);
    for (double t : grid) {
      const double e = rand_error_fg(threshold_segment(m, t), gt);
      EXPECT_LE(best.error, e);
      if (t < best.threshold) EXPECT_GT(e, best.error);
    }
  }
  const LabelMap gt(1, 3, std::vector<std::uint32_t>{1, 0, 2});
  const ProbMap perfect(1, 3, std::vector<double>{0.0, 1.0, 0.0});
  const auto best = best_threshold_sweep(perfect, gt, grid);
  EXPECT_EQ(best.error, 0.0);
  EXPECT_EQ(best.threshold, grid.front());
  const std::vector<double> one{0.4};
  EXPECT_EQ(best_threshold_sweep(perfect, gt, one).threshold, 0.4);
}

TEST(Report, OneRowPerRoundWithSharedThreshold) {
  const LabelMap gt(1, 3, std::vector<std::uint32_t>{1, 0, 2});
  const Stack<std::uint32_t> gts{gt, gt};
  const ProbMap good(1, 3, std::vector<double>{0.0, 0.8, 0.0});
  const ProbMap leaky(1, 3, std::vector<double>{0.0, 0.3, 0.0});
  const std::vector<Stack<double>> trace{{leaky, leaky}, {good, leaky}, {good, good}};
  const std::vector<double> grid{0.5, 0.7};
  const RoundReport rep = round_report(trace, gts, grid);
  ASSERT_EQ(rep.size(), 3u);
  EXPECT_DOUBLE_EQ(rep[0].rand_error, 1.0);
  EXPECT_DOUBLE_EQ(rep[1].rand_error, 0.5);
  EXPECT_DOUBLE_EQ(rep[2].rand_error, 0.0);
  EXPECT_EQ(rep[2].best_threshold, 0.5);
  EXPECT_DOUBLE_EQ(rep[0].pixel_error, 1.0 / 3.0);

  std::ostringstream os;
  write_round_report_csv(os, rep);
  EXPECT_EQ(os.str(),
            "round,rand_error,pixel_error,best_threshold\n"
            "0,1.000000,0.333333,0.500000\n"
            "1,0.500000,0.166667,0.500000\n"
            "2,0.000000,0.000000,0.500000\n");
  EXPECT_THROW(round_report({{good}}, gts, grid), ShapeError);
}
