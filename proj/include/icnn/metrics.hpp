#ifndef ICNN_METRICS_HPP
#define ICNN_METRICS_HPP

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <unordered_map>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/imaging.hpp"

namespace icnn {

/// Pixels with p >= t become membrane (0); the rest are labelled by
/// 4-connected component, numbered 1..C in first-encounter raster order.
inline LabelMap threshold_segment(const ProbMap& map, double t) {
  LabelMap out(map.height, map.width, 0);
  std::vector<std::size_t> stack;
  std::uint32_t next = 0;
  const std::size_t w = map.width, h = map.height;
  std::vector<char> visited(map.size(), 0);
  for (std::size_t start = 0; start < map.size(); ++start) {
    if (visited[start] || map.values[start] >= t) continue;
    ++next;
    visited[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      out.values[i] = next;
      const std::size_t y = i / w, x = i % w;
      auto visit = [&](std::size_t j) {
        if (!visited[j] && map.values[j] < t) {
          visited[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
    }
  }
  return out;
}

/// Sparse overlap counts between proposal and ground-truth labels over the
/// ground-truth foreground (gt != 0).
struct ContingencyTable {
  std::unordered_map<std::uint64_t, std::uint64_t> counts;  // key (proposal << 32) | gt
  std::unordered_map<std::uint32_t, std::uint64_t> proposal_totals;
  std::unordered_map<std::uint32_t, std::uint64_t> gt_totals;
  std::uint64_t total = 0;
};

inline ContingencyTable contingency(const LabelMap& proposal, const LabelMap& gt) {
  if (!proposal.same_dims(gt)) throw ShapeError("proposal and ground truth differ in size");
  ContingencyTable t;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint32_t g = gt.values[i];
    if (g == 0) continue;
    const std::uint32_t p = proposal.values[i];
    ++t.counts[(static_cast<std::uint64_t>(p) << 32) | g];
    ++t.proposal_totals[p];
    ++t.gt_totals[g];
    ++t.total;
  }
  return t;
}

/// Foreground-restricted Rand error: one minus the fraction of pixel pairs
/// (both in the ground-truth foreground) on which the two segmentations agree
/// about being together or apart. Proposal label 0 is an ordinary segment.
inline double rand_error_fg(const LabelMap& proposal, const LabelMap& gt) {
  const ContingencyTable t = contingency(proposal, gt);
  if (t.total < 2) throw Error("Rand error needs at least two ground-truth foreground pixels");
  auto pairs = [](std::uint64_t n) { return n * (n - 1) / 2; };
  std::uint64_t both = 0, prop = 0, truth = 0;
  for (const auto& [k, n] : t.counts) both += pairs(n);
  for (const auto& [k, n] : t.proposal_totals) prop += pairs(n);
  for (const auto& [k, n] : t.gt_totals) truth += pairs(n);
  // Disagreeing pairs = together in exactly one of the two segmentations.
  const std::uint64_t disagree = prop + truth - 2 * both;
  return static_cast<double>(disagree) / static_cast<double>(pairs(t.total));
}

/// Default grid 0.10, 0.15, ..., 0.90.
inline std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 2; i <= 18; ++i) g.push_back(i * 0.05);
  return g;
}

inline double pixel_error_at(const ProbMap& map, const LabelMap& gt, double t) {
  if (!map.same_dims(gt)) throw ShapeError("map and ground truth differ in size");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < map.size(); ++i)
    wrong += (map.values[i] >= t) != (gt.values[i] == 0) ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(map.size());
}

struct ThresholdScore {
  double threshold = 0.0;
  double error = 0.0;
};

/// Minimum pixel error over the grid; ties go to the smallest threshold.
inline ThresholdScore pixel_error(const ProbMap& map, const LabelMap& gt, std::span<const double> grid) {
  if (grid.empty()) throw Error("threshold grid is empty");
  ThresholdScore best{0.0, std::numeric_limits<double>::infinity()};
  for (double t : grid) {
    const double e = pixel_error_at(map, gt, t);
    if (e < best.error || (e == best.error && t < best.threshold)) best = {t, e};
  }
  return best;
}

/// Threshold minimising the foreground-restricted Rand error; ties go to the
/// smallest threshold.
inline ThresholdScore best_threshold_sweep(const ProbMap& map, const LabelMap& gt,
                                           std::span<const double> grid) {
  if (grid.empty()) throw Error("threshold grid is empty");
  ThresholdScore best{0.0, std::numeric_limits<double>::infinity()};
  for (double t : grid) {
    const double e = rand_error_fg(threshold_segment(map, t), gt);
    if (e < best.error || (e == best.error && t < best.threshold)) best = {t, e};
  }
  return best;
}

struct RoundScore {
  std::size_t round = 0;
  double rand_error = 0.0;
  double pixel_error = 0.0;
  double best_threshold = 0.0;
};

using RoundReport = std::vector<RoundScore>;

/// Scores every round of a refinement trace against the ground truth. For
/// each round one grid threshold is chosen for the whole stack: the one with
/// the lowest plane-averaged Rand error. Pixel error is the grid minimum of
/// the plane-averaged pixel error.
inline RoundReport round_report(const std::vector<Stack<double>>& trace,
                                const Stack<std::uint32_t>& gt, std::span<const double> grid,
                                std::size_t threads = 1) {
  if (grid.empty()) throw Error("threshold grid is empty");
  RoundReport report;
  for (std::size_t r = 0; r < trace.size(); ++r) {
    const Stack<double>& maps = trace[r];
    if (maps.size() != gt.size()) throw ShapeError("trace round and ground truth differ in plane count");
    std::vector<double> rand_sum(grid.size()), pix_sum(grid.size());
    std::vector<std::vector<double>> rand_pp(maps.size()), pix_pp(maps.size());
    parallel_for(maps.size(), threads, [&](std::size_t p) {
      for (double t : grid) {
        rand_pp[p].push_back(rand_error_fg(threshold_segment(maps[p], t), gt[p]));
        pix_pp[p].push_back(pixel_error_at(maps[p], gt[p], t));
      }
    });
    for (std::size_t p = 0; p < maps.size(); ++p)
      for (std::size_t g = 0; g < grid.size(); ++g) {
        rand_sum[g] += rand_pp[p][g];
        pix_sum[g] += pix_pp[p][g];
      }
    RoundScore s;
    s.round = r;
    const double n = static_cast<double>(maps.size());
    std::size_t best = 0, best_pix = 0;
    for (std::size_t g = 1; g < grid.size(); ++g) {
      if (rand_sum[g] < rand_sum[best]) best = g;
      if (pix_sum[g] < pix_sum[best_pix]) best_pix = g;
    }
    s.rand_error = rand_sum[best] / n;
    s.best_threshold = grid[best];
    s.pixel_error = pix_sum[best_pix] / n;
    report.push_back(s);
  }
  return report;
}

inline void write_round_report_csv(std::ostream& os, const RoundReport& report) {
  os << "round,rand_error,pixel_error,best_threshold\n" << std::fixed << std::setprecision(6);
  for (const auto& s : report)
    os << s.round << ',' << s.rand_error << ',' << s.pixel_error << ',' << s.best_threshold << '\n';
}

}  // namespace icnn

#endif  // ICNN_METRICS_HPP
