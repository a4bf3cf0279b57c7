#ifndef ICNN_SAMPLING_HPP
#define ICNN_SAMPLING_HPP

#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/imaging.hpp"
#include "icnn/tensor.hpp"

namespace icnn {

struct PatchSpec {
  std::size_t side = 17;
  std::size_t channels = 1;

  std::size_t radius() const { return (side - 1) / 2; }
};

inline void validate(const PatchSpec& spec) {
  if (spec.side == 0 || spec.side % 2 == 0) throw ShapeError("patch side must be odd");
  if (spec.channels != 1) throw ShapeError("only single-channel patches are supported");
}

struct TrainExample {
  Tensor patch;  // C x H x W
  int label = 0;  // 1 = membrane
};

/// Side x side window centred on original pixel (x, y) of a plane that was
/// mirror-padded by spec.radius().
inline Tensor extract_patch(const Plane<double>& padded, std::size_t x, std::size_t y,
                            const PatchSpec& spec) {
  validate(spec);
  const std::size_t r = spec.radius();
  if (padded.height < 2 * r + 1 || padded.width < 2 * r + 1 || x >= padded.width - 2 * r ||
      y >= padded.height - 2 * r)
    throw Error("patch centre (" + std::to_string(x) + ", " + std::to_string(y) +
                ") outside the padded plane");
  Tensor patch({1, spec.side, spec.side});
  for (std::size_t dy = 0; dy < spec.side; ++dy) {
    const double* src = &padded(y + dy, x);
    std::copy(src, src + spec.side, &patch(0, dy, 0));
  }
  return patch;
}

/// Patch positions (row, col) that read original pixel (x, y) of an h x w
/// plane mirror-padded by r. The centre (r, r) comes first; pixels within r
/// of a border also appear at their reflected offsets.
inline std::vector<std::pair<std::size_t, std::size_t>> mirror_copies(std::size_t x, std::size_t y,
                                                                      std::size_t h, std::size_t w,
                                                                      std::size_t r) {
  auto offsets = [r](std::size_t i, std::size_t n) {
    std::vector<std::size_t> out{r};
    if (i > 0 && 2 * i <= r) out.push_back(r - 2 * i);
    if (i + 1 < n && 2 * (n - 1 - i) <= r) out.push_back(r + 2 * (n - 1 - i));
    return out;
  };
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t py : offsets(y, h))
    for (std::size_t px : offsets(x, w)) out.emplace_back(py, px);
  return out;
}

/// One sampled training location.
struct SampleSite {
  std::size_t plane = 0;
  std::size_t x = 0;
  std::size_t y = 0;
  int label = 0;
  int transform = 0;  // d8 index applied to the patch
};

/// Draws class-balanced sites: membrane (label 0 in the ground truth) gives
/// class 1. Per class, draws are without replacement while the pool lasts.
class BalancedSampler {
 public:
  explicit BalancedSampler(const Stack<std::uint32_t>& labels, std::vector<std::size_t> planes = {}) {
    if (planes.empty()) {
      planes.resize(labels.size());
      std::iota(planes.begin(), planes.end(), std::size_t{0});
    }
    for (std::size_t p : planes) {
      const LabelMap& lab = labels.at(p);
      for (std::size_t i = 0; i < lab.size(); ++i)
        pools_[lab.values[i] == 0 ? 1 : 0].push_back({p, i % lab.width, i / lab.width});
    }
  }

  std::size_t pool_size(int cls) const { return pools_[cls].size(); }

  std::vector<SampleSite> draw(std::size_t n, std::uint64_t seed, bool augment) const {
    if (n % 2 != 0) throw Error("balanced sample size must be even");
    if (pools_[0].empty() || pools_[1].empty())
      throw Error("balanced sampling needs both membrane and non-membrane pixels");
    std::mt19937_64 rng(seed);
    std::vector<SampleSite> out;
    out.reserve(n);
    for (int cls = 0; cls < 2; ++cls) {
      const auto& pool = pools_[cls];
      const std::size_t want = n / 2;
      if (want <= pool.size()) {
        // Partial Fisher-Yates over an index permutation.
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < want; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
          std::swap(idx[i], idx[pick(rng)]);
          const Site& s = pool[idx[i]];
          out.push_back({s.plane, s.x, s.y, cls, 0});
        }
      } else {
        warn("class " + std::to_string(cls) + " has only " + std::to_string(pool.size()) +
             " pixels for " + std::to_string(want) + " draws; sampling with replacement");
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t i = 0; i < want; ++i) {
          const Site& s = pool[pick(rng)];
          out.push_back({s.plane, s.x, s.y, cls, 0});
        }
      }
    }
    std::shuffle(out.begin(), out.end(), rng);
    if (augment) {
      std::uniform_int_distribution<int> k(0, 7);
      for (auto& s : out) s.transform = k(rng);
    }
    return out;
  }

 private:
  struct Site {
    std::size_t plane, x, y;
  };
  std::vector<Site> pools_[2];
};

/// Mirror-pads every plane by r.
inline Stack<double> pad_stack(const Stack<double>& planes, std::size_t r) {
  Stack<double> out;
  out.reserve(planes.size());
  for (const auto& p : planes) out.push_back(mirror_pad(p, r));
  return out;
}

/// Patch for a site from pre-padded planes, with the site's d8 transform.
inline TrainExample site_example(const Stack<double>& padded, const SampleSite& site,
                                 const PatchSpec& spec) {
  Tensor patch = extract_patch(padded.at(site.plane), site.x, site.y, spec);
  if (site.transform != 0) patch = d8_apply(patch, site.transform);
  return {std::move(patch), site.label};
}

inline std::vector<TrainExample> balanced_sample(const Stack<double>& planes,
                                                 const Stack<std::uint32_t>& labels,
                                                 const PatchSpec& spec, std::size_t n,
                                                 std::uint64_t seed, bool augment) {
  if (planes.size() != labels.size()) throw ShapeError("image and label stacks differ in length");
  const Stack<double> padded = pad_stack(planes, spec.radius());
  const auto sites = BalancedSampler(labels).draw(n, seed, augment);
  std::vector<TrainExample> out;
  out.reserve(sites.size());
  for (const auto& s : sites) out.push_back(site_example(padded, s, spec));
  return out;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

struct FoldPlan {
  std::size_t k = 0;
  std::vector<Fold> folds;
};

/// Random partition of plane indices into k equal held-out groups.
inline FoldPlan kfold_plan(std::size_t n_planes, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > n_planes || n_planes % k != 0)
    throw ConfigError("fold count " + std::to_string(k) + " must divide plane count " +
                      std::to_string(n_planes));
  std::vector<std::size_t> perm(n_planes);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t per = n_planes / k;
  FoldPlan plan;
  plan.k = k;
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    fold.heldout.assign(perm.begin() + f * per, perm.begin() + (f + 1) * per);
    std::sort(fold.heldout.begin(), fold.heldout.end());
    for (std::size_t i = 0; i < n_planes; ++i)
      if (!std::binary_search(fold.heldout.begin(), fold.heldout.end(), i)) fold.train.push_back(i);
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

/// Splits positions [0, n_planes) into (train, validation) index lists.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(
    std::size_t n_planes, std::size_t n_val, std::uint64_t seed) {
  if (n_val == 0 || n_val >= n_planes)
    throw ConfigError("validation count must be in (0, " + std::to_string(n_planes) + ")");
  std::vector<std::size_t> perm(n_planes);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

}  // namespace icnn

#endif  // ICNN_SAMPLING_HPP
