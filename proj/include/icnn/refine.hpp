#ifndef ICNN_REFINE_HPP
#define ICNN_REFINE_HPP

// Iterative refinement of membrane probability maps: a network trained to
// recover the masked centre pixel of MDPM patches, applied synchronously
// over the whole map for several rounds.

#include <random>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/imaging.hpp"
#include "icnn/inference.hpp"
#include "icnn/network.hpp"
#include "icnn/sampling.hpp"
#include "icnn/training.hpp"

namespace icnn {

/// Deterministic U[0,1) value for masking the centre of pixel (x, y).
inline double mask_noise(std::uint64_t seed, std::size_t x, std::size_t y) {
  const std::uint64_t h = mix64(seed ^ mix64((static_cast<std::uint64_t>(y) << 32) | x));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double mask_value(MaskMode mode, std::uint64_t seed, std::size_t x, std::size_t y) {
  return mode == MaskMode::constant_zero ? 0.0 : mask_noise(seed, x, y);
}

/// MDPM patch around (x, y) with its centre masked, including mirrored copies
/// of the centre near borders; label is the ground-truth membrane bit at
/// (x, y). padded_mdpm is mirror-padded by spec.radius().
inline TrainExample make_icnn_example(const ProbMap& padded_mdpm, const LabelMap& gt, std::size_t x,
                                      std::size_t y, const PatchSpec& spec, MaskMode mode,
                                      std::uint64_t seed) {
  if (x >= gt.width || y >= gt.height) throw Error("example centre outside the ground truth");
  Tensor patch = extract_patch(padded_mdpm, x, y, spec);
  const double v = mask_value(mode, seed, x, y);
  for (const auto& [py, px] : mirror_copies(x, y, gt.height, gt.width, spec.radius())) patch(0, py, px) = v;
  return {std::move(patch), gt(y, x) == 0 ? 1 : 0};
}

/// Trains on MDPM patches from train_planes, validating on val_planes.
inline PixelModel train_icnn(const Stack<double>& mdpms, const Stack<std::uint32_t>& labels,
                             const std::vector<std::size_t>& train_planes,
                             const std::vector<std::size_t>& val_planes, const NetworkSpec& spec,
                             const TrainConfig& cfg) {
  if (mdpms.size() != labels.size()) throw ShapeError("MDPM and label stacks differ in length");
  const PatchSpec ps{spec.input_side, 1};
  Stack<double> padded(mdpms.size());
  for (std::size_t p : train_planes) padded[p] = mirror_pad(mdpms.at(p), ps.radius());
  for (std::size_t p : val_planes) padded[p] = mirror_pad(mdpms.at(p), ps.radius());
  const std::uint64_t noise_seed = derive_seed(cfg.seed, "mask-noise");
  return train_pixel_model(
      spec, labels, train_planes, val_planes,
      [&](const SampleSite& s) {
        // Each site gets its own noise stream so draws do not repeat per pixel.
        const std::uint64_t site_seed = derive_seed(noise_seed, s.plane * 0x9e37u + s.transform);
        TrainExample ex = make_icnn_example(padded[s.plane], labels[s.plane], s.x, s.y, ps,
                                            cfg.mask_mode, site_seed);
        if (s.transform != 0) ex.patch = d8_apply(ex.patch, s.transform);
        return ex;
      },
      cfg);
}

/// Cross-entropy of predicting each example's label by its raw unmasked MDPM
/// centre value (clipped away from 0 and 1).
inline double center_copy_loss(const Stack<double>& mdpms, std::span<const SampleSite> sites) {
  double s = 0.0;
  for (const auto& site : sites) {
    const double p = std::clamp(mdpms.at(site.plane)(site.y, site.x), 1e-6, 1.0 - 1e-6);
    s += -std::log(site.label == 1 ? p : 1.0 - p);
  }
  return s / static_cast<double>(sites.size());
}

struct RefineOptions {
  MaskMode mask_mode = MaskMode::constant_zero;
  bool recalibrate = true;  // apply the calibration curve every round
  bool tta = false;
  bool dense = false;  // only valid with uniform_noise masking
  std::uint64_t noise_seed = 0;
  std::size_t threads = 1;
};

/// One synchronous round: every output pixel is predicted from its masked
/// neighbourhood in the input map only.
inline ProbMap refine_once(const NetworkSpec& spec, const NetworkParams& params, const ProbMap& mdpm,
                           const CalibrationCurve& curve, const RefineOptions& opt = {}) {
  const CalibrationCurve identity;
  const CalibrationCurve& c = opt.recalibrate ? curve : identity;
  if (opt.dense) {
    if (opt.mask_mode != MaskMode::uniform_noise)
      throw Error("dense refinement requires uniform_noise masking");
    return opt.tta ? infer_map_tta(spec, params, mdpm, c, opt.threads, InferenceMode::dense)
                   : infer_map_dense(spec, params, mdpm, c, opt.threads);
  }
  auto run = [&](const ProbMap& m) {
    return infer_map_center_masked(
        spec, params, m,
        [&](std::size_t x, std::size_t y) { return mask_value(opt.mask_mode, opt.noise_seed, x, y); },
        c, opt.threads);
  };
  if (!opt.tta) return run(mdpm);
  std::array<ProbMap, 8> maps;
  for (int k = 0; k < 8; ++k) maps[k] = d8_apply(run(d8_apply(mdpm, k)), d8_inverse(k));
  ProbMap out(mdpm.height, mdpm.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::array<double, 8> v;
    for (int k = 0; k < 8; ++k) v[k] = maps[k].values[i];
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    out.values[i] = std::clamp(s / 8.0, 0.0, 1.0);
  }
  return out;
}

/// trace[0] is the input; trace[r] = refine_once(trace[r - 1]).
using RefineTrace = std::vector<ProbMap>;

inline RefineTrace refine_rounds(const NetworkSpec& spec, const NetworkParams& params,
                                 const ProbMap& mdpm, std::size_t rounds,
                                 const CalibrationCurve& curve, const RefineOptions& opt = {}) {
  if (rounds == 0) throw Error("refine_rounds needs at least one round");
  RefineTrace trace{mdpm};
  for (std::size_t r = 1; r <= rounds; ++r) {
    RefineOptions ro = opt;
    ro.noise_seed = derive_seed(opt.noise_seed, r);
    trace.push_back(refine_once(spec, params, trace.back(), curve, ro));
  }
  return trace;
}

}  // namespace icnn

#endif  // ICNN_REFINE_HPP
