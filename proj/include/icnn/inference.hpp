#ifndef ICNN_INFERENCE_HPP
#define ICNN_INFERENCE_HPP

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/imaging.hpp"
#include "icnn/network.hpp"
#include "icnn/sampling.hpp"
#include "icnn/training.hpp"

namespace icnn {

namespace detail {

/// Runs layers [start, end) on one feature tensor shaped like the patch-mode
/// input of layer `start`; returns the membrane probability.
inline double run_tail(const NetworkSpec& spec, const std::vector<FeatureShape>& shapes,
                       const NetworkParams& params, std::size_t start, Tensor x) {
  for (std::size_t i = start; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const FeatureShape is = shapes[i], os = shapes[i + 1];
    switch (l.kind) {
      case LayerKind::relu:
        kernels::relu_inplace(x.data(), x.size());
        continue;
      case LayerKind::conv: {
        Tensor y({os.c, os.h, os.w});
        kernels::conv_forward(x.data(), is, params.layers[i].weights.data(),
                              params.layers[i].bias.data(), l.out_channels, l.kernel_h, l.kernel_w,
                              y.data());
        x = std::move(y);
        break;
      }
      case LayerKind::maxpool: {
        Tensor y({os.c, os.h, os.w});
        kernels::maxpool_forward(x.data(), is, l.stride, y.data(), nullptr);
        x = std::move(y);
        break;
      }
      case LayerKind::fullyconnected:
      case LayerKind::softmax: {
        Tensor y({os.c, 1, 1});
        kernels::conv_forward(x.data(), is, params.layers[i].weights.data(),
                              params.layers[i].bias.data(), os.c, 1, 1, y.data());
        if (l.kind == LayerKind::softmax) {
          if (!std::isfinite(y[0]) || !std::isfinite(y[1]))
            throw NumericError("non-finite logits in forward pass");
          return kernels::softmax2(y[0], y[1])[1];
        }
        x = std::move(y);
        break;
      }
    }
  }
  throw ShapeError("network has no softmax layer");
}

inline Tensor crop(const Tensor& map, std::size_t oy, std::size_t ox) {
  const std::size_t c = map.extent(0), h = map.extent(1), w = map.extent(2);
  Tensor out({c, h - oy, w - ox});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = oy; y < h; ++y)
      std::copy(&map(ch, y, ox), &map(ch, y, ox) + (w - ox), &out(ch, y - oy, 0));
  return out;
}

// Dense evaluation from layer li on a feature map whose positions are patch
// origins. Max-pool layers split into stride x stride phases (shift and
// stitch); each phase is evaluated recursively and interleaved back.
inline Plane<double> dense_from(const NetworkSpec& spec, const std::vector<FeatureShape>& shapes,
                                const NetworkParams& params, std::size_t li, Tensor map) {
  for (; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    const FeatureShape ms{map.extent(0), map.extent(1), map.extent(2)};
    switch (l.kind) {
      case LayerKind::relu:
        kernels::relu_inplace(map.data(), map.size());
        break;
      case LayerKind::conv: {
        Tensor y({l.out_channels, ms.h - l.kernel_h + 1, ms.w - l.kernel_w + 1});
        kernels::conv_forward(map.data(), ms, params.layers[li].weights.data(),
                              params.layers[li].bias.data(), l.out_channels, l.kernel_h,
                              l.kernel_w, y.data());
        map = std::move(y);
        break;
      }
      case LayerKind::fullyconnected:
      case LayerKind::softmax: {
        const std::size_t oc = shapes[li + 1].c;
        Tensor y({oc, ms.h, ms.w});
        kernels::conv_forward(map.data(), ms, params.layers[li].weights.data(),
                              params.layers[li].bias.data(), oc, 1, 1, y.data());
        if (l.kind == LayerKind::softmax) {
          Plane<double> out(ms.h, ms.w);
          for (std::size_t i = 0; i < out.size(); ++i) {
            const double z0 = y[i], z1 = y[ms.h * ms.w + i];
            if (!std::isfinite(z0) || !std::isfinite(z1))
              throw NumericError("non-finite logits in dense pass");
            out.values[i] = kernels::softmax2(z0, z1)[1];
          }
          return out;
        }
        map = std::move(y);
        break;
      }
      case LayerKind::maxpool: {
        const std::size_t s = l.stride;
        const std::size_t out_h = ms.h - shapes[li].h + 1, out_w = ms.w - shapes[li].w + 1;
        Plane<double> out(out_h, out_w);
        for (std::size_t py = 0; py < s && py < out_h; ++py) {
          for (std::size_t px = 0; px < s && px < out_w; ++px) {
            const Tensor sub = crop(map, py, px);
            const FeatureShape ss{sub.extent(0), sub.extent(1), sub.extent(2)};
            Tensor pooled({ss.c, ss.h / s, ss.w / s});
            kernels::maxpool_forward(sub.data(), ss, s, pooled.data(), nullptr);
            const Plane<double> part = dense_from(spec, shapes, params, li + 1, std::move(pooled));
            for (std::size_t a = 0; py + s * a < out_h; ++a)
              for (std::size_t b = 0; px + s * b < out_w; ++b) out(py + s * a, px + s * b) = part(a, b);
          }
        }
        return out;
      }
    }
  }
  throw ShapeError("network has no softmax layer");
}

inline void check_plane(const NetworkSpec& spec, const Plane<double>& plane) {
  if (spec.input_channels != 1) throw ShapeError("plane inference needs a single-channel network");
  if (spec.input_side % 2 == 0) throw ShapeError("plane inference needs an odd patch side");
  if (plane.height < spec.input_side || plane.width < spec.input_side)
    throw ShapeError("plane smaller than the network patch");
}

inline void calibrate_inplace(Plane<double>& map, const CalibrationCurve& curve) {
  if (curve.is_identity()) return;
  for (double& v : map.values) v = curve(v);
}

}  // namespace detail

/// Sliding-window inference: one forward pass per pixel on its mirror-padded
/// neighbourhood.
inline ProbMap infer_map_patchwise(const NetworkSpec& spec, const NetworkParams& params,
                                   const Plane<double>& plane, const CalibrationCurve& curve = {},
                                   std::size_t threads = 1) {
  detail::check_plane(spec, plane);
  check_params(spec, params);
  const PatchSpec ps{spec.input_side, 1};
  const Plane<double> padded = mirror_pad(plane, ps.radius());
  ProbMap out(plane.height, plane.width);
  parallel_for(plane.height, threads, [&](std::size_t y) {
    for (std::size_t x = 0; x < plane.width; ++x)
      out(y, x) = curve(predict(spec, params, extract_patch(padded, x, y, ps)));
  });
  return out;
}

/// Whole-plane inference sharing convolution work between neighbouring
/// patches; agrees with infer_map_patchwise.
inline ProbMap infer_map_dense(const NetworkSpec& spec, const NetworkParams& params,
                               const Plane<double>& plane, const CalibrationCurve& curve = {},
                               std::size_t threads = 1) {
  (void)threads;
  detail::check_plane(spec, plane);
  check_params(spec, params);
  const auto shapes = feature_shapes(spec);
  const std::size_t r = (spec.input_side - 1) / 2;
  const Plane<double> padded = mirror_pad(plane, r);
  Tensor map({1, padded.height, padded.width}, padded.values);
  ProbMap out = detail::dense_from(spec, shapes, params, 0, std::move(map));
  if (out.height != plane.height || out.width != plane.width)
    throw ShapeError("dense inference produced a map of the wrong size");
  detail::calibrate_inplace(out, curve);
  return out;
}

enum class InferenceMode { patchwise, dense };

/// Pixelwise mean of maps, summed in list order.
inline ProbMap average_maps(std::span<const ProbMap> maps) {
  if (maps.empty()) throw Error("average_maps needs at least one map");
  ProbMap out(maps.front().height, maps.front().width, 0.0);
  for (const auto& m : maps) {
    if (!m.same_dims(out)) throw ShapeError("average_maps: dimension mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) out.values[i] += m.values[i];
  }
  const double n = static_cast<double>(maps.size());
  for (double& v : out.values) v /= n;
  return out;
}

/// Test-time augmentation: evaluates the plane under all eight d8 transforms,
/// maps each result back, and averages. The eight samples per pixel are
/// summed in sorted order so the result is exactly d8-equivariant.
inline ProbMap infer_map_tta(const NetworkSpec& spec, const NetworkParams& params,
                             const Plane<double>& plane, const CalibrationCurve& curve = {},
                             std::size_t threads = 1,
                             InferenceMode mode = InferenceMode::patchwise) {
  std::array<ProbMap, 8> maps;
  for (int k = 0; k < 8; ++k) {
    const Plane<double> t = d8_apply(plane, k);
    const ProbMap m = mode == InferenceMode::dense ? infer_map_dense(spec, params, t, curve, threads)
                                                   : infer_map_patchwise(spec, params, t, curve, threads);
    maps[k] = d8_apply(m, d8_inverse(k));
  }
  ProbMap out(plane.height, plane.width);
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

/// Sliding-window inference where each patch has its centre sample, and any
/// mirrored copy of it, replaced by centre_value(x, y). When the first layer
/// is a convolution it is evaluated once over the plane and only the outputs
/// whose receptive field covers a replaced sample are recomputed per patch,
/// with the same summation order as a direct forward pass on the masked patch.
inline ProbMap infer_map_center_masked(const NetworkSpec& spec, const NetworkParams& params,
                                       const Plane<double>& map,
                                       const std::function<double(std::size_t, std::size_t)>& centre_value,
                                       const CalibrationCurve& curve = {}, std::size_t threads = 1) {
  detail::check_plane(spec, map);
  check_params(spec, params);
  const auto shapes = feature_shapes(spec);
  const PatchSpec ps{spec.input_side, 1};
  const std::size_t r = ps.radius();
  const Plane<double> padded = mirror_pad(map, r);
  ProbMap out(map.height, map.width);

  if (spec.layers.front().kind != LayerKind::conv) {
    parallel_for(map.height, threads, [&](std::size_t y) {
      for (std::size_t x = 0; x < map.width; ++x) {
        Tensor patch = extract_patch(padded, x, y, ps);
        const double v = centre_value(x, y);
        for (const auto& [py, px] : mirror_copies(x, y, map.height, map.width, r)) patch(0, py, px) = v;
        out(y, x) = curve(predict(spec, params, patch));
      }
    });
    return out;
  }

  const LayerSpec& first = spec.layers.front();
  const FeatureShape in_shape = shapes[0], c1 = shapes[1];
  const FeatureShape plane_shape{1, padded.height, padded.width};
  Tensor shared({first.out_channels, padded.height - first.kernel_h + 1,
                 padded.width - first.kernel_w + 1});
  kernels::conv_forward(padded.values.data(), plane_shape, params.layers[0].weights.data(),
                        params.layers[0].bias.data(), first.out_channels, first.kernel_h,
                        first.kernel_w, shared.data());
  const double* w = params.layers[0].weights.data();
  const double* b = params.layers[0].bias.data();

  parallel_for(map.height, threads, [&](std::size_t y) {
    Tensor feat({c1.c, c1.h, c1.w});
    std::vector<char> dirty(c1.h * c1.w);
    for (std::size_t x = 0; x < map.width; ++x) {
      for (std::size_t o = 0; o < c1.c; ++o)
        for (std::size_t fy = 0; fy < c1.h; ++fy) {
          const double* src = &shared(o, y + fy, x);
          std::copy(src, src + c1.w, &feat(o, fy, 0));
        }
      Tensor patch = extract_patch(padded, x, y, ps);
      const double v = centre_value(x, y);
      std::fill(dirty.begin(), dirty.end(), 0);
      for (const auto& [py, px] : mirror_copies(x, y, map.height, map.width, r)) {
        patch(0, py, px) = v;
        // First-layer outputs whose window covers (py, px).
        for (std::size_t fy = py + 1 >= first.kernel_h ? py + 1 - first.kernel_h : 0;
             fy <= std::min(py, c1.h - 1); ++fy)
          for (std::size_t fx = px + 1 >= first.kernel_w ? px + 1 - first.kernel_w : 0;
               fx <= std::min(px, c1.w - 1); ++fx)
            dirty[fy * c1.w + fx] = 1;
      }
      for (std::size_t fy = 0; fy < c1.h; ++fy)
        for (std::size_t fx = 0; fx < c1.w; ++fx) {
          if (!dirty[fy * c1.w + fx]) continue;
          for (std::size_t o = 0; o < c1.c; ++o) {
            double s = b[o];
            for (std::size_t c = 0; c < in_shape.c; ++c)
              for (std::size_t ky = 0; ky < first.kernel_h; ++ky)
                for (std::size_t kx = 0; kx < first.kernel_w; ++kx)
                  s += w[((o * in_shape.c + c) * first.kernel_h + ky) * first.kernel_w + kx] *
                       patch(c, fy + ky, fx + kx);
            feat(o, fy, fx) = s;
          }
        }
      out(y, x) = curve(detail::run_tail(spec, shapes, params, 1, feat));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Leakage-free MDPMs for the training stack: fold f trains on its training
// planes and predicts only its held-out planes.

struct MdpmOptions {
  TrainConfig train;
  std::size_t n_val = 3;  // validation planes carved out of each fold's training planes
  bool tta = true;
  InferenceMode mode = InferenceMode::dense;
  std::size_t threads = 1;
};

struct FoldModel {
  std::size_t fold = 0;
  PixelModel model;
  bool diverged = false;
};

struct ProvenanceRecord {
  std::size_t plane = 0;
  std::size_t fold = 0;
};

struct MdpmGeneration {
  Stack<double> maps;  // one per training plane, in stack order
  std::vector<FoldModel> models;
  std::vector<ProvenanceRecord> provenance;
  std::vector<std::size_t> failed_folds;
};

inline ProbMap infer_map(const NetworkSpec& spec, const NetworkParams& params,
                         const Plane<double>& plane, const CalibrationCurve& curve, bool tta,
                         InferenceMode mode, std::size_t threads) {
  if (tta) return infer_map_tta(spec, params, plane, curve, threads, mode);
  return mode == InferenceMode::dense ? infer_map_dense(spec, params, plane, curve, threads)
                                      : infer_map_patchwise(spec, params, plane, curve, threads);
}

/// Trains one base model on `planes` (positions into images/labels), holding
/// out n_val of them for early stopping and calibration.
inline PixelModel train_base_model(const NetworkSpec& spec, const Stack<double>& images,
                                   const Stack<std::uint32_t>& labels,
                                   const std::vector<std::size_t>& planes, std::size_t n_val,
                                   const TrainConfig& cfg) {
  const auto [fit_pos, val_pos] = holdout_split(planes.size(), n_val, derive_seed(cfg.seed, "holdout"));
  std::vector<std::size_t> fit, val;
  for (std::size_t i : fit_pos) fit.push_back(planes[i]);
  for (std::size_t i : val_pos) val.push_back(planes[i]);
  const PatchSpec ps{spec.input_side, 1};
  Stack<double> padded(images.size());
  for (std::size_t p : planes) padded[p] = mirror_pad(images.at(p), ps.radius());
  return train_pixel_model(
      spec, labels, fit, val, [&](const SampleSite& s) { return site_example(padded, s, ps); }, cfg);
}

inline MdpmGeneration gen_training_mdpms(
    const Stack<double>& images, const Stack<std::uint32_t>& labels, const FoldPlan& plan,
    const NetworkSpec& spec, const MdpmOptions& opts,
    const std::function<void(const FoldModel&)>& on_fold = {}) {
  if (images.size() != labels.size()) throw ShapeError("image and label stacks differ in length");
  std::vector<int> covered(images.size(), 0);
  for (const auto& f : plan.folds)
    for (std::size_t p : f.heldout) ++covered.at(p);
  for (int c : covered)
    if (c != 1) throw Error("fold plan must hold out every plane exactly once");

  MdpmGeneration gen;
  gen.maps.resize(images.size());
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const Fold& fold = plan.folds[f];
    TrainConfig cfg = opts.train;
    cfg.seed = derive_seed(opts.train.seed, f);
    cfg.threads = opts.threads;
    FoldModel fm;
    fm.fold = f;
    fm.model = train_base_model(spec, images, labels, fold.train, opts.n_val, cfg);
    fm.diverged = fm.model.history.diverged;
    if (fm.diverged) {
      warn("fold " + std::to_string(f) + " diverged: " + fm.model.history.diagnostic);
      gen.failed_folds.push_back(f);
    }
    for (std::size_t p : fold.heldout) {
      gen.maps[p] = infer_map(spec, fm.model.params, images[p], fm.model.curve, opts.tta, opts.mode,
                              opts.threads);
      gen.provenance.push_back({p, f});
    }
    if (on_fold) on_fold(fm);
    gen.models.push_back(std::move(fm));
  }
  return gen;
}

/// True iff every plane has exactly one record and it names a fold whose
/// training set excludes that plane.
inline bool provenance_is_leak_free(const FoldPlan& plan, std::span<const ProvenanceRecord> prov,
                                    std::size_t n_planes) {
  std::vector<int> seen(n_planes, 0);
  for (const auto& r : prov) {
    if (r.plane >= n_planes || r.fold >= plan.folds.size()) return false;
    const auto& train = plan.folds[r.fold].train;
    if (std::find(train.begin(), train.end(), r.plane) != train.end()) return false;
    ++seen[r.plane];
  }
  return std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; });
}

/// Ensemble MDPM: average over models of their (optionally TTA) maps.
inline ProbMap ensemble_map(const NetworkSpec& spec, std::span<const FoldModel> models,
                            const Plane<double>& plane, bool tta, InferenceMode mode,
                            std::size_t threads) {
  std::vector<ProbMap> maps;
  for (const auto& m : models)
    maps.push_back(infer_map(spec, m.model.params, plane, m.model.curve, tta, mode, threads));
  return average_maps(maps);
}

}  // namespace icnn

#endif  // ICNN_INFERENCE_HPP
