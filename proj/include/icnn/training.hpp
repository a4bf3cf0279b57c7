#ifndef ICNN_TRAINING_HPP
#define ICNN_TRAINING_HPP

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/network.hpp"
#include "icnn/sampling.hpp"

namespace icnn {

enum class MaskMode { constant_zero, uniform_noise };

inline std::string to_string(MaskMode m) {
  return m == MaskMode::constant_zero ? "constant_zero" : "uniform_noise";
}

inline MaskMode parse_mask_mode(std::string_view s) {
  if (s == "constant_zero") return MaskMode::constant_zero;
  if (s == "uniform_noise") return MaskMode::uniform_noise;
  throw ConfigError("unknown mask mode '" + std::string(s) + "'");
}

struct TrainConfig {
  double lr = 0.005;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 12;
  std::size_t patience = 3;
  std::size_t patches_per_epoch = 4000;
  std::size_t val_patches = 2000;
  std::size_t calib_pixels = 20000;
  std::size_t calib_bins = 10;
  std::uint64_t seed = 1;
  bool augment = true;
  MaskMode mask_mode = MaskMode::constant_zero;
  std::size_t threads = 1;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.patches_per_epoch == 0 ||
      cfg.val_patches == 0 || cfg.calib_bins == 0)
    throw ConfigError("batch_size, max_epochs, patches_per_epoch, val_patches and calib_bins "
                      "must be positive");
  if (cfg.patches_per_epoch % 2 || cfg.val_patches % 2)
    throw ConfigError("patch counts must be even for class balancing");
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch completed
  bool diverged = false;
  std::string diagnostic;

  double best_val_loss() const {
    return best_epoch == 0 ? std::numeric_limits<double>::infinity()
                           : epochs[best_epoch - 1].val_loss;
  }
};

inline void write_history_csv(std::ostream& os, const TrainHistory& h) {
  os << "epoch,train_loss,val_loss,is_best\n";
  os << std::setprecision(17);
  for (const auto& e : h.epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ','
       << (e.epoch == h.best_epoch ? 1 : 0) << '\n';
}

struct TrainResult {
  NetworkParams params;
  TrainHistory history;
};

/// Mean cross-entropy over examples, summed in index order.
inline double mean_loss(const NetworkSpec& spec, const NetworkParams& params,
                        std::span<const TrainExample> examples, std::size_t threads = 1) {
  if (examples.empty()) throw Error("mean_loss over an empty example set");
  std::vector<double> losses(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    losses[i] = cross_entropy(forward(spec, params, examples[i].patch).cache, examples[i].label);
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(examples.size());
}

/// Yields the (balanced) training examples for a 0-based epoch.
using ExampleSource = std::function<std::vector<TrainExample>(std::size_t epoch)>;

/// Mini-batch momentum SGD with validation early stopping. Returns the
/// parameters of the epoch with the lowest validation loss. Training stops
/// once `patience` epochs pass without a new minimum, or at max_epochs.
inline TrainResult train_classifier(const NetworkSpec& spec, const ExampleSource& source,
                                    std::span<const TrainExample> val_examples,
                                    const TrainConfig& cfg) {
  validate(cfg);
  if (val_examples.empty()) throw Error("training needs a non-empty validation set");
  NetworkParams params = init_params(spec, derive_seed(cfg.seed, "init"));
  NetworkParams velocity = zero_params(spec);

  TrainResult result;
  result.params = params;
  TrainHistory& hist = result.history;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const std::vector<TrainExample> examples = source(epoch);
    if (examples.empty()) throw Error("example source returned no examples");
    double loss_sum = 0.0;
    bool diverged = false;
    for (std::size_t start = 0; start < examples.size() && !diverged; start += cfg.batch_size) {
      const std::size_t end = std::min(examples.size(), start + cfg.batch_size);
      const std::size_t n = end - start;
      try {
        std::vector<BackwardResult> per(n);
        parallel_for(n, cfg.threads, [&](std::size_t i) {
          const TrainExample& ex = examples[start + i];
          const ForwardResult fr = forward(spec, params, ex.patch);
          per[i] = backward(spec, params, fr.cache, ex.label);
        });
        NetworkParams grad = zero_params(spec);
        for (const auto& b : per) {
          accumulate(grad, b.grads);
          loss_sum += b.loss;
        }
        scale(grad, 1.0 / static_cast<double>(n));
        if (!std::isfinite(loss_sum)) throw NumericError("non-finite training loss");
        sgd_step(params, grad, cfg.lr, cfg.momentum, velocity);
      } catch (const NumericError& e) {
        hist.diverged = true;
        hist.diagnostic = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
        diverged = true;
      }
    }
    if (diverged) break;

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(examples.size());
    try {
      rec.val_loss = mean_loss(spec, params, val_examples, cfg.threads);
    } catch (const NumericError& e) {
      rec.val_loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(rec.val_loss)) {
      hist.diverged = true;
      hist.diagnostic = "epoch " + std::to_string(epoch + 1) + ": non-finite validation loss";
      break;
    }
    hist.epochs.push_back(rec);
    if (hist.best_epoch == 0 || rec.val_loss < hist.best_val_loss()) {
      hist.best_epoch = rec.epoch;
      result.params = params;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sampling-bias correction: histogram calibration with Laplace smoothing and a
// pool-adjacent-violators pass, evaluated by linear interpolation between bin
// centres (flat beyond the outer centres). An empty curve is the identity.

struct CalibrationCurve {
  std::vector<double> edges;   // n_bins + 1, from 0 to 1
  std::vector<double> values;  // n_bins, non-decreasing, in [0, 1]

  bool is_identity() const { return values.empty(); }
  std::size_t bins() const { return values.size(); }
  double center(std::size_t b) const { return 0.5 * (edges[b] + edges[b + 1]); }

  double operator()(double p) const {
    if (is_identity()) return std::clamp(p, 0.0, 1.0);
    const std::size_t n = values.size();
    if (p <= center(0)) return values.front();
    if (p >= center(n - 1)) return values.back();
    std::size_t b = 0;
    while (b + 1 < n && center(b + 1) < p) ++b;
    const double c0 = center(b), c1 = center(b + 1);
    const double t = (p - c0) / (c1 - c0);
    return std::clamp(values[b] + t * (values[b + 1] - values[b]), 0.0, 1.0);
  }

  friend bool operator==(const CalibrationCurve&, const CalibrationCurve&) = default;
};

inline double apply_calibration(const CalibrationCurve& curve, double p) { return curve(p); }

inline std::size_t calibration_bin(double p, std::size_t n_bins) {
  const auto b = static_cast<std::size_t>(std::clamp(p, 0.0, 1.0) * static_cast<double>(n_bins));
  return std::min(b, n_bins - 1);
}

/// Weighted pool-adjacent-violators projection onto non-decreasing sequences.
inline std::vector<double> isotonic_fit(const std::vector<double>& y, const std::vector<double>& w) {
  struct Block {
    double value, weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < y.size(); ++i) {
    blocks.push_back({y[i], w[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].value > blocks.back().value) {
      Block b = blocks.back();
      blocks.pop_back();
      Block& a = blocks.back();
      const double tw = a.weight + b.weight;
      a.value = (a.value * a.weight + b.value * b.weight) / tw;
      a.weight = tw;
      a.count += b.count;
    }
  }
  std::vector<double> out;
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.value);
  return out;
}

inline CalibrationCurve fit_calibration(std::span<const double> raw_probs,
                                        std::span<const int> true_labels, std::size_t n_bins) {
  if (n_bins == 0) throw Error("calibration needs at least one bin");
  if (raw_probs.size() != true_labels.size())
    throw ShapeError("calibration inputs differ in length");
  if (raw_probs.size() < n_bins) throw Error("calibration needs at least n_bins samples");
  std::vector<double> pos(n_bins, 0.0), tot(n_bins, 0.0);
  for (std::size_t i = 0; i < raw_probs.size(); ++i) {
    const std::size_t b = calibration_bin(raw_probs[i], n_bins);
    tot[b] += 1.0;
    pos[b] += true_labels[i] == 1 ? 1.0 : 0.0;
  }
  std::vector<double> y(n_bins), w(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    y[b] = (pos[b] + 1.0) / (tot[b] + 2.0);
    w[b] = tot[b] + 2.0;
  }
  CalibrationCurve c;
  c.edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b)
    c.edges[b] = static_cast<double>(b) / static_cast<double>(n_bins);
  c.values = isotonic_fit(y, w);
  return c;
}

/// ASCII: one "edge value" pair per line; the final line carries the upper
/// edge 1 with the last bin value repeated. An identity curve has no lines.
inline void write_calibration(std::ostream& os, const CalibrationCurve& c) {
  os << std::setprecision(17);
  for (std::size_t b = 0; b < c.values.size(); ++b) os << c.edges[b] << ' ' << c.values[b] << '\n';
  if (!c.values.empty()) os << c.edges.back() << ' ' << c.values.back() << '\n';
}

inline CalibrationCurve read_calibration(std::istream& is) {
  CalibrationCurve c;
  double e = 0, v = 0;
  std::vector<std::pair<double, double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (!(ls >> e >> v)) throw FormatError("bad calibration line: " + line);
    rows.emplace_back(e, v);
  }
  if (rows.empty()) return c;
  if (rows.size() < 2) throw FormatError("calibration file needs at least two lines");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    c.edges.push_back(rows[i].first);
    if (i + 1 < rows.size()) c.values.push_back(rows[i].second);
  }
  for (std::size_t i = 1; i < c.edges.size(); ++i)
    if (!(c.edges[i] > c.edges[i - 1])) throw FormatError("calibration edges not increasing");
  return c;
}

inline void save_calibration(const std::string& path, const CalibrationCurve& c) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_calibration(os, c);
}

inline CalibrationCurve load_calibration(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  return read_calibration(is);
}


// ---------------------------------------------------------------------------
// Pixel classifier training on plane stacks: balanced sites from the fit
// planes, a fixed balanced validation set from the validation planes, and a
// calibration curve fitted on uniformly drawn validation pixels.

/// Builds the network input for a sampled site.
using SiteExampleFn = std::function<TrainExample(const SampleSite&)>;

struct PixelModel {
  NetworkParams params;
  TrainHistory history;
  CalibrationCurve curve;
};

inline std::vector<SampleSite> uniform_sites(const Stack<std::uint32_t>& labels,
                                             const std::vector<std::size_t>& planes, std::size_t n,
                                             std::uint64_t seed) {
  std::size_t total = 0;
  for (std::size_t p : planes) total += labels.at(p).size();
  if (total == 0) throw Error("no pixels to draw from");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<SampleSite> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = pick(rng);
    for (std::size_t p : planes) {
      const LabelMap& lab = labels[p];
      if (k < lab.size()) {
        out.push_back({p, k % lab.width, k / lab.width, lab.values[k] == 0 ? 1 : 0, 0});
        break;
      }
      k -= lab.size();
    }
  }
  return out;
}

inline PixelModel train_pixel_model(const NetworkSpec& spec, const Stack<std::uint32_t>& labels,
                                    const std::vector<std::size_t>& fit_planes,
                                    const std::vector<std::size_t>& val_planes,
                                    const SiteExampleFn& make_example, const TrainConfig& cfg) {
  validate(cfg);
  if (fit_planes.empty() || val_planes.empty())
    throw Error("training needs non-empty fit and validation plane sets");
  const BalancedSampler train_sampler(labels, fit_planes);
  const BalancedSampler val_sampler(labels, val_planes);

  auto build = [&](const std::vector<SampleSite>& sites) {
    std::vector<TrainExample> out(sites.size());
    parallel_for(sites.size(), cfg.threads, [&](std::size_t i) { out[i] = make_example(sites[i]); });
    return out;
  };

  const auto val_examples =
      build(val_sampler.draw(cfg.val_patches, derive_seed(cfg.seed, "validation"), false));
  const ExampleSource source = [&](std::size_t epoch) {
    return build(train_sampler.draw(cfg.patches_per_epoch,
                                    derive_seed(derive_seed(cfg.seed, "epoch"), epoch), cfg.augment));
  };

  PixelModel model;
  TrainResult tr = train_classifier(spec, source, val_examples, cfg);
  model.params = std::move(tr.params);
  model.history = std::move(tr.history);

  const auto calib_sites =
      uniform_sites(labels, val_planes, std::max(cfg.calib_pixels, cfg.calib_bins),
                    derive_seed(cfg.seed, "calibration"));
  std::vector<double> raw(calib_sites.size());
  std::vector<int> truth(calib_sites.size());
  parallel_for(calib_sites.size(), cfg.threads, [&](std::size_t i) {
    const TrainExample ex = make_example(calib_sites[i]);
    raw[i] = predict(spec, model.params, ex.patch);
    truth[i] = ex.label;
  });
  model.curve = fit_calibration(raw, truth, cfg.calib_bins);
  return model;
}

}  // namespace icnn

#endif  // ICNN_TRAINING_HPP
