#ifndef ICNN_SYNTH_HPP
#define ICNN_SYNTH_HPP

// Synthetic EM-like planes: a Voronoi tessellation of Poisson-disk seeds
// with dark membranes along cell boundaries, faded membrane stretches
// (gaps a local detector cannot see), dark clutter strokes inside cells
// that look like membrane fragments, additive noise and blur.

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/imaging.hpp"

namespace icnn {

struct SynthConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t cell_count = 30;
  double membrane_width = 3.0;
  double noise_sigma = 0.08;
  double blur_sigma = 1.0;
  double clutter_density = 0.5;  // strokes per 1000 pixels
  double gap_density = 0.3;      // faded membrane spots per 1000 pixels
  double gap_radius = 7.0;
};

struct Seed2 {
  double x = 0.0, y = 0.0;
};

struct SynthPlane {
  GrayImage image;
  LabelMap labels;
  std::vector<Seed2> seeds;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.height < 32 || cfg.width < 32) throw ConfigError("synthetic planes must be at least 32x32");
  if (cfg.membrane_width < 1.0) throw ConfigError("membrane_width must be >= 1");
  if (cfg.cell_count == 0) throw ConfigError("cell_count must be >= 1");
  if (cfg.noise_sigma < 0 || cfg.blur_sigma < 0 || cfg.clutter_density < 0 || cfg.gap_density < 0 ||
      cfg.gap_radius < 0)
    throw ConfigError("synthetic noise/blur/clutter/gap parameters must be non-negative");
}

/// Distance from (x, y) to the boundary of the Voronoi cell of seed `own`,
/// i.e. the nearest bisector with any other seed.
inline double voronoi_boundary_distance(const std::vector<Seed2>& seeds, std::size_t own, double x,
                                        double y) {
  double best = std::numeric_limits<double>::infinity();
  const double ax = seeds[own].x, ay = seeds[own].y;
  const double da = (x - ax) * (x - ax) + (y - ay) * (y - ay);
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    if (s == own) continue;
    const double sx = seeds[s].x, sy = seeds[s].y;
    const double ds = (x - sx) * (x - sx) + (y - sy) * (y - sy);
    const double sep = std::hypot(sx - ax, sy - ay);
    best = std::min(best, (ds - da) / (2.0 * sep));
  }
  return best;
}

inline std::size_t nearest_seed(const std::vector<Seed2>& seeds, double x, double y) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const double d = (x - seeds[s].x) * (x - seeds[s].x) + (y - seeds[s].y) * (y - seeds[s].y);
    if (d < bd) {
      bd = d;
      best = s;
    }
  }
  return best;
}

namespace detail {

inline std::vector<Seed2> poisson_disk_seeds(const SynthConfig& cfg, std::mt19937_64& rng) {
  const double area = static_cast<double>(cfg.height * cfg.width);
  double spacing = 0.8 * std::sqrt(area / static_cast<double>(cfg.cell_count));
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(cfg.width - 1));
  std::uniform_real_distribution<double> uy(0.0, static_cast<double>(cfg.height - 1));
  for (;;) {
    if (cfg.cell_count > 1 && spacing < 2.0 * cfg.membrane_width)
      throw ConfigError("cell_count " + std::to_string(cfg.cell_count) +
                        " too large: seeds would be closer than 2*membrane_width");
    std::vector<Seed2> seeds;
    const std::size_t max_attempts = 200 * cfg.cell_count;
    for (std::size_t a = 0; a < max_attempts && seeds.size() < cfg.cell_count; ++a) {
      const Seed2 cand{ux(rng), uy(rng)};
      bool ok = true;
      for (const auto& s : seeds)
        if (std::hypot(s.x - cand.x, s.y - cand.y) < spacing) {
          ok = false;
          break;
        }
      if (ok) seeds.push_back(cand);
    }
    if (seeds.size() == cfg.cell_count) return seeds;
    spacing *= 0.9;
  }
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

inline GrayImage gaussian_blur(const GrayImage& in, double sigma) {
  if (sigma <= 0.0) return in;
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  GrayImage tmp(in.height, in.width), out(in.height, in.width);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        s += k[i + r] * in(y, reflect_index(static_cast<std::ptrdiff_t>(x) + i, in.width));
      tmp(y, x) = s;
    }
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i)
        s += k[i + r] * tmp(reflect_index(static_cast<std::ptrdiff_t>(y) + i, in.height), x);
      out(y, x) = s;
    }
  return out;
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

}  // namespace detail

inline SynthPlane synth_plane(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SynthPlane out;
  out.seeds = detail::poisson_disk_seeds(cfg, rng);
  const auto& seeds = out.seeds;
  const std::size_t h = cfg.height, w = cfg.width;
  out.labels = LabelMap(h, w);
  GrayImage img(h, w);

  std::vector<double> cell_tone(seeds.size());
  for (double& t : cell_tone) t = 0.7 + 0.1 * (unit(rng) - 0.5);

  const double half = cfg.membrane_width / 2.0;
  std::vector<std::size_t> membrane_pixels;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const std::size_t own = nearest_seed(seeds, fx, fy);
      const bool membrane =
          seeds.size() > 1 && voronoi_boundary_distance(seeds, own, fx, fy) <= half;
      out.labels(y, x) = membrane ? 0u : static_cast<std::uint32_t>(own + 1);
      img(y, x) = membrane ? 0.25 : cell_tone[own];
      if (membrane) membrane_pixels.push_back(y * w + x);
    }

  const double kilo_pixels = static_cast<double>(h * w) / 1000.0;

  // Faded stretches: membrane brightened towards the neighbouring tone.
  const auto n_gaps = static_cast<std::size_t>(std::lround(cfg.gap_density * kilo_pixels));
  for (std::size_t g = 0; g < n_gaps && !membrane_pixels.empty(); ++g) {
    const std::size_t at = membrane_pixels[static_cast<std::size_t>(
        unit(rng) * static_cast<double>(membrane_pixels.size())) % membrane_pixels.size()];
    const double cx = static_cast<double>(at % w), cy = static_cast<double>(at / w);
    const double rad = cfg.gap_radius * (0.75 + 0.5 * unit(rng));
    for (std::size_t i : membrane_pixels) {
      const double d = std::hypot(static_cast<double>(i % w) - cx, static_cast<double>(i / w) - cy);
      if (d >= rad) continue;
      const double fade = std::clamp(2.0 * (1.0 - (d * d) / (rad * rad)), 0.0, 1.0);
      img.values[i] = std::max(img.values[i], 0.25 + fade * (0.68 - 0.25));
    }
  }

  // Clutter: short dark strokes, label unchanged.
  const auto n_clutter = static_cast<std::size_t>(std::lround(cfg.clutter_density * kilo_pixels));
  for (std::size_t c = 0; c < n_clutter; ++c) {
    const double cx = unit(rng) * static_cast<double>(w - 1);
    const double cy = unit(rng) * static_cast<double>(h - 1);
    const double ang = unit(rng) * 3.141592653589793;
    const double len = 4.0 + 5.0 * unit(rng);
    const double ax = cx - 0.5 * len * std::cos(ang), ay = cy - 0.5 * len * std::sin(ang);
    const double bx = cx + 0.5 * len * std::cos(ang), by = cy + 0.5 * len * std::sin(ang);
    const double tone = 0.28 + 0.07 * unit(rng);
    const auto lo_x = static_cast<std::ptrdiff_t>(std::floor(std::min(ax, bx) - half - 1));
    const auto hi_x = static_cast<std::ptrdiff_t>(std::ceil(std::max(ax, bx) + half + 1));
    const auto lo_y = static_cast<std::ptrdiff_t>(std::floor(std::min(ay, by) - half - 1));
    const auto hi_y = static_cast<std::ptrdiff_t>(std::ceil(std::max(ay, by) + half + 1));
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, lo_y);
         y <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h) - 1, hi_y); ++y)
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, lo_x);
           x <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w) - 1, hi_x); ++x) {
        const double d = detail::segment_distance(static_cast<double>(x), static_cast<double>(y),
                                                  ax, ay, bx, by);
        if (d <= half) img(y, x) = std::min(img(y, x), tone);
      }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  if (cfg.noise_sigma > 0.0)
    for (double& v : img.values) v += cfg.noise_sigma * noise(rng);
  img = detail::gaussian_blur(img, cfg.blur_sigma);
  // Quantize to the 8-bit grid so the in-memory plane equals its PGM file.
  for (double& v : img.values) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  out.image = std::move(img);
  return out;
}

struct SynthStack {
  Stack<double> images;
  Stack<std::uint32_t> labels;
};

inline SynthStack synth_stack(const SynthConfig& cfg, std::size_t n_planes, std::uint64_t seed) {
  SynthStack s;
  for (std::size_t i = 0; i < n_planes; ++i) {
    SynthPlane p = synth_plane(cfg, derive_seed(seed, i));
    s.images.push_back(std::move(p.image));
    s.labels.push_back(std::move(p.labels));
  }
  return s;
}

}  // namespace icnn

#endif  // ICNN_SYNTH_HPP
