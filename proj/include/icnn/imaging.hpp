#ifndef ICNN_IMAGING_HPP
#define ICNN_IMAGING_HPP

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/tensor.hpp"

namespace icnn {

/// Row-major single-channel plane. (row, col) indexing; x = col, y = row.
template <class T>
struct Plane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}
  Plane(std::size_t h, std::size_t w, std::vector<T> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw ShapeError("plane data does not match dimensions");
  }

  T& operator()(std::size_t row, std::size_t col) { return values[row * width + col]; }
  const T& operator()(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  std::size_t size() const { return values.size(); }
  template <class U>
  bool same_dims(const Plane<U>& o) const {
    return height == o.height && width == o.width;
  }

  friend bool operator==(const Plane&, const Plane&) = default;
};

// Grey values and membrane probabilities both live in [0, 1]; p = 1 means
// membrane. Labels: 0 = membrane/boundary, >= 1 segment id.
using GrayImage = Plane<double>;
using ProbMap = Plane<double>;
using LabelMap = Plane<std::uint32_t>;

template <class T>
using Stack = std::vector<Plane<T>>;

/// Binary membrane indicator of a label map (1.0 where label == 0).
inline ProbMap membrane_indicator(const LabelMap& labels) {
  ProbMap m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] == 0 ? 1.0 : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Dihedral group of the square. k = 4 * f + r: optional horizontal flip
// (col -> W-1-col) first, then r clockwise quarter turns, each mapping
// (row, col) -> (col, H-1-row).

inline void check_d8(int k) {
  if (k < 0 || k > 7) throw Error("d8 transform index out of range: " + std::to_string(k));
}

constexpr int d8_inverse(int k) {
  // Pure rotations invert to the opposite turn; reflections are involutions.
  return k < 4 ? (4 - k) % 4 : k;
}

/// Output coordinates of source pixel (row, col) of an h x w plane.
inline std::pair<std::size_t, std::size_t> d8_map(int k, std::size_t row, std::size_t col,
                                                  std::size_t h, std::size_t w) {
  if (k >= 4) col = w - 1 - col;
  for (int r = 0; r < k % 4; ++r) {
    const std::size_t nr = col, nc = h - 1 - row;
    row = nr;
    col = nc;
    std::swap(h, w);
  }
  return {row, col};
}

template <class T>
Plane<T> d8_apply(const Plane<T>& in, int k) {
  check_d8(k);
  const bool swap = (k % 4) % 2 == 1;
  Plane<T> out(swap ? in.width : in.height, swap ? in.height : in.width);
  for (std::size_t r = 0; r < in.height; ++r)
    for (std::size_t c = 0; c < in.width; ++c) {
      const auto [nr, nc] = d8_map(k, r, c, in.height, in.width);
      out(nr, nc) = in(r, c);
    }
  return out;
}

/// Applies k to every channel of a C x H x W tensor.
inline Tensor d8_apply(const Tensor& in, int k) {
  check_d8(k);
  if (in.rank() != 3) throw ShapeError("d8_apply expects a CxHxW tensor");
  const std::size_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
  const bool swap = (k % 4) % 2 == 1;
  Tensor out({c, swap ? w : h, swap ? h : w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) {
        const auto [nr, nc] = d8_map(k, r, col, h, w);
        out(ch, nr, nc) = in(ch, r, col);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Mirror padding without repeating the edge sample: pad index -1 reads 1.

constexpr std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= static_cast<std::ptrdiff_t>(n)) return 2 * (n - 1) - static_cast<std::size_t>(i);
  return static_cast<std::size_t>(i);
}

template <class T>
Plane<T> mirror_pad(const Plane<T>& in, std::size_t r) {
  if (in.height == 0 || in.width == 0 || r + 1 > std::min(in.height, in.width))
    throw Error("mirror_pad radius " + std::to_string(r) + " too large for " +
                std::to_string(in.height) + "x" + std::to_string(in.width) + " plane");
  Plane<T> out(in.height + 2 * r, in.width + 2 * r);
  const auto pr = static_cast<std::ptrdiff_t>(r);
  for (std::size_t y = 0; y < out.height; ++y) {
    const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) - pr, in.height);
    for (std::size_t x = 0; x < out.width; ++x)
      out(y, x) = in(sy, reflect_index(static_cast<std::ptrdiff_t>(x) - pr, in.width));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM (P5). 8-bit files load as grey images scaled to [0, 1]; 16-bit files
// (big-endian samples) load as label maps.

namespace detail {
inline std::string pgm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw FormatError("truncated PGM header");
  return tok;
}

inline std::size_t pgm_number(std::istream& is) {
  const std::string tok = pgm_token(is);
  std::size_t v = 0;
  for (char c : tok) {
    if (c < '0' || c > '9') throw FormatError("bad number in PGM header: " + tok);
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}
}  // namespace detail

using PgmImage = std::variant<GrayImage, LabelMap>;

inline PgmImage read_pgm(std::istream& is) {
  if (detail::pgm_token(is) != "P5") throw FormatError("not a binary PGM (P5) file");
  const std::size_t w = detail::pgm_number(is);
  const std::size_t h = detail::pgm_number(is);
  const std::size_t maxval = detail::pgm_number(is);
  if (w == 0 || h == 0) throw FormatError("PGM with zero dimension");
  // pgm_token consumed exactly one whitespace byte after maxval.
  if (maxval == 255) {
    std::vector<unsigned char> buf(w * h);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw FormatError("truncated PGM payload");
    GrayImage img(h, w);
    for (std::size_t i = 0; i < buf.size(); ++i) img.values[i] = buf[i] / 255.0;
    return img;
  }
  if (maxval == 65535) {
    std::vector<unsigned char> buf(2 * w * h);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw FormatError("truncated PGM payload");
    LabelMap lab(h, w);
    for (std::size_t i = 0; i < w * h; ++i)
      lab.values[i] = (static_cast<std::uint32_t>(buf[2 * i]) << 8) | buf[2 * i + 1];
    return lab;
  }
  throw FormatError("unsupported PGM maxval " + std::to_string(maxval) + " (need 255 or 65535)");
}

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_pgm(is);
}

inline GrayImage read_gray_pgm(const std::string& path) {
  auto img = read_pgm(path);
  if (!std::holds_alternative<GrayImage>(img)) throw FormatError(path + ": expected 8-bit PGM");
  return std::get<GrayImage>(std::move(img));
}

inline LabelMap read_label_pgm(const std::string& path) {
  auto img = read_pgm(path);
  if (!std::holds_alternative<LabelMap>(img)) throw FormatError(path + ": expected 16-bit PGM");
  return std::get<LabelMap>(std::move(img));
}

inline void write_pgm(std::ostream& os, const GrayImage& img) {
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.values[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void write_pgm(std::ostream& os, const LabelMap& lab) {
  os << "P5\n" << lab.width << ' ' << lab.height << "\n65535\n";
  std::vector<unsigned char> buf(2 * lab.size());
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab.values[i] > 65535) throw FormatError("label exceeds 16-bit PGM range");
    buf[2 * i] = static_cast<unsigned char>(lab.values[i] >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(lab.values[i] & 0xff);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

template <class T>
void write_pgm(const Plane<T>& plane, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_pgm(os, plane);
  if (!os) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Probability stacks: "MDPM1\n", "W H N\n", then N*H*W little-endian float32,
// plane-major then row-major.

inline void write_probstack(std::ostream& os, const Stack<double>& stack) {
  if (stack.empty()) throw Error("cannot write an empty probability stack");
  const std::size_t h = stack.front().height, w = stack.front().width;
  os << "MDPM1\n" << w << ' ' << h << ' ' << stack.size() << '\n';
  std::vector<char> buf(4 * h * w);
  for (const auto& plane : stack) {
    if (plane.height != h || plane.width != w) throw ShapeError("stack planes differ in size");
    for (std::size_t i = 0; i < plane.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(plane.values[i]));
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
}

/// Values are clamped into [0, 1]; clamped (if given) receives the count.
inline Stack<double> read_probstack(std::istream& is, std::size_t* clamped = nullptr) {
  std::string line;
  if (!std::getline(is, line) || line != "MDPM1") throw FormatError("bad probability stack magic");
  if (!std::getline(is, line)) throw FormatError("missing probability stack header");
  std::istringstream hs(line);
  std::size_t w = 0, h = 0, n = 0;
  if (!(hs >> w >> h >> n) || w == 0 || h == 0 || n == 0)
    throw FormatError("bad probability stack header: " + line);
  Stack<double> stack;
  std::size_t nclamp = 0;
  std::vector<unsigned char> buf(4 * w * h);
  for (std::size_t p = 0; p < n; ++p) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw FormatError("probability stack payload shorter than header declares");
    ProbMap m(h, w);
    for (std::size_t i = 0; i < w * h; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
      double v = std::bit_cast<float>(bits);
      if (!(v >= 0.0 && v <= 1.0)) {
        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
        ++nclamp;
      }
      m.values[i] = v;
    }
    stack.push_back(std::move(m));
  }
  if (is.peek() != EOF) throw FormatError("probability stack payload longer than header declares");
  if (nclamp > 0) warn("clamped " + std::to_string(nclamp) + " probability values into [0,1]");
  if (clamped) *clamped = nclamp;
  return stack;
}

inline void write_probstack(const Stack<double>& stack, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_probstack(os, stack);
  if (!os) throw Error("write failed: " + path);
}

inline Stack<double> read_probstack(const std::string& path, std::size_t* clamped = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_probstack(is, clamped);
}

}  // namespace icnn

#endif  // ICNN_IMAGING_HPP
