#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hyperat/dataset.hpp"

namespace hyperat {

// Procedurally rendered 28x28 grayscale handwritten-style digits. Each class
// is a set of pen strokes in a unit box; every sample draws its own control
// point jitter, affine distortion, stroke width, contrast and pixel noise.
struct SynthDigitOptions {
  int image_size = 28;
  double jitter = 0.035;       // control-point displacement (unit box)
  double max_rotation = 0.25;  // radians
  double max_shear = 0.2;
  double noise = 0.06;
};

namespace detail {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

inline Stroke arc(double cx, double cy, double rx, double ry, double a0_deg, double a1_deg, int n = 10) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    const double a = (a0_deg + (a1_deg - a0_deg) * i / n) * M_PI / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

inline Stroke join(Stroke a, const Stroke& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Angles follow screen coordinates: 0 deg points right, 90 deg points down.
inline const std::array<std::vector<Stroke>, 10>& digit_strokes() {
  static const std::array<std::vector<Stroke>, 10> glyphs = [] {
    std::array<std::vector<Stroke>, 10> g;
    g[0] = {arc(0.5, 0.5, 0.28, 0.4, 0, 360, 20)};
    g[1] = {{{0.35, 0.25}, {0.55, 0.1}, {0.55, 0.9}}};
    g[2] = {join(arc(0.5, 0.32, 0.25, 0.22, 200, 390, 10), Stroke{{0.22, 0.9}, {0.8, 0.9}})};
    g[3] = {arc(0.48, 0.3, 0.24, 0.2, 210, 450, 10), arc(0.48, 0.7, 0.26, 0.2, 270, 510, 10)};
    g[4] = {{{0.62, 0.9}, {0.62, 0.1}, {0.2, 0.65}, {0.82, 0.65}}};
    g[5] = {join(Stroke{{0.75, 0.1}, {0.32, 0.1}, {0.28, 0.45}}, arc(0.5, 0.65, 0.26, 0.25, 230, 500, 12))};
    g[6] = {join(Stroke{{0.7, 0.12}, {0.45, 0.3}}, arc(0.5, 0.66, 0.24, 0.24, 200, 560, 16))};
    g[7] = {{{0.2, 0.1}, {0.8, 0.1}, {0.42, 0.9}}, {{0.35, 0.52}, {0.7, 0.52}}};
    g[8] = {arc(0.5, 0.3, 0.2, 0.19, 0, 360, 16), arc(0.5, 0.7, 0.24, 0.21, 0, 360, 16)};
    g[9] = {arc(0.5, 0.32, 0.22, 0.21, 0, 360, 16), {{0.72, 0.32}, {0.62, 0.9}}};
    return g;
  }();
  return glyphs;
}

inline double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

inline void render_digit(int digit, std::mt19937_64& rng, const SynthDigitOptions& opt, std::span<float> out) {
  using namespace detail;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int S = opt.image_size;

  const double rot = opt.max_rotation * u(rng);
  const double shear = opt.max_shear * u(rng);
  const double sx = 0.62 + 0.08 * u(rng);
  const double sy = 0.68 + 0.06 * u(rng);
  const double tx = 0.5 + 0.06 * u(rng);
  const double ty = 0.5 + 0.05 * u(rng);
  const double width = (1.1 + 0.35 * u(rng)) / S;
  const double ink = 0.8 + 0.2 * u(rng);
  const double c = std::cos(rot), s = std::sin(rot);

  std::vector<Stroke> strokes = digit_strokes()[static_cast<std::size_t>(digit)];
  for (auto& stroke : strokes) {
    for (auto& p : stroke) {
      const double x = (p.x - 0.5 + opt.jitter * u(rng)) * sx;
      const double y = (p.y - 0.5 + opt.jitter * u(rng)) * sy;
      const double xs = x + shear * y;
      p = {tx + c * xs - s * y, ty + s * xs + c * y};
    }
  }
  const double soft = 0.8 / S;
  for (int py = 0; py < S; ++py) {
    for (int px = 0; px < S; ++px) {
      const Pt p{(px + 0.5) / S, (py + 0.5) / S};
      double dmin = 1e9;
      for (const auto& stroke : strokes) {
        for (std::size_t i = 0; i + 1 < stroke.size(); ++i) dmin = std::min(dmin, segment_distance(p, stroke[i], stroke[i + 1]));
      }
      double v = ink * std::clamp(1.0 - (dmin - width) / soft, 0.0, 1.0);
      v += opt.noise * gauss(rng);
      out[static_cast<std::size_t>(py * S + px)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

// Balanced classes in a seeded random order.
inline Dataset synthetic_digits(std::size_t count, std::uint64_t seed, const SynthDigitOptions& opt = {}) {
  Dataset ds;
  ds.channels = 1;
  ds.height = ds.width = opt.image_size;
  ds.num_classes = 10;
  ds.name = "synthetic_digits";
  ds.images.resize(static_cast<Eigen::Index>(count), opt.image_size * opt.image_size);
  ds.labels.resize(count);
  std::mt19937_64 rng(seed);
  const auto order = shuffled_indices(count, seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(order[i] % 10);
    ds.labels[i] = digit;
    render_digit(digit, rng, opt,
                 std::span<float>(ds.images.row(static_cast<Eigen::Index>(i)).data(),
                                  static_cast<std::size_t>(ds.images.cols())));
  }
  return ds;
}

}  // namespace hyperat
