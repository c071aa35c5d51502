#ifndef PDEN_TOY_HPP
#define PDEN_TOY_HPP

// Synthetic digit-like data: bright anti-aliased strokes on a dark
// background, one parametric glyph per class, with random placement, scale,
// rotation, stroke width and ink intensity.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "pden/dataset.hpp"
#include "pden/rng.hpp"

namespace pden {

struct ToySpec {
  std::size_t classes = 10;
  std::size_t count = 1000;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;

  friend bool operator==(const ToySpec&, const ToySpec&) = default;
};

inline constexpr std::size_t kToyGlyphs = 10;

namespace detail {

struct Segment {
  double x0, y0, x1, y1;
};

struct Glyph {
  std::vector<Segment> segments;
  double ring_radius = 0.0;  // > 0 adds a circle outline
};

// Glyph outlines in [-1, 1]^2, y pointing down.
inline const std::array<Glyph, kToyGlyphs>& glyphs() {
  static const std::array<Glyph, kToyGlyphs> g = {{
      {{}, 0.6},                                                    // ring
      {{{0.0, -0.75, 0.0, 0.75}}, 0.0},                             // vertical bar
      {{{-0.75, 0.0, 0.75, 0.0}}, 0.0},                             // horizontal bar
      {{{-0.55, -0.55, 0.55, -0.55}, {0.55, -0.55, 0.55, 0.55},     // box
        {0.55, 0.55, -0.55, 0.55}, {-0.55, 0.55, -0.55, -0.55}}, 0.0},
      {{{0.0, -0.7, 0.0, 0.7}, {-0.7, 0.0, 0.7, 0.0}}, 0.0},        // plus
      {{{-0.6, -0.6, 0.6, 0.6}, {-0.6, 0.6, 0.6, -0.6}}, 0.0},      // cross
      {{{-0.45, -0.75, -0.45, 0.7}, {-0.45, 0.7, 0.55, 0.7}}, 0.0}, // L
      {{{-0.6, -0.7, 0.6, -0.7}, {0.0, -0.7, 0.0, 0.75}}, 0.0},     // T
      {{{0.0, -0.7, 0.65, 0.6}, {0.65, 0.6, -0.65, 0.6},            // triangle
        {-0.65, 0.6, 0.0, -0.7}}, 0.0},
      {{{-0.5, 0.75, 0.5, -0.75}}, 0.0},                            // slash
  }};
  return g;
}

inline double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Renders one glyph into `out` (C x H x W, already zeroed).
inline void render_glyph(std::size_t cls, Rng& rng, std::size_t channels, std::size_t height,
                         std::size_t width, std::span<double> out) {
  const auto& glyph = detail::glyphs()[cls % kToyGlyphs];
  const double side = static_cast<double>(std::min(height, width));
  const double scale = rng.uniform(0.62, 0.85) * side / 2.0;  // pixels per glyph unit
  const double cx = static_cast<double>(width) / 2.0 + rng.uniform(-0.12, 0.12) * side;
  const double cy = static_cast<double>(height) / 2.0 + rng.uniform(-0.12, 0.12) * side;
  const double angle = rng.uniform(-0.25, 0.25);
  const double stroke = rng.uniform(0.7, 1.3) * side / 28.0;  // half-width in pixels
  const double ink = rng.uniform(0.75, 1.0);
  const double ca = std::cos(angle), sa = std::sin(angle);

  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      // pixel centre -> glyph coordinates
      const double px = (static_cast<double>(j) + 0.5 - cx) / scale;
      const double py = (static_cast<double>(i) + 0.5 - cy) / scale;
      const double gx = ca * px + sa * py, gy = -sa * px + ca * py;
      double d = 1e9;
      for (const auto& s : glyph.segments) d = std::min(d, detail::segment_distance(gx, gy, s));
      if (glyph.ring_radius > 0.0) {
        d = std::min(d, std::abs(std::sqrt(gx * gx + gy * gy) - glyph.ring_radius));
      }
      const double dist_px = d * scale;
      const double v = ink * std::clamp(stroke + 0.5 - dist_px, 0.0, 1.0);
      for (std::size_t c = 0; c < channels; ++c) out[(c * height + i) * width + j] = v;
    }
}

/// Class-balanced synthetic dataset; item i has label i % classes.
inline DomainDataset make_toy_dataset(const ToySpec& spec, Rng& rng, std::string name = "toy") {
  if (spec.classes < 2 || spec.classes > kToyGlyphs) {
    throw std::invalid_argument("toy dataset supports 2..10 classes");
  }
  if (spec.count == 0) throw std::invalid_argument("toy dataset needs at least one item");
  DomainDataset ds;
  ds.classes = spec.classes;
  ds.name = std::move(name);
  ds.images = Tensor(Shape{spec.count, spec.channels, spec.height, spec.width}, 0.0);
  ds.labels.resize(spec.count);
  const std::size_t per = spec.channels * spec.height * spec.width;
  for (std::size_t i = 0; i < spec.count; ++i) {
    ds.labels[i] = i % spec.classes;
    render_glyph(ds.labels[i], rng, spec.channels, spec.height, spec.width,
                 ds.images.data().subspan(i * per, per));
  }
  return ds;
}

inline void to_json(nlohmann::json& j, const ToySpec& s) {
  j = {{"classes", s.classes},
       {"count", s.count},
       {"height", s.height},
       {"width", s.width},
       {"channels", s.channels}};
}

}  // namespace pden

#endif  // PDEN_TOY_HPP
