#ifndef PDEN_SHIFTS_HPP
#define PDEN_SHIFTS_HPP

// Deterministic image shifts used as unseen target domains.
//
// Every parameter below is fixed per severity level (1..5). Noise draws for
// image i come from Rng(derive_seed(spec.seed, "shift", i)), so a shift is a
// pure function of (dataset, spec).
//
//   invert          p -> (1-a) p + a (1-p)         a     = 0.6 0.7 0.8 0.9 1.0
//   gaussian_noise  p + N(0, s^2), clipped         s     = 0.04 0.08 0.12 0.18 0.26
//   contrast        0.5 + c (p - 0.5)              c     = 0.75 0.6 0.45 0.3 0.15
//   brightness      p + b, clipped                 b     = 0.1 0.2 0.3 0.4 0.5
//   blur            gaussian, clamped borders      sigma = 0.5 0.75 1.0 1.5 2.0
//   pixelate        area-downsample by r, nearest  r     = 0.8 0.6 0.5 0.4 0.3
//                   upsample back
//   speckle         p + p N(0, s^2), clipped       s     = 0.15 0.2 0.35 0.45 0.6

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pden/dataset.hpp"
#include "pden/rng.hpp"

namespace pden {

namespace shift_tables {
inline constexpr std::array<double, 5> invert_amount{0.6, 0.7, 0.8, 0.9, 1.0};
inline constexpr std::array<double, 5> gaussian_std{0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr std::array<double, 5> contrast_factor{0.75, 0.6, 0.45, 0.3, 0.15};
inline constexpr std::array<double, 5> brightness_delta{0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> blur_sigma{0.5, 0.75, 1.0, 1.5, 2.0};
inline constexpr std::array<double, 5> pixelate_ratio{0.8, 0.6, 0.5, 0.4, 0.3};
inline constexpr std::array<double, 5> speckle_std{0.15, 0.2, 0.35, 0.45, 0.6};
}  // namespace shift_tables

inline void validate(const ShiftSpec& s) {
  if (s.severity < 1 || s.severity > 5) {
    throw std::invalid_argument("shift severity must be in 1..5, got " +
                                std::to_string(s.severity));
  }
}

inline std::string shift_label(const ShiftSpec& s) {
  return std::string(shift_name(s.kind)) + "-" + std::to_string(s.severity);
}

namespace detail {

inline void blur_plane(std::span<double> plane, std::size_t H, std::size_t W, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= total;
  std::vector<double> tmp(plane.size());
  const auto clampi = [](long v, long hi) { return std::clamp<long>(v, 0, hi - 1); };
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double s = 0.0;
      for (int d = -radius; d <= radius; ++d)
        s += k[d + radius] * plane[i * W + clampi(static_cast<long>(j) + d, static_cast<long>(W))];
      tmp[i * W + j] = s;
    }
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double s = 0.0;
      for (int d = -radius; d <= radius; ++d)
        s += k[d + radius] * tmp[clampi(static_cast<long>(i) + d, static_cast<long>(H)) * W + j];
      plane[i * W + j] = s;
    }
}

inline void pixelate_plane(std::span<double> plane, std::size_t H, std::size_t W, double ratio) {
  const std::size_t h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * ratio)));
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * ratio)));
  std::vector<double> low(h * w, 0.0);
  for (std::size_t a = 0; a < h; ++a)
    for (std::size_t b = 0; b < w; ++b) {
      const std::size_t i0 = a * H / h, i1 = std::max(i0 + 1, (a + 1) * H / h);
      const std::size_t j0 = b * W / w, j1 = std::max(j0 + 1, (b + 1) * W / w);
      double s = 0.0;
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) s += plane[i * W + j];
      low[a * w + b] = s / static_cast<double>((i1 - i0) * (j1 - j0));
    }
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) plane[i * W + j] = low[(i * h / H) * w + (j * w / W)];
}

}  // namespace detail

/// Applies a shift to every image; labels and shapes are preserved.
inline DomainDataset apply_shift(const DomainDataset& ds, const ShiftSpec& spec) {
  validate(spec);
  if (ds.empty()) throw FormatError("apply_shift on an empty dataset");
  const std::size_t s = static_cast<std::size_t>(spec.severity - 1);
  DomainDataset out = ds;
  out.name = shift_label(spec);
  out.provenance.kind = Provenance::Kind::shifted;
  out.provenance.shift = spec;

  const std::size_t M = ds.size(), C = ds.channels(), H = ds.height(), W = ds.width();
  const std::size_t per = C * H * W;
  for (std::size_t m = 0; m < M; ++m) {
    std::span<double> img = out.images.data().subspan(m * per, per);
    Rng rng(derive_seed(spec.seed, "shift", m));
    switch (spec.kind) {
      case ShiftKind::invert: {
        const double a = shift_tables::invert_amount[s];
        for (auto& p : img) p = (1.0 - a) * p + a * (1.0 - p);
        break;
      }
      case ShiftKind::gaussian_noise:
        for (auto& p : img) p += shift_tables::gaussian_std[s] * rng.normal();
        break;
      case ShiftKind::contrast:
        for (auto& p : img) p = 0.5 + shift_tables::contrast_factor[s] * (p - 0.5);
        break;
      case ShiftKind::brightness:
        for (auto& p : img) p += shift_tables::brightness_delta[s];
        break;
      case ShiftKind::blur:
        for (std::size_t c = 0; c < C; ++c)
          detail::blur_plane(img.subspan(c * H * W, H * W), H, W, shift_tables::blur_sigma[s]);
        break;
      case ShiftKind::pixelate:
        for (std::size_t c = 0; c < C; ++c)
          detail::pixelate_plane(img.subspan(c * H * W, H * W), H, W,
                                 shift_tables::pixelate_ratio[s]);
        break;
      case ShiftKind::speckle:
        for (auto& p : img) p += p * shift_tables::speckle_std[s] * rng.normal();
        break;
    }
    for (auto& p : img) p = std::clamp(p, 0.0, 1.0);
  }
  return out;
}

/// The default unseen-domain benchmark: full inversion plus four
/// mid-severity shifts.
inline std::vector<ShiftSpec> default_benchmark(std::uint64_t seed = 0) {
  return {{ShiftKind::invert, 5, seed},
          {ShiftKind::gaussian_noise, 3, seed},
          {ShiftKind::contrast, 3, seed},
          {ShiftKind::blur, 3, seed},
          {ShiftKind::pixelate, 3, seed}};
}

}  // namespace pden

#endif  // PDEN_SHIFTS_HPP
