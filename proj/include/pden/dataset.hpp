#ifndef PDEN_DATASET_HPP
#define PDEN_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pden/tensor.hpp"

namespace pden {

/// Malformed or inconsistent dataset input (bad magic, truncation, counts).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShiftKind { invert, gaussian_noise, contrast, brightness, blur, pixelate, speckle };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::invert;
  int severity = 5;
  std::uint64_t seed = 0;

  friend bool operator==(const ShiftSpec&, const ShiftSpec&) = default;
};

inline const char* shift_name(ShiftKind k) {
  switch (k) {
    case ShiftKind::invert: return "invert";
    case ShiftKind::gaussian_noise: return "gaussian_noise";
    case ShiftKind::contrast: return "contrast";
    case ShiftKind::brightness: return "brightness";
    case ShiftKind::blur: return "blur";
    case ShiftKind::pixelate: return "pixelate";
    case ShiftKind::speckle: return "speckle";
  }
  return "?";
}

inline ShiftKind parse_shift_kind(const std::string& s) {
  for (auto k : {ShiftKind::invert, ShiftKind::gaussian_noise, ShiftKind::contrast,
                 ShiftKind::brightness, ShiftKind::blur, ShiftKind::pixelate, ShiftKind::speckle}) {
    if (s == shift_name(k)) return k;
  }
  throw std::invalid_argument("unknown shift kind '" + s + "'");
}

inline void to_json(nlohmann::json& j, const ShiftSpec& s) {
  j = {{"kind", shift_name(s.kind)}, {"severity", s.severity}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ShiftSpec& s) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "kind" && it.key() != "severity" && it.key() != "seed") {
      throw std::invalid_argument("unknown key '" + it.key() + "' in shift spec");
    }
  }
  s.kind = parse_shift_kind(j.at("kind").get<std::string>());
  s.severity = j.value("severity", 3);
  s.seed = j.value("seed", std::uint64_t{0});
}

struct Provenance {
  enum class Kind { source, synthetic, shifted };
  Kind kind = Kind::source;
  std::size_t k = 0;           // synthetic: domain index
  std::uint64_t seed = 0;      // synthetic: materialization seed
  ShiftSpec shift;             // shifted: the applied shift

  nlohmann::json to_json() const {
    switch (kind) {
      case Kind::source: return {{"kind", "source"}};
      case Kind::synthetic: return {{"kind", "synthetic"}, {"k", k}, {"seed", seed}};
      case Kind::shifted: return {{"kind", "shifted"}, {"shift", shift}};
    }
    return {};
  }
};

struct DomainDataset {
  Tensor images;  // [M x C x H x W], values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t classes = 10;
  std::string name;
  Provenance provenance;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (labels.empty()) throw FormatError("dataset '" + name + "' is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw FormatError("dataset '" + name + "': images must be [M x C x H x W] with M labels");
    }
    for (auto l : labels) {
      if (l >= classes) throw FormatError("dataset '" + name + "': label out of range");
    }
    for (double v : images.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset '" + name + "': pixel outside [0,1]");
    }
  }

  Tensor batch_images(std::span<const std::size_t> idx) const { return gather_rows(images, idx); }

  std::vector<std::size_t> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  std::vector<std::size_t> label_histogram() const {
    std::vector<std::size_t> h(classes, 0);
    for (auto l : labels) ++h.at(l);
    return h;
  }

  /// First `count` items (or all, if fewer).
  DomainDataset head(std::size_t count) const {
    DomainDataset out = *this;
    count = std::min(count, size());
    if (count == 0) throw FormatError("head(0) would produce an empty dataset");
    out.images = slice_rows(images, 0, count);
    out.labels.resize(count);
    return out;
  }

  DomainDataset subset(std::span<const std::size_t> idx, std::string new_name) const {
    DomainDataset out;
    out.images = batch_images(idx);
    out.labels = batch_labels(idx);
    out.classes = classes;
    out.name = std::move(new_name);
    out.provenance = provenance;
    return out;
  }
};

inline std::uint8_t quantize_pixel(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// FNV-1a 64 over the 8-bit quantized pixels followed by the labels.
inline std::string dataset_checksum(const DomainDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (double v : ds.images.data()) mix(quantize_pixel(v));
  for (auto l : ds.labels) mix(static_cast<std::uint8_t>(l));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Dataset manifest document: name, provenance, counts and checksum.
inline nlohmann::json dataset_manifest(const DomainDataset& ds) {
  return {{"name", ds.name},
          {"provenance", ds.provenance.to_json()},
          {"count", ds.size()},
          {"classes", ds.classes},
          {"shape", ds.images.shape()},
          {"label_counts", ds.label_histogram()},
          {"checksum", dataset_checksum(ds)}};
}

/// Centre-pads/crops to height x width and replicates a single channel to
/// `channels` (e.g. 28x28 grayscale -> 32x32x3).
inline DomainDataset conform(const DomainDataset& ds, std::size_t channels, std::size_t height,
                             std::size_t width) {
  if (ds.channels() != 1 && ds.channels() != channels) {
    throw std::invalid_argument("conform: can only replicate single-channel images");
  }
  const std::size_t M = ds.size(), C0 = ds.channels(), H0 = ds.height(), W0 = ds.width();
  Tensor out(Shape{M, channels, height, width}, 0.0);
  const long dy = (static_cast<long>(height) - static_cast<long>(H0)) / 2;
  const long dx = (static_cast<long>(width) - static_cast<long>(W0)) / 2;
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t src_c = C0 == 1 ? 0 : c;
      for (std::size_t i = 0; i < height; ++i) {
        const long si = static_cast<long>(i) - dy;
        if (si < 0 || si >= static_cast<long>(H0)) continue;
        for (std::size_t j = 0; j < width; ++j) {
          const long sj = static_cast<long>(j) - dx;
          if (sj < 0 || sj >= static_cast<long>(W0)) continue;
          out[((m * channels + c) * height + i) * width + j] =
              ds.images[((m * C0 + src_c) * H0 + static_cast<std::size_t>(si)) * W0 +
                        static_cast<std::size_t>(sj)];
        }
      }
    }
  DomainDataset r = ds;
  r.images = std::move(out);
  return r;
}

}  // namespace pden

#endif  // PDEN_DATASET_HPP
