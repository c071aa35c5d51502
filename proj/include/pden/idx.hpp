#ifndef PDEN_IDX_HPP
#define PDEN_IDX_HPP

// IDX (MNIST) and PGM persistence.
//
// IDX: 4-byte magic 0x00 0x00 0x08 <ndims>, then ndims big-endian u32
// dimension sizes, then unsigned bytes. Images are 0x00000803 (N, rows, cols);
// multi-channel images are written as 0x00000804 (N, C, rows, cols). Labels
// are 0x00000801 (N).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "pden/dataset.hpp"

namespace pden {

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

inline void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t data_offset = 0;
};

inline IdxHeader parse_idx_header(const std::vector<unsigned char>& bytes, const std::string& what) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08) {
    throw FormatError(what + ": bad IDX magic (expected unsigned-byte IDX)");
  }
  const std::size_t nd = bytes[3];
  if (nd == 0 || bytes.size() < 4 + 4 * nd) throw FormatError(what + ": truncated IDX header");
  IdxHeader h;
  for (std::size_t i = 0; i < nd; ++i) h.dims.push_back(be32(&bytes[4 + 4 * i]));
  h.data_offset = 4 + 4 * nd;
  std::size_t count = 1;
  for (auto d : h.dims) count *= d;
  if (bytes.size() - h.data_offset < count) throw FormatError(what + ": truncated IDX payload");
  return h;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace detail

/// Loads an IDX image/label pair, scaling pixels by 1/255 and keeping at
/// most `limit` items (0 = no limit).
inline DomainDataset load_idx(const std::filesystem::path& images_path,
                              const std::filesystem::path& labels_path, std::size_t limit = 0,
                              std::size_t classes = 10, std::string name = "source") {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  const auto ih = detail::parse_idx_header(ib, images_path.string());
  const auto lh = detail::parse_idx_header(lb, labels_path.string());
  if (ih.dims.size() != 3 && ih.dims.size() != 4) {
    throw FormatError(images_path.string() + ": bad magic, expected 0x00000803 or 0x00000804");
  }
  if (lh.dims.size() != 1) throw FormatError(labels_path.string() + ": bad magic, expected 0x00000801");
  if (ih.dims[0] != lh.dims[0]) {
    throw FormatError("image count " + std::to_string(ih.dims[0]) + " != label count " +
                      std::to_string(lh.dims[0]));
  }
  const std::size_t total = ih.dims[0];
  if (total == 0) throw FormatError("IDX files contain no items");
  const std::size_t n = limit ? std::min<std::size_t>(limit, total) : total;
  const std::size_t c = ih.dims.size() == 4 ? ih.dims[1] : 1;
  const std::size_t h = ih.dims[ih.dims.size() - 2], w = ih.dims.back();
  if (c == 0 || h == 0 || w == 0) throw FormatError("IDX image dimensions must be positive");

  DomainDataset ds;
  ds.classes = classes;
  ds.name = std::move(name);
  ds.images = Tensor(Shape{n, c, h, w});
  const std::size_t per = c * h * w;
  for (std::size_t i = 0; i < n * per; ++i) ds.images[i] = ib[ih.data_offset + i] / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[lh.data_offset + i];
    if (ds.labels[i] >= classes) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(ds.labels[i]) +
                        " outside [0, " + std::to_string(classes) + ")");
    }
  }
  return ds;
}

inline std::string encode_idx_images(const DomainDataset& ds) {
  ds.validate();
  std::string out;
  const bool multi = ds.channels() != 1;
  out += std::string{'\0', '\0', '\x08', multi ? '\x04' : '\x03'};
  detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
  if (multi) detail::put_be32(out, static_cast<std::uint32_t>(ds.channels()));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.height()));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.width()));
  for (double v : ds.images.data()) out.push_back(static_cast<char>(quantize_pixel(v)));
  return out;
}

inline std::string encode_idx_labels(const DomainDataset& ds) {
  ds.validate();
  std::string out{'\0', '\0', '\x08', '\x01'};
  detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
  for (auto l : ds.labels) {
    if (l > 255) throw FormatError("IDX labels are limited to one byte");
    out.push_back(static_cast<char>(l));
  }
  return out;
}

/// Writes the dataset as IDX with 8-bit quantized pixels.
inline void save_idx(const DomainDataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  if (ds.empty()) throw FormatError("cannot save an empty dataset");
  detail::write_file(images_path, encode_idx_images(ds));
  detail::write_file(labels_path, encode_idx_labels(ds));
}

/// Tiles the first channel of up to rows*cols images into one binary PGM
/// (P5, maxval 255), row-major, no gutters.
inline std::string encode_pgm_grid(const Tensor& images, std::size_t cols = 8) {
  if (images.rank() != 4) throw ShapeError("pgm grid expects [N x C x H x W]");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  cols = std::max<std::size_t>(1, std::min(cols, N));
  const std::size_t rows = (N + cols - 1) / cols;
  const std::size_t GW = cols * W, GH = rows * H;
  std::string out = "P5\n" + std::to_string(GW) + " " + std::to_string(GH) + "\n255\n";
  std::string pixels(GW * GH, '\0');
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t r = n / cols, c = n % cols;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        pixels[(r * H + i) * GW + c * W + j] =
            static_cast<char>(quantize_pixel(images[((n * C) * H + i) * W + j]));
  }
  return out + pixels;
}

inline void save_pgm_grid(const Tensor& images, const std::filesystem::path& path,
                          std::size_t cols = 8) {
  detail::write_file(path, encode_pgm_grid(images, cols));
}

}  // namespace pden

#endif  // PDEN_IDX_HPP
