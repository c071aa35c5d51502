#ifndef PDEN_CHECKPOINT_HPP
#define PDEN_CHECKPOINT_HPP

// Checkpoint container.
//
//   bytes 0..11   "PDEN-CKPT-1\n"
//   u64 (LE)      length L of the manifest
//   L bytes       manifest, a UTF-8 JSON object; its "arrays" member lists
//                 {"name", "shape", "offset", "count"} for every stored array
//   ...           payload: the arrays' f64 values, little-endian, back to back;
//                 "offset" counts f64 elements from the start of the payload
//
// Everything other than "arrays" in the manifest is free-form metadata
// (architecture, seed, step count, loss weights).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pden/models.hpp"
#include "pden/tensor.hpp"

namespace pden {

inline constexpr std::string_view kCheckpointMagic = "PDEN-CKPT-1\n";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(const std::string& prefix, const ParamList& params) {
    for (const auto& p : params) arrays.emplace_back(prefix + p.name, p.var.value());
  }

  const Tensor& array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return t;
    throw CheckpointError("checkpoint has no array named " + name);
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f64_le(std::string& out, double d) { put_u64_le(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest = ck.manifest;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.arrays) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  manifest["arrays"] = std::move(index);
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic);
  detail::put_u64_le(out, text.size());
  out += text;
  out.reserve(out.size() + offset * 8);
  for (const auto& [name, t] : ck.arrays)
    for (double v : t.data()) detail::put_f64_le(out, v);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8 ||
      bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
    if (bytes.rfind("PDEN-CKPT-", 0) == 0) {
      throw CheckpointError("unsupported checkpoint version (expected PDEN-CKPT-1)");
    }
    throw CheckpointError("not a PDEN checkpoint (bad header)");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = kCheckpointMagic.size();
  const std::uint64_t len = detail::get_u64_le(base + pos);
  pos += 8;
  if (len > bytes.size() - pos) throw CheckpointError("checkpoint truncated in manifest");

  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  pos += len;
  const std::size_t payload = (bytes.size() - pos) / 8;
  if ((bytes.size() - pos) % 8 != 0) throw CheckpointError("checkpoint payload not f64-aligned");

  if (!ck.manifest.contains("arrays") || !ck.manifest["arrays"].is_array()) {
    throw CheckpointError("checkpoint manifest lacks an array index");
  }
  for (const auto& entry : ck.manifest["arrays"]) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (numel(shape) != count || offset + count > payload) {
      throw CheckpointError("checkpoint array " + entry.at("name").get<std::string>() +
                            " is inconsistent with the payload");
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<double>(detail::get_u64_le(base + pos + (offset + i) * 8));
    }
    ck.arrays.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  ck.manifest.erase("arrays");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Rebuilds the task model stored under prefix "task/".
inline TaskModel task_model_from(const Checkpoint& ck) {
  if (!ck.manifest.contains("architecture")) {
    throw CheckpointError("checkpoint manifest lacks an architecture");
  }
  const auto arch = ck.manifest["architecture"].get<Architecture>();
  Rng unused(0);
  TaskModel model(arch, unused);
  ParamList params = model.params();
  try {
    assign_params(params, ck.arrays, "task/");
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  return model;
}

inline Generator generator_from(const Checkpoint& ck, const std::string& prefix) {
  const auto arch = ck.manifest.at("architecture").get<Architecture>();
  Rng unused(0);
  Generator g(arch, unused);
  ParamList params = g.params();
  try {
    assign_params(params, ck.arrays, prefix);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  return g;
}

}  // namespace pden

#endif  // PDEN_CHECKPOINT_HPP
