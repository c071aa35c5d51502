#ifndef PDEN_TESTS_COMMON_HPP
#define PDEN_TESTS_COMMON_HPP

#include <filesystem>
#include <string>

#include "pden.hpp"

namespace pden::test {

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pden-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Architecture small_arch(std::size_t classes = 4, std::size_t side = 16) {
  Architecture a;
  a.channels = 1;
  a.height = side;
  a.width = side;
  a.classes = classes;
  a.f_channels = {4, 8, 8};
  a.c_hidden = 8;
  a.d_z = 4;
  a.g_channels = {4, 4};
  a.d_n = 4;
  return a;
}

inline DomainDataset toy(std::size_t classes, std::size_t count, std::uint64_t seed,
                         std::size_t side = 16, const std::string& name = "toy") {
  Rng rng(seed);
  return make_toy_dataset(ToySpec{classes, count, side, side, 1}, rng, name);
}

inline TrainConfig quick_config(std::size_t K = 1, std::uint64_t seed = 7) {
  TrainConfig c;
  c.K = K;
  c.T_gen = 5;
  c.T_task = 5;
  c.N = 4;
  c.lr_task = 3e-3;
  c.lr_gen = 3e-3;
  c.weights = {20.0, 0.1, 0.1};
  c.seed = seed;
  c.probe_size = 16;
  return c;
}

inline bool same_params(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].var.value().values() != b[i].var.value().values()) return false;
  }
  return true;
}

}  // namespace pden::test

#endif  // PDEN_TESTS_COMMON_HPP
