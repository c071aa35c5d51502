#ifndef PDEN_CONFIG_HPP
#define PDEN_CONFIG_HPP

// Declarative run configuration. Parsing is strict: unknown keys and wrong
// types are errors, and to_json(parse(j)) reproduces every field.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pden/harness.hpp"
#include "pden/idx.hpp"
#include "pden/toy.hpp"

namespace pden {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Arm { erm, pden, sweep, fewshot, gradcheck };

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::erm: return "erm";
    case Arm::pden: return "pden";
    case Arm::sweep: return "sweep";
    case Arm::fewshot: return "fewshot";
    case Arm::gradcheck: return "gradcheck";
  }
  return "?";
}

inline Arm parse_arm(const std::string& s) {
  for (Arm a : {Arm::erm, Arm::pden, Arm::sweep, Arm::fewshot, Arm::gradcheck})
    if (s == arm_name(a)) return a;
  throw ConfigError("unknown arm '" + s + "' (expected erm|pden|sweep|fewshot|gradcheck)");
}

/// Source data. "toy" renders the synthetic set; "idx" reads IDX files and
/// conforms them to (channels, height, width) when those are nonzero.
struct DataConfig {
  std::string kind = "toy";
  std::size_t classes = 10;
  std::size_t train_count = 1000;
  std::size_t test_count = 1000;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;
  std::string train_images, train_labels, test_images, test_labels;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct FewShotConfig {
  ShiftSpec shift{ShiftKind::speckle, 5, 0};
  std::vector<std::size_t> shots{1, 5, 10};
  std::size_t steps = 50;
  double lr = 1e-3;
  bool heads_only = false;

  friend bool operator==(const FewShotConfig&, const FewShotConfig&) = default;
};

struct SweepConfig {
  std::string param = "K";
  std::vector<double> values{1, 3, 5};

  friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct RunConfig {
  std::string run_id = "run";
  Arm arm = Arm::pden;
  std::string out_dir;  // empty: $PDEN_OUT_DIR/<run_id>, else runs/<run_id>
  DataConfig data;
  std::vector<ShiftSpec> benchmark = default_benchmark();
  Architecture model;  // image geometry and classes are taken from the data
  TrainConfig train;
  FewShotConfig fewshot;
  SweepConfig sweep;
  bool export_features = true;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void get_size(const std::string& key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(where_ + "." + key + ": expected a nonnegative integer");
    }
    out = v.get<std::size_t>();
  }

  void get_double(const std::string& key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number()) throw ConfigError(where_ + "." + key + ": expected a number");
    out = j_.at(key).get<double>();
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  const std::string& where() const { return where_; }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline ShiftSpec shift_from(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  ShiftSpec s;
  try {
    s = j.get<ShiftSpec>();
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  try {
    validate(s);
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return s;
}

}  // namespace detail

inline nlohmann::json to_json(const DataConfig& d) {
  nlohmann::json j = {{"kind", d.kind},       {"classes", d.classes}, {"train_count", d.train_count},
                      {"test_count", d.test_count}, {"height", d.height}, {"width", d.width},
                      {"channels", d.channels}};
  if (d.kind == "idx") {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["test_images"] = d.test_images;
    j["test_labels"] = d.test_labels;
  }
  return j;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json bench = nlohmann::json::array();
  for (const auto& s : c.benchmark) bench.push_back(s);
  nlohmann::json train = to_json(c.train);
  return {{"run_id", c.run_id},
          {"arm", arm_name(c.arm)},
          {"out_dir", c.out_dir},
          {"data", to_json(c.data)},
          {"benchmark", bench},
          {"model",
           {{"f_channels", c.model.f_channels},
            {"c_hidden", c.model.c_hidden},
            {"d_z", c.model.d_z},
            {"g_channels", c.model.g_channels},
            {"d_n", c.model.d_n}}},
          {"train", train},
          {"fewshot",
           {{"shift", c.fewshot.shift},
            {"shots", c.fewshot.shots},
            {"steps", c.fewshot.steps},
            {"lr", c.fewshot.lr},
            {"heads_only", c.fewshot.heads_only}}},
          {"sweep", {{"param", c.sweep.param}, {"values", c.sweep.values}}},
          {"export_features", c.export_features}};
}

inline void validate(const RunConfig& c) {
  if (c.run_id.empty() || c.run_id.find_first_of("/\\,\n") != std::string::npos) {
    throw ConfigError("run_id must be nonempty and free of '/', '\\\\', ',' and newlines");
  }
  const auto& d = c.data;
  if (d.kind != "toy" && d.kind != "idx") throw ConfigError("data.kind must be toy or idx");
  if (d.kind == "toy" && (d.classes < 2 || d.classes > kToyGlyphs)) {
    throw ConfigError("data.classes must be in 2..10 for the toy set");
  }
  if (d.kind == "toy" && (d.train_count == 0 || d.test_count == 0)) {
    throw ConfigError("data.train_count and data.test_count must be positive for the toy set");
  }
  if (d.kind == "idx" && (d.train_images.empty() || d.train_labels.empty() ||
                          d.test_images.empty() || d.test_labels.empty())) {
    throw ConfigError("data: idx source needs train_images, train_labels, test_images, test_labels");
  }
  for (const auto& s : c.benchmark) validate(s);
  try {
    Architecture a = c.model;
    a.channels = d.channels ? d.channels : 1;
    a.height = d.height ? d.height : 28;
    a.width = d.width ? d.width : 28;
    a.classes = d.classes;
    a.validate();
    c.train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (c.fewshot.shots.empty()) throw ConfigError("fewshot.shots must be nonempty");
  for (auto s : c.fewshot.shots)
    if (s == 0) throw ConfigError("fewshot.shots entries must be >= 1");
  if (!(c.fewshot.lr > 0.0)) throw ConfigError("fewshot.lr must be positive");
  try {
    parse_sweep_param(c.sweep.param);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("sweep.param: ") + e.what());
  }
  if (c.sweep.values.empty()) throw ConfigError("sweep.values must be nonempty");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  {
    detail::Reader r(j, "config");
    r.get("run_id", c.run_id);
    std::string arm = arm_name(c.arm);
    r.get("arm", arm);
    c.arm = parse_arm(arm);
    r.get("out_dir", c.out_dir);
    if (const auto* d = r.child("data")) {
      detail::Reader rd(*d, "data");
      rd.get("kind", c.data.kind);
      rd.get_size("classes", c.data.classes);
      rd.get_size("train_count", c.data.train_count);
      rd.get_size("test_count", c.data.test_count);
      rd.get_size("height", c.data.height);
      rd.get_size("width", c.data.width);
      rd.get_size("channels", c.data.channels);
      rd.get("train_images", c.data.train_images);
      rd.get("train_labels", c.data.train_labels);
      rd.get("test_images", c.data.test_images);
      rd.get("test_labels", c.data.test_labels);
    }
    if (const auto* b = r.child("benchmark")) {
      if (!b->is_array()) throw ConfigError("benchmark: expected an array");
      c.benchmark.clear();
      for (std::size_t i = 0; i < b->size(); ++i)
        c.benchmark.push_back(detail::shift_from((*b)[i], "benchmark[" + std::to_string(i) + "]"));
    }
    if (const auto* m = r.child("model")) {
      detail::Reader rm(*m, "model");
      rm.get("f_channels", c.model.f_channels);
      rm.get_size("c_hidden", c.model.c_hidden);
      rm.get_size("d_z", c.model.d_z);
      rm.get("g_channels", c.model.g_channels);
      rm.get_size("d_n", c.model.d_n);
    }
    if (const auto* t = r.child("train")) {
      detail::Reader rt(*t, "train");
      auto& tc = c.train;
      rt.get_size("K", tc.K);
      rt.get_size("T_gen", tc.T_gen);
      rt.get_size("T_task", tc.T_task);
      rt.get_size("N", tc.N);
      rt.get_double("w_cyc", tc.weights.w_cyc);
      rt.get_double("w_adv", tc.weights.w_adv);
      rt.get_double("w_div", tc.weights.w_div);
      rt.get_double("lr_task", tc.lr_task);
      rt.get_double("lr_gen", tc.lr_gen);
      rt.get_double("beta1", tc.beta1);
      rt.get_double("beta2", tc.beta2);
      rt.get_double("div_ceiling", tc.div_ceiling);
      rt.get("accumulate", tc.accumulate);
      rt.get("seed", tc.seed);
      rt.get_size("log_every", tc.log_every);
      rt.get_size("probe_size", tc.probe_size);
    }
    if (const auto* f = r.child("fewshot")) {
      detail::Reader rf(*f, "fewshot");
      if (const auto* s = rf.child("shift")) c.fewshot.shift = detail::shift_from(*s, "fewshot.shift");
      rf.get("shots", c.fewshot.shots);
      rf.get_size("steps", c.fewshot.steps);
      rf.get_double("lr", c.fewshot.lr);
      rf.get("heads_only", c.fewshot.heads_only);
    }
    if (const auto* s = r.child("sweep")) {
      detail::Reader rs(*s, "sweep");
      rs.get("param", c.sweep.param);
      rs.get("values", c.sweep.values);
    }
    r.get("export_features", c.export_features);
  }
  validate(c);
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of the canonical (sorted-key) echo of the config.
inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(to_json(c).dump()); }

/// Loads or renders the train/test splits named by the config and applies
/// the benchmark shifts to the test split.
inline ExperimentData load_experiment_data(const DataConfig& d, const std::vector<ShiftSpec>& shifts,
                                           std::uint64_t seed) {
  DomainDataset train, test;
  if (d.kind == "toy") {
    Rng train_rng(derive_seed(seed, "toy-train"));
    Rng test_rng(derive_seed(seed, "toy-test"));
    train = make_toy_dataset({d.classes, d.train_count, d.height, d.width, d.channels}, train_rng,
                             "source-train");
    test = make_toy_dataset({d.classes, d.test_count, d.height, d.width, d.channels}, test_rng,
                            "source");
    train.provenance = {Provenance::Kind::source, 0, seed, {}};
    test.provenance = {Provenance::Kind::source, 0, seed, {}};
  } else {
    train = load_idx(d.train_images, d.train_labels, d.train_count, d.classes, "source-train");
    test = load_idx(d.test_images, d.test_labels, d.test_count, d.classes, "source");
    if (d.channels && d.height && d.width) {
      train = conform(train, d.channels, d.height, d.width);
      test = conform(test, d.channels, d.height, d.width);
    }
  }
  std::vector<ShiftSpec> seeded = shifts;
  return make_experiment_data(std::move(train), std::move(test), seeded);
}

}  // namespace pden

#endif  // PDEN_CONFIG_HPP
