#ifndef PDEN_RUNNER_HPP
#define PDEN_RUNNER_HPP

// Runs a configured arm end to end and writes its artifacts:
//
//   metrics.csv      per-domain accuracies (run_id,arm,domain,...)
//   train_log.csv    loss terms and phase-end accuracies
//   expansions.csv   per-domain safety/effectiveness probes (pden)
//   sweep.csv        one block of metrics rows per swept value (sweep)
//   fewshot.csv      accuracy vs shots on the held-out shift (fewshot)
//   gradcheck.csv    worst relative error per op/loss (gradcheck)
//   features.csv     2-D PCA of F(x) per domain
//   grids/*.pgm      image grids of the source and every synthetic domain
//   checkpoints/     one checkpoint per phase plus model.ckpt
//   manifest.json    config echo, config hash, seed, artifact checksums

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pden/config.hpp"
#include "pden/gradcheck_suite.hpp"

namespace pden {

inline constexpr const char* kOutDirEnv = "PDEN_OUT_DIR";

/// --out wins, then config.out_dir, then $PDEN_OUT_DIR/<run_id>, then
/// runs/<run_id>.
inline std::filesystem::path resolve_out_dir(const RunConfig& c,
                                             const std::optional<std::string>& cli_out) {
  if (cli_out && !cli_out->empty()) return *cli_out;
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return std::filesystem::path(env) / c.run_id;
  return std::filesystem::path("runs") / c.run_id;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes files under a run directory and remembers their checksums.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& rel, const std::string& bytes) {
    detail::write_file(root_ / rel, bytes);
    artifacts_[rel] = fnv1a_hex(bytes);
  }

  /// Registers a file written by someone else.
  void adopt(const std::string& rel) { artifacts_[rel] = fnv1a_hex(read_bytes(root_ / rel)); }

  void write_manifest(const RunConfig& c, const nlohmann::json& summary) {
    nlohmann::json arts = nlohmann::json::object();
    for (const auto& [k, v] : artifacts_) arts[k] = v;
    nlohmann::json m = {{"format", "pden-run-1"},
                        {"run_id", c.run_id},
                        {"arm", arm_name(c.arm)},
                        {"seed", c.train.seed},
                        {"config_hash", config_hash(c)},
                        {"config", to_json(c)},
                        {"artifacts", arts},
                        {"summary", summary}};
    detail::write_file(root_ / "manifest.json", m.dump(2) + "\n");
  }

  const std::map<std::string, std::string>& artifacts() const { return artifacts_; }

 private:
  std::filesystem::path root_;
  std::map<std::string, std::string> artifacts_;
};

inline std::string expansions_csv(const std::vector<ExpansionRecord>& ex) {
  std::string s = "k,source_accuracy,synthetic_accuracy,safety_ratio,pixel_distance,noise_diversity\n";
  for (const auto& e : ex) {
    s += std::to_string(e.k) + "," + format_number(e.source_accuracy) + "," +
         format_number(e.synthetic_accuracy) + "," + format_number(e.safety_ratio()) + "," +
         format_number(e.pixel_distance) + "," + format_number(e.noise_diversity) + "\n";
  }
  return s;
}

inline std::string gradcheck_csv(const std::vector<GradCheckReport>& reps) {
  std::string s = "name,group,instances,worst_relative_error,passed\n";
  for (const auto& r : reps) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", r.worst);
    s += r.name + "," + r.group + "," + std::to_string(r.instances) + "," + buf + "," +
         (r.passed ? "1" : "0") + "\n";
  }
  return s;
}

inline constexpr std::size_t kGridImages = 64;

inline std::string grid_of(const DomainDataset& ds) {
  return encode_pgm_grid(slice_rows(ds.images, 0, std::min(ds.size(), kGridImages)), 8);
}

struct RunResult {
  std::filesystem::path out_dir;
  nlohmann::json summary;
  bool ok = true;  // false when a check-type arm found violations
};

namespace detail {

inline Architecture model_arch(const RunConfig& c, const DomainDataset& train) {
  return architecture_for(train, c.model);
}

struct PdenArtifacts {
  ArmComparison cmp;
  std::optional<TaskModel> final_model;
  std::vector<DomainDataset> synthetic;
};

inline PdenArtifacts run_pden_arm(const RunConfig& c, const ExperimentData& data,
                                  ArtifactWriter& w, std::ostream& log) {
  PdenArtifacts out;
  std::string train_log = metrics_csv_header();
  PipelineHooks hooks;
  hooks.checkpoint_dir = w.root() / "checkpoints";
  hooks.on_record = [&](const StepRecord& r) {
    train_log += to_csv_row(r);
    if (r.phase == "expansion" || (r.phase == "retrain" && !std::isnan(r.source_acc))) {
      log << r.phase << " k=" << r.k << " source_acc=" << format_number(r.source_acc);
      if (!std::isnan(r.domain_acc)) log << " synthetic_acc=" << format_number(r.domain_acc);
      log << "\n";
    }
  };
  hooks.on_domain = [&](std::size_t k, const DomainDataset& d) {
    out.synthetic.push_back(d);
    w.write("grids/synthetic-k" + std::to_string(k) + ".pgm", grid_of(d));
  };
  hooks.on_model = [&](std::size_t k, const TaskModel& m) {
    if (k == c.train.K) out.final_model = m;
  };
  out.cmp = compare_arms(data, model_arch(c, data.train), c.train, c.run_id, {}, hooks);
  w.write("train_log.csv", train_log);
  w.write("expansions.csv", expansions_csv(out.cmp.expansions));
  for (const auto& e : std::filesystem::directory_iterator(w.root() / "checkpoints")) {
    w.adopt("checkpoints/" + e.path().filename().string());
  }
  return out;
}

inline nlohmann::json scores_json(const ArmScores& s) {
  return {{"source", s.source}, {"mean_shifted", s.mean_shifted()}, {"shifted", s.shifted}};
}

inline void export_all_features(const RunConfig& c, const TaskModel& m, const ExperimentData& data,
                                const std::vector<DomainDataset>& synthetic, ArtifactWriter& w) {
  if (!c.export_features) return;
  std::vector<DomainDataset> domains{data.test};
  for (const auto& d : synthetic) domains.push_back(d.head(std::min<std::size_t>(d.size(), data.test.size())));
  for (const auto& d : data.benchmark) domains.push_back(d);
  export_features(m, data.test, domains, w.root() / "features.csv");
  w.adopt("features.csv");
}

}  // namespace detail

/// Runs the configured arm into `out_dir`. Progress goes to `log`.
inline RunResult run(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  validate(c);
  ArtifactWriter w(out_dir);
  RunResult result{out_dir, nlohmann::json::object(), true};

  if (c.arm == Arm::gradcheck) {
    const auto reps = run_gradcheck_suite();
    for (const auto& r : reps) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%-20s %-5s worst=%.3e %s\n", r.name.c_str(), r.group.c_str(),
                    r.worst, r.passed ? "ok" : "FAIL");
      log << buf;
      result.ok = result.ok && r.passed;
    }
    w.write("gradcheck.csv", gradcheck_csv(reps));
    result.summary = {{"passed", result.ok}, {"items", reps.size()}};
    w.write_manifest(c, result.summary);
    return result;
  }

  const ExperimentData data = load_experiment_data(c.data, c.benchmark, c.train.seed);
  w.write("grids/source.pgm", grid_of(data.train));
  w.write("data/source-train.json", dataset_manifest(data.train).dump(2) + "\n");
  log << "source: " << data.train.size() << " train, " << data.test.size() << " test, "
      << data.benchmark.size() << " shifted domains\n";

  if (c.arm == Arm::erm) {
    std::string train_log = metrics_csv_header();
    PipelineHooks hooks;
    hooks.on_record = [&](const StepRecord& r) { train_log += to_csv_row(r); };
    auto pre = pretrain(data.train, detail::model_arch(c, data.train), c.train, &hooks);
    StepRecord end{"pretrain", 0, c.train.T_task};
    end.source_acc = pre.train_accuracy;
    train_log += to_csv_row(end);
    std::vector<MetricsRow> rows;
    MetricsRow proto{c.run_id, "erm", "", "", 0, 0.0, 0, c.train.seed, 0,
                     c.train.weights.w_adv, c.train.weights.w_cyc, c.train.weights.w_div};
    const auto s = score(pre.model, data, &rows, proto);
    w.write("train_log.csv", train_log);
    w.write("metrics.csv", to_csv(rows));
    w.write("checkpoints/model.ckpt",
            serialize_checkpoint(make_checkpoint(pre.model, c.train, "pretrain", 0, c.train.T_task)));
    detail::export_all_features(c, pre.model, data, {}, w);
    result.summary = {{"erm", detail::scores_json(s)}, {"train_accuracy", pre.train_accuracy}};
    log << "erm: source=" << format_number(s.source) << " mean_shifted=" << format_number(s.mean_shifted()) << "\n";
  } else if (c.arm == Arm::pden || c.arm == Arm::fewshot) {
    auto art = detail::run_pden_arm(c, data, w, log);
    w.write("metrics.csv", to_csv(art.cmp.rows));
    w.write("checkpoints/model.ckpt",
            read_bytes(w.root() / "checkpoints" / ("retrain-k" + std::to_string(c.train.K) + ".ckpt")));
    detail::export_all_features(c, *art.final_model, data, art.synthetic, w);
    result.summary = {{"erm", detail::scores_json(art.cmp.erm)},
                      {"pden", detail::scores_json(art.cmp.pden)},
                      {"delta_mean_shifted", art.cmp.delta_mean_shifted()},
                      {"delta_source", art.cmp.delta_source()}};
    log << "erm:  source=" << format_number(art.cmp.erm.source)
        << " mean_shifted=" << format_number(art.cmp.erm.mean_shifted()) << "\n"
        << "pden: source=" << format_number(art.cmp.pden.source)
        << " mean_shifted=" << format_number(art.cmp.pden.mean_shifted()) << "\n";
    if (c.arm == Arm::fewshot) {
      ShiftSpec shift = c.fewshot.shift;
      const DomainDataset pool = apply_shift(data.train, shift);
      const DomainDataset target = apply_shift(data.test, shift);
      std::vector<std::string> warnings;
      const auto curve = few_shot_curve(*art.final_model, pool, target, c.fewshot.shots,
                                        {c.fewshot.steps, c.fewshot.lr, c.fewshot.heads_only}, &warnings);
      for (const auto& wmsg : warnings) log << "warning: " << wmsg << "\n";
      std::string csv = "run_id,arm,domain,shots,steps,heads_only,accuracy,n,seed\n";
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& p : curve) {
        csv += c.run_id + ",pden," + target.name + "," + std::to_string(p.shots) + "," +
               std::to_string(p.shots ? c.fewshot.steps : 0) + "," + (c.fewshot.heads_only ? "1" : "0") +
               "," + format_number(p.accuracy) + "," + std::to_string(p.n) + "," +
               std::to_string(c.train.seed) + "\n";
        pts.push_back({{"shots", p.shots}, {"accuracy", p.accuracy}});
        log << "fewshot " << target.name << " shots=" << p.shots << " acc=" << format_number(p.accuracy) << "\n";
      }
      w.write("fewshot.csv", csv);
      result.summary["fewshot"] = pts;
    }
  } else if (c.arm == Arm::sweep) {
    std::vector<double> values = c.sweep.values;
    if (const auto dropped = dedupe_values(values)) {
      log << "warning: dropped " << dropped << " duplicate sweep value(s)\n";
    }
    const auto param = parse_sweep_param(c.sweep.param);
    const auto sw = sweep(data, detail::model_arch(c, data.train), c.train, param, values, c.run_id);
    w.write("sweep.csv", to_csv(sw.rows));
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& [v, s] : sw.points) {
      pts.push_back({{"value", v}, {"pden", detail::scores_json(s)}});
      log << "sweep " << c.sweep.param << "=" << format_number(v)
          << " mean_shifted=" << format_number(s.mean_shifted()) << " source=" << format_number(s.source) << "\n";
    }
    result.summary = {{"param", c.sweep.param}, {"erm", detail::scores_json(sw.erm)}, {"points", pts}};
  }
  w.write_manifest(c, result.summary);
  return result;
}

// ----------------------------------------------------------------- eval

/// Data spec for `eval`: which splits and shifted domains to score.
struct EvalSpec {
  DataConfig data;
  std::vector<ShiftSpec> benchmark;
  std::uint64_t seed = 0;
  bool include_train = false;
};

inline EvalSpec parse_eval_spec(const nlohmann::json& j) {
  EvalSpec s;
  detail::Reader r(j, "data spec");
  if (const auto* d = r.child("data")) {
    // Reuse the run-config data parser for identical semantics.
    RunConfig tmp = parse_run_config(nlohmann::json{{"data", *d}});
    s.data = tmp.data;
  }
  if (const auto* b = r.child("benchmark")) {
    if (!b->is_array()) throw ConfigError("benchmark: expected an array");
    for (std::size_t i = 0; i < b->size(); ++i)
      s.benchmark.push_back(detail::shift_from((*b)[i], "benchmark[" + std::to_string(i) + "]"));
  }
  r.get("seed", s.seed);
  r.get("include_train", s.include_train);
  return s;
}

inline EvalSpec load_eval_spec(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open data spec '" + p.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("data spec is not valid JSON: ") + e.what());
  }
  return parse_eval_spec(j);
}

inline std::string metrics_records_csv(const std::vector<MetricsRecord>& recs) {
  std::string s = "domain,accuracy,correct,n,model_id,config_hash\n";
  for (const auto& r : recs) {
    s += r.domain + "," + format_number(r.accuracy) + "," + std::to_string(r.correct) + "," +
         std::to_string(r.n) + "," + r.model_id + "," + r.config_hash + "\n";
  }
  return s;
}

/// Scores a checkpoint on every domain of the spec (one record per domain).
inline std::vector<MetricsRecord> evaluate_checkpoint(const std::filesystem::path& ckpt,
                                                      const EvalSpec& spec) {
  const std::string bytes = read_bytes(ckpt);
  const Checkpoint ck = parse_checkpoint(bytes);
  const TaskModel model = task_model_from(ck);
  const ExperimentData data = load_experiment_data(spec.data, spec.benchmark, spec.seed);
  const std::string model_id = fnv1a_hex(bytes);
  const std::string cfg = ck.manifest.contains("train") ? fnv1a_hex(ck.manifest["train"].dump()) : "";
  std::vector<MetricsRecord> out;
  auto add = [&](const DomainDataset& ds) {
    auto r = evaluate(model, ds);
    r.model_id = model_id;
    r.config_hash = cfg;
    out.push_back(r);
  };
  if (spec.include_train) add(data.train);
  add(data.test);
  for (const auto& d : data.benchmark) add(d);
  return out;
}

}  // namespace pden

#endif  // PDEN_RUNNER_HPP
