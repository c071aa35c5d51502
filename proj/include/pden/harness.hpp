#ifndef PDEN_HARNESS_HPP
#define PDEN_HARNESS_HPP

// Experiment harness: ERM-vs-PDEN comparisons, hyperparameter sweeps,
// feature-space export and few-shot adaptation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pden/evaluate.hpp"
#include "pden/pipeline.hpp"
#include "pden/shifts.hpp"

namespace pden {

struct ExperimentData {
  DomainDataset train;                  // source domain S
  DomainDataset test;                   // held-out source split
  std::vector<DomainDataset> benchmark; // shifted copies of `test`
};

inline ExperimentData make_experiment_data(DomainDataset train, DomainDataset test,
                                           const std::vector<ShiftSpec>& shifts) {
  ExperimentData d{std::move(train), std::move(test), {}};
  d.train.validate();
  d.test.validate();
  for (const auto& s : shifts) d.benchmark.push_back(apply_shift(d.test, s));
  return d;
}

// ------------------------------------------------------------ metrics rows

/// One line of the metrics CSV.
struct MetricsRow {
  std::string run_id;
  std::string arm;
  std::string domain;
  std::string shift_kind;  // "none" for the source split, "mean" for aggregates
  int severity = 0;
  double accuracy = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::size_t K = 0;
  double w_adv = 0.0, w_cyc = 0.0, w_div = 0.0;
};

inline std::string metrics_rows_header() {
  return "run_id,arm,domain,shift_kind,severity,accuracy,n,seed,K,w_adv,w_cyc,w_div\n";
}

inline std::string to_csv(const MetricsRow& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.arm << ',' << r.domain << ',' << r.shift_kind << ',' << r.severity
     << ',' << format_number(r.accuracy) << ',' << r.n << ',' << r.seed << ',' << r.K << ','
     << format_number(r.w_adv) << ',' << format_number(r.w_cyc) << ','
     << format_number(r.w_div) << '\n';
  return os.str();
}

inline std::string to_csv(std::span<const MetricsRow> rows) {
  std::string out = metrics_rows_header();
  for (const auto& r : rows) out += to_csv(r);
  return out;
}

/// Accuracy on the source test split and on every benchmark domain.
struct ArmScores {
  double source = 0.0;
  std::vector<double> shifted;

  double mean_shifted() const {
    if (shifted.empty()) return 0.0;
    double s = 0.0;
    for (double v : shifted) s += v;
    return s / static_cast<double>(shifted.size());
  }
};

inline ArmScores score(const TaskModel& model, const ExperimentData& data,
                       std::vector<MetricsRow>* rows = nullptr, const MetricsRow& proto = {}) {
  ArmScores s;
  auto record = [&](const DomainDataset& ds, const MetricsRecord& m) {
    if (!rows) return;
    MetricsRow r = proto;
    r.domain = ds.name;
    r.accuracy = m.accuracy;
    r.n = m.n;
    if (ds.provenance.kind == Provenance::Kind::shifted) {
      r.shift_kind = shift_name(ds.provenance.shift.kind);
      r.severity = ds.provenance.shift.severity;
    } else {
      r.shift_kind = "none";
    }
    rows->push_back(r);
  };
  const auto src = evaluate(model, data.test);
  s.source = src.accuracy;
  record(data.test, src);
  for (const auto& ds : data.benchmark) {
    const auto m = evaluate(model, ds);
    s.shifted.push_back(m.accuracy);
    record(ds, m);
  }
  if (rows && !data.benchmark.empty()) {
    MetricsRow r = proto;
    r.domain = "mean_shifted";
    r.shift_kind = "mean";
    r.accuracy = s.mean_shifted();
    r.n = data.test.size() * data.benchmark.size();
    rows->push_back(r);
  }
  return s;
}

// ------------------------------------------------------------ arm comparison

struct ArmComparison {
  ArmScores erm;
  ArmScores pden;
  /// PDEN arm scores after each expansion k in `record_k` (prefix runs).
  std::map<std::size_t, ArmScores> pden_at_k;
  std::vector<MetricsRow> rows;
  std::vector<ExpansionRecord> expansions;
  double delta_mean_shifted() const { return pden.mean_shifted() - erm.mean_shifted(); }
  double delta_source() const { return pden.source - erm.source; }
};

/// Runs ERM (pretraining only) and PDEN from the same seed on the same data.
/// The ERM arm is the pretrained model of the PDEN run, so the two arms
/// share initialization, batches and step counts up to the first expansion.
/// With K == 0 both arms are the pretrained model.
inline ArmComparison compare_arms(const ExperimentData& data, const Architecture& arch,
                                  TrainConfig config, const std::string& run_id,
                                  const std::vector<std::size_t>& record_k = {},
                                  PipelineHooks hooks = {}) {
  ArmComparison out;
  MetricsRow proto{run_id, "erm", "", "", 0, 0.0, 0, config.seed, 0,
                   config.weights.w_adv, config.weights.w_cyc, config.weights.w_div};
  if (config.K == 0) {
    TrainConfig pre_cfg = config;
    pre_cfg.K = 1;
    auto pre = pretrain(data.train, arch, pre_cfg, &hooks);
    out.erm = score(pre.model, data, &out.rows, proto);
    proto.arm = "pden";
    out.pden = score(pre.model, data, &out.rows, proto);
    return out;
  }
  auto user_on_model = hooks.on_model;
  hooks.on_model = [&](std::size_t k, const TaskModel& m) {
    if (user_on_model) user_on_model(k, m);
    if (k == 0) {
      proto.arm = "erm";
      proto.K = 0;
      out.erm = score(m, data, &out.rows, proto);
    } else if (std::find(record_k.begin(), record_k.end(), k) != record_k.end() && k != config.K) {
      MetricsRow p = proto;
      p.arm = "pden";
      p.K = k;
      out.pden_at_k[k] = score(m, data, &out.rows, p);
    }
  };
  auto result = run_pden(data.train, arch, config, &hooks);
  proto.arm = "pden";
  proto.K = config.K;
  out.pden = score(result.model, data, &out.rows, proto);
  out.pden_at_k[config.K] = out.pden;
  out.expansions = result.expansions;
  return out;
}

// -------------------------------------------------------------------- sweeps

enum class SweepParam { K, w_adv, w_cyc, w_div };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "K") return SweepParam::K;
  if (s == "w_adv") return SweepParam::w_adv;
  if (s == "w_cyc") return SweepParam::w_cyc;
  if (s == "w_div") return SweepParam::w_div;
  throw std::invalid_argument("unknown sweep parameter '" + s + "' (expected K|w_adv|w_cyc|w_div)");
}

inline const char* sweep_param_name(SweepParam p) {
  switch (p) {
    case SweepParam::K: return "K";
    case SweepParam::w_adv: return "w_adv";
    case SweepParam::w_cyc: return "w_cyc";
    case SweepParam::w_div: return "w_div";
  }
  return "?";
}

/// Removes repeated values, keeping first occurrences in order. Returns the
/// number of duplicates dropped.
inline std::size_t dedupe_values(std::vector<double>& values) {
  std::vector<double> out;
  for (double v : values)
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  const std::size_t dropped = values.size() - out.size();
  values = std::move(out);
  return dropped;
}

struct SweepResult {
  std::vector<MetricsRow> rows;
  /// value -> PDEN arm scores
  std::vector<std::pair<double, ArmScores>> points;
  ArmScores erm;
};

/// One PDEN arm per value under a shared seed. K sweeps run once with the
/// largest K and read the intermediate models, which equal the shorter runs.
inline SweepResult sweep(const ExperimentData& data, const Architecture& arch,
                         const TrainConfig& base, SweepParam param, std::vector<double> values,
                         const std::string& run_id) {
  if (values.empty()) throw std::invalid_argument("sweep: empty value list");
  dedupe_values(values);
  SweepResult out;
  if (param == SweepParam::K) {
    std::vector<std::size_t> ks;
    for (double v : values) {
      if (v < 1 || v != std::floor(v)) throw std::invalid_argument("sweep: K values must be integers >= 1");
      ks.push_back(static_cast<std::size_t>(v));
    }
    TrainConfig c = base;
    c.K = *std::max_element(ks.begin(), ks.end());
    auto cmp = compare_arms(data, arch, c, run_id, ks);
    out.rows = cmp.rows;
    out.erm = cmp.erm;
    for (auto k : ks) out.points.emplace_back(static_cast<double>(k), cmp.pden_at_k.at(k));
    return out;
  }
  bool first = true;
  for (double v : values) {
    TrainConfig c = base;
    if (param == SweepParam::w_adv) c.weights.w_adv = v;
    if (param == SweepParam::w_cyc) c.weights.w_cyc = v;
    if (param == SweepParam::w_div) c.weights.w_div = v;
    c.weights.validate();
    auto cmp = compare_arms(data, arch, c, run_id);
    for (const auto& r : cmp.rows) {
      if (r.arm == "erm" && !first) continue;
      out.rows.push_back(r);
    }
    if (first) out.erm = cmp.erm;
    first = false;
    out.points.emplace_back(v, cmp.pden);
  }
  return out;
}

// ------------------------------------------------------------- feature export

/// Two leading principal axes of the feature space.
struct PcaBasis {
  std::vector<double> mean;
  std::vector<double> axis1, axis2;
  double var1 = 0.0, var2 = 0.0;
};

namespace detail {

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major, n x n).
/// Returns eigenvalues and column eigenvectors.
inline std::pair<std::vector<double>, std::vector<double>> jacobi_eigen(std::vector<double> a,
                                                                         std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<double> evals(n);
  for (std::size_t i = 0; i < n; ++i) evals[i] = a[i * n + i];
  return {evals, v};
}

inline Tensor features_of(const TaskModel& model, const DomainDataset& ds) {
  Tensor out(Shape{ds.size(), model.arch().feature_dim()});
  for_each_chunk(ds, [&](std::size_t begin, const Var& x) {
    Var h = model.extract(x);
    std::copy(h.value().data().begin(), h.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(begin * h.dim(1)));
  });
  return out;
}

}  // namespace detail

/// Fits a 2-D PCA basis on F(x) over `fit_on`. Each axis is signed so that
/// its largest-magnitude component is positive.
inline PcaBasis fit_pca(const TaskModel& model, const DomainDataset& fit_on) {
  if (fit_on.empty()) throw FormatError("fit_pca: empty dataset");
  const Tensor f = detail::features_of(model, fit_on);
  const std::size_t n = f.dim(0), d = f.dim(1);
  PcaBasis b;
  b.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) b.mean[j] += f[i * d + j] / static_cast<double>(n);
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p) {
      const double xp = f[i * d + p] - b.mean[p];
      for (std::size_t q = 0; q < d; ++q) cov[p * d + q] += xp * (f[i * d + q] - b.mean[q]);
    }
  for (auto& c : cov) c /= static_cast<double>(n);
  auto [evals, evecs] = detail::jacobi_eigen(std::move(cov), d);
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return evals[a] > evals[c]; });
  auto column = [&, &evecs = evecs](std::size_t c) {
    std::vector<double> v(d);
    std::size_t big = 0;
    for (std::size_t k = 0; k < d; ++k) {
      v[k] = evecs[k * d + c];
      if (std::abs(v[k]) > std::abs(v[big])) big = k;
    }
    if (v[big] < 0)
      for (auto& x : v) x = -x;
    return v;
  };
  b.axis1 = column(order[0]);
  b.axis2 = d > 1 ? column(order[1]) : std::vector<double>(d, 0.0);
  b.var1 = evals[order[0]];
  b.var2 = d > 1 ? evals[order[1]] : 0.0;
  return b;
}

struct FeaturePoint {
  double x1 = 0.0, x2 = 0.0;
  std::size_t label = 0;
  std::string domain;
};

inline std::vector<FeaturePoint> project_features(const TaskModel& model, const PcaBasis& basis,
                                                  const DomainDataset& ds) {
  const Tensor f = detail::features_of(model, ds);
  const std::size_t d = f.dim(1);
  std::vector<FeaturePoint> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = f[i * d + j] - basis.mean[j];
      a += c * basis.axis1[j];
      b += c * basis.axis2[j];
    }
    out.push_back({a, b, ds.labels[i], ds.name});
  }
  return out;
}

/// Writes "x1,x2,label,domain" rows for every dataset, all projected onto a
/// PCA basis fitted on `source` so the domains share axes.
inline std::size_t export_features(const TaskModel& model, const DomainDataset& source,
                                   std::span<const DomainDataset> domains,
                                   const std::filesystem::path& out_path) {
  const PcaBasis basis = fit_pca(model, source);
  std::string text = "x1,x2,label,domain\n";
  std::size_t rows = 0;
  for (const auto& ds : domains) {
    for (const auto& p : project_features(model, basis, ds)) {
      text += format_number(p.x1) + "," + format_number(p.x2) + "," + std::to_string(p.label) +
              "," + p.domain + "\n";
      ++rows;
    }
  }
  detail::write_file(out_path, text);
  return rows;
}

// ----------------------------------------------------------------- few-shot

/// The first `per_class` items of each class, in dataset order.
inline DomainDataset sample_shots(const DomainDataset& ds, std::size_t per_class) {
  std::vector<std::size_t> taken(ds.classes, 0), idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (taken[ds.labels[i]] < per_class) {
      ++taken[ds.labels[i]];
      idx.push_back(i);
    }
  }
  if (idx.empty()) throw FormatError("sample_shots: no items selected");
  return ds.subset(idx, ds.name + "-shots" + std::to_string(per_class));
}

struct FewShotResult {
  TaskModel model;
  std::vector<std::string> warnings;
};

struct FewShotOptions {
  std::size_t steps = 50;
  double lr = 1e-3;
  bool heads_only = false;  // update C and P only
};

/// Fine-tunes a copy of `model` with cross-entropy on the labelled shots
/// (full batch per step). The input model is not modified.
inline FewShotResult few_shot_adapt(const TaskModel& model, const DomainDataset& shots,
                                    const FewShotOptions& opt = {}) {
  if (shots.empty()) throw FormatError("few_shot_adapt: no shots");
  FewShotResult r{model, {}};
  const auto hist = shots.label_histogram();
  for (std::size_t c = 0; c < hist.size(); ++c) {
    if (hist[c] == 0) r.warnings.push_back("class " + std::to_string(c) + " has no shots");
  }
  if (opt.steps == 0) return r;
  ParamList params;
  if (opt.heads_only) {
    params = r.model.classifier_params();
    for (auto& p : r.model.projection_params()) params.push_back(p);
  } else {
    params = r.model.params();
  }
  Adam adam({opt.lr, 0.9, 0.999, 1e-8});
  Var x = Var::constant(shots.images);
  for (std::size_t t = 0; t < opt.steps; ++t) {
    Var feats = opt.heads_only ? detach(r.model.extract(x)) : r.model.extract(x);
    Var loss = cross_entropy(r.model.classify(feats), shots.labels);
    zero_grad(params);
    backward(loss);
    adam.step(params);
  }
  return r;
}

struct FewShotPoint {
  std::size_t shots = 0;  // per class; 0 is the unadapted model
  double accuracy = 0.0;
  std::size_t n = 0;
};

/// Accuracy on `target` after adapting with the first `s` items per class of
/// `pool`, for each s in `shots`, preceded by the zero-shot point.
inline std::vector<FewShotPoint> few_shot_curve(const TaskModel& model, const DomainDataset& pool,
                                                const DomainDataset& target,
                                                const std::vector<std::size_t>& shots,
                                                const FewShotOptions& opt = {},
                                                std::vector<std::string>* warnings = nullptr) {
  std::vector<FewShotPoint> out;
  const auto base = evaluate(model, target);
  out.push_back({0, base.accuracy, base.n});
  for (auto s : shots) {
    auto adapted = few_shot_adapt(model, sample_shots(pool, s), opt);
    if (warnings) warnings->insert(warnings->end(), adapted.warnings.begin(), adapted.warnings.end());
    const auto m = evaluate(adapted.model, target);
    out.push_back({s, m.accuracy, m.n});
  }
  return out;
}

}  // namespace pden

#endif  // PDEN_HARNESS_HPP
