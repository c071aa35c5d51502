#ifndef PDEN_PIPELINE_HPP
#define PDEN_PIPELINE_HPP

// Progressive domain expansion:
//
//   pretrain M on S (cross-entropy)
//   for k = 1..K
//     fresh G_k, G_cyc      train with L_unseen; M's F, C, P update too
//     Ŝ_k = G_k(S)          one fresh noise vector per source image
//     pool += Ŝ_k           (or pool = {Ŝ_k} when accumulate == false)
//     retrain M             L_src on (x, x+) pairs drawn from the pool
//
// Every phase draws from its own derived seed stream, so a run with K = k0
// is exactly the first k0 iterations of any longer run with the same seed.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pden/checkpoint.hpp"
#include "pden/dataset.hpp"
#include "pden/evaluate.hpp"
#include "pden/losses.hpp"
#include "pden/models.hpp"
#include "pden/optim.hpp"
#include "pden/rng.hpp"

namespace pden {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t K = 3;
  std::size_t T_gen = 300;
  std::size_t T_task = 500;
  std::size_t N = 32;  // pairs per batch; pretraining uses 2N images
  LossWeights weights;
  double lr_task = 1e-3;
  double lr_gen = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double div_ceiling = kDefaultDivCeiling;  // <= 0 disables the clamp
  bool accumulate = true;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;
  /// Images used for the effectiveness/safety probes recorded per domain.
  std::size_t probe_size = 256;

  void validate() const {
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    if (T_gen < 1 || T_task < 1) throw std::invalid_argument("T_gen and T_task must be >= 1");
    if (N < 2) throw std::invalid_argument("N must be >= 2");
    if (!(lr_task > 0.0) || !(lr_gen > 0.0)) {
      throw std::invalid_argument("learning rates must be positive");
    }
    weights.validate();
  }

  AdamOptions task_adam() const { return {lr_task, beta1, beta2, 1e-8}; }
  AdamOptions gen_adam() const { return {lr_gen, beta1, beta2, 1e-8}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Copies the image geometry and class count of `data` into `base`.
inline Architecture architecture_for(const DomainDataset& data, Architecture base) {
  base.channels = data.channels();
  base.height = data.height();
  base.width = data.width();
  base.classes = data.classes;
  base.validate();
  return base;
}

// ------------------------------------------------------------------- logging

/// One row of the training log. Step rows carry loss terms; phase-end rows
/// additionally carry accuracies (NaN where not applicable).
struct StepRecord {
  std::string phase;  // pretrain | generator | retrain | expansion
  std::size_t k = 0;
  std::size_t step = 0;
  double total = NAN, cls = NAN, cyc = NAN, adv_generator = NAN, adv_task = NAN, div = NAN;
  double ce = NAN, nce = NAN;
  double source_acc = NAN, domain_acc = NAN;
};

inline std::string metrics_csv_header() {
  return "phase,k,step,total,cls,cyc,adv_generator,adv_task,div,ce,nce,source_acc,domain_acc\n";
}

/// Shortest text that parses back to the same double; NaN is written empty.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string to_csv_row(const StepRecord& r) {
  std::string s = r.phase + "," + std::to_string(r.k) + "," + std::to_string(r.step);
  for (double v : {r.total, r.cls, r.cyc, r.adv_generator, r.adv_task, r.div, r.ce, r.nce,
                   r.source_acc, r.domain_acc}) {
    s += "," + format_number(v);
  }
  return s + "\n";
}

/// Measurements taken when a synthetic domain is materialized.
struct ExpansionRecord {
  std::size_t k = 0;
  double source_accuracy = 0.0;     // M on S
  double synthetic_accuracy = 0.0;  // M on Ŝ_k
  double pixel_distance = 0.0;      // E|G(x,n) - x|, per pixel
  double noise_diversity = 0.0;     // E|G(x,n1) - G(x,n2)|, per pixel

  double safety_ratio() const {
    return source_accuracy > 0.0 ? synthetic_accuracy / source_accuracy : 0.0;
  }
};

struct PipelineHooks {
  std::function<void(const StepRecord&)> on_record;
  /// Called after pretraining (k = 0) and after each retrain (k >= 1).
  std::function<void(std::size_t k, const TaskModel&)> on_model;
  /// Called with each materialized synthetic domain.
  std::function<void(std::size_t k, const DomainDataset&)> on_domain;
  /// When set, a checkpoint is written after every phase.
  std::optional<std::filesystem::path> checkpoint_dir;
};

// ------------------------------------------------------------------ sampling

/// Epoch-shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t size, Rng rng) : rng_(rng), order_(size) {
    if (size == 0) throw std::invalid_argument("cannot sample from an empty dataset");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct SyntheticDomain {
  DomainDataset data;
  Generator generator;
  std::uint64_t seed = 0;
};

struct DomainPool {
  DomainDataset source;
  std::vector<SyntheticDomain> synthetic;

  std::size_t size() const { return synthetic.size(); }

  void add(SyntheticDomain domain, bool accumulate = true) {
    if (domain.data.size() != source.size() || domain.data.labels != source.labels) {
      throw std::invalid_argument("synthetic domain must be index-aligned with the source");
    }
    if (!accumulate) synthetic.clear();
    synthetic.push_back(std::move(domain));
  }
};

/// N source items (uniform, with replacement), each paired with its
/// counterpart in a synthetic domain chosen uniformly from the pool.
inline PairedBatch pair_sampler(const DomainPool& pool, std::size_t n, Rng& rng,
                                std::vector<std::size_t>* chosen_domains = nullptr) {
  if (pool.synthetic.empty()) throw std::invalid_argument("pair_sampler: pool has no synthetic domain");
  if (pool.source.empty()) throw std::invalid_argument("pair_sampler: empty source domain");
  const auto& src = pool.source;
  const std::size_t per = src.images.size() / src.size();
  PairedBatch b;
  b.x = Tensor(Shape{n, src.channels(), src.height(), src.width()});
  b.x_plus = Tensor(b.x.shape());
  b.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = rng.below(src.size());
    const std::size_t dom = rng.below(pool.synthetic.size());
    if (chosen_domains) chosen_domains->push_back(dom);
    const auto& plus = pool.synthetic[dom].data.images;
    std::copy_n(src.images.data().begin() + static_cast<std::ptrdiff_t>(idx * per), per,
                b.x.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    std::copy_n(plus.data().begin() + static_cast<std::ptrdiff_t>(idx * per), per,
                b.x_plus.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    b.y[i] = src.labels[idx];
  }
  return b;
}

// -------------------------------------------------------------------- phases

namespace detail {

inline void emit(const PipelineHooks* hooks, const StepRecord& r) {
  if (hooks && hooks->on_record) hooks->on_record(r);
}

inline bool log_step(const TrainConfig& c, std::size_t t, std::size_t total) {
  return c.log_every && ((t + 1) % c.log_every == 0 || t + 1 == total);
}

}  // namespace detail

struct PretrainResult {
  TaskModel model;
  double train_accuracy = 0.0;
  std::vector<double> losses;
};

/// Cross-entropy training of a freshly initialized M on S for T_task steps.
inline PretrainResult pretrain(const DomainDataset& source, const Architecture& base,
                               const TrainConfig& config, const PipelineHooks* hooks = nullptr) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("pretrain: empty dataset");
  const Architecture arch = architecture_for(source, base);
  Rng init(derive_seed(config.seed, "task-init"));
  PretrainResult r{TaskModel(arch, init), 0.0, {}};
  ParamList params = r.model.params();
  Adam opt(config.task_adam());
  BatchSampler sampler(source.size(), Rng(derive_seed(config.seed, "pretrain-batches")));
  for (std::size_t t = 0; t < config.T_task; ++t) {
    const auto idx = sampler.next(2 * config.N);
    const auto labels = source.batch_labels(idx);
    Var yhat = r.model.classify(r.model.extract(Var::constant(source.batch_images(idx))));
    Var loss = cross_entropy(yhat, labels);
    if (!std::isfinite(loss.item())) throw TrainingError("pretrain: loss is not finite");
    zero_grad(params);
    backward(loss);
    opt.step(params);
    r.losses.push_back(loss.item());
    if (detail::log_step(config, t, config.T_task)) {
      StepRecord rec{"pretrain", 0, t + 1};
      rec.total = rec.ce = loss.item();
      detail::emit(hooks, rec);
    }
  }
  r.train_accuracy = evaluate(r.model, source).accuracy;
  return r;
}

struct GeneratorPhaseResult {
  Generator generator;
  CycleGenerator cycle;
  std::vector<UnseenLoss> last;  // final step's breakdown (single element)
};

/// Trains a fresh G_k (and its G_cyc) against M with L_unseen for T_gen
/// steps. M's parameters are updated in the same steps: F, C by L_cls and
/// F, P by the task half of the adversarial term.
inline GeneratorPhaseResult train_generator(TaskModel& model, const DomainDataset& source,
                                            const TrainConfig& config, std::size_t k,
                                            const PipelineHooks* hooks = nullptr) {
  config.validate();
  Rng g_init(derive_seed(config.seed, "generator-init", k));
  Rng c_init(derive_seed(config.seed, "cycle-init", k));
  GeneratorPhaseResult r{Generator(model.arch(), g_init), CycleGenerator(model.arch(), c_init), {}};
  ParamList gen_params = r.generator.params();
  for (auto& p : r.cycle.params()) gen_params.push_back({"cyc." + p.name, p.var});
  ParamList task_params = model.params();
  Adam gen_opt(config.gen_adam());
  Adam task_opt(config.task_adam());
  BatchSampler sampler(source.size(), Rng(derive_seed(config.seed, "generator-batches", k)));
  Rng noise(derive_seed(config.seed, "generator-noise", k));

  for (std::size_t t = 0; t < config.T_gen; ++t) {
    const auto idx = sampler.next(config.N);
    const auto labels = source.batch_labels(idx);
    UnseenLoss loss = loss_unseen(source.batch_images(idx), labels, model, r.generator, r.cycle,
                                  config.weights, noise, config.div_ceiling);
    if (!std::isfinite(loss.total.item())) {
      throw TrainingError("generator phase " + std::to_string(k) + ": loss is NaN at step " +
                          std::to_string(t));
    }
    zero_grad(gen_params);
    zero_grad(task_params);
    backward(loss.total);
    gen_opt.step(gen_params);
    task_opt.step(task_params);
    if (detail::log_step(config, t, config.T_gen)) {
      StepRecord rec{"generator", k, t + 1};
      rec.total = loss.total.item();
      rec.cls = loss.cls;
      rec.cyc = loss.cyc;
      rec.adv_generator = loss.adv_generator;
      rec.adv_task = loss.adv_task;
      rec.div = loss.div;
      detail::emit(hooks, rec);
    }
    if (t + 1 == config.T_gen) r.last.push_back(std::move(loss));
  }
  return r;
}

/// Ŝ = {(G(x_i, n_i), y_i)} with n_i drawn in order from Rng(seed).
inline DomainDataset materialize_domain(const Generator& g, const DomainDataset& source,
                                        std::uint64_t seed, std::size_t k = 0) {
  if (source.empty()) throw std::invalid_argument("materialize_domain: empty source");
  Rng rng(seed);
  DomainDataset out;
  out.classes = source.classes;
  out.labels = source.labels;
  out.name = "synthetic-" + std::to_string(k);
  out.provenance = {Provenance::Kind::synthetic, k, seed, {}};
  out.images = Tensor(source.images.shape());
  for_each_chunk(source, [&](std::size_t begin, const Var& x) {
    Var xhat = g(x, Var::constant(g.sample_noise(rng, x.dim(0))));
    std::copy(xhat.value().data().begin(), xhat.value().data().end(),
              out.images.data().begin() + static_cast<std::ptrdiff_t>(begin * (out.images.size() / out.size())));
  });
  return out;
}

struct RetrainResult {
  std::vector<double> losses;
};

/// T_task steps of L_src on pairs drawn from the pool.
inline RetrainResult retrain_task(TaskModel& model, const DomainPool& pool,
                                  const TrainConfig& config, std::size_t k,
                                  const PipelineHooks* hooks = nullptr) {
  config.validate();
  if (pool.synthetic.empty()) throw std::invalid_argument("retrain_task: pool has no synthetic domain");
  ParamList params = model.params();
  Adam opt(config.task_adam());
  Rng rng(derive_seed(config.seed, "retrain-batches", k));
  RetrainResult r;
  for (std::size_t t = 0; t < config.T_task; ++t) {
    PairedBatch batch = pair_sampler(pool, config.N, rng);
    SrcLoss loss = loss_src(batch, model);
    if (!std::isfinite(loss.total.item())) {
      throw TrainingError("retrain " + std::to_string(k) + ": loss is NaN at step " +
                          std::to_string(t));
    }
    zero_grad(params);
    backward(loss.total);
    opt.step(params);
    r.losses.push_back(loss.total.item());
    if (detail::log_step(config, t, config.T_task)) {
      StepRecord rec{"retrain", k, t + 1};
      rec.total = loss.total.item();
      rec.ce = loss.ce;
      rec.nce = loss.nce;
      detail::emit(hooks, rec);
    }
  }
  return r;
}

/// Effectiveness probes on the first `probe` source images.
inline std::pair<double, double> generator_distances(const Generator& g, const DomainDataset& source,
                                                     std::size_t probe, std::uint64_t seed) {
  const DomainDataset head = source.head(std::max<std::size_t>(probe, 1));
  Rng rng(seed);
  Var x = Var::constant(head.images);
  Tensor a = g(x, Var::constant(g.sample_noise(rng, head.size()))).value();
  Tensor b = g(x, Var::constant(g.sample_noise(rng, head.size()))).value();
  return {mean_pixel_distance(a, head.images), mean_pixel_distance(a, b)};
}

// ------------------------------------------------------------------ full run

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"K", c.K},
          {"T_gen", c.T_gen},
          {"T_task", c.T_task},
          {"N", c.N},
          {"w_cyc", c.weights.w_cyc},
          {"w_adv", c.weights.w_adv},
          {"w_div", c.weights.w_div},
          {"lr_task", c.lr_task},
          {"lr_gen", c.lr_gen},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"div_ceiling", c.div_ceiling},
          {"accumulate", c.accumulate},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"probe_size", c.probe_size}};
}

inline Checkpoint make_checkpoint(const TaskModel& model, const TrainConfig& config,
                                  const std::string& phase, std::size_t k, std::size_t steps,
                                  const Generator* g = nullptr) {
  Checkpoint ck;
  ck.manifest = {{"format", "PDEN-CKPT-1"},
                 {"architecture", model.arch()},
                 {"seed", config.seed},
                 {"phase", phase},
                 {"k", k},
                 {"step", steps},
                 {"weights",
                  {{"w_cls", 1.0},
                   {"w_cyc", config.weights.w_cyc},
                   {"w_adv", config.weights.w_adv},
                   {"w_div", config.weights.w_div}}},
                 {"train", to_json(config)}};
  ck.add("task/", model.params());
  if (g) ck.add("generator/", g->params());
  return ck;
}

struct PdenResult {
  TaskModel model;
  TaskModel pretrained;
  double pretrain_accuracy = 0.0;
  DomainPool pool;
  std::vector<ExpansionRecord> expansions;
};

inline PdenResult run_pden(const DomainDataset& source, const Architecture& base,
                           const TrainConfig& config, const PipelineHooks* hooks = nullptr) {
  config.validate();
  source.validate();
  std::size_t steps = 0;
  auto flush = [&](const TaskModel& m, const std::string& phase, std::size_t k,
                   const Generator* g) {
    if (!hooks || !hooks->checkpoint_dir) return;
    const std::string name = phase + "-k" + std::to_string(k) + ".ckpt";
    save_checkpoint(*hooks->checkpoint_dir / name, make_checkpoint(m, config, phase, k, steps, g));
  };

  PretrainResult pre = pretrain(source, base, config, hooks);
  steps += config.T_task;
  {
    StepRecord rec{"pretrain", 0, config.T_task};
    rec.source_acc = pre.train_accuracy;
    detail::emit(hooks, rec);
  }
  flush(pre.model, "pretrain", 0, nullptr);
  if (hooks && hooks->on_model) hooks->on_model(0, pre.model);

  PdenResult result{pre.model, pre.model, pre.train_accuracy, DomainPool{source, {}}, {}};
  TaskModel& model = result.model;
  std::size_t k = 1;
  try {
    for (; k <= config.K; ++k) {
      auto phase = train_generator(model, source, config, k, hooks);
      steps += config.T_gen;
      const std::uint64_t mat_seed = derive_seed(config.seed, "materialize", k);
      DomainDataset domain = materialize_domain(phase.generator, source, mat_seed, k);

      ExpansionRecord ex;
      ex.k = k;
      ex.source_accuracy = evaluate(model, source).accuracy;
      ex.synthetic_accuracy = evaluate(model, domain).accuracy;
      std::tie(ex.pixel_distance, ex.noise_diversity) = generator_distances(
          phase.generator, source, config.probe_size, derive_seed(config.seed, "probe", k));
      result.expansions.push_back(ex);
      {
        StepRecord rec{"expansion", k, steps};
        rec.source_acc = ex.source_accuracy;
        rec.domain_acc = ex.synthetic_accuracy;
        detail::emit(hooks, rec);
      }
      flush(model, "generator", k, &phase.generator);
      if (hooks && hooks->on_domain) hooks->on_domain(k, domain);

      result.pool.add({std::move(domain), std::move(phase.generator), mat_seed}, config.accumulate);
      retrain_task(model, result.pool, config, k, hooks);
      steps += config.T_task;
      {
        StepRecord rec{"retrain", k, steps};
        rec.source_acc = evaluate(model, source).accuracy;
        detail::emit(hooks, rec);
      }
      flush(model, "retrain", k, nullptr);
      if (hooks && hooks->on_model) hooks->on_model(k, model);
    }
  } catch (...) {
    if (hooks && hooks->checkpoint_dir) {
      try {
        save_checkpoint(*hooks->checkpoint_dir / ("abort-k" + std::to_string(k) + ".ckpt"),
                        make_checkpoint(model, config, "abort", k, steps));
      } catch (...) {
      }
    }
    throw;
  }
  return result;
}

}  // namespace pden

#endif  // PDEN_PIPELINE_HPP
