#ifndef PDEN_LOSSES_HPP
#define PDEN_LOSSES_HPP

// Training objectives.
//
// Pairing convention for contrastive terms: a combined batch of 2N
// embeddings holds the N originals at rows [0, N) and their positives at
// rows [N, 2N); row i pairs with row (i + N) mod 2N.
//
// Reductions: every loss is a mean over samples/anchors except info_nce2,
// which is a sum over all 2N anchors.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pden/autodiff.hpp"
#include "pden/models.hpp"
#include "pden/rng.hpp"

namespace pden {

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kFractionCeiling = 1.0 - 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

struct LossWeights {
  double w_cyc = 20.0;
  double w_adv = 0.1;
  double w_div = 0.1;

  void validate() const {
    for (double w : {w_cyc, w_adv, w_div}) {
      if (!std::isfinite(w) || w < 0.0) {
        throw std::invalid_argument("loss weights must be finite and nonnegative");
      }
    }
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct PairedBatch {
  Tensor x;       // [N x C x H x W] source images
  Tensor x_plus;  // [N x C x H x W] positives, x_plus[i] pairs with x[i]
  std::vector<std::size_t> y;

  std::size_t pairs() const { return y.size(); }

  void validate() const {
    if (y.size() < 1 || x.rank() != 4 || x.shape() != x_plus.shape() || x.dim(0) != y.size()) {
      throw ShapeError("paired batch: x, x_plus and labels must agree in length");
    }
  }

  Tensor combined_images() const { return concat_rows(x, x_plus); }

  std::vector<std::size_t> combined_labels() const {
    std::vector<std::size_t> out(y);
    out.insert(out.end(), y.begin(), y.end());
    return out;
  }
};

/// Mean of -log(yhat[i, y[i]]) with probabilities floored at 1e-12.
inline Var cross_entropy(const Var& yhat, std::span<const std::size_t> labels) {
  if (yhat.value().rank() != 2 || yhat.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: need one label per row");
  }
  for (auto l : labels) {
    if (l >= yhat.dim(1)) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(yhat.dim(1)) + ")");
    }
  }
  Var p = clamp_min(pick(yhat, {labels.begin(), labels.end()}), kProbabilityFloor);
  return neg(mean(log(p)));
}

namespace detail {

inline void check_unit_rows(const Var& z, const char* who) {
  if (z.value().rank() != 2 || z.dim(0) < 2 || z.dim(0) % 2 != 0) {
    throw ShapeError(std::string(who) + ": expected [2N x d] embeddings with N >= 1");
  }
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += z.value()[i * cols + j] * z.value()[i * cols + j];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitNormTolerance) {
      throw DomainError(std::string(who) + ": embedding rows must be unit-norm");
    }
  }
}

struct ContrastiveParts {
  Var positive;  // [2N] z_i . z_i+
  Var log_denominator;  // [2N] log sum_{j != i} exp(z_i . z_j)
};

inline ContrastiveParts contrastive_parts(const Var& z) {
  const std::size_t rows = z.dim(0), half = rows / 2;
  Var sim = matmul(z, transpose(z));
  Tensor off_diagonal(Shape{rows, rows}, 1.0);
  for (std::size_t i = 0; i < rows; ++i) off_diagonal[i * rows + i] = 0.0;
  Var denom = row_sum(mul(exp(sim), Var::constant(std::move(off_diagonal))));
  std::vector<std::size_t> partner(rows);
  for (std::size_t i = 0; i < rows; ++i) partner[i] = (i + half) % rows;
  return {pick(sim, std::move(partner)), log(denom)};
}

}  // namespace detail

/// Mean over all 2N anchors of -log[exp(z_i.z_i+) / sum_{j != i} exp(z_i.z_j)].
/// No temperature; the positive is part of the denominator.
inline Var info_nce(const Var& z) {
  detail::check_unit_rows(z, "info_nce");
  auto parts = detail::contrastive_parts(z);
  return mean(sub(parts.log_denominator, parts.positive));
}

/// Sum over all 2N anchors of log(1 - fraction_i), fraction_i as in info_nce
/// and clamped at 1 - 1e-12. Always <= 0.
inline Var info_nce2(const Var& z) {
  detail::check_unit_rows(z, "info_nce2");
  auto parts = detail::contrastive_parts(z);
  Var fraction = clamp_max(exp(sub(parts.positive, parts.log_denominator)), kFractionCeiling);
  return sum(log(1.0 - fraction));
}

struct SrcLoss {
  Var total;
  double ce = 0.0;
  double nce = 0.0;
};

/// Cross-entropy over all 2N images plus InfoNCE over their embeddings.
inline SrcLoss loss_src(const PairedBatch& batch, const TaskModel& model) {
  batch.validate();
  Var images = Var::constant(batch.combined_images());
  const auto labels = batch.combined_labels();
  auto out = model.forward(images);
  Var ce = cross_entropy(out.yhat, labels);
  Var nce = info_nce(out.z);
  return {add(ce, nce), ce.item(), nce.item()};
}

/// Cross-entropy of the task model on generated images; reaches G, F and C.
inline Var loss_cls(const Var& xhat, std::span<const std::size_t> labels, const TaskModel& model) {
  return cross_entropy(model.classify(model.extract(xhat)), labels);
}

/// Mean over the batch of ||x - G_cyc(x̂)||_2 (per-sample flattened norm).
inline Var loss_cyc(const Var& x, const Var& xhat, const CycleGenerator& cycle) {
  if (x.shape() != xhat.shape()) throw ShapeError("loss_cyc: shape mismatch");
  return mean(row_norm(sub(x, cycle(xhat))));
}

struct AdversarialTerms {
  Var generator_term;  // -info_nce2, gradients reach only G
  Var task_term;       // info_nce, gradients reach only F and P
};

/// Both halves of the adversarial objective on the pairs (x, x̂). The task
/// model is frozen inside generator_term and x̂ is detached inside task_term,
/// so one backward pass updates each side with its own term only.
inline AdversarialTerms loss_adv(const Var& x, const Var& xhat, const TaskModel& model) {
  Var frozen = model.project(model.extract(concat_rows(x, xhat), Params::frozen), Params::frozen);
  Var live = model.project(model.extract(concat_rows(x, detach(xhat))));
  return {neg(info_nce2(frozen)), info_nce(live)};
}

/// The adversarial generator term without the log(1 - .) substitution:
/// -info_nce on frozen task parameters. Reference only; training never uses it.
inline Var loss_adv_reference_generator_term(const Var& x, const Var& xhat, const TaskModel& model) {
  Var frozen = model.project(model.extract(concat_rows(x, xhat), Params::frozen), Params::frozen);
  return neg(info_nce(frozen));
}

inline constexpr double kDefaultDivCeiling = 1.0;

/// -mean ||x̂1 - x̂2||_2. Each per-sample norm is clamped at
/// ceiling_rms * sqrt(pixels per sample); ceiling_rms <= 0 disables the clamp.
inline Var loss_div(const Var& xhat1, const Var& xhat2, double ceiling_rms = kDefaultDivCeiling) {
  if (xhat1.shape() != xhat2.shape()) throw ShapeError("loss_div: shape mismatch");
  Var norms = row_norm(sub(xhat1, xhat2));
  if (ceiling_rms > 0.0) {
    const double per_sample = static_cast<double>(xhat1.size() / xhat1.dim(0));
    norms = clamp_max(norms, ceiling_rms * std::sqrt(per_sample));
  }
  return neg(mean(norms));
}

// Sampling forms: draw fresh noise per sample and run the generator.

inline Var loss_cls(const Tensor& x, std::span<const std::size_t> labels, const TaskModel& model,
                    const Generator& g, Rng& rng) {
  return loss_cls(g(Var::constant(x), Var::constant(g.sample_noise(rng, x.dim(0)))), labels, model);
}

inline Var loss_cyc(const Tensor& x, const Generator& g, const CycleGenerator& cycle, Rng& rng) {
  Var xv = Var::constant(x);
  return loss_cyc(xv, g(xv, Var::constant(g.sample_noise(rng, x.dim(0)))), cycle);
}

inline Var loss_div(const Tensor& x, const Generator& g, Rng& rng,
                    double ceiling_rms = kDefaultDivCeiling) {
  Var xv = Var::constant(x);
  Var a = g(xv, Var::constant(g.sample_noise(rng, x.dim(0))));
  Var b = g(xv, Var::constant(g.sample_noise(rng, x.dim(0))));
  return loss_div(a, b, ceiling_rms);
}

struct UnseenLoss {
  Var total;
  Var xhat;  // G(x, n) used by every term
  double cls = 0.0;
  double cyc = 0.0;
  double adv_generator = 0.0;
  double adv_task = 0.0;
  double div = 0.0;

  double adv() const { return adv_generator + adv_task; }
};

struct UnseenNoise {
  Tensor n1;  // drives x̂ = G(x, n1) for every term
  Tensor n2;  // second draw for the diversity term
};

inline UnseenNoise draw_unseen_noise(const Generator& g, std::size_t batch, Rng& rng) {
  return {g.sample_noise(rng, batch), g.sample_noise(rng, batch)};
}

/// L_cls + w_cyc L_cyc + w_adv (generator_term + task_term) + w_div L_div.
/// Terms with zero weight are not evaluated.
inline UnseenLoss loss_unseen(const Tensor& x_batch, std::span<const std::size_t> labels,
                              const TaskModel& model, const Generator& g,
                              const CycleGenerator& cycle, const LossWeights& w,
                              const UnseenNoise& noise, double div_ceiling = kDefaultDivCeiling) {
  w.validate();
  Var x = Var::constant(x_batch);
  UnseenLoss out;
  out.xhat = g(x, Var::constant(noise.n1));
  Var cls = loss_cls(out.xhat, labels, model);
  out.cls = cls.item();
  Var total = cls;
  if (w.w_cyc > 0.0) {
    Var cyc = loss_cyc(x, out.xhat, cycle);
    out.cyc = cyc.item();
    total = add(total, mul_scalar(cyc, w.w_cyc));
  }
  if (w.w_adv > 0.0) {
    auto adv = loss_adv(x, out.xhat, model);
    out.adv_generator = adv.generator_term.item();
    out.adv_task = adv.task_term.item();
    total = add(total, mul_scalar(add(adv.generator_term, adv.task_term), w.w_adv));
  }
  if (w.w_div > 0.0) {
    Var div = loss_div(out.xhat, g(x, Var::constant(noise.n2)), div_ceiling);
    out.div = div.item();
    total = add(total, mul_scalar(div, w.w_div));
  }
  out.total = total;
  return out;
}

inline UnseenLoss loss_unseen(const Tensor& x_batch, std::span<const std::size_t> labels,
                              const TaskModel& model, const Generator& g,
                              const CycleGenerator& cycle, const LossWeights& w, Rng& rng,
                              double div_ceiling = kDefaultDivCeiling) {
  return loss_unseen(x_batch, labels, model, g, cycle, w,
                     draw_unseen_noise(g, x_batch.dim(0), rng), div_ceiling);
}

}  // namespace pden

#endif  // PDEN_LOSSES_HPP
