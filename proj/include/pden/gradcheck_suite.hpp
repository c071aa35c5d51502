#ifndef PDEN_GRADCHECK_SUITE_HPP
#define PDEN_GRADCHECK_SUITE_HPP

// Finite-difference checks for every differentiable op and every loss, run
// on small random instances. Shared by the CLI and the test suite.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pden/gradcheck.hpp"
#include "pden/losses.hpp"
#include "pden/models.hpp"

namespace pden {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckItem {
  std::string name;
  std::string group;  // "op" or "loss"
  std::function<double(Rng&)> instance;  // worst relative error of one instance
};

struct GradCheckReport {
  std::string name;
  std::string group;
  std::size_t instances = 0;
  double worst = 0.0;
  bool passed = false;
};

namespace gc {

inline Tensor uniform(Rng& r, Shape s, double lo = -1.0, double hi = 1.0) {
  return r.uniform_tensor(std::move(s), lo, hi);
}

/// Magnitudes in [lo, hi] with random sign; keeps inputs off kinks at 0.
inline Tensor away(Rng& r, Shape s, double lo = 0.1, double hi = 1.0) {
  Tensor t(std::move(s), 0.0);
  for (auto& v : t.data()) v = r.uniform(lo, hi) * (r.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

inline std::size_t between(Rng& r, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(r.below(hi - lo + 1));
}

/// Reduces any output to a scalar with a random cotangent.
inline Var probe(const Var& out, Rng& r) {
  return sum(mul(out, Var::constant(uniform(r, out.shape()))));
}

using Fn = std::function<Var(const std::vector<Var>&)>;

inline double check(std::vector<Tensor> inputs, Rng& r, const Fn& f) {
  Rng pr(r.next_u64());
  const std::uint64_t probe_seed = pr.next_u64();
  return max_relative_error(std::move(inputs), [&](const std::vector<Var>& v) {
    Rng p(probe_seed);
    return probe(f(v), p);
  });
}

inline Architecture tiny_arch() {
  Architecture a;
  a.channels = 1;
  a.height = 12;
  a.width = 12;
  a.classes = 3;
  a.f_channels = {3, 4, 8};
  a.c_hidden = 4;
  a.d_z = 3;
  a.g_channels = {3, 4};
  a.d_n = 2;
  return a;
}

inline ParamList join(ParamList a, const ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

/// Tiny task model, generators and batch at a generic point. Biases are
/// initialized to zero, which puts relu units fed only by zero padding or
/// dead inputs exactly on their kink, so every bias is jittered. Draws where
/// the networks are degenerate (an all-zero feature row, or a parameter
/// tensor whose gradient vanishes because a layer is dead or saturated) are
/// redrawn.
struct TinySetup {
  Architecture arch = tiny_arch();
  TaskModel model;
  Generator gen;
  CycleGenerator cyc;
  Tensor x, x_plus;
  std::vector<std::size_t> y;
  UnseenNoise noise;

  explicit TinySetup(Rng& r, std::size_t n = 2)
      : model(arch, r), gen(arch, r), cyc(arch, r), x(Shape{n, 1, 12, 12}), x_plus(x) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 0) {
        model = TaskModel(arch, r);
        gen = Generator(arch, r);
        cyc = CycleGenerator(arch, r);
      }
      x = uniform(r, {n, 1, 12, 12}, 0.0, 1.0);
      x_plus = uniform(r, {n, 1, 12, 12}, 0.0, 1.0);
      y.clear();
      for (std::size_t i = 0; i < n; ++i) y.push_back(r.below(arch.classes));
      noise = draw_unseen_noise(gen, n, r);
      for (auto& p : join(join(gen.params(), cyc.params()), model.params())) {
        if (p.name.size() < 4 || p.name.compare(p.name.size() - 4, 4, "bias") != 0) continue;
        for (auto& v : p.var.mutable_value().data()) v += r.uniform(-0.1, 0.1);
      }
      if (generic() || attempt == 1000) break;
    }
  }

  Var xhat() const { return gen(Var::constant(x), Var::constant(noise.n1)); }

  bool generic() const {
    const Var xv = Var::constant(x);
    Var h = model.extract(concat_rows(concat_rows(xv, Var::constant(x_plus)),
                                      concat_rows(xhat(), gen(xv, Var::constant(noise.n2)))));
    const std::size_t d = h.dim(1);
    for (std::size_t i = 0; i < h.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += h.value()[i * d + j] * h.value()[i * d + j];
      if (std::sqrt(s) < 1e-3) return false;
    }
    ParamList all = join(join(gen.params(), cyc.params()), model.params());
    zero_grad(all);
    const LossWeights w{1.0, 1.0, 1.0};
    Var total = add(loss_unseen(x, y, model, gen, cyc, w, noise).total,
                    loss_src(PairedBatch{x, x_plus, y}, model).total);
    backward(total);
    bool ok = true;
    for (const auto& p : all) ok = ok && norm(p.var.grad()) > 1e-4;
    zero_grad(all);
    return ok;
  }
};


}  // namespace gc

inline std::vector<GradCheckItem> gradcheck_items() {
  using gc::away;
  using gc::between;
  using gc::check;
  using gc::uniform;
  using V = std::vector<Var>;
  std::vector<GradCheckItem> items;
  auto op = [&](std::string name, std::function<double(Rng&)> f) {
    items.push_back({std::move(name), "op", std::move(f)});
  };
  auto loss = [&](std::string name, std::function<double(Rng&)> f) {
    items.push_back({std::move(name), "loss", std::move(f)});
  };
  auto mat = [](Rng& r) { return Shape{between(r, 2, 4), between(r, 2, 5)}; };
  auto img = [](Rng& r) {
    return Shape{between(r, 1, 2), between(r, 1, 3), between(r, 2, 4), between(r, 2, 4)};
  };

  // ---- elementwise
  op("add", [=](Rng& r) { auto s = mat(r); return check({uniform(r, s), uniform(r, s)}, r, [](const V& v) { return add(v[0], v[1]); }); });
  op("sub", [=](Rng& r) { auto s = mat(r); return check({uniform(r, s), uniform(r, s)}, r, [](const V& v) { return sub(v[0], v[1]); }); });
  op("mul", [=](Rng& r) { auto s = mat(r); return check({uniform(r, s), uniform(r, s)}, r, [](const V& v) { return mul(v[0], v[1]); }); });
  op("div", [=](Rng& r) { auto s = mat(r); return check({uniform(r, s), away(r, s, 0.5, 1.5)}, r, [](const V& v) { return div(v[0], v[1]); }); });
  op("neg", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return neg(v[0]); }); });
  op("add_scalar", [=](Rng& r) { const double c = r.uniform(-2, 2); return check({uniform(r, mat(r))}, r, [c](const V& v) { return add_scalar(v[0], c); }); });
  op("mul_scalar", [=](Rng& r) { const double c = r.uniform(-2, 2); return check({uniform(r, mat(r))}, r, [c](const V& v) { return mul_scalar(v[0], c); }); });
  op("exp", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return exp(v[0]); }); });
  op("log", [=](Rng& r) { return check({uniform(r, mat(r), 0.2, 2.0)}, r, [](const V& v) { return log(v[0]); }); });
  op("sqrt", [=](Rng& r) { return check({uniform(r, mat(r), 0.2, 2.0)}, r, [](const V& v) { return sqrt(v[0]); }); });
  op("relu", [=](Rng& r) { return check({away(r, mat(r))}, r, [](const V& v) { return relu(v[0]); }); });
  op("tanh", [=](Rng& r) { return check({uniform(r, mat(r), -2, 2)}, r, [](const V& v) { return tanh(v[0]); }); });
  op("sigmoid", [=](Rng& r) { return check({uniform(r, mat(r), -4, 4)}, r, [](const V& v) { return sigmoid(v[0]); }); });
  op("clamp_min", [=](Rng& r) { return check({away(r, mat(r))}, r, [](const V& v) { return clamp_min(v[0], 0.0); }); });
  op("clamp_max", [=](Rng& r) { return check({away(r, mat(r))}, r, [](const V& v) { return clamp_max(v[0], 0.0); }); });

  // ---- reductions and indexing
  op("sum", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return mul_scalar(sum(v[0]), 1.7); }); });
  op("mean", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return mul_scalar(mean(v[0]), 1.7); }); });
  op("row_sum", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return row_sum(v[0]); }); });
  op("row_norm", [=](Rng& r) { return check({away(r, mat(r))}, r, [](const V& v) { return row_norm(v[0]); }); });
  op("pick", [=](Rng& r) {
    auto s = mat(r);
    std::vector<std::size_t> idx(s[0]);
    for (auto& i : idx) i = r.below(s[1]);
    return check({uniform(r, s)}, r, [idx](const V& v) { return pick(v[0], idx); });
  });

  // ---- shape
  op("reshape", [=](Rng& r) { auto s = mat(r); return check({uniform(r, s)}, r, [s](const V& v) { return reshape(v[0], Shape{s[1], s[0]}); }); });
  op("flatten", [=](Rng& r) { return check({uniform(r, img(r))}, r, [](const V& v) { return flatten(v[0]); }); });
  op("transpose", [=](Rng& r) { return check({uniform(r, mat(r))}, r, [](const V& v) { return transpose(v[0]); }); });
  op("concat_rows", [=](Rng& r) {
    const std::size_t c = between(r, 2, 4);
    return check({uniform(r, {between(r, 1, 3), c}), uniform(r, {between(r, 1, 3), c})}, r,
                 [](const V& v) { return concat_rows(v[0], v[1]); });
  });

  // ---- linear algebra and row-wise
  op("matmul", [=](Rng& r) {
    const std::size_t m = between(r, 1, 4), k = between(r, 1, 4), n = between(r, 1, 4);
    return check({uniform(r, {m, k}), uniform(r, {k, n})}, r, [](const V& v) { return matmul(v[0], v[1]); });
  });
  op("linear", [=](Rng& r) {
    const std::size_t m = between(r, 1, 4), k = between(r, 1, 4), n = between(r, 1, 4);
    return check({uniform(r, {m, k}), uniform(r, {k, n}), uniform(r, {n})}, r,
                 [](const V& v) { return linear(v[0], v[1], v[2]); });
  });
  op("softmax", [=](Rng& r) { return check({uniform(r, mat(r), -2, 2)}, r, [](const V& v) { return softmax(v[0]); }); });
  op("l2_normalize", [=](Rng& r) { return check({away(r, mat(r))}, r, [](const V& v) { return l2_normalize(v[0]); }); });

  // ---- image ops
  op("conv2d", [=](Rng& r) {
    const std::size_t n = between(r, 1, 2), c = between(r, 1, 3), o = between(r, 1, 3);
    const std::size_t h = between(r, 3, 6), w = between(r, 3, 6), k = between(r, 1, 3);
    Conv2dOptions opt{static_cast<int>(between(r, 1, 2)), static_cast<int>(between(r, 0, 1))};
    return check({uniform(r, {n, c, h, w}), uniform(r, {o, c, k, k})}, r,
                 [opt](const V& v) { return conv2d(v[0], v[1], opt); });
  });
  op("add_channel_bias", [=](Rng& r) {
    auto s = img(r);
    return check({uniform(r, s), uniform(r, {s[1]})}, r, [](const V& v) { return add_channel_bias(v[0], v[1]); });
  });
  op("upsample_nearest", [=](Rng& r) {
    const std::size_t f = between(r, 1, 3);
    return check({uniform(r, img(r))}, r, [f](const V& v) { return upsample_nearest(v[0], f); });
  });
  op("global_avg_pool", [=](Rng& r) { return check({uniform(r, img(r))}, r, [](const V& v) { return global_avg_pool(v[0]); }); });
  op("channel_std", [=](Rng& r) { return check({uniform(r, img(r))}, r, [](const V& v) { return channel_std(v[0]); }); });
  op("instance_stats", [=](Rng& r) {
    return check({uniform(r, img(r))}, r, [](const V& v) {
      auto st = instance_stats(v[0]);
      return concat_rows(st.mean, mul_scalar(st.stddev, 0.7));
    });
  });
  op("channel_affine", [=](Rng& r) {
    auto s = img(r);
    return check({uniform(r, s), uniform(r, {s[0], s[1]}), uniform(r, {s[0], s[1]})}, r,
                 [](const V& v) { return channel_affine(v[0], v[1], v[2]); });
  });
  op("instance_normalize", [=](Rng& r) { return check({uniform(r, img(r))}, r, [](const V& v) { return instance_normalize(v[0]); }); });
  op("adain", [=](Rng& r) {
    auto s = img(r);
    return check({uniform(r, s), uniform(r, {s[0], s[1]}), uniform(r, {s[0], s[1]})}, r,
                 [](const V& v) { return adain(v[0], v[1], v[2]); });
  });

  // ---- losses
  loss("cross_entropy", [=](Rng& r) {
    auto s = mat(r);
    std::vector<std::size_t> y(s[0]);
    for (auto& l : y) l = r.below(s[1]);
    return max_relative_error({uniform(r, s, -2, 2)}, [y](const V& v) { return cross_entropy(softmax(v[0]), y); });
  });
  loss("info_nce", [=](Rng& r) {
    const std::size_t rows = 2 * between(r, 2, 4), d = between(r, 2, 5);
    return max_relative_error({away(r, {rows, d})}, [](const V& v) { return info_nce(l2_normalize(v[0])); });
  });
  loss("info_nce2", [=](Rng& r) {
    const std::size_t rows = 2 * between(r, 2, 4), d = between(r, 2, 5);
    return max_relative_error({away(r, {rows, d})}, [](const V& v) { return info_nce2(l2_normalize(v[0])); });
  });
  loss("loss_src", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = t.model.params();
    PairedBatch b{t.x, t.x_plus, t.y};
    return max_relative_error(params, [&] { return loss_src(b, t.model).total; });
  });
  loss("loss_cls", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = gc::join(t.gen.params(), t.model.params());
    return max_relative_error(params, [&] { return loss_cls(t.xhat(), t.y, t.model); });
  });
  loss("loss_cyc", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = gc::join(t.gen.params(), t.cyc.params());
    return max_relative_error(params, [&] { return loss_cyc(Var::constant(t.x), t.xhat(), t.cyc); });
  });
  loss("loss_adv.generator", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = t.gen.params();
    return max_relative_error(params, [&] { return loss_adv(Var::constant(t.x), t.xhat(), t.model).generator_term; });
  });
  loss("loss_adv.task", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = t.model.params();
    return max_relative_error(params, [&] { return loss_adv(Var::constant(t.x), t.xhat(), t.model).task_term; });
  });
  loss("loss_adv.reference", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = t.gen.params();
    return max_relative_error(params, [&] { return loss_adv_reference_generator_term(Var::constant(t.x), t.xhat(), t.model); });
  });
  loss("loss_div", [=](Rng& r) {
    gc::TinySetup t(r);
    auto params = t.gen.params();
    const double ceiling = r.uniform() < 0.5 ? kDefaultDivCeiling : 0.0;
    return max_relative_error(params, [&] {
      return loss_div(t.xhat(), t.gen(Var::constant(t.x), Var::constant(t.noise.n2)), ceiling);
    });
  });
  // Reverse mode on the full objective; each parameter group is compared with
  // the numerical derivative of the terms that group is meant to minimize.
  loss("loss_unseen", [=](Rng& r) {
    gc::TinySetup t(r);
    const LossWeights w{r.uniform(0.5, 2.0), r.uniform(0.05, 0.5), r.uniform(0.05, 0.5)};
    auto total = [&] { return loss_unseen(t.x, t.y, t.model, t.gen, t.cyc, w, t.noise).total; };
    auto gen_side = [&] {
      Var x = Var::constant(t.x);
      Var xhat = t.xhat();
      Var v = loss_cls(xhat, t.y, t.model);
      v = add(v, mul_scalar(loss_cyc(x, xhat, t.cyc), w.w_cyc));
      v = add(v, mul_scalar(loss_adv(x, xhat, t.model).generator_term, w.w_adv));
      v = add(v, mul_scalar(loss_div(xhat, t.gen(x, Var::constant(t.noise.n2))), w.w_div));
      return v;
    };
    auto task_side = [&] {
      Var x = Var::constant(t.x);
      Var xhat = t.xhat();
      return add(loss_cls(xhat, t.y, t.model), mul_scalar(loss_adv(x, xhat, t.model).task_term, w.w_adv));
    };
    auto g = gc::join(t.gen.params(), t.cyc.params());
    auto m = t.model.params();
    return std::max(max_relative_error(g, total, gen_side), max_relative_error(m, total, task_side));
  });
  return items;
}

/// Runs `instances` random instances of every item. Instance i of an item
/// uses Rng(derive_seed(seed, name, i)).
inline std::vector<GradCheckReport> run_gradcheck_suite(std::size_t instances = 20,
                                                        double tolerance = kGradCheckTolerance,
                                                        std::uint64_t seed = 0) {
  std::vector<GradCheckReport> out;
  for (const auto& item : gradcheck_items()) {
    GradCheckReport rep{item.name, item.group, instances, 0.0, true};
    for (std::size_t i = 0; i < instances; ++i) {
      Rng r(derive_seed(seed, item.name, i));
      const double e = item.instance(r);
      if (!(e < tolerance)) rep.passed = false;
      if (!(e <= rep.worst)) rep.worst = e;  // NaN propagates
    }
    out.push_back(rep);
  }
  return out;
}

}  // namespace pden

#endif  // PDEN_GRADCHECK_SUITE_HPP
