#ifndef PDEN_GRADCHECK_HPP
#define PDEN_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "pden/autodiff.hpp"
#include "pden/optim.hpp"
#include "pden/rng.hpp"

namespace pden {

struct GradCheckOptions {
  double step = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Denominator floor; below it the comparison is effectively absolute.
  double floor = 1e-6;
};

/// Compares reverse-mode gradients of `loss` with central differences
/// (f(p+h) - f(p-h)) / 2h taken by perturbing parameter values in place.
/// Returns the worst per-tensor relative error
/// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, floor) over checked coordinates.
/// `loss` must be a pure function of the current parameter values.
///
/// The two-function form differentiates `ad_loss` by reverse mode and
/// `fd_loss` numerically. Use it where the tape deliberately stops some
/// gradients and the reference objective differs per parameter group.
inline double max_relative_error(ParamList& params, const std::function<Var()>& ad_loss,
                                 const std::function<Var()>& fd_loss,
                                 const GradCheckOptions& opt = {}) {
  const auto& loss = fd_loss;
  zero_grad(params);
  Var root = ad_loss();
  backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.var.grad());

  Rng rng(opt.seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k].var.mutable_value();
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_param && coords.size() > opt.max_coords_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opt.max_coords_per_param);
    }
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    for (auto i : coords) {
      const double saved = value[i];
      value[i] = saved + opt.step;
      const double up = loss().item();
      value[i] = saved - opt.step;
      const double down = loss().item();
      value[i] = saved;
      const double fd = (up - down) / (2.0 * opt.step);
      const double ad = analytic[k][i];
      diff2 += (fd - ad) * (fd - ad);
      ad2 += ad * ad;
      fd2 += fd * fd;
    }
    const double denom = std::max({std::sqrt(ad2), std::sqrt(fd2), opt.floor});
    const double err = std::sqrt(diff2) / denom;
    if (!std::isfinite(err)) return err;
    worst = std::max(worst, err);
  }
  return worst;
}

inline double max_relative_error(ParamList& params, const std::function<Var()>& loss,
                                 const GradCheckOptions& opt = {}) {
  return max_relative_error(params, loss, loss, opt);
}

/// Convenience form: wraps raw input tensors as differentiable leaves.
inline double max_relative_error(std::vector<Tensor> inputs,
                                 const std::function<Var(const std::vector<Var>&)>& f,
                                 const GradCheckOptions& opt = {}) {
  ParamList params;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.push_back(Var::parameter(std::move(inputs[i])));
    params.push_back({"input" + std::to_string(i), vars.back()});
  }
  return max_relative_error(params, [&] { return f(vars); }, opt);
}

}  // namespace pden

#endif  // PDEN_GRADCHECK_HPP
