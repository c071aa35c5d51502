#ifndef PDEN_OPTIM_HPP
#define PDEN_OPTIM_HPP

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pden/autodiff.hpp"

namespace pden {

struct NamedParam {
  std::string name;
  Var var;
};

using ParamList = std::vector<NamedParam>;

inline void zero_grad(ParamList& params) {
  for (auto& p : params) p.var.zero_grad();
}

inline bool grads_finite(const ParamList& params) {
  for (const auto& p : params) {
    if (!p.var.grad().all_finite()) return false;
  }
  return true;
}

struct SgdOptions {
  double lr = 0.01;
};

class Sgd {
 public:
  explicit Sgd(SgdOptions opt) : opt_(opt) {
    if (!(opt_.lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
  }

  void step(ParamList& params) const {
    for (auto& p : params) {
      Tensor g = p.var.grad();
      Tensor& v = p.var.mutable_value();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= opt_.lr * g[i];
    }
  }

 private:
  SgdOptions opt_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list, so the same list must be passed to every step.
class Adam {
 public:
  explicit Adam(AdamOptions opt) : opt_(opt) {
    if (!(opt_.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  }

  void step(ParamList& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.var.shape(), 0.0);
        v_.emplace_back(p.var.shape(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor g = params[k].var.grad();
      Tensor& w = params[k].var.mutable_value();
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      if (g.shape() != w.shape() || m.shape() != w.shape()) {
        throw ShapeError("adam: shape mismatch for " + params[k].name);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace pden

#endif  // PDEN_OPTIM_HPP
