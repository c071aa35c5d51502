#ifndef PDEN_LAYERS_HPP
#define PDEN_LAYERS_HPP

#include <cmath>
#include <string>

#include "pden/autodiff.hpp"
#include "pden/optim.hpp"
#include "pden/rng.hpp"

namespace pden {

/// Whether a forward pass should treat parameters as trainable leaves or as
/// constants. Frozen passes still propagate gradients to their inputs, which
/// is how one loss term can reach the generator without touching the task
/// model (and vice versa).
enum class Params { trainable, frozen };

inline Var use(const Var& p, Params mode) { return mode == Params::frozen ? detach(p) : p; }

/// Fan-in scaled normal weights, std = gain * sqrt(2 / fan_in).
inline Tensor kaiming_normal(Rng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  return rng.normal_tensor(std::move(shape), 0.0,
                           gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
}

struct ConvLayer {
  Var weight;  // [out x in x k x k]
  Var bias;    // [out]
  int stride = 1;
  int padding = 1;

  static ConvLayer init(Rng& rng, std::size_t in, std::size_t out, std::size_t k, int stride,
                        int padding) {
    return {Var::parameter(kaiming_normal(rng, Shape{out, in, k, k}, in * k * k)),
            Var::parameter(Tensor(Shape{out}, 0.0)), stride, padding};
  }

  Var operator()(const Var& x, Params mode = Params::trainable) const {
    return add_channel_bias(conv2d(x, use(weight, mode), {stride, padding}), use(bias, mode));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct DenseLayer {
  Var weight;  // [in x out]
  Var bias;    // [out]

  static DenseLayer init(Rng& rng, std::size_t in, std::size_t out) {
    return {Var::parameter(kaiming_normal(rng, Shape{in, out}, in)),
            Var::parameter(Tensor(Shape{out}, 0.0))};
  }

  Var operator()(const Var& x, Params mode = Params::trainable) const {
    return linear(x, use(weight, mode), use(bias, mode));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Gives a layer its own copy of its parameters (handles are shared otherwise).
template <class Layer>
void deep_copy(Layer& layer) {
  layer.weight = Var::parameter(layer.weight.value());
  layer.bias = Var::parameter(layer.bias.value());
}

}  // namespace pden

#endif  // PDEN_LAYERS_HPP
