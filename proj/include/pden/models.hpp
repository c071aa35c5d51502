#ifndef PDEN_MODELS_HPP
#define PDEN_MODELS_HPP

// Task model M = (F, C, P) and the image generators.
//
//   F : conv blocks (3x3, stride 2, relu) -> global average pool -> h
//   C : dense -> relu -> dense -> softmax  (class distribution)
//   P : dense -> l2_normalize              (embedding on the unit sphere)
//
//   G(x, n)   = decode(adain(encode(x), n)),  adain(z, n) = fc1(n) * IN(z) + fc2(n)
//   G_cyc(x)  = decode(IN(encode(x)))
//
// The encoder halves resolution twice; the decoder mirrors it with
// nearest-neighbour upsampling and ends in a sigmoid so pixels stay in [0,1].

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pden/autodiff.hpp"
#include "pden/layers.hpp"
#include "pden/optim.hpp"
#include "pden/rng.hpp"

namespace pden {

struct Architecture {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t classes = 10;
  std::vector<std::size_t> f_channels{16, 32, 64};
  std::size_t c_hidden = 64;
  std::size_t d_z = 32;
  std::vector<std::size_t> g_channels{16, 32};
  std::size_t d_n = 16;

  std::size_t feature_dim() const { return f_channels.back(); }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0 || classes < 2 || f_channels.empty() ||
        c_hidden == 0 || d_z == 0 || d_n == 0) {
      throw std::invalid_argument("architecture: all sizes must be positive, classes >= 2");
    }
    if (g_channels.size() != 2) {
      throw std::invalid_argument("architecture: generator needs exactly 2 encoder widths");
    }
    if (height % 4 || width % 4 || height < 8 || width < 8) {
      throw std::invalid_argument(
          "architecture: generator needs height and width divisible by 4 and >= 8");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"channels", a.channels},     {"height", a.height},
                     {"width", a.width},           {"classes", a.classes},
                     {"f_channels", a.f_channels}, {"c_hidden", a.c_hidden},
                     {"d_z", a.d_z},               {"g_channels", a.g_channels},
                     {"d_n", a.d_n}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  Architecture d;
  a.channels = j.value("channels", d.channels);
  a.height = j.value("height", d.height);
  a.width = j.value("width", d.width);
  a.classes = j.value("classes", d.classes);
  a.f_channels = j.value("f_channels", d.f_channels);
  a.c_hidden = j.value("c_hidden", d.c_hidden);
  a.d_z = j.value("d_z", d.d_z);
  a.g_channels = j.value("g_channels", d.g_channels);
  a.d_n = j.value("d_n", d.d_n);
}

/// Multiset of parameter names -> tensors, used to move weights in and out
/// of models by name.
inline void assign_params(ParamList& params, const std::vector<std::pair<std::string, Tensor>>& values,
                          const std::string& prefix) {
  for (auto& p : params) {
    const std::string key = prefix + p.name;
    bool found = false;
    for (const auto& [name, t] : values) {
      if (name != key) continue;
      if (t.shape() != p.var.shape()) {
        throw ShapeError("parameter " + key + " has shape " + to_string(t.shape()) +
                         ", model expects " + to_string(p.var.shape()));
      }
      p.var.mutable_value() = t;
      found = true;
      break;
    }
    if (!found) throw std::runtime_error("missing parameter " + key);
  }
}

// ----------------------------------------------------------------- task model

struct TaskOutput {
  Var h;     // features F(x)      [N x d_h]
  Var yhat;  // C(F(x)) softmax    [N x m]
  Var z;     // P(F(x)) unit norm  [N x d_z]
};

class TaskModel {
 public:
  TaskModel(const Architecture& arch, Rng& rng) : arch_(arch) {
    arch_.validate();
    std::size_t in = arch_.channels;
    for (auto out : arch_.f_channels) {
      features_.push_back(ConvLayer::init(rng, in, out, 3, 2, 1));
      in = out;
    }
    hidden_ = DenseLayer::init(rng, arch_.feature_dim(), arch_.c_hidden);
    logits_ = DenseLayer::init(rng, arch_.c_hidden, arch_.classes);
    projection_ = DenseLayer::init(rng, arch_.feature_dim(), arch_.d_z);
  }

  TaskModel(const TaskModel& o)
      : arch_(o.arch_), features_(o.features_), hidden_(o.hidden_), logits_(o.logits_),
        projection_(o.projection_) {
    for (auto& l : features_) deep_copy(l);
    deep_copy(hidden_);
    deep_copy(logits_);
    deep_copy(projection_);
  }
  TaskModel& operator=(const TaskModel& o) {
    if (this != &o) *this = TaskModel(o);
    return *this;
  }
  TaskModel(TaskModel&&) = default;
  TaskModel& operator=(TaskModel&&) = default;

  const Architecture& arch() const { return arch_; }

  void check_input(const Var& x) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != arch_.channels || s[2] != arch_.height || s[3] != arch_.width) {
      throw ShapeError("task model expects [N," + std::to_string(arch_.channels) + "," +
                       std::to_string(arch_.height) + "," + std::to_string(arch_.width) +
                       "], got " + to_string(s));
    }
  }

  Var extract(const Var& x, Params mode = Params::trainable) const {
    check_input(x);
    Var a = x;
    for (const auto& conv : features_) a = relu(conv(a, mode));
    return global_avg_pool(a);
  }

  Var classify(const Var& h, Params mode = Params::trainable) const {
    return softmax(logits_(relu(hidden_(h, mode)), mode));
  }

  Var project(const Var& h, Params mode = Params::trainable) const {
    return l2_normalize(projection_(h, mode));
  }

  TaskOutput forward(const Var& x, Params mode = Params::trainable) const {
    Var h = extract(x, mode);
    return {h, classify(h, mode), project(h, mode)};
  }

  ParamList feature_params() const {
    ParamList out;
    for (std::size_t i = 0; i < features_.size(); ++i)
      features_[i].collect(out, "F.conv" + std::to_string(i));
    return out;
  }
  ParamList classifier_params() const {
    ParamList out;
    hidden_.collect(out, "C.fc0");
    logits_.collect(out, "C.fc1");
    return out;
  }
  ParamList projection_params() const {
    ParamList out;
    projection_.collect(out, "P.fc");
    return out;
  }
  ParamList params() const {
    ParamList out = feature_params();
    for (auto& p : classifier_params()) out.push_back(p);
    for (auto& p : projection_params()) out.push_back(p);
    return out;
  }

 private:
  Architecture arch_;
  std::vector<ConvLayer> features_;
  DenseLayer hidden_;
  DenseLayer logits_;
  DenseLayer projection_;
};

// ----------------------------------------------------------------- generators

/// Std of AdaIN fc weights relative to 1/sqrt(d_n); small so that fc1(n)
/// starts near its bias of 1 and fc2(n) near 0.
inline constexpr double kAdainWeightGain = 0.5;

/// adain(z, n) = scale * (z - mu(z)) / sigma(z) + shift with scale, shift
/// given per instance and channel ([N x C]).
inline Var adain(const Var& zfeat, const Var& scale, const Var& shift) {
  return channel_affine(instance_normalize(zfeat), scale, shift);
}

namespace detail {

/// Encoder/decoder pair shared by Generator and CycleGenerator.
struct AutoEncoder {
  ConvLayer enc0, enc1, dec0, dec1;

  static AutoEncoder init(Rng& rng, const Architecture& a) {
    const auto g0 = a.g_channels[0], g1 = a.g_channels[1];
    AutoEncoder ae;
    ae.enc0 = ConvLayer::init(rng, a.channels, g0, 3, 2, 1);
    ae.enc1 = ConvLayer::init(rng, g0, g1, 3, 2, 1);
    ae.dec0 = ConvLayer::init(rng, g1, g0, 3, 1, 1);
    ae.dec1 = ConvLayer::init(rng, g0, a.channels, 3, 1, 1);
    return ae;
  }

  Var encode(const Var& x) const { return relu(enc1(relu(enc0(x)))); }

  Var decode(const Var& z) const {
    Var a = relu(dec0(upsample_nearest(z, 2)));
    return sigmoid(dec1(upsample_nearest(a, 2)));
  }

  void collect(ParamList& out) const {
    enc0.collect(out, "E.conv0");
    enc1.collect(out, "E.conv1");
    dec0.collect(out, "D.conv0");
    dec1.collect(out, "D.conv1");
  }

  void deep_copy_all() {
    deep_copy(enc0);
    deep_copy(enc1);
    deep_copy(dec0);
    deep_copy(dec1);
  }
};

inline void check_image(const Architecture& a, const Var& x, const char* who) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != a.channels || s[2] != a.height || s[3] != a.width) {
    throw ShapeError(std::string(who) + ": input shape " + to_string(s) +
                     " does not match the configured image size");
  }
}

}  // namespace detail

class Generator {
 public:
  Generator(const Architecture& arch, Rng& rng) : arch_(arch) {
    arch_.validate();
    ae_ = detail::AutoEncoder::init(rng, arch_);
    const auto g1 = arch_.g_channels[1];
    const double std = kAdainWeightGain / std::sqrt(static_cast<double>(arch_.d_n));
    fc1_ = {Var::parameter(rng.normal_tensor(Shape{arch_.d_n, g1}, 0.0, std)),
            Var::parameter(Tensor(Shape{g1}, 1.0))};
    fc2_ = {Var::parameter(rng.normal_tensor(Shape{arch_.d_n, g1}, 0.0, std)),
            Var::parameter(Tensor(Shape{g1}, 0.0))};
  }

  Generator(const Generator& o) : arch_(o.arch_), ae_(o.ae_), fc1_(o.fc1_), fc2_(o.fc2_) {
    ae_.deep_copy_all();
    deep_copy(fc1_);
    deep_copy(fc2_);
  }
  Generator& operator=(const Generator& o) {
    if (this != &o) *this = Generator(o);
    return *this;
  }
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;

  const Architecture& arch() const { return arch_; }

  Tensor sample_noise(Rng& rng, std::size_t batch) const {
    return rng.normal_tensor(Shape{batch, arch_.d_n});
  }

  /// x̂ = G(x, n); n is [N x d_n].
  Var operator()(const Var& x, const Var& noise) const {
    detail::check_image(arch_, x, "generator");
    if (noise.shape() != Shape{x.dim(0), arch_.d_n}) {
      throw ShapeError("generator: noise must be [N x " + std::to_string(arch_.d_n) + "], got " +
                       to_string(noise.shape()));
    }
    return ae_.decode(adain(ae_.encode(x), fc1_(noise), fc2_(noise)));
  }

  ParamList params() const {
    ParamList out;
    ae_.collect(out);
    fc1_.collect(out, "adain.fc1");
    fc2_.collect(out, "adain.fc2");
    return out;
  }

 private:
  Architecture arch_;
  detail::AutoEncoder ae_;
  DenseLayer fc1_;
  DenseLayer fc2_;
};

class CycleGenerator {
 public:
  CycleGenerator(const Architecture& arch, Rng& rng) : arch_(arch) {
    arch_.validate();
    ae_ = detail::AutoEncoder::init(rng, arch_);
  }

  CycleGenerator(const CycleGenerator& o) : arch_(o.arch_), ae_(o.ae_) { ae_.deep_copy_all(); }
  CycleGenerator& operator=(const CycleGenerator& o) {
    if (this != &o) *this = CycleGenerator(o);
    return *this;
  }
  CycleGenerator(CycleGenerator&&) = default;
  CycleGenerator& operator=(CycleGenerator&&) = default;

  const Architecture& arch() const { return arch_; }

  Var operator()(const Var& xhat) const {
    detail::check_image(arch_, xhat, "cycle generator");
    return ae_.decode(instance_normalize(ae_.encode(xhat)));
  }

  ParamList params() const {
    ParamList out;
    ae_.collect(out);
    return out;
  }

 private:
  Architecture arch_;
  detail::AutoEncoder ae_;
};

}  // namespace pden

#endif  // PDEN_MODELS_HPP
