#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "vibtk/autograd.hpp"
#include "vibtk/errors.hpp"
#include "vibtk/rng.hpp"
#include "vibtk/tensor.hpp"

namespace vibtk::nn {

enum class LayerKind { Dense, Conv2d, Relu, Flatten };
enum class Role { Reference, Encoder, Classifier, Discriminator };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t fan_in = 0, fan_out = 0;                      // dense
  std::size_t c_in = 0, c_out = 0, kernel = 0, stride = 1;  // conv2d
  std::size_t h = 0, w = 0;                                 // conv input plane, resolved at build

  static LayerSpec dense(std::string name, std::size_t fan_in, std::size_t fan_out) {
    LayerSpec s{LayerKind::Dense, std::move(name)};
    s.fan_in = fan_in;
    s.fan_out = fan_out;
    return s;
  }
  static LayerSpec conv2d(std::string name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                          std::size_t stride) {
    LayerSpec s{LayerKind::Conv2d, std::move(name)};
    s.c_in = c_in;
    s.c_out = c_out;
    s.kernel = kernel;
    s.stride = stride;
    return s;
  }
  static LayerSpec relu(std::string name) { return LayerSpec{LayerKind::Relu, std::move(name)}; }
  static LayerSpec flatten(std::string name) { return LayerSpec{LayerKind::Flatten, std::move(name)}; }
};

/// Ordered layer specs plus their parameter tensors. Dense layers own
/// [fan_in x fan_out] weights and a [1 x fan_out] bias; conv layers own
/// [c_out x c_in*k*k] kernels and a [1 x c_out] bias.
struct Network {
  Role role = Role::Reference;
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;
  std::vector<std::string> param_names;
  std::size_t in_ch = 1, in_h = 0, in_w = 0;  // conv geometry; 0x0 for pure MLPs

  Network() = default;

  Network(Role r, std::vector<LayerSpec> specs, std::size_t in_channels = 1, std::size_t in_height = 0,
          std::size_t in_width = 0)
      : role(r), layers(std::move(specs)), in_ch(in_channels), in_h(in_height), in_w(in_width) {
    std::set<std::string> seen;
    std::size_t c = in_ch, h = in_h, w = in_w;
    std::size_t dim = h && w ? c * h * w : (layers.empty() ? 0 : layers.front().fan_in);
    for (auto& l : layers) {
      if (!seen.insert(l.name).second) throw config_error("duplicate layer name '" + l.name + "'");
      switch (l.kind) {
        case LayerKind::Dense:
          if (l.fan_in != dim)
            throw config_error("layer '" + l.name + "' expects " + std::to_string(l.fan_in) +
                               " inputs but receives " + std::to_string(dim));
          params.push_back(Tensor::zeros({l.fan_in, l.fan_out}));
          param_names.push_back(l.name + ".weight");
          params.push_back(Tensor::zeros({1, l.fan_out}));
          param_names.push_back(l.name + ".bias");
          dim = l.fan_out;
          h = w = 0;
          break;
        case LayerKind::Conv2d: {
          if (!h || !w || l.c_in != c)
            throw config_error("layer '" + l.name + "' needs a " + std::to_string(l.c_in) +
                               "-channel image input");
          l.h = h;
          l.w = w;
          const std::size_t pad = l.kernel / 2;
          h = (h + 2 * pad - l.kernel) / l.stride + 1;
          w = (w + 2 * pad - l.kernel) / l.stride + 1;
          c = l.c_out;
          dim = c * h * w;
          params.push_back(Tensor::zeros({l.c_out, l.c_in * l.kernel * l.kernel}));
          param_names.push_back(l.name + ".weight");
          params.push_back(Tensor::zeros({1, l.c_out}));
          param_names.push_back(l.name + ".bias");
          break;
        }
        case LayerKind::Relu:
        case LayerKind::Flatten:
          break;
      }
    }
    out_dim_ = dim;
  }

  std::size_t input_dim() const {
    if (in_h && in_w) return in_ch * in_h * in_w;
    for (const auto& l : layers)
      if (l.kind == LayerKind::Dense) return l.fan_in;
    return 0;
  }
  std::size_t output_dim() const { return out_dim_; }

 private:
  std::size_t out_dim_ = 0;

 public:

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  struct Fwd {
    autograd::Ref out;
    std::vector<autograd::Ref> params;  // leaf per parameter tensor, in params order
  };

  /// Records the forward pass on the given tape. train_params controls whether
  /// parameter leaves require gradients (attacks freeze the model and only
  /// differentiate the input).
  Fwd forward(autograd::Tape& tape, autograd::Ref x, bool train_params = true) const {
    if (x->value.cols() != input_dim())
      throw shape_error("network input " + x->value.shape_str() + ", expected batch x " +
                        std::to_string(input_dim()));
    Fwd fwd;
    for (const auto& p : params) fwd.params.push_back(tape.leaf(p, train_params));
    auto cur = x;
    std::size_t pi = 0;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::Dense:
          cur = tape.add(tape.matmul(cur, fwd.params[pi]), fwd.params[pi + 1]);
          pi += 2;
          break;
        case LayerKind::Conv2d:
          cur = tape.conv2d(cur, fwd.params[pi], fwd.params[pi + 1], l.c_in, l.h, l.w, l.c_out, l.kernel,
                            l.stride);
          pi += 2;
          break;
        case LayerKind::Relu:
          cur = tape.relu(cur);
          break;
        case LayerKind::Flatten:
          cur = tape.flatten(cur);
          break;
      }
    }
    fwd.out = cur;
    return fwd;
  }
};

/// Hidden layers interleaved with ReLU, linear output head.
inline Network make_mlp(Role role, const std::string& prefix, const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw config_error("mlp needs at least input and output dims");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    layers.push_back(LayerSpec::dense(prefix + "_fc" + std::to_string(i), dims[i], dims[i + 1]));
    if (i + 2 < dims.size()) layers.push_back(LayerSpec::relu(prefix + "_relu" + std::to_string(i)));
  }
  return Network(role, std::move(layers));
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
inline void init_weights(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t pi = 0;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::Dense) {
      const float bound = std::sqrt(6.0f / static_cast<float>(l.fan_in + l.fan_out));
      rng.fill_uniform(net.params[pi].data, -bound, bound);
      std::fill(net.params[pi + 1].data.begin(), net.params[pi + 1].data.end(), 0.0f);
      pi += 2;
    } else if (l.kind == LayerKind::Conv2d) {
      const std::size_t kk = l.kernel * l.kernel;
      const float bound = std::sqrt(6.0f / static_cast<float>(l.c_in * kk + l.c_out * kk));
      rng.fill_uniform(net.params[pi].data, -bound, bound);
      std::fill(net.params[pi + 1].data.begin(), net.params[pi + 1].data.end(), 0.0f);
      pi += 2;
    }
  }
}

enum class OptKind { Adam, Sgd };

struct OptimizerState {
  OptKind kind = OptKind::Adam;
  float lr = 0.001f;
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  long step_count = 0;
  std::vector<std::vector<float>> m, v;

  static OptimizerState adam(float lr) {
    OptimizerState s;
    s.kind = OptKind::Adam;
    s.lr = lr;
    return s;
  }
  static OptimizerState sgd(float lr) {
    OptimizerState s;
    s.kind = OptKind::Sgd;
    s.lr = lr;
    return s;
  }
};

/// One optimizer update from the gradients accumulated on forward-pass leaves.
/// scale multiplies the gradient (-1 flips descent into ascent for critic
/// updates). Unreached leaves contribute zero gradient.
inline void optimizer_step(OptimizerState& opt, Network& net, const std::vector<autograd::Ref>& param_refs,
                           float scale = 1.0f) {
  if (param_refs.size() != net.params.size())
    throw contract_error("optimizer_step: gradient refs do not match parameter tensors");
  if (opt.m.empty()) {
    for (const auto& p : net.params) {
      opt.m.emplace_back(p.size(), 0.0f);
      opt.v.emplace_back(p.size(), 0.0f);
    }
  }
  ++opt.step_count;
  const float bc1 = 1.0f - std::pow(opt.beta1, static_cast<float>(opt.step_count));
  const float bc2 = 1.0f - std::pow(opt.beta2, static_cast<float>(opt.step_count));
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    auto& p = net.params[i].data;
    const auto& gref = param_refs[i]->grad;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const float g = (gref.empty() ? 0.0f : gref[j]) * scale;
      if (std::isnan(g))
        throw numeric_error("NaN gradient in parameter '" + net.param_names[i] + "'");
      if (opt.kind == OptKind::Sgd) {
        p[j] -= opt.lr * g;
        continue;
      }
      auto& m = opt.m[i][j];
      auto& v = opt.v[i][j];
      m = opt.beta1 * m + (1.0f - opt.beta1) * g;
      v = opt.beta2 * v + (1.0f - opt.beta2) * g * g;
      p[j] -= opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
    }
  }
}

}  // namespace vibtk::nn
