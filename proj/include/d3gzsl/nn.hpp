#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "d3gzsl/error.hpp"
#include "d3gzsl/rng.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

enum class Activation { identity, relu, leaky_relu, sigmoid };

inline constexpr double kLeakySlope = 0.2;

inline Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, kLeakySlope);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::identity: break;
  }
  return x;
}

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Stack of affine layers, each followed by its activation.
class Mlp {
 public:
  Mlp() = default;

  // dims = {in, h1, ..., out}; one activation per layer. Weights are
  // He-uniform, U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases start at zero.
  Mlp(std::string name, const std::vector<std::size_t>& dims, const std::vector<Activation>& activations, Rng& rng)
      : name_(std::move(name)) {
    if (dims.size() < 2) throw ParameterError("Mlp '" + name_ + "' needs at least input and output dims");
    if (activations.size() != dims.size() - 1)
      throw ParameterError("Mlp '" + name_ + "': " + std::to_string(dims.size() - 1) + " layers but " +
                           std::to_string(activations.size()) + " activations");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      if (dims[l] == 0 || dims[l + 1] == 0) throw ParameterError("Mlp '" + name_ + "': zero-width layer");
      const double bound = std::sqrt(6.0 / static_cast<double>(dims[l]));
      Linear layer;
      layer.weight = Tensor::uniform({dims[l + 1], dims[l]}, rng, -bound, bound);
      layer.weight.set_requires_grad(true);
      layer.bias = Tensor::zeros({dims[l + 1]});
      layer.bias.set_requires_grad(true);
      layer.activation = activations[l];
      layers_.push_back(std::move(layer));
    }
  }

  // Builds from explicit layers (used by tests and checkpoint loading).
  Mlp(std::string name, std::vector<Linear> layers) : name_(std::move(name)), layers_(std::move(layers)) {
    for (std::size_t l = 1; l < layers_.size(); ++l)
      if (layers_[l].in_dim() != layers_[l - 1].out_dim())
        throw ShapeError("Mlp '" + name_ + "': layer " + std::to_string(l) + " does not chain");
    for (auto& layer : layers_) {
      layer.weight.set_requires_grad(true);
      layer.bias.set_requires_grad(true);
    }
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != in_dim())
      throw ShapeError("Mlp '" + name_ + "' expects [n," + std::to_string(in_dim()) + "], got " + shape_str(x.shape()));
    Tensor h = x;
    for (const auto& layer : layers_) h = activate(add(matmul(h, transpose(layer.weight)), layer.bias), layer.activation);
    return h;
  }
  Tensor operator()(const Tensor& x) const { return forward(x); }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  const std::string& name() const { return name_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::vector<Linear>& layers() { return layers_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers_) {
      out.push_back(layer.weight);
      out.push_back(layer.bias);
    }
    return out;
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.push_back({name_ + "." + std::to_string(l) + ".weight", layers_[l].weight});
      out.push_back({name_ + "." + std::to_string(l) + ".bias", layers_[l].bias});
    }
    return out;
  }

  // Excludes every parameter from tracking and optimizer updates. Idempotent.
  void freeze() {
    for (auto& layer : layers_) {
      layer.weight.set_requires_grad(false);
      layer.bias.set_requires_grad(false);
    }
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

 private:
  std::string name_;
  std::vector<Linear> layers_;
  bool frozen_ = false;
};

// d(sum of outputs)/d(input) for every row of `x`, built from tape ops so it
// stays differentiable with respect to the network parameters. ReLU and
// leaky-ReLU derivative masks are treated as constants (exact almost
// everywhere); sigmoid derivatives are tracked.
inline Tensor input_gradient(const Mlp& net, const Tensor& x) {
  std::vector<Tensor> pre;
  Tensor h = x;
  for (const auto& layer : net.layers()) {
    Tensor z = add(matmul(h, transpose(layer.weight)), layer.bias);
    pre.push_back(z);
    h = activate(z, layer.activation);
  }
  Tensor delta = Tensor::ones({x.rows(), net.out_dim()});
  for (std::size_t l = net.layers().size(); l-- > 0;) {
    const auto& layer = net.layers()[l];
    const Tensor& z = pre[l];
    switch (layer.activation) {
      case Activation::relu:
      case Activation::leaky_relu: {
        const double low = layer.activation == Activation::relu ? 0.0 : kLeakySlope;
        std::vector<double> mask(z.numel());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = z.data()[i] > 0 ? 1.0 : low;
        delta = mul(delta, Tensor::from_data(z.shape(), std::move(mask)));
        break;
      }
      case Activation::sigmoid: {
        Tensor s = sigmoid(z);
        delta = mul(delta, mul(s, 1.0 - s));
        break;
      }
      case Activation::identity: break;
    }
    delta = matmul(delta, layer.weight);
  }
  return delta;
}

// FNV-1a over the raw bytes of every parameter value.
inline std::uint64_t parameter_hash(const std::vector<Tensor>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params)
    for (double v : p.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
      }
    }
  return h;
}

inline std::uint64_t parameter_hash(const Mlp& net) { return parameter_hash(net.parameters()); }

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
  AdamOptions options;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)) {
    state_.options = options;
    for (const auto& p : params_) {
      state_.first_moment.emplace_back(p.numel(), 0.0);
      state_.second_moment.emplace_back(p.numel(), 0.0);
    }
  }

  // One Adam update of every trainable parameter. Frozen parameters are
  // skipped; gradients are left in place for the caller to clear.
  void step() {
    ++state_.step;
    const auto& o = state_.options;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.requires_grad()) continue;
      if (!p.has_grad()) throw StateError("adam: parameter " + std::to_string(k) + " has no gradient");
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
        w[i] -= o.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamState& state() const { return state_; }
  const std::vector<Tensor>& parameters() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

inline void adam_step(Adam& opt) { opt.step(); }

inline std::vector<Tensor> concat_parameters(std::initializer_list<std::vector<Tensor>> groups) {
  std::vector<Tensor> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace d3gzsl
