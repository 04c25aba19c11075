#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lmsode/tensor.hpp"

namespace lmsode {

using Rng = std::mt19937_64;

// Independent stream keyed by (seed, stream index).
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  return Rng(seq);
}

inline Tensor randn(const Shape& shape, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = nd(rng);
  return Tensor(shape, std::move(v));
}

enum class Activation { Identity, Tanh, Relu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: break;
  }
  return "identity";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::Tanh: return tanh(x);
    case Activation::Relu: return relu(x);
    case Activation::Identity: break;
  }
  return x;
}

// y = act(x W + b); W is [in, out].
struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::Identity;

  std::size_t in_width() const { return weight.rows(); }
  std::size_t out_width() const { return weight.cols(); }
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  std::size_t in_width() const { return layers.front().in_width(); }
  std::size_t out_width() const { return layers.back().out_width(); }

  template <class F>
  void for_each_tensor(F&& f) {
    for (auto& l : layers) {
      f(l.weight);
      f(l.bias);
    }
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    for (const auto& l : layers) {
      f(l.weight);
      f(l.bias);
    }
  }

  void validate() const {
    if (layers.empty()) throw ShapeError("mlp: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.cols() != l.weight.cols())
        throw ShapeError("mlp: layer " + std::to_string(i) + " has inconsistent weight/bias shapes");
      if (i > 0 && layers[i - 1].out_width() != l.in_width())
        throw ShapeError("mlp: layer " + std::to_string(i) + " input width does not match previous output");
    }
  }
};

// Glorot-uniform weights, zero biases.
inline MlpParams make_mlp(std::span<const std::size_t> widths, Activation hidden, Activation output, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
  MlpParams p;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i], out = widths[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> ud(-bound, bound);
    std::vector<double> w(in * out);
    for (double& v : w) v = ud(rng);
    p.layers.push_back({Tensor::matrix(in, out, std::move(w)), Tensor::zeros({out}),
                        i + 2 == widths.size() ? output : hidden});
  }
  return p;
}

inline MlpParams make_mlp(std::initializer_list<std::size_t> widths, Activation hidden, Activation output, Rng& rng) {
  std::vector<std::size_t> w(widths);
  return make_mlp(std::span<const std::size_t>(w), hidden, output, rng);
}

// Same architecture with every tensor filled by `v`.
inline MlpParams filled_like(const MlpParams& p, double v) {
  MlpParams out = p;
  out.for_each_tensor([&](Tensor& t) { t = Tensor::filled(t.shape(), v); });
  return out;
}

inline Tensor mlp_forward(const MlpParams& params, const Tensor& x) {
  if (params.layers.empty()) throw ShapeError("mlp_forward: no layers");
  if (x.rank() == 0 || x.cols() != params.in_width())
    throw ShapeError("mlp_forward: input " + shape_str(x.shape()) + " but first layer expects width " +
                     std::to_string(params.in_width()));
  Tensor h = x;
  for (const auto& l : params.layers) h = activate(add_bias(matmul(h, l.weight), l.bias), l.activation);
  return h;
}

// ---- parameter-structure helpers (any type with for_each_tensor) ----------

template <class P>
P attach(Tape& tape, P params) {
  params.for_each_tensor([&](Tensor& t) { t = tape.leaf(t); });
  return params;
}

template <class P>
P detach(P params) {
  params.for_each_tensor([&](Tensor& t) { t = t.detached(); });
  return params;
}

// Gradient structure shaped like `attached`.
template <class P>
P gradients_of(const Gradients& g, P attached) {
  attached.for_each_tensor([&](Tensor& t) { t = g.wrt(t); });
  return attached;
}

template <class P>
std::size_t parameter_count(const P& params) {
  std::size_t n = 0;
  params.for_each_tensor([&](const Tensor& t) { n += t.size(); });
  return n;
}

template <class P>
std::vector<double> flatten(const P& params) {
  std::vector<double> out;
  params.for_each_tensor([&](const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

template <class P>
P unflatten(P like, std::span<const double> flat) {
  std::size_t off = 0;
  like.for_each_tensor([&](Tensor& t) {
    if (off + t.size() > flat.size()) throw ShapeError("unflatten: not enough values");
    t = Tensor(t.shape(), std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                              flat.begin() + static_cast<std::ptrdiff_t>(off + t.size())));
    off += t.size();
  });
  if (off != flat.size()) throw ShapeError("unflatten: too many values");
  return like;
}

}  // namespace lmsode
