#pragma once

// Second-order latent dynamics, decoder and Gaussian densities.
//
// A latent state of even width d is [position | velocity]. The dynamics
// network predicts only the velocity derivative; the position derivative is
// the velocity itself. The decoder reads only the position half.

#include <cmath>
#include <numbers>

#include "lmsode/nn.hpp"
#include "lmsode/odeint.hpp"

namespace lmsode {

struct DynamicsParams {
  MlpParams velocity_field;  // R^d -> R^{d/2}

  template <class F>
  void for_each_tensor(F&& f) { velocity_field.for_each_tensor(f); }
  template <class F>
  void for_each_tensor(F&& f) const { velocity_field.for_each_tensor(f); }
};

struct DecoderParams {
  MlpParams net;  // R^{d/2} -> R^D
  bool squash = false;  // logistic output for pixel observations

  template <class F>
  void for_each_tensor(F&& f) { net.for_each_tensor(f); }
  template <class F>
  void for_each_tensor(F&& f) const { net.for_each_tensor(f); }
};

struct PriorConfig {
  double mu0 = 0.0;
  double sigma0 = 1.0;
  double xi = 1e-4;  // required average gap between a block end and the next shooting variable
  double sigma_y = 1e-3;
  double weight_prior_mean = 0.0;
  double weight_prior_std = 1.0;

  double sigma_c(std::size_t latent_dim) const { return xi / std::sqrt(static_cast<double>(latent_dim)); }

  void validate() const {
    if (!(sigma0 > 0.0)) throw ConfigError("prior: sigma0 must be > 0");
    if (!(xi > 0.0)) throw ConfigError("prior: xi must be > 0");
    if (!(sigma_y > 0.0)) throw ConfigError("prior: sigma_y must be > 0");
    if (!(weight_prior_std > 0.0)) throw ConfigError("prior: weight_prior_std must be > 0");
  }
};

// Diagonal Gaussian; mean and std share a shape (one row per variable set).
struct GaussianDiag {
  Tensor mean;
  Tensor std;

  void validate() const {
    detail::require_same_shape(mean, std, "GaussianDiag");
    for (double v : std.data())
      if (!(v >= 0.0)) throw ContractError("GaussianDiag: std must be non-negative");
  }
};

inline void require_even_latent(std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("latent dimension must be even and positive, got " + std::to_string(d));
}

inline DynamicsParams make_dynamics(std::size_t d, std::size_t hidden, std::size_t hidden_layers, Rng& rng) {
  require_even_latent(d);
  std::vector<std::size_t> widths{d};
  for (std::size_t i = 0; i < hidden_layers; ++i) widths.push_back(hidden);
  widths.push_back(d / 2);
  return {make_mlp(widths, Activation::Relu, Activation::Identity, rng)};
}

inline DecoderParams make_decoder(std::size_t d, std::size_t obs_dim, std::size_t hidden, Rng& rng,
                                  bool squash = false) {
  require_even_latent(d);
  return {make_mlp({d / 2, hidden, obs_dim}, Activation::Relu, Activation::Identity, rng), squash};
}

// f(x) = [x_v ; f_v(x)] for a state of shape [d] or [rows, d].
inline Tensor dynamics_eval(const DynamicsParams& params, const Tensor& x) {
  const std::size_t d = x.cols();
  require_even_latent(d);
  if (params.velocity_field.in_width() != d || params.velocity_field.out_width() != d / 2)
    throw ShapeError("dynamics_eval: network must map R^" + std::to_string(d) + " -> R^" + std::to_string(d / 2));
  const std::size_t axis = x.rank() == 2 ? 1 : 0;
  return concat({slice(x, axis, d / 2, d), mlp_forward(params.velocity_field, x)}, axis);
}

inline VectorField dynamics_field(const DynamicsParams& params) {
  return [&params](const Tensor& x) { return dynamics_eval(params, x); };
}

inline Tensor position_part(const Tensor& x) {
  const std::size_t d = x.cols();
  require_even_latent(d);
  return slice(x, x.rank() == 2 ? 1 : 0, 0, d / 2);
}

inline Tensor logistic(const Tensor& z) {
  // 1 / (1 + exp(-z)) = exp(-log(1 + exp(-z)))
  return exp(neg(log(add_scalar(exp(neg(z)), 1.0))));
}

inline Tensor decode(const DecoderParams& params, const Tensor& x) {
  Tensor out = mlp_forward(params.net, position_part(x));
  return params.squash ? logistic(out) : out;
}

// Sum over elements of log N(value | mean, std^2) with a scalar std.
inline Tensor gaussian_log_density(const Tensor& value, const Tensor& mean, double std_dev) {
  const double n = static_cast<double>(value.size());
  const double norm = -0.5 * n * std::log(2.0 * std::numbers::pi * std_dev * std_dev);
  return add_scalar(scale(sum(square(sub(value, mean))), -0.5 / (std_dev * std_dev)), norm);
}

// log N(y | g(x_p), sigma_y^2 I); y and x may be single rows or matching row batches.
inline Tensor log_likelihood(const Tensor& y, const Tensor& x, const DecoderParams& dec, double sigma_y) {
  if (!(sigma_y > 0.0)) throw ContractError("log_likelihood: sigma_y must be > 0");
  return gaussian_log_density(y, decode(dec, x), sigma_y);
}

// log N(s_b | s_end, sigma_c^2 I).
inline Tensor continuity_log_density(const Tensor& s_b, const Tensor& s_end, double sigma_c) {
  if (!(sigma_c > 0.0)) throw ContractError("continuity_log_density: sigma_c must be > 0");
  detail::require_same_shape(s_b, s_end, "continuity_log_density");
  return gaussian_log_density(s_b, s_end, sigma_c);
}

// log N(theta | mean, std^2 I) summed over every tensor of a parameter structure.
template <class P>
double weight_prior_log_density(const P& params, double prior_mean, double prior_std) {
  double total = 0.0;
  params.for_each_tensor([&](const Tensor& t) {
    total += gaussian_log_density(t.detached(), Tensor::filled(t.shape(), prior_mean), prior_std).item();
  });
  return total;
}

}  // namespace lmsode
