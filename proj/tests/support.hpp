#pragma once

// Shared helpers and independent reference implementations for the tests.
// Oracles here use plain loops and the standard library only, never the
// library's tensor ops.

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "lmsode/lmsode.hpp"

namespace lmsode::test {

// ||a - b|| / max(||a||, ||b||, floor)
inline double rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline double rel_err(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  return rel_err(a.data(), b.data(), floor);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor uniform(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<double> v(shape_size(s));
  for (double& x : v) x = ud(rng);
  return Tensor(s, std::move(v));
}

// Reverse-mode gradient of a scalar function of one tensor.
inline Tensor tape_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tape tape;
  const Tensor leaf = tape.leaf(x);
  return tape.backward(f(leaf)).wrt(leaf);
}

// Relative error between the tape gradient and central differences.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  const Tensor g = tape_grad(f, x);
  const Tensor fd = finite_diff_grad([&](const Tensor& v) { return f(v).item(); }, x, h);
  return rel_err(g, fd);
}

// log N(v | m, s^2), one coordinate.
inline double scalar_log_pdf(double v, double m, double s) {
  const double z = (v - m) / s;
  return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double oracle_kl(double mq, double sq, double mp, double sp) {
  return std::log(sp / sq) + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
}

// Row-vector MLP evaluated with nested loops.
inline std::vector<double> oracle_mlp(const MlpParams& p, std::vector<double> x) {
  for (const auto& l : p.layers) {
    const std::size_t in = l.weight.rows(), out = l.weight.cols();
    std::vector<double> y(out);
    for (std::size_t j = 0; j < out; ++j) {
      double s = l.bias[j];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * l.weight.at(i, j);
      switch (l.activation) {
        case Activation::Tanh: s = std::tanh(s); break;
        case Activation::Relu: s = s > 0.0 ? s : 0.0; break;
        case Activation::Identity: break;
      }
      y[j] = s;
    }
    x = std::move(y);
  }
  return x;
}

inline TimeGrid uniform_grid(std::size_t n, double t0 = 0.0, double dt = 0.1) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = t0 + dt * static_cast<double>(i);
  return TimeGrid(std::move(t));
}

// Dynamics whose velocity field is identically zero.
inline DynamicsParams zero_dynamics(std::size_t d, std::size_t hidden, Rng& rng) {
  DynamicsParams p = make_dynamics(d, hidden, 1, rng);
  p.velocity_field = filled_like(p.velocity_field, 0.0);
  return p;
}

// Second-order linear dynamics: x_v' = K x with a single identity layer.
inline DynamicsParams linear_dynamics(const std::vector<double>& k, std::size_t d) {
  DynamicsParams p;
  p.velocity_field.layers.push_back(
      {Tensor::matrix(d, d / 2, k), Tensor::zeros({d / 2}), Activation::Identity});
  return p;
}

}  // namespace lmsode::test
