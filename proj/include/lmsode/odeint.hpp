#pragma once

// Differentiable fixed-step RK4 and adaptive Dormand-Prince 5(4) solvers.
//
// Gradients are obtained by differentiating through the solver's own
// arithmetic (discretize-then-optimize). Every solve is batched over the
// rows of a rank-2 state: row r is integrated over its own duration, and all
// rows share step boundaries in normalized time tau = (t - t0_r) / duration_r.
// The vector field must be autonomous.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmsode/tensor.hpp"

namespace lmsode {

enum class SolverMethod { Rk4, Dopri5 };

struct SolverConfig {
  SolverMethod method = SolverMethod::Rk4;
  double steps_per_unit = 20.0;  // rk4
  double rtol = 1e-5;            // dopri5
  double atol = 1e-5;
  int max_steps = 100000;

  void validate() const {
    if (!(steps_per_unit >= 1.0)) throw ConfigError("solver: steps_per_unit must be >= 1");
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver: tolerances must be > 0");
    if (max_steps < 1) throw ConfigError("solver: max_steps must be >= 1");
  }
};

struct SolveStats {
  int accepted = 0;
  int rejected = 0;
};

using VectorField = std::function<Tensor(const Tensor&)>;

namespace detail {

// Per-row step sizes, collapsed to a scalar when every row shares it.
class RowStep {
 public:
  RowStep(std::span<const double> durations, const Shape& state_shape) : shape_(state_shape) {
    per_row_.assign(durations.begin(), durations.end());
    uniform_ = std::all_of(per_row_.begin(), per_row_.end(), [&](double v) { return v == per_row_.front(); });
  }

  // x + (c * duration_r) * k, row-wise.
  Tensor axpy(const Tensor& x, const Tensor& k, double c) const {
    if (uniform_) return add(x, scale(k, c * per_row_.front()));
    const std::size_t cols = shape_.size() == 2 ? shape_[1] : shape_size(shape_);
    std::vector<double> h(shape_size(shape_));
    for (std::size_t r = 0; r < per_row_.size(); ++r)
      std::fill_n(h.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, c * per_row_[r]);
    return add(x, mul(k, Tensor(shape_, std::move(h))));
  }

 private:
  Shape shape_;
  std::vector<double> per_row_;
  bool uniform_ = true;
};

inline void check_durations(const Tensor& x0, std::span<const double> durations) {
  if (x0.rows() != durations.size())
    throw ShapeError("ode solve: " + std::to_string(durations.size()) + " durations for " +
                     std::to_string(x0.rows()) + " state rows");
  for (double d : durations)
    if (!(d >= 0.0)) throw ContractError("ode solve: integration interval must satisfy t1 >= t0");
}

inline std::size_t first_bad_row(const Tensor& x) {
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i])) return i / c;
  return static_cast<std::size_t>(-1);
}

inline Tensor lin_comb(const std::vector<Tensor>& ks, std::span<const double> coef) {
  Tensor acc;
  bool have = false;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (coef[i] == 0.0) continue;
    Tensor term = coef[i] == 1.0 ? ks[i] : scale(ks[i], coef[i]);
    acc = have ? add(acc, term) : term;
    have = true;
  }
  return acc;
}

}  // namespace detail

// Classical RK4 with n = max_r ceil(duration_r * steps_per_unit) equal steps.
inline Tensor rk4_solve_batched(const VectorField& f, const Tensor& x0, std::span<const double> durations,
                                const SolverConfig& cfg) {
  detail::check_durations(x0, durations);
  const double longest = durations.empty() ? 0.0 : *std::max_element(durations.begin(), durations.end());
  if (longest == 0.0) return x0;
  const auto n = static_cast<long>(std::max(1.0, std::ceil(longest * cfg.steps_per_unit - 1e-9)));
  std::vector<double> per_step(durations.begin(), durations.end());
  for (double& d : per_step) d /= static_cast<double>(n);
  detail::RowStep h(per_step, x0.shape());

  Tensor x = x0;
  for (long step = 0; step < n; ++step) {
    const Tensor k1 = f(x);
    const Tensor k2 = f(h.axpy(x, k1, 0.5));
    const Tensor k3 = f(h.axpy(x, k2, 0.5));
    const Tensor k4 = f(h.axpy(x, k3, 1.0));
    const Tensor incr = add(add(k1, scale(add(k2, k3), 2.0)), k4);
    x = h.axpy(x, incr, 1.0 / 6.0);
    if (!all_finite(x))
      throw SolverError("rk4: non-finite state at step " + std::to_string(step + 1), detail::first_bad_row(x));
  }
  return x;
}

inline Tensor rk4_solve(const VectorField& f, const Tensor& x0, double t0, double t1, const SolverConfig& cfg) {
  if (!(t1 >= t0)) throw ContractError("rk4_solve: requires t1 >= t0");
  const double d = t1 - t0;
  if (x0.rank() == 2) {
    std::vector<double> ds(x0.rows(), d);
    return rk4_solve_batched(f, x0, ds, cfg);
  }
  const double ds[1] = {d};
  return rk4_solve_batched(f, x0, ds, cfg);
}

namespace dp5 {
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// 5th minus embedded 4th order weights.
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;
inline constexpr double safety = 0.9, min_factor = 0.2, max_factor = 5.0;
inline constexpr double pi_alpha = 0.7 / 5.0, pi_beta = 0.4 / 5.0;
}  // namespace dp5

// Dormand-Prince 5(4), PI step control on the max over rows of the RMS
// scaled error. Rejected trial stages stay on the tape but receive no gradient.
inline Tensor dopri5_solve_batched(const VectorField& f, const Tensor& x0, std::span<const double> durations,
                                   const SolverConfig& cfg, SolveStats* stats = nullptr) {
  detail::check_durations(x0, durations);
  SolveStats local;
  SolveStats& st = stats ? *stats : local;
  st = {};
  const double longest = durations.empty() ? 0.0 : *std::max_element(durations.begin(), durations.end());
  if (longest == 0.0) return x0;

  const std::size_t rows = x0.rows(), cols = x0.cols();
  Tensor x = x0;
  Tensor k1 = f(x);
  // An equilibrium of an autonomous field is a constant solution: one step is exact.
  const bool at_rest = std::all_of(k1.data().begin(), k1.data().end(), [](double v) { return v == 0.0; });
  double h = at_rest ? 1.0 : 0.01;
  double tau = 0.0;
  double err_prev = 1e-4;

  auto row_step = [&](double c) {
    std::vector<double> per(durations.begin(), durations.end());
    for (double& v : per) v *= c;
    return per;
  };

  while (tau < 1.0) {
    if (st.accepted + st.rejected >= cfg.max_steps)
      throw SolverError("dopri5: exceeded max_steps (" + std::to_string(cfg.max_steps) + ")",
                        static_cast<std::size_t>(-1));
    h = std::min(h, 1.0 - tau);
    const auto per = row_step(h);
    detail::RowStep step(per, x.shape());
    using namespace dp5;
    const Tensor k2 = f(step.axpy(x, k1, a21));
    const Tensor k3 = f(step.axpy(x, detail::lin_comb({k1, k2}, std::vector<double>{a31, a32}), 1.0));
    const Tensor k4 = f(step.axpy(x, detail::lin_comb({k1, k2, k3}, std::vector<double>{a41, a42, a43}), 1.0));
    const Tensor k5 =
        f(step.axpy(x, detail::lin_comb({k1, k2, k3, k4}, std::vector<double>{a51, a52, a53, a54}), 1.0));
    const Tensor k6 =
        f(step.axpy(x, detail::lin_comb({k1, k2, k3, k4, k5}, std::vector<double>{a61, a62, a63, a64, a65}), 1.0));
    const Tensor y1 =
        step.axpy(x, detail::lin_comb({k1, k2, k3, k4, k5, k6}, std::vector<double>{b1, 0.0, b3, b4, b5, b6}), 1.0);
    const Tensor k7 = f(y1);

    // Error estimate on plain values.
    const std::vector<const Tensor*> ks{&k1, &k2, &k3, &k4, &k5, &k6, &k7};
    const double ec[7] = {e1, 0.0, e3, e4, e5, e6, e7};
    double err = 0.0;
    bool finite = all_finite(y1);
    for (std::size_t r = 0; r < rows && finite; ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        double e = 0.0;
        for (std::size_t s = 0; s < 7; ++s)
          if (ec[s] != 0.0) e += ec[s] * (*ks[s])[i];
        e *= per[r];
        const double sc = cfg.atol + cfg.rtol * std::max(std::abs(x[i]), std::abs(y1[i]));
        ss += (e / sc) * (e / sc);
      }
      err = std::max(err, std::sqrt(ss / static_cast<double>(cols)));
    }
    if (!finite || !std::isfinite(err)) {
      if (h < 1e-12)
        throw SolverError("dopri5: non-finite state at step " + std::to_string(st.accepted + 1),
                          detail::first_bad_row(y1));
      h *= dp5::min_factor;
      ++st.rejected;
      continue;
    }
    if (err <= 1.0) {
      tau += h;
      if (1.0 - tau < 1e-12) tau = 1.0;
      x = y1;
      k1 = k7;
      ++st.accepted;
      double factor = err == 0.0 ? max_factor
                                 : safety * std::pow(err, -pi_alpha) * std::pow(std::max(err_prev, 1e-4), pi_beta);
      factor = std::clamp(factor, min_factor, max_factor);
      err_prev = err;
      h *= factor;
    } else {
      ++st.rejected;
      h *= std::clamp(safety * std::pow(err, -1.0 / 5.0), min_factor, 1.0);
    }
  }
  return x;
}

inline Tensor dopri5_solve(const VectorField& f, const Tensor& x0, double t0, double t1, const SolverConfig& cfg,
                           SolveStats* stats = nullptr) {
  if (!(t1 >= t0)) throw ContractError("dopri5_solve: requires t1 >= t0");
  const double d = t1 - t0;
  if (x0.rank() == 2) {
    std::vector<double> ds(x0.rows(), d);
    return dopri5_solve_batched(f, x0, ds, cfg, stats);
  }
  const double ds[1] = {d};
  return dopri5_solve_batched(f, x0, ds, cfg, stats);
}

inline Tensor ode_solve_batched(const VectorField& f, const Tensor& x0, std::span<const double> durations,
                                const SolverConfig& cfg) {
  return cfg.method == SolverMethod::Rk4 ? rk4_solve_batched(f, x0, durations, cfg)
                                         : dopri5_solve_batched(f, x0, durations, cfg);
}

inline Tensor ode_solve(const VectorField& f, const Tensor& x0, double t0, double t1, const SolverConfig& cfg) {
  return cfg.method == SolverMethod::Rk4 ? rk4_solve(f, x0, t0, t1, cfg) : dopri5_solve(f, x0, t0, t1, cfg);
}

inline const char* solver_name(SolverMethod m) { return m == SolverMethod::Rk4 ? "rk4" : "dopri5"; }

inline SolverMethod solver_from_name(const std::string& s) {
  if (s == "rk4") return SolverMethod::Rk4;
  if (s == "dopri5") return SolverMethod::Dopri5;
  throw ConfigError("unknown solver method '" + s + "'");
}

}  // namespace lmsode
