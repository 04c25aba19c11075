#pragma once

// Variational posterior over shooting variables and network weights, the
// six-term evidence lower bound, and posterior-predictive forecasting.

#include <cstdint>
#include <optional>

#include "lmsode/encoder.hpp"

namespace lmsode {

// An observed trajectory: y [N, D] on `grid`.
struct Trajectory {
  TimeGrid grid;
  Tensor y;
};

// q(theta) = N(mean, exp(log_std)^2) elementwise, for dynamics and decoder weights.
struct WeightPosterior {
  DynamicsParams dyn_mean, dyn_log_std;
  DecoderParams dec_mean, dec_log_std;

  template <class F>
  void for_each_tensor(F&& f) {
    dyn_mean.for_each_tensor(f), dyn_log_std.for_each_tensor(f);
    dec_mean.for_each_tensor(f), dec_log_std.for_each_tensor(f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    dyn_mean.for_each_tensor(f), dyn_log_std.for_each_tensor(f);
    dec_mean.for_each_tensor(f), dec_log_std.for_each_tensor(f);
  }
};

inline WeightPosterior make_weight_posterior(DynamicsParams dyn, DecoderParams dec, double std_init) {
  if (!(std_init > 0.0)) throw ConfigError("weight posterior: initial std must be > 0");
  WeightPosterior w;
  w.dyn_log_std = {filled_like(dyn.velocity_field, std::log(std_init))};
  w.dec_log_std = {filled_like(dec.net, std::log(std_init)), dec.squash};
  w.dyn_mean = std::move(dyn);
  w.dec_mean = std::move(dec);
  return w;
}

struct ModelConfig {
  std::size_t latent_dim = 8;
  std::size_t dyn_hidden = 64;
  std::size_t dyn_layers = 2;
  std::size_t dec_hidden = 32;
  double weight_std_init = 9e-4;
  EncoderConfig encoder;
  PriorConfig prior;
  SolverConfig solver;

  void validate() const {
    require_even_latent(latent_dim);
    if (dyn_hidden == 0 || dyn_layers == 0 || dec_hidden == 0) throw ConfigError("model: widths must be positive");
    if (!(weight_std_init > 0.0)) throw ConfigError("model: weight_std_init must be > 0");
    encoder.validate();
    prior.validate();
    solver.validate();
  }
};

struct ModelParams {
  EncoderParams encoder;
  WeightPosterior weights;

  template <class F>
  void for_each_tensor(F&& f) {
    encoder.for_each_tensor(f);
    weights.for_each_tensor(f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    encoder.for_each_tensor(f);
    weights.for_each_tensor(f);
  }
};

inline ModelParams make_model(const ModelConfig& cfg, std::size_t obs_dim, bool squash, Rng& rng) {
  cfg.validate();
  ModelParams m;
  m.encoder = make_encoder(cfg.encoder, obs_dim, cfg.latent_dim, rng);
  DynamicsParams dyn = make_dynamics(cfg.latent_dim, cfg.dyn_hidden, cfg.dyn_layers, rng);
  DecoderParams dec = make_decoder(cfg.latent_dim, obs_dim, cfg.dec_hidden, rng, squash);
  m.weights = make_weight_posterior(std::move(dyn), std::move(dec), cfg.weight_std_init);
  return m;
}

// sum_k [ ln(tp/tq) + (tq^2 + (gq - gp)^2) / (2 tp^2) - 1/2 ]
inline Tensor kl_diag_gaussian(const GaussianDiag& q, const GaussianDiag& p) {
  detail::require_same_shape(q.mean, p.mean, "kl_diag_gaussian");
  detail::require_same_shape(q.std, p.std, "kl_diag_gaussian");
  detail::require_same_shape(q.mean, q.std, "kl_diag_gaussian");
  const Tensor log_tp = log(p.std), log_tq = log(q.std);
  const Tensor inv_var_p = exp(scale(log_tp, -2.0));
  const Tensor quad = mul(add(square(q.std), square(sub(q.mean, p.mean))), inv_var_p);
  const double n = static_cast<double>(q.mean.size());
  return add_scalar(add(sum(sub(log_tp, log_tq)), scale(sum(quad), 0.5)), -0.5 * n);
}

// KL(N(mean, exp(log_std)^2) || N(prior_mean, prior_std^2)) in closed form.
inline Tensor kl_log_std_vs_prior(const Tensor& mean, const Tensor& log_std, double prior_mean, double prior_std) {
  const double n = static_cast<double>(mean.size());
  const Tensor quad = add(exp(scale(log_std, 2.0)), square(add_scalar(mean, -prior_mean)));
  return add_scalar(add(neg(sum(log_std)), scale(sum(quad), 0.5 / (prior_std * prior_std))),
                    n * (std::log(prior_std) - 0.5));
}

template <class P>
Tensor weight_kl(const P& mean, const P& log_std, double prior_mean, double prior_std) {
  std::vector<const Tensor*> ms, ls;
  mean.for_each_tensor([&](const Tensor& t) { ms.push_back(&t); });
  log_std.for_each_tensor([&](const Tensor& t) { ls.push_back(&t); });
  if (ms.size() != ls.size()) throw ShapeError("weight_kl: mean and log-std structures differ");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < ms.size(); ++i)
    total = add(total, kl_log_std_vs_prior(*ms[i], *ls[i], prior_mean, prior_std));
  return total;
}

// gamma + tau * eta with eta ~ N(0, I). A zero std returns the mean exactly.
inline Tensor sample_reparam(const GaussianDiag& g, Rng& rng) {
  detail::require_same_shape(g.mean, g.std, "sample_reparam");
  return add(g.mean, mul(g.std, randn(g.mean.shape(), rng)));
}

struct SampledWeights {
  DynamicsParams dyn;
  DecoderParams dec;
};

// One draw of (theta_dyn, theta_dec); `use_mean` returns the posterior means.
inline SampledWeights sample_weights(const WeightPosterior& w, Rng& rng, bool use_mean) {
  if (use_mean) return {w.dyn_mean, w.dec_mean};
  auto draw = [&rng](auto mean, const auto& log_std) {
    std::vector<const Tensor*> ls;
    log_std.for_each_tensor([&](const Tensor& t) { ls.push_back(&t); });
    std::size_t i = 0;
    mean.for_each_tensor([&](Tensor& t) {
      t = sample_reparam({t, exp(*ls[i])}, rng);
      ++i;
    });
    return mean;
  };
  return {draw(w.dyn_mean, w.dyn_log_std), draw(w.dec_mean, w.dec_log_std)};
}

// Per-trajectory terms (i)-(iv) are averaged over the batch; (v) and (vi)
// are the weight KLs, counted once.
struct ElboTerms {
  double term_i = 0, term_ii = 0, term_iii = 0, term_iv = 0, term_v = 0, term_vi = 0, total = 0;
};

struct ElboOptions {
  double continuity_scale = 1.0;  // multiplier on term (iv)
  double weight_kl_scale = 1.0;   // multiplier on (v)+(vi) in the objective
  bool use_means = false;         // skip sampling: shooting variables and weights at their means
  bool dropout = false;           // structured attention dropout in the encoder
};

struct ElboResult {
  ElboTerms terms;
  Tensor objective;  // mean_b[(i)+(ii)-(iii)-(iv)] - weight_kl_scale * ((v)+(vi)); maximise
};

struct ElboItem {
  const Trajectory* traj = nullptr;
  const BlockPartition* partition = nullptr;
  std::uint64_t stream = 0;  // rng stream for this trajectory's encoder dropout and shooting samples
};

inline constexpr std::uint64_t kWeightStream = 0xFFFF'FFFF'0000'0001ull;

namespace detail {
inline void require_finite_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("elbo: term ") + name + " is not finite");
}
}  // namespace detail

// Evidence lower bound over a minibatch with one Monte-Carlo sample.
// All trajectories share one weight draw; their block rollouts are
// integrated together.
inline ElboResult elbo_batch(const std::vector<ElboItem>& items, const ModelParams& model, const ModelConfig& cfg,
                             std::uint64_t seed, const ElboOptions& opt = {}) {
  if (items.empty()) throw ContractError("elbo: empty batch");
  const std::size_t d = cfg.latent_dim;
  const PriorConfig& prior = cfg.prior;
  Rng wrng = derive_rng(seed, kWeightStream);
  const SampledWeights w = sample_weights(model.weights, wrng, opt.use_means);

  std::vector<GaussianDiag> psi(items.size());
  std::vector<Tensor> shooting(items.size());
  std::vector<RolloutRequest> requests;
  std::vector<std::size_t> first_request(items.size());
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto& it = items[r];
    validate_partition(*it.partition, it.traj->grid);
    Rng rng = derive_rng(seed, it.stream);
    psi[r] = encode(it.traj->y, it.traj->grid, *it.partition, model.encoder, cfg.encoder,
                    opt.dropout ? &rng : nullptr);
    shooting[r] = opt.use_means ? psi[r].mean : sample_reparam(psi[r], rng);
    first_request[r] = requests.size();
    for (auto& q : block_requests(*it.partition, it.traj->grid)) requests.push_back(std::move(q));
  }

  Tensor states;
  try {
    states = rollout_requests(w.dyn, concat(shooting, 0), requests, cfg.solver);
  } catch (const SolverError& e) {
    std::string where = "unknown block";
    for (std::size_t r = items.size(); r-- > 0;)
      if (e.row() != static_cast<std::size_t>(-1) && e.row() >= first_request[r]) {
        where = "trajectory " + std::to_string(r) + ", block " + std::to_string(e.row() - first_request[r] + 1);
        break;
      }
    throw SolverError("elbo: rollout failed in " + where + ": " + e.what(), e.row());
  }

  const double sigma_c = prior.sigma_c(d);
  Tensor t1 = Tensor::scalar(0.0), t2 = t1, t3 = t1, t4 = t1;
  std::size_t offset = 0;
  for (std::size_t r = 0; r < items.size(); ++r) {
    const Trajectory& tr = *items[r].traj;
    const BlockPartition& p = *items[r].partition;
    const std::size_t n = tr.grid.size();
    const Tensor x_rest = slice(states, 0, offset, offset + n - 1);
    const Tensor s = shooting[r];
    t1 = add(t1, log_likelihood(slice(tr.y, 0, 0, 1), slice(s, 0, 0, 1), w.dec, prior.sigma_y));
    t2 = add(t2, log_likelihood(slice(tr.y, 0, 1, n), x_rest, w.dec, prior.sigma_y));
    const GaussianDiag q1{slice(psi[r].mean, 0, 0, 1), slice(psi[r].std, 0, 0, 1)};
    const GaussianDiag p1{Tensor::filled({1, d}, prior.mu0), Tensor::filled({1, d}, prior.sigma0)};
    t3 = add(t3, kl_diag_gaussian(q1, p1));
    if (p.count() > 1) {
      std::vector<std::size_t> ends;
      for (std::size_t b = 1; b < p.count(); ++b) ends.push_back(p.block_end(b - 1) - 1);
      const std::size_t m = p.count() - 1;
      const GaussianDiag qb{slice(psi[r].mean, 0, 1, p.count()), slice(psi[r].std, 0, 1, p.count())};
      const GaussianDiag pb{gather_rows(x_rest, ends), Tensor::filled({m, d}, sigma_c)};
      t4 = add(t4, kl_diag_gaussian(qb, pb));
    }
    offset += n - 1;
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  t1 = scale(t1, inv), t2 = scale(t2, inv), t3 = scale(t3, inv), t4 = scale(t4, inv);
  const Tensor t5 = weight_kl(model.weights.dyn_mean, model.weights.dyn_log_std, prior.weight_prior_mean,
                              prior.weight_prior_std);
  const Tensor t6 = weight_kl(model.weights.dec_mean, model.weights.dec_log_std, prior.weight_prior_mean,
                              prior.weight_prior_std);

  ElboResult res;
  auto& e = res.terms;
  e.term_i = t1.item(), e.term_ii = t2.item(), e.term_iii = t3.item();
  e.term_iv = t4.item(), e.term_v = t5.item(), e.term_vi = t6.item();
  e.total = e.term_i + e.term_ii - e.term_iii - e.term_iv - e.term_v - e.term_vi;
  detail::require_finite_term(e.term_i, "(i)");
  detail::require_finite_term(e.term_ii, "(ii)");
  detail::require_finite_term(e.term_iii, "(iii)");
  detail::require_finite_term(e.term_iv, "(iv)");
  detail::require_finite_term(e.term_v, "(v)");
  detail::require_finite_term(e.term_vi, "(vi)");
  const Tensor data = sub(sub(add(t1, t2), t3), scale(t4, opt.continuity_scale));
  res.objective = sub(data, scale(add(t5, t6), opt.weight_kl_scale));
  return res;
}

inline ElboResult elbo(const Trajectory& traj, const BlockPartition& partition, const ModelParams& model,
                       const ModelConfig& cfg, std::uint64_t seed, const ElboOptions& opt = {}) {
  return elbo_batch({ElboItem{&traj, &partition, 0}}, model, cfg, seed, opt);
}

// Posterior-predictive mean at `t_future` given an observed prefix, averaged
// over `n_samples` draws of (weights, s_1).
inline Tensor forecast(const Tensor& prefix_y, const TimeGrid& prefix_grid, const std::vector<double>& t_future,
                       const ModelParams& model, const ModelConfig& cfg, std::size_t n_samples, Rng& rng,
                       bool use_means = false) {
  if (n_samples == 0) throw ContractError("forecast: n_samples must be >= 1");
  if (t_future.empty()) throw ContractError("forecast: no target times");
  for (std::size_t k = 0; k < t_future.size(); ++k) {
    if (t_future[k] < prefix_grid.front()) throw ContractError("forecast: target time precedes the first observation");
    if (k > 0 && t_future[k] < t_future[k - 1]) throw ContractError("forecast: target times must be non-decreasing");
  }
  const BlockPartition single = make_partition(prefix_grid, prefix_grid.size() - 1);
  const RolloutRequest req{prefix_grid.front(), t_future};
  Tensor acc;
  for (std::size_t k = 0; k < n_samples; ++k) {
    const SampledWeights w = sample_weights(model.weights, rng, use_means);
    const GaussianDiag psi = encode(prefix_y, prefix_grid, single, model.encoder, cfg.encoder);
    const Tensor s1 = use_means ? psi.mean : sample_reparam(psi, rng);
    const Tensor pred = decode(w.dec, rollout_requests(w.dyn, s1, {req}, cfg.solver));
    acc = k == 0 ? pred : add(acc, pred);
  }
  return n_samples == 1 ? acc : scale(acc, 1.0 / static_cast<double>(n_samples));
}

// Observations within [t_1, t_1 + delta * (t_N - t_1)].
inline std::size_t conditioning_length(const TimeGrid& grid, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ContractError("conditioning window fraction must lie in (0, 1)");
  const double limit = grid.front() + delta * grid.span();
  std::size_t m = 0;
  while (m < grid.size() && grid[m] <= limit + 1e-12 * grid.span()) ++m;
  return m;
}

struct MseReport {
  double mse = 0.0;
  std::vector<double> per_trajectory;
};

inline double mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// Test protocol: condition on the initial window, forecast the whole grid.
inline MseReport evaluate_mse(const std::vector<Trajectory>& data, const ModelParams& model, const ModelConfig& cfg,
                              double delta_test, std::size_t n_samples, std::uint64_t seed, bool use_means = false) {
  if (data.empty()) throw ContractError("evaluate_mse: empty dataset");
  MseReport rep;
  double total = 0.0, count = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const Trajectory& tr = data[k];
    const std::size_t m = conditioning_length(tr.grid, delta_test);
    if (m < 2)
      throw ContractError("evaluate_mse: trajectory " + std::to_string(k) +
                          " has fewer than 2 observations in the conditioning window");
    Rng rng = derive_rng(seed, k);
    const Tensor pred = forecast(slice(tr.y, 0, 0, m), tr.grid.prefix(m), tr.grid.times(), model, cfg, n_samples, rng,
                                 use_means);
    const double e = mse(pred, tr.y);
    rep.per_trajectory.push_back(e);
    total += e * static_cast<double>(tr.y.size());
    count += static_cast<double>(tr.y.size());
  }
  rep.mse = total / count;
  return rep;
}

}  // namespace lmsode
