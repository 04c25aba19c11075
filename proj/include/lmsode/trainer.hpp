#pragma once

// Adam optimisation of the negative ELBO, training-mode baselines, the
// loss-landscape probe and the block continuity gap.

#include <chrono>
#include <functional>

#include "lmsode/synthdata.hpp"

namespace lmsode {

enum class TrainMode { MS, SS, SSSub, SSProgr };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::SS: return "ss";
    case TrainMode::SSSub: return "ss-sub";
    case TrainMode::SSProgr: return "ss-progr";
    case TrainMode::MS: break;
  }
  return "ms";
}

inline TrainMode train_mode_from_name(const std::string& s) {
  if (s == "ms") return TrainMode::MS;
  if (s == "ss") return TrainMode::SS;
  if (s == "ss-sub" || s == "ss_sub") return TrainMode::SSSub;
  if (s == "ss-progr" || s == "ss_progr") return TrainMode::SSProgr;
  throw ConfigError("unknown training mode '" + s + "' (expected ms, ss, ss-sub or ss-progr)");
}

struct TrainConfig {
  std::size_t iterations = 20000;
  double lr0 = 3e-4;
  double lr1 = 1e-5;
  std::size_t batch_size = 16;
  std::size_t block_size = 5;
  TrainMode mode = TrainMode::MS;
  std::size_t sub_length = 6;       // SS-sub: observations per random sub-trajectory
  std::size_t progr_start = 5;      // SS-progr: initial prefix length
  std::size_t progr_period = 2000;  // SS-progr: iterations between doublings
  std::size_t eval_every = 250;
  double delta_test = 0.15;
  std::size_t val_samples = 1;      // 1 with posterior means; >1 draws samples
  double delta_r_fraction = 0.15;   // attention radius as a fraction of the training interval
  double continuity_scale = 1.0;
  std::size_t max_solver_failures = 5;
  std::uint64_t seed = 0;
  ModelConfig model;

  void validate() const {
    if (iterations < 1) throw ConfigError("train: iterations must be >= 1");
    if (!(lr1 > 0.0 && lr0 >= lr1)) throw ConfigError("train: need lr0 >= lr1 > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (block_size < 1) throw ConfigError("train: block_size must be >= 1");
    if (sub_length < 2) throw ConfigError("train: sub_length must be >= 2");
    if (progr_start < 2) throw ConfigError("train: progr_start must be >= 2");
    if (progr_period < 1) throw ConfigError("train: progr_period must be >= 1");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
    if (!(delta_test > 0.0 && delta_test < 1.0)) throw ConfigError("train: delta_test must lie in (0, 1)");
    if (!(delta_r_fraction > 0.0)) throw ConfigError("train: delta_r_fraction must be > 0");
    if (!(continuity_scale >= 0.0)) throw ConfigError("train: continuity_scale must be >= 0");
    if (val_samples < 1) throw ConfigError("train: val_samples must be >= 1");
    model.validate();
  }
};

// lr0 * (lr1 / lr0)^(i / I)
inline double lr_schedule(std::size_t i, std::size_t total, double lr0, double lr1) {
  if (total == 0 || i > total) throw ContractError("lr_schedule: need 0 <= i <= I and I >= 1");
  return lr0 * std::pow(lr1 / lr0, static_cast<double>(i) / static_cast<double>(total));
}

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size() || s.m.size() != params.size())
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i])) throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.eps);
  }
}

struct MetricsRow {
  std::size_t iteration = 0;
  double lr = 0.0;
  ElboTerms elbo;
  double val_mse = 0.0;
};

inline const char* kMetricsHeader = "iteration,lr,elbo,term_i,term_ii,term_iii,term_iv,term_v,term_vi,val_mse";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  char buf[512];
  for (const auto& r : rows) {
    const auto& e = r.elbo;
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.lr,
                  e.total, e.term_i, e.term_ii, e.term_iii, e.term_iv, e.term_v, e.term_vi, r.val_mse);
    out += buf;
  }
  return out;
}

struct TrainResult {
  ModelParams best;   // parameters with the lowest validation MSE
  ModelParams final;  // last iterate
  std::vector<MetricsRow> history;
  std::size_t best_iteration = 0;
  double best_val_mse = kInfinity;
  double obs_scale = 1.0;  // observations were divided by this
  double delta_r = 0.0;
  std::size_t skipped_iterations = 0;
  double seconds = 0.0;
  std::string rng_state;
};

// Encoder radius for a dataset: a fraction of the training interval.
inline double resolve_delta_r(const Dataset& ds, double fraction) {
  return fraction * (ds.config.t_last - ds.config.t_first);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (i + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Contiguous piece [begin, begin + len) of a trajectory.
inline Trajectory sub_trajectory(const Trajectory& tr, std::size_t begin, std::size_t len) {
  std::vector<double> t(tr.grid.times().begin() + static_cast<std::ptrdiff_t>(begin),
                        tr.grid.times().begin() + static_cast<std::ptrdiff_t>(begin + len));
  return {TimeGrid(std::move(t)), slice(tr.y, 0, begin, begin + len)};
}

// Prefix length used by SS-progr at iteration i.
inline std::size_t progressive_length(std::size_t i, std::size_t start, std::size_t period, std::size_t full) {
  std::size_t len = start;
  for (std::size_t k = i / period; k > 0 && len < full; --k) len *= 2;
  return std::min(len, full);
}

inline ModelConfig effective_model_config(const TrainConfig& cfg, double delta_r) {
  ModelConfig m = cfg.model;
  m.encoder.delta_r = delta_r;
  return m;
}

// Called at every evaluation with the current (not best) parameters.
using ProgressFn = std::function<void(const MetricsRow&, const ModelParams&)>;

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (ds.train.empty()) throw ContractError("train: empty training split");
  const auto clock0 = std::chrono::steady_clock::now();

  TrainResult res;
  res.obs_scale = max_abs_train(ds);
  if (!(res.obs_scale > 0.0)) res.obs_scale = 1.0;
  res.delta_r = resolve_delta_r(ds, cfg.delta_r_fraction);
  const ModelConfig mcfg = effective_model_config(cfg, res.delta_r);
  const auto train_set = normalized(ds.train, res.obs_scale);
  const auto val_set = normalized(ds.val.empty() ? ds.train : ds.val, res.obs_scale);

  Rng rng = derive_rng(cfg.seed, 0);
  ModelParams params = make_model(mcfg, ds.config.obs_dim(), ds.config.obs == ObsMode::Pixels, rng);
  std::vector<double> flat = flatten(params);
  AdamState adam(flat.size());

  std::vector<BlockPartition> ms_parts;
  if (cfg.mode == TrainMode::MS)
    for (const auto& tr : train_set) ms_parts.push_back(make_partition(tr.grid, std::min(cfg.block_size, tr.grid.size() - 1)));

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const double weight_scale = 1.0 / static_cast<double>(train_set.size());
  std::size_t consecutive_failures = 0;

  auto validate_now = [&](const ModelParams& p) {
    return evaluate_mse(val_set, p, mcfg, cfg.delta_test, cfg.val_samples, mix_seed(cfg.seed, 0xa11), cfg.val_samples == 1)
        .mse;
  };

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const double lr = lr_schedule(it - 1, cfg.iterations, cfg.lr0, cfg.lr1);
    // Minibatch: walk a reshuffled permutation of the training set.
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(cfg.batch_size, train_set.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::sort(batch.begin(), batch.end());

    std::vector<Trajectory> pieces;
    std::vector<BlockPartition> parts;
    pieces.reserve(batch.size());
    parts.reserve(batch.size());
    for (std::size_t k : batch) {
      const Trajectory& tr = train_set[k];
      switch (cfg.mode) {
        case TrainMode::MS:
          pieces.push_back(tr);
          parts.push_back(ms_parts[k]);
          break;
        case TrainMode::SS:
          pieces.push_back(tr);
          parts.push_back(make_partition(tr.grid, tr.grid.size() - 1));
          break;
        case TrainMode::SSSub: {
          const std::size_t len = std::min(cfg.sub_length, tr.grid.size());
          std::uniform_int_distribution<std::size_t> ud(0, tr.grid.size() - len);
          pieces.push_back(sub_trajectory(tr, ud(rng), len));
          parts.push_back(make_partition(pieces.back().grid, len - 1));
          break;
        }
        case TrainMode::SSProgr: {
          const std::size_t len = progressive_length(it - 1, cfg.progr_start, cfg.progr_period, tr.grid.size());
          pieces.push_back(sub_trajectory(tr, 0, len));
          parts.push_back(make_partition(pieces.back().grid, len - 1));
          break;
        }
      }
    }
    std::vector<ElboItem> items;
    for (std::size_t r = 0; r < batch.size(); ++r) items.push_back({&pieces[r], &parts[r], batch[r]});

    ElboTerms terms;
    try {
      Tape tape;
      const ModelParams attached = attach(tape, params);
      ElboOptions opt;
      opt.continuity_scale = cfg.continuity_scale;
      opt.weight_kl_scale = weight_scale;
      opt.dropout = true;
      const ElboResult er = elbo_batch(items, attached, mcfg, mix_seed(cfg.seed, it), opt);
      terms = er.terms;
      const Gradients g = tape.backward(neg(er.objective));
      const std::vector<double> grad = flatten(gradients_of(g, attached));
      adam_step(adam, flat, grad, lr);
      params = unflatten(std::move(params), flat);
      consecutive_failures = 0;
    } catch (const NumericError& e) {
      ++res.skipped_iterations;
      if (++consecutive_failures >= cfg.max_solver_failures)
        throw NumericError("training aborted at iteration " + std::to_string(it) + " after " +
                           std::to_string(consecutive_failures) + " consecutive failures: " + e.what());
      continue;
    }

    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      MetricsRow row{it, lr, terms, validate_now(params)};
      if (row.val_mse < res.best_val_mse || res.history.empty()) {
        res.best_val_mse = row.val_mse;
        res.best_iteration = it;
        res.best = params;
      }
      res.history.push_back(row);
      if (progress) progress(row, params);
    }
  }
  res.final = params;
  if (res.history.empty()) res.best = params;
  std::ostringstream rs;
  rs << rng;
  res.rng_state = rs.str();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock0).count();
  return res;
}

// ---- probes -----------------------------------------------------------------

struct LandscapePoint {
  double c = 0.0;
  double loss = 0.0;
};

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  if (n == 0) throw ContractError("linspace: need at least one point");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

// Mean single-shooting negative ELBO over `data` prefixes of `prefix_len`
// observations at posterior means.
inline double prefix_loss(const ModelParams& model, const std::vector<Trajectory>& data, std::size_t prefix_len,
                          const ModelConfig& cfg) {
  std::vector<Trajectory> pieces;
  std::vector<BlockPartition> parts;
  pieces.reserve(data.size());
  parts.reserve(data.size());
  for (const auto& tr : data) {
    if (prefix_len < 2 || prefix_len > tr.grid.size())
      throw ContractError("prefix length " + std::to_string(prefix_len) + " outside [2, " +
                          std::to_string(tr.grid.size()) + "]");
    pieces.push_back(sub_trajectory(tr, 0, prefix_len));
    parts.push_back(make_partition(pieces.back().grid, prefix_len - 1));
  }
  std::vector<ElboItem> items;
  for (std::size_t r = 0; r < pieces.size(); ++r) items.push_back({&pieces[r], &parts[r], r});
  ElboOptions opt;
  opt.use_means = true;
  opt.weight_kl_scale = 1.0 / static_cast<double>(data.size());
  return -elbo_batch(items, model, cfg, 0, opt).objective.item();
}

// Loss at dynamics means scaled by each c; solver or numeric failure gives +inf.
inline std::vector<LandscapePoint> loss_landscape(const ModelParams& model, const std::vector<Trajectory>& data,
                                                  std::size_t prefix_len, const std::vector<double>& c_grid,
                                                  const ModelConfig& cfg) {
  if (c_grid.empty()) throw ContractError("loss_landscape: empty c grid");
  std::vector<LandscapePoint> out;
  for (double c : c_grid) {
    ModelParams scaled = model;
    scaled.weights.dyn_mean.for_each_tensor([c](Tensor& t) { t = scale(t, c); });
    double loss;
    try {
      loss = prefix_loss(scaled, data, prefix_len, cfg);
      if (!std::isfinite(loss)) loss = kInfinity;
    } catch (const NumericError&) {
      loss = kInfinity;
    }
    out.push_back({c, loss});
  }
  return out;
}

// max |dloss/dc| over neighbouring finite points.
inline double landscape_complexity(const std::vector<LandscapePoint>& pts) {
  double best = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto& a = pts[i - 1];
    const auto& b = pts[i];
    if (!std::isfinite(a.loss) || !std::isfinite(b.loss) || b.c == a.c) continue;
    best = std::max(best, std::abs((b.loss - a.loss) / (b.c - a.c)));
  }
  return best;
}

// Mean of ||s_end_b - gamma_b||^2 / d over blocks b >= 2 and trajectories,
// at posterior means.
inline double continuity_gap(const ModelParams& model, const std::vector<Trajectory>& data,
                             const std::vector<BlockPartition>& parts, const ModelConfig& cfg) {
  if (data.size() != parts.size()) throw ContractError("continuity_gap: one partition per trajectory required");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const BlockPartition& p = parts[k];
    if (p.count() < 2) throw ContractError("continuity_gap: needs at least two blocks");
    const GaussianDiag psi = encode(data[k].y, data[k].grid, p, model.encoder, cfg.encoder);
    const Tensor x = rollout_blocks(psi.mean, p, model.weights.dyn_mean, cfg.solver, data[k].grid);
    const Tensor ends = block_end_states(x, p);
    const std::size_t d = psi.mean.cols();
    for (std::size_t b = 1; b < p.count(); ++b) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = ends.at(b - 1, j) - psi.mean.at(b, j);
        sq += diff * diff;
      }
      total += sq / static_cast<double>(d);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace lmsode
