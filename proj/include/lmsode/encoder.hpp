#pragma once

// Recognition network: pointwise compression, two transformer aggregators
// (position / velocity) with temporal attention and relative positional
// encodings, and a linear readout to per-block Gaussian parameters.

#include <cmath>
#include <limits>
#include <optional>
#include <random>

#include "lmsode/blocks.hpp"

namespace lmsode {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct EncoderConfig {
  std::size_t d_low = 32;
  std::size_t comp_hidden = 32;
  std::size_t ff_hidden = 64;
  std::size_t layers_pos = 2;
  std::size_t layers_vel = 2;
  double epsilon = 1e-2;
  double p = kInfinity;  // a positive integer, or infinity for a hard mask
  double delta_r = 0.45;
  double dropout = 0.1;
  double tau_min = 0.02;
  bool temporal_attention = true;
  bool relative_pe = true;             // off: sinusoidal absolute encodings instead
  bool ta_first_layer_only = false;

  void validate() const {
    if (d_low == 0 || comp_hidden == 0 || ff_hidden == 0) throw ConfigError("encoder: widths must be positive");
    if (layers_pos == 0 || layers_vel == 0) throw ConfigError("encoder: each aggregator needs at least one layer");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("encoder: epsilon must lie in (0, 1]");
    if (!(p == kInfinity || (p >= 1.0 && std::floor(p) == p)))
      throw ConfigError("encoder: p must be a positive integer or infinity");
    if (!(delta_r > 0.0)) throw ConfigError("encoder: delta_r must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must lie in [0, 1)");
    if (!(tau_min >= 0.0)) throw ConfigError("encoder: tau_min must be >= 0");
  }

  bool uses_ta(std::size_t layer) const { return temporal_attention && (!ta_first_layer_only || layer == 0); }
};

struct AttentionLayerParams {
  Tensor wq, wk, wv;  // [d_low, d_low], applied as alpha W
  MlpParams ff;       // d_low -> ff_hidden -> d_low, added residually

  template <class F>
  void for_each_tensor(F&& f) {
    f(wq), f(wk), f(wv);
    ff.for_each_tensor(f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f(wq), f(wk), f(wv);
    ff.for_each_tensor(f);
  }
};

struct EncoderParams {
  MlpParams compress;                          // D -> d_low
  std::vector<AttentionLayerParams> pos_layers;
  std::vector<AttentionLayerParams> vel_layers;
  Tensor rpe;                                  // w [d_low], shared by every attention layer
  MlpParams read_mean_p, read_logstd_p;        // d_low -> d/2
  MlpParams read_mean_v, read_logstd_v;

  template <class F>
  void for_each_tensor(F&& f) {
    compress.for_each_tensor(f);
    for (auto& l : pos_layers) l.for_each_tensor(f);
    for (auto& l : vel_layers) l.for_each_tensor(f);
    f(rpe);
    read_mean_p.for_each_tensor(f), read_logstd_p.for_each_tensor(f);
    read_mean_v.for_each_tensor(f), read_logstd_v.for_each_tensor(f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    compress.for_each_tensor(f);
    for (const auto& l : pos_layers) l.for_each_tensor(f);
    for (const auto& l : vel_layers) l.for_each_tensor(f);
    f(rpe);
    read_mean_p.for_each_tensor(f), read_logstd_p.for_each_tensor(f);
    read_mean_v.for_each_tensor(f), read_logstd_v.for_each_tensor(f);
  }

  std::size_t latent_dim() const { return 2 * read_mean_p.out_width(); }
  std::size_t obs_dim() const { return compress.in_width(); }
};

namespace detail {
inline Tensor glorot_matrix(std::size_t in, std::size_t out, Rng& rng) {
  return make_mlp({in, out}, Activation::Identity, Activation::Identity, rng).layers[0].weight;
}
}  // namespace detail

inline AttentionLayerParams make_attention_layer(const EncoderConfig& cfg, Rng& rng) {
  AttentionLayerParams l;
  l.wq = detail::glorot_matrix(cfg.d_low, cfg.d_low, rng);
  l.wk = detail::glorot_matrix(cfg.d_low, cfg.d_low, rng);
  l.wv = detail::glorot_matrix(cfg.d_low, cfg.d_low, rng);
  l.ff = make_mlp({cfg.d_low, cfg.ff_hidden, cfg.d_low}, Activation::Relu, Activation::Identity, rng);
  return l;
}

inline EncoderParams make_encoder(const EncoderConfig& cfg, std::size_t obs_dim, std::size_t latent_dim, Rng& rng) {
  cfg.validate();
  require_even_latent(latent_dim);
  const std::size_t h = latent_dim / 2;
  EncoderParams e;
  e.compress = make_mlp({obs_dim, cfg.comp_hidden, cfg.d_low}, Activation::Relu, Activation::Identity, rng);
  for (std::size_t i = 0; i < cfg.layers_pos; ++i) e.pos_layers.push_back(make_attention_layer(cfg, rng));
  for (std::size_t i = 0; i < cfg.layers_vel; ++i) e.vel_layers.push_back(make_attention_layer(cfg, rng));
  e.rpe = reshape(detail::glorot_matrix(1, cfg.d_low, rng), {cfg.d_low});
  e.read_mean_p = make_mlp({cfg.d_low, h}, Activation::Identity, Activation::Identity, rng);
  e.read_logstd_p = make_mlp({cfg.d_low, h}, Activation::Identity, Activation::Identity, rng);
  e.read_mean_v = make_mlp({cfg.d_low, h}, Activation::Identity, Activation::Identity, rng);
  e.read_logstd_v = make_mlp({cfg.d_low, h}, Activation::Identity, Activation::Identity, rng);
  return e;
}

// a_{1:N} = h_comp(y_{1:N}), row by row.
inline Tensor compress(const EncoderParams& params, const Tensor& y) {
  if (y.rank() != 2) throw ShapeError("compress: observations must be [N, D]");
  return mlp_forward(params.compress, y);
}

// Additive attention bias for query time ti and key time tj.
inline double temporal_bias(double ti, double tj, double epsilon, double p, double delta_r) {
  const double dist = std::abs(tj - ti) / delta_r;
  if (p == kInfinity) return dist < 1.0 ? 0.0 : -kInfinity;
  if (dist == 0.0 || epsilon == 1.0) return 0.0;
  return std::log(epsilon) * std::pow(dist, p);
}

inline double temporal_bias(const TimeGrid& grid, std::size_t i, std::size_t j, double epsilon, double p,
                            double delta_r) {
  return temporal_bias(grid[i], grid[j], epsilon, p, delta_r);
}

inline double hardtanh(double v) { return std::clamp(v, -1.0, 1.0); }

// P_ij = w * hardtanh((t_j - t_i) / delta_r).
inline Tensor rel_pos_encoding(const TimeGrid& grid, std::size_t i, std::size_t j, const Tensor& w, double delta_r) {
  return scale(w, hardtanh((grid[j] - grid[i]) / delta_r));
}

// Standard sine/cosine encodings of absolute time, used when relative
// encodings are switched off. Positions are measured in units of delta_r / 8.
inline Tensor sinusoidal_encoding(const TimeGrid& grid, std::size_t width, double delta_r) {
  std::vector<double> v(grid.size() * width);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double pos = grid[i] / (delta_r / 8.0);
    for (std::size_t k = 0; k < width; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / static_cast<double>(width));
      v[i * width + k] = (k % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return Tensor::matrix(grid.size(), width, std::move(v));
}

// Dropout never removes key i itself, nor its right neighbour (left for the last element).
inline std::size_t protected_neighbor(std::size_t i, std::size_t n) {
  if (n == 1) return i;
  return i + 1 < n ? i + 1 : i - 1;
}

struct AttentionOptions {
  bool temporal = true;
  bool relative = true;
  Rng* dropout_rng = nullptr;  // null: no dropout
};

// One attention sub-layer plus residual feed-forward. Returns rows for `queries`.
inline Tensor attention_layer(const Tensor& alpha, const TimeGrid& grid, const AttentionLayerParams& params,
                              const Tensor& rpe, const EncoderConfig& cfg, const std::vector<std::size_t>& queries,
                              const AttentionOptions& opt = {}, Tensor* attention_out = nullptr) {
  const std::size_t n = grid.size(), m = queries.size(), dl = cfg.d_low;
  if (alpha.rank() != 2 || alpha.rows() != n || alpha.cols() != dl)
    throw ShapeError("attention_layer: expected input [" + std::to_string(n) + ", " + std::to_string(dl) + "], got " +
                     shape_str(alpha.shape()));
  for (std::size_t q : queries)
    if (q >= n) throw ContractError("attention_layer: query index " + std::to_string(q) + " out of range");

  std::vector<double> bias(m * n, 0.0), rel(m * n, 0.0);
  std::bernoulli_distribution drop(cfg.dropout);
  const bool dropping = opt.dropout_rng != nullptr && cfg.dropout > 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t i = queries[r];
    const std::size_t keep = protected_neighbor(i, n);
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      double b = opt.temporal ? temporal_bias(grid, i, j, cfg.epsilon, cfg.p, cfg.delta_r) : 0.0;
      if (dropping && j != i && j != keep && drop(*opt.dropout_rng)) b = -kInfinity;
      bias[r * n + j] = b;
      any = any || b != -kInfinity;
      rel[r * n + j] = hardtanh((grid[j] - grid[i]) / cfg.delta_r);
    }
    if (!any) throw ContractError("attention_layer: attention row " + std::to_string(i) + " is fully masked");
  }

  const Tensor q = gather_rows(matmul(alpha, params.wq), queries);
  const Tensor k = matmul(alpha, params.wk);
  const Tensor v = matmul(alpha, params.wv);
  const Tensor scores = add(scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dl))),
                            Tensor::matrix(m, n, std::move(bias)));
  const Tensor c = softmax(scores);
  if (attention_out) *attention_out = c.detached();
  Tensor beta = matmul(c, v);
  if (opt.relative) {
    // sum_j C_ij (w * h_ij) = (sum_j C_ij h_ij) w
    const Tensor weight = reshape(sum_last(mul(c, Tensor::matrix(m, n, std::move(rel)))), {m, 1});
    beta = add(beta, matmul(weight, reshape(rpe, {1, dl})));
  }
  return add(beta, mlp_forward(params.ff, beta));
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// Runs one aggregator stack; the last layer queries only `final_queries`.
inline Tensor aggregate(const std::vector<AttentionLayerParams>& layers, const Tensor& a, const TimeGrid& grid,
                        const Tensor& rpe, const EncoderConfig& cfg, const std::vector<std::size_t>& final_queries,
                        Rng* dropout_rng) {
  Tensor h = a;
  const auto every = all_indices(grid.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const bool last = l + 1 == layers.size();
    AttentionOptions opt{cfg.uses_ta(l), cfg.relative_pe, dropout_rng};
    h = attention_layer(h, grid, layers[l], rpe, cfg, last ? final_queries : every, opt);
  }
  return h;
}

// psi_{1:B}: means and stds [B, d], ordered [position | velocity].
// Passing a dropout rng enables structured attention dropout (training).
inline GaussianDiag encode(const Tensor& y, const TimeGrid& grid, const BlockPartition& partition,
                           const EncoderParams& params, const EncoderConfig& cfg, Rng* dropout_rng = nullptr) {
  validate_partition(partition, grid);
  if (y.rank() != 2 || y.rows() != grid.size())
    throw ShapeError("encode: observations " + shape_str(y.shape()) + " do not match a grid of " +
                     std::to_string(grid.size()) + " points");
  if (params.pos_layers.empty() || params.vel_layers.empty())
    throw ContractError("encode: each aggregator needs at least one layer");
  Tensor a = compress(params, y);
  if (!cfg.relative_pe) a = add(a, sinusoidal_encoding(grid, cfg.d_low, cfg.delta_r));

  const auto& queries = partition.shooting_index;
  const Tensor bp = aggregate(params.pos_layers, a, grid, params.rpe, cfg, queries, dropout_rng);
  const Tensor bv = aggregate(params.vel_layers, a, grid, params.rpe, cfg, queries, dropout_rng);

  GaussianDiag psi;
  psi.mean = concat({mlp_forward(params.read_mean_p, bp), mlp_forward(params.read_mean_v, bv)}, 1);
  Tensor tau_p = exp(mlp_forward(params.read_logstd_p, bp));
  if (cfg.tau_min > 0.0) tau_p = add_scalar(tau_p, cfg.tau_min);
  psi.std = concat({tau_p, exp(mlp_forward(params.read_logstd_v, bv))}, 1);
  return psi;
}

}  // namespace lmsode
