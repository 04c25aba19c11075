#pragma once

// Run configuration (JSON, unknown keys rejected) and checkpoint files.

#include <cstdlib>
#include <set>

#include "lmsode/trainer.hpp"

namespace lmsode {

struct RunPaths {
  std::string dataset = "data/pendulum.json";
  std::string checkpoint = "runs/model.ckpt.json";
  std::string metrics = "runs/metrics.csv";
  std::string report = "runs/report.json";
  std::string out_dir = "runs";
};

struct RunConfig {
  DataGenConfig data;
  TrainConfig train;
  RunPaths paths;

  void validate() const {
    data.validate();
    train.validate();
  }
};

inline constexpr const char* kSeedEnv = "LMSODE_SEED";

// Default seed from the environment, or `fallback`.
inline std::uint64_t env_seed(std::uint64_t fallback = 0) {
  const char* s = std::getenv(kSeedEnv);
  if (!s || !*s) return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string(kSeedEnv) + " must be a non-negative integer, got '" + s + "'");
  return v;
}

namespace detail {

// Reads optional keys of one JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class F>
  void get_with(const char* key, F&& parse) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      parse(j_.at(key));
    } catch (const Json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown configuration key '" + where_ + "." + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline double parse_p(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "infinity") return kInfinity;
    throw ConfigError("encoder.p: expected a positive integer or \"inf\", got '" + s + "'");
  }
  return j.get<double>();
}

}  // namespace detail

inline Json to_json(const TrainConfig& t) {
  return Json{{"iterations", t.iterations},
              {"lr0", t.lr0},
              {"lr1", t.lr1},
              {"batch_size", t.batch_size},
              {"block_size", t.block_size},
              {"mode", train_mode_name(t.mode)},
              {"sub_length", t.sub_length},
              {"progr_start", t.progr_start},
              {"progr_period", t.progr_period},
              {"eval_every", t.eval_every},
              {"delta_test", t.delta_test},
              {"val_samples", t.val_samples},
              {"delta_r_fraction", t.delta_r_fraction},
              {"continuity_scale", t.continuity_scale},
              {"max_solver_failures", t.max_solver_failures},
              {"seed", t.seed}};
}

inline Json to_json(const EncoderConfig& e) {
  Json p = e.p == kInfinity ? Json("inf") : Json(e.p);
  return Json{{"d_low", e.d_low},
              {"comp_hidden", e.comp_hidden},
              {"ff_hidden", e.ff_hidden},
              {"layers_pos", e.layers_pos},
              {"layers_vel", e.layers_vel},
              {"epsilon", e.epsilon},
              {"p", p},
              {"dropout", e.dropout},
              {"tau_min", e.tau_min},
              {"temporal_attention", e.temporal_attention},
              {"relative_pe", e.relative_pe},
              {"ta_first_layer_only", e.ta_first_layer_only}};
}

inline Json to_json(const PriorConfig& p) {
  return Json{{"mu0", p.mu0},       {"sigma0", p.sigma0},
              {"xi", p.xi},         {"sigma_y", p.sigma_y},
              {"weight_prior_mean", p.weight_prior_mean}, {"weight_prior_std", p.weight_prior_std}};
}

inline Json to_json(const SolverConfig& s) {
  return Json{{"method", solver_name(s.method)},
              {"steps_per_unit", s.steps_per_unit},
              {"rtol", s.rtol},
              {"atol", s.atol},
              {"max_steps", s.max_steps}};
}

inline Json to_json(const RunConfig& c) {
  const ModelConfig& m = c.train.model;
  return Json{{"data", to_json(c.data)},
              {"train", to_json(c.train)},
              {"model",
               {{"latent_dim", m.latent_dim},
                {"dyn_hidden", m.dyn_hidden},
                {"dyn_layers", m.dyn_layers},
                {"dec_hidden", m.dec_hidden},
                {"weight_std_init", m.weight_std_init}}},
              {"encoder", to_json(m.encoder)},
              {"prior", to_json(m.prior)},
              {"solver", to_json(m.solver)},
              {"paths",
               {{"dataset", c.paths.dataset},
                {"checkpoint", c.paths.checkpoint},
                {"metrics", c.paths.metrics},
                {"report", c.paths.report},
                {"out_dir", c.paths.out_dir}}}};
}

// Fields absent from `j` keep the values already in `c`.
inline void apply_json(RunConfig& c, const Json& j) {
  detail::ObjectReader top(j, "config");
  if (const Json* d = top.child("data")) {
    detail::ObjectReader r(*d, "data");
    auto& x = c.data;
    r.get("t_first", x.t_first);
    r.get("t_last", x.t_last);
    r.get("n_points", x.n_points);
    r.get_with("grid", [&](const Json& v) { x.grid = grid_mode_from_name(v.get<std::string>()); });
    r.get_with("obs", [&](const Json& v) { x.obs = obs_mode_from_name(v.get<std::string>()); });
    r.get("resolution", x.resolution);
    r.get("noise_std", x.noise_std);
    r.get("n_train", x.n_train);
    r.get("n_val", x.n_val);
    r.get("n_test", x.n_test);
    r.get("seed", x.seed);
    r.finish();
  }
  if (const Json* t = top.child("train")) {
    detail::ObjectReader r(*t, "train");
    auto& x = c.train;
    r.get("iterations", x.iterations);
    r.get("lr0", x.lr0);
    r.get("lr1", x.lr1);
    r.get("batch_size", x.batch_size);
    r.get("block_size", x.block_size);
    r.get_with("mode", [&](const Json& v) { x.mode = train_mode_from_name(v.get<std::string>()); });
    r.get("sub_length", x.sub_length);
    r.get("progr_start", x.progr_start);
    r.get("progr_period", x.progr_period);
    r.get("eval_every", x.eval_every);
    r.get("delta_test", x.delta_test);
    r.get("val_samples", x.val_samples);
    r.get("delta_r_fraction", x.delta_r_fraction);
    r.get("continuity_scale", x.continuity_scale);
    r.get("max_solver_failures", x.max_solver_failures);
    r.get("seed", x.seed);
    r.finish();
  }
  ModelConfig& m = c.train.model;
  if (const Json* mj = top.child("model")) {
    detail::ObjectReader r(*mj, "model");
    r.get("latent_dim", m.latent_dim);
    r.get("dyn_hidden", m.dyn_hidden);
    r.get("dyn_layers", m.dyn_layers);
    r.get("dec_hidden", m.dec_hidden);
    r.get("weight_std_init", m.weight_std_init);
    r.finish();
  }
  if (const Json* e = top.child("encoder")) {
    detail::ObjectReader r(*e, "encoder");
    auto& x = m.encoder;
    r.get("d_low", x.d_low);
    r.get("comp_hidden", x.comp_hidden);
    r.get("ff_hidden", x.ff_hidden);
    r.get("layers_pos", x.layers_pos);
    r.get("layers_vel", x.layers_vel);
    r.get("epsilon", x.epsilon);
    r.get_with("p", [&](const Json& v) { x.p = detail::parse_p(v); });
    r.get("dropout", x.dropout);
    r.get("tau_min", x.tau_min);
    r.get("temporal_attention", x.temporal_attention);
    r.get("relative_pe", x.relative_pe);
    r.get("ta_first_layer_only", x.ta_first_layer_only);
    r.finish();
  }
  if (const Json* p = top.child("prior")) {
    detail::ObjectReader r(*p, "prior");
    auto& x = m.prior;
    r.get("mu0", x.mu0);
    r.get("sigma0", x.sigma0);
    r.get("xi", x.xi);
    r.get("sigma_y", x.sigma_y);
    r.get("weight_prior_mean", x.weight_prior_mean);
    r.get("weight_prior_std", x.weight_prior_std);
    r.finish();
  }
  if (const Json* s = top.child("solver")) {
    detail::ObjectReader r(*s, "solver");
    auto& x = m.solver;
    r.get_with("method", [&](const Json& v) { x.method = solver_from_name(v.get<std::string>()); });
    r.get("steps_per_unit", x.steps_per_unit);
    r.get("rtol", x.rtol);
    r.get("atol", x.atol);
    r.get("max_steps", x.max_steps);
    r.finish();
  }
  if (const Json* p = top.child("paths")) {
    detail::ObjectReader r(*p, "paths");
    r.get("dataset", c.paths.dataset);
    r.get("checkpoint", c.paths.checkpoint);
    r.get("metrics", c.paths.metrics);
    r.get("report", c.paths.report);
    r.get("out_dir", c.paths.out_dir);
    r.finish();
  }
  top.finish();
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  apply_json(c, j);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path));
}

// ---- checkpoints --------------------------------------------------------------

struct Checkpoint {
  RunConfig config;
  ModelParams params;
  std::size_t obs_dim = 0;
  bool squash = false;
  double obs_scale = 1.0;
  double delta_r = 0.0;
  std::size_t best_iteration = 0;
  double best_val_mse = 0.0;
  std::string rng_state;

  ModelConfig model_config() const { return effective_model_config(config.train, delta_r); }
};

inline Json checkpoint_to_json(const Checkpoint& ck) {
  Json tensors = Json::array();
  ck.params.for_each_tensor([&](const Tensor& t) {
    tensors.push_back(Json{{"shape", t.shape()}, {"data", t.to_vector()}});
  });
  return Json{{"meta", {{"format_version", kFormatVersion}, {"kind", "lmsode-checkpoint"}}},
              {"config", to_json(ck.config)},
              {"obs_dim", ck.obs_dim},
              {"squash", ck.squash},
              {"obs_scale", ck.obs_scale},
              {"delta_r", ck.delta_r},
              {"best_iteration", ck.best_iteration},
              {"best_val_mse", ck.best_val_mse},
              {"rng_state", ck.rng_state},
              {"tensors", std::move(tensors)}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  const auto& meta = j.at("meta");
  if (meta.at("kind").get<std::string>() != "lmsode-checkpoint")
    throw std::runtime_error("not a checkpoint file");
  if (meta.at("format_version").get<int>() != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format_version " + meta.at("format_version").dump());
  Checkpoint ck;
  ck.config = run_config_from_json(j.at("config"));
  ck.obs_dim = j.at("obs_dim").get<std::size_t>();
  ck.squash = j.at("squash").get<bool>();
  ck.obs_scale = json_number(j.at("obs_scale"));
  ck.delta_r = json_number(j.at("delta_r"));
  ck.best_iteration = j.at("best_iteration").get<std::size_t>();
  ck.best_val_mse = json_number(j.at("best_val_mse"));
  ck.rng_state = j.at("rng_state").get<std::string>();
  Rng dummy(0);
  ck.params = make_model(ck.model_config(), ck.obs_dim, ck.squash, dummy);
  const auto& tensors = j.at("tensors");
  std::size_t k = 0;
  ck.params.for_each_tensor([&](Tensor& t) {
    if (k >= tensors.size()) throw std::runtime_error("checkpoint: too few tensors for the configured model");
    const auto& e = tensors[k++];
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != t.shape())
      throw std::runtime_error("checkpoint: tensor " + std::to_string(k - 1) + " has shape " + shape_str(shape) +
                               ", model expects " + shape_str(t.shape()));
    std::vector<double> data;
    for (const auto& v : e.at("data")) data.push_back(json_number(v));
    t = Tensor(shape, std::move(data));
  });
  if (k != tensors.size()) throw std::runtime_error("checkpoint: more tensors than the configured model has");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, to_json_text(checkpoint_to_json(ck)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error("checkpoint '" + path.string() + "': " + e.what());
  }
}

inline Checkpoint make_checkpoint(const RunConfig& cfg, const Dataset& ds, const TrainResult& res) {
  Checkpoint ck;
  ck.config = cfg;
  ck.params = res.best;
  ck.obs_dim = ds.config.obs_dim();
  ck.squash = ds.config.obs == ObsMode::Pixels;
  ck.obs_scale = res.obs_scale;
  ck.delta_r = res.delta_r;
  ck.best_iteration = res.best_iteration;
  ck.best_val_mse = res.best_val_mse;
  ck.rng_state = res.rng_state;
  return ck;
}

}  // namespace lmsode
