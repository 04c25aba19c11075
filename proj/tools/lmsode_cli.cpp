// lmsode: generate pendulum data, train and evaluate latent ODE models.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lmsode/lmsode.hpp"

namespace {

using namespace lmsode;

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

// Flags shared by the commands that build a RunConfig.
struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset;
};

RunConfig base_config(const CommonFlags& f) {
  RunConfig cfg;
  const std::uint64_t s = env_seed(0);
  cfg.data.seed = s;
  cfg.train.seed = s;
  if (!f.config_path.empty()) apply_json(cfg, read_json_file(f.config_path));
  if (f.seed) cfg.data.seed = cfg.train.seed = *f.seed;
  if (f.dataset) cfg.paths.dataset = *f.dataset;
  return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& f, bool dataset_flag = true) {
  cmd->add_option("-c,--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>("--seed", [&f](const std::uint64_t& v) { f.seed = v; },
                                          std::string("Random seed (default: $") + kSeedEnv + " or 0)");
  if (dataset_flag)
    cmd->add_option_function<std::string>("--dataset", [&f](const std::string& v) { f.dataset = v; },
                                          "Dataset file");
}

std::vector<std::size_t> parse_size_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(tok, &pos);
      if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + tok + "' is not a positive integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

// CSV outputs get a sibling .meta.json carrying the format version and config.
void write_csv_with_meta(const std::string& path, const std::string& csv, const Json& config, const char* kind) {
  write_file_atomic(path, csv);
  const Json meta{{"format_version", kFormatVersion}, {"kind", kind}, {"config", config}};
  write_file_atomic(path + ".meta.json", to_json_text(meta));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void log_progress(const MetricsRow& r, const ModelParams&) {
  std::fprintf(stderr, "iter %6zu  lr %.3e  elbo %.6e  val_mse %.6f\n", r.iteration, r.lr, r.elbo.total, r.val_mse);
}

// Trains on `ds` and returns the test-split MSE of the best-validation parameters.
struct TrainedModel {
  TrainResult result;
  double test_mse = 0.0;
};

TrainedModel train_and_test(const RunConfig& cfg, const Dataset& ds, bool verbose, std::size_t n_samples) {
  TrainedModel tm;
  tm.result = train(ds, cfg.train, verbose ? ProgressFn(log_progress) : ProgressFn());
  const ModelConfig mc = effective_model_config(cfg.train, tm.result.delta_r);
  const auto test = normalized(ds.test.empty() ? ds.val : ds.test, tm.result.obs_scale);
  tm.test_mse = evaluate_mse(test, tm.result.best, mc, cfg.train.delta_test, n_samples, cfg.train.seed).mse;
  return tm;
}

int run(int argc, char** argv) {
  CLI::App app{"Latent neural ODEs with sparse Bayesian multiple shooting"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  // gen
  CommonFlags gen_f;
  std::string gen_out, gen_grid, gen_obs;
  std::optional<std::size_t> gen_n_train, gen_n_val, gen_n_test, gen_points, gen_res;
  std::optional<double> gen_noise;
  auto* gen = app.add_subcommand("gen", "Generate a pendulum dataset");
  add_common(gen, gen_f, false);
  gen->add_option("-o,--out", gen_out, "Output dataset path (default: paths.dataset)");
  gen->add_option("--grid", gen_grid, "Time grid: regular | irregular")->check(CLI::IsMember({"regular", "irregular"}));
  gen->add_option("--obs", gen_obs, "Observations: trig | pixels")->check(CLI::IsMember({"trig", "pixels"}));
  gen->add_option_function<std::size_t>("--resolution", [&](const std::size_t& v) { gen_res = v; }, "Pixel grid side");
  gen->add_option_function<std::size_t>("--n-points", [&](const std::size_t& v) { gen_points = v; }, "Points per trajectory");
  gen->add_option_function<std::size_t>("--n-train", [&](const std::size_t& v) { gen_n_train = v; }, "Training trajectories");
  gen->add_option_function<std::size_t>("--n-val", [&](const std::size_t& v) { gen_n_val = v; }, "Validation trajectories");
  gen->add_option_function<std::size_t>("--n-test", [&](const std::size_t& v) { gen_n_test = v; }, "Test trajectories");
  gen->add_option_function<double>("--noise", [&](const double& v) { gen_noise = v; }, "Observation noise std");

  // train
  CommonFlags tr_f;
  std::string tr_mode, tr_ckpt, tr_metrics;
  std::optional<std::size_t> tr_block, tr_iters;
  auto* trn = app.add_subcommand("train", "Train a model; writes a checkpoint and a metrics CSV");
  add_common(trn, tr_f);
  trn->add_option("--mode", tr_mode, "Training mode: ms | ss | ss-sub | ss-progr")
      ->check(CLI::IsMember({"ms", "ss", "ss-sub", "ss-progr"}));
  trn->add_option_function<std::size_t>("--block-size", [&](const std::size_t& v) { tr_block = v; }, "Block size");
  trn->add_option_function<std::size_t>("--iterations", [&](const std::size_t& v) { tr_iters = v; }, "Iterations");
  trn->add_option("--checkpoint", tr_ckpt, "Checkpoint path (default: paths.checkpoint)");
  trn->add_option("--metrics", tr_metrics, "Metrics CSV path (default: paths.metrics)");

  // eval
  std::string ev_ckpt, ev_data, ev_out;
  double ev_delta = 0.15;
  std::size_t ev_samples = 10;
  std::optional<std::uint64_t> ev_seed;
  auto* ev = app.add_subcommand("eval", "Forecast test trajectories from their initial window");
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ev_data, "Dataset file")->required()->check(CLI::ExistingFile);
  ev->add_option("--delta-test", ev_delta, "Conditioning window as a fraction of [t1, tN]")->capture_default_str();
  ev->add_option("--n-samples", ev_samples, "Posterior samples averaged per forecast")->capture_default_str();
  ev->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { ev_seed = v; }, "Sampling seed");
  ev->add_option("-o,--out", ev_out, "Report path (default: paths.report of the checkpoint config)");

  // landscape
  std::string ls_ckpt, ls_data, ls_out, ls_lengths = "10,40", ls_split = "train";
  double ls_cmin = -4.0, ls_cmax = 6.0;
  std::size_t ls_points = 101;
  auto* ls = app.add_subcommand("landscape", "Training loss along scaled dynamics parameters c * theta");
  ls->add_option("--checkpoint", ls_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ls->add_option("--dataset", ls_data, "Dataset file")->required()->check(CLI::ExistingFile);
  ls->add_option("--lengths", ls_lengths, "Comma-separated prefix lengths")->capture_default_str();
  ls->add_option("--c-min", ls_cmin, "Smallest scale")->capture_default_str();
  ls->add_option("--c-max", ls_cmax, "Largest scale")->capture_default_str();
  ls->add_option("--points", ls_points, "Number of scales")->capture_default_str();
  ls->add_option("--split", ls_split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  ls->add_option("-o,--out", ls_out, "Output CSV")->required();

  // ablate
  CommonFlags ab_f;
  std::string ab_out;
  bool ab_no_ta = false, ab_no_rpe = false;
  auto* ab = app.add_subcommand("ablate", "Train and test the temporal-attention / relative-encoding ablations");
  add_common(ab, ab_f);
  ab->add_flag("--no-ta", ab_no_ta, "Only the variants without temporal attention");
  ab->add_flag("--no-rpe", ab_no_rpe, "Only the variants without relative positional encodings");
  ab->add_option("-o,--out", ab_out, "Output CSV")->required();

  // sweep-blocks
  CommonFlags sw_f;
  std::string sw_out, sw_sizes = "1,2,5,10,25,50";
  auto* sw = app.add_subcommand("sweep-blocks", "Train across block sizes; tabulate test MSE and wall time");
  add_common(sw, sw_f);
  sw->add_option("--block-sizes", sw_sizes, "Comma-separated block sizes")->capture_default_str();
  sw->add_option("-o,--out", sw_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  const bool verbose = !quiet;

  if (*gen) {
    RunConfig cfg = base_config(gen_f);
    if (!gen_grid.empty()) cfg.data.grid = grid_mode_from_name(gen_grid);
    if (!gen_obs.empty()) cfg.data.obs = obs_mode_from_name(gen_obs);
    if (gen_res) cfg.data.resolution = *gen_res;
    if (gen_points) cfg.data.n_points = *gen_points;
    if (gen_n_train) cfg.data.n_train = *gen_n_train;
    if (gen_n_val) cfg.data.n_val = *gen_n_val;
    if (gen_n_test) cfg.data.n_test = *gen_n_test;
    if (gen_noise) cfg.data.noise_std = *gen_noise;
    cfg.data.validate();
    const std::string out = gen_out.empty() ? cfg.paths.dataset : gen_out;
    save_dataset(generate_dataset(cfg.data), out);
    if (verbose) std::fprintf(stderr, "wrote %s\n", out.c_str());
    return kOk;
  }

  if (*trn) {
    RunConfig cfg = base_config(tr_f);
    if (!tr_mode.empty()) cfg.train.mode = train_mode_from_name(tr_mode);
    if (tr_block) cfg.train.block_size = *tr_block;
    if (tr_iters) cfg.train.iterations = *tr_iters;
    if (!tr_ckpt.empty()) cfg.paths.checkpoint = tr_ckpt;
    if (!tr_metrics.empty()) cfg.paths.metrics = tr_metrics;
    cfg.validate();
    const Dataset ds = load_dataset(cfg.paths.dataset);
    const TrainResult res = train(ds, cfg.train, verbose ? ProgressFn(log_progress) : ProgressFn());
    save_checkpoint(make_checkpoint(cfg, ds, res), cfg.paths.checkpoint);
    write_file_atomic(cfg.paths.metrics, metrics_csv(res.history));
    if (verbose)
      std::fprintf(stderr, "best validation MSE %.6f at iteration %zu; wrote %s and %s\n", res.best_val_mse,
                   res.best_iteration, cfg.paths.checkpoint.c_str(), cfg.paths.metrics.c_str());
    return kOk;
  }

  if (*ev) {
    const Checkpoint ck = load_checkpoint(ev_ckpt);
    const Dataset ds = load_dataset(ev_data);
    if (ds.config.obs_dim() != ck.obs_dim) throw ConfigError("eval: dataset observation width differs from the model's");
    const std::uint64_t seed = ev_seed ? *ev_seed : env_seed(ck.config.train.seed);
    const auto test = normalized(ds.test, ck.obs_scale);
    const MseReport rep = evaluate_mse(test, ck.params, ck.model_config(), ev_delta, ev_samples, seed);
    const Json report{{"format_version", kFormatVersion},
                      {"kind", "lmsode-eval"},
                      {"config", to_json(ck.config)},
                      {"checkpoint", ev_ckpt},
                      {"dataset", ev_data},
                      {"delta_test", ev_delta},
                      {"seed", seed},
                      {"n_samples", ev_samples},
                      {"test_mse", rep.mse},
                      {"per_trajectory_mse", rep.per_trajectory}};
    const std::string out = ev_out.empty() ? ck.config.paths.report : ev_out;
    write_file_atomic(out, to_json_text(report));
    if (verbose) std::fprintf(stderr, "test MSE %.6f; wrote %s\n", rep.mse, out.c_str());
    return kOk;
  }

  if (*ls) {
    const Checkpoint ck = load_checkpoint(ls_ckpt);
    const Dataset ds = load_dataset(ls_data);
    const auto data = normalized(ds.split(ls_split), ck.obs_scale);
    if (ls_points < 2) throw ConfigError("landscape: --points must be >= 2");
    const auto cs = linspace(ls_cmin, ls_cmax, ls_points);
    std::string csv = "length,c,loss,complexity\n";
    for (std::size_t len : parse_size_list(ls_lengths, "--lengths")) {
      const auto pts = loss_landscape(ck.params, data, len, cs, ck.model_config());
      const double cx = landscape_complexity(pts);
      for (const auto& p : pts) csv += std::to_string(len) + "," + fmt(p.c) + "," + fmt(p.loss) + "," + fmt(cx) + "\n";
      if (verbose) std::fprintf(stderr, "length %zu: max |dloss/dc| = %.6e\n", len, cx);
    }
    write_csv_with_meta(ls_out, csv, to_json(ck.config), "lmsode-landscape");
    return kOk;
  }

  if (*ab) {
    RunConfig cfg = base_config(ab_f);
    cfg.validate();
    const Dataset ds = load_dataset(cfg.paths.dataset);
    std::string csv = "temporal_attention,relative_pe,test_mse,best_val_mse,best_iteration\n";
    for (const bool ta : {true, false}) {
      for (const bool rpe : {true, false}) {
        if ((ab_no_ta && ta) || (ab_no_rpe && rpe)) continue;
        RunConfig v = cfg;
        v.train.model.encoder.temporal_attention = ta;
        v.train.model.encoder.relative_pe = rpe;
        if (verbose) std::fprintf(stderr, "variant %sTA %sRPE\n", ta ? "+" : "-", rpe ? "+" : "-");
        const TrainedModel tm = train_and_test(v, ds, verbose, 10);
        csv += std::string(ta ? "1" : "0") + "," + (rpe ? "1" : "0") + "," + fmt(tm.test_mse) + "," +
               fmt(tm.result.best_val_mse) + "," + std::to_string(tm.result.best_iteration) + "\n";
      }
    }
    write_csv_with_meta(ab_out, csv, to_json(cfg), "lmsode-ablation");
    return kOk;
  }

  if (*sw) {
    RunConfig cfg = base_config(sw_f);
    cfg.validate();
    const Dataset ds = load_dataset(cfg.paths.dataset);
    std::string csv = "block_size,test_mse,best_val_mse,best_iteration\n";
    std::string timing = "block_size,wall_seconds\n";
    for (std::size_t bs : parse_size_list(sw_sizes, "--block-sizes")) {
      RunConfig v = cfg;
      v.train.block_size = bs;
      v.train.mode = TrainMode::MS;
      if (verbose) std::fprintf(stderr, "block size %zu\n", bs);
      const auto t0 = std::chrono::steady_clock::now();
      const TrainedModel tm = train_and_test(v, ds, verbose, 10);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      csv += std::to_string(bs) + "," + fmt(tm.test_mse) + "," + fmt(tm.result.best_val_mse) + "," +
             std::to_string(tm.result.best_iteration) + "\n";
      char buf[64];
      std::snprintf(buf, sizeof buf, "%zu,%.3f\n", bs, secs);
      timing += buf;
    }
    write_csv_with_meta(sw_out, csv, to_json(cfg), "lmsode-block-sweep");
    // Wall time varies between runs, so it lives outside the deterministic table.
    write_file_atomic(sw_out + ".timing.csv", timing);
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lmsode::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kUsage;
  } catch (const lmsode::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
}
