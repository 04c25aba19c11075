#pragma once

// Pendulum trajectories on regular or irregular grids, observed through a
// (sin, cos) embedding or a small rendered image.

#include <array>
#include <numbers>

#include "lmsode/inference.hpp"
#include "lmsode/json_io.hpp"

namespace lmsode {

enum class GridMode { Regular, Irregular };
enum class ObsMode { Trig, Pixels };

struct DataGenConfig {
  double t_first = 0.0;
  double t_last = 3.0;
  std::size_t n_points = 51;
  GridMode grid = GridMode::Irregular;
  ObsMode obs = ObsMode::Trig;
  std::size_t resolution = 16;
  double noise_std = 0.01;
  std::size_t n_train = 64, n_val = 16, n_test = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(t_last > t_first)) throw ConfigError("data: t_last must exceed t_first");
    if (n_points < 2) throw ConfigError("data: n_points must be >= 2");
    if (!(noise_std >= 0.0)) throw ConfigError("data: noise_std must be >= 0");
    if (obs == ObsMode::Pixels && resolution < 4) throw ConfigError("data: resolution must be >= 4");
    if (n_train == 0) throw ConfigError("data: n_train must be >= 1");
  }
  std::size_t obs_dim() const { return obs == ObsMode::Trig ? 2 : resolution * resolution; }
};

inline const char* grid_mode_name(GridMode m) { return m == GridMode::Regular ? "regular" : "irregular"; }
inline GridMode grid_mode_from_name(const std::string& s) {
  if (s == "regular") return GridMode::Regular;
  if (s == "irregular") return GridMode::Irregular;
  throw ConfigError("unknown grid mode '" + s + "'");
}
inline const char* obs_mode_name(ObsMode m) { return m == ObsMode::Trig ? "trig" : "pixels"; }
inline ObsMode obs_mode_from_name(const std::string& s) {
  if (s == "trig") return ObsMode::Trig;
  if (s == "pixels") return ObsMode::Pixels;
  throw ConfigError("unknown observation mode '" + s + "'");
}

inline TimeGrid gen_regular_grid(double t_first, double t_last, std::size_t n) {
  if (n < 2) throw ContractError("grid: need at least 2 points");
  std::vector<double> t(n);
  const double step = (t_last - t_first) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) t[i] = t_first + step * static_cast<double>(i);
  t.back() = t_last;
  return TimeGrid(std::move(t));
}

inline double min_grid_gap(double t_first, double t_last, std::size_t n) {
  return (t_last - t_first) / (4.0 * static_cast<double>(n - 1));
}

// Endpoints fixed; interior points drawn uniformly one at a time, a draw
// being rejected when it falls within the minimum gap of an accepted point.
inline TimeGrid gen_irregular_grid(double t_first, double t_last, std::size_t n, Rng& rng,
                                   std::size_t max_attempts = 10000) {
  if (n < 2) throw ContractError("grid: need at least 2 points");
  if (!(t_last > t_first)) throw ContractError("grid: t_last must exceed t_first");
  const double gap = min_grid_gap(t_first, t_last, n);
  std::vector<double> t{t_first, t_last};
  std::uniform_real_distribution<double> ud(t_first, t_last);
  std::size_t attempts = 0;
  while (t.size() < n) {
    if (attempts++ >= max_attempts)
      throw GenerationError("irregular grid: rejection budget of " + std::to_string(max_attempts) +
                            " draws exhausted with " + std::to_string(t.size()) + " of " + std::to_string(n) +
                            " points placed");
    const double u = ud(rng);
    const auto it = std::lower_bound(t.begin(), t.end(), u);
    const bool clear = (it == t.end() || *it - u > gap) && (it == t.begin() || u - *(it - 1) > gap);
    if (clear) t.insert(it, u);
  }
  return TimeGrid(std::move(t));
}

inline constexpr double kGravity = 9.81;

// Angle and angular velocity of x'' = -g sin x at every grid time.
inline Tensor simulate_pendulum(double x0, double v0, const TimeGrid& grid,
                                SolverConfig cfg = {SolverMethod::Dopri5, 20.0, 1e-8, 1e-8, 1000000}) {
  const VectorField f = [](const Tensor& s) {
    return Tensor::vector({s[1], -kGravity * std::sin(s[0])});
  };
  std::vector<double> out(grid.size() * 2);
  Tensor s = Tensor::vector({x0, v0});
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (i > 0) s = ode_solve(f, s, grid[i - 1], grid[i], cfg);
    out[2 * i] = s[0];
    out[2 * i + 1] = s[1];
  }
  return Tensor::matrix(grid.size(), 2, std::move(out));
}

inline double pendulum_energy(double x, double v) { return 0.5 * v * v - kGravity * std::cos(x); }

// Grayscale image of a rod hanging from the centre at angle `x` (0 = straight down).
inline std::vector<double> render_pendulum(double x, std::size_t res) {
  const double c = 0.5 * static_cast<double>(res);
  const double len = 0.4 * static_cast<double>(res);
  const double ex = c + len * std::sin(x), ey = c + len * std::cos(x);
  const double width = 0.75;
  std::vector<double> img(res * res);
  for (std::size_t r = 0; r < res; ++r) {
    for (std::size_t k = 0; k < res; ++k) {
      const double px = static_cast<double>(k) + 0.5, py = static_cast<double>(r) + 0.5;
      const double dx = ex - c, dy = ey - c;
      const double u = std::clamp(((px - c) * dx + (py - c) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
      const double qx = c + u * dx - px, qy = c + u * dy - py;
      const double dist2 = qx * qx + qy * qy;
      img[r * res + k] = std::exp(-dist2 / (width * width));
    }
  }
  return img;
}

inline std::vector<double> observe(double angle, ObsMode mode, std::size_t resolution, double noise_std, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> y;
  if (mode == ObsMode::Trig) {
    y = {std::sin(angle), std::cos(angle)};
    if (noise_std > 0.0)
      for (double& v : y) v += noise_std * nd(rng);
  } else {
    y = render_pendulum(angle, resolution);
    if (noise_std > 0.0)
      for (double& v : y) v = std::clamp(v + noise_std * nd(rng), 0.0, 1.0);
  }
  return y;
}

struct TrajectoryRecord {
  TimeGrid grid;
  Tensor y;      // [N, D]
  Tensor state;  // [N, 2]: angle, angular velocity
};

struct Dataset {
  DataGenConfig config;
  std::vector<TrajectoryRecord> train, val, test;

  const std::vector<TrajectoryRecord>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ContractError("unknown split '" + name + "'");
  }
};

inline TrajectoryRecord generate_trajectory(const DataGenConfig& cfg, const TimeGrid* shared_grid, Rng& rng) {
  TimeGrid grid = shared_grid ? *shared_grid : gen_irregular_grid(cfg.t_first, cfg.t_last, cfg.n_points, rng);
  std::uniform_real_distribution<double> ux(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> uv(-std::numbers::pi / 2.0, std::numbers::pi / 2.0);
  const double x0 = ux(rng);
  const double v0 = uv(rng);
  Tensor state = simulate_pendulum(x0, v0, grid);
  const std::size_t dim = cfg.obs_dim();
  std::vector<double> y;
  y.reserve(grid.size() * dim);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto o = observe(state.at(i, 0), cfg.obs, cfg.resolution, cfg.noise_std, rng);
    y.insert(y.end(), o.begin(), o.end());
  }
  const std::size_t n = grid.size();
  return {std::move(grid), Tensor::matrix(n, dim, std::move(y)), std::move(state)};
}

// Stream offsets keep the splits' random draws independent of each other's sizes.
inline constexpr std::uint64_t kValStreamBase = 1'000'000, kTestStreamBase = 2'000'000;

inline Dataset generate_dataset(const DataGenConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  std::optional<TimeGrid> shared;
  if (cfg.grid == GridMode::Regular) shared = gen_regular_grid(cfg.t_first, cfg.t_last, cfg.n_points);
  auto fill = [&](std::vector<TrajectoryRecord>& out, std::size_t count, std::uint64_t base) {
    for (std::size_t k = 0; k < count; ++k) {
      Rng rng = derive_rng(cfg.seed, base + k);
      out.push_back(generate_trajectory(cfg, shared ? &*shared : nullptr, rng));
    }
  };
  fill(ds.train, cfg.n_train, 0);
  fill(ds.val, cfg.n_val, kValStreamBase);
  fill(ds.test, cfg.n_test, kTestStreamBase);
  return ds;
}

// ---- (de)serialisation ------------------------------------------------------

inline Json to_json(const DataGenConfig& c) {
  return Json{{"t_first", c.t_first},   {"t_last", c.t_last},       {"n_points", c.n_points},
              {"grid", grid_mode_name(c.grid)}, {"obs", obs_mode_name(c.obs)}, {"resolution", c.resolution},
              {"noise_std", c.noise_std}, {"n_train", c.n_train},     {"n_val", c.n_val},
              {"n_test", c.n_test},     {"seed", c.seed}};
}

inline Json matrix_to_json(const Tensor& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Tensor matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw std::runtime_error(what + ": expected a non-empty array of rows");
  const std::size_t cols = j[0].size();
  std::vector<double> v;
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != cols) throw std::runtime_error(what + ": ragged rows");
    for (const auto& e : row) v.push_back(json_number(e));
  }
  return Tensor::matrix(j.size(), cols, std::move(v));
}

inline Json dataset_to_json(const Dataset& ds) {
  Json splits = Json::object();
  for (const char* name : {"train", "val", "test"}) {
    Json arr = Json::array();
    for (const auto& tr : ds.split(name))
      arr.push_back(Json{{"t", tr.grid.times()}, {"y", matrix_to_json(tr.y)}, {"state", matrix_to_json(tr.state)}});
    splits[name] = std::move(arr);
  }
  Json meta = Json{{"format_version", kFormatVersion}, {"kind", "lmsode-dataset"}, {"config", to_json(ds.config)}};
  return Json{{"meta", std::move(meta)}, {"splits", std::move(splits)}};
}

inline DataGenConfig data_config_from_json(const Json& j) {
  DataGenConfig c;
  c.t_first = j.at("t_first").get<double>();
  c.t_last = j.at("t_last").get<double>();
  c.n_points = j.at("n_points").get<std::size_t>();
  c.grid = grid_mode_from_name(j.at("grid").get<std::string>());
  c.obs = obs_mode_from_name(j.at("obs").get<std::string>());
  c.resolution = j.at("resolution").get<std::size_t>();
  c.noise_std = j.at("noise_std").get<double>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_val = j.at("n_val").get<std::size_t>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline Dataset dataset_from_json(const Json& j) {
  const auto& meta = j.at("meta");
  if (meta.at("format_version").get<int>() != kFormatVersion)
    throw std::runtime_error("dataset: unsupported format_version " + meta.at("format_version").dump());
  Dataset ds;
  ds.config = data_config_from_json(meta.at("config"));
  for (const char* name : {"train", "val", "test"}) {
    auto& out = name == std::string("train") ? ds.train : name == std::string("val") ? ds.val : ds.test;
    for (const auto& e : j.at("splits").at(name)) {
      TrajectoryRecord r{TimeGrid(e.at("t").get<std::vector<double>>()), matrix_from_json(e.at("y"), "y"),
                         matrix_from_json(e.at("state"), "state")};
      if (r.y.rows() != r.grid.size() || r.state.rows() != r.grid.size())
        throw std::runtime_error("dataset: array lengths disagree with the time grid");
      out.push_back(std::move(r));
    }
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, to_json_text(dataset_to_json(ds)));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  try {
    return dataset_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error("dataset '" + path.string() + "': " + e.what());
  }
}

// Largest |y| over the training split.
inline double max_abs_train(const Dataset& ds) {
  double m = 0.0;
  for (const auto& tr : ds.train)
    for (double v : tr.y.data()) m = std::max(m, std::abs(v));
  return m;
}

// Observations divided by `scale`, as model-ready trajectories.
inline std::vector<Trajectory> normalized(const std::vector<TrajectoryRecord>& recs, double scale) {
  if (!(scale > 0.0)) throw ContractError("normalization scale must be > 0");
  std::vector<Trajectory> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back({r.grid, lmsode::scale(r.y, 1.0 / scale)});
  return out;
}

}  // namespace lmsode
