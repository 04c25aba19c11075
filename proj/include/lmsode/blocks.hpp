#pragma once

// Time grids, block partitions and the sparse multiple-shooting rollout.
//
// Indices are 0-based: grid point 0 belongs to no block, blocks cover
// 1..N-1 consecutively, and block b's shooting variable sits at the grid
// point right before its first index.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lmsode/latent.hpp"

namespace lmsode {

class TimeGrid {
 public:
  TimeGrid() = default;
  explicit TimeGrid(std::vector<double> t) : t_(std::move(t)) {
    if (t_.size() < 2) throw ContractError("time grid needs at least 2 points");
    for (std::size_t i = 0; i + 1 < t_.size(); ++i)
      if (!(t_[i + 1] > t_[i])) throw ContractError("time grid must be strictly increasing at index " + std::to_string(i + 1));
  }

  std::size_t size() const { return t_.size(); }
  double operator[](std::size_t i) const { return t_[i]; }
  double front() const { return t_.front(); }
  double back() const { return t_.back(); }
  double span() const { return t_.back() - t_.front(); }
  const std::vector<double>& times() const { return t_; }

  TimeGrid prefix(std::size_t n) const {
    return TimeGrid(std::vector<double>(t_.begin(), t_.begin() + static_cast<std::ptrdiff_t>(n)));
  }
  TimeGrid shifted(double delta) const {
    std::vector<double> t = t_;
    for (double& v : t) v += delta;
    return TimeGrid(std::move(t));
  }

 private:
  std::vector<double> t_;
};

struct BlockPartition {
  std::vector<std::vector<std::size_t>> blocks;  // index sets I_b
  std::vector<std::size_t> shooting_index;       // grid index of t_[b]

  std::size_t count() const { return blocks.size(); }
  // Grid index whose latent state is the end of block b (the last of I_b).
  std::size_t block_end(std::size_t b) const { return blocks[b].back(); }
};

inline void validate_partition(const BlockPartition& p, const TimeGrid& grid) {
  if (p.blocks.empty() || p.blocks.size() != p.shooting_index.size())
    throw ContractError("partition: inconsistent block count");
  std::size_t expect = 1;
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& blk = p.blocks[b];
    if (blk.empty()) throw ContractError("partition: block " + std::to_string(b) + " is empty");
    if (p.shooting_index[b] + 1 != blk.front())
      throw ContractError("partition: shooting position of block " + std::to_string(b) + " does not precede it");
    for (std::size_t i : blk) {
      if (i != expect) throw ContractError("partition: blocks are not consecutive/disjoint");
      ++expect;
    }
  }
  if (expect != grid.size()) throw ContractError("partition: blocks do not cover the grid");
}

// Blocks with the given sizes, in order; sizes must sum to N-1.
inline BlockPartition make_partition_sizes(const TimeGrid& grid, std::span<const std::size_t> sizes) {
  BlockPartition p;
  std::size_t next = 1;
  for (std::size_t s : sizes) {
    if (s == 0) throw ConfigError("partition: block sizes must be positive");
    p.shooting_index.push_back(next - 1);
    std::vector<std::size_t> blk(s);
    std::iota(blk.begin(), blk.end(), next);
    next += s;
    p.blocks.push_back(std::move(blk));
  }
  if (next != grid.size())
    throw ConfigError("partition: block sizes sum to " + std::to_string(next - 1) + ", expected " +
                      std::to_string(grid.size() - 1));
  return p;
}

// Uniform block size; the last block takes the remainder.
inline BlockPartition make_partition(const TimeGrid& grid, std::size_t block_size) {
  const std::size_t n = grid.size();
  if (block_size < 1 || block_size > n - 1)
    throw ConfigError("partition: block_size " + std::to_string(block_size) + " outside [1, " + std::to_string(n - 1) + "]");
  std::vector<std::size_t> sizes;
  for (std::size_t left = n - 1; left > 0; left -= std::min(left, block_size)) sizes.push_back(std::min(left, block_size));
  return make_partition_sizes(grid, sizes);
}

// One independent sub-trajectory: integrate from t_start through `targets`
// (strictly increasing, all > t_start), recording the state at each target.
struct RolloutRequest {
  double t_start = 0.0;
  std::vector<double> targets;
};

// Integrates every request simultaneously, row r of `starts` seeding request r.
// Returns the recorded states stacked in request order: [sum |targets|, d].
inline Tensor rollout_requests(const DynamicsParams& dyn, const Tensor& starts,
                               const std::vector<RolloutRequest>& requests, const SolverConfig& cfg) {
  if (starts.rank() != 2 || starts.rows() != requests.size())
    throw ShapeError("rollout: need one start row per request");
  const std::size_t rows = requests.size();
  std::size_t longest = 0;
  for (const auto& r : requests) longest = std::max(longest, r.targets.size());

  const VectorField f = dynamics_field(dyn);
  std::vector<Tensor> recorded;
  recorded.reserve(longest);
  std::vector<double> now(rows), dur(rows);
  for (std::size_t r = 0; r < rows; ++r) now[r] = requests[r].t_start;
  Tensor state = starts;
  for (std::size_t k = 0; k < longest; ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (k < requests[r].targets.size()) {
        dur[r] = requests[r].targets[k] - now[r];
        now[r] = requests[r].targets[k];
      } else {
        dur[r] = 0.0;
      }
    }
    try {
      state = ode_solve_batched(f, state, dur, cfg);
    } catch (const SolverError& e) {
      throw SolverError(std::string(e.what()) + " (rollout segment " + std::to_string(k + 1) + ")", e.row());
    }
    recorded.push_back(state);
  }

  std::vector<std::size_t> pick;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < requests[r].targets.size(); ++k) pick.push_back(k * rows + r);
  if (pick.empty()) return Tensor::zeros({0, starts.cols()});
  return gather_rows(concat(recorded, 0), std::move(pick));
}

inline std::vector<RolloutRequest> block_requests(const BlockPartition& p, const TimeGrid& grid) {
  std::vector<RolloutRequest> reqs;
  reqs.reserve(p.count());
  for (std::size_t b = 0; b < p.count(); ++b) {
    RolloutRequest r;
    r.t_start = grid[p.shooting_index[b]];
    for (std::size_t i : p.blocks[b]) r.targets.push_back(grid[i]);
    reqs.push_back(std::move(r));
  }
  return reqs;
}

// Latent trajectory x_{1:N} [N, d] from shooting variables s [B, d].
inline Tensor rollout_blocks(const Tensor& shooting, const BlockPartition& p, const DynamicsParams& dyn,
                             const SolverConfig& cfg, const TimeGrid& grid) {
  validate_partition(p, grid);
  if (shooting.rank() != 2 || shooting.rows() != p.count())
    throw ShapeError("rollout_blocks: expected " + std::to_string(p.count()) + " shooting rows");
  Tensor tail;
  try {
    tail = rollout_requests(dyn, shooting, block_requests(p, grid), cfg);
  } catch (const SolverError& e) {
    const std::string where =
        e.row() < p.count() ? "block " + std::to_string(e.row() + 1) : std::string("unknown block");
    throw SolverError("rollout of " + where + " failed: " + e.what(), e.row());
  }
  return concat({slice(shooting, 0, 0, 1), tail}, 0);
}

// Continuity-prior means: for b = 2..B, block b-1's state at t_[b].
// Since t_[b] is the last point of block b-1, these are rows of x.
inline Tensor block_end_states(const Tensor& latent_traj, const BlockPartition& p) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 1; b < p.count(); ++b) rows.push_back(p.block_end(b - 1));
  if (rows.empty()) return Tensor::zeros({0, latent_traj.cols()});
  return gather_rows(latent_traj, std::move(rows));
}

inline Tensor block_end_states(const Tensor& shooting, const BlockPartition& p, const DynamicsParams& dyn,
                               const SolverConfig& cfg, const TimeGrid& grid) {
  return block_end_states(rollout_blocks(shooting, p, dyn, cfg, grid), p);
}

}  // namespace lmsode
