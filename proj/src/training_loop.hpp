#pragma once

#include <span>
#include <vector>

#include "ipl/trainer.hpp"

namespace ipl::detail {

enum class QObjective {
  preference,    // pairwise BCE through the inverse Bellman operator
  ranking,       // Plackett-Luce NLL through the inverse Bellman operator
  known_reward,  // TD regression toward r(s,a) + gamma V(s')
};

struct LoopInputs {
  const IplConfig& config;
  const Dataset& pref_data;
  std::span<const Transition> offline;
  const TabularMdp& mdp;
  const TrainOptions& options;
  QObjective objective = QObjective::preference;
  /// Required for known_reward.
  const Approximator* reward_model = nullptr;
};

/// Shared offline loop: sample batches, Q-step, value step, policy step,
/// target update, metrics.
TrainArtifacts run_training(const LoopInputs& inputs);

/// `n` draws with replacement; n == 0 returns the whole pool.
template <typename T>
std::vector<T> sample_with_replacement(const std::vector<T>& pool, std::size_t n, Rng& rng) {
  if (n == 0 || pool.empty()) return pool;
  std::vector<T> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[rng.below(pool.size())]);
  return out;
}

/// Builds a learnable function for the configured representation.
Approximator make_function(const IplConfig& config, InputKind input, std::size_t n_states, std::size_t n_actions,
                           std::size_t out_dim, Role role, Rng& rng);

}  // namespace ipl::detail
