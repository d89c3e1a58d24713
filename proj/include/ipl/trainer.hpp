#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipl/approx.hpp"
#include "ipl/core.hpp"
#include "ipl/data.hpp"
#include "ipl/mdp.hpp"
#include "ipl/metrics.hpp"

namespace ipl {

/// Offline RL algorithm that supplies the value target and the policy.
enum class Variant { xql, iql, awac };

enum class Representation { tabular, mlp };

Variant parse_variant(const std::string& name);
std::string to_string(Variant variant);
Representation parse_representation(const std::string& name);
std::string to_string(Representation representation);

/// Hyperparameters shared by the IPL trainers and the MR baseline.
struct IplConfig {
  Variant variant = Variant::iql;
  double lambda = 0.5;
  double alpha = 2.0;  // KL temperature (XQL value step and extraction)
  double beta = 3.0;   // AWR inverse temperature (IQL / AWAC)
  double tau = 0.7;    // expectile
  double gamma = 0.99;
  std::size_t k = 25;
  std::size_t s = 16;
  /// 0 means use the whole dataset every step.
  std::size_t pref_batch_size = 16;
  std::size_t offline_batch_size = 256;
  OptimizerSettings q_optimizer{};
  OptimizerSettings v_optimizer{};
  OptimizerSettings policy_optimizer{};
  std::size_t total_steps = 20000;
  std::size_t eval_interval = 1000;
  double target_update_rate = 0.005;
  bool regularize_full_space = false;
  bool discount_in_segment = false;
  /// Tabular transition rows for E_{s'}[V]; otherwise the observed s'.
  bool exact_expectation = true;
  Representation representation = Representation::tabular;
  std::vector<std::size_t> hidden = {64, 64};
  double z_max = 10.0;
  double weight_max = 100.0;
  double divergence_bound = 1e4;
  /// Plackett-Luce loss over rankings instead of the pairwise BCE.
  bool ranking_loss = false;
  /// Reward-model steps for the MR baseline.
  std::size_t reward_steps = 20000;
  OptimizerSettings reward_optimizer{};
  std::uint64_t seed = 0;

  /// Range and cross-field checks; throws ConfigError.
  void validate() const;
  SegmentWeighting weighting() const { return {discount_in_segment, gamma}; }
  /// Inverse temperature used for advantage-weighted extraction.
  double extraction_inv_temperature() const { return variant == Variant::xql ? 1.0 / alpha : beta; }
};

nlohmann::json config_to_json(const IplConfig& config);
/// Missing keys keep their defaults.
IplConfig config_from_json(const nlohmann::json& doc);

struct TrainArtifacts {
  QTable q;
  /// The value target used by the Q-step at the end of training.
  VTable v;
  Policy policy;
  Approximator q_fn;
  std::optional<Approximator> v_fn;
  std::optional<Approximator> policy_fn;
  MetricsLog metrics;
  IplConfig config;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
  /// Learnable scalars used by the method (all networks it trains).
  std::size_t param_count = 0;
};

struct TrainOptions {
  /// Attaches an exact reward target; its sup-norm gap to T*Q is logged.
  const RewardTable* oracle_reward = nullptr;
};

/// State-action occurrence counts over preference segments and transitions;
/// the empirical behavior distribution used by value steps and extraction.
StateActionTable behavior_counts(const Dataset& pref_data, std::span<const Transition> offline,
                                 std::size_t n_states, std::size_t n_actions);

/// Inverse preference learning: alternates the regularized preference
/// Q-step with the variant's value step, extracting the policy along the way.
/// `mdp` supplies exact expectations (tabular mode) and ground-truth returns.
TrainArtifacts train_ipl(const IplConfig& config, const Dataset& pref_data, const TransitionDataset& offline,
                         const TabularMdp& mdp, const TrainOptions& options = {});

/// Parameters an IPL variant trains with the given backbone sizes. Tabular
/// policies are extracted in closed form and add none.
std::size_t ipl_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions);

}  // namespace ipl
