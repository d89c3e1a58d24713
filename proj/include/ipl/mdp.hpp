#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipl/rng.hpp"

namespace ipl {

using StateId = std::size_t;
using ActionId = std::size_t;

/// Dense row-major [state][action] table of reals.
class StateActionTable {
 public:
  StateActionTable() = default;
  StateActionTable(std::size_t n_states, std::size_t n_actions, double fill = 0.0)
      : n_states_(n_states), n_actions_(n_actions), values_(n_states * n_actions, fill) {}

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::size_t size() const { return values_.size(); }

  double& operator()(StateId s, ActionId a) { return values_[s * n_actions_ + a]; }
  double operator()(StateId s, ActionId a) const { return values_[s * n_actions_ + a]; }

  std::span<double> row(StateId s) { return {values_.data() + s * n_actions_, n_actions_}; }
  std::span<const double> row(StateId s) const {
    return {values_.data() + s * n_actions_, n_actions_};
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool operator==(const StateActionTable&) const = default;

 private:
  std::size_t n_states_ = 0;
  std::size_t n_actions_ = 0;
  std::vector<double> values_;
};

using QTable = StateActionTable;
using RewardTable = StateActionTable;
using VTable = std::vector<double>;

/// Stochastic policy: each row of `probs` is a distribution over actions.
struct Policy {
  StateActionTable probs;

  static Policy uniform(std::size_t n_states, std::size_t n_actions);
  /// One-hot policy from a per-state action choice.
  static Policy deterministic(std::span<const ActionId> actions, std::size_t n_actions);

  std::size_t n_states() const { return probs.n_states(); }
  std::size_t n_actions() const { return probs.n_actions(); }
  double operator()(StateId s, ActionId a) const { return probs(s, a); }

  /// Throws ConfigError unless every row is a distribution within 1e-12.
  void validate() const;
};

/// Finite MDP with a hidden expert reward.
struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  /// Flattened [state][action][next_state].
  std::vector<double> transition;
  RewardTable expert_reward;
  double discount = 0.0;
  std::vector<double> initial_dist;
  std::string generator;
  std::uint64_t seed = 0;

  std::span<const double> next_dist(StateId s, ActionId a) const {
    return {transition.data() + (s * n_actions + a) * n_states, n_states};
  }
  double p(StateId s, ActionId a, StateId next) const {
    return transition[(s * n_actions + a) * n_states + next];
  }
  std::size_t n_state_actions() const { return n_states * n_actions; }

  /// Checks the stochasticity and discount invariants; throws ConfigError.
  void validate() const;

  bool operator==(const TabularMdp&) const = default;
};

struct Trajectory {
  std::vector<StateId> states;    // horizon + 1 entries
  std::vector<ActionId> actions;  // horizon entries
  std::size_t length() const { return actions.size(); }
};

struct SoftSolution {
  QTable q;
  VTable v;
  Policy policy;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Garnet-style generator: each (s, a) moves to a random support of
/// `branching_factor` states with Dirichlet(1) weights; rewards uniform in
/// [-reward_scale, reward_scale]; uniform initial distribution.
TabularMdp make_random_mdp(std::size_t n_states, std::size_t n_actions, double gamma,
                           std::size_t branching_factor, double reward_scale, std::uint64_t seed);

struct GridCell {
  std::size_t x = 0;
  std::size_t y = 0;
};

enum class GridAction : std::size_t { up = 0, down = 1, left = 2, right = 3 };

/// 4-action grid. State id = y * width + x. The goal is absorbing with zero
/// reward; entering it pays +1, every non-goal step costs `step_penalty`.
/// With `slip_prob` the chosen action is replaced by a uniformly random one.
/// Walls keep the agent in place. Starts are uniform over non-goal cells.
TabularMdp make_gridworld(std::size_t width, std::size_t height, GridCell goal,
                          double step_penalty, double slip_prob, double gamma,
                          std::uint64_t seed);

/// P^pi over state-action pairs: P[(s,a)][(s',a')] = T[s][a][s'] * pi[s'][a'].
Eigen::MatrixXd policy_transition_matrix(const TabularMdp& mdp, const Policy& policy);

/// Q = (I - gamma P^pi)^{-1} r by LU; throws NumericalError if the Bellman
/// residual exceeds 1e-10.
QTable exact_q_evaluation(const TabularMdp& mdp, const Policy& policy, const RewardTable& reward);

/// KL-regularized optimal control against reference `mu`:
///   V(s) = alpha log E_{a~mu}[exp(Q(s,a)/alpha)],  Q = r + gamma E[V(s')],
///   pi*(a|s) proportional to mu(a|s) exp(Q(s,a)/alpha).
SoftSolution soft_value_iteration(const TabularMdp& mdp, const RewardTable& reward, double alpha,
                                  const Policy& mu, double tol = 1e-10,
                                  std::size_t max_iters = 100000);

/// One-step soft backup of a Q table: alpha log E_mu exp(Q/alpha), per state,
/// with max subtraction.
VTable soft_value(const QTable& q, double alpha, const Policy& mu);

/// Samples a reward-free trajectory of `horizon` steps from initial_dist.
Trajectory rollout(const TabularMdp& mdp, const Policy& policy, std::size_t horizon, Rng& rng);
Trajectory rollout(const TabularMdp& mdp, const Policy& policy, std::size_t horizon,
                   std::uint64_t seed);

/// E_{s ~ initial_dist}[V^pi(s)] for the given reward, by exact evaluation.
double evaluate_policy_return(const TabularMdp& mdp, const Policy& policy,
                              const RewardTable& reward);

/// E_{a~pi}[Q(s,a)] per state.
VTable expected_value(const QTable& q, const Policy& policy);

nlohmann::json mdp_to_json(const TabularMdp& mdp);
TabularMdp mdp_from_json(const nlohmann::json& doc);

nlohmann::json policy_to_json(const Policy& policy);
Policy policy_from_json(const nlohmann::json& doc);

}  // namespace ipl
