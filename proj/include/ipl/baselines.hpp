#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ipl/approx.hpp"
#include "ipl/data.hpp"
#include "ipl/mdp.hpp"
#include "ipl/trainer.hpp"

namespace ipl {

/// Explicit reward network r_theta(s, a) and its training curve.
struct RewardModel {
  Approximator fn;
  /// (step, preference BCE) at every eval_interval and at the last step.
  std::vector<std::pair<std::size_t, double>> loss_log;

  RewardTable table() const { return fn.table(); }
};

/// Fits r_theta on the preference BCE with the same batch subsampling as IPL
/// and an explicit L2 penalty on its outputs over the data support (or the
/// full space when config.regularize_full_space is set). Runs
/// config.reward_steps steps of config.reward_optimizer.
RewardModel train_reward_mr(const Dataset& pref_data, std::span<const Transition> offline, const IplConfig& config,
                            const TabularMdp& mdp);

/// IQL on rewards labeled by `reward`: squared TD regression toward
/// r_theta(s,a) + gamma V(s'), expectile V-step, AWR extraction. Transitions
/// from the preference segments join the offline pool so both methods see the
/// same support. The reported param_count includes the reward model.
TrainArtifacts train_iql_with_reward(const RewardModel& reward, const Dataset& pref_data,
                                     const TransitionDataset& offline, const IplConfig& config,
                                     const TabularMdp& mdp, const TrainOptions& options = {});

/// Both phases of the MR + IQL baseline.
TrainArtifacts train_mr_iql(const IplConfig& config, const Dataset& pref_data, const TransitionDataset& offline,
                            const TabularMdp& mdp, const TrainOptions& options = {});

std::size_t reward_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions);
/// IQL networks plus the reward model.
std::size_t mr_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions);

/// Contextual bandit: every pair compares two actions of the same context via
/// length-1 segments whose next state is the context itself.
struct BanditProblem {
  std::size_t n_contexts = 0;
  std::size_t n_actions = 0;
  Policy mu;
  RewardTable reward;
  std::vector<PreferencePair> pairs;

  /// Throws ConfigError if a pair mixes contexts or has a non-unit segment.
  void validate() const;
  /// Self-looping MDP with discount 0 and the bandit reward as expert reward.
  TabularMdp as_mdp() const;
};

/// Random rewards in [0, 1), reference policy drawn from a Dirichlet(1) mixed
/// with the uniform distribution, and every action pair of every context
/// labeled by `mode`.
BanditProblem make_random_bandit(std::size_t n_contexts, std::size_t n_actions, LabelMode mode, Rng& rng);

/// Segment of one step taken in `context`.
Segment bandit_segment(StateId context, ActionId action);

/// One full noiseless ranking of all actions per context, repeated `copies` times.
std::vector<RankingQuery> bandit_rankings(const BanditProblem& bandit, std::size_t copies = 1);

struct DpoResult {
  double loss = 0.0;
  /// Gradient with respect to the [context][action] policy logits.
  std::vector<double> grad;
};

/// Mean BCE of the logit alpha * [log pi(a1|c) - log mu(a1|c)] - alpha * [log pi(a2|c) - log mu(a2|c)]
/// with pi = softmax(logits) per context. Throws EvaluationError when a
/// compared action has zero probability under pi or mu.
DpoResult dpo_loss(const StateActionTable& logits, const Policy& mu, std::span<const PreferencePair> pairs,
                   double alpha);

/// ipl_loss at lambda = 0 with Q(c, a) = alpha * (log pi(a|c) - log mu(a|c))
/// and gamma = 0, its Q gradient chained back to the policy logits.
DpoResult ipl_policy_param_loss(const StateActionTable& logits, const Policy& mu,
                                std::span<const PreferencePair> pairs, double alpha);

/// alpha * (log softmax(logits) - log mu).
QTable policy_param_q(const StateActionTable& logits, const Policy& mu, double alpha);

struct DpoConfig {
  double alpha = 1.0;
  std::size_t steps = 2000;
  OptimizerSettings optimizer{OptimizerKind::adam, 1e-2};
  std::size_t eval_interval = 100;
};

/// Full-batch optimization of dpo_loss from pi = mu; returns softmax(logits).
/// `log`, if given, receives the loss and expected reward every eval_interval.
Policy train_dpo(const BanditProblem& bandit, const DpoConfig& config, MetricsLog* log = nullptr);

/// Same optimization driven by ipl_policy_param_loss; the policy is then
/// extracted XQL-style as pi(a|c) proportional to mu(a|c) exp((Q - V) / alpha)
/// with V the soft value of Q under mu.
Policy train_ipl_bandit(const BanditProblem& bandit, const DpoConfig& config);

/// Largest per-state total-variation distance between two policies.
double max_total_variation(const Policy& p, const Policy& q);

}  // namespace ipl
