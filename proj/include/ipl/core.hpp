#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ipl/approx.hpp"
#include "ipl/data.hpp"
#include "ipl/mdp.hpp"

namespace ipl {

/// r_Q(s,a) = Q(s,a) - gamma * V_targ(s') for each transition, aligned with
/// the input.
struct ImplicitRewardBatch {
  std::vector<double> values;
};

/// Inverse soft-Bellman operator over a batch of transitions. When `exact`
/// is non-null the expectation over s' uses the full transition row of that
/// MDP; otherwise the observed next state is used.
ImplicitRewardBatch implicit_reward(const Approximator& q, std::span<const double> value_target,
                                    double gamma, std::span<const Transition> transitions,
                                    const TabularMdp* exact = nullptr);

/// Exact inverse Bellman operator over every (s, a): Q - gamma * P V.
RewardTable implicit_reward_table(const QTable& q, std::span<const double> value_target,
                                  const TabularMdp& mdp);

/// sum_t w_t r1_t - sum_t w_t r2_t.
double preference_logit(std::span<const double> first_rewards, std::span<const double> second_rewards,
                        const SegmentWeighting& weighting = {});
/// Same, with the per-step rewards looked up in a table.
double preference_logit(const PreferencePair& pair, const RewardTable& rewards,
                        const SegmentWeighting& weighting = {});

/// -[y log sigma(z) + (1 - y) log sigma(-z)] in the stable logits form
/// max(z, 0) - z y + log(1 + exp(-|z|)).
double preference_bce(double logit, double label);
/// d preference_bce / d logit = sigma(z) - y.
double preference_bce_grad(double logit, double label);

/// Mean of squares. Throws ConfigError on an empty support.
double l2_regularizer(std::span<const double> rewards);
/// Half the mean square over the preference batch plus half over the offline
/// batch. An empty offline batch falls back to the preference batch alone.
double l2_regularizer(std::span<const double> pref_rewards, std::span<const double> offline_rewards);

/// Plackett-Luce negative log-likelihood of scores listed from most to least
/// preferred; writes d nll / d score into `grad` (same order).
double plackett_luce_nll(std::span<const double> ranked_scores, std::span<double> grad);

struct IplLossOptions {
  double lambda = 0.5;
  double gamma = 0.99;
  SegmentWeighting weighting{};
  /// Regularize every (s, a) of `exact` instead of the batch support.
  bool full_space = false;
  /// Exact expectations over s'; required for full_space.
  const TabularMdp* exact = nullptr;
};

struct IplLossResult {
  double loss = 0.0;
  double preference = 0.0;
  double regularizer = 0.0;
  /// Gradient with respect to the Q parameters only.
  std::vector<double> grad;
  double mean_abs_implicit_reward = 0.0;
  double max_abs_implicit_reward = 0.0;
};

/// Regularized preference loss: mean BCE over the preference batch plus
/// lambda * psi(T*Q). The value target is a constant (semi-gradient).
/// Throws TrainingError on a non-finite loss.
IplLossResult ipl_loss(const Approximator& q, std::span<const double> value_target,
                       const IplLossOptions& options, std::span<const PreferencePair> pref_batch,
                       std::span<const Transition> offline_batch);

/// Plackett-Luce variant: mean ranking NLL plus lambda * psi(T*Q).
IplLossResult ipl_ranking_loss(const Approximator& q, std::span<const double> value_target,
                               const IplLossOptions& options, std::span<const RankingQuery> rankings,
                               std::span<const Transition> offline_batch);

/// One value-regression sample: V(state) is pulled toward `target`.
struct ValueRow {
  StateId state = 0;
  double target = 0.0;
};

struct ValueLossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Linex loss mean(e^z - z - 1), z = (target - V(s)) / alpha. Above z_max the
/// exponential is continued linearly, so the loss stays convex with a
/// bounded gradient.
ValueLossResult linex_value_loss(const Approximator& v, std::span<const ValueRow> rows, double alpha,
                                 double z_max = 10.0);
/// Expectile loss mean(|tau - 1(u < 0)| u^2), u = target - V(s).
ValueLossResult expectile_value_loss(const Approximator& v, std::span<const ValueRow> rows, double tau);

/// Gradient step on the linex loss; returns the pre-step loss.
double value_update_xql(Approximator& v, Optimizer& optimizer, std::span<const ValueRow> rows,
                        double alpha, double z_max = 10.0);
/// Gradient step on the expectile loss; returns the pre-step loss.
double value_update_iql(Approximator& v, Optimizer& optimizer, std::span<const ValueRow> rows, double tau);

/// V(s) without value parameters: E_{a~pi}[Q(s,a)], or Q at the policy's
/// most likely action when `use_mode` is set.
double value_estimate_awac(const QTable& q, const Policy& policy, StateId state, bool use_mode = false);

/// Closed-form advantage-weighted extraction over a tabular dataset:
/// pi(a|s) proportional to counts(s,a) * min(exp(inv_temperature * (Q - V)), weight_max).
/// States without data get the uniform policy.
Policy extract_policy_awr(const QTable& q, std::span<const double> v, double inv_temperature,
                          const StateActionTable& counts, double weight_max = 100.0);

/// One AWR sample for parametric policies: maximize weight * log pi(action|state).
struct ActionRow {
  StateId state = 0;
  ActionId action = 0;
  double weight = 1.0;
};

/// -mean(weight * log softmax(logits)[action]) and its gradient with respect
/// to the policy parameters.
ValueLossResult awr_policy_loss(const Approximator& policy_logits, std::span<const ActionRow> rows);

/// Advantage weight min(exp(inv_temperature * advantage), weight_max).
double awr_weight(double advantage, double inv_temperature, double weight_max = 100.0);

}  // namespace ipl
