#include "ipl/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "ipl/core.hpp"
#include "ipl/errors.hpp"
#include "training_loop.hpp"

namespace ipl {

RewardModel train_reward_mr(const Dataset& pref_data, std::span<const Transition> offline, const IplConfig& config,
                            const TabularMdp& mdp) {
  config.validate();
  if (pref_data.pairs.empty()) throw ConfigError("reward model needs at least one preference pair");
  Rng root(config.seed);
  Rng init_rng = root.split(3);
  Rng batch_rng = root.split(4);
  RewardModel model{detail::make_function(config, InputKind::state_action, mdp.n_states, mdp.n_actions, 1,
                                          Role::reward, init_rng),
                    {}};
  Optimizer opt(config.reward_optimizer, model.fn.param_count());
  // A reward is Q under gamma = 0 with a zero value target.
  const IplLossOptions options{config.lambda, 0.0, config.weighting(), config.regularize_full_space,
                               config.regularize_full_space ? &mdp : nullptr};
  const VTable zero(mdp.n_states, 0.0);
  const std::vector<Transition> offline_pool(offline.begin(), offline.end());
  const std::size_t steps = std::max<std::size_t>(config.reward_steps, 1);
  for (std::size_t step = 1; step <= steps; ++step) {
    auto batch = detail::sample_with_replacement(pref_data.pairs, config.pref_batch_size, batch_rng);
    batch = subsample_batch(batch, config.s, batch_rng);
    const auto off = detail::sample_with_replacement(offline_pool, config.offline_batch_size, batch_rng);
    const IplLossResult res = ipl_loss(model.fn, zero, options, batch, off);
    opt.step(model.fn.params().values, res.grad);
    if (step % config.eval_interval == 0 || step == steps) model.loss_log.emplace_back(step, res.preference);
  }
  return model;
}

TrainArtifacts train_iql_with_reward(const RewardModel& reward, const Dataset& pref_data,
                                     const TransitionDataset& offline, const IplConfig& config,
                                     const TabularMdp& mdp, const TrainOptions& options) {
  IplConfig cfg = config;
  cfg.variant = Variant::iql;
  std::vector<Transition> pool = offline.transitions;
  auto add_segment = [&](const Segment& seg) {
    for (std::size_t t = 0; t < seg.length(); ++t) pool.push_back({seg.states[t], seg.actions[t], seg.states[t + 1]});
  };
  for (const auto& pair : pref_data.pairs) {
    add_segment(pair.first);
    add_segment(pair.second);
  }
  if (pool.empty()) throw ConfigError("reward-labeled RL phase has no transitions");
  detail::LoopInputs inputs{cfg, pref_data, pool, mdp, options, detail::QObjective::known_reward, &reward.fn};
  TrainArtifacts art = detail::run_training(inputs);
  art.param_count = mr_param_count(cfg, mdp.n_states, mdp.n_actions);
  return art;
}

TrainArtifacts train_mr_iql(const IplConfig& config, const Dataset& pref_data, const TransitionDataset& offline,
                            const TabularMdp& mdp, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  const RewardModel reward = train_reward_mr(pref_data, offline.transitions, config, mdp);
  TrainArtifacts art = train_iql_with_reward(reward, pref_data, offline, config, mdp, options);
  art.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return art;
}

std::size_t reward_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions) {
  if (config.representation == Representation::tabular) return n_states * n_actions;
  std::vector<std::size_t> layers{n_states + n_actions};
  layers.insert(layers.end(), config.hidden.begin(), config.hidden.end());
  layers.push_back(1);
  return MlpFn::count_for(layers);
}

std::size_t mr_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions) {
  IplConfig iql = config;
  iql.variant = Variant::iql;
  return ipl_param_count(iql, n_states, n_actions) + reward_param_count(config, n_states, n_actions);
}

// ---------------------------------------------------------------------------
// Contextual bandits

Segment bandit_segment(StateId context, ActionId action) { return Segment{{context, context}, {action}, 0, 0}; }

void BanditProblem::validate() const {
  if (n_contexts == 0 || n_actions == 0) throw ConfigError("bandit needs contexts and actions");
  if (mu.n_states() != n_contexts || mu.n_actions() != n_actions) throw ConfigError("reference policy shape mismatch");
  mu.validate();
  for (const auto& pair : pairs) {
    if (pair.first.length() != 1 || pair.second.length() != 1)
      throw ConfigError("bandit comparisons use single-step segments");
    if (pair.first.states[0] != pair.second.states[0])
      throw ConfigError("bandit comparisons must share the context");
    if (pair.first.states[0] >= n_contexts || pair.first.actions[0] >= n_actions ||
        pair.second.actions[0] >= n_actions)
      throw ConfigError("bandit comparison out of range");
  }
}

TabularMdp BanditProblem::as_mdp() const {
  TabularMdp mdp;
  mdp.n_states = n_contexts;
  mdp.n_actions = n_actions;
  mdp.transition.assign(n_contexts * n_actions * n_contexts, 0.0);
  for (StateId c = 0; c < n_contexts; ++c)
    for (ActionId a = 0; a < n_actions; ++a) mdp.transition[(c * n_actions + a) * n_contexts + c] = 1.0;
  mdp.expert_reward = reward;
  mdp.discount = 0.0;
  mdp.initial_dist.assign(n_contexts, 1.0 / static_cast<double>(n_contexts));
  mdp.generator = "bandit";
  return mdp;
}

BanditProblem make_random_bandit(std::size_t n_contexts, std::size_t n_actions, LabelMode mode, Rng& rng) {
  if (n_contexts == 0 || n_actions < 2) throw ConfigError("bandit needs a context and at least two actions");
  BanditProblem b;
  b.n_contexts = n_contexts;
  b.n_actions = n_actions;
  b.reward = RewardTable(n_contexts, n_actions);
  b.mu = Policy{StateActionTable(n_contexts, n_actions)};
  for (StateId c = 0; c < n_contexts; ++c) {
    double total = 0.0;
    std::vector<double> draw(n_actions);
    for (auto& d : draw) total += (d = rng.exponential());
    for (ActionId a = 0; a < n_actions; ++a)
      b.mu.probs(c, a) = 0.5 * draw[a] / total + 0.5 / static_cast<double>(n_actions);
    double norm = 0.0;
    for (ActionId a = 0; a < n_actions; ++a) norm += b.mu.probs(c, a);
    for (ActionId a = 0; a < n_actions; ++a) b.mu.probs(c, a) /= norm;
    for (ActionId a = 0; a < n_actions; ++a) b.reward(c, a) = rng.uniform();
  }
  for (StateId c = 0; c < n_contexts; ++c)
    for (ActionId a1 = 0; a1 < n_actions; ++a1)
      for (ActionId a2 = a1 + 1; a2 < n_actions; ++a2)
        b.pairs.push_back(label_pair(bandit_segment(c, a1), bandit_segment(c, a2), b.reward, mode, {}, rng));
  return b;
}

std::vector<RankingQuery> bandit_rankings(const BanditProblem& bandit, std::size_t copies) {
  std::vector<RankingQuery> out;
  for (std::size_t rep = 0; rep < copies; ++rep)
    for (StateId c = 0; c < bandit.n_contexts; ++c) {
      RankingQuery q;
      for (ActionId a = 0; a < bandit.n_actions; ++a) q.segments.push_back(bandit_segment(c, a));
      q.permutation.resize(bandit.n_actions);
      std::iota(q.permutation.begin(), q.permutation.end(), std::size_t{0});
      std::stable_sort(q.permutation.begin(), q.permutation.end(),
                       [&](std::size_t i, std::size_t j) { return bandit.reward(c, i) > bandit.reward(c, j); });
      out.push_back(std::move(q));
    }
  return out;
}

namespace {

StateActionTable log_softmax(const StateActionTable& logits) {
  StateActionTable out(logits.n_states(), logits.n_actions());
  for (StateId c = 0; c < logits.n_states(); ++c) {
    const auto row = logits.row(c);
    const double peak = *std::max_element(row.begin(), row.end());
    double acc = 0.0;
    for (double x : row) acc += std::exp(x - peak);
    const double lse = peak + std::log(acc);
    for (ActionId a = 0; a < logits.n_actions(); ++a) out(c, a) = row[a] - lse;
  }
  return out;
}

void check_shapes(const StateActionTable& logits, const Policy& mu, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (logits.n_states() != mu.n_states() || logits.n_actions() != mu.n_actions())
    throw ConfigError("policy logits and reference policy disagree in shape");
}

void check_positive(const StateActionTable& log_pi, const Policy& mu, StateId c, ActionId a) {
  if (!(mu(c, a) > 0.0) || !std::isfinite(log_pi(c, a)))
    throw EvaluationError(fmt::format("action {} in context {} has zero probability", a, c));
}

}  // namespace

QTable policy_param_q(const StateActionTable& logits, const Policy& mu, double alpha) {
  check_shapes(logits, mu, alpha);
  const StateActionTable log_pi = log_softmax(logits);
  QTable q(logits.n_states(), logits.n_actions());
  for (StateId c = 0; c < q.n_states(); ++c)
    for (ActionId a = 0; a < q.n_actions(); ++a)
      q(c, a) = mu(c, a) > 0.0 ? alpha * (log_pi(c, a) - std::log(mu(c, a)))
                               : -std::numeric_limits<double>::infinity();
  return q;
}

DpoResult dpo_loss(const StateActionTable& logits, const Policy& mu, std::span<const PreferencePair> pairs,
                   double alpha) {
  check_shapes(logits, mu, alpha);
  DpoResult out;
  out.grad.assign(logits.size(), 0.0);
  if (pairs.empty()) return out;
  const StateActionTable log_pi = log_softmax(logits);
  const std::size_t na = logits.n_actions();
  const double n = static_cast<double>(pairs.size());
  for (const auto& pair : pairs) {
    const StateId c = pair.first.states.at(0);
    if (pair.second.states.at(0) != c) throw ConfigError("bandit comparisons must share the context");
    const ActionId a1 = pair.first.actions.at(0);
    const ActionId a2 = pair.second.actions.at(0);
    check_positive(log_pi, mu, c, a1);
    check_positive(log_pi, mu, c, a2);
    const double z = alpha * (log_pi(c, a1) - std::log(mu(c, a1))) - alpha * (log_pi(c, a2) - std::log(mu(c, a2)));
    out.loss += preference_bce(z, pair.label) / n;
    // The log-partition terms cancel, leaving alpha * (e_a1 - e_a2).
    const double g = preference_bce_grad(z, pair.label) * alpha / n;
    out.grad[c * na + a1] += g;
    out.grad[c * na + a2] -= g;
  }
  return out;
}

DpoResult ipl_policy_param_loss(const StateActionTable& logits, const Policy& mu,
                                std::span<const PreferencePair> pairs, double alpha) {
  check_shapes(logits, mu, alpha);
  const std::size_t nc = logits.n_states();
  const std::size_t na = logits.n_actions();
  Approximator q = Approximator::tabular(InputKind::state_action, nc, na, 1, Role::q);
  const QTable qt = policy_param_q(logits, mu, alpha);
  q.params().values = qt.values();
  const StateActionTable log_pi = log_softmax(logits);
  for (const auto& pair : pairs) {
    const StateId c = pair.first.states.at(0);
    check_positive(log_pi, mu, c, pair.first.actions.at(0));
    check_positive(log_pi, mu, c, pair.second.actions.at(0));
  }
  const VTable zero(nc, 0.0);
  const IplLossOptions options{0.0, 0.0, {}, false, nullptr};
  DpoResult out;
  out.grad.assign(logits.size(), 0.0);
  if (pairs.empty()) return out;
  const IplLossResult res = ipl_loss(q, zero, options, pairs, {});
  out.loss = res.loss;
  // dQ(c,a)/dlogit(c,b) = alpha * (1[a = b] - pi(b|c)).
  for (StateId c = 0; c < nc; ++c) {
    const auto row = logits.row(c);
    const double peak = *std::max_element(row.begin(), row.end());
    std::vector<double> pi(na);
    double z = 0.0;
    for (ActionId a = 0; a < na; ++a) z += (pi[a] = std::exp(row[a] - peak));
    double g_sum = 0.0;
    for (ActionId a = 0; a < na; ++a) g_sum += res.grad[c * na + a];
    for (ActionId b = 0; b < na; ++b) out.grad[c * na + b] = alpha * (res.grad[c * na + b] - pi[b] / z * g_sum);
  }
  return out;
}

namespace {

Policy softmax_rows(const StateActionTable& logits);

double expected_reward(const BanditProblem& bandit, const Policy& pi) {
  double total = 0.0;
  for (StateId c = 0; c < bandit.n_contexts; ++c)
    for (ActionId a = 0; a < bandit.n_actions; ++a) total += pi(c, a) * bandit.reward(c, a);
  return total / static_cast<double>(bandit.n_contexts);
}

template <typename LossFn>
StateActionTable optimize_logits(const BanditProblem& bandit, const DpoConfig& config, LossFn loss,
                                 MetricsLog* log) {
  bandit.validate();
  if (!(config.alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (config.eval_interval == 0) throw ConfigError("eval_interval must be at least 1");
  StateActionTable logits(bandit.n_contexts, bandit.n_actions);
  for (std::size_t i = 0; i < logits.size(); ++i) logits.values()[i] = std::log(bandit.mu.probs.values()[i]);
  Optimizer opt(config.optimizer, logits.size());
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const DpoResult res = loss(logits, bandit.mu, bandit.pairs, config.alpha);
    if (!std::isfinite(res.loss)) throw TrainingError("bandit preference loss is not finite");
    opt.step(logits.values(), res.grad);
    if (log && (step % config.eval_interval == 0 || step == config.steps)) {
      MetricsRow row;
      row.step = step;
      row.pref_loss = res.loss;
      row.gt_return = expected_reward(bandit, softmax_rows(logits));
      log->append(row);
    }
  }
  return logits;
}

Policy softmax_rows(const StateActionTable& logits) {
  const StateActionTable lp = log_softmax(logits);
  Policy pi{StateActionTable(logits.n_states(), logits.n_actions())};
  for (std::size_t i = 0; i < lp.size(); ++i) pi.probs.values()[i] = std::exp(lp.values()[i]);
  return pi;
}

}  // namespace

Policy train_dpo(const BanditProblem& bandit, const DpoConfig& config, MetricsLog* log) {
  return softmax_rows(optimize_logits(bandit, config, dpo_loss, log));
}

Policy train_ipl_bandit(const BanditProblem& bandit, const DpoConfig& config) {
  const StateActionTable logits = optimize_logits(bandit, config, ipl_policy_param_loss, nullptr);
  const QTable q = policy_param_q(logits, bandit.mu, config.alpha);
  const VTable v = soft_value(q, config.alpha, bandit.mu);
  Policy pi{StateActionTable(bandit.n_contexts, bandit.n_actions)};
  for (StateId c = 0; c < bandit.n_contexts; ++c) {
    double total = 0.0;
    for (ActionId a = 0; a < bandit.n_actions; ++a)
      total += (pi.probs(c, a) = bandit.mu(c, a) * std::exp((q(c, a) - v[c]) / config.alpha));
    for (ActionId a = 0; a < bandit.n_actions; ++a) pi.probs(c, a) /= total;
  }
  return pi;
}

double max_total_variation(const Policy& p, const Policy& q) {
  if (p.n_states() != q.n_states() || p.n_actions() != q.n_actions()) throw ConfigError("policy shapes differ");
  double worst = 0.0;
  for (StateId s = 0; s < p.n_states(); ++s) {
    double tv = 0.0;
    for (ActionId a = 0; a < p.n_actions(); ++a) tv += std::abs(p(s, a) - q(s, a));
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

}  // namespace ipl
