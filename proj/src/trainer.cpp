#include "ipl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>

#include "ipl/errors.hpp"
#include "training_loop.hpp"

namespace ipl {

Variant parse_variant(const std::string& name) {
  if (name == "xql" || name == "ipl-xql") return Variant::xql;
  if (name == "iql" || name == "ipl-iql") return Variant::iql;
  if (name == "awac" || name == "ipl-awac") return Variant::awac;
  throw ConfigError("unknown variant '" + name + "'");
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::xql:
      return "xql";
    case Variant::iql:
      return "iql";
    case Variant::awac:
      return "awac";
  }
  return "unknown";
}

Representation parse_representation(const std::string& name) {
  if (name == "tabular") return Representation::tabular;
  if (name == "mlp") return Representation::mlp;
  throw ConfigError("unknown representation '" + name + "'");
}

std::string to_string(Representation representation) {
  return representation == Representation::tabular ? "tabular" : "mlp";
}

void IplConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be a non-negative finite number");
  require(alpha > 0.0, "alpha must be positive");
  require(beta > 0.0, "beta must be positive");
  require(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
  require(gamma >= 0.0 && gamma < 1.0, "gamma must lie in [0, 1)");
  require(k >= 1, "segment length k must be at least 1");
  require(s >= 1 && s <= k, "subsample length s must lie in [1, k]");
  require(total_steps >= 1, "total_steps must be at least 1");
  require(eval_interval >= 1, "eval_interval must be at least 1");
  require(target_update_rate > 0.0 && target_update_rate <= 1.0, "target_update_rate must lie in (0, 1]");
  require(z_max > 0.0, "z_max must be positive");
  require(weight_max > 1.0, "weight_max must exceed 1");
  require(divergence_bound > 0.0, "divergence_bound must be positive");
  require(!regularize_full_space || (representation == Representation::tabular && exact_expectation),
          "full-space regularization requires tabular mode with exact expectations");
  for (const auto* opt : {&q_optimizer, &v_optimizer, &policy_optimizer, &reward_optimizer})
    require(opt->lr > 0.0, "learning rates must be positive");
  for (auto h : hidden) require(h > 0, "hidden layer sizes must be positive");
}

namespace {

nlohmann::json optimizer_to_json(const OptimizerSettings& o) {
  return {{"kind", to_string(o.kind)}, {"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}

OptimizerSettings optimizer_from_json(const nlohmann::json& doc, OptimizerSettings base) {
  if (doc.is_number()) {
    base.lr = doc.get<double>();
    return base;
  }
  if (doc.contains("kind")) base.kind = parse_optimizer_kind(doc["kind"].get<std::string>());
  base.lr = doc.value("lr", base.lr);
  base.beta1 = doc.value("beta1", base.beta1);
  base.beta2 = doc.value("beta2", base.beta2);
  base.eps = doc.value("eps", base.eps);
  return base;
}

}  // namespace

nlohmann::json config_to_json(const IplConfig& c) {
  return {
      {"variant", to_string(c.variant)},
      {"lambda", c.lambda},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"tau", c.tau},
      {"gamma", c.gamma},
      {"k", c.k},
      {"s", c.s},
      {"pref_batch_size", c.pref_batch_size},
      {"offline_batch_size", c.offline_batch_size},
      {"q_optimizer", optimizer_to_json(c.q_optimizer)},
      {"v_optimizer", optimizer_to_json(c.v_optimizer)},
      {"policy_optimizer", optimizer_to_json(c.policy_optimizer)},
      {"reward_optimizer", optimizer_to_json(c.reward_optimizer)},
      {"total_steps", c.total_steps},
      {"eval_interval", c.eval_interval},
      {"target_update_rate", c.target_update_rate},
      {"regularize_full_space", c.regularize_full_space},
      {"discount_in_segment", c.discount_in_segment},
      {"exact_expectation", c.exact_expectation},
      {"representation", to_string(c.representation)},
      {"hidden", c.hidden},
      {"z_max", c.z_max},
      {"weight_max", c.weight_max},
      {"divergence_bound", c.divergence_bound},
      {"ranking_loss", c.ranking_loss},
      {"reward_steps", c.reward_steps},
      {"seed", c.seed},
  };
}

IplConfig config_from_json(const nlohmann::json& doc) {
  try {
    IplConfig c;
    if (doc.contains("variant")) c.variant = parse_variant(doc["variant"].get<std::string>());
    c.lambda = doc.value("lambda", c.lambda);
    c.alpha = doc.value("alpha", c.alpha);
    c.beta = doc.value("beta", c.beta);
    c.tau = doc.value("tau", c.tau);
    c.gamma = doc.value("gamma", c.gamma);
    c.k = doc.value("k", c.k);
    c.s = doc.value("s", c.s);
    c.pref_batch_size = doc.value("pref_batch_size", c.pref_batch_size);
    c.offline_batch_size = doc.value("offline_batch_size", c.offline_batch_size);
    if (doc.contains("q_optimizer")) c.q_optimizer = optimizer_from_json(doc["q_optimizer"], c.q_optimizer);
    if (doc.contains("v_optimizer")) c.v_optimizer = optimizer_from_json(doc["v_optimizer"], c.v_optimizer);
    if (doc.contains("policy_optimizer"))
      c.policy_optimizer = optimizer_from_json(doc["policy_optimizer"], c.policy_optimizer);
    if (doc.contains("reward_optimizer"))
      c.reward_optimizer = optimizer_from_json(doc["reward_optimizer"], c.reward_optimizer);
    c.total_steps = doc.value("total_steps", c.total_steps);
    c.eval_interval = doc.value("eval_interval", c.eval_interval);
    c.target_update_rate = doc.value("target_update_rate", c.target_update_rate);
    c.regularize_full_space = doc.value("regularize_full_space", c.regularize_full_space);
    c.discount_in_segment = doc.value("discount_in_segment", c.discount_in_segment);
    c.exact_expectation = doc.value("exact_expectation", c.exact_expectation);
    if (doc.contains("representation")) c.representation = parse_representation(doc["representation"].get<std::string>());
    c.hidden = doc.value("hidden", c.hidden);
    c.z_max = doc.value("z_max", c.z_max);
    c.weight_max = doc.value("weight_max", c.weight_max);
    c.divergence_bound = doc.value("divergence_bound", c.divergence_bound);
    c.ranking_loss = doc.value("ranking_loss", c.ranking_loss);
    c.reward_steps = doc.value("reward_steps", c.reward_steps);
    c.seed = doc.value("seed", c.seed);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed algorithm config: ") + e.what());
  }
}

StateActionTable behavior_counts(const Dataset& pref_data, std::span<const Transition> offline,
                                 std::size_t n_states, std::size_t n_actions) {
  StateActionTable counts(n_states, n_actions);
  auto add_segment = [&](const Segment& seg) {
    for (std::size_t t = 0; t < seg.length(); ++t) counts(seg.states[t], seg.actions[t]) += 1.0;
  };
  for (const auto& pair : pref_data.pairs) {
    add_segment(pair.first);
    add_segment(pair.second);
  }
  for (const auto& query : pref_data.rankings)
    for (const auto& seg : query.segments) add_segment(seg);
  for (const auto& t : offline) counts(t.s, t.a) += 1.0;
  return counts;
}

std::size_t ipl_param_count(const IplConfig& config, std::size_t n_states, std::size_t n_actions) {
  // Tabular policies are extracted in closed form and carry no parameters.
  if (config.representation == Representation::tabular)
    return n_states * n_actions + (config.variant != Variant::awac ? n_states : 0);
  auto mlp = [&](std::size_t in, std::size_t out) {
    std::vector<std::size_t> layers{in};
    layers.insert(layers.end(), config.hidden.begin(), config.hidden.end());
    layers.push_back(out);
    return MlpFn::count_for(layers);
  };
  std::size_t n = mlp(n_states + n_actions, 1);
  if (config.variant != Variant::awac) n += mlp(n_states, 1);
  return n + mlp(n_states, n_actions);
}

TrainArtifacts train_ipl(const IplConfig& config, const Dataset& pref_data, const TransitionDataset& offline,
                         const TabularMdp& mdp, const TrainOptions& options) {
  if (config.ranking_loss ? pref_data.rankings.empty() : pref_data.pairs.empty())
    throw ConfigError("preference dataset is empty");
  detail::LoopInputs inputs{config, pref_data, offline.transitions, mdp, options,
                            config.ranking_loss ? detail::QObjective::ranking : detail::QObjective::preference,
                            nullptr};
  return detail::run_training(inputs);
}

namespace detail {

Approximator make_function(const IplConfig& config, InputKind input, std::size_t n_states, std::size_t n_actions,
                           std::size_t out_dim, Role role, Rng& rng) {
  if (config.representation == Representation::tabular)
    return Approximator::tabular(input, n_states, n_actions, out_dim, role);
  Approximator::MlpSpec spec{config.hidden, std::nullopt};
  return Approximator::mlp(input, n_states, n_actions, out_dim, role, spec, rng);
}

namespace {

Transition step_of(const Segment& seg, std::size_t t) { return {seg.states[t], seg.actions[t], seg.states[t + 1]}; }

/// Squared TD regression toward a fixed reward model and value target.
IplLossResult known_reward_loss(const Approximator& q, const Approximator& reward, std::span<const double> v_target,
                                double gamma, const TabularMdp* exact, std::span<const Transition> rows) {
  IplLossResult out;
  out.grad.assign(q.param_count(), 0.0);
  if (rows.empty()) return out;
  const std::size_t na = q.n_actions();
  std::vector<double> upstream(q.n_states() * na, 0.0);
  std::vector<bool> touched(upstream.size(), false);
  const double n = static_cast<double>(rows.size());
  double sum_abs = 0.0;
  for (const auto& t : rows) {
    double next = v_target[t.next];
    if (exact) {
      const auto row = exact->next_dist(t.s, t.a);
      next = 0.0;
      for (StateId sp = 0; sp < row.size(); ++sp) next += row[sp] * v_target[sp];
    }
    const double r = reward.scalar(t.s, t.a);
    const double u = q.scalar(t.s, t.a) - (r + gamma * next);
    out.preference += u * u / n;
    upstream[t.s * na + t.a] += 2.0 * u / n;
    touched[t.s * na + t.a] = true;
    sum_abs += std::abs(r);
    out.max_abs_implicit_reward = std::max(out.max_abs_implicit_reward, std::abs(r));
  }
  out.loss = out.preference;
  out.mean_abs_implicit_reward = sum_abs / n;
  if (!std::isfinite(out.loss)) throw TrainingError("TD regression loss is not finite");
  for (std::size_t cell = 0; cell < upstream.size(); ++cell)
    if (touched[cell]) q.backward_scalar(cell / na, cell % na, upstream[cell], out.grad);
  return out;
}

std::vector<RankingQuery> subsample_rankings(std::vector<RankingQuery> batch, std::size_t s, Rng& rng) {
  if (batch.empty()) return batch;
  std::size_t k = batch.front().segments.front().length();
  for (const auto& q : batch)
    for (const auto& seg : q.segments) k = std::min(k, seg.length());
  if (s > k) throw ConfigError("subsample length exceeds ranked segment length");
  const std::size_t offset = rng.below(k - s + 1);
  for (auto& q : batch)
    for (auto& seg : q.segments) seg = seg.slice(offset, s);
  return batch;
}

/// V(s) for AWAC: expectation (or mode) of Q under the current policy.
VTable awac_values(const QTable& q, const Policy& policy, bool use_mode) {
  VTable v(q.n_states());
  for (StateId s = 0; s < q.n_states(); ++s) v[s] = value_estimate_awac(q, policy, s, use_mode);
  return v;
}

}  // namespace

TrainArtifacts run_training(const LoopInputs& in) {
  const IplConfig& cfg = in.config;
  cfg.validate();
  const TabularMdp& mdp = in.mdp;
  if (cfg.gamma != mdp.discount)
    throw ConfigError(fmt::format("config gamma {} does not match the MDP discount {}", cfg.gamma, mdp.discount));
  if (in.objective == QObjective::known_reward && !in.reward_model)
    throw ConfigError("known-reward training needs a reward model");
  const std::size_t n_states = mdp.n_states;
  const std::size_t n_actions = mdp.n_actions;
  const bool mlp = cfg.representation == Representation::mlp;
  const bool has_v = cfg.variant != Variant::awac;
  const auto started = std::chrono::steady_clock::now();

  Rng root(cfg.seed);
  Rng init_rng = root.split(1);
  Rng batch_rng = root.split(2);

  Approximator q = make_function(cfg, InputKind::state_action, n_states, n_actions, 1, Role::q, init_rng);
  std::optional<Approximator> q_target;
  if (mlp) q_target = q;
  std::optional<Approximator> v;
  if (has_v) v = make_function(cfg, InputKind::state, n_states, n_actions, 1, Role::v, init_rng);
  std::optional<Approximator> policy_fn;
  if (mlp) policy_fn = make_function(cfg, InputKind::state, n_states, n_actions, n_actions, Role::policy, init_rng);

  Optimizer q_opt(cfg.q_optimizer, q.param_count());
  std::optional<Optimizer> v_opt;
  if (v) v_opt.emplace(cfg.v_optimizer, v->param_count());
  std::optional<Optimizer> pi_opt;
  if (policy_fn) pi_opt.emplace(cfg.policy_optimizer, policy_fn->param_count());

  const bool uses_preferences = in.objective != QObjective::known_reward;
  const Dataset empty_prefs;
  const Dataset& prefs = uses_preferences ? in.pref_data : empty_prefs;
  const StateActionTable counts = behavior_counts(prefs, in.offline, n_states, n_actions);
  const std::vector<Transition> offline_pool(in.offline.begin(), in.offline.end());

  const TabularMdp* exact = cfg.exact_expectation ? &mdp : nullptr;
  const IplLossOptions loss_options{cfg.lambda, cfg.gamma, cfg.weighting(), cfg.regularize_full_space, exact};
  const double inv_temp = cfg.extraction_inv_temperature();

  Policy policy = mlp ? policy_fn->softmax_policy()
                      : extract_policy_awr(QTable(n_states, n_actions), VTable(n_states, 0.0), inv_temp, counts,
                                           cfg.weight_max);

  auto q_for_targets = [&]() { return mlp ? q_target->table() : q.table(); };
  auto value_target = [&](const QTable& qt) { return has_v ? v->state_table() : awac_values(qt, policy, mlp); };

  TrainArtifacts art{QTable{}, VTable{}, policy, q, std::nullopt, std::nullopt, MetricsLog{}, cfg, 0, 0.0, 0};

  std::vector<Transition> rows;
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    // Batches.
    std::vector<PreferencePair> pair_batch;
    std::vector<RankingQuery> ranking_batch;
    if (in.objective == QObjective::preference) {
      pair_batch = sample_with_replacement(prefs.pairs, cfg.pref_batch_size, batch_rng);
      pair_batch = subsample_batch(pair_batch, cfg.s, batch_rng);
    } else if (in.objective == QObjective::ranking) {
      ranking_batch = sample_with_replacement(prefs.rankings, cfg.pref_batch_size, batch_rng);
      ranking_batch = subsample_rankings(std::move(ranking_batch), cfg.s, batch_rng);
    }
    const std::vector<Transition> offline_batch =
        sample_with_replacement(offline_pool, cfg.offline_batch_size, batch_rng);

    // Q-step against a fixed value target.
    const VTable v_target = value_target(q_for_targets());
    IplLossResult q_res;
    switch (in.objective) {
      case QObjective::preference:
        q_res = ipl_loss(q, v_target, loss_options, pair_batch, offline_batch);
        break;
      case QObjective::ranking:
        q_res = ipl_ranking_loss(q, v_target, loss_options, ranking_batch, offline_batch);
        break;
      case QObjective::known_reward:
        q_res = known_reward_loss(q, *in.reward_model, v_target, cfg.gamma, exact, offline_batch);
        break;
    }
    if (uses_preferences && q_res.mean_abs_implicit_reward > cfg.divergence_bound)
      throw TrainingError(fmt::format("implicit reward diverged at step {}: mean |r_Q| = {:.6g} exceeds {:.6g} "
                                      "(lambda = {}); increase lambda or lower the Q learning rate",
                                      step, q_res.mean_abs_implicit_reward, cfg.divergence_bound, cfg.lambda));
    q_opt.step(q.params().values, q_res.grad);
    if (mlp) polyak_update(q_target->params(), q.params(), cfg.target_update_rate);
    const QTable q_targ = q_for_targets();

    // Rows for the value and policy steps: B_p union B_o.
    rows.clear();
    for (const auto& pair : pair_batch)
      for (std::size_t t = 0; t < pair.first.length(); ++t) {
        rows.push_back(step_of(pair.first, t));
        rows.push_back(step_of(pair.second, t));
      }
    for (const auto& query : ranking_batch)
      for (const auto& seg : query.segments)
        for (std::size_t t = 0; t < seg.length(); ++t) rows.push_back(step_of(seg, t));
    rows.insert(rows.end(), offline_batch.begin(), offline_batch.end());

    double value_loss = 0.0;
    if (has_v) {
      std::vector<ValueRow> vrows;
      vrows.reserve(rows.size());
      for (const auto& t : rows) vrows.push_back({t.s, q_targ(t.s, t.a)});
      value_loss = cfg.variant == Variant::xql ? value_update_xql(*v, *v_opt, vrows, cfg.alpha, cfg.z_max)
                                               : value_update_iql(*v, *v_opt, vrows, cfg.tau);
    }

    const bool eval_now = step % cfg.eval_interval == 0 || step == cfg.total_steps;
    if (mlp) {
      const VTable v_now = value_target(q_targ);
      std::vector<ActionRow> arows;
      arows.reserve(rows.size());
      for (const auto& t : rows)
        arows.push_back({t.s, t.a, awr_weight(q_targ(t.s, t.a) - v_now[t.s], inv_temp, cfg.weight_max)});
      const auto pres = awr_policy_loss(*policy_fn, arows);
      pi_opt->step(policy_fn->params().values, pres.grad);
      if (!has_v || eval_now) policy = policy_fn->softmax_policy();
    } else if (!has_v || eval_now) {
      policy = extract_policy_awr(q_targ, value_target(q_targ), inv_temp, counts, cfg.weight_max);
    }

    if (eval_now) {
      const VTable v_now = value_target(q_targ);
      MetricsRow row;
      row.step = step;
      row.pref_loss = q_res.preference;
      row.reg_value = q_res.regularizer;
      row.value_loss = value_loss;
      row.mean_abs_implicit_reward = q_res.mean_abs_implicit_reward;
      row.max_abs_implicit_reward = q_res.max_abs_implicit_reward;
      row.gt_return = evaluate_policy_return(mdp, policy, mdp.expert_reward);
      if (in.options.oracle_reward) {
        const RewardTable r_q = implicit_reward_table(q.table(), v_now, mdp);
        double gap = 0.0;
        for (std::size_t i = 0; i < r_q.size(); ++i)
          gap = std::max(gap, std::abs(r_q.values()[i] - in.options.oracle_reward->values()[i]));
        row.oracle_reward_gap = gap;
      }
      art.metrics.append(row);
    }
  }

  art.q = q.table();
  art.v = value_target(q_for_targets());
  art.policy = policy;
  art.q_fn = q;
  art.v_fn = v;
  art.policy_fn = policy_fn;
  art.steps = cfg.total_steps;
  art.param_count = ipl_param_count(cfg, n_states, n_actions);
  art.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return art;
}

}  // namespace detail

}  // namespace ipl
