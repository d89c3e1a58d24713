#include "ipl/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "ipl/errors.hpp"

namespace ipl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Lazily evaluated implicit rewards plus the per-cell upstream gradient that
/// flows back into Q. Every r_Q(s,a) depends on Q only through Q(s,a), so
/// gradients can be pooled per cell before backpropagating.
class ImplicitRewardEvaluator {
 public:
  ImplicitRewardEvaluator(const Approximator& q, std::span<const double> value_target, double gamma,
                          const TabularMdp* exact)
      : q_(q),
        v_(value_target),
        gamma_(gamma),
        exact_(exact),
        n_actions_(q.n_actions()),
        q_cache_(q.n_states() * q.n_actions(), kNaN),
        ev_cache_(exact ? q.n_states() * q.n_actions() : 0, kNaN),
        upstream_(q.n_states() * q.n_actions(), 0.0),
        touched_(q.n_states() * q.n_actions(), false) {
    if (q.input_kind() != InputKind::state_action || q.output_dim() != 1)
      throw ConfigError("implicit rewards need a scalar state-action Q function");
    if (value_target.size() != q.n_states()) throw ConfigError("value target must cover every state");
    if (exact && (exact->n_states != q.n_states() || exact->n_actions != q.n_actions()))
      throw ConfigError("Q function shape does not match the MDP");
  }

  double q_at(StateId s, ActionId a) {
    const std::size_t cell = index(s, a);
    if (std::isnan(q_cache_[cell])) q_cache_[cell] = q_.scalar(s, a);
    return q_cache_[cell];
  }

  double expected_next_value(StateId s, ActionId a) {
    const std::size_t cell = index(s, a);
    if (std::isnan(ev_cache_[cell])) {
      const auto row = exact_->next_dist(s, a);
      double ev = 0.0;
      for (StateId sp = 0; sp < row.size(); ++sp) ev += row[sp] * v_[sp];
      ev_cache_[cell] = ev;
    }
    return ev_cache_[cell];
  }

  double reward(const Transition& t) {
    if (t.next >= v_.size()) throw EvaluationError(fmt::format("next state {} out of range", t.next));
    const double next_value = exact_ ? expected_next_value(t.s, t.a) : v_[t.next];
    return q_at(t.s, t.a) - gamma_ * next_value;
  }

  void add_upstream(StateId s, ActionId a, double g) {
    const std::size_t cell = index(s, a);
    upstream_[cell] += g;
    touched_[cell] = true;
  }

  std::vector<double> gradient() const {
    std::vector<double> grad(q_.param_count(), 0.0);
    for (std::size_t cell = 0; cell < upstream_.size(); ++cell)
      if (touched_[cell]) q_.backward_scalar(cell / n_actions_, cell % n_actions_, upstream_[cell], grad);
    return grad;
  }

 private:
  std::size_t index(StateId s, ActionId a) const {
    if (s >= q_.n_states() || a >= n_actions_)
      throw EvaluationError(fmt::format("state-action ({}, {}) out of range", s, a));
    return s * n_actions_ + a;
  }

  const Approximator& q_;
  std::span<const double> v_;
  double gamma_;
  const TabularMdp* exact_;
  std::size_t n_actions_;
  std::vector<double> q_cache_;
  std::vector<double> ev_cache_;
  std::vector<double> upstream_;
  std::vector<bool> touched_;
};

Transition step_of(const Segment& seg, std::size_t t) { return {seg.states[t], seg.actions[t], seg.states[t + 1]}; }

/// Accumulates the regularizer over the batch support (or the full space)
/// and pushes its gradient into the evaluator.
struct RegularizerTerm {
  double value = 0.0;
  double sum_abs = 0.0;
  double max_abs = 0.0;
  std::size_t count = 0;
};

RegularizerTerm apply_regularizer(ImplicitRewardEvaluator& eval, const IplLossOptions& options,
                                  std::span<const Transition> pref_rows, std::span<const Transition> offline_rows,
                                  std::size_t n_states, std::size_t n_actions) {
  RegularizerTerm term;
  auto track = [&](double r) {
    term.sum_abs += std::abs(r);
    term.max_abs = std::max(term.max_abs, std::abs(r));
    ++term.count;
  };

  if (options.full_space) {
    if (!options.exact) throw ConfigError("full-space regularization needs exact expectations");
    const double n = static_cast<double>(n_states * n_actions);
    for (StateId s = 0; s < n_states; ++s)
      for (ActionId a = 0; a < n_actions; ++a) {
        const double r = eval.reward({s, a, 0});
        term.value += r * r / n;
        eval.add_upstream(s, a, options.lambda * 2.0 * r / n);
        track(r);
      }
    return term;
  }

  if (pref_rows.empty() && offline_rows.empty()) throw ConfigError("regularizer support is empty");
  // Equal weighting between the two sources; a missing source gives its
  // weight to the other.
  const double w_pref = pref_rows.empty() ? 0.0 : (offline_rows.empty() ? 1.0 : 0.5);
  const double w_off = offline_rows.empty() ? 0.0 : (pref_rows.empty() ? 1.0 : 0.5);
  auto accumulate = [&](std::span<const Transition> rows, double weight) {
    if (rows.empty()) return;
    const double n = static_cast<double>(rows.size());
    for (const auto& row : rows) {
      const double r = eval.reward(row);
      term.value += weight * r * r / n;
      eval.add_upstream(row.s, row.a, options.lambda * weight * 2.0 * r / n);
      track(r);
    }
  };
  accumulate(pref_rows, w_pref);
  accumulate(offline_rows, w_off);
  return term;
}

void finish(IplLossResult& out, const RegularizerTerm& reg, double lambda, const char* what) {
  out.regularizer = reg.value;
  out.loss = out.preference + lambda * reg.value;
  out.mean_abs_implicit_reward = reg.count ? reg.sum_abs / static_cast<double>(reg.count) : 0.0;
  out.max_abs_implicit_reward = reg.max_abs;
  if (!std::isfinite(out.loss))
    throw TrainingError(fmt::format("{}: non-finite loss (preference term {:.6g}, regularizer {:.6g}, "
                                    "max |r_Q| {:.6g}, lambda {})",
                                    what, out.preference, reg.value, reg.max_abs, lambda));
}

}  // namespace

ImplicitRewardBatch implicit_reward(const Approximator& q, std::span<const double> value_target,
                                    double gamma, std::span<const Transition> transitions,
                                    const TabularMdp* exact) {
  ImplicitRewardEvaluator eval(q, value_target, gamma, exact);
  ImplicitRewardBatch batch;
  batch.values.reserve(transitions.size());
  for (const auto& t : transitions) batch.values.push_back(eval.reward(t));
  return batch;
}

RewardTable implicit_reward_table(const QTable& q, std::span<const double> value_target,
                                  const TabularMdp& mdp) {
  if (q.n_states() != mdp.n_states || q.n_actions() != mdp.n_actions || value_target.size() != mdp.n_states)
    throw ConfigError("implicit reward table shapes do not match the MDP");
  RewardTable r(mdp.n_states, mdp.n_actions);
  for (StateId s = 0; s < mdp.n_states; ++s)
    for (ActionId a = 0; a < mdp.n_actions; ++a) {
      const auto row = mdp.next_dist(s, a);
      double ev = 0.0;
      for (StateId sp = 0; sp < mdp.n_states; ++sp) ev += row[sp] * value_target[sp];
      r(s, a) = q(s, a) - mdp.discount * ev;
    }
  return r;
}

double preference_logit(std::span<const double> first_rewards, std::span<const double> second_rewards,
                        const SegmentWeighting& weighting) {
  if (first_rewards.size() != second_rewards.size()) throw ConfigError("paired segments must have equal length");
  double first = 0.0;
  double second = 0.0;
  for (std::size_t t = 0; t < first_rewards.size(); ++t) {
    const double w = weighting.weight(t);
    first += w * first_rewards[t];
    second += w * second_rewards[t];
  }
  return first - second;
}

double preference_logit(const PreferencePair& pair, const RewardTable& rewards, const SegmentWeighting& weighting) {
  if (pair.first.length() != pair.second.length()) throw ConfigError("paired segments must have equal length");
  return segment_return(pair.first, rewards, weighting) - segment_return(pair.second, rewards, weighting);
}

double preference_bce(double logit, double label) {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

double preference_bce_grad(double logit, double label) { return logistic(logit) - label; }

double l2_regularizer(std::span<const double> rewards) {
  if (rewards.empty()) throw ConfigError("regularizer support is empty");
  double total = 0.0;
  for (double r : rewards) total += r * r;
  return total / static_cast<double>(rewards.size());
}

double l2_regularizer(std::span<const double> pref_rewards, std::span<const double> offline_rewards) {
  if (pref_rewards.empty()) return l2_regularizer(offline_rewards);
  if (offline_rewards.empty()) return l2_regularizer(pref_rewards);
  return 0.5 * l2_regularizer(pref_rewards) + 0.5 * l2_regularizer(offline_rewards);
}

double plackett_luce_nll(std::span<const double> ranked_scores, std::span<double> grad) {
  const std::size_t k = ranked_scores.size();
  if (grad.size() != k) throw ConfigError("gradient buffer has the wrong length");
  std::fill(grad.begin(), grad.end(), 0.0);
  // Suffix log-sum-exp: lse[i] = log sum_{j >= i} exp(score_j).
  std::vector<double> lse(k);
  double running = -std::numeric_limits<double>::infinity();
  for (std::size_t i = k; i-- > 0;) {
    const double x = ranked_scores[i];
    const double hi = std::max(running, x);
    running = hi + std::log(std::exp(running - hi) + std::exp(x - hi));
    lse[i] = running;
  }
  double nll = 0.0;
  for (std::size_t stage = 0; stage + 1 < k; ++stage) {
    nll -= ranked_scores[stage] - lse[stage];
    grad[stage] -= 1.0;
    for (std::size_t j = stage; j < k; ++j) grad[j] += std::exp(ranked_scores[j] - lse[stage]);
  }
  return nll;
}

IplLossResult ipl_loss(const Approximator& q, std::span<const double> value_target,
                       const IplLossOptions& options, std::span<const PreferencePair> pref_batch,
                       std::span<const Transition> offline_batch) {
  ImplicitRewardEvaluator eval(q, value_target, options.gamma, options.exact);
  IplLossResult out;
  std::vector<Transition> pref_rows;
  std::vector<double> r1;
  std::vector<double> r2;
  const double n_pairs = static_cast<double>(pref_batch.size());
  for (const auto& pair : pref_batch) {
    const std::size_t k = pair.first.length();
    if (pair.second.length() != k) throw ConfigError("paired segments must have equal length");
    r1.resize(k);
    r2.resize(k);
    for (std::size_t t = 0; t < k; ++t) {
      const Transition t1 = step_of(pair.first, t);
      const Transition t2 = step_of(pair.second, t);
      r1[t] = eval.reward(t1);
      r2[t] = eval.reward(t2);
      pref_rows.push_back(t1);
      pref_rows.push_back(t2);
    }
    const double logit = preference_logit(r1, r2, options.weighting);
    out.preference += preference_bce(logit, pair.label) / n_pairs;
    const double g = preference_bce_grad(logit, pair.label) / n_pairs;
    if (g == 0.0) continue;
    for (std::size_t t = 0; t < k; ++t) {
      const double w = options.weighting.weight(t);
      eval.add_upstream(pair.first.states[t], pair.first.actions[t], g * w);
      eval.add_upstream(pair.second.states[t], pair.second.actions[t], -g * w);
    }
  }
  const auto reg = apply_regularizer(eval, options, pref_rows, offline_batch, q.n_states(), q.n_actions());
  finish(out, reg, options.lambda, "preference loss");
  out.grad = eval.gradient();
  return out;
}

IplLossResult ipl_ranking_loss(const Approximator& q, std::span<const double> value_target,
                               const IplLossOptions& options, std::span<const RankingQuery> rankings,
                               std::span<const Transition> offline_batch) {
  ImplicitRewardEvaluator eval(q, value_target, options.gamma, options.exact);
  IplLossResult out;
  std::vector<Transition> rows;
  std::vector<double> scores;
  std::vector<double> grad;
  const double n_queries = static_cast<double>(rankings.size());
  for (const auto& query : rankings) {
    const std::size_t kq = query.segments.size();
    if (query.permutation.size() != kq) throw ConfigError("ranking permutation has the wrong length");
    scores.assign(kq, 0.0);
    grad.assign(kq, 0.0);
    for (std::size_t rank = 0; rank < kq; ++rank) {
      const Segment& seg = query.segments.at(query.permutation[rank]);
      if (seg.length() != query.segments.front().length()) throw ConfigError("ranked segments must have equal length");
      for (std::size_t t = 0; t < seg.length(); ++t) {
        const Transition step = step_of(seg, t);
        scores[rank] += options.weighting.weight(t) * eval.reward(step);
        rows.push_back(step);
      }
    }
    out.preference += plackett_luce_nll(scores, grad) / n_queries;
    for (std::size_t rank = 0; rank < kq; ++rank) {
      const Segment& seg = query.segments[query.permutation[rank]];
      for (std::size_t t = 0; t < seg.length(); ++t)
        eval.add_upstream(seg.states[t], seg.actions[t], grad[rank] * options.weighting.weight(t) / n_queries);
    }
  }
  const auto reg = apply_regularizer(eval, options, rows, offline_batch, q.n_states(), q.n_actions());
  finish(out, reg, options.lambda, "ranking loss");
  out.grad = eval.gradient();
  return out;
}

ValueLossResult linex_value_loss(const Approximator& v, std::span<const ValueRow> rows, double alpha, double z_max) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  ValueLossResult out;
  out.grad.assign(v.param_count(), 0.0);
  if (rows.empty()) return out;
  const double n = static_cast<double>(rows.size());
  const double e_max = std::exp(z_max);
  for (const auto& row : rows) {
    const double z = (row.target - v.scalar(row.state)) / alpha;
    double loss;
    double dz;
    if (z <= z_max) {
      const double ez = std::exp(z);
      loss = ez - z - 1.0;
      dz = ez - 1.0;
    } else {
      loss = e_max * (1.0 + z - z_max) - z - 1.0;
      dz = e_max - 1.0;
    }
    out.loss += loss / n;
    v.backward_scalar(row.state, 0, -dz / (alpha * n), out.grad);
  }
  if (!std::isfinite(out.loss)) throw TrainingError("linex value loss overflowed despite clipping");
  return out;
}

ValueLossResult expectile_value_loss(const Approximator& v, std::span<const ValueRow> rows, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("expectile tau must lie in (0, 1)");
  ValueLossResult out;
  out.grad.assign(v.param_count(), 0.0);
  if (rows.empty()) return out;
  const double n = static_cast<double>(rows.size());
  for (const auto& row : rows) {
    const double u = row.target - v.scalar(row.state);
    const double w = u < 0.0 ? 1.0 - tau : tau;
    out.loss += w * u * u / n;
    v.backward_scalar(row.state, 0, -2.0 * w * u / n, out.grad);
  }
  if (!std::isfinite(out.loss)) throw TrainingError("expectile value loss is not finite");
  return out;
}

double value_update_xql(Approximator& v, Optimizer& optimizer, std::span<const ValueRow> rows, double alpha,
                        double z_max) {
  auto res = linex_value_loss(v, rows, alpha, z_max);
  optimizer.step(v.params().values, res.grad);
  return res.loss;
}

double value_update_iql(Approximator& v, Optimizer& optimizer, std::span<const ValueRow> rows, double tau) {
  auto res = expectile_value_loss(v, rows, tau);
  optimizer.step(v.params().values, res.grad);
  return res.loss;
}

double value_estimate_awac(const QTable& q, const Policy& policy, StateId state, bool use_mode) {
  if (state >= q.n_states()) throw EvaluationError("state out of range");
  if (use_mode) {
    const auto row = policy.probs.row(state);
    const auto best = static_cast<ActionId>(std::distance(row.begin(), std::max_element(row.begin(), row.end())));
    return q(state, best);
  }
  double v = 0.0;
  for (ActionId a = 0; a < q.n_actions(); ++a) v += policy(state, a) * q(state, a);
  return v;
}

double awr_weight(double advantage, double inv_temperature, double weight_max) {
  const double exponent = inv_temperature * advantage;
  if (exponent >= std::log(weight_max)) return weight_max;
  return std::exp(exponent);
}

Policy extract_policy_awr(const QTable& q, std::span<const double> v, double inv_temperature,
                          const StateActionTable& counts, double weight_max) {
  if (counts.n_states() != q.n_states() || counts.n_actions() != q.n_actions() || v.size() != q.n_states())
    throw ConfigError("policy extraction inputs have mismatched shapes");
  Policy pi{StateActionTable(q.n_states(), q.n_actions())};
  for (StateId s = 0; s < q.n_states(); ++s) {
    double total = 0.0;
    for (ActionId a = 0; a < q.n_actions(); ++a) {
      const double c = counts(s, a);
      const double w = c > 0.0 ? c * awr_weight(q(s, a) - v[s], inv_temperature, weight_max) : 0.0;
      pi.probs(s, a) = w;
      total += w;
    }
    for (ActionId a = 0; a < q.n_actions(); ++a)
      pi.probs(s, a) = total > 0.0 ? pi.probs(s, a) / total : 1.0 / static_cast<double>(q.n_actions());
  }
  return pi;
}

ValueLossResult awr_policy_loss(const Approximator& policy_logits, std::span<const ActionRow> rows) {
  ValueLossResult out;
  out.grad.assign(policy_logits.param_count(), 0.0);
  if (rows.empty()) return out;
  const double n = static_cast<double>(rows.size());
  std::vector<double> upstream(policy_logits.n_actions());
  for (const auto& row : rows) {
    const auto logits = policy_logits.forward(row.state);
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double z : logits) total += std::exp(z - peak);
    const double lse = peak + std::log(total);
    out.loss -= row.weight * (logits.at(row.action) - lse) / n;
    for (ActionId a = 0; a < logits.size(); ++a)
      upstream[a] = row.weight * (std::exp(logits[a] - lse) - (a == row.action ? 1.0 : 0.0)) / n;
    policy_logits.backward(row.state, 0, upstream, out.grad);
  }
  return out;
}

}  // namespace ipl
