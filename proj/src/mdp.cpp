#include "ipl/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "ipl/errors.hpp"

namespace ipl {

namespace {

constexpr double kStochasticTol = 1e-12;

void check_distribution(std::span<const double> row, const std::string& what) {
  double total = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError(what + " has a negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > kStochasticTol)
    throw ConfigError(fmt::format("{} sums to {:.17g}, expected 1", what, total));
}

}  // namespace

Policy Policy::uniform(std::size_t n_states, std::size_t n_actions) {
  return Policy{StateActionTable(n_states, n_actions, 1.0 / static_cast<double>(n_actions))};
}

Policy Policy::deterministic(std::span<const ActionId> actions, std::size_t n_actions) {
  Policy pi{StateActionTable(actions.size(), n_actions, 0.0)};
  for (std::size_t s = 0; s < actions.size(); ++s) {
    if (actions[s] >= n_actions) throw ConfigError("deterministic policy action out of range");
    pi.probs(s, actions[s]) = 1.0;
  }
  return pi;
}

void Policy::validate() const {
  for (StateId s = 0; s < n_states(); ++s) check_distribution(probs.row(s), fmt::format("policy row {}", s));
}

void TabularMdp::validate() const {
  if (n_states == 0 || n_actions == 0) throw ConfigError("MDP must have at least one state and action");
  if (transition.size() != n_states * n_actions * n_states)
    throw ConfigError("transition tensor has the wrong size");
  if (expert_reward.n_states() != n_states || expert_reward.n_actions() != n_actions)
    throw ConfigError("expert reward table has the wrong shape");
  if (initial_dist.size() != n_states) throw ConfigError("initial distribution has the wrong size");
  if (!(discount >= 0.0 && discount < 1.0)) throw ConfigError("discount must lie in [0, 1)");
  for (StateId s = 0; s < n_states; ++s)
    for (ActionId a = 0; a < n_actions; ++a)
      check_distribution(next_dist(s, a), fmt::format("transition row ({}, {})", s, a));
  check_distribution(initial_dist, "initial distribution");
  for (double r : expert_reward.values())
    if (!std::isfinite(r)) throw ConfigError("expert reward must be finite");
}

TabularMdp make_random_mdp(std::size_t n_states, std::size_t n_actions, double gamma,
                           std::size_t branching_factor, double reward_scale, std::uint64_t seed) {
  if (n_states < 2 || n_actions < 2) throw ConfigError("random MDP needs n_states >= 2 and n_actions >= 2");
  if (branching_factor < 1 || branching_factor > n_states)
    throw ConfigError("branching_factor must lie in [1, n_states]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("discount must lie in [0, 1)");
  if (!(reward_scale >= 0.0)) throw ConfigError("reward_scale must be non-negative");

  Rng rng(seed);
  TabularMdp mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.discount = gamma;
  mdp.generator = "random";
  mdp.seed = seed;
  mdp.transition.assign(n_states * n_actions * n_states, 0.0);
  mdp.expert_reward = RewardTable(n_states, n_actions);

  std::vector<StateId> order(n_states);
  std::vector<double> weights(branching_factor);
  for (StateId s = 0; s < n_states; ++s) {
    for (ActionId a = 0; a < n_actions; ++a) {
      std::iota(order.begin(), order.end(), StateId{0});
      // Partial Fisher-Yates picks the support.
      for (std::size_t i = 0; i < branching_factor; ++i) {
        const std::size_t j = i + rng.below(n_states - i);
        std::swap(order[i], order[j]);
      }
      double total = 0.0;
      for (double& w : weights) {
        w = rng.exponential();
        total += w;
      }
      double* row = mdp.transition.data() + (s * n_actions + a) * n_states;
      for (std::size_t i = 0; i < branching_factor; ++i) row[order[i]] = weights[i] / total;
      // Renormalize so the row sums to 1 as exactly as floating point allows.
      const double sum = std::accumulate(row, row + n_states, 0.0);
      for (std::size_t i = 0; i < n_states; ++i) row[i] /= sum;
    }
  }
  for (double& r : mdp.expert_reward.values()) r = rng.uniform(-reward_scale, reward_scale);
  mdp.initial_dist.assign(n_states, 1.0 / static_cast<double>(n_states));
  mdp.validate();
  return mdp;
}

TabularMdp make_gridworld(std::size_t width, std::size_t height, GridCell goal,
                          double step_penalty, double slip_prob, double gamma,
                          std::uint64_t seed) {
  if (width == 0 || height == 0 || width * height < 2) throw ConfigError("gridworld needs at least two cells");
  if (goal.x >= width || goal.y >= height) throw ConfigError("goal cell lies outside the grid");
  if (!(slip_prob >= 0.0 && slip_prob < 1.0)) throw ConfigError("slip_prob must lie in [0, 1)");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("discount must lie in [0, 1)");

  constexpr std::size_t kActions = 4;
  const std::size_t n = width * height;
  const StateId goal_id = goal.y * width + goal.x;

  auto move = [&](StateId s, std::size_t action) -> StateId {
    std::size_t x = s % width;
    std::size_t y = s / width;
    switch (static_cast<GridAction>(action)) {
      case GridAction::up:
        if (y > 0) --y;
        break;
      case GridAction::down:
        if (y + 1 < height) ++y;
        break;
      case GridAction::left:
        if (x > 0) --x;
        break;
      case GridAction::right:
        if (x + 1 < width) ++x;
        break;
    }
    return y * width + x;
  };

  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = kActions;
  mdp.discount = gamma;
  mdp.generator = "gridworld";
  mdp.seed = seed;
  mdp.transition.assign(n * kActions * n, 0.0);
  mdp.expert_reward = RewardTable(n, kActions);

  for (StateId s = 0; s < n; ++s) {
    for (std::size_t a = 0; a < kActions; ++a) {
      double* row = mdp.transition.data() + (s * kActions + a) * n;
      if (s == goal_id) {
        row[goal_id] = 1.0;
        continue;
      }
      row[move(s, a)] += 1.0 - slip_prob;
      if (slip_prob > 0.0)
        for (std::size_t b = 0; b < kActions; ++b) row[move(s, b)] += slip_prob / kActions;
      mdp.expert_reward(s, a) = row[goal_id] - step_penalty;
    }
  }
  mdp.initial_dist.assign(n, 1.0 / static_cast<double>(n - 1));
  mdp.initial_dist[goal_id] = 0.0;
  mdp.validate();
  return mdp;
}

Eigen::MatrixXd policy_transition_matrix(const TabularMdp& mdp, const Policy& policy) {
  if (policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions)
    throw ConfigError("policy shape does not match the MDP");
  const std::size_t na = mdp.n_actions;
  const std::size_t nsa = mdp.n_state_actions();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nsa), static_cast<Eigen::Index>(nsa));
  for (StateId s = 0; s < mdp.n_states; ++s)
    for (ActionId a = 0; a < na; ++a) {
      const auto row = static_cast<Eigen::Index>(s * na + a);
      for (StateId sp = 0; sp < mdp.n_states; ++sp) {
        const double t = mdp.p(s, a, sp);
        if (t == 0.0) continue;
        for (ActionId ap = 0; ap < na; ++ap)
          p(row, static_cast<Eigen::Index>(sp * na + ap)) = t * policy(sp, ap);
      }
    }
  return p;
}

QTable exact_q_evaluation(const TabularMdp& mdp, const Policy& policy, const RewardTable& reward) {
  if (reward.n_states() != mdp.n_states || reward.n_actions() != mdp.n_actions)
    throw ConfigError("reward shape does not match the MDP");
  const auto nsa = static_cast<Eigen::Index>(mdp.n_state_actions());
  const Eigen::MatrixXd p = policy_transition_matrix(mdp, policy);
  const Eigen::MatrixXd system = Eigen::MatrixXd::Identity(nsa, nsa) - mdp.discount * p;
  const Eigen::Map<const Eigen::VectorXd> r(reward.values().data(), nsa);
  const Eigen::VectorXd q = system.partialPivLu().solve(r);

  const double residual = (q - r - mdp.discount * p * q).lpNorm<Eigen::Infinity>();
  if (!(residual <= 1e-10))
    throw NumericalError(fmt::format("policy evaluation residual {:.3e} exceeds 1e-10", residual));

  QTable out(mdp.n_states, mdp.n_actions);
  std::copy(q.data(), q.data() + nsa, out.values().begin());
  return out;
}

VTable soft_value(const QTable& q, double alpha, const Policy& mu) {
  VTable v(q.n_states());
  for (StateId s = 0; s < q.n_states(); ++s) {
    double peak = -std::numeric_limits<double>::infinity();
    for (ActionId a = 0; a < q.n_actions(); ++a)
      if (mu(s, a) > 0.0) peak = std::max(peak, q(s, a));
    double acc = 0.0;
    for (ActionId a = 0; a < q.n_actions(); ++a)
      if (mu(s, a) > 0.0) acc += mu(s, a) * std::exp((q(s, a) - peak) / alpha);
    v[s] = peak + alpha * std::log(acc);
  }
  return v;
}

SoftSolution soft_value_iteration(const TabularMdp& mdp, const RewardTable& reward, double alpha,
                                  const Policy& mu, double tol, std::size_t max_iters) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (mu.n_states() != mdp.n_states || mu.n_actions() != mdp.n_actions)
    throw ConfigError("reference policy shape does not match the MDP");
  mu.validate();

  SoftSolution sol;
  sol.q = QTable(mdp.n_states, mdp.n_actions);
  sol.v = soft_value(sol.q, alpha, mu);
  QTable next(mdp.n_states, mdp.n_actions);
  double residual = std::numeric_limits<double>::infinity();
  std::size_t it = 0;
  while (it < max_iters) {
    ++it;
    residual = 0.0;
    for (StateId s = 0; s < mdp.n_states; ++s)
      for (ActionId a = 0; a < mdp.n_actions; ++a) {
        const auto row = mdp.next_dist(s, a);
        double ev = 0.0;
        for (StateId sp = 0; sp < mdp.n_states; ++sp) ev += row[sp] * sol.v[sp];
        next(s, a) = reward(s, a) + mdp.discount * ev;
        residual = std::max(residual, std::abs(next(s, a) - sol.q(s, a)));
      }
    std::swap(sol.q, next);
    sol.v = soft_value(sol.q, alpha, mu);
    if (residual < tol) break;
  }
  if (!(residual < tol))
    throw ConvergenceError(
        fmt::format("soft value iteration did not converge in {} iterations (residual {:.3e})", max_iters, residual),
        residual);

  sol.iterations = it;
  sol.residual = residual;
  sol.policy = Policy{StateActionTable(mdp.n_states, mdp.n_actions)};
  for (StateId s = 0; s < mdp.n_states; ++s) {
    double total = 0.0;
    for (ActionId a = 0; a < mdp.n_actions; ++a) {
      const double w = mu(s, a) > 0.0 ? mu(s, a) * std::exp((sol.q(s, a) - sol.v[s]) / alpha) : 0.0;
      sol.policy.probs(s, a) = w;
      total += w;
    }
    for (ActionId a = 0; a < mdp.n_actions; ++a) sol.policy.probs(s, a) /= total;
  }
  return sol;
}

Trajectory rollout(const TabularMdp& mdp, const Policy& policy, std::size_t horizon, Rng& rng) {
  if (horizon < 1) throw ConfigError("rollout horizon must be at least 1");
  Trajectory traj;
  traj.states.reserve(horizon + 1);
  traj.actions.reserve(horizon);
  StateId s = rng.categorical(mdp.initial_dist);
  traj.states.push_back(s);
  for (std::size_t t = 0; t < horizon; ++t) {
    const ActionId a = rng.categorical(policy.probs.row(s));
    s = rng.categorical(mdp.next_dist(traj.states.back(), a));
    traj.actions.push_back(a);
    traj.states.push_back(s);
  }
  return traj;
}

Trajectory rollout(const TabularMdp& mdp, const Policy& policy, std::size_t horizon,
                   std::uint64_t seed) {
  Rng rng(seed);
  return rollout(mdp, policy, horizon, rng);
}

VTable expected_value(const QTable& q, const Policy& policy) {
  VTable v(q.n_states(), 0.0);
  for (StateId s = 0; s < q.n_states(); ++s)
    for (ActionId a = 0; a < q.n_actions(); ++a) v[s] += policy(s, a) * q(s, a);
  return v;
}

double evaluate_policy_return(const TabularMdp& mdp, const Policy& policy,
                              const RewardTable& reward) {
  const QTable q = exact_q_evaluation(mdp, policy, reward);
  const VTable v = expected_value(q, policy);
  double ret = 0.0;
  for (StateId s = 0; s < mdp.n_states; ++s) ret += mdp.initial_dist[s] * v[s];
  return ret;
}

nlohmann::json mdp_to_json(const TabularMdp& mdp) {
  nlohmann::json transition = nlohmann::json::array();
  for (StateId s = 0; s < mdp.n_states; ++s) {
    nlohmann::json per_action = nlohmann::json::array();
    for (ActionId a = 0; a < mdp.n_actions; ++a) {
      auto row = mdp.next_dist(s, a);
      per_action.push_back(std::vector<double>(row.begin(), row.end()));
    }
    transition.push_back(std::move(per_action));
  }
  nlohmann::json reward = nlohmann::json::array();
  for (StateId s = 0; s < mdp.n_states; ++s) {
    auto row = mdp.expert_reward.row(s);
    reward.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"n_states", mdp.n_states},
          {"n_actions", mdp.n_actions},
          {"gamma", mdp.discount},
          {"transition", std::move(transition)},
          {"expert_reward", std::move(reward)},
          {"initial_dist", mdp.initial_dist},
          {"metadata", {{"generator", mdp.generator}, {"seed", mdp.seed}}}};
}

TabularMdp mdp_from_json(const nlohmann::json& doc) {
  try {
    TabularMdp mdp;
    mdp.n_states = doc.at("n_states").get<std::size_t>();
    mdp.n_actions = doc.at("n_actions").get<std::size_t>();
    mdp.discount = doc.at("gamma").get<double>();
    mdp.transition.reserve(mdp.n_states * mdp.n_actions * mdp.n_states);
    const auto& t = doc.at("transition");
    if (t.size() != mdp.n_states) throw ConfigError("transition has the wrong number of states");
    for (const auto& per_action : t) {
      if (per_action.size() != mdp.n_actions) throw ConfigError("transition has the wrong number of actions");
      for (const auto& row : per_action) {
        if (row.size() != mdp.n_states) throw ConfigError("transition row has the wrong length");
        for (const auto& p : row) mdp.transition.push_back(p.get<double>());
      }
    }
    mdp.expert_reward = RewardTable(mdp.n_states, mdp.n_actions);
    const auto& r = doc.at("expert_reward");
    if (r.size() != mdp.n_states) throw ConfigError("expert_reward has the wrong number of states");
    for (StateId s = 0; s < mdp.n_states; ++s) {
      if (r[s].size() != mdp.n_actions) throw ConfigError("expert_reward row has the wrong length");
      for (ActionId a = 0; a < mdp.n_actions; ++a) mdp.expert_reward(s, a) = r[s][a].get<double>();
    }
    mdp.initial_dist = doc.at("initial_dist").get<std::vector<double>>();
    if (doc.contains("metadata")) {
      const auto& meta = doc["metadata"];
      mdp.generator = meta.value("generator", std::string{});
      mdp.seed = meta.value("seed", std::uint64_t{0});
    }
    mdp.validate();
    return mdp;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed MDP document: ") + e.what(), 0);
  }
}

nlohmann::json policy_to_json(const Policy& policy) {
  nlohmann::json rows = nlohmann::json::array();
  for (StateId s = 0; s < policy.n_states(); ++s) {
    auto row = policy.probs.row(s);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"n_states", policy.n_states()}, {"n_actions", policy.n_actions()}, {"probs", std::move(rows)}};
}

Policy policy_from_json(const nlohmann::json& doc) {
  try {
    const auto ns = doc.at("n_states").get<std::size_t>();
    const auto na = doc.at("n_actions").get<std::size_t>();
    Policy pi{StateActionTable(ns, na)};
    const auto& rows = doc.at("probs");
    if (rows.size() != ns) throw ConfigError("policy has the wrong number of rows");
    for (StateId s = 0; s < ns; ++s) {
      if (rows[s].size() != na) throw ConfigError("policy row has the wrong length");
      for (ActionId a = 0; a < na; ++a) pi.probs(s, a) = rows[s][a].get<double>();
    }
    pi.validate();
    return pi;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed policy document: ") + e.what(), 0);
  }
}

}  // namespace ipl
