#include "ipl/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "ipl/core.hpp"
#include "ipl/errors.hpp"

namespace ipl {

ComparisonDesign build_design(std::span<const PreferencePair> pairs, std::size_t n_states, std::size_t n_actions,
                              const SegmentWeighting& weighting) {
  ComparisonDesign d;
  d.n_states = n_states;
  d.n_actions = n_actions;
  d.discount_in_segment = weighting.discount_in_segment;
  d.x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(n_states * n_actions));
  d.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pairs.size()));
  auto add = [&](Eigen::Index row, const Segment& seg, double sign) {
    for (std::size_t t = 0; t < seg.length(); ++t) {
      if (seg.states[t] >= n_states || seg.actions[t] >= n_actions)
        throw EvaluationError(fmt::format("state-action ({}, {}) out of range", seg.states[t], seg.actions[t]));
      d.x(row, static_cast<Eigen::Index>(seg.states[t] * n_actions + seg.actions[t])) += sign * weighting.weight(t);
    }
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    add(row, pairs[i].first, 1.0);
    add(row, pairs[i].second, -1.0);
    d.y(row) = pairs[i].label;
  }
  return d;
}

OracleObjective oracle_objective(const ComparisonDesign& design, double lambda, std::size_t n_total,
                                 const Eigen::VectorXd& r) {
  const double n = static_cast<double>(n_total);
  const double c = 2.0 * lambda / n;
  OracleObjective out;
  out.value = lambda * r.squaredNorm() / n;
  out.grad = c * r;
  out.hessian = c * Eigen::MatrixXd::Identity(r.size(), r.size());
  const Eigen::Index n_pairs = design.x.rows();
  if (n_pairs == 0) return out;
  const Eigen::VectorXd z = design.x * r;
  Eigen::VectorXd resid(n_pairs);
  Eigen::VectorXd curv(n_pairs);
  double bce = 0.0;
  for (Eigen::Index i = 0; i < n_pairs; ++i) {
    bce += preference_bce(z(i), design.y(i));
    const double p = logistic(z(i));
    resid(i) = p - design.y(i);
    curv(i) = p * (1.0 - p);
  }
  const double inv_n = 1.0 / static_cast<double>(n_pairs);
  out.value += bce * inv_n;
  out.grad += design.x.transpose() * resid * inv_n;
  out.hessian += design.x.transpose() * curv.asDiagonal() * design.x * inv_n;
  return out;
}

OracleReport solve_rstar(const ComparisonDesign& design, double lambda, std::size_t n_total, double tol,
                         std::size_t max_iters) {
  if (!(lambda > 0.0)) throw ConfigError("the reward oracle needs lambda > 0 for strict convexity");
  const std::size_t width = static_cast<std::size_t>(design.x.cols());
  if (n_total != width || width != design.n_states * design.n_actions)
    throw ConfigError(fmt::format("design width {} does not match n_total {}", width, n_total));

  Eigen::VectorXd r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width));
  OracleObjective obj = oracle_objective(design, lambda, n_total, r);
  std::size_t it = 0;
  double residual = obj.grad.cwiseAbs().maxCoeff();
  while (residual > tol) {
    if (it == max_iters)
      throw OracleError(fmt::format("Newton stalled after {} iterations: gradient sup-norm {:.3e}, objective {:.17g}",
                                    it, residual, obj.value));
    ++it;
    const Eigen::LLT<Eigen::MatrixXd> llt(obj.hessian);
    if (llt.info() != Eigen::Success) throw OracleError("Hessian is not positive definite");
    const Eigen::VectorXd step = -llt.solve(obj.grad);
    const double slope = obj.grad.dot(step);
    // Backtracking on the objective. Near the optimum the decrease drops below
    // the rounding of the objective, so changes within that noise are accepted
    // and the gradient decides termination.
    const double noise = 1e-14 * (1.0 + std::abs(obj.value));
    double t = 1.0;
    OracleObjective next = oracle_objective(design, lambda, n_total, r + step);
    while (next.value > obj.value + 1e-4 * t * slope + noise && t > 1e-12) {
      t *= 0.5;
      next = oracle_objective(design, lambda, n_total, r + t * step);
    }
    r += t * step;
    obj = std::move(next);
    residual = obj.grad.cwiseAbs().maxCoeff();
  }

  OracleReport rep;
  rep.rstar = RewardTable(design.n_states, design.n_actions);
  for (std::size_t i = 0; i < width; ++i) rep.rstar.values()[i] = r(static_cast<Eigen::Index>(i));
  rep.residual = residual;
  rep.iterations = it;
  rep.lambda = lambda;
  rep.discount_in_segment = design.discount_in_segment;
  rep.n_pairs = static_cast<std::size_t>(design.x.rows());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(obj.hessian, Eigen::EigenvaluesOnly);
  rep.min_hessian_eigenvalue = eig.eigenvalues().minCoeff();
  return rep;
}

nlohmann::json OracleReport::to_json() const {
  return {{"n_states", rstar.n_states()},
          {"n_actions", rstar.n_actions()},
          {"rstar", rstar.values()},
          {"residual", residual},
          {"min_hessian_eigenvalue", min_hessian_eigenvalue},
          {"iterations", iterations},
          {"lambda", lambda},
          {"discount_in_segment", discount_in_segment},
          {"n_pairs", n_pairs}};
}

OracleReport OracleReport::from_json(const nlohmann::json& doc) {
  try {
    OracleReport rep;
    rep.rstar = RewardTable(doc.at("n_states").get<std::size_t>(), doc.at("n_actions").get<std::size_t>());
    const auto values = doc.at("rstar").get<std::vector<double>>();
    if (values.size() != rep.rstar.size()) throw ParseError("oracle reward has the wrong length", 0);
    rep.rstar.values() = values;
    rep.residual = doc.at("residual").get<double>();
    rep.min_hessian_eigenvalue = doc.at("min_hessian_eigenvalue").get<double>();
    rep.iterations = doc.at("iterations").get<std::size_t>();
    rep.lambda = doc.at("lambda").get<double>();
    rep.discount_in_segment = doc.at("discount_in_segment").get<bool>();
    rep.n_pairs = doc.at("n_pairs").get<std::size_t>();
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed oracle report: ") + e.what(), 0);
  }
}

double verify_bijection(const TabularMdp& mdp, const Policy& policy, const RewardTable& reward) {
  const QTable q = exact_q_evaluation(mdp, policy, reward);
  const RewardTable back = implicit_reward_table(q, expected_value(q, policy), mdp);
  double err = 0.0;
  for (std::size_t i = 0; i < reward.size(); ++i) err = std::max(err, std::abs(back.values()[i] - reward.values()[i]));
  return err;
}

OraclePolicy oracle_policy(const TabularMdp& mdp, const RewardTable& rstar, double alpha, const Policy& mu) {
  const SoftSolution sol = soft_value_iteration(mdp, rstar, alpha, mu);
  return {sol.q, sol.v, sol.policy, alpha, "soft value iteration", sol.iterations};
}

double weighted_expectile(std::span<const double> values, std::span<const double> weights, double tau) {
  if (values.size() != weights.size()) throw ConfigError("expectile weights must match values");
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw ConfigError("expectile needs positive total weight");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  // The stationarity condition sum_a w_a |tau - 1(q_a < v)| (q_a - v) = 0 is
  // linear in v between consecutive sorted values: try each split.
  for (std::size_t split = 0; split <= order.size(); ++split) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const std::size_t i = order[rank];
      const double c = weights[i] * (rank < split ? 1.0 - tau : tau);
      num += c * values[i];
      den += c;
    }
    if (!(den > 0.0)) continue;
    const double v = num / den;
    const double lo = split == 0 ? -std::numeric_limits<double>::infinity() : values[order[split - 1]];
    const double hi = split == order.size() ? std::numeric_limits<double>::infinity() : values[order[split]];
    if (v >= lo && v <= hi) return v;
  }
  throw NumericalError("expectile root not bracketed");
}

namespace {

Policy normalized_counts(const StateActionTable& counts) {
  Policy mu{StateActionTable(counts.n_states(), counts.n_actions())};
  for (StateId s = 0; s < counts.n_states(); ++s) {
    double total = 0.0;
    for (double c : counts.row(s)) total += c;
    for (ActionId a = 0; a < counts.n_actions(); ++a)
      mu.probs(s, a) = total > 0.0 ? counts(s, a) / total : 1.0 / static_cast<double>(counts.n_actions());
  }
  return mu;
}

}  // namespace

OraclePolicy oracle_fixed_point(const TabularMdp& mdp, const RewardTable& rstar, const IplConfig& config,
                                const StateActionTable& counts, double tol, std::size_t max_iters) {
  if (counts.n_states() != mdp.n_states || counts.n_actions() != mdp.n_actions)
    throw ConfigError("behavior counts do not match the MDP");
  if (config.variant == Variant::xql) {
    OraclePolicy out = oracle_policy(mdp, rstar, config.alpha, normalized_counts(counts));
    out.rule = "soft value iteration under the behavior distribution";
    return out;
  }
  const std::size_t ns = mdp.n_states;
  const std::size_t na = mdp.n_actions;
  const Policy mu = normalized_counts(counts);
  const double beta = config.extraction_inv_temperature();
  QTable q(ns, na);
  VTable v(ns, 0.0);
  Policy pi = extract_policy_awr(q, v, beta, counts, config.weight_max);
  auto value_of = [&](StateId s) {
    if (config.variant == Variant::iql) return weighted_expectile(q.row(s), mu.probs.row(s), config.tau);
    double e = 0.0;
    for (ActionId a = 0; a < na; ++a) e += pi(s, a) * q(s, a);
    return e;
  };
  std::size_t it = 0;
  double change = std::numeric_limits<double>::infinity();
  while (change > tol) {
    if (it == max_iters)
      throw ConvergenceError(fmt::format("{} fixed point did not converge (change {:.3e})", to_string(config.variant),
                                         change),
                             change);
    ++it;
    change = 0.0;
    QTable next(ns, na);
    for (StateId s = 0; s < ns; ++s)
      for (ActionId a = 0; a < na; ++a) {
        const auto row = mdp.next_dist(s, a);
        double ev = 0.0;
        for (StateId sp = 0; sp < ns; ++sp) ev += row[sp] * v[sp];
        next(s, a) = rstar(s, a) + mdp.discount * ev;
        change = std::max(change, std::abs(next(s, a) - q(s, a)));
      }
    q = std::move(next);
    for (StateId s = 0; s < ns; ++s) v[s] = value_of(s);
    if (config.variant == Variant::awac) {
      const Policy updated = extract_policy_awr(q, v, beta, counts, config.weight_max);
      for (std::size_t i = 0; i < pi.probs.size(); ++i)
        change = std::max(change, std::abs(updated.probs.values()[i] - pi.probs.values()[i]));
      pi = updated;
      for (StateId s = 0; s < ns; ++s) v[s] = value_of(s);
    }
  }
  pi = extract_policy_awr(q, v, beta, counts, config.weight_max);
  const std::string rule = config.variant == Variant::iql ? "expectile fixed point with AWR extraction"
                                                          : "policy-value fixed point with AWR extraction";
  return {q, v, pi, config.alpha, rule, it};
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ConfigError("distributions differ in length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

nlohmann::json GapReport::to_json() const {
  return {{"reward_gap", reward_gap},   {"max_kl", max_kl},         {"kl_per_state", kl_per_state},
          {"return_gap", return_gap},   {"trained_return", trained_return}, {"oracle_return", oracle_return}};
}

GapReport compare_to_oracle(const TrainArtifacts& artifacts, const OracleReport& report, const OraclePolicy& oracle,
                            const TabularMdp& mdp, const StateActionTable* support) {
  const IplConfig& cfg = artifacts.config;
  if (cfg.lambda != report.lambda)
    throw ConfigError(fmt::format("run lambda {} differs from oracle lambda {}", cfg.lambda, report.lambda));
  if (cfg.discount_in_segment != report.discount_in_segment)
    throw ConfigError("run and oracle disagree on in-segment discounting");
  if (cfg.alpha != oracle.alpha)
    throw ConfigError(fmt::format("run alpha {} differs from oracle alpha {}", cfg.alpha, oracle.alpha));
  if (artifacts.q.n_states() != mdp.n_states || report.rstar.n_states() != mdp.n_states)
    throw ConfigError("artifact and oracle shapes do not match the MDP");

  GapReport out;
  const RewardTable r_q = implicit_reward_table(artifacts.q, artifacts.v, mdp);
  const bool masked = support && !cfg.regularize_full_space;
  for (std::size_t i = 0; i < r_q.size(); ++i) {
    if (masked && !(support->values()[i] > 0.0)) continue;
    out.reward_gap = std::max(out.reward_gap, std::abs(r_q.values()[i] - report.rstar.values()[i]));
  }
  for (StateId s = 0; s < mdp.n_states; ++s) {
    const double kl = kl_divergence(artifacts.policy.probs.row(s), oracle.policy.probs.row(s));
    out.kl_per_state.push_back(kl);
    out.max_kl = std::max(out.max_kl, kl);
  }
  out.trained_return = evaluate_policy_return(mdp, artifacts.policy, mdp.expert_reward);
  out.oracle_return = evaluate_policy_return(mdp, oracle.policy, mdp.expert_reward);
  out.return_gap = std::abs(out.trained_return - out.oracle_return);
  return out;
}

}  // namespace ipl
