#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "ipl/data.hpp"
#include "ipl/mdp.hpp"
#include "ipl/trainer.hpp"

namespace ipl {

/// Preferences as logistic regression over the flattened reward vector
/// r[s * n_actions + a]: row i holds +w_t on first-segment visits and -w_t on
/// second-segment visits, so logit_i = X_i . r.
struct ComparisonDesign {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  bool discount_in_segment = false;
};

ComparisonDesign build_design(std::span<const PreferencePair> pairs, std::size_t n_states, std::size_t n_actions,
                              const SegmentWeighting& weighting = {});

struct OracleReport {
  RewardTable rstar;
  /// Sup-norm of the objective gradient at rstar.
  double residual = 0.0;
  double min_hessian_eigenvalue = 0.0;
  std::size_t iterations = 0;
  double lambda = 0.0;
  bool discount_in_segment = false;
  std::size_t n_pairs = 0;

  nlohmann::json to_json() const;
  static OracleReport from_json(const nlohmann::json& doc);
};

/// Newton's method with the exact Hessian on
///   mean_i BCE(X_i r, y_i) + lambda * |r|^2 / n_total
/// (gradient X^T (sigma(X r) - y) / N + (2 lambda / n_total) r) until the
/// gradient sup-norm is at most `tol`. Throws ConfigError for lambda <= 0 or
/// a width other than n_total, OracleError when Newton stalls.
OracleReport solve_rstar(const ComparisonDesign& design, double lambda, std::size_t n_total, double tol = 1e-10,
                         std::size_t max_iters = 200);

/// Objective value, gradient and Hessian of the problem solve_rstar minimizes.
struct OracleObjective {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hessian;
};
OracleObjective oracle_objective(const ComparisonDesign& design, double lambda, std::size_t n_total,
                                 const Eigen::VectorXd& r);

/// Q = (I - gamma P^pi)^{-1} r, then r' = Q - gamma P E_pi[Q]; returns sup |r - r'|.
double verify_bijection(const TabularMdp& mdp, const Policy& policy, const RewardTable& reward);

/// Q, V and policy an oracle attaches to r*, plus the rule that produced them.
struct OraclePolicy {
  QTable q;
  VTable v;
  Policy policy;
  double alpha = 0.0;
  std::string rule;
  std::size_t iterations = 0;
};

/// Soft value iteration with reward r*, temperature alpha, reference mu.
OraclePolicy oracle_policy(const TabularMdp& mdp, const RewardTable& rstar, double alpha, const Policy& mu);

/// Fixed point of the variant's own tabular RL step under reward r*, with the
/// behavior distribution given by `counts`:
///   xql  - soft value iteration with mu = normalized counts
///   iql  - V = tau-expectile of Q under the counts, policy by AWR(beta)
///   awac - V = E_pi Q, policy by AWR(beta), iterated jointly
OraclePolicy oracle_fixed_point(const TabularMdp& mdp, const RewardTable& rstar, const IplConfig& config,
                                const StateActionTable& counts, double tol = 1e-12,
                                std::size_t max_iters = 200000);

/// tau-expectile of `values` under non-negative `weights`.
double weighted_expectile(std::span<const double> values, std::span<const double> weights, double tau);

/// KL(p || q) for one state's action distribution.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct GapReport {
  /// sup |T*Q - r*| over the regularized support.
  double reward_gap = 0.0;
  std::vector<double> kl_per_state;
  double max_kl = 0.0;
  double return_gap = 0.0;
  double trained_return = 0.0;
  double oracle_return = 0.0;

  nlohmann::json to_json() const;
};

/// Compares trained artifacts with an oracle. `support`, if given, restricts
/// the reward gap to cells with a positive entry (ignored under full-space
/// regularization). Refuses (ConfigError) when lambda, alpha or the discount
/// flag differ between the run and the oracle.
GapReport compare_to_oracle(const TrainArtifacts& artifacts, const OracleReport& report, const OraclePolicy& oracle,
                            const TabularMdp& mdp, const StateActionTable* support = nullptr);

}  // namespace ipl
