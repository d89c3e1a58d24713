// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "ipl/baselines.hpp"
#include "ipl/core.hpp"
#include "ipl/errors.hpp"
#include "ipl/harness.hpp"
#include "ipl/mdp.hpp"
#include "ipl/metrics.hpp"
#include "ipl/oracle.hpp"
#include "ipl/trainer.hpp"

using namespace ipl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  std::function<Outcome()> run;
};

// ---------------------------------------------------------------------------
// Shared tabular instance for criteria 1 and 4.

struct TabularInstance {
  TabularMdp mdp;
  Dataset prefs;
  TransitionDataset offline;
};

TabularInstance tabular_instance(std::uint64_t seed) {
  TabularInstance inst;
  inst.mdp = make_random_mdp(5, 3, 0.9, 5, 1.0, seed);
  Rng rng(seed);
  inst.prefs.pairs = exhaustive_pairs(inst.mdp, LabelMode::argmax, {}, rng);
  for (const auto& p : inst.prefs.pairs) {
    inst.offline.transitions.push_back({p.first.states[0], p.first.actions[0], p.first.states[1]});
    inst.offline.transitions.push_back({p.second.states[0], p.second.actions[0], p.second.states[1]});
  }
  return inst;
}

IplConfig exact_config(double lambda) {
  IplConfig c;
  c.variant = Variant::iql;
  c.lambda = lambda;
  c.gamma = 0.9;
  c.k = 1;
  c.s = 1;
  c.pref_batch_size = 0;
  c.offline_batch_size = 0;
  c.regularize_full_space = true;
  c.exact_expectation = true;
  c.q_optimizer = {OptimizerKind::sgd, 10.0};
  c.v_optimizer = {OptimizerKind::sgd, 2.0};
  c.total_steps = 3000;
  c.eval_interval = 500;
  return c;
}

double sup_abs(const RewardTable& r) {
  double m = 0.0;
  for (double x : r.values()) m = std::max(m, std::abs(x));
  return m;
}

Outcome criterion_convergence() {
  int ok = 0;
  std::string detail;
  double worst_time = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto inst = tabular_instance(7 + i);
    const IplConfig cfg = exact_config(0.5);
    const auto t0 = std::chrono::steady_clock::now();
    const ComparisonDesign design = build_design(inst.prefs.pairs, 5, 3);
    const OracleReport rep = solve_rstar(design, cfg.lambda, 15);
    const auto counts = behavior_counts(inst.prefs, inst.offline.transitions, 5, 3);
    const OraclePolicy pol = oracle_fixed_point(inst.mdp, rep.rstar, cfg, counts);
    const TrainArtifacts art = train_ipl(cfg, inst.prefs, inst.offline, inst.mdp);
    const GapReport gap = compare_to_oracle(art, rep, pol, inst.mdp);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    worst_time = std::max(worst_time, secs);
    const bool pass = gap.reward_gap <= 1e-3 && gap.max_kl <= 1e-3 && secs <= 120.0;
    ok += pass;
    detail += fmt::format(" [{}: gap={:.1e} kl={:.1e}]", i, gap.reward_gap, gap.max_kl);
  }
  return {ok >= 9, fmt::format("{}/10 instances within 1e-3, slowest {:.1f}s;", ok, worst_time) + detail};
}

Outcome criterion_lambda_zero() {
  int ok = 0;
  std::string detail;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto inst = tabular_instance(7 + i);
    const TrainArtifacts reg = train_ipl(exact_config(0.5), inst.prefs, inst.offline, inst.mdp);
    const double base = sup_abs(implicit_reward_table(reg.q, reg.v, inst.mdp));
    bool pass = false;
    try {
      const TrainArtifacts zero = train_ipl(exact_config(0.0), inst.prefs, inst.offline, inst.mdp);
      const double blown = sup_abs(implicit_reward_table(zero.q, zero.v, inst.mdp));
      pass = blown >= 10.0 * base;
      detail += fmt::format(" [{}: {:.3g} vs {:.3g}]", i, blown, base);
    } catch (const TrainingError&) {
      pass = true;
      detail += fmt::format(" [{}: diverged]", i);
    }
    ok += pass;
  }
  return {ok >= 9, fmt::format("{}/10 instances collapse without regularization;", ok) + detail};
}

// ---------------------------------------------------------------------------

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) total += (x = rng.exponential());
  for (double& x : w) x /= total;
  return w;
}

Policy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng) {
  Policy pi{StateActionTable(n_states, n_actions)};
  for (StateId s = 0; s < n_states; ++s) {
    const auto w = random_simplex(n_actions, rng);
    for (ActionId a = 0; a < n_actions; ++a) pi.probs(s, a) = w[a];
  }
  return pi;
}

RewardTable random_reward(std::size_t n_states, std::size_t n_actions, Rng& rng, double scale = 1.0) {
  RewardTable r(n_states, n_actions);
  for (double& x : r.values()) x = rng.uniform(-scale, scale);
  return r;
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

Outcome criterion_bijection() {
  Rng rng(2024);
  double worst = 0.0;
  double worst_q = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t ns = 2 + rng.below(7), na = 2 + rng.below(3);
    const double gamma = rng.uniform(0.5, 0.99);
    const TabularMdp mdp = make_random_mdp(ns, na, gamma, 1 + rng.below(ns), 1.0, rng.next_u64());
    const Policy pi = random_policy(ns, na, rng);
    const RewardTable r = random_reward(ns, na, rng, 3.0);
    worst = std::max(worst, verify_bijection(mdp, pi, r));

    // Independent round trip through the state-action linear system.
    const std::size_t n = ns * na;
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd rv(n);
    for (StateId s = 0; s < ns; ++s)
      for (ActionId a = 0; a < na; ++a) {
        rv(s * na + a) = r(s, a);
        for (StateId s2 = 0; s2 < ns; ++s2)
          for (ActionId a2 = 0; a2 < na; ++a2) m(s * na + a, s2 * na + a2) -= gamma * mdp.p(s, a, s2) * pi(s2, a2);
      }
    const Eigen::VectorXd q = m.partialPivLu().solve(rv);
    const QTable lib_q = exact_q_evaluation(mdp, pi, r);
    for (std::size_t i = 0; i < n; ++i) worst_q = std::max(worst_q, std::abs(q(i) - lib_q.values()[i]));
    for (StateId s = 0; s < ns; ++s)
      for (ActionId a = 0; a < na; ++a) {
        double back = q(s * na + a);
        for (StateId s2 = 0; s2 < ns; ++s2) {
          double v = 0.0;
          for (ActionId a2 = 0; a2 < na; ++a2) v += pi(s2, a2) * q(s2 * na + a2);
          back -= gamma * mdp.p(s, a, s2) * v;
        }
        worst = std::max(worst, std::abs(back - r(s, a)));
      }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-10 && worst_q <= 1e-10 && secs <= 10.0,
          fmt::format("50 triples, sup round-trip error {:.2e}, Q vs independent solve {:.2e}, {:.2f}s", worst, worst_q,
                      secs)};
}

// Random segment-pair dataset with stochastic labels.
std::vector<PreferencePair> random_pairs(const TabularMdp& mdp, std::size_t n_pairs, std::size_t k, Rng& rng) {
  std::vector<Trajectory> trajs;
  const Policy uniform = Policy::uniform(mdp.n_states, mdp.n_actions);
  for (int i = 0; i < 20; ++i) trajs.push_back(rollout(mdp, uniform, 10, rng));
  const auto segs = sample_segments(trajs, k, 2 * n_pairs, rng);
  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i < n_pairs; ++i)
    pairs.push_back(label_pair(segs[2 * i], segs[2 * i + 1], mdp.expert_reward, LabelMode::bernoulli, {}, rng));
  return pairs;
}

Outcome criterion_oracle() {
  Rng rng(31);
  double worst_grad = 0.0, worst_eig_slack = 1e300, worst_perm = 0.0, worst_lib_grad = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    const TabularMdp mdp = make_random_mdp(4, 3, 0.9, 3, 1.0, rng.next_u64());
    const double lambda = std::vector<double>{0.05, 0.5, 2.0}[trial % 3];
    auto pairs = random_pairs(mdp, 40 + 10 * trial, 1 + trial % 3, rng);
    const std::size_t n = mdp.n_state_actions();
    const OracleReport rep = solve_rstar(build_design(pairs, 4, 3), lambda, n);
    worst_lib_grad = std::max(worst_lib_grad, rep.residual);

    // Gradient and Hessian summed directly over the pairs.
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    const double big_n = static_cast<double>(pairs.size());
    for (const auto& p : pairs) {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
      for (std::size_t t = 0; t < p.first.length(); ++t) x(p.first.states[t] * 3 + p.first.actions[t]) += 1.0;
      for (std::size_t t = 0; t < p.second.length(); ++t) x(p.second.states[t] * 3 + p.second.actions[t]) -= 1.0;
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += x(i) * rep.rstar.values()[i];
      const double sig = 1.0 / (1.0 + std::exp(-z));
      g += (sig - p.label) / big_n * x;
      h += sig * (1.0 - sig) / big_n * x * x.transpose();
    }
    for (std::size_t i = 0; i < n; ++i) g(i) += 2.0 * lambda / static_cast<double>(n) * rep.rstar.values()[i];
    h += 2.0 * lambda / static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
    worst_grad = std::max(worst_grad, g.cwiseAbs().maxCoeff());
    const double eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().minCoeff();
    const double bound = 2.0 * lambda / static_cast<double>(n) - 1e-12;
    worst_eig_slack = std::min({worst_eig_slack, eig - bound, rep.min_hessian_eigenvalue - bound});

    // Reordering the pairs and swapping sides with flipped labels.
    shuffle(pairs, rng);
    for (auto& p : pairs)
      if (rng.bernoulli(0.5)) p = p.swapped();
    const OracleReport rep2 = solve_rstar(build_design(pairs, 4, 3), lambda, n);
    for (std::size_t i = 0; i < n; ++i)
      worst_perm = std::max(worst_perm, std::abs(rep.rstar.values()[i] - rep2.rstar.values()[i]));
  }
  const bool pass = worst_grad <= 1e-10 && worst_lib_grad <= 1e-10 && worst_eig_slack >= 0.0 && worst_perm <= 1e-10;
  return {pass, fmt::format("12 designs: independent gradient {:.2e}, reported residual {:.2e}, eigenvalue slack "
                            "{:.2e}, order/swap change {:.2e}",
                            worst_grad, worst_lib_grad, worst_eig_slack, worst_perm)};
}

Outcome criterion_dpo() {
  double worst_loss = 0.0, worst_grad = 0.0, worst_tv = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng rng(500 + i);
    const BanditProblem bandit = make_random_bandit(4, 3, LabelMode::soft, rng);
    const double alpha = rng.uniform(0.2, 2.0);
    for (int probe = 0; probe < 5; ++probe) {
      StateActionTable logits(4, 3);
      for (double& x : logits.values()) x = rng.uniform(-2.0, 2.0);
      const DpoResult d = dpo_loss(logits, bandit.mu, bandit.pairs, alpha);
      const DpoResult p = ipl_policy_param_loss(logits, bandit.mu, bandit.pairs, alpha);
      worst_loss = std::max(worst_loss, std::abs(d.loss - p.loss));
      double diff = 0.0, scale = 0.0;
      for (std::size_t j = 0; j < d.grad.size(); ++j) {
        diff = std::max(diff, std::abs(d.grad[j] - p.grad[j]));
        scale = std::max(scale, std::abs(d.grad[j]));
      }
      worst_grad = std::max(worst_grad, diff / scale);
    }
    DpoConfig cfg;
    cfg.alpha = alpha;
    const Policy a = train_dpo(bandit, cfg);
    const Policy b = train_ipl_bandit(bandit, cfg);
    worst_tv = std::max(worst_tv, max_total_variation(a, b));
  }
  return {worst_loss <= 1e-12 && worst_grad <= 1e-10 && worst_tv <= 1e-6,
          fmt::format("20 bandits: loss gap {:.2e}, relative gradient gap {:.2e}, policy TV {:.2e}", worst_loss,
                      worst_grad, worst_tv)};
}

// ---------------------------------------------------------------------------
// Finite-difference probes.

struct ProbeStats {
  int probes = 0;
  int failures = 0;
  double worst = 0.0;
};

template <class F>
void probe_direction(std::vector<double>& theta, const std::vector<double>& grad, F&& f, Rng& rng, ProbeStats& st) {
  constexpr double h = 1e-5;
  std::vector<double> d(theta.size());
  double analytic = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] = rng.uniform(-1.0, 1.0);
    analytic += grad[i] * d[i];
  }
  const std::vector<double> saved = theta;
  for (std::size_t i = 0; i < d.size(); ++i) theta[i] = saved[i] + h * d[i];
  const double up = f();
  for (std::size_t i = 0; i < d.size(); ++i) theta[i] = saved[i] - h * d[i];
  const double down = f();
  theta = saved;
  const double fd = (up - down) / (2.0 * h);
  const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
  ++st.probes;
  st.failures += rel > 1e-5;
  st.worst = std::max(st.worst, rel);
}

std::vector<Transition> random_transitions(std::size_t n, std::size_t ns, std::size_t na, Rng& rng) {
  std::vector<Transition> out(n);
  for (auto& t : out) t = {rng.below(ns), rng.below(na), rng.below(ns)};
  return out;
}

Segment random_segment(std::size_t k, std::size_t ns, std::size_t na, Rng& rng) {
  Segment seg;
  for (std::size_t t = 0; t <= k; ++t) seg.states.push_back(rng.below(ns));
  for (std::size_t t = 0; t < k; ++t) seg.actions.push_back(rng.below(na));
  return seg;
}

std::vector<ValueRow> random_rows(std::size_t n, std::size_t ns, double lo, double hi, Rng& rng) {
  std::vector<ValueRow> rows(n);
  for (auto& r : rows) r = {rng.below(ns), rng.uniform(lo, hi)};
  return rows;
}

Outcome criterion_gradients() {
  Rng rng(66);
  std::map<std::string, ProbeStats> stats;

  for (int i = 0; i < 100; ++i) {
    std::vector<std::size_t> layers{2 + rng.below(5)};
    for (std::size_t l = 0, depth = 1 + rng.below(3); l < depth; ++l) layers.push_back(2 + rng.below(7));
    layers.push_back(1 + rng.below(3));
    MlpFn net(layers, Role::q);
    net.init_uniform(rng);
    std::vector<double> x(layers.front()), u(layers.back());
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    for (double& v : u) v = rng.uniform(-1.0, 1.0);
    std::vector<double> grad(net.params().size(), 0.0);
    net.backward(x, u, grad);
    auto f = [&] {
      const auto y = net.forward(x);
      double acc = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) acc += u[j] * y[j];
      return acc;
    };
    probe_direction(net.params().values, grad, f, rng, stats["mlp forward"]);
  }

  for (int i = 0; i < 100; ++i) {
    const TabularMdp mdp = make_random_mdp(4, 3, 0.9, 3, 1.0, rng.next_u64());
    Approximator q = (i % 4 == 0) ? Approximator::tabular(InputKind::state_action, 4, 3, 1, Role::q)
                                  : Approximator::mlp(InputKind::state_action, 4, 3, 1, Role::q, {{8}, std::nullopt}, rng);
    if (q.is_tabular())
      for (double& v : q.params().values) v = rng.uniform(-1.0, 1.0);
    std::vector<double> vt(4);
    for (double& v : vt) v = rng.uniform(-1.0, 1.0);
    const std::size_t k = 1 + rng.below(3);
    std::vector<PreferencePair> pairs;
    for (int j = 0; j < 6; ++j)
      pairs.push_back({random_segment(k, 4, 3, rng), random_segment(k, 4, 3, rng),
                       std::vector<double>{0.0, 1.0, 0.5, 0.3}[rng.below(4)]});
    const auto offline = random_transitions(8, 4, 3, rng);
    IplLossOptions opts{0.5, 0.9, {i % 3 == 0, 0.9}, i % 5 == 0, (i % 2 == 0 || i % 5 == 0) ? &mdp : nullptr};
    const auto res = ipl_loss(q, vt, opts, pairs, offline);
    probe_direction(q.params().values, res.grad, [&] { return ipl_loss(q, vt, opts, pairs, offline).loss; }, rng,
                    stats["ipl_loss"]);
  }

  for (int i = 0; i < 100; ++i) {
    Rng brng(rng.next_u64());
    const BanditProblem bandit = make_random_bandit(3, 3, LabelMode::soft, brng);
    StateActionTable logits(3, 3);
    for (double& v : logits.values()) v = rng.uniform(-2.0, 2.0);
    const double alpha = rng.uniform(0.3, 2.0);
    const auto res = dpo_loss(logits, bandit.mu, bandit.pairs, alpha);
    probe_direction(logits.values(), res.grad, [&] { return dpo_loss(logits, bandit.mu, bandit.pairs, alpha).loss; },
                    rng, stats["dpo_loss"]);
  }

  for (int i = 0; i < 100; ++i) {
    Approximator v = Approximator::mlp(InputKind::state, 5, 1, 1, Role::v, {{8}, std::nullopt}, rng);
    const auto rows = random_rows(12, 5, -2.0, 2.0, rng);
    const double tau = rng.uniform(0.1, 0.9);
    const auto res = expectile_value_loss(v, rows, tau);
    probe_direction(v.params().values, res.grad, [&] { return expectile_value_loss(v, rows, tau).loss; }, rng,
                    stats["expectile"]);
  }

  for (int i = 0; i < 100; ++i) {
    Approximator v = Approximator::mlp(InputKind::state, 5, 1, 1, Role::v, {{8}, std::nullopt}, rng);
    const double alpha = rng.uniform(0.5, 2.0);
    auto rows = random_rows(12, 5, -3.0 * alpha, 3.0 * alpha, rng);
    // One row deep in the linear continuation.
    if (i % 2 == 0) rows[0].target = 15.0 * alpha;
    const auto res = linex_value_loss(v, rows, alpha, 10.0);
    probe_direction(v.params().values, res.grad, [&] { return linex_value_loss(v, rows, alpha, 10.0).loss; }, rng,
                    stats["linex"]);
  }

  bool pass = true;
  std::string detail;
  for (const auto& [name, st] : stats) {
    pass = pass && st.failures == 0 && st.probes == 100;
    detail += fmt::format(" [{}: {}/{} ok, worst {:.1e}]", name, st.probes - st.failures, st.probes, st.worst);
  }
  return {pass, "relative error <= 1e-5 at h = 1e-5;" + detail};
}

// ---------------------------------------------------------------------------
// Pipeline runs.

std::filesystem::path scratch_root() {
  static const std::filesystem::path root = [] {
    auto p = std::filesystem::temp_directory_path() / "ipl-acceptance";
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
  }();
  return root;
}

nlohmann::json gridworld_doc() {
  std::ifstream in(std::string(IPL_CONFIG_DIR) + "/gridworld_ipl.json");
  return nlohmann::json::parse(in);
}

RunSummary run_doc(nlohmann::json doc, const std::string& dir) {
  doc["out_dir"] = (scratch_root() / dir).string();
  return run_experiment(experiment_from_json(doc));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion_variants() {
  int ok = 0;
  double slowest = 0.0;
  std::string detail;
  for (const std::string method : {"ipl-xql", "ipl-iql", "ipl-awac"}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto doc = gridworld_doc();
      doc["method"] = method;
      doc["seed"] = seed;
      // Extraction temperature shared by all variants: 1 / alpha = beta.
      if (method == "ipl-xql") doc["algorithm"]["alpha"] = 1.0 / doc["algorithm"]["beta"].get<double>();
      const auto t0 = std::chrono::steady_clock::now();
      const RunSummary s = run_doc(doc, fmt::format("variants/{}-{}", method, seed));
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      slowest = std::max(slowest, secs);
      const double ratio = s.best_return.value_or(0.0) / s.reference_return.value_or(1.0);
      ok += ratio >= 0.95 && secs <= 300.0;
      detail += fmt::format(" [{} seed {}: {:.3f}/{:.3f} = {:.1f}%]", method, seed, s.best_return.value_or(0.0),
                            s.reference_return.value_or(0.0), 100.0 * ratio);
    }
  }
  return {ok == 9, fmt::format("{}/9 runs at >= 95% of the soft-optimal return, slowest {:.1f}s;", ok, slowest) + detail};
}

Outcome criterion_mr_vs_ipl() {
  const std::vector<std::size_t> scales{100, 500, 2000};
  std::vector<std::filesystem::path> dirs;
  for (std::size_t scale : scales)
    for (const std::string method : {"ipl-iql", "mr-iql"})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto doc = gridworld_doc();
        doc["method"] = method;
        doc["seed"] = seed;
        doc["data"]["n_pairs"] = scale;
        dirs.push_back(run_doc(doc, fmt::format("scales/{}-{}-{}", scale, method, seed)).dir);
      }
  const SummaryTable table = compare_runs(dirs);
  std::ofstream(scratch_root() / "scales" / "summary.csv") << table.to_csv();
  bool within = true;
  int lower_std = 0;
  std::string detail;
  for (std::size_t scale : scales) {
    const SummaryCell* ipl = table.find("gridworld-5x5", "ipl-iql", scale);
    const SummaryCell* mr = table.find("gridworld-5x5", "mr-iql", scale);
    if (!ipl || !mr || !ipl->mean_score || !mr->mean_score) return {false, "missing summary cells"};
    within = within && std::abs(*ipl->mean_score - *mr->mean_score) <= 5.0;
    lower_std += *ipl->std_score <= *mr->std_score;
    detail += fmt::format(" [{} pairs: IPL {:.1f}+-{:.1f}, MR {:.1f}+-{:.1f}]", scale, *ipl->mean_score,
                          *ipl->std_score, *mr->mean_score, *mr->std_score);
  }
  return {within && lower_std >= 2 && table.missing.empty(),
          fmt::format("normalized best-checkpoint score, 5 seeds; within 5 points: {}, IPL std <= MR std at {}/3;",
                      within ? "yes" : "no", lower_std) +
              detail};
}

Outcome criterion_params() {
  std::string detail;
  bool pass = true;
  const std::size_t ns = 25, na = 4;
  auto doc = gridworld_doc();
  doc["data"]["n_pairs"] = 50;
  const ExperimentConfig base = experiment_from_json(doc);
  const TabularMdp mdp = build_env(base);
  const GeneratedData data = generate_data(base, mdp);
  for (const Representation rep : {Representation::tabular, Representation::mlp}) {
    IplConfig cfg = base.algorithm;
    cfg.representation = rep;
    cfg.hidden = {64, 64};
    cfg.total_steps = 2;
    cfg.eval_interval = 1;
    cfg.reward_steps = 2;
    IplConfig iql = cfg, awac = cfg;
    iql.variant = Variant::iql;
    awac.variant = Variant::awac;
    const std::size_t n_iql = ipl_param_count(iql, ns, na);
    const std::size_t n_awac = ipl_param_count(awac, ns, na);
    const std::size_t n_mr = mr_param_count(iql, ns, na);
    const std::size_t n_reward = reward_param_count(iql, ns, na);

    auto actual = [](const TrainArtifacts& a) {
      return a.q_fn.param_count() + (a.v_fn ? a.v_fn->param_count() : 0) +
             (a.policy_fn ? a.policy_fn->param_count() : 0);
    };
    const TrainArtifacts a_iql = train_ipl(iql, data.prefs, data.offline, mdp);
    const TrainArtifacts a_awac = train_ipl(awac, data.prefs, data.offline, mdp);
    const TrainArtifacts a_mr = train_mr_iql(iql, data.prefs, data.offline, mdp);
    const RewardModel rm = train_reward_mr(data.prefs, data.offline.transitions, iql, mdp);

    const bool ok = n_iql == n_mr - n_reward && n_awac < n_iql && a_iql.param_count == n_iql &&
                    actual(a_iql) == n_iql && a_awac.param_count == n_awac && actual(a_awac) == n_awac &&
                    a_mr.param_count == n_mr && actual(a_mr) + rm.fn.param_count() == n_mr &&
                    rm.fn.param_count() == n_reward;
    pass = pass && ok;
    detail += fmt::format(" [{}: IPL-IQL {} = MR-IQL {} - reward {}, IPL-AWAC {}]", to_string(rep), n_iql, n_mr,
                          n_reward, n_awac);
  }
  return {pass, "formula and trained networks agree;" + detail};
}

Outcome criterion_plackett_luce() {
  int ok = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(900 + seed);
    const BanditProblem bandit = make_random_bandit(4, 3, LabelMode::argmax, rng);
    const TabularMdp mdp = bandit.as_mdp();
    Dataset prefs;
    prefs.rankings = bandit_rankings(bandit);
    TransitionDataset offline;
    for (const auto& q : prefs.rankings)
      for (const auto& seg : q.segments) offline.transitions.push_back({seg.states[0], seg.actions[0], seg.states[1]});
    IplConfig cfg = exact_config(0.5);
    cfg.gamma = 0.0;
    cfg.ranking_loss = true;
    cfg.regularize_full_space = false;
    // Few queries make the per-cell curvature large; a unit step stays stable.
    cfg.q_optimizer.lr = 1.0;
    const TrainArtifacts art = train_ipl(cfg, prefs, offline, mdp);
    const RewardTable r = implicit_reward_table(art.q, art.v, mdp);
    bool ordered = true;
    for (StateId c = 0; c < bandit.n_contexts; ++c)
      for (ActionId a = 0; a < 3; ++a)
        for (ActionId b = 0; b < 3; ++b)
          if (bandit.reward(c, a) > bandit.reward(c, b) && !(r(c, a) > r(c, b))) ordered = false;
    ok += ordered;
  }
  detail += fmt::format(" ordering recovered on {}/5 seeds;", ok);

  // Two-segment rankings against the pairwise loss.
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const BanditProblem bandit = make_random_bandit(3, 3, LabelMode::argmax, rng);
    const TabularMdp mdp = bandit.as_mdp();
    Approximator q = Approximator::tabular(InputKind::state_action, 3, 3, 1, Role::q);
    for (double& v : q.params().values) v = rng.uniform(-3.0, 3.0);
    const std::vector<double> vt(3, 0.0);
    std::vector<PreferencePair> pairs;
    std::vector<RankingQuery> rankings;
    for (const auto& p : bandit.pairs) {
      if (p.label == 0.5) continue;
      pairs.push_back(p);
      rankings.push_back({{p.first, p.second}, p.label == 1.0 ? std::vector<std::size_t>{0, 1}
                                                               : std::vector<std::size_t>{1, 0}});
    }
    std::vector<Transition> offline;
    const IplLossOptions opts{0.5, 0.0, {}, false, &mdp};
    const auto a = ipl_loss(q, vt, opts, pairs, offline);
    const auto b = ipl_ranking_loss(q, vt, opts, rankings, offline);
    worst = std::max(worst, std::abs(a.loss - b.loss));
    for (std::size_t j = 0; j < a.grad.size(); ++j) worst = std::max(worst, std::abs(a.grad[j] - b.grad[j]));
    for (int j = 0; j < 10; ++j) {
      const double s1 = rng.uniform(-20.0, 20.0), s2 = rng.uniform(-20.0, 20.0);
      std::vector<double> scores{s1, s2}, g(2);
      worst = std::max(worst, std::abs(plackett_luce_nll(scores, g) - preference_bce(s1 - s2, 1.0)));
    }
  }
  detail += fmt::format(" K=2 ranking vs pairwise max difference {:.2e}", worst);
  return {ok == 5 && worst <= 1e-12, detail};
}

Outcome criterion_determinism() {
  std::vector<std::pair<std::string, nlohmann::json>> docs;
  for (const std::string method : {"ipl-xql", "ipl-iql", "ipl-awac", "mr-iql"}) {
    auto doc = gridworld_doc();
    doc["method"] = method;
    doc["seed"] = 3;
    doc["data"]["n_pairs"] = 200;
    doc["algorithm"]["total_steps"] = 2000;
    doc["algorithm"]["reward_steps"] = 1000;
    doc["eval_interval"] = 200;
    docs.emplace_back(method, doc);
  }
  {
    auto doc = gridworld_doc();
    doc["seed"] = 4;
    doc["data"]["n_pairs"] = 200;
    doc["algorithm"]["representation"] = "mlp";
    doc["algorithm"]["hidden"] = {16, 16};
    doc["algorithm"]["total_steps"] = 300;
    doc["eval_interval"] = 100;
    docs.emplace_back("ipl-iql-mlp", doc);
  }
  docs.emplace_back("dpo", nlohmann::json{{"name", "bandit"},
                                          {"seed", 5},
                                          {"env", {{"type", "bandit"}, {"n_states", 4}, {"n_actions", 3}}},
                                          {"data", {{"kind", "exhaustive"}, {"label", "soft"}, {"k", 1}, {"s", 1}}},
                                          {"method", "dpo"},
                                          {"dpo", {{"steps", 500}}}});
  int identical = 0;
  std::string detail;
  for (const auto& [label, doc] : docs) {
    const RunSummary a = run_doc(doc, "determinism/" + label + "-a");
    const RunSummary b = run_doc(doc, "determinism/" + label + "-b");
    const std::string ca = slurp(a.dir / "metrics.csv"), cb = slurp(b.dir / "metrics.csv");
    const bool same = !ca.empty() && ca == cb;
    identical += same;
    detail += fmt::format(" [{}: {} bytes {}]", label, ca.size(), same ? "identical" : "DIFFER");
  }
  return {identical == static_cast<int>(docs.size()),
          fmt::format("{}/{} pipelines rerun byte-identically;", identical, docs.size()) + detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<Criterion> criteria = {
      {1, "tabular convergence to the regularized optimum", criterion_convergence},
      {2, "inverse soft-Bellman bijection", criterion_bijection},
      {3, "oracle self-consistency", criterion_oracle},
      {4, "lambda = 0 collapse", criterion_lambda_zero},
      {5, "DPO equivalence on bandits", criterion_dpo},
      {6, "gradient suite", criterion_gradients},
      {7, "variant parity on the gridworld", criterion_variants},
      {8, "MR+IQL vs IPL across preference scales", criterion_mr_vs_ipl},
      {9, "parameter accounting", criterion_params},
      {10, "Plackett-Luce rankings", criterion_plackett_luce},
      {11, "determinism", criterion_determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !out.pass;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", out.pass ? "PASS" : "FAIL", c.id, c.title.c_str(),
                out.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
