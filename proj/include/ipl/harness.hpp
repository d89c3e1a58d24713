#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipl/baselines.hpp"
#include "ipl/data.hpp"
#include "ipl/mdp.hpp"
#include "ipl/oracle.hpp"
#include "ipl/trainer.hpp"

namespace ipl {

struct EnvSpec {
  /// "gridworld", "random", "bandit" or "file".
  std::string type = "gridworld";
  double gamma = 0.99;
  // random MDP
  std::size_t n_states = 5;
  std::size_t n_actions = 3;
  std::size_t branching = 5;
  double reward_scale = 1.0;
  // gridworld
  std::size_t width = 5;
  std::size_t height = 5;
  GridCell goal{4, 4};
  double step_penalty = 0.0;
  double slip = 0.0;
  // file
  std::filesystem::path path;
  std::optional<std::uint64_t> seed;
};

/// Behavior policy for trajectory generation: with weight `optimal_weight`
/// the soft-optimal policy at temperature `alpha`, otherwise uniform.
struct BehaviorSpec {
  double optimal_weight = 0.5;
  double alpha = 0.1;
};

struct DataSpec {
  /// "segments": pairs of sampled trajectory segments;
  /// "exhaustive": every pair of distinct single-step (s, a) segments.
  std::string kind = "segments";
  std::size_t n_pairs = 2000;
  std::size_t k = 25;
  LabelMode label = LabelMode::argmax;
  std::size_t n_trajectories = 200;
  std::size_t horizon = 50;
  BehaviorSpec behavior{};
  /// "trajectories": every generated transition; "segments": only the
  /// transitions inside preference segments.
  std::string offline = "trajectories";
  std::size_t n_rankings = 0;
  std::size_t ranking_size = 3;
  std::optional<std::uint64_t> seed;
};

/// Training method selected by `train --variant`.
enum class Method { ipl_xql, ipl_iql, ipl_awac, mr_iql, dpo };

Method parse_method(const std::string& name);
std::string to_string(Method method);

struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  EnvSpec env{};
  DataSpec data{};
  Method method = Method::ipl_iql;
  IplConfig algorithm{};
  DpoConfig dpo{};
  bool oracle = false;
  std::filesystem::path out_dir = "out";

  /// Cross-field checks; throws ConfigError.
  void validate() const;
  std::uint64_t env_seed() const;
  std::uint64_t data_seed() const;
};

/// Parses a JSON config. Missing keys keep their defaults; gamma, k, s and
/// eval_interval are shared between the sections and must agree.
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
nlohmann::json experiment_to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON of everything except the output directory,
/// as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

TabularMdp build_env(const ExperimentConfig& config);
/// The random bandit described by an env of type "bandit".
BanditProblem build_bandit(const ExperimentConfig& config);

Policy behavior_policy(const TabularMdp& mdp, const BehaviorSpec& spec);

/// All pairs of distinct (s, a) cells as one-step segments; the next state is
/// the most likely successor.
std::vector<PreferencePair> exhaustive_pairs(const TabularMdp& mdp, LabelMode mode, const SegmentWeighting& weighting,
                                             Rng& rng);

struct GeneratedData {
  Dataset prefs;
  TransitionDataset offline;
};

GeneratedData generate_data(const ExperimentConfig& config, const TabularMdp& mdp);

/// Ground-truth return of the soft-optimal policy for the KL-regularized
/// problem the offline learner solves: soft value iteration on the expert
/// reward with temperature 1 / extraction_inv_temperature() and the empirical
/// behavior distribution of the data as reference.
double reference_return(const ExperimentConfig& config, const TabularMdp& mdp, const GeneratedData& data);

/// Failure inside one pipeline stage; `exit_code` follows the CLI contract
/// (2 config, 3 divergence, 4 oracle, 1 otherwise).
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message, int exit_code)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

struct RunSummary {
  std::string config_hash;
  std::string name;
  std::string method;
  std::string task;
  std::size_t n_pairs = 0;
  std::uint64_t seed = 0;
  std::optional<double> best_return;
  std::optional<double> final_return;
  std::optional<double> reference_return;
  std::size_t param_count = 0;
  std::optional<GapReport> gap;
  std::filesystem::path dir;

  nlohmann::json to_json() const;
  static RunSummary from_json(const nlohmann::json& doc);
};

/// env -> data -> train -> (oracle compare). Writes config.json, env.json,
/// dataset.jsonl, offline.jsonl, checkpoint.json, metrics.csv, summary.json
/// and, with the oracle enabled, oracle.json and gap.json into out_dir.
/// Stage failures surface as StageError.
RunSummary run_experiment(const ExperimentConfig& config);

/// Writes env.json (and dataset files when `with_data`) only.
void write_env_and_data(const ExperimentConfig& config, bool with_data);

/// Solves r* for the configured dataset and writes oracle.json and
/// oracle_policy.json.
OracleReport run_oracle(const ExperimentConfig& config);

struct SummaryCell {
  std::string task;
  std::string method;
  std::size_t n_pairs = 0;
  std::size_t n_runs = 0;
  double mean = 0.0;
  /// Population standard deviation across runs.
  double std = 0.0;
  /// Same statistics for 100 * best_return / reference_return, over runs
  /// that recorded a reference.
  std::optional<double> mean_score;
  std::optional<double> std_score;
};

struct SummaryTable {
  std::vector<SummaryCell> cells;
  /// Run directories without a readable summary.json.
  std::vector<std::filesystem::path> missing;

  /// Header comment states the best-checkpoint convention.
  std::string to_csv() const;
  const SummaryCell* find(const std::string& task, const std::string& method, std::size_t n_pairs) const;
};

/// Mean and population std of best_return (and of the normalized score) per
/// (task, method, n_pairs).
SummaryTable compare_runs(const std::vector<std::filesystem::path>& run_dirs);

/// Expands `doc["sweep"]`, a map from dotted config paths (e.g.
/// "algorithm.lambda", "seed") to value lists, into the cartesian product of
/// configs. Each gets its own subdirectory of the base out_dir, and swept
/// values other than seeds and n_pairs are appended to its name so compare
/// keeps them apart.
std::vector<ExperimentConfig> expand_sweep(const nlohmann::json& doc);

/// Runs every config on up to `jobs` worker threads. Failures are recorded
/// in the returned messages rather than aborting the sweep.
struct SweepResult {
  std::vector<std::filesystem::path> run_dirs;
  std::vector<std::string> failures;
};
SweepResult run_sweep(const std::vector<ExperimentConfig>& configs, std::size_t jobs);

}  // namespace ipl
