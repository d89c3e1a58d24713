#include "ipl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include <fmt/format.h>

#include "ipl/errors.hpp"

namespace ipl {

Method parse_method(const std::string& name) {
  if (name == "ipl-xql") return Method::ipl_xql;
  if (name == "ipl-iql") return Method::ipl_iql;
  if (name == "ipl-awac") return Method::ipl_awac;
  if (name == "mr-iql") return Method::mr_iql;
  if (name == "dpo") return Method::dpo;
  throw ConfigError("unknown method '" + name + "' (expected ipl-xql, ipl-iql, ipl-awac, mr-iql or dpo)");
}

std::string to_string(Method method) {
  switch (method) {
    case Method::ipl_xql:
      return "ipl-xql";
    case Method::ipl_iql:
      return "ipl-iql";
    case Method::ipl_awac:
      return "ipl-awac";
    case Method::mr_iql:
      return "mr-iql";
    case Method::dpo:
      return "dpo";
  }
  return "unknown";
}

namespace {

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) { return Rng(seed).split(stream).next_u64(); }

nlohmann::json env_to_json(const EnvSpec& e) {
  nlohmann::json j = {{"type", e.type},           {"gamma", e.gamma},
                      {"n_states", e.n_states},   {"n_actions", e.n_actions},
                      {"branching", e.branching}, {"reward_scale", e.reward_scale},
                      {"width", e.width},         {"height", e.height},
                      {"goal", {e.goal.x, e.goal.y}},
                      {"step_penalty", e.step_penalty},
                      {"slip", e.slip},           {"path", e.path.string()}};
  if (e.seed) j["seed"] = *e.seed;
  return j;
}

EnvSpec env_from_json(const nlohmann::json& j) {
  EnvSpec e;
  e.type = j.value("type", e.type);
  e.gamma = j.value("gamma", e.gamma);
  e.n_states = j.value("n_states", e.n_states);
  e.n_actions = j.value("n_actions", e.n_actions);
  e.branching = j.value("branching", e.branching);
  e.reward_scale = j.value("reward_scale", e.reward_scale);
  e.width = j.value("width", e.width);
  e.height = j.value("height", e.height);
  if (j.contains("goal")) {
    const auto goal = j["goal"].get<std::vector<std::size_t>>();
    if (goal.size() != 2) throw ConfigError("env.goal must be [x, y]");
    e.goal = {goal[0], goal[1]};
  }
  e.step_penalty = j.value("step_penalty", e.step_penalty);
  e.slip = j.value("slip", e.slip);
  e.path = j.value("path", std::string{});
  if (j.contains("seed")) e.seed = j["seed"].get<std::uint64_t>();
  return e;
}

nlohmann::json data_to_json(const DataSpec& d) {
  nlohmann::json j = {{"kind", d.kind},
                      {"n_pairs", d.n_pairs},
                      {"k", d.k},
                      {"label", to_string(d.label)},
                      {"n_trajectories", d.n_trajectories},
                      {"horizon", d.horizon},
                      {"behavior", {{"optimal_weight", d.behavior.optimal_weight}, {"alpha", d.behavior.alpha}}},
                      {"offline", d.offline},
                      {"n_rankings", d.n_rankings},
                      {"ranking_size", d.ranking_size}};
  if (d.seed) j["seed"] = *d.seed;
  return j;
}

DataSpec data_from_json(const nlohmann::json& j) {
  DataSpec d;
  d.kind = j.value("kind", d.kind);
  d.n_pairs = j.value("n_pairs", d.n_pairs);
  d.k = j.value("k", d.k);
  if (j.contains("label")) d.label = parse_label_mode(j["label"].get<std::string>());
  d.n_trajectories = j.value("n_trajectories", d.n_trajectories);
  d.horizon = j.value("horizon", d.horizon);
  if (j.contains("behavior")) {
    d.behavior.optimal_weight = j["behavior"].value("optimal_weight", d.behavior.optimal_weight);
    d.behavior.alpha = j["behavior"].value("alpha", d.behavior.alpha);
  }
  d.offline = j.value("offline", d.offline);
  d.n_rankings = j.value("n_rankings", d.n_rankings);
  d.ranking_size = j.value("ranking_size", d.ranking_size);
  if (j.contains("seed")) d.seed = j["seed"].get<std::uint64_t>();
  return d;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) { write_text(path, doc.dump(2) + "\n"); }

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

/// Runs one stage and converts library errors into a tagged StageError.
template <typename F>
auto staged(const std::string& stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw StageError(stage, e.what(), 2);
  } catch (const ParseError& e) {
    throw StageError(stage, e.what(), 2);
  } catch (const TrainingError& e) {
    throw StageError(stage, e.what(), 3);
  } catch (const OptimizerError& e) {
    throw StageError(stage, e.what(), 3);
  } catch (const OracleError& e) {
    throw StageError(stage, e.what(), 4);
  } catch (const ConvergenceError& e) {
    throw StageError(stage, e.what(), stage == "oracle" ? 4 : 1);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), 1);
  }
}

std::vector<Transition> segment_transitions(const Dataset& prefs) {
  std::vector<Transition> out;
  auto add = [&](const Segment& seg) {
    for (std::size_t t = 0; t < seg.length(); ++t) out.push_back({seg.states[t], seg.actions[t], seg.states[t + 1]});
  };
  for (const auto& p : prefs.pairs) {
    add(p.first);
    add(p.second);
  }
  for (const auto& q : prefs.rankings)
    for (const auto& seg : q.segments) add(seg);
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  static const std::vector<std::string> env_types{"gridworld", "random", "bandit", "file"};
  if (std::find(env_types.begin(), env_types.end(), env.type) == env_types.end())
    throw ConfigError("unknown env.type '" + env.type + "'");
  if (env.type == "file" && !std::filesystem::exists(env.path))
    throw ConfigError("env.path does not exist: " + env.path.string());
  if (data.kind != "segments" && data.kind != "exhaustive") throw ConfigError("data.kind must be segments or exhaustive");
  if (data.offline != "trajectories" && data.offline != "segments")
    throw ConfigError("data.offline must be trajectories or segments");
  if (data.kind == "exhaustive" && data.k != 1) throw ConfigError("exhaustive single-step pairs need k = 1");
  if (env.type == "bandit" && data.kind != "exhaustive") throw ConfigError("bandit environments use exhaustive pairs");
  if (method == Method::dpo && env.type != "bandit") throw ConfigError("dpo runs on bandit environments only");
  if (data.kind == "segments") {
    if (data.n_pairs == 0 && data.n_rankings == 0) throw ConfigError("dataset would be empty");
    if (data.n_trajectories == 0 || data.horizon < data.k)
      throw ConfigError("trajectories must be at least k steps long");
    if (data.n_rankings > 0 && data.ranking_size < 2) throw ConfigError("rankings need at least two segments");
  }
  if (data.behavior.optimal_weight < 0.0 || data.behavior.optimal_weight > 1.0 || !(data.behavior.alpha > 0.0))
    throw ConfigError("behavior needs optimal_weight in [0, 1] and alpha > 0");
  algorithm.validate();
  if (algorithm.ranking_loss && data.n_rankings == 0) throw ConfigError("ranking loss needs data.n_rankings > 0");
  if (oracle) {
    if (algorithm.representation != Representation::tabular || !algorithm.regularize_full_space)
      throw ConfigError("the oracle requires tabular mode with full-space regularization");
    if (!(algorithm.lambda > 0.0)) throw ConfigError("the oracle requires lambda > 0");
    if (method == Method::dpo || algorithm.ranking_loss) throw ConfigError("the oracle covers pairwise IPL and MR runs");
  }
  if (method == Method::dpo && !(dpo.alpha > 0.0)) throw ConfigError("dpo.alpha must be positive");
}

std::uint64_t ExperimentConfig::env_seed() const { return env.seed ? *env.seed : derived_seed(seed, 1); }
std::uint64_t ExperimentConfig::data_seed() const { return data.seed ? *data.seed : derived_seed(seed, 2); }

ExperimentConfig experiment_from_json(const nlohmann::json& doc) {
  try {
    if (!doc.is_object()) throw ConfigError("experiment config must be a JSON object");
    ExperimentConfig c;
    c.name = doc.value("name", c.name);
    c.seed = doc.value("seed", c.seed);
    if (doc.contains("env")) c.env = env_from_json(doc["env"]);
    if (doc.contains("data")) c.data = data_from_json(doc["data"]);
    if (doc.contains("method")) c.method = parse_method(doc["method"].get<std::string>());
    const nlohmann::json algo = doc.value("algorithm", nlohmann::json::object());
    c.algorithm = config_from_json(algo);
    if (doc.contains("dpo")) {
      const auto& d = doc["dpo"];
      c.dpo.alpha = d.value("alpha", c.dpo.alpha);
      c.dpo.steps = d.value("steps", c.dpo.steps);
      c.dpo.optimizer.lr = d.value("lr", c.dpo.optimizer.lr);
      if (d.contains("optimizer")) c.dpo.optimizer.kind = parse_optimizer_kind(d["optimizer"].get<std::string>());
    }
    c.oracle = doc.value("oracle", c.oracle);
    c.out_dir = doc.value("out_dir", c.out_dir.string());

    // Fields shared between sections.
    if (c.env.type == "bandit") c.env.gamma = 0.0;
    if (algo.contains("gamma") && c.algorithm.gamma != c.env.gamma)
      throw ConfigError(fmt::format("algorithm.gamma {} differs from env.gamma {}", c.algorithm.gamma, c.env.gamma));
    c.algorithm.gamma = c.env.gamma;
    if (algo.contains("k") && c.algorithm.k != c.data.k)
      throw ConfigError(fmt::format("algorithm.k {} differs from data.k {}", c.algorithm.k, c.data.k));
    c.algorithm.k = c.data.k;
    if (doc.contains("data") && doc["data"].contains("s")) {
      const auto s = doc["data"]["s"].get<std::size_t>();
      if (algo.contains("s") && s != c.algorithm.s) throw ConfigError("data.s and algorithm.s disagree");
      c.algorithm.s = s;
    } else if (!algo.contains("s")) {
      c.algorithm.s = std::min(c.algorithm.s, c.data.k);
    }
    if (doc.contains("eval_interval")) {
      c.algorithm.eval_interval = doc["eval_interval"].get<std::size_t>();
      c.dpo.eval_interval = c.algorithm.eval_interval;
    }
    if (!algo.contains("seed")) c.algorithm.seed = derived_seed(c.seed, 3);
    switch (c.method) {
      case Method::ipl_xql:
        c.algorithm.variant = Variant::xql;
        break;
      case Method::ipl_iql:
      case Method::mr_iql:
        c.algorithm.variant = Variant::iql;
        break;
      case Method::ipl_awac:
        c.algorithm.variant = Variant::awac;
        break;
      case Method::dpo:
        break;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
}

nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"seed", c.seed},
          {"env", env_to_json(c.env)},
          {"data", data_to_json(c.data)},
          {"method", to_string(c.method)},
          {"algorithm", config_to_json(c.algorithm)},
          {"dpo",
           {{"alpha", c.dpo.alpha},
            {"steps", c.dpo.steps},
            {"lr", c.dpo.optimizer.lr},
            {"optimizer", to_string(c.dpo.optimizer.kind)}}},
          {"oracle", c.oracle},
          {"eval_interval", c.algorithm.eval_interval},
          {"out_dir", c.out_dir.string()}};
}

ExperimentConfig load_experiment(const std::filesystem::path& path) { return experiment_from_json(read_json(path)); }

std::string config_hash(const ExperimentConfig& config) {
  nlohmann::json doc = experiment_to_json(config);
  doc.erase("out_dir");
  const std::string text = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

BanditProblem build_bandit(const ExperimentConfig& config) {
  if (config.env.type != "bandit") throw ConfigError("env.type is not bandit");
  Rng rng(config.env_seed());
  return make_random_bandit(config.env.n_states, config.env.n_actions, config.data.label, rng);
}

TabularMdp build_env(const ExperimentConfig& config) {
  const EnvSpec& e = config.env;
  if (e.type == "gridworld")
    return make_gridworld(e.width, e.height, e.goal, e.step_penalty, e.slip, e.gamma, config.env_seed());
  if (e.type == "random")
    return make_random_mdp(e.n_states, e.n_actions, e.gamma, e.branching, e.reward_scale, config.env_seed());
  if (e.type == "bandit") return build_bandit(config).as_mdp();
  if (e.type == "file") {
    TabularMdp mdp = mdp_from_json(read_json(e.path));
    if (mdp.discount != e.gamma)
      throw ConfigError(fmt::format("env file discount {} differs from env.gamma {}", mdp.discount, e.gamma));
    return mdp;
  }
  throw ConfigError("unknown env.type '" + e.type + "'");
}

Policy behavior_policy(const TabularMdp& mdp, const BehaviorSpec& spec) {
  const Policy uniform = Policy::uniform(mdp.n_states, mdp.n_actions);
  Policy out = uniform;
  if (spec.optimal_weight > 0.0) {
    const SoftSolution sol = soft_value_iteration(mdp, mdp.expert_reward, spec.alpha, uniform);
    for (std::size_t i = 0; i < out.probs.size(); ++i)
      out.probs.values()[i] =
          spec.optimal_weight * sol.policy.probs.values()[i] + (1.0 - spec.optimal_weight) * uniform.probs.values()[i];
  }
  return out;
}

std::vector<PreferencePair> exhaustive_pairs(const TabularMdp& mdp, LabelMode mode, const SegmentWeighting& weighting,
                                             Rng& rng) {
  std::vector<Segment> cells;
  for (StateId s = 0; s < mdp.n_states; ++s)
    for (ActionId a = 0; a < mdp.n_actions; ++a) {
      const auto row = mdp.next_dist(s, a);
      const auto next = static_cast<StateId>(std::max_element(row.begin(), row.end()) - row.begin());
      cells.push_back(Segment{{s, next}, {a}, 0, 0});
    }
  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t j = i + 1; j < cells.size(); ++j)
      pairs.push_back(label_pair(cells[i], cells[j], mdp.expert_reward, mode, weighting, rng));
  return pairs;
}

GeneratedData generate_data(const ExperimentConfig& config, const TabularMdp& mdp) {
  const DataSpec& d = config.data;
  Rng root(config.data_seed());
  GeneratedData out;
  const SegmentWeighting weighting = config.algorithm.weighting();
  if (config.env.type == "bandit") {
    out.prefs.pairs = build_bandit(config).pairs;
    out.offline.transitions = segment_transitions(out.prefs);
    out.offline.behavior_policy_id = "bandit-pairs";
    return out;
  }
  if (d.kind == "exhaustive") {
    Rng label_rng = root.split(3);
    out.prefs.pairs = exhaustive_pairs(mdp, d.label, weighting, label_rng);
    out.offline.transitions = segment_transitions(out.prefs);
    out.offline.behavior_policy_id = "exhaustive-cells";
    return out;
  }

  const Policy behavior = behavior_policy(mdp, d.behavior);
  Rng traj_rng = root.split(1);
  Rng seg_rng = root.split(2);
  Rng label_rng = root.split(3);
  std::vector<Trajectory> trajectories;
  trajectories.reserve(d.n_trajectories);
  for (std::size_t i = 0; i < d.n_trajectories; ++i) trajectories.push_back(rollout(mdp, behavior, d.horizon, traj_rng));

  if (d.n_pairs > 0) {
    const auto segments = sample_segments(trajectories, d.k, 2 * d.n_pairs, seg_rng);
    out.prefs.pairs.reserve(d.n_pairs);
    for (std::size_t i = 0; i < d.n_pairs; ++i)
      out.prefs.pairs.push_back(
          label_pair(segments[2 * i], segments[2 * i + 1], mdp.expert_reward, d.label, weighting, label_rng));
  }
  if (d.n_rankings > 0) {
    const auto segments = sample_segments(trajectories, d.k, d.n_rankings * d.ranking_size, seg_rng);
    for (std::size_t i = 0; i < d.n_rankings; ++i) {
      std::vector<Segment> group(segments.begin() + static_cast<std::ptrdiff_t>(i * d.ranking_size),
                                 segments.begin() + static_cast<std::ptrdiff_t>((i + 1) * d.ranking_size));
      out.prefs.rankings.push_back(label_ranking(std::move(group), mdp.expert_reward, weighting, label_rng));
    }
  }
  out.offline.transitions = d.offline == "trajectories" ? flatten(trajectories) : segment_transitions(out.prefs);
  out.offline.behavior_policy_id =
      fmt::format("mixture(optimal_weight={},alpha={})", d.behavior.optimal_weight, d.behavior.alpha);
  return out;
}

double reference_return(const ExperimentConfig& config, const TabularMdp& mdp, const GeneratedData& data) {
  const StateActionTable counts = behavior_counts(data.prefs, data.offline.transitions, mdp.n_states, mdp.n_actions);
  Policy mu{StateActionTable(mdp.n_states, mdp.n_actions)};
  for (StateId s = 0; s < mdp.n_states; ++s) {
    double total = 0.0;
    for (double c : counts.row(s)) total += c;
    for (ActionId a = 0; a < mdp.n_actions; ++a)
      mu.probs(s, a) = total > 0.0 ? counts(s, a) / total : 1.0 / static_cast<double>(mdp.n_actions);
  }
  const double alpha = 1.0 / config.algorithm.extraction_inv_temperature();
  const SoftSolution sol = soft_value_iteration(mdp, mdp.expert_reward, alpha, mu);
  return evaluate_policy_return(mdp, sol.policy, mdp.expert_reward);
}

nlohmann::json RunSummary::to_json() const {
  nlohmann::json j = {{"config_hash", config_hash},
                      {"name", name},
                      {"method", method},
                      {"task", task},
                      {"n_pairs", n_pairs},
                      {"seed", seed},
                      {"param_count", param_count},
                      {"reporting", "best_return is the maximum gt_return over checkpoints (oracle early stopping)"}};
  j["best_return"] = best_return ? nlohmann::json(*best_return) : nlohmann::json();
  j["final_return"] = final_return ? nlohmann::json(*final_return) : nlohmann::json();
  j["reference_return"] = reference_return ? nlohmann::json(*reference_return) : nlohmann::json();
  if (gap) j["gap"] = gap->to_json();
  return j;
}

RunSummary RunSummary::from_json(const nlohmann::json& j) {
  try {
    RunSummary s;
    s.config_hash = j.at("config_hash").get<std::string>();
    s.name = j.value("name", std::string{});
    s.method = j.at("method").get<std::string>();
    s.task = j.value("task", s.name);
    s.n_pairs = j.value("n_pairs", std::size_t{0});
    s.seed = j.value("seed", std::uint64_t{0});
    s.param_count = j.value("param_count", std::size_t{0});
    if (j.contains("best_return") && !j["best_return"].is_null()) s.best_return = j["best_return"].get<double>();
    if (j.contains("final_return") && !j["final_return"].is_null()) s.final_return = j["final_return"].get<double>();
    if (j.contains("reference_return") && !j["reference_return"].is_null())
      s.reference_return = j["reference_return"].get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed run summary: ") + e.what(), 0);
  }
}

namespace {

void write_data_files(const std::filesystem::path& dir, const GeneratedData& data, const std::string& hash) {
  save_dataset(dir / "dataset.jsonl", data.prefs, hash);
  Dataset offline;
  offline.transitions = data.offline.transitions;
  save_dataset(dir / "offline.jsonl", offline, hash);
}

nlohmann::json tagged(nlohmann::json doc, const std::string& hash) {
  doc["config_hash"] = hash;
  return doc;
}

}  // namespace

void write_env_and_data(const ExperimentConfig& config, bool with_data) {
  staged("config", [&] {
    config.validate();
    std::filesystem::create_directories(config.out_dir);
  });
  const std::string hash = config_hash(config);
  const TabularMdp mdp = staged("env", [&] { return build_env(config); });
  staged("env", [&] { write_json(config.out_dir / "env.json", tagged(mdp_to_json(mdp), hash)); });
  if (!with_data) return;
  staged("data", [&] { write_data_files(config.out_dir, generate_data(config, mdp), hash); });
}

OracleReport run_oracle(const ExperimentConfig& config) {
  staged("config", [&] {
    config.validate();
    std::filesystem::create_directories(config.out_dir);
  });
  const std::string hash = config_hash(config);
  const TabularMdp mdp = staged("env", [&] { return build_env(config); });
  const GeneratedData data = staged("data", [&] { return generate_data(config, mdp); });
  return staged("oracle", [&] {
    const ComparisonDesign design =
        build_design(data.prefs.pairs, mdp.n_states, mdp.n_actions, config.algorithm.weighting());
    OracleReport report = solve_rstar(design, config.algorithm.lambda, mdp.n_state_actions());
    const StateActionTable counts = behavior_counts(data.prefs, data.offline.transitions, mdp.n_states, mdp.n_actions);
    const OraclePolicy pol = oracle_fixed_point(mdp, report.rstar, config.algorithm, counts);
    write_json(config.out_dir / "oracle.json", tagged(report.to_json(), hash));
    write_json(config.out_dir / "oracle_policy.json",
               {{"config_hash", hash},
                {"rule", pol.rule},
                {"q", pol.q.values()},
                {"v", pol.v},
                {"policy", policy_to_json(pol.policy)}});
    return report;
  });
}

RunSummary run_experiment(const ExperimentConfig& config) {
  staged("config", [&] {
    config.validate();
    std::filesystem::create_directories(config.out_dir);
  });
  const std::string hash = config_hash(config);
  const auto& dir = config.out_dir;
  staged("config", [&] { write_json(dir / "config.json", {{"config_hash", hash}, {"config", experiment_to_json(config)}}); });

  const TabularMdp mdp = staged("env", [&] { return build_env(config); });
  staged("env", [&] { write_json(dir / "env.json", tagged(mdp_to_json(mdp), hash)); });
  const GeneratedData data = staged("data", [&] {
    GeneratedData d = generate_data(config, mdp);
    write_data_files(dir, d, hash);
    return d;
  });

  RunSummary summary;
  summary.config_hash = hash;
  summary.name = config.name;
  summary.task = config.name;
  summary.method = to_string(config.method);
  summary.n_pairs = data.prefs.pairs.size();
  summary.seed = config.seed;
  summary.dir = dir;
  const std::string csv_comment =
      fmt::format("config_hash={} method={} reporting=best-checkpoint (max gt_return over checkpoints, oracle early "
                  "stopping); final-step values are the last row",
                  hash, summary.method);

  if (config.method == Method::dpo) {
    MetricsLog log;
    const Policy pi = staged("train", [&] { return train_dpo(build_bandit(config), config.dpo, &log); });
    staged("write", [&] {
      log.write_csv(dir / "metrics.csv", csv_comment);
      write_json(dir / "checkpoint.json", {{"config_hash", hash}, {"policy_table", policy_to_json(pi)}});
    });
    summary.best_return = log.best_return();
    summary.final_return = log.empty() ? std::nullopt : log.rows().back().gt_return;
    summary.param_count = mdp.n_state_actions();
    staged("write", [&] { write_json(dir / "summary.json", summary.to_json()); });
    return summary;
  }

  std::optional<OracleReport> report;
  std::optional<OraclePolicy> oracle_pol;
  const StateActionTable counts = behavior_counts(data.prefs, data.offline.transitions, mdp.n_states, mdp.n_actions);
  if (config.oracle) {
    staged("oracle", [&] {
      const ComparisonDesign design =
          build_design(data.prefs.pairs, mdp.n_states, mdp.n_actions, config.algorithm.weighting());
      report = solve_rstar(design, config.algorithm.lambda, mdp.n_state_actions());
      oracle_pol = oracle_fixed_point(mdp, report->rstar, config.algorithm, counts);
      write_json(dir / "oracle.json", tagged(report->to_json(), hash));
    });
  }

  TrainOptions options;
  if (report) options.oracle_reward = &report->rstar;
  const TrainArtifacts art = staged("train", [&] {
    if (config.method == Method::mr_iql) return train_mr_iql(config.algorithm, data.prefs, data.offline, mdp, options);
    return train_ipl(config.algorithm, data.prefs, data.offline, mdp, options);
  });

  if (report) {
    summary.gap = staged("oracle", [&] {
      GapReport gap = compare_to_oracle(art, *report, *oracle_pol, mdp, &counts);
      write_json(dir / "gap.json", tagged(gap.to_json(), hash));
      return gap;
    });
  }

  staged("write", [&] {
    art.metrics.write_csv(dir / "metrics.csv", csv_comment);
    nlohmann::json ckpt = {{"config_hash", hash},
                           {"q", art.q_fn.to_checkpoint()},
                           {"policy_table", policy_to_json(art.policy)},
                           {"v_target", art.v}};
    if (art.v_fn) ckpt["v"] = art.v_fn->to_checkpoint();
    if (art.policy_fn) ckpt["policy"] = art.policy_fn->to_checkpoint();
    write_json(dir / "checkpoint.json", ckpt);
  });
  summary.best_return = art.metrics.best_return();
  summary.final_return = art.metrics.empty() ? std::nullopt : art.metrics.rows().back().gt_return;
  summary.reference_return = staged("reference", [&] { return reference_return(config, mdp, data); });
  summary.param_count = art.param_count;
  staged("write", [&] { write_json(dir / "summary.json", summary.to_json()); });
  return summary;
}

std::string SummaryTable::to_csv() const {
  std::string out =
      "# best-checkpoint return per run (max gt_return over checkpoints, oracle early stopping); "
      "mean and population std across runs\n";
  out += "task,method,n_pairs,n_runs,mean_best_return,std_best_return,mean_score,std_score\n";
  auto maybe = [](const std::optional<double>& x) { return x ? fmt::format("{:.17g}", *x) : std::string{}; };
  for (const auto& c : cells)
    out += fmt::format("{},{},{},{},{:.17g},{:.17g},{},{}\n", c.task, c.method, c.n_pairs, c.n_runs, c.mean, c.std,
                       maybe(c.mean_score), maybe(c.std_score));
  for (const auto& m : missing) out += fmt::format("# missing: {}\n", m.string());
  return out;
}

const SummaryCell* SummaryTable::find(const std::string& task, const std::string& method, std::size_t n_pairs) const {
  for (const auto& c : cells)
    if (c.task == task && c.method == method && c.n_pairs == n_pairs) return &c;
  return nullptr;
}

SummaryTable compare_runs(const std::vector<std::filesystem::path>& run_dirs) {
  SummaryTable table;
  struct Group {
    std::vector<double> returns;
    std::vector<double> scores;
  };
  std::map<std::tuple<std::string, std::string, std::size_t>, Group> groups;
  for (const auto& dir : run_dirs) {
    const auto path = dir / "summary.json";
    try {
      if (!std::filesystem::exists(path)) throw ConfigError("no summary");
      const RunSummary s = RunSummary::from_json(read_json(path));
      if (!s.best_return) throw ConfigError("no return recorded");
      Group& g = groups[{s.task, s.method, s.n_pairs}];
      g.returns.push_back(*s.best_return);
      if (s.reference_return && *s.reference_return != 0.0)
        g.scores.push_back(100.0 * *s.best_return / *s.reference_return);
    } catch (const std::exception&) {
      table.missing.push_back(dir);
    }
  }
  auto mean_std = [](const std::vector<double>& values) {
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - mean) * (v - mean);
    return std::pair{mean, std::sqrt(sq / static_cast<double>(values.size()))};
  };
  for (const auto& [key, g] : groups) {
    SummaryCell cell;
    std::tie(cell.task, cell.method, cell.n_pairs) = key;
    cell.n_runs = g.returns.size();
    std::tie(cell.mean, cell.std) = mean_std(g.returns);
    if (g.scores.size() == g.returns.size()) {
      const auto [m, sd] = mean_std(g.scores);
      cell.mean_score = m;
      cell.std_score = sd;
    }
    table.cells.push_back(cell);
  }
  return table;
}

namespace {

void set_path(nlohmann::json& doc, const std::string& dotted, const nlohmann::json& value) {
  nlohmann::json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty sweep key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = nlohmann::json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("sweep key '" + dotted + "' crosses a non-object");
  }
  (*node)[parts.back()] = value;
}

bool is_grouping_key(const std::string& key) {
  return key == "seed" || key == "name" || key == "out_dir" || key == "data.n_pairs" || key == "data.seed" ||
         key == "env.seed";
}

std::string label_value(const nlohmann::json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-') ch = '_';
  return s;
}

}  // namespace

std::vector<ExperimentConfig> expand_sweep(const nlohmann::json& doc) {
  if (!doc.contains("sweep") || !doc["sweep"].is_object()) throw ConfigError("sweep config needs a 'sweep' object");
  nlohmann::json base = doc;
  base.erase("sweep");
  const std::filesystem::path root = base.value("out_dir", std::string("out"));
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
  for (const auto& [key, values] : doc["sweep"].items()) {
    if (!values.is_array() || values.empty()) throw ConfigError("sweep axis '" + key + "' needs a non-empty list");
    axes.emplace_back(key, values.get<std::vector<nlohmann::json>>());
  }
  std::size_t total = 1;
  for (const auto& axis : axes) total *= axis.second.size();
  std::vector<ExperimentConfig> out;
  out.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    nlohmann::json cfg = base;
    std::size_t rest = idx;
    std::string label = fmt::format("{:03d}", idx);
    // Last axis varies fastest.
    std::vector<std::size_t> picks(axes.size());
    for (std::size_t a = axes.size(); a-- > 0;) {
      picks[a] = rest % axes[a].second.size();
      rest /= axes[a].second.size();
    }
    std::string variant;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& value = axes[a].second[picks[a]];
      set_path(cfg, axes[a].first, value);
      label += "_" + label_value(nlohmann::json(axes[a].first)) + "-" + label_value(value);
      // Seeds are aggregated by compare and n_pairs has its own column.
      if (!is_grouping_key(axes[a].first)) variant += " " + axes[a].first + "=" + label_value(value);
    }
    if (!variant.empty()) cfg["name"] = cfg.value("name", std::string("run")) + variant;
    cfg["out_dir"] = (root / label).string();
    out.push_back(experiment_from_json(cfg));
  }
  return out;
}

SweepResult run_sweep(const std::vector<ExperimentConfig>& configs, std::size_t jobs) {
  SweepResult result;
  result.run_dirs.resize(configs.size());
  std::vector<std::string> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      result.run_dirs[i] = configs[i].out_dir;
      try {
        run_experiment(configs[i]);
      } catch (const std::exception& e) {
        errors[i] = fmt::format("{}: {}", configs[i].out_dir.string(), e.what());
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, configs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (!e.empty()) result.failures.push_back(std::move(e));
  return result;
}

}  // namespace ipl
