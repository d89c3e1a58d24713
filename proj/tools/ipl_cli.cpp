// Command-line front end for the experiment harness.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ipl/errors.hpp"
#include "ipl/harness.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("--config", args.config, "JSON experiment config");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", args.seed, "Overrides the top-level seed");
  cmd->add_option("--out", args.out, "Output directory (overrides out_dir)");
}

nlohmann::json load_doc(const CommonArgs& args) {
  std::ifstream in(args.config, std::ios::binary);
  if (!in) throw ipl::ConfigError("cannot open " + args.config);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ipl::StageError("config", e.what(), 2);
  }
  if (args.seed) doc["seed"] = *args.seed;
  if (!args.out.empty()) doc["out_dir"] = args.out;
  return doc;
}

ipl::ExperimentConfig load_config(const CommonArgs& args, const std::optional<std::string>& method = std::nullopt) {
  nlohmann::json doc = load_doc(args);
  if (method) doc["method"] = *method;
  try {
    return ipl::experiment_from_json(doc);
  } catch (const ipl::ConfigError& e) {
    throw ipl::StageError("config", e.what(), 2);
  }
}

void print_summary(const ipl::RunSummary& s) {
  std::cout << "run " << s.dir.string() << " config_hash=" << s.config_hash << " method=" << s.method;
  if (s.best_return) std::cout << " best_return=" << *s.best_return;
  if (s.final_return) std::cout << " final_return=" << *s.final_return;
  if (s.gap) std::cout << " reward_gap=" << s.gap->reward_gap << " max_kl=" << s.gap->max_kl;
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverse preference learning experiments"};
  app.require_subcommand(1);

  CommonArgs env_args, data_args, train_args, oracle_args, compare_args, sweep_args;
  auto* gen_env = app.add_subcommand("gen-env", "Write the environment as env.json");
  add_common(gen_env, env_args);
  auto* gen_data = app.add_subcommand("gen-data", "Write env.json, dataset.jsonl and offline.jsonl");
  add_common(gen_data, data_args);

  auto* train = app.add_subcommand("train", "Run the full pipeline for one method");
  add_common(train, train_args);
  std::optional<std::string> variant;
  train->add_option("--variant", variant, "ipl-xql | ipl-iql | ipl-awac | mr-iql | dpo")
      ->check(CLI::IsMember({"ipl-xql", "ipl-iql", "ipl-awac", "mr-iql", "dpo"}));

  auto* oracle = app.add_subcommand("oracle", "Solve for r* and write oracle.json");
  add_common(oracle, oracle_args);

  auto* compare = app.add_subcommand("compare", "Summarize completed runs");
  add_common(compare, compare_args, false);
  std::vector<std::string> run_dirs;
  compare->add_option("runs", run_dirs, "Run directories (or list them under \"runs\" in --config)");

  auto* sweep = app.add_subcommand("sweep", "Expand a sweep config and run every cell");
  add_common(sweep, sweep_args);
  std::size_t jobs = 1;
  sweep->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_env) {
      ipl::write_env_and_data(load_config(env_args), false);
    } else if (*gen_data) {
      ipl::write_env_and_data(load_config(data_args), true);
    } else if (*train) {
      print_summary(ipl::run_experiment(load_config(train_args, variant)));
    } else if (*oracle) {
      const auto report = ipl::run_oracle(load_config(oracle_args));
      std::cout << "oracle iterations=" << report.iterations << " residual=" << report.residual
                << " min_hessian_eigenvalue=" << report.min_hessian_eigenvalue << "\n";
    } else if (*compare) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      if (!compare_args.config.empty()) {
        const auto doc = load_doc(compare_args);
        for (const auto& d : doc.value("runs", std::vector<std::string>{})) dirs.emplace_back(d);
      }
      if (dirs.empty()) throw ipl::StageError("compare", "no run directories given", 2);
      const auto table = ipl::compare_runs(dirs);
      const std::string csv = table.to_csv();
      std::cout << csv;
      if (!compare_args.out.empty()) {
        std::filesystem::create_directories(compare_args.out);
        std::ofstream(std::filesystem::path(compare_args.out) / "summary.csv", std::ios::binary) << csv;
      }
      if (!table.missing.empty()) return 1;
    } else if (*sweep) {
      const auto configs = ipl::expand_sweep(load_doc(sweep_args));
      const auto result = ipl::run_sweep(configs, jobs);
      for (const auto& f : result.failures) std::cerr << "error: " << f << "\n";
      std::cout << ipl::compare_runs(result.run_dirs).to_csv();
      if (!result.failures.empty()) return 1;
    }
  } catch (const ipl::StageError& e) {
    std::cerr << "error " << e.what() << "\n";
    return e.exit_code();
  } catch (const ipl::ConfigError& e) {
    std::cerr << "error [config] " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error " << e.what() << "\n";
    return 1;
  }
  return 0;
}
