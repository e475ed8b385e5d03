#include "topk/experiments.hpp"
#include "topk/text.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace {

using namespace topk;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool with_out = true) {
  cmd->add_option("--config", opts.config, "key = value config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "override the config seed");
  if (with_out) {
    cmd->add_option("--out", opts.out, "output directory (default $TOPK_OUT_ROOT/<command>)");
    cmd->add_flag("--force", opts.force, "overwrite existing outputs");
  }
}

ExperimentConfig load_config(const CommonOptions& opts) {
  auto cfg = ExperimentConfig::load(opts.config);
  if (opts.seed) cfg = cfg.with("seed", std::to_string(*opts.seed));
  return cfg;
}

fs::path output_dir(const CommonOptions& opts, const std::string& command) {
  if (!opts.out.empty()) return opts.out;
  const char* root = std::getenv("TOPK_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / command;
}

int run_generate(const CommonOptions& opts) {
  const auto cfg = load_config(opts);
  const auto file = cmd_generate_data(cfg, output_dir(opts, "generate-data"), opts.force);
  std::cout << "wrote " << file.string() << "\n";
  return kExitOk;
}

int run_train(const CommonOptions& opts, const std::string& dataset) {
  const auto cfg = load_config(opts);
  const auto outcome = cmd_train(cfg, dataset, output_dir(opts, "train"), opts.force);
  (outcome.exit_code == kExitOk ? std::cout : std::cerr) << outcome.message << "\n";
  return outcome.exit_code;
}

int run_evaluate(const CommonOptions& opts, const std::string& checkpoint) {
  const auto cfg = load_config(opts);
  const auto rows = cmd_evaluate(cfg, checkpoint, output_dir(opts, "evaluate"), opts.force);
  for (const auto& r : rows) {
    std::cout << r.serve_mode << " K=" << r.k << " reward/impression=" << text::format_double(r.metrics.mean_reward)
              << " +- " << text::format_double(r.metrics.stderr_reward) << "\n";
  }
  return kExitOk;
}

int run_sweep(const CommonOptions& opts) {
  const auto cfg = load_config(opts);
  const auto result = cmd_sweep(cfg, output_dir(opts, "sweep"), opts.force);
  for (const auto& s : result.summary) {
    std::cout << cfg.sweep_axis << "=" << s.value << " metric=" << text::format_double(s.metric_mean) << " +- "
              << text::format_double(s.metric_stderr) << "\n";
  }
  return kExitOk;
}

int run_grad_check(const CommonOptions& opts, const std::string& corrupt) {
  const auto cfg = load_config(opts);
  bool all = true;
  for (const auto& row : cmd_grad_check(cfg, corrupt)) {
    std::cout << to_string(row.mode) << " max_rel_err=" << text::format_double(row.report.max_relative_error)
              << " worst=" << row.report.worst_tensor << "(" << row.report.worst_row << "," << row.report.worst_col
              << ") entries=" << row.report.entries_checked << " " << (row.passed ? "PASS" : "FAIL") << "\n";
    all = all && row.passed;
  }
  return all ? kExitOk : kExitNumerical;
}

int run_recipe_cmd(const CommonOptions& opts) {
  const auto cfg = load_config(opts);
  const auto out = output_dir(opts, cfg.recipe);
  run_recipe(cfg, out, opts.force);
  std::cout << "wrote " << out.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Off-policy top-K REINFORCE for sequential recommenders"};
  app.set_version_flag("--version", topk::version_string());
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, sweep_opts, check_opts, recipe_opts;
  std::string dataset, checkpoint, corrupt;

  auto* gen = app.add_subcommand("generate-data", "simulate logged trajectories under the behavior policy");
  add_common(gen, gen_opts);
  auto* train = app.add_subcommand("train", "train the policy on a logged dataset");
  add_common(train, train_opts);
  train->add_option("--dataset", dataset, "dataset.csv from generate-data")->required();
  auto* evaluate = app.add_subcommand("evaluate", "roll a checkpoint out in the simulator");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint.bin from train")->required();
  auto* sweep = app.add_subcommand("sweep", "generate/train/evaluate over sweep.values x seeds");
  add_common(sweep, sweep_opts);
  auto* check = app.add_subcommand("grad-check", "finite-difference check of every correction mode");
  add_common(check, check_opts, false);
  check->add_option("--corrupt-tensor", corrupt)->group("");
  auto* recipe = app.add_subcommand("recipe", "run the experiment named by the config's recipe key");
  add_common(recipe, recipe_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : topk::kExitConfig;
  }

  try {
    if (*gen) return run_generate(gen_opts);
    if (*train) return run_train(train_opts, dataset);
    if (*evaluate) return run_evaluate(eval_opts, checkpoint);
    if (*sweep) return run_sweep(sweep_opts);
    if (*check) return run_grad_check(check_opts, corrupt);
    if (*recipe) return run_recipe_cmd(recipe_opts);
  } catch (const topk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return topk::kExitConfig;
  } catch (const topk::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return topk::kExitConfig;
  } catch (const topk::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return topk::kExitData;
  } catch (const topk::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return topk::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return topk::kExitOk;
}
