#pragma once

#include "topk/config.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace topk {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitNumerical = 4 };

std::string version_string();

/// First line of every emitted CSV: tool version and config hash.
std::string csv_preamble(const ExperimentConfig& cfg);

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads (0 = hardware
/// concurrency). The first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned workers = 0);

// -- subcommands -----------------------------------------------------------------

/// Writes <out>/config.snapshot and <out>/dataset.csv. Refuses to touch an
/// existing dataset unless `force`.
fs::path cmd_generate_data(const ExperimentConfig& cfg, const fs::path& out, bool force);

struct TrainOutcome {
  int exit_code = kExitOk;
  std::string message;
  TrainResult result;
};

/// Trains on a dataset written by cmd_generate_data. Emits config.snapshot,
/// diagnostics.jsonl (one JSON object per step) and checkpoint.bin. On a
/// numerical failure the last good parameters are still checkpointed.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& out, bool force);

struct EvalRow {
  std::string serve_mode;
  Index k = 0;
  EvaluationMetrics metrics;
};

/// Evaluates a checkpoint for every requested (serve mode, K) pair and writes
/// <out>/metrics.csv.
std::vector<EvalRow> cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out,
                                  bool force);

struct SweepRun {
  std::string value;
  std::uint64_t seed = 0;
  double metric = 0.0;  // mean reward per impression (exact when enumerable)
  double metric_stderr = 0.0;
  double weight_variance = 0.0;
  double click_rate = 0.0;
};

struct SweepSummary {
  std::string value;
  std::size_t runs = 0;
  double metric_mean = 0.0;
  double metric_stderr = 0.0;
  double weight_variance_mean = 0.0;
  double weight_variance_stderr = 0.0;
};

struct SweepResult {
  std::vector<SweepRun> runs;          // sorted by (value index, seed)
  std::vector<SweepSummary> summary;   // one row per axis value, in axis order
};

/// One generate/train/evaluate pipeline per (axis value, seed).
SweepResult cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, bool force);

struct GradCheckRow {
  CorrectionMode mode;
  GradCheckReport report;
  bool passed = false;
};

inline constexpr double kGradCheckTolerance = 1e-4;

/// Finite-difference check of every correction mode on a small seeded
/// instance built from the config. `corrupt_tensor` perturbs the claimed
/// gradient of that tensor (negative control).
std::vector<GradCheckRow> cmd_grad_check(const ExperimentConfig& cfg, const std::string& corrupt_tensor = "");

// -- single-run pipeline ----------------------------------------------------------

struct PipelineResult {
  TrajectoryBatch data;
  TrainResult train;
  PolicyParameters initial;
};

/// Generates logged data and trains from a seeded initialization.
PipelineResult run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed);

/// Parameters initialised from the model.* keys and `seed`.
PolicyParameters initial_parameters(const ExperimentConfig& cfg, std::uint64_t seed);

// -- recipes ---------------------------------------------------------------------

struct RankCdfResult {
  std::vector<RankCdfRow> uncorrected;  // control = behavior policy
  std::vector<RankCdfRow> corrected;
  double uncorrected_outside_head = 0.0;
  double corrected_outside_head = 0.0;
};

/// Trains an uncorrected (mode=none) and a corrected (mode=standard) model on
/// the same logged data and compares their nominations with the behavior
/// policy's popularity ranking.
RankCdfResult rank_cdf_experiment(const ExperimentConfig& cfg, std::uint64_t seed);

struct MassSpreadResult {
  Vec standard_mass;  // mean policy over probe states
  Vec topk_mass;
  double standard_set_value = 0.0;  // exact set objective, K = eval.k
  double topk_set_value = 0.0;
};

/// Trains mode=standard and mode=topk (K = correction.k) on the same data.
MassSpreadResult mass_spread_experiment(const ExperimentConfig& cfg, std::uint64_t seed);

struct ExplorationSeedResult {
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> bucket_events{};
  std::size_t deterministic_coverage = 0;  // bucket 2
  std::size_t stochastic_coverage = 0;     // bucket 3
  double deterministic_metric = 0.0;       // model trained on buckets 1+2
  double stochastic_metric = 0.0;          // model trained on buckets 1+3
};

struct ExplorationResult {
  std::vector<ExplorationSeedResult> per_seed;
  double mean_delta = 0.0;  // stochastic - deterministic
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Three-bucket serving split: a production model serves bucket 1 and 2
/// deterministically and bucket 3 stochastically; one model retrains on
/// buckets 1+2, the other on 1+3, with equal data volumes.
ExplorationResult exploration_split_run(const ExperimentConfig& cfg, const std::array<double, 3>& buckets,
                                        std::span<const std::uint64_t> seeds);

/// Dispatches on cfg.recipe and writes its tables under `out`.
void run_recipe(const ExperimentConfig& cfg, const fs::path& out, bool force);

/// Two-sided 95% Student-t quantile.
double t_quantile_95(std::size_t dof);

}  // namespace topk
