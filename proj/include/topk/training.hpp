#pragma once

#include "topk/behavior_model.hpp"

#include <functional>
#include <optional>

namespace topk {

enum class BehaviorSource { recorded, estimated };

struct TrainConfig {
  CorrectionConfig correction;
  OptimizerConfig optimizer;
  int steps = 1000;
  std::size_t batch_trajectories = 64;  // 0 uses every trajectory each step
  std::uint64_t seed = 1;
  BehaviorSource behavior_source = BehaviorSource::recorded;
  double behavior_learning_rate = 1.0;
  int behavior_warmup_steps = 0;
};

struct StepRecord {
  int step = 0;
  GradientDiagnostics diagnostics;
  std::optional<double> behavior_log_loss;
};

using DiagnosticsSink = std::function<void(const StepRecord&)>;

struct TrainResult {
  PolicyParameters params;  // last parameters with a finite update
  std::optional<BehaviorHead> behavior;
  int steps_completed = 0;
  double mean_weight_variance = 0.0;
  std::optional<std::string> numerical_failure;
};

/// Minibatch policy-gradient ascent on logged data.
///
/// With BehaviorSource::estimated the behavior head is trained alongside the
/// policy (one step per minibatch after `behavior_warmup_steps` full-batch
/// steps) and its estimates replace the recorded probabilities. When the KL
/// penalty is on, `kl_reference` supplies the full behavior distributions for
/// the recorded case; the estimated case uses the head.
TrainResult train_policy(const TrajectoryBatch& data, PolicyParameters init, const TrainConfig& cfg,
                         const DiagnosticsSink& sink = {}, const BehaviorDistributions* kl_reference = nullptr);

}  // namespace topk
