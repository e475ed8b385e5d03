#include "topk/training.hpp"

#include <numeric>

namespace topk {

namespace {

class MinibatchSampler {
 public:
  MinibatchSampler(std::size_t population, std::size_t batch, std::uint64_t seed)
      : order_(population), batch_(batch == 0 || batch > population ? population : batch), rng_(seed, 0x7261696e) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    if (batch_ < order_.size()) {
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    }
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  RngStream rng_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train_policy(const TrajectoryBatch& data, PolicyParameters init, const TrainConfig& cfg,
                         const DiagnosticsSink& sink, const BehaviorDistributions* kl_reference) {
  cfg.correction.validate();
  init.validate();
  data.validate(init.dims.num_actions);
  if (data.trajectories.empty()) throw DataError("train: dataset has no trajectories");
  if (cfg.correction.kl_coefficient > 0.0 && cfg.behavior_source == BehaviorSource::recorded && !kl_reference) {
    throw ConfigError("train: KL penalty needs behavior distributions");
  }

  TrainResult result{std::move(init), std::nullopt, 0, 0.0, std::nullopt};
  PolicyParameters& params = result.params;
  OptimizerState opt_state;
  const bool estimated = cfg.behavior_source == BehaviorSource::estimated;
  if (estimated) {
    RngStream head_rng(cfg.seed, 0x68656164);
    result.behavior = BehaviorHead::random(params.dims, head_rng);
    for (int w = 0; w < cfg.behavior_warmup_steps; ++w) {
      train_behavior(data, params, *result.behavior, cfg.behavior_learning_rate);
    }
  }

  MinibatchSampler sampler(data.trajectories.size(), cfg.batch_trajectories, cfg.seed);
  double variance_sum = 0.0;
  std::optional<PolicyParameters> previous;
  try {
    for (int step = 0; step < cfg.steps; ++step) {
      TrajectoryBatch mini;
      mini.source = data.source;
      BehaviorDistributions mini_kl;
      const auto picks = sampler.next();
      mini.trajectories.reserve(picks.size());
      for (std::size_t idx : picks) {
        mini.trajectories.push_back(data.trajectories[idx]);
        if (kl_reference && !estimated) mini_kl.push_back((*kl_reference)[idx]);
      }

      StepRecord record;
      record.step = step;
      const BehaviorDistributions* kl = kl_reference && !estimated ? &mini_kl : nullptr;
      PolicyGradient pg;
      try {
        if (estimated) {
          record.behavior_log_loss =
              train_behavior(mini, params, *result.behavior, cfg.behavior_learning_rate).log_loss;
          mini = with_estimated_behavior(mini, params, *result.behavior);
          if (cfg.correction.kl_coefficient > 0.0) {
            mini_kl = estimated_behavior_distributions(mini, params, *result.behavior);
            kl = &mini_kl;
          }
        }
        pg = policy_gradient(mini, params, cfg.correction, kl);
      } catch (const InvalidArgument& e) {
        if (previous) {
          params = std::move(*previous);
          --result.steps_completed;
        }
        throw NumericalFailure("non-finite forward pass at step " + std::to_string(step) + ": " + e.what());
      }
      previous = params;
      optimizer_step(params, pg.grad, opt_state, cfg.optimizer);
      variance_sum += pg.diagnostics.weight_variance;
      record.diagnostics = std::move(pg.diagnostics);
      ++result.steps_completed;
      if (sink) sink(record);
    }
  } catch (const NumericalFailure& e) {
    result.numerical_failure = e.what();
  }
  if (result.steps_completed > 0) result.mean_weight_variance = variance_sum / result.steps_completed;
  return result;
}

}  // namespace topk
