#pragma once

#include "topk/grad_engine.hpp"

namespace topk {

/// Second softmax head estimating the logging policy from the shared CFN
/// state. Only V_prime is trainable here; the CFN state is read from the
/// main policy's parameters and never receives gradient from this head.
struct BehaviorHead {
  Mat V_prime;  // n x |A|

  static BehaviorHead zeros(const ModelDims& d) { return {Mat::Zero(d.state_dim, d.num_actions)}; }
  static BehaviorHead random(const ModelDims& d, RngStream& rng, double scale = 0.05);

  bool operator==(const BehaviorHead&) const = default;
};

/// softmax(V'^T s), temperature fixed at 1.
Vec behavior_probs(const Vec& s, const BehaviorHead& head);
Vec behavior_probs(const UserState& s, const BehaviorHead& head);

struct BehaviorStep {
  double log_loss = 0.0;  // mean negative log-likelihood before the step
};

/// One full-batch gradient step of maximum likelihood on V'.
BehaviorStep train_behavior(const TrajectoryBatch& batch, const PolicyParameters& params, BehaviorHead& head,
                            double learning_rate);

struct CalibrationBucket {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_predicted = 0.0;
  double empirical_frequency = 0.0;
};

struct BehaviorEvaluation {
  double log_loss = 0.0;
  /// Ten equal-width buckets over predicted probability; every (event, action)
  /// pair contributes its prediction and whether that action was logged.
  std::vector<CalibrationBucket> calibration;
};

BehaviorEvaluation behavior_eval(const BehaviorHead& head, const PolicyParameters& params,
                                 const TrajectoryBatch& heldout);

/// Copy of `batch` whose behavior probabilities come from the head.
TrajectoryBatch with_estimated_behavior(const TrajectoryBatch& batch, const PolicyParameters& params,
                                        const BehaviorHead& head);

/// Full estimated behavior distribution at every event, for the KL penalty.
BehaviorDistributions estimated_behavior_distributions(const TrajectoryBatch& batch, const PolicyParameters& params,
                                                       const BehaviorHead& head);

}  // namespace topk
