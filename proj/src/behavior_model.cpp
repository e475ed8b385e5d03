#include "topk/behavior_model.hpp"

#include <algorithm>

namespace topk {

BehaviorHead BehaviorHead::random(const ModelDims& d, RngStream& rng, double scale) {
  BehaviorHead head = zeros(d);
  fill_uniform(head.V_prime, scale, rng);
  return head;
}

Vec behavior_probs(const Vec& s, const BehaviorHead& head) {
  require_same_size(s.size(), head.V_prime.rows(), "behavior_probs");
  return softmax(head.V_prime.transpose() * s);
}

Vec behavior_probs(const UserState& s, const BehaviorHead& head) { return behavior_probs(s.s, head); }

BehaviorStep train_behavior(const TrajectoryBatch& batch, const PolicyParameters& params, BehaviorHead& head,
                            double learning_rate) {
  require(learning_rate > 0.0, "train_behavior: learning rate must be positive");
  require(head.V_prime.rows() == params.dims.state_dim && head.V_prime.cols() == params.dims.num_actions,
          "train_behavior: head dimensions do not match the policy");
  batch.validate(params.dims.num_actions);
  const std::size_t n_events = batch.num_events();
  require(n_events > 0, "train_behavior: empty batch");

  Mat grad = Mat::Zero(head.V_prime.rows(), head.V_prime.cols());
  double loss = 0.0;
  for (const auto& tr : batch.trajectories) {
    // States are plain values here, so nothing flows back into the CFN.
    const auto states = prefix_states(tr.actions(), params);
    for (std::size_t t = 0; t < tr.events.size(); ++t) {
      const ActionId a = tr.events[t].action;
      const Vec logits = head.V_prime.transpose() * states[t];
      const double lse = log_sum_exp(logits);
      loss += lse - logits[a];
      Vec residual = (logits.array() - lse).exp();
      residual[a] -= 1.0;
      grad.noalias() += states[t] * residual.transpose();
    }
  }
  const double scale = 1.0 / static_cast<double>(n_events);
  loss *= scale;
  if (!std::isfinite(loss)) throw NumericalFailure("train_behavior: non-finite log-loss");
  head.V_prime -= learning_rate * scale * grad;
  if (!head.V_prime.allFinite()) throw NumericalFailure("train_behavior: non-finite update of V_prime");
  return {loss};
}

BehaviorEvaluation behavior_eval(const BehaviorHead& head, const PolicyParameters& params,
                                 const TrajectoryBatch& heldout) {
  heldout.validate(params.dims.num_actions);
  constexpr int kBuckets = 10;
  BehaviorEvaluation out;
  out.calibration.resize(kBuckets);
  std::vector<double> hits(kBuckets, 0.0);
  std::size_t n_events = 0;
  for (const auto& tr : heldout.trajectories) {
    const auto states = prefix_states(tr.actions(), params);
    for (std::size_t t = 0; t < tr.events.size(); ++t) {
      const Vec p = behavior_probs(states[t], head);
      const ActionId logged = tr.events[t].action;
      out.log_loss -= std::log(p[logged]);
      ++n_events;
      for (Index a = 0; a < p.size(); ++a) {
        const int b = std::min(kBuckets - 1, static_cast<int>(p[a] * kBuckets));
        auto& bucket = out.calibration[b];
        ++bucket.count;
        bucket.mean_predicted += p[a];
        if (a == logged) hits[b] += 1.0;
      }
    }
  }
  if (n_events > 0) out.log_loss /= static_cast<double>(n_events);
  for (int b = 0; b < kBuckets; ++b) {
    auto& bucket = out.calibration[b];
    bucket.lower = static_cast<double>(b) / kBuckets;
    bucket.upper = static_cast<double>(b + 1) / kBuckets;
    if (bucket.count > 0) {
      bucket.mean_predicted /= static_cast<double>(bucket.count);
      bucket.empirical_frequency = hits[b] / static_cast<double>(bucket.count);
    }
  }
  return out;
}

TrajectoryBatch with_estimated_behavior(const TrajectoryBatch& batch, const PolicyParameters& params,
                                        const BehaviorHead& head) {
  TrajectoryBatch out = batch;
  for (auto& tr : out.trajectories) {
    const auto states = prefix_states(tr.actions(), params);
    for (std::size_t t = 0; t < tr.events.size(); ++t) {
      tr.events[t].behavior_prob = behavior_probs(states[t], head)[tr.events[t].action];
    }
  }
  return out;
}

BehaviorDistributions estimated_behavior_distributions(const TrajectoryBatch& batch, const PolicyParameters& params,
                                                       const BehaviorHead& head) {
  BehaviorDistributions out;
  out.reserve(batch.trajectories.size());
  for (const auto& tr : batch.trajectories) {
    const auto states = prefix_states(tr.actions(), params);
    std::vector<Vec> dists;
    dists.reserve(states.size());
    for (const auto& s : states) dists.push_back(behavior_probs(s, head));
    out.push_back(std::move(dists));
  }
  return out;
}

}  // namespace topk
