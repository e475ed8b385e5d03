#pragma once

#include "topk/numerics.hpp"

#include <array>
#include <string_view>
#include <vector>

namespace topk {

struct ModelDims {
  Index state_dim = 0;    // n
  Index embed_dim = 0;    // m
  Index num_actions = 0;  // |A|

  bool operator==(const ModelDims&) const = default;
};

/// The tensors of the CFN user-state model and the policy softmax head.
///
/// Shared layout for parameters, gradients and optimizer moments. Biases are
/// stored as n x 1 matrices so every tensor can be visited uniformly.
struct PolicyTensors {
  ModelDims dims;
  Mat U;    // input action embeddings, m x |A|
  Mat V;    // output action embeddings, n x |A|
  Mat W_a;  // n x m
  Mat U_z;  // n x n
  Mat U_i;  // n x n
  Mat W_z;  // n x m
  Mat W_i;  // n x m
  Mat b_z;  // n x 1
  Mat b_i;  // n x 1

  static constexpr std::array<std::string_view, 9> kTensorNames = {
      "U", "V", "W_a", "U_z", "U_i", "W_z", "W_i", "b_z", "b_i"};

  template <typename F>
  void for_each(F&& f) {
    f(kTensorNames[0], U);
    f(kTensorNames[1], V);
    f(kTensorNames[2], W_a);
    f(kTensorNames[3], U_z);
    f(kTensorNames[4], U_i);
    f(kTensorNames[5], W_z);
    f(kTensorNames[6], W_i);
    f(kTensorNames[7], b_z);
    f(kTensorNames[8], b_i);
  }

  template <typename F>
  void for_each(F&& f) const {
    f(kTensorNames[0], U);
    f(kTensorNames[1], V);
    f(kTensorNames[2], W_a);
    f(kTensorNames[3], U_z);
    f(kTensorNames[4], U_i);
    f(kTensorNames[5], W_z);
    f(kTensorNames[6], W_i);
    f(kTensorNames[7], b_z);
    f(kTensorNames[8], b_i);
  }

  Mat& tensor(std::string_view name);
  const Mat& tensor(std::string_view name) const;

  Index parameter_count() const;
  bool all_finite() const;
  /// Throws InvalidArgument when any tensor disagrees with `dims`.
  void check_shapes() const;

  void set_zero();

 protected:
  PolicyTensors() = default;
  explicit PolicyTensors(const ModelDims& d);
};

struct PolicyParameters : PolicyTensors {
  PolicyParameters() = default;
  explicit PolicyParameters(const ModelDims& d) : PolicyTensors(d) {}

  static PolicyParameters zeros(const ModelDims& d) { return PolicyParameters(d); }
  /// Every entry uniform in [-scale, scale], drawn in declared tensor order.
  static PolicyParameters random(const ModelDims& d, RngStream& rng, double scale = 0.05);

  /// Throws on non-finite entries or inconsistent shapes.
  void validate() const;

  /// Exact equality of dims and every entry.
  bool operator==(const PolicyParameters& other) const;
};

/// Per-tensor gradient buffers aligned with PolicyParameters.
struct GradientAccumulator : PolicyTensors {
  GradientAccumulator() = default;
  explicit GradientAccumulator(const ModelDims& d) : PolicyTensors(d) {}

  GradientAccumulator& operator+=(const GradientAccumulator& other);
  GradientAccumulator& operator*=(double s);
  double squared_norm() const;
};

struct UserState {
  Vec s;
  int t = 0;

  static UserState initial(Index n) { return {Vec::Zero(n), 0}; }
};

enum class ServeMode { deterministic, stochastic };

struct PolicyConfig {
  double temperature = 1.0;
  Index retrieval_width = 0;  // M; 0 means all actions
  ServeMode serve_mode = ServeMode::stochastic;

  void validate(Index k, Index num_actions) const;
};

// -- recurrent user-state model -------------------------------------------

/// Intermediate values of one CFN transition, kept for backpropagation.
struct CfnStep {
  Vec prev;        // s_t
  Vec z;           // update gate
  Vec i;           // input gate
  Vec input_tanh;  // tanh(W_a u_a)
  Vec next;        // s_{t+1}
};

CfnStep cfn_forward(const Vec& s, ActionId a, const PolicyParameters& params);

UserState cfn_step(const UserState& s, ActionId a, const PolicyParameters& params);

/// States s_1..s_T from s_0 = 0, one per consumed action.
std::vector<UserState> unroll(std::span<const ActionId> actions, const PolicyParameters& params);

/// States s_0..s_{T-1}: the state each action in `actions` was chosen from.
std::vector<Vec> prefix_states(std::span<const ActionId> actions, const PolicyParameters& params);

// -- policy head --------------------------------------------------------------

Vec policy_logits(const Vec& s, const PolicyParameters& params);

Vec policy_probs(const UserState& s, const PolicyParameters& params, double temperature = 1.0);
Vec policy_probs(const Vec& s, const PolicyParameters& params, double temperature = 1.0);

/// Logits over {target} followed by `negatives`, with the log expected-count
/// correction applied to the negatives.
struct SampledLogits {
  std::vector<ActionId> actions;  // actions[0] is the target
  Vec logits;                     // raw s.v_a / T
  Vec corrections;                // subtracted from logits; 0 for the target
  Vec corrected() const { return logits - corrections; }
  /// Cross-entropy of the target under the corrected logits.
  double loss() const;
};

/// Uniform proposal over A \ {target} without replacement: every negative has
/// expected count k / (|A| - 1).
SampledLogits sampled_softmax_logits(const Vec& s, ActionId target, std::span<const ActionId> negatives,
                                     const PolicyParameters& params, double temperature = 1.0);

/// k distinct uniform negatives excluding `target`.
std::vector<ActionId> draw_negatives(ActionId target, Index num_actions, Index k, RngStream& rng);

// -- retrieval and serving -----------------------------------------------------

/// Exact top-M by s.v_a, descending; ties by ascending id.
std::vector<ActionId> topk_retrieve(const Vec& s, const PolicyParameters& params, Index m);

Vec restricted_softmax(const Vec& s, const PolicyParameters& params, std::span<const ActionId> candidates,
                       double temperature = 1.0);

/// Deterministic: top-K by logit. Stochastic: K draws with replacement from the
/// restricted softmax over the top-M candidates, de-duplicated in draw order.
std::vector<ActionId> serve(const Vec& s, const PolicyParameters& params, const PolicyConfig& cfg, Index k,
                            RngStream& rng);

}  // namespace topk
