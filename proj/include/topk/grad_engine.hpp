#pragma once

#include "topk/policy_model.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace topk {

// -- logged data ---------------------------------------------------------------

struct LoggedEvent {
  int step = 0;
  ActionId action = 0;
  double reward = 0.0;
  double behavior_prob = 1.0;  // beta(a_t | s_t), in (0, 1]

  bool operator==(const LoggedEvent&) const = default;
};

struct Trajectory {
  std::uint64_t id = 0;
  std::vector<LoggedEvent> events;

  std::vector<ActionId> actions() const;
  std::vector<double> rewards() const;
  bool operator==(const Trajectory&) const = default;
};

struct TrajectoryBatch {
  std::string source;
  std::vector<Trajectory> trajectories;

  std::size_t num_events() const;
  /// Non-empty trajectories, in-range actions, finite rewards, beta in (0, 1].
  void validate(Index num_actions) const;
  bool operator==(const TrajectoryBatch&) const = default;
};

/// Full behavior distributions, one per event, aligned with a batch.
using BehaviorDistributions = std::vector<std::vector<Vec>>;

// -- correction configuration ----------------------------------------------------

enum class CorrectionMode { none, standard, topk };

std::string to_string(CorrectionMode mode);
CorrectionMode parse_correction_mode(std::string_view text);

struct CorrectionConfig {
  CorrectionMode mode = CorrectionMode::standard;
  int k = 16;
  double cap = std::exp(3.0);  // +inf disables capping
  bool nis = false;
  double kl_coefficient = 0.0;
  double discount = 1.0;
  double temperature = 1.0;
  // Sampled-softmax training path; 0 keeps the exact full softmax.
  Index sampled_negatives = 0;
  std::uint64_t negative_seed = 0;

  static constexpr double kNoCap = std::numeric_limits<double>::infinity();

  void validate() const;
};

// -- scalar pieces of the estimator ---------------------------------------------

/// R_t = sum_k gamma^k r_{t+k}.
std::vector<double> discounted_returns(std::span<const double> rewards, double discount);

/// omega = pi / beta. Throws NumericalFailure when beta is zero.
double importance_weight(double pi, double beta);

inline double cap_weight(double omega, double cap) { return std::min(omega, cap); }

/// omega_i / sum_j omega_j. Throws InvalidArgument on an all-zero batch.
std::vector<double> normalize_weights(std::span<const double> weights);

/// Probability that an item with single-draw probability pi appears among K
/// draws with replacement: 1 - (1 - pi)^K.
double alpha_prob(double pi, int k);

/// d alpha / d pi = K (1 - pi)^(K-1).
double lambda_multiplier(double pi, int k);

// -- the estimator ---------------------------------------------------------------

/// Per-event quantities behind the gradient, flattened in batch order.
struct EventWeights {
  std::vector<double> pi;         // pi_theta(a_t | s_t)
  std::vector<double> raw;        // omega before capping (1 for mode=none)
  std::vector<double> capped;     // after capping, before NIS
  std::vector<double> lambda;     // lambda_K (1 unless mode=topk)
  std::vector<double> returns;    // R_t
  std::vector<double> coefficient;  // final multiplier of log pi in the surrogate
  std::size_t capped_count = 0;
};

EventWeights compute_event_weights(const TrajectoryBatch& batch, const PolicyParameters& params,
                                   const CorrectionConfig& cfg);

struct GradientDiagnostics {
  double objective = 0.0;
  double weight_mean = 0.0;
  double weight_variance = 0.0;
  double weight_max = 0.0;
  double capped_fraction = 0.0;
  double effective_sample_size = 0.0;
  std::vector<std::pair<std::string, double>> gradient_norms;
};

struct PolicyGradient {
  GradientAccumulator grad;
  GradientDiagnostics diagnostics;
};

/// Gradient of the score-function surrogate
///   sum_t c_t log pi_theta(a_t | s_t)  [- kl * mean_t KL(beta_t || pi_theta(s_t))]
/// with c_t = w_t R_t / N (or w_t R_t under NIS), where w_t is the frozen
/// correction multiplier for `cfg.mode`. Backpropagates through the softmax
/// head and the unrolled CFN. `kl_reference` is required when
/// cfg.kl_coefficient > 0.
PolicyGradient policy_gradient(const TrajectoryBatch& batch, const PolicyParameters& params,
                               const CorrectionConfig& cfg, const BehaviorDistributions* kl_reference = nullptr);

/// Gradient of -coefficient * mean_t KL(beta(.|s_t) || pi_theta(.|s_t)).
GradientAccumulator kl_penalty_gradient(const TrajectoryBatch& batch, const PolicyParameters& params,
                                        const BehaviorDistributions& behavior, double coefficient,
                                        double temperature = 1.0);

/// Value of the frozen-coefficient surrogate at `params`.
double surrogate_objective(const TrajectoryBatch& batch, const PolicyParameters& params,
                           std::span<const double> coefficients, const CorrectionConfig& cfg,
                           const BehaviorDistributions* kl_reference = nullptr);

// -- verification ---------------------------------------------------------------

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  Index worst_row = 0;
  Index worst_col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
  /// Worst relative error per tensor, in declared order.
  std::vector<std::pair<std::string, double>> per_tensor;
};

/// Relative error |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central differences of the surrogate (weights frozen at `params`) against
/// the analytic gradient, or against `claimed` when supplied.
GradCheckReport finite_difference_check(const PolicyParameters& params, const TrajectoryBatch& batch,
                                        const CorrectionConfig& cfg, double epsilon = 1e-5,
                                        const GradientAccumulator* claimed = nullptr,
                                        const BehaviorDistributions* kl_reference = nullptr);

// -- optimizer ----------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  long step = 0;
  std::optional<GradientAccumulator> first_moment;
  std::optional<GradientAccumulator> second_moment;
};

/// Ascent step on the surrogate. Throws NumericalFailure (and leaves `params`
/// untouched) if the update would produce a non-finite entry.
void optimizer_step(PolicyParameters& params, const GradientAccumulator& grad, OptimizerState& state,
                    const OptimizerConfig& cfg);

}  // namespace topk
