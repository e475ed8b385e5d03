#include "topk/grad_engine.hpp"

#include <algorithm>
#include <numeric>

namespace topk {

std::vector<ActionId> Trajectory::actions() const {
  std::vector<ActionId> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.action);
  return out;
}

std::vector<double> Trajectory::rewards() const {
  std::vector<double> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.reward);
  return out;
}

std::size_t TrajectoryBatch::num_events() const {
  std::size_t total = 0;
  for (const auto& tr : trajectories) total += tr.events.size();
  return total;
}

void TrajectoryBatch::validate(Index num_actions) const {
  for (const auto& tr : trajectories) {
    if (tr.events.empty()) throw DataError("trajectory " + std::to_string(tr.id) + " is empty");
    for (const auto& e : tr.events) {
      if (e.action < 0 || e.action >= num_actions) {
        throw DataError("trajectory " + std::to_string(tr.id) + ": action " + std::to_string(e.action) +
                        " out of range");
      }
      if (!std::isfinite(e.reward)) throw DataError("trajectory " + std::to_string(tr.id) + ": non-finite reward");
      if (!(e.behavior_prob > 0.0 && e.behavior_prob <= 1.0)) {
        throw DataError("trajectory " + std::to_string(tr.id) + ": behavior probability outside (0, 1]");
      }
    }
  }
}

std::string to_string(CorrectionMode mode) {
  switch (mode) {
    case CorrectionMode::none: return "none";
    case CorrectionMode::standard: return "standard";
    case CorrectionMode::topk: return "topk";
  }
  return "?";
}

CorrectionMode parse_correction_mode(std::string_view text) {
  if (text == "none") return CorrectionMode::none;
  if (text == "standard") return CorrectionMode::standard;
  if (text == "topk") return CorrectionMode::topk;
  throw ConfigError("unknown correction mode '" + std::string(text) + "'");
}

void CorrectionConfig::validate() const {
  if (k < 1) throw ConfigError("correction: K must be at least 1");
  if (!(cap > 0.0)) throw ConfigError("correction: cap must be positive");
  if (!(kl_coefficient >= 0.0)) throw ConfigError("correction: KL coefficient must be non-negative");
  if (!(discount >= 0.0 && discount <= 1.0)) throw ConfigError("correction: discount must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("correction: temperature must be positive");
  if (sampled_negatives < 0) throw ConfigError("correction: sampled_negatives must be non-negative");
}

std::vector<double> discounted_returns(std::span<const double> rewards, double discount) {
  require(discount >= 0.0 && discount <= 1.0, "discounted_returns: discount must lie in [0, 1]");
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + discount * acc;
    out[t] = acc;
  }
  return out;
}

double importance_weight(double pi, double beta) {
  if (beta == 0.0) {
    throw NumericalFailure("importance_weight: behavior probability is zero for a logged action");
  }
  require(beta > 0.0, "importance_weight: negative behavior probability");
  return pi / beta;
}

std::vector<double> normalize_weights(std::span<const double> weights) {
  require(!weights.empty(), "normalize_weights: empty batch");
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "normalize_weights: negative weight");
    total += w;
  }
  require(total > 0.0, "normalize_weights: all weights are zero");
  std::vector<double> out(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = weights[i] / total;
  return out;
}

double alpha_prob(double pi, int k) {
  require(pi >= 0.0 && pi <= 1.0, "alpha_prob: pi must lie in [0, 1]");
  require(k >= 1, "alpha_prob: K must be at least 1");
  // 1 - (1 - pi)^K without cancellation for small pi.
  return -std::expm1(static_cast<double>(k) * std::log1p(-pi));
}

double lambda_multiplier(double pi, int k) {
  require(pi >= 0.0 && pi <= 1.0, "lambda_multiplier: pi must lie in [0, 1]");
  require(k >= 1, "lambda_multiplier: K must be at least 1");
  if (k == 1) return 1.0;
  return static_cast<double>(k) * std::pow(1.0 - pi, k - 1);
}

EventWeights compute_event_weights(const TrajectoryBatch& batch, const PolicyParameters& params,
                                   const CorrectionConfig& cfg) {
  cfg.validate();
  batch.validate(params.dims.num_actions);
  const std::size_t n_events = batch.num_events();
  require(n_events > 0, "policy_gradient: empty batch");

  EventWeights w;
  w.pi.reserve(n_events);
  w.raw.reserve(n_events);
  w.capped.reserve(n_events);
  w.lambda.reserve(n_events);
  w.returns.reserve(n_events);

  for (const auto& tr : batch.trajectories) {
    const auto actions = tr.actions();
    const auto rewards = tr.rewards();
    const auto states = prefix_states(actions, params);
    const auto returns = discounted_returns(rewards, cfg.discount);
    for (std::size_t t = 0; t < tr.events.size(); ++t) {
      const auto& e = tr.events[t];
      const double pi = policy_probs(states[t], params, cfg.temperature)[e.action];
      w.pi.push_back(pi);
      w.returns.push_back(returns[t]);
      if (cfg.mode == CorrectionMode::none) {
        w.raw.push_back(1.0);
        w.capped.push_back(1.0);
      } else {
        const double omega = importance_weight(pi, e.behavior_prob);
        w.raw.push_back(omega);
        if (omega > cfg.cap) ++w.capped_count;
        w.capped.push_back(cap_weight(omega, cfg.cap));
      }
      w.lambda.push_back(cfg.mode == CorrectionMode::topk ? lambda_multiplier(pi, cfg.k) : 1.0);
    }
  }

  // NIS divides by the batch sum of capped weights; otherwise average over N.
  std::vector<double> scaled;
  if (cfg.nis) {
    scaled = normalize_weights(w.capped);
  } else {
    scaled.resize(n_events);
    for (std::size_t i = 0; i < n_events; ++i) scaled[i] = w.capped[i] / static_cast<double>(n_events);
  }
  w.coefficient.resize(n_events);
  for (std::size_t i = 0; i < n_events; ++i) w.coefficient[i] = scaled[i] * w.lambda[i] * w.returns[i];
  return w;
}

namespace {

std::uint64_t negative_stream(std::uint64_t trajectory_id, std::size_t t) {
  return mix64(trajectory_id) ^ static_cast<std::uint64_t>(t);
}

/// Shared forward pass; accumulates the gradient into `grad` when non-null.
/// The objective is sum_t coeff_t log pi(a_t|s_t) - (kl / N) sum_t KL(beta_t || pi(s_t)).
double forward_backward(const TrajectoryBatch& batch, const PolicyParameters& params,
                        std::span<const double> coefficients, const CorrectionConfig& cfg,
                        const BehaviorDistributions* kl_reference, double kl_coefficient,
                        GradientAccumulator* grad) {
  const Index n_actions = params.dims.num_actions;
  const double temp = cfg.temperature;
  const std::size_t n_events = batch.num_events();
  require(coefficients.size() == n_events, "surrogate: coefficient count does not match the batch");
  const bool use_kl = kl_coefficient > 0.0;
  if (use_kl) {
    require(kl_reference != nullptr, "surrogate: KL penalty requires behavior distributions");
    require(kl_reference->size() == batch.trajectories.size(), "surrogate: behavior distributions misaligned");
  }
  const double kl_scale = use_kl ? kl_coefficient / static_cast<double>(n_events) : 0.0;

  double objective = 0.0;
  std::size_t flat = 0;
  for (std::size_t traj = 0; traj < batch.trajectories.size(); ++traj) {
    const auto& tr = batch.trajectories[traj];
    const std::size_t len = tr.events.size();
    if (use_kl) require((*kl_reference)[traj].size() == len, "surrogate: behavior distributions misaligned");

    std::vector<CfnStep> steps;
    steps.reserve(len > 0 ? len - 1 : 0);
    Vec s = Vec::Zero(params.dims.state_dim);
    std::vector<Vec> states;
    states.reserve(len);
    for (std::size_t t = 0; t < len; ++t) {
      states.push_back(s);
      if (t + 1 < len) {
        steps.push_back(cfn_forward(s, tr.events[t].action, params));
        s = steps.back().next;
      }
    }

    std::vector<Vec> d_state;
    if (grad) d_state.assign(len, Vec::Zero(params.dims.state_dim));

    for (std::size_t t = 0; t < len; ++t, ++flat) {
      const ActionId a = tr.events[t].action;
      const Vec logits = params.V.transpose() * states[t] / temp;
      const double lse = log_sum_exp(logits);
      Vec d_logits;
      if (grad) d_logits = Vec::Zero(n_actions);

      const double c = coefficients[flat];
      if (c != 0.0) {
        if (cfg.sampled_negatives > 0) {
          RngStream rng(cfg.negative_seed, negative_stream(tr.id, t));
          const auto negatives = draw_negatives(a, n_actions, cfg.sampled_negatives, rng);
          const auto sampled = sampled_softmax_logits(states[t], a, negatives, params, temp);
          const Vec o = sampled.corrected();
          objective += c * (o[0] - log_sum_exp(o));
          if (grad) {
            const Vec p = softmax(o);
            for (std::size_t j = 0; j < sampled.actions.size(); ++j) {
              const double indicator = j == 0 ? 1.0 : 0.0;
              d_logits[sampled.actions[j]] += c * (indicator - p[static_cast<Index>(j)]);
            }
          }
        } else {
          objective += c * (logits[a] - lse);
          if (grad) {
            const Vec p = (logits.array() - lse).exp();
            d_logits -= c * p;
            d_logits[a] += c;
          }
        }
      }

      if (use_kl) {
        const Vec& beta = (*kl_reference)[traj][t];
        require_same_size(beta.size(), n_actions, "KL penalty");
        double kl = 0.0;
        for (Index j = 0; j < n_actions; ++j) {
          if (beta[j] > 0.0) kl += beta[j] * (std::log(beta[j]) - (logits[j] - lse));
        }
        objective -= kl_scale * kl;
        if (grad) {
          const Vec p = (logits.array() - lse).exp();
          d_logits -= kl_scale * (p - beta);
        }
      }

      if (grad) {
        // logits = V^T s / T
        grad->V.noalias() += states[t] * (d_logits.transpose() / temp);
        d_state[t].noalias() += params.V * d_logits / temp;
      }
    }

    if (!grad) continue;

    // Backpropagation through time: s_{t+1} = z * tanh(s_t) + i * tanh(W_a u).
    Vec carry = Vec::Zero(params.dims.state_dim);
    for (std::size_t t = len; t-- > 1;) {
      const Vec ds = d_state[t] + carry;
      const CfnStep& st = steps[t - 1];
      const ActionId a = tr.events[t - 1].action;
      const auto u = params.U.col(a);
      const Vec tanh_prev = st.prev.array().tanh();
      const Vec d_z = ds.cwiseProduct(tanh_prev);
      const Vec d_i = ds.cwiseProduct(st.input_tanh);
      const Vec d_pre_z = d_z.array() * st.z.array() * (1.0 - st.z.array());
      const Vec d_pre_i = d_i.array() * st.i.array() * (1.0 - st.i.array());
      const Vec d_pre_a = ds.array() * st.i.array() * (1.0 - st.input_tanh.array().square());

      grad->U_z.noalias() += d_pre_z * st.prev.transpose();
      grad->U_i.noalias() += d_pre_i * st.prev.transpose();
      grad->W_z.noalias() += d_pre_z * u.transpose();
      grad->W_i.noalias() += d_pre_i * u.transpose();
      grad->W_a.noalias() += d_pre_a * u.transpose();
      grad->b_z.col(0) += d_pre_z;
      grad->b_i.col(0) += d_pre_i;
      grad->U.col(a).noalias() +=
          params.W_z.transpose() * d_pre_z + params.W_i.transpose() * d_pre_i + params.W_a.transpose() * d_pre_a;

      carry = ds.cwiseProduct(st.z).cwiseProduct((1.0 - tanh_prev.array().square()).matrix()) +
              params.U_z.transpose() * d_pre_z + params.U_i.transpose() * d_pre_i;
    }
  }
  return objective;
}

void check_gradient_finite(const GradientAccumulator& g) {
  g.for_each([](std::string_view name, const Mat& m) {
    if (!m.allFinite()) throw NumericalFailure("non-finite gradient in tensor " + std::string(name));
  });
}

}  // namespace

PolicyGradient policy_gradient(const TrajectoryBatch& batch, const PolicyParameters& params,
                               const CorrectionConfig& cfg, const BehaviorDistributions* kl_reference) {
  params.validate();
  const EventWeights w = compute_event_weights(batch, params, cfg);

  PolicyGradient out{GradientAccumulator(params.dims), {}};
  out.diagnostics.objective =
      forward_backward(batch, params, w.coefficient, cfg, kl_reference, cfg.kl_coefficient, &out.grad);
  check_gradient_finite(out.grad);

  auto& d = out.diagnostics;
  const auto stats = mean_var(w.capped);
  d.weight_mean = stats.mean;
  d.weight_variance = stats.variance;
  d.weight_max = *std::max_element(w.capped.begin(), w.capped.end());
  d.capped_fraction = static_cast<double>(w.capped_count) / static_cast<double>(w.capped.size());
  double sum = 0.0, sum_sq = 0.0;
  for (double x : w.capped) {
    sum += x;
    sum_sq += x * x;
  }
  d.effective_sample_size = sum_sq > 0.0 ? sum * sum / sum_sq : 0.0;
  out.grad.for_each([&](std::string_view name, const Mat& m) { d.gradient_norms.emplace_back(name, m.norm()); });
  return out;
}

GradientAccumulator kl_penalty_gradient(const TrajectoryBatch& batch, const PolicyParameters& params,
                                        const BehaviorDistributions& behavior, double coefficient,
                                        double temperature) {
  require(coefficient >= 0.0, "kl_penalty_gradient: coefficient must be non-negative");
  batch.validate(params.dims.num_actions);
  GradientAccumulator grad(params.dims);
  if (coefficient == 0.0) return grad;
  CorrectionConfig cfg;
  cfg.temperature = temperature;
  const std::vector<double> zeros(batch.num_events(), 0.0);
  forward_backward(batch, params, zeros, cfg, &behavior, coefficient, &grad);
  check_gradient_finite(grad);
  return grad;
}

double surrogate_objective(const TrajectoryBatch& batch, const PolicyParameters& params,
                           std::span<const double> coefficients, const CorrectionConfig& cfg,
                           const BehaviorDistributions* kl_reference) {
  return forward_backward(batch, params, coefficients, cfg, kl_reference, cfg.kl_coefficient, nullptr);
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport finite_difference_check(const PolicyParameters& params, const TrajectoryBatch& batch,
                                        const CorrectionConfig& cfg, double epsilon,
                                        const GradientAccumulator* claimed,
                                        const BehaviorDistributions* kl_reference) {
  require(epsilon >= 1e-7 && epsilon <= 1e-3, "finite_difference_check: epsilon must lie in [1e-7, 1e-3]");
  const EventWeights w = compute_event_weights(batch, params, cfg);

  GradientAccumulator analytic(params.dims);
  if (claimed) {
    require(claimed->dims == params.dims, "finite_difference_check: claimed gradient has wrong dimensions");
    analytic = *claimed;
  } else {
    forward_backward(batch, params, w.coefficient, cfg, kl_reference, cfg.kl_coefficient, &analytic);
  }

  GradCheckReport report;
  PolicyParameters probe = params;
  for (auto name : PolicyTensors::kTensorNames) {
    Mat& entry = probe.tensor(name);
    const Mat& g = analytic.tensor(name);
    double tensor_worst = 0.0;
    for (Index c = 0; c < entry.cols(); ++c) {
      for (Index r = 0; r < entry.rows(); ++r) {
        const double original = entry(r, c);
        entry(r, c) = original + epsilon;
        const double plus = surrogate_objective(batch, probe, w.coefficient, cfg, kl_reference);
        entry(r, c) = original - epsilon;
        const double minus = surrogate_objective(batch, probe, w.coefficient, cfg, kl_reference);
        entry(r, c) = original;
        const double numeric = (plus - minus) / (2.0 * epsilon);
        const double err = relative_error(g(r, c), numeric);
        ++report.entries_checked;
        tensor_worst = std::max(tensor_worst, err);
        if (report.worst_tensor.empty() || err > report.max_relative_error) {
          report.max_relative_error = err;
          report.worst_tensor = std::string(name);
          report.worst_row = r;
          report.worst_col = c;
          report.analytic = g(r, c);
          report.numeric = numeric;
        }
      }
    }
    report.per_tensor.emplace_back(std::string(name), tensor_worst);
  }
  return report;
}

void optimizer_step(PolicyParameters& params, const GradientAccumulator& grad, OptimizerState& state,
                    const OptimizerConfig& cfg) {
  require(cfg.learning_rate > 0.0, "optimizer_step: learning rate must be positive");
  require(grad.dims == params.dims, "optimizer_step: gradient dimensions do not match parameters");

  PolicyParameters next = params;
  if (cfg.kind == OptimizerKind::sgd) {
    next.for_each([&](std::string_view name, Mat& p) { p += cfg.learning_rate * grad.tensor(name); });
  } else {
    if (!state.first_moment) {
      state.first_moment.emplace(params.dims);
      state.second_moment.emplace(params.dims);
    }
    GradientAccumulator m = *state.first_moment;
    GradientAccumulator v = *state.second_moment;
    const long step = state.step + 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    next.for_each([&](std::string_view name, Mat& p) {
      const Mat& g = grad.tensor(name);
      Mat& mt = m.tensor(name);
      Mat& vt = v.tensor(name);
      mt = cfg.beta1 * mt + (1.0 - cfg.beta1) * g;
      vt = cfg.beta2 * vt + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      p.array() += cfg.learning_rate * (mt.array() / c1) / ((vt.array() / c2).sqrt() + cfg.epsilon);
    });
    if (!next.all_finite()) throw NumericalFailure("optimizer_step: non-finite parameter after update");
    *state.first_moment = std::move(m);
    *state.second_moment = std::move(v);
  }
  next.for_each([](std::string_view name, const Mat& p) {
    if (!p.allFinite()) throw NumericalFailure("optimizer_step: non-finite update in tensor " + std::string(name));
  });
  ++state.step;
  params = std::move(next);
}

}  // namespace topk
