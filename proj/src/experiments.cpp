#include "topk/experiments.hpp"

#include "topk/checkpoint.hpp"
#include "topk/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#ifndef TOPK_VERSION
#define TOPK_VERSION "unknown"
#endif

namespace topk {

std::string version_string() { return TOPK_VERSION; }

std::string csv_preamble(const ExperimentConfig& cfg) {
  return "# topk-reinforce " + version_string() + " config_hash=" + text::hex64(cfg.hash()) + "\n";
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned workers) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

double t_quantile_95(std::size_t dof) {
  static constexpr double kTable[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (dof == 0) return std::numeric_limits<double>::infinity();
  if (dof <= 30) return kTable[dof - 1];
  return 1.96;
}

namespace {

using text::format_double;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void guard_overwrite(const fs::path& file, bool force) {
  if (fs::exists(file) && !force) {
    throw ConfigError(file.string() + " already exists; pass --force to overwrite");
  }
}

void write_file(const fs::path& file, const std::string& body) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out << body;
  if (!out) throw DataError("write failed for " + file.string());
}

void write_snapshot(const ExperimentConfig& cfg, const fs::path& out) {
  write_file(out / "config.snapshot", "# topk-reinforce " + version_string() + "\n" + cfg.snapshot());
}

std::uint64_t eval_seed(std::uint64_t seed) { return mix64(seed ^ 0x6576616c75617465ULL); }
std::uint64_t probe_seed(std::uint64_t seed) { return mix64(seed ^ 0x70726f6265ULL); }

PolicyConfig serving_config(const ExperimentConfig& cfg, ServeMode mode) {
  PolicyConfig pc = cfg.policy;
  pc.serve_mode = mode;
  return pc;
}

std::vector<ServeMode> eval_modes(const ExperimentConfig& cfg) {
  switch (cfg.eval_serve) {
    case EvalServe::deterministic: return {ServeMode::deterministic};
    case EvalServe::stochastic: return {ServeMode::stochastic};
    case EvalServe::both: return {ServeMode::deterministic, ServeMode::stochastic};
  }
  return {};
}

double headline_metric(const EvaluationMetrics& m) { return m.exact_mean.value_or(m.mean_reward); }
double headline_stderr(const EvaluationMetrics& m) { return m.exact_stderr.value_or(m.stderr_reward); }

std::string diagnostics_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  const auto& d = r.diagnostics;
  j["step"] = r.step;
  j["objective"] = d.objective;
  j["weight_mean"] = d.weight_mean;
  j["weight_variance"] = d.weight_variance;
  j["weight_max"] = d.weight_max;
  j["capped_fraction"] = d.capped_fraction;
  j["effective_sample_size"] = d.effective_sample_size;
  nlohmann::ordered_json norms;
  for (const auto& [name, value] : d.gradient_norms) norms[name] = value;
  j["gradient_norms"] = norms;
  if (r.behavior_log_loss) j["behavior_log_loss"] = *r.behavior_log_loss;
  return j.dump();
}

TrainConfig train_config_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.correction = cfg.correction;
  tc.seed = seed;
  return tc;
}

std::optional<BehaviorDistributions> kl_reference_for(const ExperimentConfig& cfg, const TrajectoryBatch& data) {
  if (cfg.correction.kl_coefficient > 0.0 && cfg.train.behavior_source == BehaviorSource::recorded) {
    return behavior_distributions(data, make_behavior(cfg), cfg.env.num_actions);
  }
  return std::nullopt;
}

TrainResult train_on(const ExperimentConfig& cfg, const TrajectoryBatch& data, const PolicyParameters& init,
                     std::uint64_t seed, const DiagnosticsSink& sink = {}) {
  const auto kl = kl_reference_for(cfg, data);
  return train_policy(data, init, train_config_for(cfg, seed), sink, kl ? &*kl : nullptr);
}

ExperimentConfig with_mode(const ExperimentConfig& cfg, CorrectionMode mode) {
  return cfg.with("correction.mode", to_string(mode));
}

}  // namespace

PolicyParameters initial_parameters(const ExperimentConfig& cfg, std::uint64_t seed) {
  RngStream rng(seed, 0x696e6974);
  return PolicyParameters::random(cfg.dims, rng, cfg.init_scale);
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.events == 0) throw ConfigError("data.events must be positive");
  const Environment env(cfg.env);
  PipelineResult out;
  out.data = generate_logged_data(env, make_behavior(cfg), cfg.events, seed);
  out.initial = initial_parameters(cfg, seed);
  out.train = train_on(cfg, out.data, out.initial, seed);
  return out;
}

fs::path cmd_generate_data(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  if (cfg.events == 0) throw ConfigError("data.events must be positive; refusing to write an empty dataset");
  ensure_dir(out);
  const fs::path file = out / "dataset.csv";
  guard_overwrite(file, force);
  write_snapshot(cfg, out);
  const Environment env(cfg.env);
  const auto behavior = make_behavior(cfg);
  const auto batch = generate_logged_data(env, behavior, cfg.events, cfg.seed);
  std::ostringstream body;
  write_dataset(body, batch, {cfg.env.fingerprint(), cfg.seed, batch.source});
  write_file(file, body.str());
  return file;
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& out, bool force) {
  std::ifstream in(dataset);
  if (!in) throw DataError("cannot read dataset " + dataset.string());
  DatasetHeader header;
  const auto data = read_dataset(in, &header);
  if (header.env_fingerprint != cfg.env.fingerprint()) {
    throw ConfigError("dataset environment fingerprint " + fingerprint_hex(header.env_fingerprint) +
                      " does not match the config (" + fingerprint_hex(cfg.env.fingerprint()) + ")");
  }
  data.validate(cfg.env.num_actions);
  if (data.trajectories.empty()) throw DataError("dataset has no events");

  ensure_dir(out);
  const fs::path ckpt = out / "checkpoint.bin";
  guard_overwrite(ckpt, force);
  write_snapshot(cfg, out);

  std::ofstream diag(out / "diagnostics.jsonl", std::ios::binary | std::ios::trunc);
  if (!diag) throw DataError("cannot write diagnostics stream");
  auto sink = [&](const StepRecord& r) { diag << diagnostics_json(r) << '\n'; };

  TrainOutcome outcome;
  outcome.result = train_on(cfg, data, initial_parameters(cfg, cfg.seed), cfg.seed, sink);
  diag.close();
  const auto& res = outcome.result;
  save_checkpoint(ckpt, res.params, res.behavior ? &*res.behavior : nullptr);
  if (res.numerical_failure) {
    outcome.exit_code = kExitNumerical;
    outcome.message = "numerical failure after " + std::to_string(res.steps_completed) +
                      " steps: " + *res.numerical_failure + " (last good checkpoint kept)";
  } else {
    outcome.message = "trained " + std::to_string(res.steps_completed) + " steps";
  }
  return outcome;
}

std::vector<EvalRow> cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out,
                                  bool force) {
  const auto ckpt = load_checkpoint(checkpoint);
  if (ckpt.policy.dims.num_actions != cfg.env.num_actions) {
    throw ConfigError("checkpoint action count does not match the environment");
  }
  ensure_dir(out);
  const fs::path file = out / "metrics.csv";
  guard_overwrite(file, force);
  write_snapshot(cfg, out);

  const Environment env(cfg.env);
  std::vector<Index> ks;
  for (long long k : cfg.eval_k_list) ks.push_back(static_cast<Index>(k));
  if (ks.empty()) ks.push_back(cfg.eval_k);

  std::vector<EvalRow> rows;
  for (ServeMode mode : eval_modes(cfg)) {
    for (Index k : ks) {
      const auto pc = serving_config(cfg, mode);
      try {
        pc.validate(k, cfg.env.num_actions);
      } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
      }
      rows.push_back({to_string(mode), k, evaluate_policy(env, ckpt.policy, pc, k, cfg.eval_rollouts,
                                                           eval_seed(cfg.seed))});
    }
  }

  std::ostringstream csv;
  csv << csv_preamble(cfg)
      << "serve_mode,k,temperature,mean_reward_per_impression,stderr,ci95_low,ci95_high,exact_mean,exact_stderr,"
         "click_rate,mean_set_size,impressions\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    csv << r.serve_mode << ',' << r.k << ',' << format_double(cfg.policy.temperature) << ','
        << format_double(m.mean_reward) << ',' << format_double(m.stderr_reward) << ','
        << format_double(m.mean_reward - 1.96 * m.stderr_reward) << ','
        << format_double(m.mean_reward + 1.96 * m.stderr_reward) << ','
        << (m.exact_mean ? format_double(*m.exact_mean) : "") << ','
        << (m.exact_stderr ? format_double(*m.exact_stderr) : "") << ',' << format_double(m.click_rate) << ','
        << format_double(m.mean_set_size) << ',' << m.impressions << '\n';
  }
  write_file(file, csv.str());
  return rows;
}

namespace {

std::string sweep_key(const std::string& axis) {
  if (axis == "k") return "correction.k";
  if (axis == "cap") return "correction.cap";
  if (axis == "temperature") return "policy.temperature";
  if (axis == "nis") return "correction.nis";
  throw ConfigError("sweep.axis must be one of k, cap, temperature, nis");
}

std::string path_safe(std::string s) {
  for (char& c : s)
    if (c == '/' || c == ' ' || c == '^') c = '_';
  return s;
}

}  // namespace

SweepResult cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  if (cfg.sweep_axis.empty()) throw ConfigError("sweep.axis is not set");
  if (cfg.sweep_values.empty()) throw ConfigError("sweep.values is empty");
  const std::string key = sweep_key(cfg.sweep_axis);
  const auto seeds = cfg.seed_list();

  ensure_dir(out);
  guard_overwrite(out / "sweep.csv", force);
  write_snapshot(cfg, out);

  // Validate every variant up front so config errors surface before any work.
  std::vector<ExperimentConfig> variants;
  for (const auto& v : cfg.sweep_values) variants.push_back(cfg.with(key, v));

  const Environment env(cfg.env);
  SweepResult result;
  result.runs.resize(variants.size() * seeds.size());
  parallel_for(result.runs.size(), [&](std::size_t idx) {
    const std::size_t vi = idx / seeds.size();
    const std::uint64_t seed = seeds[idx % seeds.size()];
    const ExperimentConfig run_cfg = variants[vi].with("seed", std::to_string(seed));
    const auto pipeline = run_pipeline(run_cfg, seed);
    if (pipeline.train.numerical_failure) {
      throw NumericalFailure("sweep run " + cfg.sweep_values[vi] + "/seed " + std::to_string(seed) + ": " +
                             *pipeline.train.numerical_failure);
    }
    const fs::path run_dir =
        out / "runs" / (cfg.sweep_axis + "=" + path_safe(cfg.sweep_values[vi])) / ("seed=" + std::to_string(seed));
    ensure_dir(run_dir);
    save_checkpoint(run_dir / "checkpoint.bin", pipeline.train.params);
    const auto pc = serving_config(run_cfg, run_cfg.policy.serve_mode);
    const auto metrics = evaluate_policy(env, pipeline.train.params, pc, run_cfg.eval_k, run_cfg.eval_rollouts,
                                         eval_seed(seed));
    auto& run = result.runs[idx];
    run.value = cfg.sweep_values[vi];
    run.seed = seed;
    run.metric = headline_metric(metrics);
    run.metric_stderr = headline_stderr(metrics);
    run.weight_variance = pipeline.train.mean_weight_variance;
    run.click_rate = metrics.click_rate;
  });

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<double> metric, variance;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      metric.push_back(result.runs[vi * seeds.size() + si].metric);
      variance.push_back(result.runs[vi * seeds.size() + si].weight_variance);
    }
    const auto ms = mean_var(metric);
    const auto vs = mean_var(variance);
    const double n = static_cast<double>(seeds.size());
    result.summary.push_back({cfg.sweep_values[vi], seeds.size(), ms.mean, std::sqrt(ms.variance / n), vs.mean,
                              std::sqrt(vs.variance / n)});
  }

  std::ostringstream runs_csv;
  runs_csv << csv_preamble(cfg) << cfg.sweep_axis
           << ",seed,set_reward_per_impression,stderr,mean_weight_variance,click_rate\n";
  for (const auto& r : result.runs) {
    runs_csv << r.value << ',' << r.seed << ',' << format_double(r.metric) << ',' << format_double(r.metric_stderr)
             << ',' << format_double(r.weight_variance) << ',' << format_double(r.click_rate) << '\n';
  }
  write_file(out / "runs.csv", runs_csv.str());

  std::ostringstream sweep_csv;
  sweep_csv << csv_preamble(cfg) << cfg.sweep_axis
            << ",runs,set_reward_mean,set_reward_stderr,weight_variance_mean,weight_variance_stderr\n";
  for (const auto& s : result.summary) {
    sweep_csv << s.value << ',' << s.runs << ',' << format_double(s.metric_mean) << ','
              << format_double(s.metric_stderr) << ',' << format_double(s.weight_variance_mean) << ','
              << format_double(s.weight_variance_stderr) << '\n';
  }
  write_file(out / "sweep.csv", sweep_csv.str());
  return result;
}

std::vector<GradCheckRow> cmd_grad_check(const ExperimentConfig& cfg, const std::string& corrupt_tensor) {
  const Environment env(cfg.env);
  const auto behavior = make_behavior(cfg);
  const auto batch = generate_logged_data(env, behavior, 4 * static_cast<std::size_t>(cfg.env.episode_length),
                                          cfg.seed);
  RngStream rng(cfg.seed, 0x6772616463686bULL);
  const auto params = PolicyParameters::random(cfg.dims, rng, 0.5);
  const auto kl = cfg.correction.kl_coefficient > 0.0
                      ? std::optional(behavior_distributions(batch, behavior, cfg.env.num_actions))
                      : std::nullopt;

  std::vector<GradCheckRow> rows;
  for (CorrectionMode mode : {CorrectionMode::none, CorrectionMode::standard, CorrectionMode::topk}) {
    CorrectionConfig cc = cfg.correction;
    cc.mode = mode;
    GradCheckRow row{mode, {}, false};
    if (corrupt_tensor.empty()) {
      row.report = finite_difference_check(params, batch, cc, 1e-5, nullptr, kl ? &*kl : nullptr);
    } else {
      auto claimed = policy_gradient(batch, params, cc, kl ? &*kl : nullptr).grad;
      Mat& t = claimed.tensor(corrupt_tensor);
      t(0, 0) += 1.0;
      row.report = finite_difference_check(params, batch, cc, 1e-5, &claimed, kl ? &*kl : nullptr);
    }
    row.passed = row.report.max_relative_error < kGradCheckTolerance;
    rows.push_back(std::move(row));
  }
  return rows;
}

// -- recipes ---------------------------------------------------------------------

RankCdfResult rank_cdf_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Environment env(cfg.env);
  const auto behavior = make_behavior(cfg);
  const auto data = generate_logged_data(env, behavior, cfg.events, seed);
  const auto init = initial_parameters(cfg, seed);
  const auto uncorrected = train_on(with_mode(cfg, CorrectionMode::none), data, init, seed);
  const auto corrected = train_on(with_mode(cfg, CorrectionMode::standard), data, init, seed);
  for (const auto* r : {&uncorrected, &corrected}) {
    if (r->numerical_failure) throw NumericalFailure(*r->numerical_failure);
  }

  const auto probe = generate_logged_data(env, behavior, std::max<std::size_t>(2000, cfg.events / 10),
                                          probe_seed(seed));
  // Control nominations: the behavior policy's distribution at the same states.
  Vec control = Vec::Zero(cfg.env.num_actions);
  std::size_t count = 0;
  const auto dists = behavior_distributions(probe, behavior, cfg.env.num_actions);
  for (const auto& traj : dists) {
    for (std::size_t t = 1; t < traj.size(); ++t, ++count) control += traj[t];
  }
  if (count == 0) throw ConfigError("rank_cdf: episodes need at least two steps");
  control /= static_cast<double>(count);

  const Index m = cfg.policy.retrieval_width == 0 ? cfg.env.num_actions : cfg.policy.retrieval_width;
  RankCdfResult out;
  out.uncorrected = rank_cdf(control, nomination_frequencies(uncorrected.params, probe, m, cfg.policy.temperature));
  out.corrected = rank_cdf(control, nomination_frequencies(corrected.params, probe, m, cfg.policy.temperature));
  out.uncorrected_outside_head = share_outside_head(out.uncorrected);
  out.corrected_outside_head = share_outside_head(out.corrected);
  return out;
}

MassSpreadResult mass_spread_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Environment env(cfg.env);
  const auto behavior = make_behavior(cfg);
  const auto data = generate_logged_data(env, behavior, cfg.events, seed);
  const auto init = initial_parameters(cfg, seed);
  const auto standard = train_on(with_mode(cfg, CorrectionMode::standard), data, init, seed);
  const auto topk = train_on(with_mode(cfg, CorrectionMode::topk), data, init, seed);
  for (const auto* r : {&standard, &topk}) {
    if (r->numerical_failure) throw NumericalFailure(*r->numerical_failure);
  }
  const auto probe = generate_logged_data(env, behavior, 2000, probe_seed(seed));
  PolicyConfig pc = cfg.policy;
  pc.serve_mode = ServeMode::stochastic;

  MassSpreadResult out;
  const auto standard_states = probe_states(probe, standard.params);
  const auto topk_states = probe_states(probe, topk.params);
  out.standard_mass = mean_policy(standard.params, standard_states, cfg.policy.temperature);
  out.topk_mass = mean_policy(topk.params, topk_states, cfg.policy.temperature);
  out.standard_set_value = set_objective(env, standard.params, pc, cfg.eval_k, standard_states);
  out.topk_set_value = set_objective(env, topk.params, pc, cfg.eval_k, topk_states);
  return out;
}

namespace {

struct BucketLogs {
  std::array<TrajectoryBatch, 3> buckets;
};

/// Logs `n_events` of production traffic; trajectory j goes to the bucket
/// chosen by exact proportional allocation.
BucketLogs log_production_traffic(const Environment& env, const PolicyParameters& production,
                                  const PolicyConfig& policy, const std::array<double, 3>& weights,
                                  std::size_t n_events, std::uint64_t seed) {
  const auto length = static_cast<std::size_t>(env.spec().episode_length);
  const std::size_t n_traj = std::max<std::size_t>(1, n_events / length);
  std::array<std::size_t, 3> quota{};
  quota[1] = static_cast<std::size_t>(std::floor(weights[1] * static_cast<double>(n_traj)));
  quota[2] = static_cast<std::size_t>(std::floor(weights[2] * static_cast<double>(n_traj)));
  quota[0] = n_traj - quota[1] - quota[2];

  BucketLogs logs;
  const RngStream root(seed, 0x6c6f67);
  std::uint64_t id = 0;
  for (int b = 0; b < 3; ++b) {
    const bool stochastic = b == 2;
    logs.buckets[b].source = stochastic ? "production-stochastic" : "production-deterministic";
    for (std::size_t j = 0; j < quota[b]; ++j, ++id) {
      RngStream rng = root.split(id);
      auto session = env.start(rng);
      Vec s = Vec::Zero(production.dims.state_dim);
      Trajectory tr{id, {}};
      for (std::size_t t = 0; t < length; ++t) {
        ActionId a = 0;
        double prob = 1.0;
        if (stochastic) {
          const Index m = policy.retrieval_width == 0 ? production.dims.num_actions : policy.retrieval_width;
          const auto candidates = topk_retrieve(s, production, m);
          const Vec p = restricted_softmax(s, production, candidates, policy.temperature);
          const Index pick = sample_categorical(p, rng);
          a = candidates[static_cast<std::size_t>(pick)];
          prob = p[pick];
        } else {
          a = topk_retrieve(s, production, 1).front();
        }
        const ActionId served[] = {a};
        const auto response = env.respond(session, served, rng);
        tr.events.push_back({static_cast<int>(t), a, response.reward, prob});
        env.advance(session, response);
        s = cfn_forward(s, a, production).next;
      }
      logs.buckets[b].trajectories.push_back(std::move(tr));
    }
  }
  return logs;
}

TrajectoryBatch concat(const TrajectoryBatch& a, const TrajectoryBatch& b) {
  TrajectoryBatch out;
  out.source = a.source + "+" + b.source;
  out.trajectories = a.trajectories;
  out.trajectories.insert(out.trajectories.end(), b.trajectories.begin(), b.trajectories.end());
  return out;
}

}  // namespace

ExplorationResult exploration_split_run(const ExperimentConfig& cfg, const std::array<double, 3>& buckets,
                                        std::span<const std::uint64_t> seeds) {
  double total = 0.0;
  for (double b : buckets) {
    if (b < 0.0) throw ConfigError("exploration: bucket weights must be non-negative");
    total += b;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("exploration: bucket weights must sum to 1");
  if (seeds.empty()) throw ConfigError("exploration: no seeds");

  const Environment env(cfg.env);
  const auto standard_cfg = with_mode(cfg, CorrectionMode::standard);
  ExplorationResult result;
  result.per_seed.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t idx) {
    const std::uint64_t seed = seeds[idx];
    // Production model: trained on logs of the configured behavior policy.
    const auto warm = generate_logged_data(env, make_behavior(cfg), cfg.events, seed);
    auto base_cfg = standard_cfg;
    base_cfg.train.steps = cfg.exploration_base_steps;
    auto production = train_on(base_cfg, warm, initial_parameters(cfg, seed), seed);
    if (production.numerical_failure) throw NumericalFailure(*production.numerical_failure);

    const auto logs = log_production_traffic(env, production.params, cfg.policy, buckets, cfg.events, seed);
    const auto deterministic_data = concat(logs.buckets[0], logs.buckets[1]);
    const auto stochastic_data = concat(logs.buckets[0], logs.buckets[2]);
    const auto det_model = train_on(standard_cfg, deterministic_data, production.params, seed);
    const auto sto_model = train_on(standard_cfg, stochastic_data, production.params, seed);
    for (const auto* r : {&det_model, &sto_model}) {
      if (r->numerical_failure) throw NumericalFailure(*r->numerical_failure);
    }
    const auto pc = serving_config(cfg, cfg.policy.serve_mode);
    auto& out = result.per_seed[idx];
    out.seed = seed;
    for (int b = 0; b < 3; ++b) out.bucket_events[b] = logs.buckets[b].num_events();
    out.deterministic_coverage = state_action_coverage(logs.buckets[1]);
    out.stochastic_coverage = state_action_coverage(logs.buckets[2]);
    out.deterministic_metric =
        headline_metric(evaluate_policy(env, det_model.params, pc, cfg.eval_k, cfg.eval_rollouts, eval_seed(seed)));
    out.stochastic_metric =
        headline_metric(evaluate_policy(env, sto_model.params, pc, cfg.eval_k, cfg.eval_rollouts, eval_seed(seed)));
  });

  std::vector<double> deltas;
  for (const auto& r : result.per_seed) deltas.push_back(r.stochastic_metric - r.deterministic_metric);
  const auto stats = mean_var(deltas);
  result.mean_delta = stats.mean;
  const double n = static_cast<double>(deltas.size());
  const double half = deltas.size() > 1 ? t_quantile_95(deltas.size() - 1) * std::sqrt(stats.variance / n) : 0.0;
  result.ci_low = stats.mean - half;
  result.ci_high = stats.mean + half;
  return result;
}

void run_recipe(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  if (cfg.recipe == "k_sweep" || cfg.recipe == "cap_sweep") {
    cmd_sweep(cfg, out, force);
    return;
  }
  ensure_dir(out);
  if (cfg.recipe == "train") {
    cmd_generate_data(cfg, out, force);
    const auto trained = cmd_train(cfg, out / "dataset.csv", out, force);
    if (trained.exit_code != kExitOk) throw NumericalFailure(trained.message);
    cmd_evaluate(cfg, out / "checkpoint.bin", out, force);
    return;
  }

  const fs::path summary_file = out / "summary.csv";
  guard_overwrite(summary_file, force);
  write_snapshot(cfg, out);
  const auto seeds = cfg.seed_list();

  if (cfg.recipe == "rank_cdf") {
    std::vector<RankCdfResult> results(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t i) { results[i] = rank_cdf_experiment(cfg, seeds[i]); });
    std::ostringstream table, summary;
    table << csv_preamble(cfg) << "seed,rank,action,control_cdf,uncorrected_cdf,corrected_cdf\n";
    summary << csv_preamble(cfg) << "seed,uncorrected_outside_top_decile,corrected_outside_top_decile,ratio\n";
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& r = results[i];
      for (std::size_t j = 0; j < r.uncorrected.size(); ++j) {
        table << seeds[i] << ',' << r.uncorrected[j].rank << ',' << r.uncorrected[j].action << ','
              << format_double(r.uncorrected[j].control_cdf) << ',' << format_double(r.uncorrected[j].test_cdf)
              << ',' << format_double(r.corrected[j].test_cdf) << '\n';
      }
      summary << seeds[i] << ',' << format_double(r.uncorrected_outside_head) << ','
              << format_double(r.corrected_outside_head) << ','
              << format_double(r.corrected_outside_head / r.uncorrected_outside_head) << '\n';
    }
    write_file(out / "rank_cdf.csv", table.str());
    write_file(summary_file, summary.str());
  } else if (cfg.recipe == "mass_spread") {
    std::vector<MassSpreadResult> results(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t i) { results[i] = mass_spread_experiment(cfg, seeds[i]); });
    std::ostringstream table, summary;
    table << csv_preamble(cfg) << "seed,action,reward,standard_mass,topk_mass\n";
    summary << csv_preamble(cfg)
            << "seed,standard_max_mass,topk_actions_over_0.2,standard_set_value,topk_set_value\n";
    const Environment env(cfg.env);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& r = results[i];
      for (Index a = 0; a < r.standard_mass.size(); ++a) {
        table << seeds[i] << ',' << a << ',' << format_double(env.rewards()[a]) << ','
              << format_double(r.standard_mass[a]) << ',' << format_double(r.topk_mass[a]) << '\n';
      }
      summary << seeds[i] << ',' << format_double(r.standard_mass.maxCoeff()) << ','
              << (r.topk_mass.array() >= 0.2).count() << ',' << format_double(r.standard_set_value) << ','
              << format_double(r.topk_set_value) << '\n';
    }
    write_file(out / "mass.csv", table.str());
    write_file(summary_file, summary.str());
  } else if (cfg.recipe == "exploration") {
    const std::array<double, 3> buckets{cfg.exploration_buckets[0], cfg.exploration_buckets[1],
                                        cfg.exploration_buckets[2]};
    const auto r = exploration_split_run(cfg, buckets, seeds);
    std::ostringstream table;
    table << csv_preamble(cfg)
          << "seed,bucket1_events,bucket2_events,bucket3_events,deterministic_coverage,stochastic_coverage,"
             "deterministic_trained_metric,stochastic_trained_metric,delta\n";
    for (const auto& s : r.per_seed) {
      table << s.seed << ',' << s.bucket_events[0] << ',' << s.bucket_events[1] << ',' << s.bucket_events[2] << ','
            << s.deterministic_coverage << ',' << s.stochastic_coverage << ','
            << format_double(s.deterministic_metric) << ',' << format_double(s.stochastic_metric) << ','
            << format_double(s.stochastic_metric - s.deterministic_metric) << '\n';
    }
    write_file(out / "exploration.csv", table.str());
    std::ostringstream summary;
    summary << csv_preamble(cfg) << "seeds,mean_delta,ci95_low,ci95_high\n"
            << r.per_seed.size() << ',' << format_double(r.mean_delta) << ',' << format_double(r.ci_low) << ','
            << format_double(r.ci_high) << '\n';
    write_file(summary_file, summary.str());
  } else {
    throw ConfigError("unknown recipe '" + cfg.recipe + "'");
  }
}

}  // namespace topk
