#pragma once

#include "topk/simulator.hpp"
#include "topk/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace topk {

enum class ValueType { integer, real, boolean, text, real_list, int_list, text_list };

struct SchemaEntry {
  std::string key;
  ValueType type;
  std::string default_value;
  std::string help;
};

/// Every recognised configuration key, in snapshot order.
const std::vector<SchemaEntry>& config_schema();

/// Parsed `key = value` file. Lines starting with '#' are comments; list
/// values are comma separated. Unknown keys and ill-typed values are
/// ConfigErrors.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  /// Raw value or the schema default.
  std::string raw(const std::string& key) const;

  long long integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::string text(const std::string& key) const { return raw(key); }
  std::vector<double> real_list(const std::string& key) const;
  std::vector<long long> int_list(const std::string& key) const;
  std::vector<std::string> text_list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

enum class EvalServe { deterministic, stochastic, both };

struct ExperimentConfig {
  std::string recipe = "train";
  EnvironmentSpec env;

  BehaviorKind behavior_kind = BehaviorKind::uniform;
  double zipf_exponent = 1.0;
  double zipf_floor = 1e-4;
  std::uint64_t popularity_seed = 0;
  double stale_scale = 1.0;
  std::uint64_t stale_seed = 11;
  double stale_temperature = 1.0;
  std::string stale_checkpoint;
  std::vector<std::string> mixture_kinds;
  std::vector<double> mixture_weights;

  CorrectionConfig correction;
  PolicyConfig policy;
  ModelDims dims;
  double init_scale = 0.05;
  TrainConfig train;

  std::size_t events = 20000;
  Index eval_k = 16;
  std::vector<long long> eval_k_list;
  std::size_t eval_rollouts = 2000;
  EvalServe eval_serve = EvalServe::stochastic;

  std::uint64_t seed = 1;
  std::vector<long long> seeds;
  std::string sweep_axis;
  std::vector<std::string> sweep_values;

  std::vector<double> exploration_buckets{0.90, 0.05, 0.05};
  int exploration_base_steps = 200;

  KeyValueConfig source;

  static ExperimentConfig from(const KeyValueConfig& kv);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Canonical `key = value` listing of every resolved setting.
  std::string snapshot() const;
  std::uint64_t hash() const { return fnv1a(snapshot()); }

  /// Seeds for multi-seed recipes: `seeds` when set, otherwise {seed}.
  std::vector<std::uint64_t> seed_list() const;

  /// Copy with one key overridden (re-validated).
  ExperimentConfig with(const std::string& key, const std::string& value) const;
};

/// Behavior policy described by the config; `num_actions` comes from the environment.
BehaviorPolicySpec make_behavior(const ExperimentConfig& cfg);

std::string to_string(ServeMode mode);
ServeMode parse_serve_mode(std::string_view text);

}  // namespace topk
