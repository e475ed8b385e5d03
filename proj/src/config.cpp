#include "topk/config.hpp"

#include "topk/checkpoint.hpp"
#include "topk/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace topk {

namespace {

const SchemaEntry* find_entry(const std::string& key) {
  for (const auto& e : config_schema())
    if (e.key == key) return &e;
  return nullptr;
}

std::string type_name(ValueType t) {
  switch (t) {
    case ValueType::integer: return "integer";
    case ValueType::real: return "real";
    case ValueType::boolean: return "boolean";
    case ValueType::text: return "text";
    case ValueType::real_list: return "list of reals";
    case ValueType::int_list: return "list of integers";
    case ValueType::text_list: return "list of names";
  }
  return "?";
}

// Reals accept "e^x" for exp(x), which keeps cap values readable.
bool parse_real(std::string_view s, double& out) {
  s = text::trim(s);
  if (s.size() > 2 && s.substr(0, 2) == "e^") {
    double x = 0.0;
    if (!text::parse_double(s.substr(2), x)) return false;
    out = std::exp(x);
    return true;
  }
  return text::parse_double(s, out);
}

bool parse_bool(std::string_view s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
    return true;
  }
  return false;
}

std::vector<std::string_view> list_items(std::string_view s) {
  std::vector<std::string_view> out;
  s = text::trim(s);
  if (s.empty()) return out;
  for (auto item : text::split(s, ',')) out.push_back(text::trim(item));
  return out;
}

void check_type(const SchemaEntry& e, const std::string& value) {
  bool ok = true;
  switch (e.type) {
    case ValueType::integer: {
      long long v;
      ok = text::parse_int(text::trim(value), v);
      break;
    }
    case ValueType::real: {
      double v;
      ok = parse_real(value, v);
      break;
    }
    case ValueType::boolean: {
      bool v;
      ok = parse_bool(text::trim(value), v);
      break;
    }
    case ValueType::text:
    case ValueType::text_list:
      break;
    case ValueType::real_list:
      for (auto item : list_items(value)) {
        double v;
        ok = ok && parse_real(item, v);
      }
      break;
    case ValueType::int_list:
      for (auto item : list_items(value)) {
        long long v;
        ok = ok && text::parse_int(item, v);
      }
      break;
  }
  if (!ok) throw ConfigError("config key '" + e.key + "' expects " + type_name(e.type) + ", got '" + value + "'");
}

}  // namespace

const std::vector<SchemaEntry>& config_schema() {
  static const std::vector<SchemaEntry> schema = {
      {"recipe", ValueType::text, "train", "train | rank_cdf | mass_spread | k_sweep | cap_sweep | exploration"},
      {"env.kind", ValueType::text, "stateless", "stateless | sequential"},
      {"env.num_actions", ValueType::integer, "10", "|A|"},
      {"env.rewards", ValueType::real_list, "", "per-action click reward; empty selects the default profile"},
      {"env.sharpness", ValueType::real, "2", "utility scale of the choice model"},
      {"env.no_click_utility", ValueType::real, "4", "utility of not clicking"},
      {"env.episode_length", ValueType::integer, "4", "steps per trajectory"},
      {"env.interest_dim", ValueType::integer, "4", "sequential: interest dimension"},
      {"env.drift", ValueType::real, "0.3", "sequential: interest drift per click"},
      {"env.world_seed", ValueType::integer, "7", "sequential: seed of item embeddings and rewards"},
      {"behavior.kind", ValueType::text, "uniform", "uniform | zipf | stale | mixture"},
      {"behavior.zipf_exponent", ValueType::real, "1", "Zipf exponent"},
      {"behavior.zipf_floor", ValueType::real, "1e-4", "mass added to every action"},
      {"behavior.popularity_seed", ValueType::integer, "0", "0 ranks actions by id; otherwise a seeded permutation"},
      {"behavior.stale_scale", ValueType::real, "1", "init scale of a generated stale model"},
      {"behavior.stale_seed", ValueType::integer, "11", "seed of a generated stale model"},
      {"behavior.stale_temperature", ValueType::real, "1", "softmax temperature of the stale model"},
      {"behavior.stale_checkpoint", ValueType::text, "", "checkpoint used as the stale model"},
      {"behavior.mixture_kinds", ValueType::text_list, "", "component kinds of a mixture"},
      {"behavior.mixture_weights", ValueType::real_list, "", "component weights of a mixture"},
      {"correction.mode", ValueType::text, "standard", "none | standard | topk"},
      {"correction.k", ValueType::integer, "16", "K of the top-K correction"},
      {"correction.cap", ValueType::real, "e^3", "importance-weight cap; inf disables"},
      {"correction.nis", ValueType::boolean, "false", "normalized importance sampling"},
      {"correction.kl_coefficient", ValueType::real, "0", "KL penalty toward the behavior policy"},
      {"correction.discount", ValueType::real, "1", "return discount"},
      {"correction.sampled_negatives", ValueType::integer, "0", "sampled-softmax negatives; 0 = full softmax"},
      {"policy.temperature", ValueType::real, "1", "softmax temperature"},
      {"policy.retrieval_width", ValueType::integer, "0", "M candidates kept at serving; 0 = all"},
      {"policy.serve_mode", ValueType::text, "stochastic", "deterministic | stochastic"},
      {"model.state_dim", ValueType::integer, "8", "n"},
      {"model.embed_dim", ValueType::integer, "8", "m"},
      {"model.init_scale", ValueType::real, "0.05", "uniform init range"},
      {"train.steps", ValueType::integer, "1000", "optimizer steps"},
      {"train.batch_size", ValueType::integer, "64", "trajectories per step; 0 = all"},
      {"train.learning_rate", ValueType::real, "0.05", "learning rate"},
      {"train.optimizer", ValueType::text, "adam", "sgd | adam"},
      {"train.behavior_source", ValueType::text, "recorded", "recorded | estimated"},
      {"train.behavior_learning_rate", ValueType::real, "1", "behavior head learning rate"},
      {"train.behavior_warmup_steps", ValueType::integer, "0", "full-batch behavior steps before training"},
      {"data.events", ValueType::integer, "20000", "logged events"},
      {"eval.k", ValueType::integer, "16", "items served per impression"},
      {"eval.k_list", ValueType::int_list, "", "evaluate several K values"},
      {"eval.rollouts", ValueType::integer, "2000", "evaluation episodes"},
      {"eval.serve_mode", ValueType::text, "stochastic", "deterministic | stochastic | both"},
      {"seed", ValueType::integer, "1", "base seed"},
      {"seeds", ValueType::int_list, "", "seeds for multi-seed recipes"},
      {"sweep.axis", ValueType::text, "", "k | cap | temperature | nis"},
      {"sweep.values", ValueType::text_list, "", "values of the sweep axis"},
      {"exploration.buckets", ValueType::real_list, "0.9,0.05,0.05", "traffic split"},
      {"exploration.base_steps", ValueType::integer, "200", "steps of the initial production model"},
  };
  return schema;
}

KeyValueConfig KeyValueConfig::parse(std::string_view body) {
  KeyValueConfig kv;
  std::size_t line_no = 0;
  for (auto line : text::split(body, '\n')) {
    ++line_no;
    line = text::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(text::trim(line.substr(0, eq)));
    if (kv.has(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    kv.set(key, std::string(text::trim(line.substr(eq + 1))));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  const SchemaEntry* e = find_entry(key);
  if (!e) throw ConfigError("unknown config key '" + key + "'");
  check_type(*e, value);
  values_[key] = value;
}

std::string KeyValueConfig::raw(const std::string& key) const {
  if (auto it = values_.find(key); it != values_.end()) return it->second;
  const SchemaEntry* e = find_entry(key);
  if (!e) throw ConfigError("unknown config key '" + key + "'");
  return e->default_value;
}

long long KeyValueConfig::integer(const std::string& key) const {
  long long v = 0;
  if (!text::parse_int(text::trim(raw(key)), v)) throw ConfigError("config key '" + key + "' is not an integer");
  return v;
}

double KeyValueConfig::real(const std::string& key) const {
  double v = 0.0;
  if (!parse_real(raw(key), v)) throw ConfigError("config key '" + key + "' is not a real");
  return v;
}

bool KeyValueConfig::boolean(const std::string& key) const {
  bool v = false;
  if (!parse_bool(text::trim(raw(key)), v)) throw ConfigError("config key '" + key + "' is not a boolean");
  return v;
}

std::vector<double> KeyValueConfig::real_list(const std::string& key) const {
  std::vector<double> out;
  const std::string value = raw(key);
  for (auto item : list_items(value)) {
    double v = 0.0;
    if (!parse_real(item, v)) throw ConfigError("config key '" + key + "' has a malformed list entry");
    out.push_back(v);
  }
  return out;
}

std::vector<long long> KeyValueConfig::int_list(const std::string& key) const {
  std::vector<long long> out;
  const std::string value = raw(key);
  for (auto item : list_items(value)) {
    long long v = 0;
    if (!text::parse_int(item, v)) throw ConfigError("config key '" + key + "' has a malformed list entry");
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> KeyValueConfig::text_list(const std::string& key) const {
  std::vector<std::string> out;
  const std::string value = raw(key);
  for (auto item : list_items(value)) out.emplace_back(item);
  return out;
}

std::string to_string(ServeMode mode) { return mode == ServeMode::deterministic ? "deterministic" : "stochastic"; }

ServeMode parse_serve_mode(std::string_view text) {
  if (text == "deterministic") return ServeMode::deterministic;
  if (text == "stochastic") return ServeMode::stochastic;
  throw ConfigError("unknown serve mode '" + std::string(text) + "'");
}

namespace {

template <typename T>
T non_negative(long long v, const char* key) {
  if (v < 0) throw ConfigError(std::string("config key '") + key + "' must be non-negative");
  return static_cast<T>(v);
}

template <typename T>
T positive(long long v, const char* key) {
  if (v <= 0) throw ConfigError(std::string("config key '") + key + "' must be positive");
  return static_cast<T>(v);
}

}  // namespace

ExperimentConfig ExperimentConfig::from(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.source = kv;
  c.recipe = kv.text("recipe");
  static const std::vector<std::string> recipes = {"train", "rank_cdf", "mass_spread", "k_sweep", "cap_sweep",
                                                   "exploration"};
  if (std::find(recipes.begin(), recipes.end(), c.recipe) == recipes.end()) {
    throw ConfigError("unknown recipe '" + c.recipe + "'");
  }

  c.env.kind = parse_env_kind(kv.text("env.kind"));
  c.env.num_actions = positive<Index>(kv.integer("env.num_actions"), "env.num_actions");
  c.env.rewards = kv.real_list("env.rewards");
  c.env.sharpness = kv.real("env.sharpness");
  c.env.no_click_utility = kv.real("env.no_click_utility");
  c.env.episode_length = positive<int>(kv.integer("env.episode_length"), "env.episode_length");
  c.env.interest_dim = positive<Index>(kv.integer("env.interest_dim"), "env.interest_dim");
  c.env.drift = kv.real("env.drift");
  c.env.world_seed = non_negative<std::uint64_t>(kv.integer("env.world_seed"), "env.world_seed");
  c.env.validate();

  c.behavior_kind = parse_behavior_kind(kv.text("behavior.kind"));
  c.zipf_exponent = kv.real("behavior.zipf_exponent");
  c.zipf_floor = kv.real("behavior.zipf_floor");
  if (!(c.zipf_floor > 0.0) || c.zipf_floor * static_cast<double>(c.env.num_actions) >= 1.0) {
    throw ConfigError("behavior.zipf_floor must be positive and below 1/|A|");
  }
  c.popularity_seed = non_negative<std::uint64_t>(kv.integer("behavior.popularity_seed"), "behavior.popularity_seed");
  c.stale_scale = kv.real("behavior.stale_scale");
  c.stale_seed = non_negative<std::uint64_t>(kv.integer("behavior.stale_seed"), "behavior.stale_seed");
  c.stale_temperature = kv.real("behavior.stale_temperature");
  if (!(c.stale_temperature > 0.0)) throw ConfigError("behavior.stale_temperature must be positive");
  c.stale_checkpoint = kv.text("behavior.stale_checkpoint");
  c.mixture_kinds = kv.text_list("behavior.mixture_kinds");
  c.mixture_weights = kv.real_list("behavior.mixture_weights");
  if (c.behavior_kind == BehaviorKind::mixture) {
    if (c.mixture_kinds.empty() || c.mixture_kinds.size() != c.mixture_weights.size()) {
      throw ConfigError("mixture behavior needs matching mixture_kinds and mixture_weights");
    }
    double total = 0.0;
    for (double w : c.mixture_weights) {
      if (!(w > 0.0)) throw ConfigError("mixture weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
    for (const auto& k : c.mixture_kinds) {
      if (parse_behavior_kind(k) == BehaviorKind::mixture) throw ConfigError("nested mixtures are not supported");
    }
  }

  c.correction.mode = parse_correction_mode(kv.text("correction.mode"));
  c.correction.k = positive<int>(kv.integer("correction.k"), "correction.k");
  c.correction.cap = kv.real("correction.cap");
  c.correction.nis = kv.boolean("correction.nis");
  c.correction.kl_coefficient = kv.real("correction.kl_coefficient");
  c.correction.discount = kv.real("correction.discount");
  c.correction.sampled_negatives =
      non_negative<Index>(kv.integer("correction.sampled_negatives"), "correction.sampled_negatives");
  if (c.correction.sampled_negatives >= c.env.num_actions) {
    throw ConfigError("correction.sampled_negatives must be below |A|");
  }

  c.policy.temperature = kv.real("policy.temperature");
  c.policy.retrieval_width = non_negative<Index>(kv.integer("policy.retrieval_width"), "policy.retrieval_width");
  c.policy.serve_mode = parse_serve_mode(kv.text("policy.serve_mode"));
  c.correction.temperature = c.policy.temperature;
  c.correction.validate();

  c.dims.state_dim = positive<Index>(kv.integer("model.state_dim"), "model.state_dim");
  c.dims.embed_dim = positive<Index>(kv.integer("model.embed_dim"), "model.embed_dim");
  c.dims.num_actions = c.env.num_actions;
  c.init_scale = kv.real("model.init_scale");
  if (!(c.init_scale >= 0.0)) throw ConfigError("model.init_scale must be non-negative");

  c.seed = non_negative<std::uint64_t>(kv.integer("seed"), "seed");
  for (long long s : kv.int_list("seeds"))
    if (s < 0) throw ConfigError("seeds must be non-negative");
  c.seeds = kv.int_list("seeds");

  c.train.correction = c.correction;
  c.train.steps = non_negative<int>(kv.integer("train.steps"), "train.steps");
  c.train.batch_trajectories = non_negative<std::size_t>(kv.integer("train.batch_size"), "train.batch_size");
  c.train.optimizer.learning_rate = kv.real("train.learning_rate");
  if (!(c.train.optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  const std::string opt = kv.text("train.optimizer");
  if (opt == "sgd") c.train.optimizer.kind = OptimizerKind::sgd;
  else if (opt == "adam") c.train.optimizer.kind = OptimizerKind::adam;
  else throw ConfigError("unknown optimizer '" + opt + "'");
  const std::string bsrc = kv.text("train.behavior_source");
  if (bsrc == "recorded") c.train.behavior_source = BehaviorSource::recorded;
  else if (bsrc == "estimated") c.train.behavior_source = BehaviorSource::estimated;
  else throw ConfigError("unknown behavior source '" + bsrc + "'");
  c.train.behavior_learning_rate = kv.real("train.behavior_learning_rate");
  if (!(c.train.behavior_learning_rate > 0.0)) throw ConfigError("train.behavior_learning_rate must be positive");
  c.train.behavior_warmup_steps =
      non_negative<int>(kv.integer("train.behavior_warmup_steps"), "train.behavior_warmup_steps");
  c.train.seed = c.seed;

  c.events = non_negative<std::size_t>(kv.integer("data.events"), "data.events");
  c.eval_k = positive<Index>(kv.integer("eval.k"), "eval.k");
  c.eval_k_list = kv.int_list("eval.k_list");
  for (long long k : c.eval_k_list)
    if (k <= 0) throw ConfigError("eval.k_list entries must be positive");
  c.eval_rollouts = positive<std::size_t>(kv.integer("eval.rollouts"), "eval.rollouts");
  const std::string serve = kv.text("eval.serve_mode");
  if (serve == "both") c.eval_serve = EvalServe::both;
  else c.eval_serve = parse_serve_mode(serve) == ServeMode::deterministic ? EvalServe::deterministic
                                                                           : EvalServe::stochastic;

  c.sweep_axis = kv.text("sweep.axis");
  c.sweep_values = kv.text_list("sweep.values");
  if (!c.sweep_axis.empty() && c.sweep_axis != "k" && c.sweep_axis != "cap" && c.sweep_axis != "temperature" &&
      c.sweep_axis != "nis") {
    throw ConfigError("sweep.axis must be one of k, cap, temperature, nis");
  }

  c.exploration_buckets = kv.real_list("exploration.buckets");
  if (c.exploration_buckets.size() != 3) throw ConfigError("exploration.buckets needs three weights");
  double total = 0.0;
  for (double b : c.exploration_buckets) {
    if (b < 0.0) throw ConfigError("exploration.buckets must be non-negative");
    total += b;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("exploration.buckets must sum to 1");
  c.exploration_base_steps = non_negative<int>(kv.integer("exploration.base_steps"), "exploration.base_steps");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from(KeyValueConfig::load(path));
}

std::string ExperimentConfig::snapshot() const {
  std::string out;
  for (const auto& e : config_schema()) out += e.key + " = " + source.raw(e.key) + "\n";
  return out;
}

std::vector<std::uint64_t> ExperimentConfig::seed_list() const {
  if (seeds.empty()) return {seed};
  std::vector<std::uint64_t> out;
  for (long long s : seeds) out.push_back(static_cast<std::uint64_t>(s));
  return out;
}

ExperimentConfig ExperimentConfig::with(const std::string& key, const std::string& value) const {
  KeyValueConfig kv = source;
  kv.set(key, value);
  return from(kv);
}

namespace {

BehaviorPolicySpec simple_behavior(BehaviorKind kind, const ExperimentConfig& cfg) {
  BehaviorPolicySpec spec;
  spec.kind = kind;
  spec.zipf_exponent = cfg.zipf_exponent;
  spec.zipf_floor = cfg.zipf_floor;
  if (kind == BehaviorKind::zipf && cfg.popularity_seed != 0) {
    std::vector<ActionId> order(static_cast<std::size_t>(cfg.env.num_actions));
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(cfg.popularity_seed, 0x706f70);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    spec.popularity_order = std::move(order);
  }
  if (kind == BehaviorKind::stale) {
    spec.stale_temperature = cfg.stale_temperature;
    if (!cfg.stale_checkpoint.empty()) {
      auto ckpt = load_checkpoint(cfg.stale_checkpoint);
      if (ckpt.policy.dims.num_actions != cfg.env.num_actions) {
        throw ConfigError("stale checkpoint action count does not match the environment");
      }
      spec.stale_model = std::make_shared<const PolicyParameters>(std::move(ckpt.policy));
    } else {
      RngStream rng(cfg.stale_seed, 0x7374616c65);
      spec.stale_model = std::make_shared<const PolicyParameters>(
          PolicyParameters::random(cfg.dims, rng, cfg.stale_scale));
    }
  }
  return spec;
}

}  // namespace

BehaviorPolicySpec make_behavior(const ExperimentConfig& cfg) {
  if (cfg.behavior_kind != BehaviorKind::mixture) return simple_behavior(cfg.behavior_kind, cfg);
  BehaviorPolicySpec spec;
  spec.kind = BehaviorKind::mixture;
  for (std::size_t j = 0; j < cfg.mixture_kinds.size(); ++j) {
    const auto kind = parse_behavior_kind(cfg.mixture_kinds[j]);
    spec.components.push_back({cfg.mixture_weights[j], simple_behavior(kind, cfg)});
  }
  return spec;
}

}  // namespace topk
