#include "topk/simulator.hpp"

#include "topk/text.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace topk {

std::string to_string(EnvKind kind) { return kind == EnvKind::stateless ? "stateless" : "sequential"; }

EnvKind parse_env_kind(std::string_view text) {
  if (text == "stateless") return EnvKind::stateless;
  if (text == "sequential") return EnvKind::sequential;
  throw ConfigError("unknown environment kind '" + std::string(text) + "'");
}

void EnvironmentSpec::validate() const {
  if (num_actions < 2) throw ConfigError("environment: need at least two actions");
  if (!rewards.empty()) {
    if (static_cast<Index>(rewards.size()) != num_actions) {
      throw ConfigError("environment: reward vector length does not match the action count");
    }
    for (double r : rewards) {
      if (!std::isfinite(r) || r < 0.0 || r > 1.0) throw ConfigError("environment: rewards must lie in [0, 1]");
    }
  }
  if (!std::isfinite(sharpness)) throw ConfigError("environment: sharpness must be finite");
  if (!std::isfinite(no_click_utility)) throw ConfigError("environment: no-click utility must be finite");
  if (episode_length < 1) throw ConfigError("environment: episode length must be positive");
  if (kind == EnvKind::sequential) {
    if (interest_dim < 1) throw ConfigError("environment: interest dimension must be positive");
    if (!(drift >= 0.0 && drift <= 1.0)) throw ConfigError("environment: drift must lie in [0, 1]");
  }
}

std::string EnvironmentSpec::canonical() const {
  std::ostringstream out;
  out << "kind=" << to_string(kind) << ";num_actions=" << num_actions
      << ";rewards=" << text::join(rewards, ",", text::format_double)
      << ";sharpness=" << text::format_double(sharpness)
      << ";no_click_utility=" << text::format_double(no_click_utility) << ";episode_length=" << episode_length;
  if (kind == EnvKind::sequential) {
    out << ";interest_dim=" << interest_dim << ";drift=" << text::format_double(drift)
        << ";world_seed=" << world_seed;
  }
  return out.str();
}

std::uint64_t EnvironmentSpec::fingerprint() const { return fnv1a(canonical()); }

std::string fingerprint_hex(std::uint64_t fp) { return text::hex64(fp); }

Environment::Environment(EnvironmentSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const Index n = spec_.num_actions;
  RngStream world(spec_.world_seed, 0);
  if (!spec_.rewards.empty()) {
    rewards_ = Eigen::Map<const Vec>(spec_.rewards.data(), n);
  } else if (spec_.kind == EnvKind::stateless) {
    rewards_ = Vec::LinSpaced(n, 0.1, 1.0);
  } else {
    rewards_.resize(n);
    for (Index a = 0; a < n; ++a) rewards_[a] = world.uniform(0.1, 1.0);
  }
  if (spec_.kind == EnvKind::sequential) {
    items_.resize(spec_.interest_dim, n);
    fill_uniform(items_, 1.0, world);
    for (Index a = 0; a < n; ++a) items_.col(a).normalize();
  }
}

Environment::Session Environment::start(RngStream& rng) const {
  Session session;
  if (spec_.kind == EnvKind::sequential) {
    session.interest.resize(spec_.interest_dim);
    do {
      fill_uniform(session.interest, 1.0, rng);
    } while (session.interest.norm() < 1e-6);
    session.interest.normalize();
  }
  return session;
}

Vec Environment::utilities(const Session& session) const {
  if (spec_.kind == EnvKind::stateless) return spec_.sharpness * rewards_;
  return spec_.sharpness * (items_.transpose() * session.interest);
}

Vec Environment::choice_probs(const Session& session, std::span<const ActionId> served) const {
  const Vec u = utilities(session);
  Vec logits(static_cast<Index>(served.size()) + 1);
  for (std::size_t j = 0; j < served.size(); ++j) {
    require(served[j] >= 0 && served[j] < num_actions(), "environment: served action out of range");
    logits[static_cast<Index>(j)] = u[served[j]];
  }
  logits[logits.size() - 1] = spec_.no_click_utility;
  return softmax(logits);
}

double Environment::set_value(const Session& session, std::span<const ActionId> served) const {
  const Vec p = choice_probs(session, served);
  double value = 0.0;
  for (std::size_t j = 0; j < served.size(); ++j) value += p[static_cast<Index>(j)] * rewards_[served[j]];
  return value;
}

Vec Environment::single_item_values(const Session& session) const {
  Vec out(num_actions());
  for (ActionId a = 0; a < num_actions(); ++a) {
    const ActionId one[] = {a};
    out[a] = set_value(session, one);
  }
  return out;
}

Environment::Response Environment::respond(const Session& session, std::span<const ActionId> served,
                                           RngStream& rng) const {
  const Vec p = choice_probs(session, served);
  const Index pick = sample_categorical(p, rng);
  Response r;
  if (pick < static_cast<Index>(served.size())) {
    r.clicked = served[static_cast<std::size_t>(pick)];
    r.reward = rewards_[*r.clicked];
  }
  return r;
}

void Environment::advance(Session& session, const Response& response) const {
  ++session.t;
  if (spec_.kind == EnvKind::sequential && response.clicked) {
    session.interest = (1.0 - spec_.drift) * session.interest + spec_.drift * items_.col(*response.clicked);
    const double norm = session.interest.norm();
    if (norm > 1e-12) session.interest /= norm;
  }
}

// -- behavior policies ---------------------------------------------------------

std::string to_string(BehaviorKind kind) {
  switch (kind) {
    case BehaviorKind::uniform: return "uniform";
    case BehaviorKind::zipf: return "zipf";
    case BehaviorKind::stale: return "stale";
    case BehaviorKind::mixture: return "mixture";
  }
  return "?";
}

BehaviorKind parse_behavior_kind(std::string_view text) {
  if (text == "uniform") return BehaviorKind::uniform;
  if (text == "zipf") return BehaviorKind::zipf;
  if (text == "stale") return BehaviorKind::stale;
  if (text == "mixture") return BehaviorKind::mixture;
  throw ConfigError("unknown behavior kind '" + std::string(text) + "'");
}

std::string BehaviorPolicySpec::describe() const {
  switch (kind) {
    case BehaviorKind::uniform: return "uniform";
    case BehaviorKind::zipf: return "zipf(" + text::format_double(zipf_exponent) + ")";
    case BehaviorKind::stale: return "stale(T=" + text::format_double(stale_temperature) + ")";
    case BehaviorKind::mixture:
      return "mixture[" + text::join(components, "+", [](const Component& c) {
               return text::format_double(c.weight) + "*" + c.spec.describe();
             }) + "]";
  }
  return "?";
}

Vec zipf_distribution(Index num_actions, double exponent, double floor, std::span<const ActionId> popularity_order) {
  require(num_actions >= 1, "zipf_distribution: need at least one action");
  require(floor >= 0.0 && floor * static_cast<double>(num_actions) < 1.0, "zipf_distribution: floor too large");
  std::vector<ActionId> order(popularity_order.begin(), popularity_order.end());
  if (order.empty()) {
    order.resize(num_actions);
    std::iota(order.begin(), order.end(), 0);
  }
  require(static_cast<Index>(order.size()) == num_actions, "zipf_distribution: popularity order has wrong length");
  Vec ranked(num_actions);
  for (Index r = 0; r < num_actions; ++r) ranked[r] = std::pow(static_cast<double>(r + 1), -exponent);
  ranked /= ranked.sum();
  Vec out = Vec::Constant(num_actions, -1.0);
  const double head = 1.0 - floor * static_cast<double>(num_actions);
  for (Index r = 0; r < num_actions; ++r) {
    const ActionId a = order[static_cast<std::size_t>(r)];
    require(a >= 0 && a < num_actions && out[a] < 0.0, "zipf_distribution: popularity order is not a permutation");
    out[a] = head * ranked[r] + floor;
  }
  return out;
}

BehaviorPolicy::BehaviorPolicy(const BehaviorPolicySpec& spec, Index num_actions)
    : spec_(spec), num_actions_(num_actions) {
  switch (spec_.kind) {
    case BehaviorKind::uniform:
      fixed_ = Vec::Constant(num_actions, 1.0 / static_cast<double>(num_actions));
      break;
    case BehaviorKind::zipf:
      fixed_ = zipf_distribution(num_actions, spec_.zipf_exponent, spec_.zipf_floor, spec_.popularity_order);
      break;
    case BehaviorKind::stale:
      if (!spec_.stale_model) throw InvalidArgument("stale behavior policy requires a model");
      if (spec_.stale_model->dims.num_actions != num_actions) {
        throw InvalidArgument("stale behavior model has the wrong action count");
      }
      break;
    case BehaviorKind::mixture: {
      if (spec_.components.empty()) throw InvalidArgument("mixture behavior policy has no components");
      double total = 0.0;
      for (const auto& c : spec_.components) {
        if (!(c.weight > 0.0)) throw InvalidArgument("mixture weights must be positive");
        total += c.weight;
        weights_.push_back(c.weight);
        parts_.emplace_back(c.spec, num_actions);
      }
      if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("mixture weights must sum to 1");
      break;
    }
  }
  reset();
}

void BehaviorPolicy::reset() {
  if (spec_.kind == BehaviorKind::stale) state_ = Vec::Zero(spec_.stale_model->dims.state_dim);
  for (auto& p : parts_) p.reset();
  refresh();
}

void BehaviorPolicy::observe(ActionId a) {
  if (spec_.kind == BehaviorKind::stale) state_ = cfn_forward(state_, a, *spec_.stale_model).next;
  for (auto& p : parts_) p.observe(a);
  refresh();
}

void BehaviorPolicy::refresh() {
  switch (spec_.kind) {
    case BehaviorKind::uniform:
    case BehaviorKind::zipf:
      probs_ = fixed_;
      break;
    case BehaviorKind::stale:
      probs_ = policy_probs(state_, *spec_.stale_model, spec_.stale_temperature);
      break;
    case BehaviorKind::mixture:
      probs_ = Vec::Zero(num_actions_);
      for (std::size_t j = 0; j < parts_.size(); ++j) probs_ += weights_[j] * parts_[j].probs();
      break;
  }
}

TrajectoryBatch generate_logged_data(const Environment& env, const BehaviorPolicySpec& behavior,
                                     std::size_t n_events, std::uint64_t seed) {
  require(n_events >= 1, "generate_logged_data: need at least one event");
  BehaviorPolicy policy(behavior, env.num_actions());
  TrajectoryBatch batch;
  batch.source = behavior.describe();
  const RngStream root(seed, 0);
  const auto length = static_cast<std::size_t>(env.spec().episode_length);
  std::size_t produced = 0;
  for (std::uint64_t id = 0; produced < n_events; ++id) {
    RngStream rng = root.split(id);
    auto session = env.start(rng);
    policy.reset();
    Trajectory tr{id, {}};
    for (std::size_t t = 0; t < length && produced < n_events; ++t, ++produced) {
      const Vec& probs = policy.probs();
      if ((probs.array() <= 0.0).any()) {
        throw InvalidArgument("generate_logged_data: behavior policy assigns zero mass to an action");
      }
      const auto a = static_cast<ActionId>(sample_categorical(probs, rng));
      const ActionId served[] = {a};
      const auto response = env.respond(session, served, rng);
      tr.events.push_back({static_cast<int>(t), a, response.reward, probs[a]});
      env.advance(session, response);
      policy.observe(a);
    }
    batch.trajectories.push_back(std::move(tr));
  }
  return batch;
}

BehaviorDistributions behavior_distributions(const TrajectoryBatch& batch, const BehaviorPolicySpec& behavior,
                                             Index num_actions) {
  BehaviorPolicy policy(behavior, num_actions);
  BehaviorDistributions out;
  out.reserve(batch.trajectories.size());
  for (const auto& tr : batch.trajectories) {
    policy.reset();
    std::vector<Vec> dists;
    dists.reserve(tr.events.size());
    for (const auto& e : tr.events) {
      dists.push_back(policy.probs());
      policy.observe(e.action);
    }
    out.push_back(std::move(dists));
  }
  return out;
}

// -- logged data files ---------------------------------------------------------

namespace {
constexpr std::string_view kDatasetMagic = "# topk-logged-data v1";
constexpr std::string_view kDatasetColumns = "trajectory_id,step,action,reward,behavior_prob";
}  // namespace

void write_dataset(std::ostream& out, const TrajectoryBatch& batch, const DatasetHeader& header) {
  out << kDatasetMagic << " env=" << fingerprint_hex(header.env_fingerprint) << " seed=" << header.seed
      << " source=" << header.source << '\n'
      << kDatasetColumns << '\n';
  for (const auto& tr : batch.trajectories) {
    for (const auto& e : tr.events) {
      out << tr.id << ',' << e.step << ',' << e.action << ',' << text::format_double(e.reward) << ','
          << text::format_double(e.behavior_prob) << '\n';
    }
  }
}

TrajectoryBatch read_dataset(std::istream& in, DatasetHeader* header) {
  std::string line;
  if (!std::getline(in, line) || line.rfind(kDatasetMagic, 0) != 0) throw DataError("dataset: missing header line");
  DatasetHeader parsed;
  std::istringstream fields(line.substr(kDatasetMagic.size()));
  std::string field;
  while (fields >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "env") {
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), parsed.env_fingerprint, 16);
      if (ec != std::errc()) throw DataError("dataset: malformed environment fingerprint");
    } else if (key == "seed") {
      if (!text::parse_int(value, parsed.seed)) throw DataError("dataset: malformed seed");
    } else if (key == "source") {
      parsed.source = value;
    }
  }
  if (!std::getline(in, line) || line != kDatasetColumns) throw DataError("dataset: missing column header");

  TrajectoryBatch batch;
  batch.source = parsed.source;
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cols = text::split(line, ',');
    std::uint64_t id = 0;
    LoggedEvent e;
    if (cols.size() != 5 || !text::parse_int(cols[0], id) || !text::parse_int(cols[1], e.step) ||
        !text::parse_int(cols[2], e.action) || !text::parse_double(cols[3], e.reward) ||
        !text::parse_double(cols[4], e.behavior_prob)) {
      throw DataError("dataset: malformed record on line " + std::to_string(line_no));
    }
    if (batch.trajectories.empty() || batch.trajectories.back().id != id) {
      batch.trajectories.push_back({id, {}});
    }
    auto& events = batch.trajectories.back().events;
    if (e.step != static_cast<int>(events.size())) {
      throw DataError("dataset: out-of-order step on line " + std::to_string(line_no));
    }
    events.push_back(e);
  }
  if (header) *header = parsed;
  return batch;
}

// -- evaluation ----------------------------------------------------------------

std::vector<SetOutcome> served_set_distribution(std::span<const ActionId> candidates, const Vec& probs, Index k) {
  const auto m = static_cast<Index>(candidates.size());
  require(m >= 1 && m <= 20, "served_set_distribution: candidate count must lie in [1, 20]");
  require_same_size(probs.size(), m, "served_set_distribution");
  require(k >= 1, "served_set_distribution: K must be at least 1");
  const std::size_t subsets = std::size_t{1} << m;
  // f(T) = P(all K draws land in T); Mobius inversion gives P(set == T).
  std::vector<double> g(subsets, 0.0);
  for (std::size_t mask = 1; mask < subsets; ++mask) {
    const auto low = static_cast<Index>(std::countr_zero(mask));
    const std::size_t rest = mask & (mask - 1);
    // Reuse the subset mass of `rest` stored temporarily in g.
    g[mask] = g[rest] + probs[low];
  }
  for (std::size_t mask = 1; mask < subsets; ++mask) g[mask] = std::pow(std::min(1.0, g[mask]), static_cast<double>(k));
  for (Index bit = 0; bit < m; ++bit) {
    const std::size_t b = std::size_t{1} << bit;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & b) g[mask] -= g[mask ^ b];
    }
  }
  std::vector<SetOutcome> out;
  for (std::size_t mask = 1; mask < subsets; ++mask) {
    if (std::popcount(mask) > k) continue;
    const double p = g[mask];
    if (p <= 1e-15) continue;
    SetOutcome o;
    o.probability = p;
    for (Index j = 0; j < m; ++j)
      if (mask & (std::size_t{1} << j)) o.items.push_back(candidates[static_cast<std::size_t>(j)]);
    out.push_back(std::move(o));
  }
  return out;
}

std::optional<double> expected_set_value(const Environment& env, const Environment::Session& session, const Vec& s,
                                         const PolicyParameters& params, const PolicyConfig& cfg, Index k) {
  cfg.validate(k, params.dims.num_actions);
  if (cfg.serve_mode == ServeMode::deterministic) return env.set_value(session, topk_retrieve(s, params, k));
  const Index m = cfg.retrieval_width == 0 ? params.dims.num_actions : cfg.retrieval_width;
  if (m > kMaxEnumerableCandidates) return std::nullopt;
  const auto candidates = topk_retrieve(s, params, m);
  const Vec probs = restricted_softmax(s, params, candidates, cfg.temperature);
  double value = 0.0;
  for (const auto& outcome : served_set_distribution(candidates, probs, k)) {
    value += outcome.probability * env.set_value(session, outcome.items);
  }
  return value;
}

EvaluationMetrics evaluate_policy(const Environment& env, const PolicyParameters& params, const PolicyConfig& cfg,
                                  Index k, std::size_t n_rollouts, std::uint64_t seed) {
  require(n_rollouts >= 1, "evaluate_policy: need at least one rollout");
  require(params.dims.num_actions == env.num_actions(), "evaluate_policy: policy and environment disagree on |A|");
  cfg.validate(k, params.dims.num_actions);
  const RngStream root(seed, 1);
  std::vector<double> rewards, exact;
  double clicks = 0.0, set_sizes = 0.0;
  bool enumerable = true;
  for (std::size_t ep = 0; ep < n_rollouts; ++ep) {
    RngStream rng = root.split(ep);
    auto session = env.start(rng);
    Vec s = Vec::Zero(params.dims.state_dim);
    for (int t = 0; t < env.spec().episode_length; ++t) {
      if (enumerable) {
        const auto v = expected_set_value(env, session, s, params, cfg, k);
        if (v) exact.push_back(*v);
        else enumerable = false;
      }
      const auto served = serve(s, params, cfg, k, rng);
      const auto response = env.respond(session, served, rng);
      rewards.push_back(response.reward);
      set_sizes += static_cast<double>(served.size());
      if (response.clicked) clicks += 1.0;
      env.advance(session, response);
      s = cfn_forward(s, response.clicked.value_or(served.front()), params).next;
    }
  }
  EvaluationMetrics m;
  m.impressions = rewards.size();
  const auto stats = mean_var(rewards);
  m.mean_reward = stats.mean;
  m.stderr_reward = std::sqrt(stats.variance / static_cast<double>(rewards.size()));
  m.click_rate = clicks / static_cast<double>(rewards.size());
  m.mean_set_size = set_sizes / static_cast<double>(rewards.size());
  if (enumerable) {
    const auto es = mean_var(exact);
    m.exact_mean = es.mean;
    m.exact_stderr = std::sqrt(es.variance / static_cast<double>(exact.size()));
  }
  return m;
}

double set_objective(const Environment& env, const PolicyParameters& params, const PolicyConfig& cfg, Index k,
                     std::span<const Vec> states) {
  require(!states.empty(), "set_objective: no states");
  require(env.spec().kind == EnvKind::stateless, "set_objective: only defined for stateless environments");
  RngStream unused(0, 0);
  const auto session = env.start(unused);
  double total = 0.0;
  for (const auto& s : states) {
    const auto v = expected_set_value(env, session, s, params, cfg, k);
    if (!v) throw InvalidArgument("set_objective: candidate set too large to enumerate");
    total += *v;
  }
  return total / static_cast<double>(states.size());
}

std::vector<Vec> probe_states(const TrajectoryBatch& batch, const PolicyParameters& params, std::size_t max_states) {
  std::vector<Vec> out;
  for (const auto& tr : batch.trajectories) {
    const auto states = prefix_states(tr.actions(), params);
    for (std::size_t t = 1; t < states.size(); ++t) {
      out.push_back(states[t]);
      if (max_states && out.size() >= max_states) return out;
    }
  }
  return out;
}

Vec mean_policy(const PolicyParameters& params, std::span<const Vec> states, double temperature) {
  require(!states.empty(), "mean_policy: no states");
  Vec total = Vec::Zero(params.dims.num_actions);
  for (const auto& s : states) total += policy_probs(s, params, temperature);
  return total / static_cast<double>(states.size());
}

// -- nomination analysis --------------------------------------------------------

std::vector<RankCdfRow> rank_cdf(const Vec& control_freq, const Vec& test_freq) {
  require_same_size(control_freq.size(), test_freq.size(), "rank_cdf");
  const double control_total = control_freq.sum();
  const double test_total = test_freq.sum();
  require(control_total > 0.0 && test_total > 0.0, "rank_cdf: empty nomination counts");
  std::vector<ActionId> order(static_cast<std::size_t>(control_freq.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](ActionId x, ActionId y) { return control_freq[x] > control_freq[y]; });
  std::vector<RankCdfRow> rows;
  rows.reserve(order.size());
  double c = 0.0, t = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    c += control_freq[order[r]];
    t += test_freq[order[r]];
    rows.push_back({static_cast<int>(r + 1), order[r], c / control_total, t / test_total});
  }
  return rows;
}

Vec nomination_frequencies(const PolicyParameters& params, const TrajectoryBatch& probe_histories, Index m,
                           double temperature) {
  const auto states = probe_states(probe_histories, params);
  require(!states.empty(), "nomination_frequencies: no probe states");
  Vec freq = Vec::Zero(params.dims.num_actions);
  for (const auto& s : states) {
    const auto candidates = topk_retrieve(s, params, m);
    const Vec p = restricted_softmax(s, params, candidates, temperature);
    for (std::size_t j = 0; j < candidates.size(); ++j) freq[candidates[j]] += p[static_cast<Index>(j)];
  }
  return freq / static_cast<double>(states.size());
}

std::vector<RankCdfRow> nomination_rank_cdf(const PolicyParameters& control, const PolicyParameters& test,
                                            const TrajectoryBatch& probe_histories, Index m, double temperature) {
  return rank_cdf(nomination_frequencies(control, probe_histories, m, temperature),
                  nomination_frequencies(test, probe_histories, m, temperature));
}

double share_outside_head(std::span<const RankCdfRow> rows, double head_fraction) {
  require(!rows.empty(), "share_outside_head: empty table");
  const auto head = static_cast<std::size_t>(std::ceil(head_fraction * static_cast<double>(rows.size())));
  if (head == 0) return 1.0;
  return 1.0 - rows[std::min(head, rows.size()) - 1].test_cdf;
}

std::size_t state_action_coverage(const TrajectoryBatch& batch) {
  std::set<std::pair<ActionId, ActionId>> seen;
  for (const auto& tr : batch.trajectories) {
    ActionId prev = -1;
    for (const auto& e : tr.events) {
      seen.emplace(prev, e.action);
      prev = e.action;
    }
  }
  return seen.size();
}

}  // namespace topk
