#pragma once

#include "topk/grad_engine.hpp"

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace topk {

// -- environments ------------------------------------------------------------------

enum class EnvKind { stateless, sequential };

std::string to_string(EnvKind kind);
EnvKind parse_env_kind(std::string_view text);

/// Synthetic user model. Users see a served set S and click at most one item:
///   P(click a | S) = exp(u_a) / (exp(u_0) + sum_{b in S} exp(u_b)),
/// and a click on a pays reward rho_a. Stateless users have u_a = sharpness * rho_a.
/// Sequential users carry a unit interest vector h with u_a = sharpness * h.e_a,
/// and h drifts toward the embedding of each clicked item.
struct EnvironmentSpec {
  EnvKind kind = EnvKind::stateless;
  Index num_actions = 10;
  std::vector<double> rewards;  // rho; empty selects the default profile
  double sharpness = 2.0;
  double no_click_utility = 4.0;
  int episode_length = 4;
  // sequential only
  Index interest_dim = 4;
  double drift = 0.3;
  std::uint64_t world_seed = 7;

  void validate() const;
  /// Stable textual form; the fingerprint hashes it.
  std::string canonical() const;
  std::uint64_t fingerprint() const;
};

std::string fingerprint_hex(std::uint64_t fp);

class Environment {
 public:
  struct Session {
    Vec interest;  // empty for stateless users
    int t = 0;
  };
  struct Response {
    std::optional<ActionId> clicked;
    double reward = 0.0;
  };

  explicit Environment(EnvironmentSpec spec);

  const EnvironmentSpec& spec() const { return spec_; }
  Index num_actions() const { return spec_.num_actions; }
  const Vec& rewards() const { return rewards_; }
  const Mat& item_embeddings() const { return items_; }

  Session start(RngStream& rng) const;
  Vec utilities(const Session& session) const;
  /// Click probability for each item of `served` followed by the no-click mass.
  Vec choice_probs(const Session& session, std::span<const ActionId> served) const;
  /// Expected reward of showing `served` once.
  double set_value(const Session& session, std::span<const ActionId> served) const;
  /// Expected reward of showing the single item a, for every a.
  Vec single_item_values(const Session& session) const;
  Response respond(const Session& session, std::span<const ActionId> served, RngStream& rng) const;
  void advance(Session& session, const Response& response) const;

 private:
  EnvironmentSpec spec_;
  Vec rewards_;
  Mat items_;  // interest_dim x |A|, unit columns
};

// -- behavior policies ---------------------------------------------------------

enum class BehaviorKind { uniform, zipf, stale, mixture };

std::string to_string(BehaviorKind kind);
BehaviorKind parse_behavior_kind(std::string_view text);

struct BehaviorPolicySpec {
  struct Component;

  BehaviorKind kind = BehaviorKind::uniform;
  double zipf_exponent = 1.0;
  double zipf_floor = 1e-4;                // mass added to every action
  std::vector<ActionId> popularity_order;  // rank -> action; empty means identity
  std::shared_ptr<const PolicyParameters> stale_model;
  double stale_temperature = 1.0;
  std::vector<Component> components;

  std::string describe() const;
};

struct BehaviorPolicySpec::Component {
  double weight = 0.0;
  BehaviorPolicySpec spec;
};

/// Zipf weights with a per-action floor, indexed by action.
Vec zipf_distribution(Index num_actions, double exponent, double floor, std::span<const ActionId> popularity_order);

/// Runtime form of a behavior policy: tracks whatever history it conditions on.
class BehaviorPolicy {
 public:
  BehaviorPolicy(const BehaviorPolicySpec& spec, Index num_actions);

  void reset();
  const Vec& probs() const { return probs_; }
  void observe(ActionId a);

 private:
  void refresh();

  BehaviorPolicySpec spec_;
  Index num_actions_;
  Vec state_;
  Vec fixed_;
  std::vector<double> weights_;
  std::vector<BehaviorPolicy> parts_;
  Vec probs_;
};

/// Logged trajectories with ground-truth behavior probabilities.
TrajectoryBatch generate_logged_data(const Environment& env, const BehaviorPolicySpec& behavior,
                                     std::size_t n_events, std::uint64_t seed);

/// Exact behavior distributions at every event of a batch logged by `behavior`.
BehaviorDistributions behavior_distributions(const TrajectoryBatch& batch, const BehaviorPolicySpec& behavior,
                                             Index num_actions);

// -- logged data files ---------------------------------------------------------

struct DatasetHeader {
  std::uint64_t env_fingerprint = 0;
  std::uint64_t seed = 0;
  std::string source;
};

void write_dataset(std::ostream& out, const TrajectoryBatch& batch, const DatasetHeader& header);
TrajectoryBatch read_dataset(std::istream& in, DatasetHeader* header = nullptr);

// -- evaluation ----------------------------------------------------------------

/// Distribution over the de-duplicated sets produced by K draws with
/// replacement from `probs` over `candidates`, by Mobius inversion over
/// subsets. Only subsets with positive probability are returned.
struct SetOutcome {
  std::vector<ActionId> items;
  double probability = 0.0;
};
std::vector<SetOutcome> served_set_distribution(std::span<const ActionId> candidates, const Vec& probs, Index k);

inline constexpr Index kMaxEnumerableCandidates = 12;

/// Exact expected reward of one impression served from state `s`, or nullopt
/// when stochastic serving has more than kMaxEnumerableCandidates candidates.
std::optional<double> expected_set_value(const Environment& env, const Environment::Session& session, const Vec& s,
                                         const PolicyParameters& params, const PolicyConfig& cfg, Index k);

struct EvaluationMetrics {
  double mean_reward = 0.0;  // Monte-Carlo, per impression
  double stderr_reward = 0.0;
  double click_rate = 0.0;
  double mean_set_size = 0.0;
  std::optional<double> exact_mean;  // mean over visited states of the exact set value
  std::optional<double> exact_stderr;
  std::size_t impressions = 0;
};

/// Rolls out `n_rollouts` episodes serving K items per step. The policy's
/// history consumes the clicked item, or the first served item when nothing
/// is clicked.
EvaluationMetrics evaluate_policy(const Environment& env, const PolicyParameters& params, const PolicyConfig& cfg,
                                  Index k, std::size_t n_rollouts, std::uint64_t seed);

/// Exact set objective averaged over `states` (stateless environments only).
double set_objective(const Environment& env, const PolicyParameters& params, const PolicyConfig& cfg, Index k,
                     std::span<const Vec> states);

/// States s_t with t >= 1 reached along the batch's histories under `params`.
std::vector<Vec> probe_states(const TrajectoryBatch& batch, const PolicyParameters& params,
                              std::size_t max_states = 0);

/// Mean policy distribution over `states`.
Vec mean_policy(const PolicyParameters& params, std::span<const Vec> states, double temperature = 1.0);

// -- nomination analysis --------------------------------------------------------

struct RankCdfRow {
  int rank = 0;  // 1 = most nominated by control
  ActionId action = 0;
  double control_cdf = 0.0;
  double test_cdf = 0.0;
};

/// Ranks actions by control nomination frequency (descending, ties by id) and
/// accumulates both frequency vectors in that order.
std::vector<RankCdfRow> rank_cdf(const Vec& control_freq, const Vec& test_freq);

/// Expected nomination share per action: restricted-softmax mass over the
/// top-M retrieval at each probe state (t >= 1 along the probe histories,
/// computed with the model's own CFN), averaged over states.
Vec nomination_frequencies(const PolicyParameters& params, const TrajectoryBatch& probe_histories, Index m,
                           double temperature = 1.0);

std::vector<RankCdfRow> nomination_rank_cdf(const PolicyParameters& control, const PolicyParameters& test,
                                            const TrajectoryBatch& probe_histories, Index m,
                                            double temperature = 1.0);

/// Share of test nominations outside the control's top `head_fraction` ranks.
double share_outside_head(std::span<const RankCdfRow> rows, double head_fraction = 0.1);

/// Distinct (previous action, action) pairs; the first step uses previous = -1.
std::size_t state_action_coverage(const TrajectoryBatch& batch);

}  // namespace topk
