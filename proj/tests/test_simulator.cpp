#include "topk/simulator.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <set>
#include <sstream>

using namespace topk;

namespace {

EnvironmentSpec stateless(Index num_actions = 10) {
  EnvironmentSpec s;
  s.num_actions = num_actions;
  return s;
}

EnvironmentSpec sequential() {
  EnvironmentSpec s;
  s.kind = EnvKind::sequential;
  s.num_actions = 20;
  s.episode_length = 6;
  return s;
}

BehaviorPolicySpec zipf(double exponent, double floor = 1e-4) {
  BehaviorPolicySpec b;
  b.kind = BehaviorKind::zipf;
  b.zipf_exponent = exponent;
  b.zipf_floor = floor;
  return b;
}

BehaviorPolicySpec stale(const PolicyParameters& p, double temperature = 1.0) {
  BehaviorPolicySpec b;
  b.kind = BehaviorKind::stale;
  b.stale_model = std::make_shared<PolicyParameters>(p);
  b.stale_temperature = temperature;
  return b;
}

PolicyParameters seeded(const ModelDims& d, std::uint64_t seed, double scale = 0.5) {
  RngStream rng(seed, 0);
  return PolicyParameters::random(d, rng, scale);
}

/// Policy whose state is positive from t = 1 on whatever it consumes, with
/// logits scale * rho at those states.
PolicyParameters reward_greedy(const Vec& rho, double scale) {
  auto p = PolicyParameters::zeros({1, 1, rho.size()});
  p.U.setOnes();
  p.W_a(0, 0) = 1.0;
  p.V.row(0) = scale * rho.transpose();
  return p;
}

}  // namespace

TEST_CASE("environment spec validation and fingerprint") {
  auto s = stateless();
  CHECK_NOTHROW(s.validate());
  const auto fp = s.fingerprint();
  CHECK(fp == stateless().fingerprint());
  s.sharpness = 2.5;
  CHECK(s.fingerprint() != fp);
  s = stateless();
  s.rewards = {0.1, 0.2};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = stateless();
  s.num_actions = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = sequential();
  s.drift = 1.5;
  CHECK_THROWS_AS(Environment{s}, ConfigError);
  CHECK(fingerprint_hex(0xabcULL) == "0000000000000abc");
}

TEST_CASE("choice model") {
  const Environment env(stateless());
  RngStream rng(1, 0);
  const auto session = env.start(rng);
  CHECK(env.rewards()[0] == doctest::Approx(0.1));
  CHECK(env.rewards()[9] == doctest::Approx(1.0));
  const auto u = oracle::to_std(env.utilities(session));
  const std::vector<int> served{9, 3, 5};
  const std::vector<ActionId> served_ids{9, 3, 5};
  const auto ref = oracle::choice(u, served, env.spec().no_click_utility);
  const Vec p = env.choice_probs(session, served_ids);
  for (std::size_t j = 0; j < ref.size(); ++j) CHECK(std::abs(p[j] - ref[j]) < 1e-15);
  CHECK(env.set_value(session, served_ids) ==
        doctest::Approx(oracle::set_value(u, oracle::to_std(env.rewards()), served, env.spec().no_click_utility))
            .epsilon(1e-14));

  // At most one click per impression, and the reward matches the clicked item.
  for (int i = 0; i < 20000; ++i) {
    const auto r = env.respond(session, served_ids, rng);
    if (r.clicked) {
      CHECK(std::find(served_ids.begin(), served_ids.end(), *r.clicked) != served_ids.end());
      CHECK(r.reward == env.rewards()[*r.clicked]);
    } else {
      CHECK(r.reward == 0.0);
    }
  }

  const Environment seq(sequential());
  auto s2 = seq.start(rng);
  CHECK(s2.interest.norm() == doctest::Approx(1.0));
  const auto before = s2.interest;
  Environment::Response click{3, seq.rewards()[3]};
  seq.advance(s2, click);
  CHECK(s2.t == 1);
  CHECK(s2.interest.norm() == doctest::Approx(1.0));
  CHECK(s2.interest.dot(seq.item_embeddings().col(3)) > before.dot(seq.item_embeddings().col(3)));
}

TEST_CASE("zipf distribution") {
  const Vec z = zipf_distribution(10, 1.0, 1e-4, {});
  CHECK(z.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(z.minCoeff() >= 1e-4);
  for (Index a = 1; a < 10; ++a) CHECK(z[a] < z[a - 1]);
  const std::vector<ActionId> order{3, 0, 1, 2};
  const Vec perm = zipf_distribution(4, 1.0, 0.0, order);
  CHECK(perm[3] == doctest::Approx(1.0 / (1 + 0.5 + 1.0 / 3 + 0.25)));
  const std::vector<ActionId> bad{0, 0, 1, 2};
  CHECK_THROWS_AS(zipf_distribution(4, 1.0, 0.0, bad), InvalidArgument);
  CHECK_THROWS_AS(zipf_distribution(4, 1.0, 0.3, {}), InvalidArgument);
}

TEST_CASE("logged data generation") {
  const Environment env(stateless());
  SUBCASE("uniform behavior frequencies") {
    BehaviorPolicySpec uniform;
    const auto batch = generate_logged_data(env, uniform, 100000, 1);
    CHECK(batch.num_events() == 100000);
    std::vector<int> counts(10, 0);
    for (const auto& tr : batch.trajectories)
      for (const auto& e : tr.events) {
        ++counts[e.action];
        CHECK(e.behavior_prob == 0.1);
      }
    const double sigma = std::sqrt(100000 * 0.1 * 0.9);
    for (int c : counts) CHECK(std::abs(c - 10000) < 3 * sigma);
  }
  SUBCASE("uniform behavior chi-square across seeds") {
    BehaviorPolicySpec uniform;
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto batch = generate_logged_data(env, uniform, 5000, seed);
      std::vector<double> counts(10, 0.0);
      for (const auto& tr : batch.trajectories)
        for (const auto& e : tr.events) ++counts[e.action];
      for (double c : counts) total += (c - 500.0) * (c - 500.0) / 500.0;
    }
    // Sum of 100 chi-square(9) draws: mean 900, sd sqrt(1800).
    CHECK(std::abs(total - 900.0) < 4.0 * std::sqrt(1800.0));
  }
  SUBCASE("degenerate behavior") {
    const auto batch = generate_logged_data(env, zipf(80.0, 0.0), 2000, 3);
    std::set<ActionId> seen;
    for (const auto& tr : batch.trajectories)
      for (const auto& e : tr.events) seen.insert(e.action);
    CHECK(seen == std::set<ActionId>{0});
  }
  SUBCASE("reproducible") {
    const auto a = generate_logged_data(env, zipf(1.0), 5000, 11);
    const auto b = generate_logged_data(env, zipf(1.0), 5000, 11);
    const auto c = generate_logged_data(env, zipf(1.0), 5000, 12);
    CHECK(a == b);
    CHECK(!(a == c));
    std::ostringstream sa, sb;
    write_dataset(sa, a, {1, 11, a.source});
    write_dataset(sb, b, {1, 11, b.source});
    CHECK(sa.str() == sb.str());
  }
  SUBCASE("episode structure") {
    const auto batch = generate_logged_data(env, zipf(1.0), 10, 1);
    REQUIRE(batch.trajectories.size() == 3);
    CHECK(batch.trajectories[0].events.size() == 4);
    CHECK(batch.trajectories[2].events.size() == 2);
    CHECK(batch.trajectories[1].events[3].step == 3);
  }
  SUBCASE("saturated behavior keeps strictly positive mass") {
    auto p = PolicyParameters::zeros({2, 2, 10});
    p.V(0, 0) = 1.0;
    p.U.setOnes();
    p.W_a.setOnes();
    const auto batch = generate_logged_data(env, stale(p, 1e-6), 100, 1);
    for (const auto& tr : batch.trajectories)
      for (const auto& e : tr.events) {
        CHECK(e.behavior_prob > 0.0);
      }
  }
}

TEST_CASE("recorded behavior probabilities match the generator") {
  const Environment env(sequential());
  const auto model = seeded({4, 3, 20}, 6, 1.0);
  BehaviorPolicySpec mixture;
  mixture.kind = BehaviorKind::mixture;
  mixture.components = {{0.3, zipf(1.0)}, {0.7, stale(model, 0.5)}};

  for (const auto& spec : {zipf(1.2), stale(model), mixture}) {
    const auto batch = generate_logged_data(env, spec, 3000, 4);
    const auto dists = behavior_distributions(batch, spec, 20);
    for (std::size_t j = 0; j < batch.trajectories.size(); ++j) {
      const auto& tr = batch.trajectories[j];
      oracle::Dbl s(4, 0.0);
      for (std::size_t t = 0; t < tr.events.size(); ++t) {
        const auto& e = tr.events[t];
        CHECK(std::abs(dists[j][t].sum() - 1.0) < 1e-12);
        CHECK(std::abs(dists[j][t][e.action] - e.behavior_prob) < 1e-12);
        if (spec.kind == BehaviorKind::stale) {
          const auto pi = oracle::softmax(oracle::logits(model, s));
          CHECK(std::abs(pi[e.action] - e.behavior_prob) < 1e-12);
          s = oracle::cfn_step(model, s, e.action);
        }
      }
    }
  }
  BehaviorPolicySpec bad = mixture;
  bad.components[0].weight = 0.5;
  CHECK_THROWS_AS(BehaviorPolicy(bad, 20), InvalidArgument);
}

TEST_CASE("stale behavior equal to the policy gives unit weights") {
  const Environment env(stateless());
  const auto p = seeded({4, 3, 10}, 13, 1.0);
  const auto batch = generate_logged_data(env, stale(p), 400, 2);
  CorrectionConfig standard;
  const auto w = compute_event_weights(batch, p, standard);
  for (double omega : w.raw) CHECK(std::abs(omega - 1.0) < 1e-12);
  CorrectionConfig none;
  none.mode = CorrectionMode::none;
  const auto a = policy_gradient(batch, p, standard).grad;
  const auto b = policy_gradient(batch, p, none).grad;
  for (const auto name : PolicyTensors::kTensorNames) {
    CHECK((a.tensor(name) - b.tensor(name)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("served set distribution") {
  const std::vector<ActionId> candidates{4, 1, 7, 2};
  Vec probs(4);
  probs << 0.4, 0.3, 0.2, 0.1;
  for (Index k : {1, 2, 3, 5}) {
    const auto outcomes = served_set_distribution(candidates, probs, k);
    const auto ref = oracle::set_distribution_bruteforce(oracle::to_std(probs), static_cast<int>(k));
    double total = 0.0;
    std::map<std::vector<int>, double> got;
    for (const auto& o : outcomes) {
      std::vector<int> idx;
      for (ActionId a : o.items) {
        idx.push_back(static_cast<int>(std::find(candidates.begin(), candidates.end(), a) - candidates.begin()));
      }
      std::sort(idx.begin(), idx.end());
      got[idx] += o.probability;
      total += o.probability;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(got.size() == ref.size());
    for (const auto& [set, p] : ref) CHECK(std::abs(got[set] - p) < 1e-12);
    // Marginal inclusion equals alpha.
    for (int i = 0; i < 4; ++i) {
      double inclusion = 0.0;
      for (const auto& [set, p] : got)
        if (std::find(set.begin(), set.end(), i) != set.end()) inclusion += p;
      CHECK(std::abs(inclusion - alpha_prob(probs[i], static_cast<int>(k))) < 1e-12);
    }
  }
}

TEST_CASE("evaluate_policy") {
  SUBCASE("single good item") {
    auto spec = stateless(5);
    spec.rewards = {1.0, 0.0, 0.0, 0.0, 0.0};
    const Environment env(spec);
    const auto p = PolicyParameters::zeros({2, 2, 5});  // ties: deterministic top-1 is item 0
    const auto m = evaluate_policy(env, p, {1.0, 0, ServeMode::deterministic}, 1, 3000, 5);
    const double pick = std::exp(spec.sharpness) / (std::exp(spec.sharpness) + std::exp(spec.no_click_utility));
    REQUIRE(m.exact_mean);
    CHECK(*m.exact_mean == doctest::Approx(pick).epsilon(1e-12));
    CHECK(std::abs(m.mean_reward - pick) < 3 * m.stderr_reward);
    CHECK(m.mean_set_size == 1.0);
  }
  SUBCASE("reward-greedy beats uniform") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto spec = stateless(8);
      RngStream rng(seed, 3);
      for (int a = 0; a < 8; ++a) spec.rewards.push_back(rng.uniform());
      const Environment env(spec);
      const auto greedy = reward_greedy(env.rewards(), 20.0);
      const auto uniform = PolicyParameters::zeros({1, 1, 8});
      for (auto mode : {ServeMode::deterministic, ServeMode::stochastic}) {
        const PolicyConfig pc{1.0, 0, mode};
        const auto g = evaluate_policy(env, greedy, pc, 2, 200, 1);
        const auto u = evaluate_policy(env, uniform, pc, 2, 200, 1);
        CHECK(*g.exact_mean >= *u.exact_mean);
      }
    }
  }
  SUBCASE("enumeration agrees with Monte-Carlo") {
    const Environment env(stateless(6));
    const auto p = seeded({3, 2, 6}, 4, 1.0);
    const auto m = evaluate_policy(env, p, {1.0, 0, ServeMode::stochastic}, 2, 20000, 9);
    REQUIRE(m.exact_mean);
    CHECK(std::abs(*m.exact_mean - m.mean_reward) < 3 * m.stderr_reward);
    CHECK(m.impressions == 20000u * 4u);
    CHECK(m.click_rate > 0.0);
  }
  SUBCASE("enumeration limit") {
    const Environment env(stateless(14));
    const auto p = seeded({3, 2, 14}, 4, 1.0);
    const auto m = evaluate_policy(env, p, {1.0, 0, ServeMode::stochastic}, 2, 10, 9);
    CHECK(!m.exact_mean);
    const auto narrow = evaluate_policy(env, p, {1.0, 12, ServeMode::stochastic}, 2, 10, 9);
    CHECK(narrow.exact_mean);
  }
  SUBCASE("reproducible") {
    const Environment env(sequential());
    const auto p = seeded({4, 3, 20}, 4, 1.0);
    const auto a = evaluate_policy(env, p, {1.0, 8, ServeMode::stochastic}, 3, 100, 9);
    const auto b = evaluate_policy(env, p, {1.0, 8, ServeMode::stochastic}, 3, 100, 9);
    CHECK(a.mean_reward == b.mean_reward);
    CHECK(a.exact_mean == b.exact_mean);
  }
}

TEST_CASE("set objective and mean policy") {
  const Environment env(stateless(4));
  const auto p = seeded({2, 2, 4}, 8, 1.0);
  const std::vector<Vec> states{Vec::Constant(2, 0.3), Vec::Constant(2, -0.6)};
  const PolicyConfig pc{1.0, 0, ServeMode::stochastic};
  double ref = 0.0;
  const auto u = oracle::to_std(env.utilities({}));
  for (const auto& s : states) {
    const auto pi = oracle::softmax(oracle::logits(p, oracle::to_std(s)));
    for (const auto& [set, prob] : oracle::set_distribution_bruteforce(pi, 3)) {
      ref += prob * oracle::set_value(u, oracle::to_std(env.rewards()), set, env.spec().no_click_utility);
    }
  }
  CHECK(set_objective(env, p, pc, 3, states) == doctest::Approx(ref / 2.0).epsilon(1e-12));
  const Vec mp = mean_policy(p, states);
  CHECK(mp.sum() == doctest::Approx(1.0));
  CHECK(mp[1] == doctest::Approx((policy_probs(states[0], p)[1] + policy_probs(states[1], p)[1]) / 2));
  CHECK_THROWS_AS(set_objective(Environment(sequential()), seeded({2, 2, 20}, 1), pc, 2, states),
                  InvalidArgument);
}

TEST_CASE("rank CDF") {
  Vec control(5), test(5);
  control << 0.5, 0.2, 0.15, 0.1, 0.05;
  const auto same = rank_cdf(control, control);
  for (const auto& r : same) CHECK(r.control_cdf == r.test_cdf);
  CHECK(same.back().control_cdf == doctest::Approx(1.0).epsilon(1e-12));

  test.setConstant(0.2);
  const auto rows = rank_cdf(control, test);
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    CHECK(rows[i].test_cdf < rows[i].control_cdf);
    CHECK(rows[i + 1].test_cdf >= rows[i].test_cdf);
    CHECK(rows[i + 1].control_cdf >= rows[i].control_cdf);
  }
  CHECK(std::abs(rows.back().test_cdf - 1.0) < 1e-9);
  CHECK(rows[0].action == 0);
  CHECK(rows[0].rank == 1);

  Vec tied(3), other(3);
  tied << 0.25, 0.5, 0.25;
  other << 0.2, 0.3, 0.5;
  const auto t = rank_cdf(tied, other);
  CHECK(t[0].action == 1);
  CHECK(t[1].action == 0);
  CHECK(t[2].action == 2);
  CHECK(share_outside_head(rows, 0.2) == doctest::Approx(0.8));

  const Environment env(sequential());
  const auto params = seeded({4, 3, 20}, 2, 1.0);
  const auto probe = generate_logged_data(env, zipf(1.0), 400, 3);
  const auto nom = nomination_rank_cdf(params, params, probe, 8);
  for (const auto& r : nom) CHECK(r.control_cdf == r.test_cdf);
  const Vec freq = nomination_frequencies(params, probe, 8);
  CHECK(freq.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((freq.array() > 0.0).count() <= 20);
}

TEST_CASE("state-action coverage") {
  TrajectoryBatch b{"x", {{0, {{0, 1, 0, 1}, {1, 2, 0, 1}, {2, 2, 0, 1}}}, {1, {{0, 1, 0, 1}, {1, 2, 0, 1}}}}};
  // pairs: (-1,1) (1,2) (2,2)
  CHECK(state_action_coverage(b) == 3);
}
