#include "topk/checkpoint.hpp"
#include "topk/config.hpp"
#include "topk/simulator.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace topk;

namespace {

PolicyParameters seeded(const ModelDims& d, std::uint64_t seed) {
  RngStream rng(seed, 0);
  return PolicyParameters::random(d, rng, 0.5);
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "topk_test_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const ModelDims d{3, 2, 5};
  auto params = seeded(d, 1);
  params.V(1, 2) = -0.0;
  params.U(0, 0) = 1e-310;
  const auto bytes = encode_checkpoint(params);
  const auto ck = decode_checkpoint(bytes);
  CHECK(ck.policy == params);
  CHECK(std::signbit(ck.policy.V(1, 2)));
  CHECK(ck.policy.U(0, 0) == 1e-310);
  CHECK(encode_checkpoint(ck.policy) == bytes);
  CHECK(bytes.substr(0, 8) == "TOPKCKPT");

  const auto path = scratch("ck.bin");
  save_checkpoint(path, params);
  CHECK(load_checkpoint(path).policy == params);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.bin")), DataError);
}

TEST_CASE("checkpoint corruption is a data error") {
  const auto params = seeded({2, 2, 4}, 2);
  const auto head = BehaviorHead::zeros(params.dims);
  const std::string good = encode_checkpoint(params, &head);

  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);

  bad = good;
  bad[8] = 9;  // version
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    CHECK_THROWS_AS(decode_checkpoint(good.substr(0, cut)), DataError);
  }
  CHECK_THROWS_AS(decode_checkpoint(good + "x"), DataError);

  bad = good;
  const auto pos = bad.find("policy/U");
  REQUIRE(pos != std::string::npos);
  bad[pos + 7] = 'Q';
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);

  bad = good;
  bad[12] = 0;  // n = 0
  CHECK_THROWS_AS(decode_checkpoint(bad), DataError);

  // A head with the wrong shape cannot be written.
  const auto wrong = BehaviorHead::zeros({3, 2, 4});
  CHECK_THROWS(encode_checkpoint(params, &wrong));
}

TEST_CASE("dataset round trip") {
  EnvironmentSpec spec;
  spec.kind = EnvKind::sequential;
  spec.num_actions = 15;
  spec.episode_length = 5;
  const Environment env(spec);
  BehaviorPolicySpec b;
  b.kind = BehaviorKind::zipf;
  const auto batch = generate_logged_data(env, b, 123, 9);

  std::stringstream buf;
  write_dataset(buf, batch, {spec.fingerprint(), 9, batch.source});
  const std::string text = buf.str();
  CHECK(text.rfind("# topk-logged-data v1 env=" + fingerprint_hex(spec.fingerprint()), 0) == 0);

  std::istringstream in(text);
  DatasetHeader header;
  const auto back = read_dataset(in, &header);
  CHECK(back == batch);
  CHECK(header.env_fingerprint == spec.fingerprint());
  CHECK(header.seed == 9);
  CHECK(header.source == batch.source);
  CHECK(back.num_events() == 123);

  std::stringstream again;
  write_dataset(again, back, header);
  CHECK(again.str() == text);
}

TEST_CASE("malformed datasets are data errors") {
  const std::string head = "# topk-logged-data v1 env=0000000000000001 seed=1 source=x\n"
                           "trajectory_id,step,action,reward,behavior_prob\n";
  auto parse = [](const std::string& s) {
    std::istringstream in(s);
    return read_dataset(in);
  };
  CHECK_NOTHROW(parse(head + "0,0,1,0.5,0.1\n0,1,2,0,0.2\n1,0,0,1,0.3\n"));
  CHECK_THROWS_AS(parse(""), DataError);
  CHECK_THROWS_AS(parse("trajectory_id,step,action,reward,behavior_prob\n"), DataError);
  CHECK_THROWS_AS(parse("# topk-logged-data v1 env=1 seed=1\nwrong,columns\n"), DataError);
  CHECK_THROWS_AS(parse("# topk-logged-data v1 env=zz seed=1\n"), DataError);
  CHECK_THROWS_AS(parse(head + "0,0,1,0.5\n"), DataError);
  CHECK_THROWS_AS(parse(head + "0,0,one,0.5,0.1\n"), DataError);
  CHECK_THROWS_AS(parse(head + "0,0,1,0.5,0.1,7\n"), DataError);
  CHECK_THROWS_AS(parse(head + "0,1,1,0.5,0.1\n"), DataError);
  CHECK_THROWS_AS(parse(head + "0,0,1,0.5,0.1\n0,2,1,0.5,0.1\n"), DataError);
}

TEST_CASE("config parsing") {
  SUBCASE("defaults and typed access") {
    const auto kv = KeyValueConfig::parse("# comment\n\nenv.num_actions = 12\ncorrection.cap = e^5\nseeds = 1, 2,3\n");
    CHECK(kv.integer("env.num_actions") == 12);
    CHECK(kv.real("correction.cap") == doctest::Approx(std::exp(5.0)).epsilon(1e-15));
    CHECK(kv.int_list("seeds") == std::vector<long long>{1, 2, 3});
    CHECK(kv.real("env.sharpness") == 2.0);
    CHECK(kv.boolean("correction.nis") == false);
    CHECK(kv.text("policy.serve_mode") == "stochastic");

    const auto cfg = ExperimentConfig::from(kv);
    CHECK(cfg.env.num_actions == 12);
    CHECK(cfg.correction.cap == doctest::Approx(std::exp(5.0)));
    CHECK(cfg.seed_list() == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(cfg.env.no_click_utility == 4.0);
  }
  SUBCASE("cap accepts inf") {
    const auto cfg = ExperimentConfig::from(KeyValueConfig::parse("correction.cap = inf\n"));
    CHECK(std::isinf(cfg.correction.cap));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(KeyValueConfig::parse("no.such.key = 1\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("seed = 1\nseed = 2\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("just text\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("env.num_actions = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("correction.nis = maybe\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("seeds = 1,x\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse("recipe = bake\n")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse("train.learning_rate = 0\n")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse("sweep.axis = color\n")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse("exploration.buckets = 0.5,0.5\n")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse("behavior.kind = mixture\n")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load(scratch("absent.cfg")), ConfigError);
  }
  SUBCASE("snapshot and hash") {
    const auto a = ExperimentConfig::from(KeyValueConfig::parse("seed = 3\n"));
    const auto b = ExperimentConfig::from(KeyValueConfig::parse("seed=3"));
    CHECK(a.snapshot() == b.snapshot());
    CHECK(a.hash() == b.hash());
    CHECK(a.snapshot().find("seed = 3\n") != std::string::npos);
    CHECK(a.snapshot().find("env.no_click_utility = 4\n") != std::string::npos);

    const auto c = a.with("seed", "4");
    CHECK(c.seed == 4);
    CHECK(c.hash() != a.hash());
    CHECK(a.seed == 3);
    CHECK_THROWS_AS(a.with("bogus", "1"), ConfigError);
    CHECK_THROWS_AS(a.with("correction.k", "-2"), ConfigError);

    // A snapshot parses back to the same configuration.
    const auto round = ExperimentConfig::from(KeyValueConfig::parse(c.snapshot()));
    CHECK(round.snapshot() == c.snapshot());
  }
  SUBCASE("load from file") {
    const auto path = scratch("x.cfg");
    {
      std::ofstream out(path);
      out << "env.num_actions = 7\neval.k = 3\n";
    }
    const auto cfg = ExperimentConfig::load(path);
    CHECK(cfg.env.num_actions == 7);
    CHECK(cfg.eval_k == 3);
  }
}

TEST_CASE("schema keys are unique") {
  std::set<std::string> keys;
  for (const auto& e : config_schema()) CHECK(keys.insert(e.key).second);
  // Every default satisfies its own type.
  CHECK_NOTHROW(ExperimentConfig::from(KeyValueConfig{}));
}
