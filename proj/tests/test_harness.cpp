#include "topk/checkpoint.hpp"
#include "topk/experiments.hpp"

#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <sys/wait.h>

using namespace topk;

namespace {

ExperimentConfig config(const std::string& body) { return ExperimentConfig::from(KeyValueConfig::parse(body)); }

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "topk_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::string> lines(const std::string& body) {
  std::vector<std::string> out;
  std::istringstream in(body);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const std::string kSmall =
    "env.num_actions = 10\n"
    "model.state_dim = 4\n"
    "model.embed_dim = 4\n"
    "data.events = 400\n"
    "train.steps = 20\n"
    "train.batch_size = 16\n"
    "eval.rollouts = 50\n"
    "eval.k = 2\n";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TOPK_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cli_output(const std::string& args) {
  const std::string cmd = std::string(TOPK_CLI_PATH) + " " + args + " 2>&1";
  std::string out;
  if (FILE* pipe = popen(cmd.c_str(), "r")) {
    char buf[512];
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    pclose(pipe);
  }
  return out;
}

void write_text(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

}  // namespace

TEST_CASE("generate-data") {
  const auto cfg = config("env.num_actions = 10\ndata.events = 100\n");
  const auto dir = fresh_dir("gen");
  const auto file = cmd_generate_data(cfg, dir, false);
  const auto body = slurp(file);
  const auto ls = lines(body);
  REQUIRE(ls.size() == 102);
  CHECK(ls[0].rfind("# topk-logged-data v1", 0) == 0);
  CHECK(ls[1] == "trajectory_id,step,action,reward,behavior_prob");
  CHECK(fs::exists(dir / "config.snapshot"));

  CHECK_THROWS_AS(cmd_generate_data(cfg, dir, false), ConfigError);
  CHECK(slurp(file) == body);
  cmd_generate_data(cfg, dir, true);
  CHECK(slurp(file) == body);

  const auto other = cmd_generate_data(cfg.with("seed", "2"), fresh_dir("gen2"), false);
  CHECK(slurp(other) != body);

  CHECK_THROWS_AS(cmd_generate_data(cfg.with("data.events", "0"), fresh_dir("gen0"), false), ConfigError);
  CHECK_FALSE(fs::exists(fresh_dir("gen0") / "dataset.csv"));
}

TEST_CASE("train") {
  const auto cfg = config(kSmall);
  const auto data_dir = fresh_dir("train_data");
  const auto dataset = cmd_generate_data(cfg, data_dir, false);

  SUBCASE("zero steps checkpoints the initialization") {
    const auto out = fresh_dir("train0");
    const auto outcome = cmd_train(cfg.with("train.steps", "0"), dataset, out, false);
    CHECK(outcome.exit_code == kExitOk);
    CHECK(load_checkpoint(out / "checkpoint.bin").policy == initial_parameters(cfg, cfg.seed));
    CHECK(slurp(out / "diagnostics.jsonl").empty());
  }
  SUBCASE("diagnostics stream") {
    const auto out = fresh_dir("train_diag");
    cmd_train(cfg, dataset, out, false);
    const auto ls = lines(slurp(out / "diagnostics.jsonl"));
    REQUIRE(ls.size() == 20);
    CHECK(ls[0].rfind("{\"step\":0,\"objective\":", 0) == 0);
    for (const char* key : {"weight_mean", "weight_variance", "weight_max", "capped_fraction",
                            "effective_sample_size", "gradient_norms", "\"V\""}) {
      CHECK(ls[5].find(key) != std::string::npos);
    }
    CHECK_THROWS_AS(cmd_train(cfg, dataset, out, false), ConfigError);
  }
  SUBCASE("top-K with K = 1 trains exactly like standard") {
    const auto a = fresh_dir("train_std"), b = fresh_dir("train_k1");
    cmd_train(cfg.with("correction.mode", "standard"), dataset, a, false);
    cmd_train(cfg.with("correction.mode", "topk").with("correction.k", "1"), dataset, b, false);
    CHECK(slurp(a / "diagnostics.jsonl") == slurp(b / "diagnostics.jsonl"));
    CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  }
  SUBCASE("environment mismatch is a config error") {
    CHECK_THROWS_AS(cmd_train(cfg.with("env.sharpness", "3"), dataset, fresh_dir("train_fp"), false), ConfigError);
  }
  SUBCASE("missing dataset is a data error") {
    CHECK_THROWS_AS(cmd_train(cfg, data_dir / "nope.csv", fresh_dir("train_nope"), false), DataError);
  }
  SUBCASE("divergence keeps the last good checkpoint") {
    const auto out = fresh_dir("train_nan");
    const auto bad = cfg.with("train.optimizer", "sgd").with("train.learning_rate", "1e300");
    const auto outcome = cmd_train(bad, dataset, out, false);
    CHECK(outcome.exit_code == kExitNumerical);
    const auto ck = load_checkpoint(out / "checkpoint.bin");
    CHECK(ck.policy.all_finite());
    CHECK(ck.policy == outcome.result.params);
  }
}

TEST_CASE("standard correction concentrates mass on the best action") {
  const auto cfg = config(
      "env.num_actions = 10\n"
      "data.events = 8000\n"
      "train.steps = 2000\n"
      "train.batch_size = 64\n");
  const auto dataset = cmd_generate_data(cfg, fresh_dir("conv_data"), false);
  const auto out = fresh_dir("conv");
  const auto outcome = cmd_train(cfg, dataset, out, false);
  REQUIRE(outcome.exit_code == kExitOk);

  const Environment env(cfg.env);
  Index best = 0;
  env.rewards().maxCoeff(&best);
  std::ifstream in(dataset);
  const auto data = read_dataset(in);
  const auto states = probe_states(data, outcome.result.params, 2000);
  const Vec mass = mean_policy(outcome.result.params, states);
  MESSAGE("mass on the best action " << mass[best]);
  CHECK(mass[best] >= 0.95);
}

TEST_CASE("evaluate") {
  const auto cfg = config(kSmall);
  const auto dataset = cmd_generate_data(cfg, fresh_dir("eval_data"), false);
  const auto train_dir = fresh_dir("eval_train");
  cmd_train(cfg.with("train.steps", "0").with("model.init_scale", "0"), dataset, train_dir, false);

  SUBCASE("an untrained model serves near-uniformly") {
    const auto zero = cfg.with("eval.rollouts", "400");
    const auto rows = cmd_evaluate(zero, train_dir / "checkpoint.bin", fresh_dir("eval_zero"), false);
    REQUIRE(rows.size() == 1);
    const auto& m = rows[0].metrics;
    REQUIRE(m.exact_mean.has_value());
    // Uniform policy, K = 2: the exact value is the mean over the set distribution.
    const Environment env(cfg.env);
    const Vec uniform = Vec::Constant(10, 0.1);
    std::vector<ActionId> all(10);
    std::iota(all.begin(), all.end(), 0);
    RngStream rng(1, 0);
    const auto session = env.start(rng);
    double expected = 0.0;
    for (const auto& o : served_set_distribution(all, uniform, 2)) {
      expected += o.probability * env.set_value(session, o.items);
    }
    CHECK(*m.exact_mean == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(m.mean_reward - expected) < 4 * m.stderr_reward + 1e-12);
    CHECK(m.mean_set_size > 1.0);
    CHECK(m.mean_set_size <= 2.0);
  }
  SUBCASE("a K list is evaluated in order") {
    const auto multi = cfg.with("eval.k_list", "1,2,8,16,32");
    const auto rows = cmd_evaluate(multi, train_dir / "checkpoint.bin", fresh_dir("eval_klist"), false);
    REQUIRE(rows.size() == 5);
    const std::vector<Index> ks{1, 2, 8, 16, 32};
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].k == ks[i]);
  }
  SUBCASE("both serve modes") {
    const auto multi = cfg.with("eval.serve_mode", "both").with("eval.k_list", "1,2,8");
    const auto out = fresh_dir("eval_multi");
    const auto rows = cmd_evaluate(multi, train_dir / "checkpoint.bin", out, false);
    REQUIRE(rows.size() == 6);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].serve_mode == (i < 3 ? "deterministic" : "stochastic"));
      CHECK(rows[i].k == std::vector<Index>{1, 2, 8}[i % 3]);
    }
    const auto ls = lines(slurp(out / "metrics.csv"));
    REQUIRE(ls.size() == 8);
    CHECK(ls[0].rfind("# topk-reinforce ", 0) == 0);
    CHECK(ls[0].find("config_hash=") != std::string::npos);
    CHECK(ls[1].rfind("serve_mode,k,temperature,mean_reward_per_impression,stderr,", 0) == 0);
    CHECK_THROWS_AS(cmd_evaluate(multi, train_dir / "checkpoint.bin", out, false), ConfigError);
  }
  SUBCASE("deterministic serving rejects K above the retrieval width") {
    const auto bad =
        cfg.with("eval.serve_mode", "deterministic").with("policy.retrieval_width", "3").with("eval.k", "4");
    CHECK_THROWS_AS(cmd_evaluate(bad, train_dir / "checkpoint.bin", fresh_dir("eval_bad"), false), ConfigError);
  }
  SUBCASE("action count mismatch") {
    const auto other = cfg.with("env.num_actions", "12");
    CHECK_THROWS_AS(cmd_evaluate(other, train_dir / "checkpoint.bin", fresh_dir("eval_mismatch"), false),
                    ConfigError);
  }
}

TEST_CASE("sweep") {
  const auto cfg = config(kSmall);
  SUBCASE("axis and values are required") {
    CHECK_THROWS_AS(cmd_sweep(cfg, fresh_dir("sweep_empty"), false), ConfigError);
    CHECK_THROWS_AS(cmd_sweep(cfg.with("sweep.axis", "k"), fresh_dir("sweep_empty2"), false), ConfigError);
    CHECK_THROWS_AS(cmd_sweep(cfg.with("sweep.axis", "k").with("sweep.values", "2,x"), fresh_dir("sweep_bad"), false),
                    ConfigError);
  }
  SUBCASE("a single value reproduces train and evaluate") {
    const auto sweep_cfg = cfg.with("correction.mode", "topk").with("sweep.axis", "k").with("sweep.values", "3")
                               .with("seeds", "5");
    const auto out = fresh_dir("sweep_one");
    const auto result = cmd_sweep(sweep_cfg, out, false);
    REQUIRE(result.runs.size() == 1);

    const auto single = cfg.with("correction.mode", "topk").with("correction.k", "3").with("seed", "5");
    const auto dataset = cmd_generate_data(single, fresh_dir("sweep_ref_data"), false);
    const auto ref = fresh_dir("sweep_ref");
    const auto trained = cmd_train(single, dataset, ref, false);
    const auto rows = cmd_evaluate(single, ref / "checkpoint.bin", ref, false);
    CHECK(slurp(out / "runs" / "k=3" / "seed=5" / "checkpoint.bin") == slurp(ref / "checkpoint.bin"));
    CHECK(result.runs[0].metric == rows[0].metrics.exact_mean.value_or(rows[0].metrics.mean_reward));
    CHECK(result.runs[0].weight_variance == trained.result.mean_weight_variance);
    CHECK(result.summary.size() == 1);
    CHECK(result.summary[0].metric_mean == result.runs[0].metric);
  }
  SUBCASE("tables list every value and seed in order") {
    const auto sweep_cfg = cfg.with("sweep.axis", "cap").with("sweep.values", "e^3,inf").with("seeds", "1,2");
    const auto out = fresh_dir("sweep_cap");
    const auto result = cmd_sweep(sweep_cfg, out, false);
    REQUIRE(result.runs.size() == 4);
    CHECK(result.runs[0].value == "e^3");
    CHECK(result.runs[1].seed == 2);
    CHECK(result.runs[3].value == "inf");
    const auto runs = lines(slurp(out / "runs.csv"));
    REQUIRE(runs.size() == 6);
    CHECK(runs[1].rfind("cap,seed,", 0) == 0);
    const auto sweep = lines(slurp(out / "sweep.csv"));
    REQUIRE(sweep.size() == 4);
    CHECK(sweep[2].rfind("e^3,2,", 0) == 0);
    CHECK(fs::exists(out / "runs" / "cap=e_3" / "seed=1" / "checkpoint.bin"));
    CHECK_THROWS_AS(cmd_sweep(sweep_cfg, out, false), ConfigError);
  }
}

TEST_CASE("k sweep on the canonical environment orders the metric by K") {
  const auto cfg = ExperimentConfig::load(fs::path(TOPK_RECIPE_DIR) / "e3_k_sweep.cfg");
  const auto result = cmd_sweep(cfg, fresh_dir("k_sweep"), false);
  REQUIRE(result.summary.size() == 4);
  REQUIRE(result.runs.size() == 20);
  for (const auto& s : result.summary) MESSAGE("K=" << s.value << " metric " << s.metric_mean);
  CHECK(result.summary[0].metric_mean < result.summary[1].metric_mean);
  CHECK(result.summary[1].metric_mean <= result.summary[2].metric_mean);
}

TEST_CASE("cap sweep: the looser cap has larger weight variance") {
  const auto cfg = ExperimentConfig::load(fs::path(TOPK_RECIPE_DIR) / "e4_cap_sweep.cfg");
  const auto result = cmd_sweep(cfg, fresh_dir("cap_sweep"), false);
  REQUIRE(result.summary.size() == 2);
  CHECK(result.summary[0].weight_variance_mean < result.summary[1].weight_variance_mean);
  const std::size_t seeds = cfg.seed_list().size();
  for (std::size_t i = 0; i < seeds; ++i) {
    CHECK(result.runs[i].weight_variance < result.runs[seeds + i].weight_variance);
  }
}

TEST_CASE("exploration split with no serving buckets trains identical models") {
  const auto cfg = config(kSmall + "exploration.base_steps = 10\n");
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto r = exploration_split_run(cfg, {1.0, 0.0, 0.0}, seeds);
  REQUIRE(r.per_seed.size() == 2);
  for (const auto& s : r.per_seed) {
    CHECK(s.bucket_events[1] == 0);
    CHECK(s.bucket_events[2] == 0);
    CHECK(s.deterministic_metric == s.stochastic_metric);
  }
  CHECK(r.mean_delta == 0.0);
  CHECK_THROWS_AS(exploration_split_run(cfg, {0.5, 0.2, 0.2}, seeds), ConfigError);
}

TEST_CASE("grad-check") {
  const auto cfg = config(
      "env.kind = sequential\nenv.num_actions = 6\nenv.episode_length = 5\nmodel.state_dim = 4\n"
      "model.embed_dim = 3\nbehavior.kind = zipf\ncorrection.k = 3\ncorrection.cap = 1.2\n");
  const auto rows = cmd_grad_check(cfg);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    INFO(to_string(r.mode) << " " << r.report.max_relative_error);
    CHECK(r.passed);
    CHECK(r.report.entries_checked == static_cast<std::size_t>(initial_parameters(cfg, 1).parameter_count()));
  }
  const auto broken = cmd_grad_check(cfg, "W_z");
  for (const auto& r : broken) {
    CHECK_FALSE(r.passed);
    CHECK(r.report.worst_tensor == "W_z");
  }
  CHECK_THROWS(cmd_grad_check(cfg, "nope"));
}

TEST_CASE("csv preamble and version") {
  const auto cfg = config(kSmall);
  const auto line = csv_preamble(cfg);
  CHECK(line.rfind("# topk-reinforce " + version_string() + " config_hash=", 0) == 0);
  CHECK(line.back() == '\n');
  CHECK(csv_preamble(cfg.with("seed", "9")) != line);
}

TEST_CASE("parallel_for") {
  std::vector<int> out(100, 0);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = static_cast<int>(i * i); }, 4);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
  CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) { if (i == 7) throw DataError("x"); }, 3), DataError);
  CHECK(t_quantile_95(4) == 2.776);
  CHECK(t_quantile_95(1000) == 1.96);
}

TEST_CASE("command line exit codes") {
  const auto dir = fresh_dir("cli");
  const auto cfg = dir / "run.cfg";
  write_text(cfg, kSmall);
  const std::string c = " --config " + cfg.string();
  const std::string o = " --out " + dir.string();

  CHECK(run_cli("generate-data" + c + o + "/gen") == 0);
  CHECK(fs::exists(dir / "gen" / "dataset.csv"));
  CHECK(run_cli("generate-data" + c + o + "/gen") == kExitConfig);
  CHECK(run_cli("generate-data" + c + o + "/gen --force") == 0);
  CHECK(run_cli("train" + c + o + "/train --dataset " + (dir / "gen" / "dataset.csv").string()) == 0);
  CHECK(run_cli("evaluate" + c + o + "/eval --checkpoint " + (dir / "train" / "checkpoint.bin").string()) == 0);
  CHECK(fs::exists(dir / "eval" / "metrics.csv"));

  SUBCASE("config errors exit 2") {
    CHECK(run_cli("") == kExitConfig);
    CHECK(run_cli("train" + c) == kExitConfig);
    CHECK(run_cli("generate-data --config " + (dir / "missing.cfg").string()) == kExitConfig);
    write_text(dir / "bad.cfg", "no.such = 1\n");
    CHECK(run_cli("generate-data --config " + (dir / "bad.cfg").string() + o + "/x") == kExitConfig);
    CHECK(run_cli("sweep" + c + o + "/sweep") == kExitConfig);
  }
  SUBCASE("data errors exit 3") {
    write_text(dir / "broken.csv", "not a dataset\n");
    CHECK(run_cli("train" + c + o + "/t3 --dataset " + (dir / "broken.csv").string()) == kExitData);
    write_text(dir / "broken.bin", "TOPKCKPT");
    CHECK(run_cli("evaluate" + c + o + "/e3 --checkpoint " + (dir / "broken.bin").string()) == kExitData);
  }
  SUBCASE("numerical failures exit 4") {
    CHECK(run_cli("grad-check" + c) == 0);
    CHECK(run_cli("grad-check" + c + " --corrupt-tensor V") == kExitNumerical);
    const auto report = cli_output("grad-check" + c + " --corrupt-tensor V");
    CHECK(report.find("FAIL") != std::string::npos);
    CHECK(report.find("worst=V(") != std::string::npos);
    write_text(dir / "diverge.cfg", kSmall + "train.optimizer = sgd\ntrain.learning_rate = 1e300\n");
    CHECK(run_cli("train --config " + (dir / "diverge.cfg").string() + o + "/t4 --dataset " +
                  (dir / "gen" / "dataset.csv").string()) == kExitNumerical);
    CHECK(fs::exists(dir / "t4" / "checkpoint.bin"));
  }
  SUBCASE("output root from the environment") {
    const auto root = dir / "root";
    const std::string cmd = "TOPK_OUT_ROOT=" + root.string() + " " + std::string(TOPK_CLI_PATH) +
                            " generate-data" + c + " >/dev/null 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(root / "generate-data" / "dataset.csv"));
  }
  SUBCASE("seed override") {
    CHECK(run_cli("generate-data" + c + " --seed 2" + o + "/seed2") == 0);
    CHECK(slurp(dir / "seed2" / "dataset.csv") != slurp(dir / "gen" / "dataset.csv"));
  }
}
