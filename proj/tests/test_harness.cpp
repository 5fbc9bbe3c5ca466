#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hygen/harness/harness.hpp"

using namespace hygen;
using namespace hygen::harness;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("hygen_test_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

/// Small networks and short stages so a full pipeline runs in seconds.
ExperimentConfig small_config(const fs::path& data_dir) {
  ExperimentConfig c;
  c.hidden = 8;
  c.embedding = 8;
  c.stage1_steps = 6;
  c.stage2_steps = 6;
  c.batch = 4;
  c.episodes_per_task = 12;
  c.eval_episodes = 3;
  c.eval_every = 3;
  c.log_every = 2;
  c.seeds = {0, 1, 2};
  c.data_dir = data_dir.string();
  return c;
}

}  // namespace

TEST_CASE("config JSON round trip") {
  const ExperimentConfig def;
  CHECK(config_from_json(to_json(def)) == def);
  CHECK(to_json(config_from_json(to_json(def))) == to_json(def));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    ExperimentConfig c;
    c.alpha = 10 * unit(rng);
    c.beta = unit(rng) / 7;
    c.eta = 1 / (unit(rng) + 0.1);
    c.r_start = unit(rng);
    c.r_end = c.r_start * unit(rng);
    c.lr = unit(rng) * 1e-3 + 1e-9;
    c.n_heads = c.n_skills = 1 + k % 4;
    c.eps_steps = 1 + k * 37;
    c.target_every = 1 + k;
    c.embedding = c.n_heads * (1 + k % 5);
    c.seeds = {rng(), rng() % 10};
    c.quality = k % 2 ? data::Quality::Expert : data::Quality::Medium;
    c.unseen_tasks = {};
    const ExperimentConfig back = config_from_json(to_json(c));
    CHECK(back == c);
    CHECK(to_json(back) == to_json(c));
  }
  // Missing keys keep defaults.
  CHECK(config_from_json("{}") == def);
  CHECK(config_from_json(R"({"hidden": 32})").hidden == 32);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json(R"({"hiden": 32})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"hidden": "32"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"hidden": 3.5})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"seeds": [-1]})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"seeds": []})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"r_start": 0.1, "r_end": 0.5})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"n_skills": 6})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"source_tasks": ["3x3"]})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"quality": "great"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"target_every": 0})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  ExperimentConfig sweep;
  sweep.n_skills = 6;
  CHECK_THROWS_AS(sweep.validate(), ConfigError);
  CHECK_NOTHROW(sweep.validate(true));
}

TEST_CASE("seed override from the environment") {
  ExperimentConfig c;
  apply_seed_override(c, nullptr);
  CHECK(c.seeds.size() == 5);
  apply_seed_override(c, "");
  CHECK(c.seeds.size() == 5);
  apply_seed_override(c, "7");
  CHECK(c.seeds == std::vector<std::uint64_t>{7});
  apply_seed_override(c, "3,11,12");
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 11, 12});
  for (const char* bad : {"x", "1,,2", "-1", "1.5", "2,"}) CHECK_THROWS_AS(apply_seed_override(c, bad), ConfigError);
}

TEST_CASE("git-style content hashes") {
  // Values printed by `git hash-object --stdin`.
  CHECK(content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  ExperimentConfig a, b;
  b.alpha = 4.0;
  CHECK(config_hash(a) == config_hash(ExperimentConfig{}));
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("network sizes follow the config") {
  ExperimentConfig c;
  skills::NetConfig n = net_config(c);
  CHECK(n.hidden == 64);
  CHECK(n.embed == 128);
  CHECK(n.n_skills == 4);
  CHECK(n.n_heads == 4);
  CHECK(n.max_enemies == 7);
  CHECK(policy_train_config(c, 9).steps == 35000);
  CHECK(policy_train_config(c, 9).adam.lr == 0.0005);
  CHECK(policy_train_config(c, 9).eps_steps == 5000);
  CHECK(policy_train_config(c, 9).target_every == 200);
  CHECK(skill_train_config(c, 9).steps == 15000);
  CHECK(skill_train_config(c, 9).beta == 0.001);
  c.unseen_tasks = {};
  CHECK(net_config(c).max_enemies == 6);
}

TEST_CASE("gen-data writes calibrated datasets") {
  TempDir dir("gendata");
  ExperimentConfig c;
  c.source_tasks = {"3v3"};
  c.quality = data::Quality::Expert;
  const auto expert = gen_data(c, dir.path / "expert");
  REQUIRE(expert.size() == 1);
  CHECK(expert[0].summary.win_rate >= 0.90);
  CHECK(line_count(dir.path / "expert" / "3v3.ndjson") == 2000);

  c.quality = data::Quality::Medium;
  c.source_tasks = {"3v3", "4v5"};
  const auto medium = gen_data(c, dir.path / "medium");
  REQUIRE(medium.size() == 2);
  for (const auto& td : medium) {
    INFO(td.summary.task);
    CHECK(td.summary.win_rate >= 0.4 * td.expert_win_rate);
    CHECK(td.summary.win_rate <= 0.6 * td.expert_win_rate);
    CHECK(line_count(td.file) == 2000);
  }
  const auto summary = nlohmann::json::parse(slurp(dir.path / "medium" / "summary.json"));
  CHECK(summary.at("config_hash") == config_hash(c));
  CHECK(summary.at("tasks").size() == 2);

  const auto loaded = load_source_data(c, dir.path / "medium");
  CHECK(loaded.size() == 4000);
  CHECK(loaded.count(arena::TaskSpec::parse("4v5")) == 2000);
  CHECK_THROWS_AS(load_source_data(c, dir.path / "expert"), DataError);  // 4v5 missing
  c.source_tasks = {"3v3"};
  CHECK_THROWS_AS(load_source_data(c, dir.path / "expert"), DataError);  // wrong quality
  try {
    load_source_data(c, dir.path / "nowhere");
    FAIL("no error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("nowhere/3v3.ndjson") != std::string::npos);
  }
}

TEST_CASE("training, evaluation and reproducibility") {
  TempDir dir("train");
  ExperimentConfig c = small_config(dir.path / "data");
  gen_data(c, dir.path / "data");
  const std::string hash = config_hash(c);

  SUBCASE("modes share initial parameters") {
    ExperimentConfig zero = c;
    zero.stage2_steps = 0;
    const auto ds = load_source_data(zero, zero.data_dir);
    const ParamBundle stage1 = run_stage1(zero, ds, 4);
    const ParamBundle ref = run_stage2(zero, ds, stage1, 4, policy::parse_variant("hygen")).params;
    for (const char* mode : {"offline_only", "online_only", "fixed_ratio:0.5", "no_refine", "cql:fixed", "cql:none"}) {
      INFO(mode);
      CHECK(fingerprint(run_stage2(zero, ds, stage1, 4, policy::parse_variant(mode)).params) == fingerprint(ref));
    }
    // The stage-1 networks enter unchanged.
    CHECK(fingerprint(ref, "enc.") == fingerprint(stage1, "enc."));
    CHECK(fingerprint(ref, "dec.") == fingerprint(stage1, "dec."));
  }

  SUBCASE("train writes identical artifacts on a re-run") {
    const TrainOutput a = train(c, "hygen", dir.path / "a");
    train(c, "hygen", dir.path / "b");
    CHECK(a.runs.size() == 3);
    for (std::uint64_t seed : c.seeds) {
      const std::string sub = "seed_" + std::to_string(seed);
      for (const char* file : {"metrics.csv", "stage1.csv", "params.txt"}) {
        INFO(sub << "/" << file);
        CHECK(slurp(dir.path / "a" / sub / file) == slurp(dir.path / "b" / sub / file));
      }
      const std::string metrics = slurp(dir.path / "a" / sub / "metrics.csv");
      CHECK(metrics.rfind("# config_hash=" + hash + "\n", 0) == 0);
    }
    const auto manifest = nlohmann::json::parse(slurp(dir.path / "a" / "manifest.json"));
    CHECK(manifest.at("mode") == "hygen");
    CHECK(manifest.at("config_hash") == hash);
    CHECK(manifest.at("runs").size() == 3);

    const RunReport r1 = cmd_eval(dir.path / "a", c, dir.path / "eval1");
    cmd_eval(dir.path / "a", c, dir.path / "eval2");
    CHECK(slurp(dir.path / "eval1" / "report.csv") == slurp(dir.path / "eval2" / "report.csv"));
    CHECK(r1.tasks.size() == 7);
    std::set<std::string> names;
    for (const auto& t : r1.tasks) {
      names.insert(t.task);
      REQUIRE(t.win_rates.size() == 3);
      const double mean = (t.win_rates[0] + t.win_rates[1] + t.win_rates[2]) / 3;
      double ss = 0;
      for (double w : t.win_rates) ss += (w - mean) * (w - mean);
      CHECK(t.win_mean == doctest::Approx(mean).epsilon(1e-14));
      CHECK(t.win_std == doctest::Approx(std::sqrt(ss / 2)).epsilon(1e-12));
    }
    CHECK(names == std::set<std::string>{"3v3", "4v5", "5v6", "4v4", "5v5", "6v6", "6v7"});
    const auto report = nlohmann::json::parse(slurp(dir.path / "eval1" / "report.json"));
    CHECK(report.at("tasks").size() == 7);
    CHECK(report.at("tasks")[0].at("per_seed").size() == 3);
    CHECK(report.at("input_hash").get<std::string>().size() == 40);

    // A different seed list changes the hash embedded in every artifact.
    ExperimentConfig other = c;
    apply_seed_override(other, "5");
    CHECK(config_hash(other) != hash);
  }

  SUBCASE("mode switches are visible in the artifacts") {
    train(c, "fixed_ratio:0.5", dir.path / "fixed");
    std::ifstream in(dir.path / "fixed" / "seed_0" / "metrics.csv");
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
      const auto first = line.find(',');
      const std::string ratio = line.substr(first + 1, line.find(',', first + 1) - first - 1);
      if (!ratio.empty()) {
        CHECK(ratio == "0.5");
        ++rows;
      }
    }
    CHECK(rows > 0);

    const auto ds = load_source_data(c, c.data_dir);
    const ParamBundle stage1 = run_stage1(c, ds, 0);
    const SeedRun frozen = run_stage2(c, ds, stage1, 0, policy::parse_variant("no_refine"));
    CHECK(fingerprint(frozen.params, "dec.head.") == fingerprint(stage1, "dec.head."));
    CHECK(frozen.actor == policy::Actor::Frozen);
  }

  SUBCASE("eval input errors") {
    CHECK_THROWS_AS(cmd_eval(dir.path / "missing", c, dir.path / "e"), DataError);
    train(c, "bc", dir.path / "bc");
    ExperimentConfig wider = c;
    wider.hidden = 12;
    CHECK_THROWS_AS(cmd_eval(dir.path / "bc", wider, dir.path / "e"), ConfigError);
    // A bare parameter file is evaluated once per configured seed.
    const RunReport r = cmd_eval(dir.path / "bc" / "seed_1" / "params.txt", c, dir.path / "e");
    CHECK(r.tasks.front().win_rates.size() == 3);
  }
}

TEST_CASE("randomly initialized policies play like a uniformly random controller on unseen tasks") {
  ExperimentConfig c;
  c.eval_episodes = 32;
  c.source_tasks = {"3v3"};
  c.unseen_tasks = {"4v4", "5v5"};
  const skills::NetConfig net = net_config(c);
  TrainedModel model;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(100 + s);
    ParamBundle stage1;
    skills::init_skill_model(stage1, net, rng);
    model.seeds.push_back(s);
    model.params.push_back(policy::init_policy(stage1, net, 32, rng));
  }
  const RunReport report = evaluate(model, c);
  for (const auto& t : report.tasks) {
    if (!t.unseen) continue;
    // Monte-Carlo estimate of a controller picking uniformly among valid actions.
    const double oracle = arena::evaluate_controller(arena::TaskSpec::parse(t.task), 0.0, 4000, 77).win_rate;
    INFO(t.task << ": policy " << t.win_mean << ", uniform " << oracle);
    CHECK(std::abs(t.win_mean - oracle) <= 0.15);
  }
}

TEST_CASE("ablation grids") {
  auto names = [](const std::vector<AblationRow>& rows) {
    std::vector<std::string> out;
    for (const auto& r : rows) out.push_back(r.variant);
    return out;
  };
  CHECK(names(ablation_grid("ratio")) ==
        std::vector<std::string>{"hygen", "fixed_ratio:0.2", "fixed_ratio:0.5", "fixed_ratio:0.8"});
  CHECK(names(ablation_grid("refine")) == std::vector<std::string>{"hygen", "no_refine"});
  CHECK(names(ablation_grid("cql")) == std::vector<std::string>{"cql:dynamic", "cql:fixed", "cql:none"});
  const auto skills = ablation_grid("skills");
  std::vector<int> sizes;
  for (const auto& r : skills) {
    sizes.push_back(r.n_skills);
    CHECK(r.is_default == (r.n_skills == 4));
  }
  CHECK(sizes == std::vector<int>{1, 2, 3, 4, 5, 6, 8});
  CHECK_THROWS_AS(ablation_grid("heads"), ConfigError);
  for (const char* which : {"ratio", "refine", "cql"}) {
    int defaults = 0;
    for (const auto& r : ablation_grid(which)) defaults += r.is_default;
    CHECK(defaults == 1);
  }

  std::vector<AblationRow> rows = ablation_grid("refine");
  rows[0].source = {0.1, 0.2, 0.3, 0.4, 0.5};
  rows[0].unseen = {0.0, 0.0, 0.5, 0.5, 1.0};
  rows[1].source = {0.3, 0.3, 0.3, 0.3, 0.3};
  rows[1].unseen = {0.2, 0.2, 0.2, 0.2, 0.2};
  std::ostringstream csv;
  write_ablation_csv(rows, "refine", "abc", csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "# config_hash=abc");
  std::getline(in, line);
  CHECK(line == "which,variant,n_skills,default,n_seeds,source_mean,source_std,unseen_mean,unseen_std");
  std::getline(in, line);
  CHECK(line.rfind("refine,hygen,4,1,5,0.29999999999999999,0.15811388300841897,", 0) == 0);
  std::getline(in, line);
  CHECK(line == "refine,no_refine,4,0,5,0.29999999999999999,0,0.20000000000000001,0");
}

TEST_CASE("ablate runs its grid and writes the comparison table") {
  TempDir dir("ablate");
  ExperimentConfig c = small_config(dir.path / "data");
  c.seeds = {0, 1};
  c.unseen_tasks = {"4v4"};
  gen_data(c, dir.path / "data");
  const auto rows = ablate(c, "refine", dir.path / "out");
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.source.size() == 2);
    CHECK(r.unseen.size() == 2);
  }
  CHECK(fs::exists(dir.path / "out" / "no_refine" / "seed_1" / "metrics.csv"));
  CHECK(line_count(dir.path / "out" / "ablation_refine.csv") == 4);
  const std::string first = slurp(dir.path / "out" / "ablation_refine.csv");
  ablate(c, "refine", dir.path / "out");
  CHECK(slurp(dir.path / "out" / "ablation_refine.csv") == first);
}
