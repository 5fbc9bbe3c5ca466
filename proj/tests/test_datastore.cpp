#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "hygen/datastore/datastore.hpp"
#include "hygen/errors.hpp"

using namespace hygen;
using namespace hygen::data;
using arena::TaskSpec;

namespace {

EpisodeRecord with_skills(EpisodeRecord ep, int fill) {
  ep.skills = IndexMatrix::Constant(ep.length(), ep.n_agents(), fill);
  return ep;
}

std::string serialize(const MultiTaskDataset& d) {
  std::ostringstream out;
  write_dataset(d, out);
  return out.str();
}

}  // namespace

TEST_CASE("expert data on 3v3 wins at least 90% of 2000 episodes") {
  GenerationSummary summary;
  const auto d = generate_dataset(TaskSpec::parse("3v3"), 0.95, Quality::Expert, 2000, 11, &summary);
  CHECK(d.size() == 2000u);
  CHECK(summary.win_rate >= 0.90);
  int wins = 0;
  for (const auto& e : d.episodes) wins += e.won();
  CHECK(wins == static_cast<int>(std::lround(summary.win_rate * 2000)));
  // Rollouts match the controller evaluator seed for seed.
  const auto eval = arena::evaluate_controller(TaskSpec::parse("3v3"), 0.95, 2000, 11);
  CHECK(eval.win_rate == summary.win_rate);
  CHECK(eval.mean_return == doctest::Approx(summary.mean_return).epsilon(1e-12));
  MESSAGE("expert 3v3 win rate " << summary.win_rate);
}

TEST_CASE("a single generated episode is complete and valid") {
  const auto d = generate_dataset(TaskSpec::parse("4v5"), 0.5, Quality::Medium, 1, 3);
  REQUIRE(d.size() == 1u);
  const EpisodeRecord& e = d.episodes[0];
  CHECK(e.done.back() == 1);
  CHECK(e.length() <= 60);
  CHECK(e.obs.rows() == e.length() * 4);
  CHECK(e.obs.cols() == 9 * 8);
  CHECK(e.masks.cols() == 10);
  CHECK_FALSE(e.has_skills());
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("generation is deterministic to the byte") {
  const auto a = generate_dataset(TaskSpec::parse("3v3"), 0.7, Quality::Medium, 20, 5);
  const auto b = generate_dataset(TaskSpec::parse("3v3"), 0.7, Quality::Medium, 20, 5);
  CHECK(serialize(a) == serialize(b));
  const auto c = generate_dataset(TaskSpec::parse("3v3"), 0.7, Quality::Medium, 20, 6);
  CHECK(serialize(a) != serialize(c));
}

TEST_CASE("NDJSON round trip is exact, including skills") {
  auto d = generate_dataset(TaskSpec::parse("3v3"), 0.8, Quality::Medium, 6, 1);
  d.append(generate_dataset(TaskSpec::parse("5v6"), 0.8, Quality::Medium, 4, 2));
  d.episodes[2] = with_skills(d.episodes[2], 3);
  const std::string text = serialize(d);
  std::istringstream in(text);
  const auto back = read_dataset(in);
  REQUIRE(back.size() == d.size());
  for (std::size_t k = 0; k < d.size(); ++k) CHECK(back.episodes[k] == d.episodes[k]);
  CHECK(back.tasks == d.tasks);
  CHECK(back.quality == Quality::Medium);
  CHECK(serialize(back) == text);
  CHECK(back.count(TaskSpec::parse("5v6")) == 4u);
  // One episode per line, 17 significant digits.
  CHECK(std::count(text.begin(), text.end(), '\n') == 10);
  CHECK(text.find("0.33333333333333331") != std::string::npos);
}

TEST_CASE("empty input is an empty dataset") {
  std::istringstream in("");
  CHECK(read_dataset(in).empty());
}

TEST_CASE("a truncated final line is reported by number") {
  const auto d = generate_dataset(TaskSpec::parse("3v3"), 0.8, Quality::Expert, 3, 1);
  std::string text = serialize(d);
  text.resize(text.size() - 40);
  std::istringstream in(text);
  try {
    read_dataset(in);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3u);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("schema violations name the field") {
  const auto d = generate_dataset(TaskSpec::parse("3v3"), 0.8, Quality::Expert, 1, 1);
  const std::string good = serialize(d);
  auto expect_field = [](std::string text, const std::string& field) {
    std::istringstream in(text);
    try {
      read_dataset(in);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 1u);
      CHECK_MESSAGE(std::string(e.what()).find(field) != std::string::npos, e.what());
    }
  };
  std::string missing = good;
  missing.replace(missing.find("\"reward\":"), 9, "\"rewardX\":");
  expect_field(missing, "steps[0].reward");
  std::string bad_task = good;
  bad_task.replace(bad_task.find("3v3"), 3, "3x3");
  expect_field(bad_task, "task");
  std::string bad_type = good;
  bad_type.replace(bad_type.find("\"done\":false"), 12, "\"done\":0");
  expect_field(bad_type, "steps[0].done");
  std::string short_state = good;
  short_state.replace(short_state.find("\"state\":["), 9, "\"state\":[1,");
  expect_field(short_state, "steps[0].state");
}

TEST_CASE("hybrid ratio follows the linear decay schedule") {
  CHECK(hybrid_ratio(0, 1.0, 0.1, 5000) == 1.0);
  CHECK(hybrid_ratio(2500, 1.0, 0.1, 5000) == doctest::Approx(0.55).epsilon(1e-15));
  CHECK(hybrid_ratio(5000, 1.0, 0.1, 5000) == 0.1);
  CHECK(hybrid_ratio(1000000, 1.0, 0.1, 5000) == 0.1);
  double prev = 2.0;
  for (std::int64_t t = 0; t <= 100000; t += 7) {
    const double r = hybrid_ratio(t, 1.0, 0.1, 5000);
    CHECK(r <= prev);
    CHECK(r >= 0.1);
    CHECK(r <= 1.0);
    prev = r;
  }
  CHECK_THROWS_AS(hybrid_ratio(0, 0.1, 0.5, 10), ConfigError);
  CHECK_THROWS_AS(hybrid_ratio(0, 1.0, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(hybrid_ratio(-1, 1.0, 0.1, 10), ConfigError);
  CHECK_THROWS_AS(hybrid_ratio(0, 1.5, 0.1, 10), ConfigError);
}

TEST_CASE("online buffer evicts first in, first out") {
  const auto d = generate_dataset(TaskSpec::parse("3v3"), 0.5, Quality::Medium, 1, 4);
  OnlineBuffer small(3);
  for (int k = 0; k < 3; ++k) push_online(small, with_skills(d.episodes[0], k));
  CHECK(small.size() == 3u);
  push_online(small, with_skills(d.episodes[0], 3));
  CHECK(small.size() == 3u);
  CHECK(small.at(0).skills(0, 0) == 1);
  CHECK(small.id(0) == 1u);
  CHECK(small.inserted() == 4u);

  OnlineBuffer empty(2000);
  push_online(empty, with_skills(d.episodes[0], 0));
  CHECK(empty.size() == 1u);

  OnlineBuffer big(2000);
  for (int k = 0; k < 2001; ++k) push_online(big, with_skills(d.episodes[0], k % 4));
  CHECK(big.size() == 2000u);
  CHECK(big.id(0) == 1u);  // insertion 0 is gone
  CHECK(big.id(1999) == 2000u);

  CHECK_THROWS_AS(push_online(big, d.episodes[0]), ContractError);
}

TEST_CASE("hybrid batches follow the rounding rule") {
  auto d = generate_dataset(TaskSpec::parse("3v3"), 0.5, Quality::Medium, 10, 4);
  OnlineBuffer buf(100);
  for (int k = 0; k < 50; ++k) push_online(buf, with_skills(d.episodes[k % 10], 0));
  Rng rng(0);
  auto count = [](const HybridBatch& b, Origin o) {
    return std::count_if(b.items.begin(), b.items.end(), [&](const BatchItem& it) { return it.origin == o; });
  };
  HybridBatch b = sample_hybrid(d, buf, 32, 0.5, rng);
  CHECK(count(b, Origin::Offline) == 16);
  CHECK(count(b, Origin::Online) == 16);
  b = sample_hybrid(d, buf, 32, 1.0, rng);
  CHECK(count(b, Origin::Offline) == 32);
  b = sample_hybrid(d, buf, 32, 0.1, rng);
  CHECK(b.n_offline == 3);
  CHECK(count(b, Origin::Offline) == 3);
  CHECK(count(b, Origin::Online) == 29);
  CHECK(offline_count(4, 0.125) == 1);  // 0.5 rounds away from zero
  CHECK(offline_count(4, 0.375) == 2);  // 1.5 -> 2

  std::mt19937_64 gen(42);
  for (int k = 0; k < 1000; ++k) {
    const int batch = std::uniform_int_distribution<int>(1, 256)(gen);
    const double ratio = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const HybridBatch hb = sample_hybrid(d, buf, batch, ratio, rng);
    const double x = ratio * batch;
    const int expected = static_cast<int>(x - std::floor(x) >= 0.5 ? std::floor(x) + 1 : std::floor(x));
    REQUIRE(static_cast<int>(hb.items.size()) == batch);
    CHECK(hb.n_offline == expected);
    CHECK(hb.n_offline + hb.n_online == batch);
    if (static_cast<std::size_t>(hb.n_online) <= buf.size()) CHECK(count(hb, Origin::Offline) == expected);
  }
}

TEST_CASE("draws cover both pools uniformly with replacement") {
  auto d = generate_dataset(TaskSpec::parse("3v3"), 0.5, Quality::Medium, 4, 4);
  OnlineBuffer buf(10);
  for (int k = 0; k < 4; ++k) push_online(buf, with_skills(d.episodes[k], 0));
  Rng rng(3);
  std::vector<int> off(4, 0), on(4, 0);
  const int rounds = 5000;
  for (int r = 0; r < rounds; ++r) {
    const HybridBatch b = sample_hybrid(d, buf, 8, 0.5, rng);
    for (const auto& it : b.items) (it.origin == Origin::Offline ? off : on)[it.key]++;
  }
  const double n = rounds * 4.0;
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (int k = 0; k < 4; ++k) {
    CHECK(std::abs(off[k] - n / 4) < 4 * sigma);
    CHECK(std::abs(on[k] - n / 4) < 4 * sigma);
  }
}

TEST_CASE("an underfilled buffer is backfilled from the dataset") {
  auto d = generate_dataset(TaskSpec::parse("3v3"), 0.5, Quality::Medium, 5, 4);
  OnlineBuffer buf(10);
  Rng rng(1);
  HybridBatch b = sample_hybrid(d, buf, 32, 0.1, rng);
  CHECK(b.n_offline == 3);
  CHECK(b.backfilled == 29);
  CHECK(b.items.size() == 32u);
  for (const auto& it : b.items) CHECK(it.origin == Origin::Offline);

  push_online(buf, with_skills(d.episodes[0], 1));
  push_online(buf, with_skills(d.episodes[1], 1));
  b = sample_hybrid(d, buf, 32, 0.1, rng);
  CHECK(b.backfilled == 27);
  CHECK(std::count_if(b.items.begin(), b.items.end(), [](const BatchItem& it) { return it.origin == Origin::Online; }) ==
        2);

  MultiTaskDataset none;
  b = sample_hybrid(none, buf, 8, 0.0, rng);
  CHECK(b.items.size() == 8u);
  CHECK(b.backfilled == 0);
  OnlineBuffer nothing(4);
  CHECK_THROWS_AS(sample_hybrid(none, nothing, 8, 0.5, rng), DataError);
  CHECK_THROWS_AS(sample_hybrid(none, buf, 8, 0.5, rng), DataError);
}

TEST_CASE("datasets reject undeclared tasks") {
  auto d = generate_dataset(TaskSpec::parse("3v3"), 0.5, Quality::Medium, 2, 4);
  d.tasks = {TaskSpec::parse("4v5")};
  CHECK_THROWS_AS(d.validate(), DataError);
  CHECK_THROWS_AS(parse_quality("great"), ConfigError);
}
