#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hygen/arena/arena.hpp"
#include "hygen/errors.hpp"

using namespace hygen;
using namespace hygen::arena;

namespace {

// Picks a uniformly random valid action for every ally.
std::vector<int> random_joint(const Arena& a, std::mt19937_64& rng) {
  std::vector<int> out;
  for (int i = 0; i < a.task().n_allies; ++i) {
    const ActionMask m = a.action_mask(i);
    std::vector<int> valid;
    for (std::size_t k = 0; k < m.size(); ++k)
      if (m[k]) valid.push_back(static_cast<int>(k));
    out.push_back(valid[std::uniform_int_distribution<std::size_t>(0, valid.size() - 1)(rng)]);
  }
  return out;
}

}  // namespace

TEST_CASE("task names parse and validate") {
  const TaskSpec t = TaskSpec::parse("5v6");
  CHECK(t.n_allies == 5);
  CHECK(t.n_enemies == 6);
  CHECK(t.name() == "5v6");
  CHECK_THROWS_AS(TaskSpec::parse("five"), ConfigError);
  CHECK_THROWS_AS(TaskSpec::parse("0v3"), ConfigError);
  TaskSpec bad = t;
  bad.attack_range = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("reset is deterministic and sized by the task") {
  Arena a(TaskSpec::parse("3v3"));
  Arena b(TaskSpec::parse("3v3"));
  a.reset(0);
  b.reset(0);
  for (int i = 0; i < 3; ++i) CHECK(a.observation(i) == b.observation(i));
  CHECK(a.global_state() == b.global_state());
  CHECK(a.steps_taken() == 0);
  for (const auto& u : a.allies()) {
    CHECK(u.health == 10);
    CHECK(u.x < 4);
  }
  for (const auto& u : a.enemies()) CHECK(u.x >= 12);

  Arena one(TaskSpec::parse("1v1"));
  one.reset(3);
  CHECK(one.observation(0).size() == 2u * kTokenFeatures);

  Arena big(TaskSpec::parse("5v6"));
  big.reset(1);
  for (int i = 0; i < 5; ++i) CHECK(big.action_mask(i).size() == 11u);
}

TEST_CASE("team larger than the placeable cells is a configuration error") {
  TaskSpec t = TaskSpec::parse("3v1");
  t.width = 4;
  t.height = 2;
  t.attack_range = 1;
  t.sight = 2;
  Arena a(t);
  CHECK_THROWS_AS(a.reset(0), ConfigError);
}

TEST_CASE("a flawless extermination returns exactly 20") {
  for (const char* name : {"1v1", "3v2", "5v3"}) {
    const TaskSpec t = TaskSpec::parse(name);
    Arena a(t);
    a.reset(0);
    for (int j = 0; j < t.n_enemies; ++j) a.set_unit(Side::Enemy, j, 8, 8, t.health);
    for (int i = 0; i < t.n_allies; ++i) a.set_unit(Side::Ally, i, 6, 8, t.health);
    double ret = 0;
    while (!a.done()) {
      std::vector<int> acts(t.n_allies);
      for (int i = 0; i < t.n_allies; ++i) acts[i] = ScriptedController::greedy_action(a, i);
      ret += a.step(acts).reward;
    }
    REQUIRE(a.won());
    CHECK(std::abs(ret - 20.0) < 1e-9);
  }
}

TEST_CASE("one attack on a full-health enemy rewards D over the normalizer") {
  Arena a(TaskSpec::parse("3v3"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 5, 5, 10);
  a.set_unit(Side::Enemy, 0, 7, 5, 10);
  const double z = (3 * 10 + 5 * 3 + 20) / 20.0;
  CHECK(a.reward_scale() == z);
  std::vector<int> acts = {kAttack0, kNoop, kNoop};
  const StepResult r = a.step(acts);
  CHECK(r.reward == 2.0 / z);
  CHECK_FALSE(r.done);
  CHECK(a.enemies()[0].health == 8);
}

TEST_CASE("moves clamp to the grid edge") {
  Arena a(TaskSpec::parse("1v1"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 0, 4, 10);
  std::vector<int> acts = {kWest};
  a.step(acts);
  CHECK(a.allies()[0].x == 0);
  CHECK(a.allies()[0].y == 4);
  a.set_unit(Side::Ally, 0, 0, 0, 10);
  acts = {kNorth};
  a.step(acts);
  CHECK(a.allies()[0].y == 0);
}

TEST_CASE("masked actions are rejected naming agent and action") {
  Arena a(TaskSpec::parse("3v3"));
  a.reset(0);
  std::vector<int> acts = {kNoop, kAttack0 + 2, kNoop};
  try {
    a.step(acts);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    const std::string what = e.what();
    CHECK(what.find("agent 1") != std::string::npos);
    CHECK(what.find("action 7") != std::string::npos);
  }
}

TEST_CASE("dead agents see nothing and may only noop") {
  Arena a(TaskSpec::parse("3v3"));
  a.reset(2);
  a.set_unit(Side::Ally, 1, 2, 2, 0);
  const ActionMask m = a.action_mask(1);
  CHECK(m[kNoop]);
  CHECK(std::count(m.begin(), m.end(), true) == 1);
  const auto obs = a.observation(1);
  CHECK(std::all_of(obs.begin(), obs.end(), [](double v) { return v == 0.0; }));
  // The agent's token is hidden from its teammates too.
  const auto o0 = a.observation(0);
  for (int f = 0; f < kTokenFeatures; ++f) CHECK(o0[kTokenFeatures + f] == 0.0);
}

TEST_CASE("observation tokens follow the documented layout") {
  Arena a(TaskSpec::parse("2v2"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 4, 4, 10);
  a.set_unit(Side::Ally, 1, 5, 6, 6);
  a.set_unit(Side::Enemy, 0, 7, 4, 4);
  a.set_unit(Side::Enemy, 1, 15, 15, 10);
  const auto o = a.observation(0);
  const double self[kTokenFeatures] = {0, 0, 1, 1, 1, 0, 0, 1};
  const double ally[kTokenFeatures] = {1.0 / 16, 2.0 / 16, 0.6, 0, 1, 0, 2.0 / 6, 1};
  const double enemy[kTokenFeatures] = {3.0 / 16, 0, 0.4, 0, 0, 1, 3.0 / 6, 1};
  for (int f = 0; f < kTokenFeatures; ++f) {
    CHECK(o[f] == self[f]);
    CHECK(o[kTokenFeatures + f] == ally[f]);
    CHECK(o[2 * kTokenFeatures + f] == enemy[f]);
    CHECK(o[3 * kTokenFeatures + f] == 0.0);  // out of sight
  }
  const ActionMask m = a.action_mask(0);
  CHECK(m[kAttack0]);
  CHECK_FALSE(m[kAttack0 + 1]);
}

TEST_CASE("enemies hold until an ally is in sight, then close in or attack the weakest") {
  Arena a(TaskSpec::parse("2v1"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 0, 0, 10);
  a.set_unit(Side::Ally, 1, 0, 15, 10);
  a.set_unit(Side::Enemy, 0, 12, 8, 10);
  std::vector<int> noop = {kNoop, kNoop};
  a.step(noop);
  CHECK(a.enemies()[0].x == 12);
  CHECK(a.enemies()[0].y == 8);

  a.set_unit(Side::Ally, 0, 7, 8, 10);
  a.step(noop);
  CHECK(a.enemies()[0].x == 11);  // west, toward the ally

  a.set_unit(Side::Ally, 0, 9, 8, 10);
  a.set_unit(Side::Ally, 1, 10, 9, 6);
  a.step(noop);
  CHECK(a.allies()[0].health == 10);
  CHECK(a.allies()[1].health == 4);
}

TEST_CASE("greedy controller attacks the single in-range enemy") {
  Arena a(TaskSpec::parse("1v3"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 5, 5, 10);
  a.set_unit(Side::Enemy, 0, 15, 15, 10);
  a.set_unit(Side::Enemy, 1, 7, 6, 10);
  a.set_unit(Side::Enemy, 2, 15, 0, 10);
  ScriptedController c(1.0, 9);
  for (int k = 0; k < 20; ++k) CHECK(c.act(a, 0) == kAttack0 + 1);
}

TEST_CASE("greedy movement breaks ties in N, S, E, W order") {
  UnitState from{5, 5, 10, true, Side::Ally};
  CHECK(move_toward(from, UnitState{5, 1, 10, true, Side::Enemy}) == kNorth);
  CHECK(move_toward(from, UnitState{5, 9, 10, true, Side::Enemy}) == kSouth);
  CHECK(move_toward(from, UnitState{9, 9, 10, true, Side::Enemy}) == kSouth);
  CHECK(move_toward(from, UnitState{9, 5, 10, true, Side::Enemy}) == kEast);
  CHECK(move_toward(from, UnitState{1, 5, 10, true, Side::Enemy}) == kWest);
  CHECK(move_toward(from, from) == kNoop);
}

TEST_CASE("strength 0 draws uniformly over the valid actions") {
  Arena a(TaskSpec::parse("3v3"));
  a.reset(0);
  a.set_unit(Side::Ally, 0, 8, 8, 10);
  a.set_unit(Side::Enemy, 0, 10, 8, 10);
  a.set_unit(Side::Enemy, 1, 9, 10, 10);
  const ActionMask m = a.action_mask(0);
  const int k = static_cast<int>(std::count(m.begin(), m.end(), true));
  REQUIRE(k == 7);
  ScriptedController c(0.0, 123);
  const int n = 100000;
  std::vector<int> counts(m.size(), 0);
  for (int d = 0; d < n; ++d) ++counts[static_cast<std::size_t>(c.act(a, 0))];
  const double p = 1.0 / k;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (std::size_t act = 0; act < m.size(); ++act) {
    if (!m[act]) {
      CHECK(counts[act] == 0);
    } else {
      CHECK(std::abs(counts[act] - n * p) < 3 * sigma);
    }
  }
}

TEST_CASE("identical seeds and actions replay bit-exactly") {
  const TaskSpec t = TaskSpec::parse("4v5");
  for (std::uint64_t seed : {0u, 7u, 99u}) {
    Arena a(t), b(t);
    a.reset(seed);
    b.reset(seed);
    std::mt19937_64 rng(seed);
    while (!a.done()) {
      const auto acts = random_joint(a, rng);
      const StepResult ra = a.step(acts);
      const StepResult rb = b.step(acts);
      CHECK(ra.reward == rb.reward);
      CHECK(ra.done == rb.done);
      CHECK(a.global_state() == b.global_state());
      for (int i = 0; i < t.n_allies; ++i) CHECK(a.observation(i) == b.observation(i));
    }
  }
}

TEST_CASE("health, rewards and returns stay in range and episodes end by the limit") {
  for (const char* name : {"3v3", "4v5", "5v6", "6v7"}) {
    const TaskSpec t = TaskSpec::parse(name);
    for (double p : {0.0, 0.5, 1.0}) {
      for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Arena a(t);
        a.reset(seed);
        ScriptedController c(p, seed + 100);
        double ret = 0;
        while (!a.done()) {
          const StepResult r = a.step(c.act_all(a));
          CHECK(r.reward >= 0.0);
          CHECK(r.reward <= 20.0);
          ret += r.reward;
          for (const auto& u : a.allies()) CHECK((u.health >= 0 && u.alive == (u.health > 0)));
          for (const auto& u : a.enemies()) CHECK((u.health >= 0 && u.alive == (u.health > 0)));
        }
        CHECK(a.steps_taken() <= t.episode_limit);
        CHECK(ret >= 0.0);
        CHECK(ret <= 20.0 + 1e-9);
      }
    }
  }
}

TEST_CASE("relabeling enemies permutes their tokens and attack entries only") {
  const TaskSpec t = TaskSpec::parse("3v4");
  const std::vector<int> perm = {2, 0, 3, 1};  // enemy j in `a` is enemy perm[j] in `b`
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Arena a(t), b(t);
    a.reset(seed);
    b.reset(seed);
    for (int j = 0; j < 4; ++j) {
      const UnitState& e = a.enemies()[j];
      b.set_unit(Side::Enemy, perm[j], e.x, e.y, e.health);
    }
    std::mt19937_64 rng(seed);
    while (!a.done()) {
      for (int i = 0; i < t.n_allies; ++i) {
        const auto oa = a.observation(i);
        const auto ob = b.observation(i);
        const ActionMask ma = a.action_mask(i);
        const ActionMask mb = b.action_mask(i);
        for (int k = 0; k < kTokenFeatures * t.n_allies; ++k) CHECK(oa[k] == ob[k]);
        for (int j = 0; j < 4; ++j) {
          for (int f = 0; f < kTokenFeatures; ++f) {
            CHECK(oa[(t.n_allies + j) * kTokenFeatures + f] == ob[(t.n_allies + perm[j]) * kTokenFeatures + f]);
          }
          CHECK(ma[kAttack0 + j] == mb[kAttack0 + perm[j]]);
        }
        for (int k = 0; k < kAttack0; ++k) CHECK(ma[k] == mb[k]);
      }
      auto acts = random_joint(a, rng);
      std::vector<int> mapped = acts;
      for (auto& x : mapped)
        if (x >= kAttack0) x = kAttack0 + perm[x - kAttack0];
      const StepResult ra = a.step(acts);
      const StepResult rb = b.step(mapped);
      CHECK(ra.reward == rb.reward);
      CHECK(ra.done == rb.done);
      CHECK(ra.win == rb.win);
    }
  }
}

TEST_CASE("scripted strength calibration: expert wins, a medium strength exists") {
  const TaskSpec t = TaskSpec::parse("3v3");
  const RolloutSummary expert = evaluate_controller(t, 0.95, 500, 2024);
  CHECK(expert.win_rate >= 0.90);
  const auto sweep = sweep_strength(t, 0.05, 500, 2024);
  CHECK(sweep.size() == 21u);
  const RolloutSummary medium = pick_strength(sweep, 0.40, 0.60);
  CHECK(medium.win_rate >= 0.40);
  CHECK(medium.win_rate <= 0.60);
  CHECK(medium.strength < 0.95);
  MESSAGE("3v3 expert win rate " << expert.win_rate << ", medium p=" << medium.strength << " wins "
                                 << medium.win_rate);
  CHECK_THROWS_AS(pick_strength(sweep, 2.0, 3.0), DataError);
}
