#include "hygen/arena/arena.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <regex>

#include "hygen/errors.hpp"
#include "hygen/numcore/rng.hpp"

namespace hygen::arena {
namespace {

constexpr int kDx[5] = {0, 0, 0, 1, -1};
constexpr int kDy[5] = {0, -1, 1, 0, 0};

int manhattan(const UnitState& a, const UnitState& b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

}  // namespace

std::string TaskSpec::name() const {
  return std::to_string(n_allies) + "v" + std::to_string(n_enemies);
}

TaskSpec TaskSpec::parse(const std::string& name) {
  static const std::regex pattern(R"((\d+)v(\d+))");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) {
    throw ConfigError("task name must look like 3v3, got '" + name + "'");
  }
  TaskSpec t;
  t.n_allies = std::stoi(m[1]);
  t.n_enemies = std::stoi(m[2]);
  t.validate();
  return t;
}

void TaskSpec::validate() const {
  if (n_allies < 1 || n_enemies < 1) throw ConfigError("task " + name() + ": teams must be nonempty");
  if (episode_limit < 1) throw ConfigError("task " + name() + ": episode_limit must be >= 1");
  if (width < 4 || height < 1) throw ConfigError("task " + name() + ": grid too small");
  if (health < 1 || damage < 1) throw ConfigError("task " + name() + ": health and damage must be positive");
  if (attack_range < 0 || attack_range > sight) {
    throw ConfigError("task " + name() + ": attack range must lie in [0, sight]");
  }
}

int chebyshev(const UnitState& a, const UnitState& b) {
  return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y));
}

int move_toward(const UnitState& from, const UnitState& to) {
  const int cheb = chebyshev(from, to);
  const int man = manhattan(from, to);
  for (int pass = 0; pass < 2; ++pass) {
    for (int a = kNorth; a <= kWest; ++a) {
      UnitState moved = from;
      moved.x += kDx[a];
      moved.y += kDy[a];
      const bool better = pass == 0 ? chebyshev(moved, to) < cheb : manhattan(moved, to) < man;
      if (better) return a;
    }
  }
  return kNoop;
}

Arena::Arena(TaskSpec task) : task_(task) { task_.validate(); }

void Arena::reset(std::uint64_t seed) {
  const int quarter = task_.width / 4;
  const int cells = quarter * task_.height;
  if (task_.n_allies > cells || task_.n_enemies > cells) {
    throw ConfigError("task " + task_.name() + ": team larger than the " + std::to_string(cells) +
                      " placeable cells");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> col(0, quarter - 1);
  std::uniform_int_distribution<int> shake(-1, 1);
  auto place = [&](std::vector<UnitState>& team, int n, Side side, int x0) {
    team.assign(static_cast<std::size_t>(n), UnitState{});
    for (int i = 0; i < n; ++i) {
      UnitState& u = team[static_cast<std::size_t>(i)];
      const int row = static_cast<int>((i + 0.5) * task_.height / n);
      u.x = x0 + col(rng);
      u.y = std::clamp(row + shake(rng), 0, task_.height - 1);
      u.health = task_.health;
      u.alive = true;
      u.side = side;
    }
  };
  place(allies_, task_.n_allies, Side::Ally, 0);
  place(enemies_, task_.n_enemies, Side::Enemy, task_.width - quarter);
  steps_ = 0;
  done_ = false;
  won_ = false;
}

void Arena::set_unit(Side side, int index, int x, int y, int health) {
  auto& team = side == Side::Ally ? allies_ : enemies_;
  if (index < 0 || index >= static_cast<int>(team.size())) throw ContractError("set_unit: bad index");
  if (x < 0 || x >= task_.width || y < 0 || y >= task_.height) {
    throw ContractError("set_unit: position outside the grid");
  }
  UnitState& u = team[static_cast<std::size_t>(index)];
  u.x = x;
  u.y = y;
  u.health = std::clamp(health, 0, task_.health);
  u.alive = u.health > 0;
  u.side = side;
}

double Arena::reward_scale() const {
  const double n = task_.n_enemies;
  return (n * task_.health + 5.0 * n + 20.0) / 20.0;
}

ActionMask Arena::action_mask(int agent) const {
  ActionMask mask(static_cast<std::size_t>(task_.n_actions()), false);
  const UnitState& self = allies_.at(static_cast<std::size_t>(agent));
  mask[kNoop] = true;
  if (!self.alive) return mask;
  for (int a = kNorth; a <= kWest; ++a) mask[static_cast<std::size_t>(a)] = true;
  for (int j = 0; j < task_.n_enemies; ++j) {
    const UnitState& e = enemies_[static_cast<std::size_t>(j)];
    const int d = chebyshev(self, e);
    mask[static_cast<std::size_t>(kAttack0 + j)] = e.alive && d <= task_.sight && d <= task_.attack_range;
  }
  return mask;
}

std::vector<double> Arena::observation(int agent) const {
  std::vector<double> obs(static_cast<std::size_t>(task_.n_entities() * kTokenFeatures), 0.0);
  const UnitState& self = allies_.at(static_cast<std::size_t>(agent));
  if (!self.alive) return obs;
  auto write = [&](int slot, const UnitState& u, bool is_self) {
    const int d = chebyshev(self, u);
    if (!u.alive || d > task_.sight) return;
    double* tok = obs.data() + static_cast<std::size_t>(slot * kTokenFeatures);
    tok[0] = static_cast<double>(u.x - self.x) / task_.width;
    tok[1] = static_cast<double>(u.y - self.y) / task_.height;
    tok[2] = static_cast<double>(u.health) / task_.health;
    tok[3] = is_self ? 1.0 : 0.0;
    tok[4] = u.side == Side::Ally ? 1.0 : 0.0;
    tok[5] = u.side == Side::Enemy ? 1.0 : 0.0;
    tok[6] = static_cast<double>(d) / task_.sight;
    tok[7] = 1.0;
  };
  int slot = 0;
  write(slot++, self, true);
  for (int i = 0; i < task_.n_allies; ++i) {
    if (i != agent) write(slot++, allies_[static_cast<std::size_t>(i)], false);
  }
  for (const auto& e : enemies_) write(slot++, e, false);
  return obs;
}

std::vector<double> Arena::global_state() const {
  std::vector<double> s;
  s.reserve(static_cast<std::size_t>(task_.n_entities() * kStateFeatures));
  auto push = [&](const UnitState& u) {
    s.push_back(static_cast<double>(u.x) / task_.width);
    s.push_back(static_cast<double>(u.y) / task_.height);
    s.push_back(static_cast<double>(u.health) / task_.health);
    s.push_back(u.alive ? 1.0 : 0.0);
  };
  for (const auto& u : allies_) push(u);
  for (const auto& u : enemies_) push(u);
  return s;
}

std::vector<Arena::EnemyIntent> Arena::enemy_intents() const {
  std::vector<EnemyIntent> intents(enemies_.size());
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    const UnitState& e = enemies_[j];
    if (!e.alive) continue;
    int target = -1;
    int nearest = -1;
    for (int i = 0; i < task_.n_allies; ++i) {
      const UnitState& a = allies_[static_cast<std::size_t>(i)];
      if (!a.alive) continue;
      const int d = chebyshev(e, a);
      if (d <= task_.attack_range &&
          (target < 0 || a.health < allies_[static_cast<std::size_t>(target)].health)) {
        target = i;
      }
      if (d > task_.sight) continue;
      if (nearest < 0 || d < chebyshev(e, allies_[static_cast<std::size_t>(nearest)])) nearest = i;
    }
    intents[j].target = target;
    if (target < 0 && nearest >= 0) intents[j].move = move_toward(e, allies_[static_cast<std::size_t>(nearest)]);
  }
  return intents;
}

StepResult Arena::step(std::span<const int> actions) {
  if (done_) throw ContractError("step called on a finished episode");
  if (static_cast<int>(actions.size()) != task_.n_allies) {
    throw ContractError("expected " + std::to_string(task_.n_allies) + " actions, got " +
                        std::to_string(actions.size()));
  }
  for (int i = 0; i < task_.n_allies; ++i) {
    const int a = actions[static_cast<std::size_t>(i)];
    const ActionMask mask = action_mask(i);
    if (a < 0 || a >= task_.n_actions() || !mask[static_cast<std::size_t>(a)]) {
      throw ContractError("agent " + std::to_string(i) + " submitted unavailable action " +
                          std::to_string(a));
    }
  }

  // Every unit commits its intent from the same start-of-step snapshot.
  const std::vector<EnemyIntent> intents = enemy_intents();

  // (1) ally moves
  for (int i = 0; i < task_.n_allies; ++i) {
    const int a = actions[static_cast<std::size_t>(i)];
    if (a < kNorth || a > kWest) continue;
    UnitState& u = allies_[static_cast<std::size_t>(i)];
    u.x = std::clamp(u.x + kDx[a], 0, task_.width - 1);
    u.y = std::clamp(u.y + kDy[a], 0, task_.height - 1);
  }

  // (2) simultaneous ally attacks
  std::vector<int> incoming(enemies_.size(), 0);
  for (int i = 0; i < task_.n_allies; ++i) {
    const int a = actions[static_cast<std::size_t>(i)];
    if (a >= kAttack0) incoming[static_cast<std::size_t>(a - kAttack0)] += task_.damage;
  }
  int dealt = 0;
  int kills = 0;
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    UnitState& e = enemies_[j];
    if (incoming[j] == 0) continue;
    const int applied = std::min(e.health, incoming[j]);
    e.health -= applied;
    dealt += applied;
    if (e.health == 0) {
      e.alive = false;
      ++kills;
    }
  }

  // (3) surviving enemies carry out their intents; an attack lands only if the target is
  // still within range after the ally moves
  std::vector<int> to_allies(allies_.size(), 0);
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    UnitState& e = enemies_[j];
    const EnemyIntent& intent = intents[j];
    if (!e.alive) continue;
    if (intent.target >= 0) {
      const UnitState& a = allies_[static_cast<std::size_t>(intent.target)];
      if (chebyshev(e, a) <= task_.attack_range) to_allies[static_cast<std::size_t>(intent.target)] += task_.damage;
    } else {
      e.x = std::clamp(e.x + kDx[intent.move], 0, task_.width - 1);
      e.y = std::clamp(e.y + kDy[intent.move], 0, task_.height - 1);
    }
  }

  // (4) deaths
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    UnitState& a = allies_[i];
    if (!a.alive) continue;
    a.health = std::max(0, a.health - to_allies[i]);
    if (a.health == 0) a.alive = false;
  }

  ++steps_;
  const bool enemies_dead = std::none_of(enemies_.begin(), enemies_.end(), [](const UnitState& u) { return u.alive; });
  const bool allies_dead = std::none_of(allies_.begin(), allies_.end(), [](const UnitState& u) { return u.alive; });
  won_ = enemies_dead;
  done_ = enemies_dead || allies_dead || steps_ >= task_.episode_limit;

  StepResult r;
  r.win = won_;
  r.done = done_;
  r.reward = (dealt + 5.0 * kills + (won_ ? 20.0 : 0.0)) / reward_scale();
  return r;
}

ScriptedController::ScriptedController(double strength, std::uint64_t seed)
    : strength_(strength), rng_(seed) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("controller strength must lie in [0, 1]");
}

int ScriptedController::greedy_action(const Arena& arena, int agent) {
  const UnitState& self = arena.allies().at(static_cast<std::size_t>(agent));
  if (!self.alive) return kNoop;
  const ActionMask mask = arena.action_mask(agent);
  const auto& enemies = arena.enemies();
  int target = -1;
  for (int j = 0; j < static_cast<int>(enemies.size()); ++j) {
    if (!mask[static_cast<std::size_t>(kAttack0 + j)]) continue;
    if (target < 0 || enemies[static_cast<std::size_t>(j)].health < enemies[static_cast<std::size_t>(target)].health) {
      target = j;
    }
  }
  if (target >= 0) return kAttack0 + target;
  int nearest = -1;
  for (int j = 0; j < static_cast<int>(enemies.size()); ++j) {
    const UnitState& e = enemies[static_cast<std::size_t>(j)];
    if (!e.alive) continue;
    if (nearest < 0 || chebyshev(self, e) < chebyshev(self, enemies[static_cast<std::size_t>(nearest)])) nearest = j;
  }
  if (nearest < 0) return kNoop;
  return move_toward(self, enemies[static_cast<std::size_t>(nearest)]);
}

int ScriptedController::act(const Arena& arena, int agent) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng_) < strength_) return greedy_action(arena, agent);
  const ActionMask mask = arena.action_mask(agent);
  std::vector<int> valid;
  for (std::size_t a = 0; a < mask.size(); ++a) {
    if (mask[a]) valid.push_back(static_cast<int>(a));
  }
  std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
  return valid[pick(rng_)];
}

std::vector<int> ScriptedController::act_all(const Arena& arena) {
  std::vector<int> out;
  out.reserve(arena.allies().size());
  for (int i = 0; i < static_cast<int>(arena.allies().size()); ++i) out.push_back(act(arena, i));
  return out;
}

RolloutSummary evaluate_controller(const TaskSpec& task, double strength, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("evaluate_controller needs at least one episode");
  RolloutSummary out;
  out.strength = strength;
  out.episodes = episodes;
  Arena arena(task);
  for (int k = 0; k < episodes; ++k) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(k));
    arena.reset(s);
    ScriptedController controller(strength, mix_seed(s, 1));
    double ret = 0;
    while (!arena.done()) ret += arena.step(controller.act_all(arena)).reward;
    out.win_rate += arena.won() ? 1.0 : 0.0;
    out.mean_return += ret;
    out.mean_length += arena.steps_taken();
  }
  out.win_rate /= episodes;
  out.mean_return /= episodes;
  out.mean_length /= episodes;
  return out;
}

std::vector<RolloutSummary> sweep_strength(const TaskSpec& task, double step, int episodes, std::uint64_t seed) {
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("sweep step must lie in (0, 1]");
  std::vector<RolloutSummary> out;
  const int n = static_cast<int>(std::lround(1.0 / step));
  for (int i = 0; i <= n; ++i) {
    out.push_back(evaluate_controller(task, std::min(1.0, i * step), episodes, seed));
  }
  return out;
}

RolloutSummary pick_strength(const std::vector<RolloutSummary>& sweep, double lo, double hi) {
  const double mid = 0.5 * (lo + hi);
  const RolloutSummary* best = nullptr;
  for (const auto& r : sweep) {
    if (r.win_rate < lo || r.win_rate > hi) continue;
    if (!best || std::abs(r.win_rate - mid) < std::abs(best->win_rate - mid)) best = &r;
  }
  if (!best) throw DataError("no controller strength reaches a win rate in the requested band");
  return *best;
}

}  // namespace hygen::arena
