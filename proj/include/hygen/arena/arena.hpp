#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hygen::arena {

/// One cooperative skirmish task.
struct TaskSpec {
  int n_allies = 3;
  int n_enemies = 3;
  int width = 16;
  int height = 16;
  int health = 10;
  int attack_range = 3;  // Chebyshev
  int damage = 2;
  int sight = 6;
  int episode_limit = 60;

  /// "<allies>v<enemies>", e.g. "5v6".
  std::string name() const;
  /// Parses "<allies>v<enemies>" with default unit parameters.
  static TaskSpec parse(const std::string& name);
  /// Throws ConfigError when an invariant does not hold.
  void validate() const;

  int n_entities() const { return n_allies + n_enemies; }
  int n_actions() const { return kNumMoves + n_enemies; }

  static constexpr int kNumMoves = 5;
  bool operator==(const TaskSpec&) const = default;
};

enum class Side { Ally, Enemy };

enum Action : int { kNoop = 0, kNorth = 1, kSouth = 2, kEast = 3, kWest = 4, kAttack0 = 5 };

struct UnitState {
  int x = 0;
  int y = 0;
  int health = 0;
  bool alive = false;
  Side side = Side::Ally;
};

/// Features per observation token:
/// [rel_x/width, rel_y/height, health/H, is_self, is_ally, is_enemy, chebyshev/sight, visible].
inline constexpr int kTokenFeatures = 8;
/// Features per unit in the global state: [x/width, y/height, health/H, alive].
inline constexpr int kStateFeatures = 4;

using ActionMask = std::vector<bool>;

struct StepResult {
  double reward = 0;
  bool done = false;
  bool win = false;
};

int chebyshev(const UnitState& a, const UnitState& b);

/// First of N,S,E,W that strictly reduces the Chebyshev distance from `from` to `to`,
/// falling back to the first that reduces the Manhattan distance; noop if neither exists.
int move_toward(const UnitState& from, const UnitState& to);

/// Deterministic skirmish between controllable allies and scripted enemies.
class Arena {
 public:
  explicit Arena(TaskSpec task);

  /// Places both teams and returns to step 0. Throws ConfigError if a team does not fit.
  void reset(std::uint64_t seed);

  /// Applies one joint action (one id per ally). Throws ContractError for masked actions.
  StepResult step(std::span<const int> actions);

  const TaskSpec& task() const { return task_; }
  int steps_taken() const { return steps_; }
  bool done() const { return done_; }
  bool won() const { return won_; }

  std::vector<double> global_state() const;
  /// Flattened entity tokens (n_entities * kTokenFeatures) from ally `agent`'s viewpoint.
  std::vector<double> observation(int agent) const;
  ActionMask action_mask(int agent) const;

  const std::vector<UnitState>& allies() const { return allies_; }
  const std::vector<UnitState>& enemies() const { return enemies_; }
  /// Scenario setup: overwrites one unit. Health <= 0 marks the unit dead.
  void set_unit(Side side, int index, int x, int y, int health);

  /// Reward normalizer making the best achievable episode return exactly 20.
  double reward_scale() const;

 private:
  struct EnemyIntent {
    int target = -1;  // ally to attack, or -1 to move
    int move = kNoop;
  };
  /// Scripted enemy decisions from the current state: attack the weakest ally in range
  /// (lowest index on ties), otherwise step toward the nearest living ally within sight.
  /// An enemy that sees no ally holds position.
  std::vector<EnemyIntent> enemy_intents() const;

  TaskSpec task_;
  std::vector<UnitState> allies_;
  std::vector<UnitState> enemies_;
  int steps_ = 0;
  bool done_ = false;
  bool won_ = false;
};

/// Parametric scripted policy: greedy with probability `strength`, otherwise uniform over valid
/// actions.
class ScriptedController {
 public:
  ScriptedController(double strength, std::uint64_t seed);

  int act(const Arena& arena, int agent);
  std::vector<int> act_all(const Arena& arena);

  /// Attack the weakest attackable enemy (lowest index on ties), else move toward the nearest
  /// living enemy, else noop.
  static int greedy_action(const Arena& arena, int agent);

  double strength() const { return strength_; }

 private:
  double strength_;
  std::mt19937_64 rng_;
};

struct RolloutSummary {
  double strength = 0;
  int episodes = 0;
  double win_rate = 0;
  double mean_return = 0;
  double mean_length = 0;
};

/// Rolls out `episodes` scripted episodes at strength p; episode k uses reset seed
/// mix_seed(seed, k) and its own controller stream.
RolloutSummary evaluate_controller(const TaskSpec& task, double strength, int episodes, std::uint64_t seed);

/// Win rates for p = 0, step, 2*step, ..., 1.
std::vector<RolloutSummary> sweep_strength(const TaskSpec& task, double step, int episodes, std::uint64_t seed);

/// Entry of `sweep` whose win rate lies in [lo, hi] and is closest to the midpoint
/// (smaller p on ties). Throws DataError when no grid point qualifies.
RolloutSummary pick_strength(const std::vector<RolloutSummary>& sweep, double lo, double hi);

}  // namespace hygen::arena
