#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "hygen/arena/arena.hpp"
#include "hygen/numcore/functional.hpp"
#include "hygen/numcore/params.hpp"

namespace hygen::data {

/// One trajectory stored as dense per-episode arrays.
///
/// With T steps, n allies, E = n + n_enemies entities and A = 5 + n_enemies actions:
///   states  T x (E * kStateFeatures)      global state before the joint action
///   obs     (T * n) x (E * kTokenFeatures) row t*n+i is ally i's observation at step t
///   actions T x n
///   masks   (T * n) x A
///   rewards, done, win: length T
///   skills  T x n executed skills, or 0 x 0 when the episode came from a scripted controller
struct EpisodeRecord {
  arena::TaskSpec task;
  Matrix states;
  Matrix obs;
  IndexMatrix actions;
  BoolMatrix masks;
  Vector rewards;
  std::vector<std::uint8_t> done;
  std::vector<std::uint8_t> win;
  IndexMatrix skills;

  int length() const { return static_cast<int>(rewards.size()); }
  int n_agents() const { return task.n_allies; }
  bool has_skills() const { return skills.size() > 0; }
  bool won() const { return !win.empty() && win.back() != 0; }
  double total_return() const { return rewards.sum(); }

  /// Throws DataError naming the first violated field.
  void validate() const;
  bool operator==(const EpisodeRecord& other) const;
};

/// Incrementally fills an EpisodeRecord from a live arena.
class EpisodeWriter {
 public:
  explicit EpisodeWriter(const arena::TaskSpec& task, bool with_skills);
  /// Captures state, observations and masks of `env` before `actions` are applied.
  void record(const arena::Arena& env, const std::vector<int>& actions, const arena::StepResult& result,
              const std::vector<int>& skills = {});
  EpisodeRecord finish();

 private:
  arena::TaskSpec task_;
  bool with_skills_;
  std::vector<std::vector<double>> states_;
  std::vector<std::vector<double>> obs_;
  std::vector<std::vector<bool>> masks_;
  std::vector<std::vector<int>> actions_;
  std::vector<std::vector<int>> skills_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> done_;
  std::vector<std::uint8_t> win_;
};

enum class Quality { Expert, Medium };
std::string to_string(Quality q);
Quality parse_quality(const std::string& s);

/// Offline multi-task dataset.
struct MultiTaskDataset {
  Quality quality = Quality::Expert;
  std::vector<arena::TaskSpec> tasks;
  std::vector<EpisodeRecord> episodes;

  bool empty() const { return episodes.empty(); }
  std::size_t size() const { return episodes.size(); }
  /// Number of episodes recorded for `task`.
  std::size_t count(const arena::TaskSpec& task) const;
  /// Appends `other`'s episodes and declares its tasks.
  void append(MultiTaskDataset other);
  /// Throws DataError when an episode's task was not declared or an episode is malformed.
  void validate() const;
};

struct GenerationSummary {
  std::string task;
  Quality quality = Quality::Expert;
  double strength = 0;
  int episodes = 0;
  double win_rate = 0;
  double mean_return = 0;
};

/// Rolls out a scripted controller of the given strength. Episode k resets with
/// mix_seed(seed, k), matching arena::evaluate_controller.
MultiTaskDataset generate_dataset(const arena::TaskSpec& task, double strength, Quality quality,
                                  int n_episodes, std::uint64_t seed, GenerationSummary* summary = nullptr);

void write_dataset(const MultiTaskDataset& data, std::ostream& out);
/// Empty input gives an empty dataset. Malformed JSON throws ParseError with the 1-based line;
/// schema violations throw ParseError naming the field.
MultiTaskDataset read_dataset(std::istream& in);
void save_dataset(const MultiTaskDataset& data, const std::string& path);
MultiTaskDataset load_dataset(const std::string& path);

/// FIFO ring of online episodes. Every stored episode carries executed skills.
class OnlineBuffer {
 public:
  explicit OnlineBuffer(std::size_t capacity = 2000);

  /// Throws ContractError if the episode has no skill labels.
  void push(EpisodeRecord episode);

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  /// Total number of pushes so far.
  std::uint64_t inserted() const { return inserted_; }
  /// Oldest first.
  const EpisodeRecord& at(std::size_t i) const { return *items_.at(i).episode; }
  /// Insertion number (0-based) of the i-th stored episode.
  std::uint64_t id(std::size_t i) const { return items_.at(i).id; }

 private:
  struct Item {
    std::uint64_t id;
    std::shared_ptr<const EpisodeRecord> episode;
  };
  std::size_t capacity_;
  std::uint64_t inserted_ = 0;
  std::deque<Item> items_;
};

void push_online(OnlineBuffer& buffer, EpisodeRecord episode);

/// R_h = max(R_end, R_start - (R_start - R_end) * t / N).
double hybrid_ratio(std::int64_t t, double r_start, double r_end, std::int64_t n);

/// round-half-away-from-zero(R_h * B) clamped to [0, B].
int offline_count(int batch_size, double ratio);

enum class Origin { Offline, Online };

struct BatchItem {
  const EpisodeRecord* episode = nullptr;
  Origin origin = Origin::Offline;
  /// Dataset index for offline items, insertion number for online items.
  std::uint64_t key = 0;
};

struct HybridBatch {
  std::vector<BatchItem> items;
  int n_offline = 0;   // from the rounding rule
  int n_online = 0;    // batch_size - n_offline
  int backfilled = 0;  // online slots served from the dataset because the buffer was short
};

/// Draws uniformly with replacement from each pool. When the buffer holds fewer episodes than
/// n_online, the shortfall comes from the dataset (or from the buffer if the dataset is empty).
HybridBatch sample_hybrid(const MultiTaskDataset& dataset, const OnlineBuffer& buffer, int batch_size,
                          double ratio, Rng& rng);

}  // namespace hygen::data
