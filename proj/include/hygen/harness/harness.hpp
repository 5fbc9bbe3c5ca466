#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hygen/policy/policy.hpp"

namespace hygen::harness {

namespace fs = std::filesystem;

/// Receives one human-readable progress line at a time.
using Logger = std::function<void(const std::string&)>;

/// Everything an experiment needs. Serialized as one flat JSON object; see to_json.
struct ExperimentConfig {
  std::vector<std::string> source_tasks{"3v3", "4v5", "5v6"};
  std::vector<std::string> unseen_tasks{"4v4", "5v5", "6v6", "6v7"};
  data::Quality quality = data::Quality::Medium;

  int hidden = 64;
  int embedding = 128;
  double alpha = 5.0;
  double beta = 0.001;
  double eta = 5.0;
  int n_skills = 4;
  int n_heads = 4;
  int stage1_steps = 15000;
  int stage2_steps = 35000;
  double r_start = 1.0;
  double r_end = 0.1;
  int decay_steps = 5000;
  int eps_steps = 5000;     // epsilon-greedy anneal length
  int target_every = 200;   // steps between target-network copies
  int batch = 32;
  double lr = 0.0005;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  int episodes_per_task = 2000;
  int eval_episodes = 32;
  int eval_every = 500;
  int log_every = 100;
  int threads = 1;
  std::string data_dir = "data";

  /// Throws ConfigError. `skill_sweep` lifts the n_skills == n_heads rule.
  void validate(bool skill_sweep = false) const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Canonical JSON text (fixed key order, two-space indent).
std::string to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys, wrong types and invalid values throw ConfigError.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const fs::path& path);
/// Replaces the seed list with a comma-separated HYGEN_SEED value, if one is given.
void apply_seed_override(ExperimentConfig& cfg, const char* env_value);

/// Git-style blob hash: SHA-1 of "blob <size>\0" followed by the bytes, in lowercase hex.
std::string content_hash(const std::string& bytes);
std::string config_hash(const ExperimentConfig& cfg);

std::vector<arena::TaskSpec> source_specs(const ExperimentConfig& cfg);
std::vector<arena::TaskSpec> unseen_specs(const ExperimentConfig& cfg);
skills::NetConfig net_config(const ExperimentConfig& cfg);
skills::SkillTrainConfig skill_train_config(const ExperimentConfig& cfg, std::uint64_t seed);
policy::PolicyTrainConfig policy_train_config(const ExperimentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------------------------
// gen-data

inline constexpr double kExpertStrength = 0.95;

struct TaskData {
  data::GenerationSummary summary;
  double expert_win_rate = 0;  // calibration reference for medium data
  fs::path file;
};

/// Writes <out>/<task>.ndjson per source task and <out>/summary.json. Medium strength per task
/// is the calibration sweep point whose win rate is closest to half the expert's.
std::vector<TaskData> gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, const Logger& log = {});

/// Concatenation of the source-task files under `dir`. Throws DataError naming missing files.
data::MultiTaskDataset load_source_data(const ExperimentConfig& cfg, const fs::path& dir);

// ---------------------------------------------------------------------------------------------
// train

struct SeedRun {
  std::uint64_t seed = 0;
  ParamBundle params;
  policy::Actor actor = policy::Actor::Refined;
  std::vector<policy::MetricsRow> metrics;
  std::vector<skills::SkillLogRow> stage1_log;
};

ParamBundle run_stage1(const ExperimentConfig& cfg, const data::MultiTaskDataset& dataset, std::uint64_t seed,
                       std::vector<skills::SkillLogRow>* stage1_log = nullptr, const Logger& log = {});
/// Stage 2 for one seed on top of existing stage-1 parameters (ignored for bc).
SeedRun run_stage2(const ExperimentConfig& cfg, const data::MultiTaskDataset& dataset, const ParamBundle& stage1,
                   std::uint64_t seed, const policy::Variant& variant, const Logger& log = {});

struct TrainOutput {
  std::string mode;
  std::vector<SeedRun> runs;
  double wall_seconds = 0;
};

/// Full pipeline per seed. Writes <out>/manifest.json and, per seed, seed_<s>/{params.txt,
/// metrics.csv, stage1.csv}.
TrainOutput train(const ExperimentConfig& cfg, const std::string& mode, const fs::path& out_dir,
                  const Logger& log = {});

// ---------------------------------------------------------------------------------------------
// eval

struct TaskScore {
  std::string task;
  bool unseen = false;
  std::vector<double> win_rates;  // one per seed
  std::vector<double> returns;
  double win_mean = 0;
  double win_std = 0;
  double return_mean = 0;
};

struct RunReport {
  std::vector<TaskScore> tasks;
  double wall_seconds = 0;
  ExperimentConfig config;
  std::string input_hash;
};

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& values);

/// One trained parameter set per seed.
struct TrainedModel {
  std::vector<std::uint64_t> seeds;
  std::vector<ParamBundle> params;
  policy::Actor actor = policy::Actor::Refined;
  std::string input_hash;
};

/// Reads a train output directory (manifest.json) or a single parameter file, which is then
/// evaluated once per configured seed.
TrainedModel load_model(const fs::path& path, const ExperimentConfig& cfg);

/// Greedy evaluation of every source and unseen task; each seed contributes one win rate.
RunReport evaluate(const TrainedModel& model, const ExperimentConfig& cfg);
/// Writes <out>/report.json and <out>/report.csv.
RunReport cmd_eval(const fs::path& params, const ExperimentConfig& cfg, const fs::path& out_dir);

/// Eval seed for a training seed.
std::uint64_t eval_seed(std::uint64_t seed);

// ---------------------------------------------------------------------------------------------
// ablate

struct AblationRow {
  std::string variant;
  int n_skills = 4;
  bool is_default = false;
  std::vector<double> source;  // per seed, mean over source tasks
  std::vector<double> unseen;  // per seed, mean over unseen tasks
};

/// Variants of one ablation: ratio, refine, cql or skills.
std::vector<AblationRow> ablation_grid(const std::string& which);

/// Runs the grid over the seed list and writes <out>/ablation_<which>.csv plus per-run metrics.
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::string& which, const fs::path& out_dir,
                                const Logger& log = {});

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& which, const std::string& hash,
                        std::ostream& out);

}  // namespace hygen::harness
