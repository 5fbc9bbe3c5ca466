#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hygen/datastore/datastore.hpp"
#include "hygen/skills/skills.hpp"

namespace hygen::policy {

using skills::NetConfig;

// Parameter layout of a stage-2 model (one ParamBundle):
//   enc.*        frozen stage-1 global encoder
//   dec.trunk.*  frozen stage-1 decoder trunk, dec.head.* frozen stage-1 decoder head
//   v.trunk.*    shared value trunk (starts as a copy of dec.trunk)
//   v.q1, v.q2   Q head over [value trunk state, local posterior]
//   v.dec.*      decoder head driven by the value trunk (starts as a copy of dec.head)
//   lenc.*       local observation encoder (trunk + head)
//   mix.*        mixing hypernetworks

/// Builds a stage-2 model from trained stage-1 parameters.
ParamBundle init_policy(const ParamBundle& stage1, const NetConfig& cfg, int mixer_embed, Rng& rng);

/// Entries tracked by target networks: v.*, lenc.* and mix.*.
ParamBundle target_snapshot(const ParamBundle& params);

/// Mixer sizes, derived from NetConfig.
NetConfig mixer_config(const NetConfig& cfg, int mixer_embed);

// ---------------------------------------------------------------------------------------------
// Per-agent networks

/// Local posterior log-probabilities (rows x |Z|) from a local-encoder trunk output.
Var local_log_posterior(Tape& tape, const ParamBundle& p, const Var& lenc_hidden, bool trainable);
/// Individual skill values (rows x |Z|) from the value trunk and the local posterior.
Var q_head(Tape& tape, const ParamBundle& p, const Var& value_hidden, const Var& local_posterior, bool trainable);

/// q̂(. | tau_i) of agent `agent` over steps [0, t] of an episode.
Vector local_encode(const ParamBundle& p, const data::EpisodeRecord& ep, int agent, int t, const NetConfig& cfg);
/// Q_i(tau_i, .) of agent `agent` over steps [0, t] of an episode.
Vector q_individual(const ParamBundle& p, const data::EpisodeRecord& ep, int agent, int t, const NetConfig& cfg);

// ---------------------------------------------------------------------------------------------
// Mixing network

/// Global-state inputs of the mixer for a set of steps. Group g holds the entity tokens of one
/// step; `agents` lists, per group, the Q rows of its allies and `agent_tokens[r]` is the token
/// row of the ally owning Q row r.
struct MixBatch {
  Matrix tokens;
  std::vector<std::pair<int, int>> groups;
  ad::RowLists agents;
  std::vector<int> agent_tokens;
};

/// Entity tokens the mixer sees for one global state (action slots left empty).
Matrix state_tokens(const Eigen::Ref<const Vector>& global_state, const arena::TaskSpec& task, const NetConfig& cfg);

/// Q_tot = w2 . elu(sum_i q_i W1_i + b1) + b2 per group, given hypernetwork outputs:
/// w1_rows (one row per Q row), b1 and w2 (one row per group), b2 (groups x 1).
Var mix_combine(const Var& q, const Var& w1_rows, const Var& b1, const Var& w2, const Var& b2,
                const ad::RowLists& agents);

/// Monotone mixing of chosen individual values `q` (rows x 1) into Q_tot (groups x 1).
Var mix(Tape& tape, const ParamBundle& p, const Var& q, const MixBatch& batch, const NetConfig& cfg,
        int mixer_embed, bool trainable);

// ---------------------------------------------------------------------------------------------
// Stage-2 objective

/// Skill labels of an episode: executed skills when recorded, otherwise the argmax (lowest index
/// on ties) of the frozen global encoder posterior. Dead agents get skill 0.
IndexMatrix skill_labels(const ParamBundle& p, const data::EpisodeRecord& ep, const NetConfig& cfg);

/// Training inputs for one batch of whole episodes.
struct LabeledEpisode {
  const data::EpisodeRecord* episode = nullptr;
  IndexMatrix labels;   // T x n
  Matrix global_logp;   // (T * n) x |Z|, log q(z | s, a, i) of the frozen global encoder
};

/// Labels plus global log-posteriors for one episode.
LabeledEpisode label_episode(const ParamBundle& p, const data::EpisodeRecord& ep, const NetConfig& cfg);

struct LossWeights {
  double gamma = 0.99;
  double alpha = 5.0;
  /// Multiplier of the CQL term, i.e. eta * R_h for the dynamic scheme.
  double cql = 5.0;
};

struct LossTerms {
  Var total;
  double td = 0;
  double consistency = 0;
  double cql = 0;
};

/// Squared TD error of Q_tot against r + gamma (1 - done) Q_tot^-(s', argmax_z Q_i^-). Targets use
/// `target` for both the individual values and the mixer and carry no gradient.
Var td_loss(Tape& tape, const ParamBundle& p, const ParamBundle& target, std::span<const LabeledEpisode> batch,
            const NetConfig& cfg, int mixer_embed, double gamma);
/// Mean KL(q̂ || q) over living agent steps; the global posterior is a constant.
Var consistency_loss(Tape& tape, const ParamBundle& p, std::span<const LabeledEpisode> batch, const NetConfig& cfg);
/// Mean over living agent steps of logsumexp_z Q_i - Q_i(label).
Var cql_loss(Tape& tape, const ParamBundle& p, std::span<const LabeledEpisode> batch, const NetConfig& cfg);
/// L_TD + alpha L_c + cql L_CQL from one shared forward pass.
LossTerms total_loss(Tape& tape, const ParamBundle& p, const ParamBundle& target,
                     std::span<const LabeledEpisode> batch, const NetConfig& cfg, int mixer_embed,
                     const LossWeights& w);

// ---------------------------------------------------------------------------------------------
// Acting

/// Epsilon-greedy skill choice; ties go to the lowest index. `greedy` forces epsilon to 0.
int select_skill(const Eigen::Ref<const Matrix>& q_row, double epsilon, Rng& rng, bool greedy = false);

/// Which networks turn observations into actions.
enum class Actor {
  Refined,  // value trunk + v.dec head
  Frozen,   // stage-1 decoder trunk and head
  Cloned,   // behavior-cloning network (bc.trunk, bc.head), no skills
};

/// Greedy decoding: highest masked logit, lowest index on ties.
int act(const Eigen::Ref<const Matrix>& logits_row, const Eigen::Ref<const BoolMatrix>& mask_row);

struct RolloutOptions {
  Actor actor = Actor::Refined;
  double epsilon = 0;
  bool record = false;
};

/// Plays one episode per reset seed in lockstep. Returns the episodes (with executed skills
/// when recording) or, when not recording, records with only rewards and outcome filled.
std::vector<data::EpisodeRecord> rollout(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task,
                                         std::span<const std::uint64_t> reset_seeds, const RolloutOptions& opt,
                                         Rng& rng);

/// One exploratory episode with executed skills recorded.
data::EpisodeRecord collect_episode(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task,
                                    std::uint64_t reset_seed, double epsilon, Rng& rng, Actor actor = Actor::Refined);

struct EvalResult {
  std::string task;
  int episodes = 0;
  double win_rate = 0;
  double mean_return = 0;
};

/// Greedy rollouts with no parameter updates. Episodes are split across `threads` workers;
/// results do not depend on the thread count. Throws ContractError for n_episodes < 1 and
/// ConfigError when the task exceeds the network's action capacity.
EvalResult zero_shot_eval(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task, int n_episodes,
                          std::uint64_t seed, Actor actor = Actor::Refined, int threads = 1);

// ---------------------------------------------------------------------------------------------
// Training

enum class CqlScheme { Dynamic, Fixed, None };

/// Switches distinguishing HyGen from its baselines and ablations.
struct Variant {
  std::string name = "hygen";
  bool collect = true;                // gather online episodes
  bool offline = true;                // sample from the offline dataset
  std::optional<double> fixed_ratio;  // constant R_h instead of the decay schedule
  CqlScheme cql = CqlScheme::Dynamic;
  bool refine = true;                 // act through the trained value trunk
  bool bc = false;                    // supervised action cloning instead of stage 2
};

/// Accepts hygen, offline_only, online_only, bc, fixed_ratio:<r>, no_refine, cql:{dynamic,fixed,none}.
/// Throws ConfigError listing the modes otherwise.
Variant parse_variant(const std::string& mode);
std::string variant_modes();

struct PolicyTrainConfig {
  int steps = 35000;
  int batch = 32;
  double gamma = 0.99;
  double alpha = 5.0;
  double eta = 5.0;
  double r_start = 1.0;
  double r_end = 0.1;
  int decay_steps = 5000;
  double eps_start = 1.0;
  double eps_end = 0.05;
  int eps_steps = 5000;
  int target_every = 200;
  int eval_every = 500;
  int eval_episodes = 32;
  int log_every = 100;
  int buffer_capacity = 2000;
  int mixer_embed = 32;
  AdamConfig adam;
  double clip_norm = 10.0;
  int eval_threads = 1;
  std::uint64_t seed = 0;
};

/// One metrics row: training rows leave the eval columns empty, evaluation rows leave the
/// loss columns empty.
struct MetricsRow {
  int step = 0;
  bool is_eval = false;
  double ratio = 0;
  double epsilon = 0;
  double total = 0;
  double td = 0;
  double consistency = 0;
  double cql = 0;
  std::string eval_task;
  double eval_win_rate = 0;
  double eval_return = 0;
};

void write_metrics(const std::vector<MetricsRow>& rows, std::ostream& out);

struct PolicyResult {
  ParamBundle params;
  std::vector<MetricsRow> metrics;
  Actor actor = Actor::Refined;
};

/// Linear epsilon decay from eps_start to eps_end over eps_steps.
double epsilon_at(std::int64_t t, const PolicyTrainConfig& pc);

/// Stage 2 (or behavior cloning for Variant::bc). Collects on the source tasks round-robin and
/// evaluates every eval_every updates, including before the first.
PolicyResult train_policy(const data::MultiTaskDataset& dataset, const ParamBundle& stage1,
                          const std::vector<arena::TaskSpec>& source_tasks, const NetConfig& cfg,
                          const PolicyTrainConfig& pc, const Variant& variant,
                          const std::function<void(const MetricsRow&)>& on_row = {});

/// Behavior-cloning network: the decoder architecture with a single skill input.
ParamBundle init_bc(const NetConfig& cfg, Rng& rng);
/// Mean negative log-likelihood of the data actions of living agents.
Var bc_loss(Tape& tape, const ParamBundle& p, std::span<const data::EpisodeRecord* const> episodes,
            const NetConfig& cfg);

}  // namespace hygen::policy
