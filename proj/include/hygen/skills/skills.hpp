#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hygen/arena/arena.hpp"
#include "hygen/datastore/datastore.hpp"
#include "hygen/numcore/adam.hpp"
#include "hygen/numcore/params.hpp"
#include "hygen/numcore/tape.hpp"

namespace hygen::skills {

/// Network sizes shared by stage 1 and stage 2.
struct NetConfig {
  int n_skills = 4;
  int n_heads = 4;
  int embed = 128;       // attention embedding length, split evenly across heads
  int hidden = 64;       // MLP and recurrent width
  int token_embed = 32;  // per-token embedding inside local trunks
  int key_dim = 32;      // width of attack query/key vectors
  int max_enemies = 7;   // largest enemy count any configured task may have

  int a_max() const { return arena::TaskSpec::kNumMoves + max_enemies; }
  int token_length() const { return arena::kTokenFeatures + a_max(); }
  int head_dim() const { return embed / n_heads; }
  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
  /// Throws ConfigError when `task` needs more action slots than a_max().
  void check_task(const arena::TaskSpec& task) const;
};

/// Previous-action features fed to the trunk: one-hot over [noop, N, S, E, W, any attack].
inline constexpr int kPrevActionFeatures = 6;
int prev_action_slot(int action);

// ---------------------------------------------------------------------------------------------
// Local token streams

/// Per-row inputs of a local trunk; one row is one agent at one step.
struct StreamBatch {
  Matrix tokens;  // every entity token of every row, kTokenFeatures wide
  ad::RowLists self, allies, enemies;
  IndexMatrix enemy_slots;  // rows x max_enemies: token row of enemy j, or -1 past the task's enemies
  Matrix prev_action;       // rows x kPrevActionFeatures
  BoolMatrix masks;         // rows x a_max, padded with false
  std::vector<int> actions; // action taken at the row (-1 when unknown)
  std::vector<std::uint8_t> alive;

  Eigen::Index rows() const { return prev_action.rows(); }
};

/// Appends rows to a StreamBatch.
class StreamBuilder {
 public:
  StreamBuilder(const NetConfig& cfg, Eigen::Index expected_rows, Eigen::Index expected_tokens);
  /// `obs` holds task.n_entities() tokens; `mask` has task.n_actions() entries.
  void add_row(const double* obs, const arena::TaskSpec& task, int prev_action, const bool* mask, int action);
  StreamBatch finish();

 private:
  const NetConfig& cfg_;
  StreamBatch b_;
  std::vector<double> tokens_;
  std::vector<double> prev_;
  std::vector<std::uint8_t> masks_;
  std::vector<std::vector<int>> slots_;
  Eigen::Index rows_ = 0;
};

/// A prefix of an episode: steps [0, steps) of every agent.
struct Stream {
  const data::EpisodeRecord* episode = nullptr;
  int steps = 0;
};

/// Time-major arrangement of several episode streams. Streams are ordered by length
/// (longest first, stable), so the agents still active at step t form a prefix of `pairs`
/// and occupy rows [offsets[t], offsets[t] + active(t)).
struct SeqLayout {
  std::vector<int> order;       // stream indices, longest first
  std::vector<int> first_pair;  // per stream (original index): index of its agent 0 in `pairs`
  std::vector<int> pair_steps;  // per pair: number of steps
  std::vector<int> offsets;     // per step, plus the total row count at the end
  int max_steps() const { return static_cast<int>(offsets.size()) - 1; }
  int active(int t) const { return offsets[t + 1] - offsets[t]; }
  int row(int stream, int agent, int t) const { return offsets[t] + first_pair[stream] + agent; }
};

/// Builds trunk inputs for all streams in time-major order.
StreamBatch build_streams(const std::vector<Stream>& streams, const NetConfig& cfg, SeqLayout& layout);

// ---------------------------------------------------------------------------------------------
// Recurrent trunk and decoder head

void init_trunk(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, Rng& rng);

struct TrunkOut {
  Var hidden;     // rows x cfg.hidden
  Var token_emb;  // token rows x cfg.token_embed
};

/// Pre-recurrent features and token embeddings for every row.
TrunkOut trunk_inputs(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                      bool trainable);
/// Runs the GRU over a time-major batch; returns hidden states for every row.
TrunkOut run_trunk(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                   const SeqLayout& layout, bool trainable);
/// One recurrent step for a batch of live agents with previous hidden state `h_prev`.
TrunkOut step_trunk(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                    const Matrix& h_prev, bool trainable);

/// Head weights for `n_skills` skill inputs (use 1 for skill-free behavior cloning).
void init_decoder_head(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, int n_skills, Rng& rng);

/// Action logits (rows x a_max) with skill `skills[r]` for row r. Unmasked; apply the row masks.
Var decoder_logits(Tape& tape, const ParamBundle& p, const std::string& prefix, const TrunkOut& trunk,
                   const StreamBatch& b, std::span<const int> skills, bool trainable);
/// Masked log-probabilities for every skill: result[z] is rows x a_max.
std::vector<Var> decoder_log_probs_all(Tape& tape, const ParamBundle& p, const std::string& prefix,
                                       const TrunkOut& trunk, const StreamBatch& b, int n_skills, bool trainable);

/// Greedy decoding: the highest-scoring valid action, lowest index on ties.
int greedy_action(const Eigen::Ref<const Matrix>& logits_row, const Eigen::Ref<const BoolMatrix>& mask_row);

// ---------------------------------------------------------------------------------------------
// Global skill encoder

/// Entity tokens for the global encoder: one row per unit in arena order, each
/// [x/W, y/H, health/H, 0, is_ally, is_enemy, 0, alive] followed by an a_max action slot that is
/// one-hot for allies and zero for enemies. Dead units keep only their side flags.
Matrix decompose(const Eigen::Ref<const Vector>& global_state, std::span<const int> joint_action,
                 const arena::TaskSpec& task, const NetConfig& cfg);

void init_encoder(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, Rng& rng);

/// Stacked token sets for batched attention. Each group is sorted into a canonical order so
/// results are bitwise independent of the input order of tokens.
class EntityBatch {
 public:
  explicit EntityBatch(int width) : width_(width) {}
  /// Adds one token set; `agents` lists the entity indices whose embeddings will be read out.
  void add_group(const Eigen::Ref<const Matrix>& entity_tokens, std::span<const int> agents);

  Matrix tokens() const;
  const std::vector<std::pair<int, int>>& groups() const { return groups_; }
  /// agent_rows()[k] is the canonical token row of the k-th requested agent.
  const std::vector<int>& agent_rows() const { return agent_rows_; }

 private:
  int width_;
  int rows_ = 0;
  std::vector<double> data_;
  std::vector<std::pair<int, int>> groups_;
  std::vector<int> agent_rows_;
};

/// Multi-head attention over each group: rows x cfg.embed.
Var attention(Tape& tape, const ParamBundle& p, const std::string& prefix, const Var& tokens,
              std::span<const std::pair<int, int>> groups, const NetConfig& cfg, bool trainable);
/// Skill logits (agents x n_skills) for the requested agents of an EntityBatch.
Var encoder_logits(Tape& tape, const ParamBundle& p, const std::string& prefix, const EntityBatch& batch,
                   const NetConfig& cfg, bool trainable);
/// Posterior q(z | s, a, i) for one agent.
Vector encode(const ParamBundle& p, const std::string& prefix, const Eigen::Ref<const Vector>& global_state,
              std::span<const int> joint_action, int agent, const arena::TaskSpec& task, const NetConfig& cfg);
/// Posteriors for every (step, agent) of an episode: (T * n) x n_skills, row t*n+i.
Matrix encode_episode(const ParamBundle& p, const std::string& prefix, const data::EpisodeRecord& ep,
                      const NetConfig& cfg);

// ---------------------------------------------------------------------------------------------
// Stage 1 objective and training

/// One training sample: the prefix of an episode ending at step t (inclusive).
struct Window {
  const data::EpisodeRecord* episode = nullptr;
  int t = 0;
};

struct VaeTerms {
  Var loss;             // recon + beta * kl
  double recon = 0;     // mean of -sum_z q(z) log p(a | tau, z)
  double kl = 0;        // mean KL(q || uniform)
  int agent_steps = 0;  // living (window, agent) pairs that contributed
};

/// Exact-enumeration VAE loss over the living agents at each window's final step.
/// Encoder parameters live under "enc", the decoder under "dec.trunk" and "dec.head".
VaeTerms vae_loss(Tape& tape, const ParamBundle& p, std::span<const Window> windows, double beta,
                  const NetConfig& cfg, bool trainable = true);

void init_skill_model(ParamBundle& p, const NetConfig& cfg, Rng& rng);

struct SkillTrainConfig {
  int steps = 15000;
  int batch = 32;
  double beta = 0.001;
  AdamConfig adam;
  double clip_norm = 10.0;
  int log_every = 100;
  std::uint64_t seed = 0;
};

struct SkillLogRow {
  int step = 0;
  double loss = 0;
  double recon = 0;
  double kl = 0;
};

/// Adam on the VAE loss over uniformly drawn windows. Each log row averages the preceding
/// `log_every` steps. Throws ValidityError naming the step if the loss turns non-finite.
ParamBundle train_skills(const data::MultiTaskDataset& dataset, const NetConfig& cfg, const SkillTrainConfig& tc,
                         std::vector<SkillLogRow>* log = nullptr,
                         const std::function<void(const SkillLogRow&)>& on_log = {});

void write_skill_log(const std::vector<SkillLogRow>& rows, std::ostream& out);

/// Share of each skill among argmax posteriors of living agents over `windows`.
Vector skill_usage(const ParamBundle& p, std::span<const Window> windows, const NetConfig& cfg);

/// Uniformly drawn windows (episode, step) from a dataset.
std::vector<Window> sample_windows(const data::MultiTaskDataset& dataset, int count, Rng& rng);

}  // namespace hygen::skills
