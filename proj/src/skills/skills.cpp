#include "hygen/skills/skills.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hygen/numcore/format.hpp"
#include "hygen/numcore/rng.hpp"

namespace hygen::skills {

namespace {

Var linear(Tape& tape, const ParamBundle& p, const std::string& name, const Var& x, bool trainable) {
  return ad::add_rowvec(ad::matmul(x, tape.param(p, name + ".w", trainable)),
                        tape.param(p, name + ".b", trainable));
}

bool token_visible(const double* token) { return token[arena::kTokenFeatures - 1] != 0.0; }

}  // namespace

void NetConfig::validate() const {
  if (n_skills < 1) throw ConfigError("n_skills must be at least 1");
  if (n_heads < 1) throw ConfigError("n_heads must be at least 1");
  if (embed < 1 || embed % n_heads != 0) {
    throw ConfigError("embed (" + std::to_string(embed) + ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (hidden < 1 || token_embed < 1 || key_dim < 1) throw ConfigError("layer widths must be positive");
  if (max_enemies < 1) throw ConfigError("max_enemies must be at least 1");
}

void NetConfig::check_task(const arena::TaskSpec& task) const {
  if (task.n_enemies > max_enemies) {
    throw ConfigError("task " + task.name() + " has " + std::to_string(task.n_enemies) +
                      " enemies but networks are sized for " + std::to_string(max_enemies));
  }
}

int prev_action_slot(int action) {
  if (action < 0) return -1;
  return action < arena::kAttack0 ? action : arena::kAttack0;
}

// ---------------------------------------------------------------------------------------------
// Streams

StreamBuilder::StreamBuilder(const NetConfig& cfg, Eigen::Index expected_rows, Eigen::Index expected_tokens)
    : cfg_(cfg) {
  tokens_.reserve(static_cast<std::size_t>(expected_tokens * arena::kTokenFeatures));
  prev_.reserve(static_cast<std::size_t>(expected_rows * kPrevActionFeatures));
  masks_.reserve(static_cast<std::size_t>(expected_rows * cfg.a_max()));
  b_.actions.reserve(static_cast<std::size_t>(expected_rows));
  b_.alive.reserve(static_cast<std::size_t>(expected_rows));
}

void StreamBuilder::add_row(const double* obs, const arena::TaskSpec& task, int prev_action, const bool* mask,
                            int action) {
  cfg_.check_task(task);
  const int n = task.n_allies;
  const int entities = task.n_entities();
  const int base = static_cast<int>(tokens_.size() / arena::kTokenFeatures);
  tokens_.insert(tokens_.end(), obs, obs + entities * arena::kTokenFeatures);

  b_.self.push_range(base, 1);
  std::vector<int> rows;
  for (int k = 1; k < n; ++k) {
    if (token_visible(obs + k * arena::kTokenFeatures)) rows.push_back(base + k);
  }
  b_.allies.push(rows);
  rows.clear();
  std::vector<int> slots(static_cast<std::size_t>(cfg_.max_enemies), -1);
  for (int j = 0; j < task.n_enemies; ++j) {
    const int k = n + j;
    slots[static_cast<std::size_t>(j)] = base + k;
    if (token_visible(obs + k * arena::kTokenFeatures)) rows.push_back(base + k);
  }
  b_.enemies.push(rows);
  slots_.push_back(std::move(slots));

  const std::size_t prev_at = prev_.size();
  prev_.resize(prev_at + kPrevActionFeatures, 0.0);
  const int slot = prev_action_slot(prev_action);
  if (slot >= 0) prev_[prev_at + static_cast<std::size_t>(slot)] = 1.0;

  for (int a = 0; a < cfg_.a_max(); ++a) masks_.push_back(a < task.n_actions() && mask[a] ? 1 : 0);
  b_.actions.push_back(action);
  b_.alive.push_back(token_visible(obs) ? 1 : 0);
  ++rows_;
}

StreamBatch StreamBuilder::finish() {
  const Eigen::Index n_tokens = static_cast<Eigen::Index>(tokens_.size() / arena::kTokenFeatures);
  b_.tokens = Eigen::Map<const Matrix>(tokens_.data(), n_tokens, arena::kTokenFeatures);
  b_.prev_action = Eigen::Map<const Matrix>(prev_.data(), rows_, kPrevActionFeatures);
  b_.masks.resize(rows_, cfg_.a_max());
  b_.enemy_slots.resize(rows_, cfg_.max_enemies);
  for (Eigen::Index r = 0; r < rows_; ++r) {
    for (int a = 0; a < cfg_.a_max(); ++a) {
      b_.masks(r, a) = masks_[static_cast<std::size_t>(r * cfg_.a_max() + a)] != 0;
    }
    for (int j = 0; j < cfg_.max_enemies; ++j) {
      b_.enemy_slots(r, j) = slots_[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)];
    }
  }
  StreamBatch out = std::move(b_);
  b_ = StreamBatch{};
  tokens_.clear();
  prev_.clear();
  masks_.clear();
  slots_.clear();
  rows_ = 0;
  return out;
}

StreamBatch build_streams(const std::vector<Stream>& streams, const NetConfig& cfg, SeqLayout& layout) {
  const int count = static_cast<int>(streams.size());
  layout = SeqLayout{};
  layout.order.resize(static_cast<std::size_t>(count));
  std::iota(layout.order.begin(), layout.order.end(), 0);
  std::stable_sort(layout.order.begin(), layout.order.end(),
                   [&](int a, int b) { return streams[a].steps > streams[b].steps; });

  struct Pair {
    int stream;
    int agent;
  };
  std::vector<Pair> pairs;
  layout.first_pair.assign(static_cast<std::size_t>(count), 0);
  Eigen::Index total_rows = 0;
  Eigen::Index total_tokens = 0;
  int max_steps = 0;
  for (int s : layout.order) {
    const Stream& st = streams[static_cast<std::size_t>(s)];
    if (st.episode == nullptr) throw ContractError("build_streams: stream without an episode");
    if (st.steps < 1 || st.steps > st.episode->length()) {
      throw ContractError("build_streams: stream length " + std::to_string(st.steps) + " outside episode of " +
                          std::to_string(st.episode->length()) + " steps");
    }
    layout.first_pair[static_cast<std::size_t>(s)] = static_cast<int>(pairs.size());
    const int n = st.episode->n_agents();
    for (int i = 0; i < n; ++i) {
      pairs.push_back({s, i});
      layout.pair_steps.push_back(st.steps);
    }
    total_rows += static_cast<Eigen::Index>(n) * st.steps;
    total_tokens += static_cast<Eigen::Index>(n) * st.steps * st.episode->task.n_entities();
    max_steps = std::max(max_steps, st.steps);
  }

  StreamBuilder builder(cfg, total_rows, total_tokens);
  layout.offsets.push_back(0);
  for (int t = 0; t < max_steps; ++t) {
    int active = 0;
    for (const Pair& pr : pairs) {
      const data::EpisodeRecord& ep = *streams[static_cast<std::size_t>(pr.stream)].episode;
      if (streams[static_cast<std::size_t>(pr.stream)].steps <= t) break;
      const int n = ep.n_agents();
      const Eigen::Index r = static_cast<Eigen::Index>(t) * n + pr.agent;
      const int prev = t > 0 ? ep.actions(t - 1, pr.agent) : -1;
      builder.add_row(ep.obs.row(r).data(), ep.task, prev, ep.masks.row(r).data(), ep.actions(t, pr.agent));
      ++active;
    }
    layout.offsets.push_back(layout.offsets.back() + active);
  }
  return builder.finish();
}

// ---------------------------------------------------------------------------------------------
// Trunk and decoder head

void init_trunk(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, Rng& rng) {
  init_linear(p, prefix + ".tok", arena::kTokenFeatures, cfg.token_embed, rng);
  init_linear(p, prefix + ".in", 3 * cfg.token_embed + kPrevActionFeatures, cfg.hidden, rng);
  init_uniform(p, prefix + ".gru.wx", cfg.hidden, 3 * cfg.hidden, cfg.hidden, rng);
  init_uniform(p, prefix + ".gru.wh", cfg.hidden, 3 * cfg.hidden, cfg.hidden, rng);
  init_uniform(p, prefix + ".gru.bx", 1, 3 * cfg.hidden, cfg.hidden, rng);
  init_uniform(p, prefix + ".gru.bh", 1, 3 * cfg.hidden, cfg.hidden, rng);
}

TrunkOut trunk_inputs(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                      bool trainable) {
  Var tokens = tape.constant(b.tokens);
  Var emb = ad::relu(linear(tape, p, prefix + ".tok", tokens, trainable));
  const Var parts[] = {ad::pool_sum(emb, b.self), ad::pool_mean(emb, b.allies), ad::pool_mean(emb, b.enemies),
                       tape.constant(b.prev_action)};
  Var x = ad::relu(linear(tape, p, prefix + ".in", ad::concat_cols(parts), trainable));
  return {x, emb};
}

namespace {

Var gru(Tape& tape, const ParamBundle& p, const std::string& prefix, const Var& x, const Var& h, bool trainable) {
  return ad::gru_cell(x, h, tape.param(p, prefix + ".gru.wx", trainable), tape.param(p, prefix + ".gru.wh", trainable),
                      tape.param(p, prefix + ".gru.bx", trainable), tape.param(p, prefix + ".gru.bh", trainable));
}

}  // namespace

TrunkOut run_trunk(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                   const SeqLayout& layout, bool trainable) {
  TrunkOut in = trunk_inputs(tape, p, prefix, b, trainable);
  const Eigen::Index width = p.at(prefix + ".gru.wh").rows();
  std::vector<Var> hs;
  Var h;
  for (int t = 0; t < layout.max_steps(); ++t) {
    const int active = layout.active(t);
    Var x = ad::slice_rows(in.hidden, layout.offsets[t], active);
    Var h_prev = t == 0 ? tape.constant(Matrix::Zero(active, width)) : ad::slice_rows(h, 0, active);
    h = gru(tape, p, prefix, x, h_prev, trainable);
    hs.push_back(h);
  }
  return {hs.size() == 1 ? hs.front() : ad::concat_rows(hs), in.token_emb};
}

TrunkOut step_trunk(Tape& tape, const ParamBundle& p, const std::string& prefix, const StreamBatch& b,
                    const Matrix& h_prev, bool trainable) {
  if (h_prev.rows() != b.rows()) {
    throw DimensionError("step_trunk: " + std::to_string(b.rows()) + " rows but h_prev is " +
                         shape_string(h_prev.rows(), h_prev.cols()));
  }
  TrunkOut in = trunk_inputs(tape, p, prefix, b, trainable);
  return {gru(tape, p, prefix, in.hidden, tape.constant(h_prev), trainable), in.token_emb};
}

void init_decoder_head(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, int n_skills, Rng& rng) {
  if (n_skills < 1) throw ConfigError("decoder head needs at least one skill input");
  // The hidden layer acts on [h, onehot(z)]; its weights are stored as two blocks.
  const Eigen::Index fan_in = cfg.hidden + n_skills;
  init_uniform(p, prefix + ".u.wh", cfg.hidden, cfg.hidden, fan_in, rng);
  init_uniform(p, prefix + ".u.wz", n_skills, cfg.hidden, fan_in, rng);
  init_uniform(p, prefix + ".u.b", 1, cfg.hidden, fan_in, rng);
  init_linear(p, prefix + ".move", cfg.hidden, arena::TaskSpec::kNumMoves, rng);
  init_linear(p, prefix + ".query", cfg.hidden, cfg.key_dim, rng);
  init_linear(p, prefix + ".key", cfg.token_embed, cfg.key_dim, rng);
}

namespace {

Var head_logits(Tape& tape, const ParamBundle& p, const std::string& prefix, const Var& u, const Var& keys,
                const StreamBatch& b, bool trainable) {
  const Var parts[] = {linear(tape, p, prefix + ".move", u, trainable),
                       ad::slot_scores(linear(tape, p, prefix + ".query", u, trainable), keys, b.enemy_slots)};
  return ad::concat_cols(parts);
}

Var shared_hidden(Tape& tape, const ParamBundle& p, const std::string& prefix, const TrunkOut& trunk,
                  bool trainable) {
  return ad::add_rowvec(ad::matmul(trunk.hidden, tape.param(p, prefix + ".u.wh", trainable)),
                        tape.param(p, prefix + ".u.b", trainable));
}

}  // namespace

Var decoder_logits(Tape& tape, const ParamBundle& p, const std::string& prefix, const TrunkOut& trunk,
                   const StreamBatch& b, std::span<const int> skills, bool trainable) {
  if (static_cast<Eigen::Index>(skills.size()) != trunk.hidden.rows()) {
    throw DimensionError("decoder_logits: " + std::to_string(skills.size()) + " skills for " +
                         std::to_string(trunk.hidden.rows()) + " rows");
  }
  Var wz = tape.param(p, prefix + ".u.wz", trainable);
  for (int z : skills) {
    if (z < 0 || z >= wz.rows()) {
      throw ContractError("decoder_logits: skill " + std::to_string(z) + " outside 0.." +
                          std::to_string(wz.rows() - 1));
    }
  }
  Var u = ad::relu(ad::add(shared_hidden(tape, p, prefix, trunk, trainable), ad::gather_rows(wz, skills)));
  Var keys = linear(tape, p, prefix + ".key", trunk.token_emb, trainable);
  return head_logits(tape, p, prefix, u, keys, b, trainable);
}

std::vector<Var> decoder_log_probs_all(Tape& tape, const ParamBundle& p, const std::string& prefix,
                                       const TrunkOut& trunk, const StreamBatch& b, int n_skills, bool trainable) {
  Var base = shared_hidden(tape, p, prefix, trunk, trainable);
  Var wz = tape.param(p, prefix + ".u.wz", trainable);
  if (n_skills != wz.rows()) {
    throw DimensionError("decoder head has " + std::to_string(wz.rows()) + " skill inputs, asked for " +
                         std::to_string(n_skills));
  }
  Var keys = linear(tape, p, prefix + ".key", trunk.token_emb, trainable);
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(n_skills));
  for (int z = 0; z < n_skills; ++z) {
    Var u = ad::relu(ad::add_rowvec(base, ad::slice_rows(wz, z, 1)));
    out.push_back(ad::masked_log_softmax_rows(head_logits(tape, p, prefix, u, keys, b, trainable), b.masks));
  }
  return out;
}

int greedy_action(const Eigen::Ref<const Matrix>& logits_row, const Eigen::Ref<const BoolMatrix>& mask_row) {
  if (logits_row.rows() != 1 || mask_row.rows() != 1 || logits_row.cols() != mask_row.cols()) {
    throw DimensionError("greedy_action: expects matching single rows, got " +
                         shape_string(logits_row.rows(), logits_row.cols()) + " and " +
                         shape_string(mask_row.rows(), mask_row.cols()));
  }
  int best = -1;
  for (Eigen::Index a = 0; a < logits_row.cols(); ++a) {
    if (!mask_row(0, a)) continue;
    if (best < 0 || logits_row(0, a) > logits_row(0, best)) best = static_cast<int>(a);
  }
  if (best < 0) throw ContractError("greedy_action: no valid action");
  return best;
}

// ---------------------------------------------------------------------------------------------
// Encoder

Matrix decompose(const Eigen::Ref<const Vector>& global_state, std::span<const int> joint_action,
                 const arena::TaskSpec& task, const NetConfig& cfg) {
  cfg.check_task(task);
  const int entities = task.n_entities();
  if (global_state.size() != static_cast<Eigen::Index>(entities) * arena::kStateFeatures) {
    throw ContractError("decompose: state has " + std::to_string(global_state.size()) + " entries, task " +
                        task.name() + " needs " + std::to_string(entities * arena::kStateFeatures));
  }
  if (static_cast<int>(joint_action.size()) != task.n_allies) {
    throw ContractError("decompose: " + std::to_string(joint_action.size()) + " actions for " +
                        std::to_string(task.n_allies) + " allies");
  }
  Matrix e = Matrix::Zero(entities, cfg.token_length());
  for (int k = 0; k < entities; ++k) {
    const bool ally = k < task.n_allies;
    const double* s = global_state.data() + k * arena::kStateFeatures;
    const bool alive = s[3] != 0.0;
    if (alive) {
      e(k, 0) = s[0];
      e(k, 1) = s[1];
      e(k, 2) = s[2];
      e(k, 7) = 1.0;
    }
    e(k, 4) = ally ? 1.0 : 0.0;
    e(k, 5) = ally ? 0.0 : 1.0;
    if (ally) {
      const int a = joint_action[static_cast<std::size_t>(k)];
      if (a < 0 || a >= task.n_actions()) {
        throw ContractError("decompose: ally " + std::to_string(k) + " action " + std::to_string(a) +
                            " outside the task's " + std::to_string(task.n_actions()) + " actions");
      }
      e(k, arena::kTokenFeatures + a) = 1.0;
    }
  }
  return e;
}

void init_encoder(ParamBundle& p, const std::string& prefix, const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  // First layers of the 3 * n_heads projection MLPs are stored side by side in one matrix;
  // every MLP still has its own hidden units.
  const int width = 3 * cfg.n_heads * cfg.hidden;
  init_uniform(p, prefix + ".proj1.w", cfg.token_length(), width, cfg.token_length(), rng);
  init_uniform(p, prefix + ".proj1.b", 1, width, cfg.token_length(), rng);
  for (int h = 0; h < cfg.n_heads; ++h) {
    for (const char* role : {"q", "k", "v"}) {
      init_linear(p, prefix + "." + role + std::to_string(h), cfg.hidden, cfg.head_dim(), rng);
    }
  }
  init_linear(p, prefix + ".e1", cfg.embed, cfg.hidden, rng);
  init_linear(p, prefix + ".e2", cfg.hidden, cfg.n_skills, rng);
}

void EntityBatch::add_group(const Eigen::Ref<const Matrix>& entity_tokens, std::span<const int> agents) {
  if (entity_tokens.cols() != width_) {
    throw DimensionError("EntityBatch: token width " + std::to_string(entity_tokens.cols()) + ", expected " +
                         std::to_string(width_));
  }
  const int n = static_cast<int>(entity_tokens.rows());
  if (n < 1) throw ContractError("EntityBatch: empty token set");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  auto less = [&](int a, int b) {
    for (int c = 0; c < width_; ++c) {
      if (entity_tokens(a, c) != entity_tokens(b, c)) return entity_tokens(a, c) < entity_tokens(b, c);
    }
    return false;
  };
  std::stable_sort(perm.begin(), perm.end(), less);
  for (int k : perm) {
    for (int c = 0; c < width_; ++c) data_.push_back(entity_tokens(k, c));
  }
  for (int agent : agents) {
    if (agent < 0 || agent >= n) throw ContractError("EntityBatch: agent " + std::to_string(agent) + " out of range");
    // Identical tokens are interchangeable; pick the first so the readout ignores input order.
    int pos = 0;
    while (less(perm[static_cast<std::size_t>(pos)], agent)) ++pos;
    agent_rows_.push_back(rows_ + pos);
  }
  groups_.emplace_back(rows_, n);
  rows_ += n;
}

Matrix EntityBatch::tokens() const { return Eigen::Map<const Matrix>(data_.data(), rows_, width_); }

Var attention(Tape& tape, const ParamBundle& p, const std::string& prefix, const Var& tokens,
              std::span<const std::pair<int, int>> groups, const NetConfig& cfg, bool trainable) {
  if (tokens.cols() != cfg.token_length()) {
    throw DimensionError("attention: tokens are " + std::to_string(tokens.cols()) + " wide, expected " +
                         std::to_string(cfg.token_length()));
  }
  Var hidden = ad::relu(linear(tape, p, prefix + ".proj1", tokens, trainable));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  int block = 0;
  auto project = [&](const std::string& name) {
    Var h = ad::slice_cols(hidden, static_cast<Eigen::Index>(block++) * cfg.hidden, cfg.hidden);
    return linear(tape, p, prefix + "." + name, h, trainable);
  };
  for (int h = 0; h < cfg.n_heads; ++h) {
    const std::string id = std::to_string(h);
    Var q = project("q" + id);
    Var k = project("k" + id);
    Var v = project("v" + id);
    heads.push_back(ad::grouped_attention(q, k, v, groups));
  }
  return heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
}

Var encoder_logits(Tape& tape, const ParamBundle& p, const std::string& prefix, const EntityBatch& batch,
                   const NetConfig& cfg, bool trainable) {
  Var attn = attention(tape, p, prefix, tape.constant(batch.tokens()), batch.groups(), cfg, trainable);
  Var a = ad::gather_rows(attn, batch.agent_rows());
  return linear(tape, p, prefix + ".e2", ad::relu(linear(tape, p, prefix + ".e1", a, trainable)), trainable);
}

Vector encode(const ParamBundle& p, const std::string& prefix, const Eigen::Ref<const Vector>& global_state,
              std::span<const int> joint_action, int agent, const arena::TaskSpec& task, const NetConfig& cfg) {
  if (agent < 0 || agent >= task.n_allies) throw ContractError("encode: agent " + std::to_string(agent) + " out of range");
  if (global_state(agent * arena::kStateFeatures + 3) == 0.0) {
    return Vector::Constant(cfg.n_skills, 1.0 / cfg.n_skills);
  }
  EntityBatch batch(cfg.token_length());
  const int agents[] = {agent};
  batch.add_group(decompose(global_state, joint_action, task, cfg), agents);
  Tape tape;
  Matrix logits = encoder_logits(tape, p, prefix, batch, cfg, false).value();
  return softmax(logits, 1).row(0).transpose();
}

Matrix encode_episode(const ParamBundle& p, const std::string& prefix, const data::EpisodeRecord& ep,
                      const NetConfig& cfg) {
  const int T = ep.length();
  const int n = ep.n_agents();
  Matrix out = Matrix::Constant(static_cast<Eigen::Index>(T) * n, cfg.n_skills, 1.0 / cfg.n_skills);
  EntityBatch batch(cfg.token_length());
  std::vector<Eigen::Index> targets;
  std::vector<int> living;
  for (int t = 0; t < T; ++t) {
    living.clear();
    for (int i = 0; i < n; ++i) {
      if (ep.states(t, i * arena::kStateFeatures + 3) != 0.0) living.push_back(i);
    }
    if (living.empty()) continue;
    Vector state = ep.states.row(t).transpose();
    std::vector<int> joint(ep.actions.row(t).data(), ep.actions.row(t).data() + n);
    batch.add_group(decompose(state, joint, ep.task, cfg), living);
    for (int i : living) targets.push_back(static_cast<Eigen::Index>(t) * n + i);
  }
  if (targets.empty()) return out;
  Tape tape;
  Matrix q = softmax(encoder_logits(tape, p, prefix, batch, cfg, false).value(), 1);
  for (std::size_t k = 0; k < targets.size(); ++k) out.row(targets[k]) = q.row(static_cast<Eigen::Index>(k));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Stage 1

namespace {

/// Rows of `b` restricted to `rows`; token references stay valid because tokens are shared.
StreamBatch select_rows(const StreamBatch& b, const std::vector<int>& rows) {
  StreamBatch out;
  const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
  out.enemy_slots.resize(m, b.enemy_slots.cols());
  out.masks.resize(m, b.masks.cols());
  out.prev_action.resize(m, b.prev_action.cols());
  for (Eigen::Index k = 0; k < m; ++k) {
    const int r = rows[static_cast<std::size_t>(k)];
    out.enemy_slots.row(k) = b.enemy_slots.row(r);
    out.masks.row(k) = b.masks.row(r);
    out.prev_action.row(k) = b.prev_action.row(r);
    out.actions.push_back(b.actions[static_cast<std::size_t>(r)]);
    out.alive.push_back(b.alive[static_cast<std::size_t>(r)]);
  }
  return out;
}

}  // namespace

VaeTerms vae_loss(Tape& tape, const ParamBundle& p, std::span<const Window> windows, double beta,
                  const NetConfig& cfg, bool trainable) {
  if (windows.empty()) throw ContractError("vae_loss: empty batch");
  if (beta < 0) throw ConfigError("vae_loss: beta must be non-negative");
  std::vector<Stream> streams;
  streams.reserve(windows.size());
  for (const Window& w : windows) {
    if (w.episode == nullptr || w.t < 0 || w.t >= w.episode->length()) {
      throw ContractError("vae_loss: window step outside its episode");
    }
    streams.push_back({w.episode, w.t + 1});
  }
  SeqLayout layout;
  StreamBatch batch = build_streams(streams, cfg, layout);

  std::vector<int> rows;
  EntityBatch entities(cfg.token_length());
  std::vector<int> living;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const Window& w = windows[k];
    const data::EpisodeRecord& ep = *w.episode;
    living.clear();
    for (int i = 0; i < ep.n_agents(); ++i) {
      const int r = layout.row(static_cast<int>(k), i, w.t);
      if (batch.alive[static_cast<std::size_t>(r)]) {
        living.push_back(i);
        rows.push_back(r);
      }
    }
    if (living.empty()) continue;
    Vector state = ep.states.row(w.t).transpose();
    std::vector<int> joint(ep.actions.row(w.t).data(), ep.actions.row(w.t).data() + ep.n_agents());
    entities.add_group(decompose(state, joint, ep.task, cfg), living);
  }
  VaeTerms out;
  out.agent_steps = static_cast<int>(rows.size());
  if (rows.empty()) {
    out.loss = tape.constant(Matrix::Zero(1, 1));
    return out;
  }

  TrunkOut trunk = run_trunk(tape, p, "dec.trunk", batch, layout, trainable);
  StreamBatch sel = select_rows(batch, rows);
  TrunkOut last{ad::gather_rows(trunk.hidden, rows), trunk.token_emb};
  std::vector<Var> logp = decoder_log_probs_all(tape, p, "dec.head", last, sel, cfg.n_skills, trainable);
  std::vector<Var> picked;
  picked.reserve(logp.size());
  for (const Var& lp : logp) picked.push_back(ad::pick(lp, sel.actions));
  Var log_lik = ad::concat_cols(picked);  // m x Z

  Var logq = ad::log_softmax_rows(encoder_logits(tape, p, "enc", entities, cfg, trainable));
  Var q = ad::exp(logq);
  Var recon = ad::scale(ad::mean(ad::rowwise_dot(q, log_lik)), -1.0);
  Var kl = ad::add_scalar(ad::mean(ad::rowwise_dot(q, logq)), std::log(static_cast<double>(cfg.n_skills)));
  out.recon = recon.scalar();
  out.kl = kl.scalar();
  out.loss = beta == 0.0 ? recon : ad::add(recon, ad::scale(kl, beta));
  return out;
}

void init_skill_model(ParamBundle& p, const NetConfig& cfg, Rng& rng) {
  init_encoder(p, "enc", cfg, rng);
  init_trunk(p, "dec.trunk", cfg, rng);
  init_decoder_head(p, "dec.head", cfg, cfg.n_skills, rng);
}

std::vector<Window> sample_windows(const data::MultiTaskDataset& dataset, int count, Rng& rng) {
  if (dataset.empty()) throw DataError("sample_windows: dataset is empty");
  std::vector<std::int64_t> ends;
  ends.reserve(dataset.size());
  std::int64_t total = 0;
  for (const auto& ep : dataset.episodes) {
    total += ep.length();
    ends.push_back(total);
  }
  if (total == 0) throw DataError("sample_windows: dataset has no steps");
  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  std::vector<Window> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const std::int64_t u = pick(rng);
    const auto it = std::upper_bound(ends.begin(), ends.end(), u);
    const std::size_t e = static_cast<std::size_t>(it - ends.begin());
    const std::int64_t start = e == 0 ? 0 : ends[e - 1];
    out.push_back({&dataset.episodes[e], static_cast<int>(u - start)});
  }
  return out;
}

ParamBundle train_skills(const data::MultiTaskDataset& dataset, const NetConfig& cfg, const SkillTrainConfig& tc,
                         std::vector<SkillLogRow>* log, const std::function<void(const SkillLogRow&)>& on_log) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train_skills: dataset is empty");
  if (tc.steps < 0 || tc.batch < 1 || tc.log_every < 1) throw ConfigError("train_skills: bad step/batch/log sizes");
  for (const auto& task : dataset.tasks) cfg.check_task(task);

  Rng rng(mix_seed(tc.seed, 0x51));
  ParamBundle params;
  init_skill_model(params, cfg, rng);
  AdamState adam;
  Rng batch_rng(mix_seed(tc.seed, 0x52));

  SkillLogRow acc;
  int in_block = 0;
  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<Window> windows = sample_windows(dataset, tc.batch, batch_rng);
    Tape tape;
    VaeTerms terms = vae_loss(tape, params, windows, tc.beta, cfg, true);
    const double loss = terms.loss.scalar();
    if (!std::isfinite(loss)) {
      throw ValidityError("skill training produced a non-finite loss at step " + std::to_string(step));
    }
    tape.backward(terms.loss);
    ParamBundle grads = tape.bound_gradients(params);
    if (tc.clip_norm > 0) clip_grad_norm(grads, tc.clip_norm);
    adam_step(params, grads, adam, tc.adam);

    acc.loss += loss;
    acc.recon += terms.recon;
    acc.kl += terms.kl;
    ++in_block;
    if (step % tc.log_every == 0 || step == tc.steps) {
      SkillLogRow row{step, acc.loss / in_block, acc.recon / in_block, acc.kl / in_block};
      if (log != nullptr) log->push_back(row);
      if (on_log) on_log(row);
      acc = SkillLogRow{};
      in_block = 0;
    }
  }
  return params;
}

void write_skill_log(const std::vector<SkillLogRow>& rows, std::ostream& out) {
  out << "step,loss,recon,kl\n";
  for (const SkillLogRow& r : rows) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.recon) << ',' << format_double(r.kl)
        << '\n';
  }
}

Vector skill_usage(const ParamBundle& p, std::span<const Window> windows, const NetConfig& cfg) {
  EntityBatch batch(cfg.token_length());
  std::vector<int> living;
  for (const Window& w : windows) {
    const data::EpisodeRecord& ep = *w.episode;
    living.clear();
    for (int i = 0; i < ep.n_agents(); ++i) {
      if (ep.states(w.t, i * arena::kStateFeatures + 3) != 0.0) living.push_back(i);
    }
    if (living.empty()) continue;
    Vector state = ep.states.row(w.t).transpose();
    std::vector<int> joint(ep.actions.row(w.t).data(), ep.actions.row(w.t).data() + ep.n_agents());
    batch.add_group(decompose(state, joint, ep.task, cfg), living);
  }
  Vector share = Vector::Zero(cfg.n_skills);
  if (batch.agent_rows().empty()) return share;
  Tape tape;
  const Matrix logits = encoder_logits(tape, p, "enc", batch, cfg, false).value();
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best;
    logits.row(r).maxCoeff(&best);
    share(best) += 1.0;
  }
  return share / static_cast<double>(logits.rows());
}

}  // namespace hygen::skills
