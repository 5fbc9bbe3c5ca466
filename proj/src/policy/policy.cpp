#include "hygen/policy/policy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <thread>

#include "hygen/numcore/format.hpp"
#include "hygen/numcore/rng.hpp"

namespace hygen::policy {

using skills::SeqLayout;
using skills::StreamBatch;
using skills::StreamBuilder;
using skills::TrunkOut;

namespace {

Var linear(Tape& tape, const ParamBundle& p, const std::string& name, const Var& x, bool trainable) {
  return ad::add_rowvec(ad::matmul(x, tape.param(p, name + ".w", trainable)),
                        tape.param(p, name + ".b", trainable));
}

bool alive_in(const data::EpisodeRecord& ep, int t, int i) {
  return ep.states(t, i * arena::kStateFeatures + 3) != 0.0;
}

int argmax_row(const Eigen::Ref<const Matrix>& m, Eigen::Index r) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) > m(r, best)) best = static_cast<int>(c);
  }
  return best;
}

/// Single-agent stream over steps [0, t] of an episode.
StreamBatch agent_stream(const data::EpisodeRecord& ep, int agent, int t, const NetConfig& cfg, SeqLayout& layout) {
  if (t < 0 || t >= ep.length()) throw ContractError("agent history needs 0 <= t < episode length");
  if (agent < 0 || agent >= ep.n_agents()) throw ContractError("agent " + std::to_string(agent) + " out of range");
  const int n = ep.n_agents();
  StreamBuilder b(cfg, t + 1, static_cast<Eigen::Index>(t + 1) * ep.task.n_entities());
  layout = SeqLayout{};
  layout.order = {0};
  layout.first_pair = {0};
  layout.pair_steps = {t + 1};
  layout.offsets.push_back(0);
  for (int s = 0; s <= t; ++s) {
    const Eigen::Index r = static_cast<Eigen::Index>(s) * n + agent;
    b.add_row(ep.obs.row(r).data(), ep.task, s > 0 ? ep.actions(s - 1, agent) : -1, ep.masks.row(r).data(),
              ep.actions(s, agent));
    layout.offsets.push_back(s + 1);
  }
  return b.finish();
}

}  // namespace

NetConfig mixer_config(const NetConfig& cfg, int mixer_embed) {
  NetConfig m = cfg;
  m.n_heads = 1;
  m.embed = mixer_embed;
  m.hidden = mixer_embed;
  return m;
}

ParamBundle init_policy(const ParamBundle& stage1, const NetConfig& cfg, int mixer_embed, Rng& rng) {
  cfg.validate();
  if (mixer_embed < 1) throw ConfigError("mixer width must be positive");
  for (const char* required : {"enc.e2.w", "dec.trunk.gru.wh", "dec.head.u.wz"}) {
    if (!stage1.contains(required)) throw DataError(std::string("stage-1 parameters lack ") + required);
  }
  if (stage1.at("dec.head.u.wz").rows() != cfg.n_skills || stage1.at("enc.e2.w").cols() != cfg.n_skills) {
    throw ConfigError("stage-1 parameters were trained with a different skill count");
  }
  ParamBundle p;
  p.merge(stage1.with_prefix("enc."));
  p.merge(stage1.with_prefix("dec."));
  p.copy_prefix(stage1, "dec.trunk.", "v.trunk.");
  init_linear(p, "v.q1", cfg.hidden + cfg.n_skills, cfg.hidden, rng);
  init_linear(p, "v.q2", cfg.hidden, cfg.n_skills, rng);
  p.copy_prefix(stage1, "dec.head.", "v.dec.");
  skills::init_trunk(p, "lenc.trunk", cfg, rng);
  init_linear(p, "lenc.head", cfg.hidden, cfg.n_skills, rng);

  const NetConfig mcfg = mixer_config(cfg, mixer_embed);
  skills::init_encoder(p, "mix.att", mcfg, rng);
  // The attention block's skill layers are not used by the mixer.
  ParamBundle kept;
  for (const auto& name : p.names()) {
    if (name.rfind("mix.att.e", 0) != 0) kept.add(name, p.at(name));
  }
  p = std::move(kept);
  init_linear(p, "mix.w1", mixer_embed, mixer_embed, rng);
  init_linear(p, "mix.b1", mixer_embed, mixer_embed, rng);
  init_linear(p, "mix.w2", mixer_embed, mixer_embed, rng);
  init_linear(p, "mix.b2a", mixer_embed, mixer_embed, rng);
  init_linear(p, "mix.b2b", mixer_embed, 1, rng);
  return p;
}

ParamBundle target_snapshot(const ParamBundle& params) {
  ParamBundle t = params.with_prefix("v.");
  t.merge(params.with_prefix("lenc."));
  t.merge(params.with_prefix("mix."));
  return t;
}

// ---------------------------------------------------------------------------------------------
// Per-agent networks

Var local_log_posterior(Tape& tape, const ParamBundle& p, const Var& lenc_hidden, bool trainable) {
  return ad::log_softmax_rows(linear(tape, p, "lenc.head", lenc_hidden, trainable));
}

Var q_head(Tape& tape, const ParamBundle& p, const Var& value_hidden, const Var& local_posterior, bool trainable) {
  const Var parts[] = {value_hidden, local_posterior};
  Var h = ad::relu(linear(tape, p, "v.q1", ad::concat_cols(parts), trainable));
  return linear(tape, p, "v.q2", h, trainable);
}

Vector local_encode(const ParamBundle& p, const data::EpisodeRecord& ep, int agent, int t, const NetConfig& cfg) {
  SeqLayout layout;
  StreamBatch b = agent_stream(ep, agent, t, cfg, layout);
  Tape tape;
  TrunkOut l = skills::run_trunk(tape, p, "lenc.trunk", b, layout, false);
  Matrix logits = linear(tape, p, "lenc.head", ad::slice_rows(l.hidden, t, 1), false).value();
  return softmax(logits, 1).row(0).transpose();
}

Vector q_individual(const ParamBundle& p, const data::EpisodeRecord& ep, int agent, int t, const NetConfig& cfg) {
  SeqLayout layout;
  StreamBatch b = agent_stream(ep, agent, t, cfg, layout);
  Tape tape;
  TrunkOut v = skills::run_trunk(tape, p, "v.trunk", b, layout, false);
  TrunkOut l = skills::run_trunk(tape, p, "lenc.trunk", b, layout, false);
  Var post = ad::exp(local_log_posterior(tape, p, ad::slice_rows(l.hidden, t, 1), false));
  return q_head(tape, p, ad::slice_rows(v.hidden, t, 1), post, false).value().row(0).transpose();
}

// ---------------------------------------------------------------------------------------------
// Mixer

Matrix state_tokens(const Eigen::Ref<const Vector>& global_state, const arena::TaskSpec& task, const NetConfig& cfg) {
  const std::vector<int> none(static_cast<std::size_t>(task.n_allies), arena::kNoop);
  Matrix e = skills::decompose(global_state, none, task, cfg);
  e.rightCols(cfg.a_max()).setZero();
  return e;
}

Var mix_combine(const Var& q, const Var& w1_rows, const Var& b1, const Var& w2, const Var& b2,
                const ad::RowLists& agents) {
  Var hidden = ad::elu(ad::add(ad::pool_sum(ad::mul_colvec(w1_rows, q), agents), b1));
  return ad::add(ad::rowwise_dot(w2, hidden), b2);
}

Var mix(Tape& tape, const ParamBundle& p, const Var& q, const MixBatch& batch, const NetConfig& cfg, int mixer_embed,
        bool trainable) {
  if (q.cols() != 1 || q.rows() != static_cast<Eigen::Index>(batch.agent_tokens.size())) {
    throw DimensionError("mix: expected one chosen value per agent row, got " + shape_string(q.rows(), q.cols()));
  }
  const NetConfig mcfg = mixer_config(cfg, mixer_embed);
  Var att = skills::attention(tape, p, "mix.att", tape.constant(batch.tokens), batch.groups, mcfg, trainable);
  ad::RowLists members;
  for (const auto& [start, count] : batch.groups) members.push_range(start, count);
  Var pooled = ad::pool_mean(att, members);
  Var w1 = ad::abs(linear(tape, p, "mix.w1", ad::gather_rows(att, batch.agent_tokens), trainable));
  Var b1 = linear(tape, p, "mix.b1", pooled, trainable);
  Var w2 = ad::abs(linear(tape, p, "mix.w2", pooled, trainable));
  Var b2 = linear(tape, p, "mix.b2b", ad::relu(linear(tape, p, "mix.b2a", pooled, trainable)), trainable);
  return mix_combine(q, w1, b1, w2, b2, batch.agents);
}

// ---------------------------------------------------------------------------------------------
// Labels

LabeledEpisode label_episode(const ParamBundle& p, const data::EpisodeRecord& ep, const NetConfig& cfg) {
  const int T = ep.length();
  const int n = ep.n_agents();
  LabeledEpisode out;
  out.episode = &ep;
  out.global_logp = Matrix::Constant(static_cast<Eigen::Index>(T) * n, cfg.n_skills, -std::log(cfg.n_skills));
  skills::EntityBatch batch(cfg.token_length());
  std::vector<Eigen::Index> targets;
  std::vector<int> living;
  for (int t = 0; t < T; ++t) {
    living.clear();
    for (int i = 0; i < n; ++i) {
      if (alive_in(ep, t, i)) living.push_back(i);
    }
    if (living.empty()) continue;
    Vector state = ep.states.row(t).transpose();
    std::vector<int> joint(ep.actions.row(t).data(), ep.actions.row(t).data() + n);
    batch.add_group(skills::decompose(state, joint, ep.task, cfg), living);
    for (int i : living) targets.push_back(static_cast<Eigen::Index>(t) * n + i);
  }
  if (!targets.empty()) {
    Tape tape;
    Matrix logp = log_softmax_rows(skills::encoder_logits(tape, p, "enc", batch, cfg, false).value());
    for (std::size_t k = 0; k < targets.size(); ++k) out.global_logp.row(targets[k]) = logp.row(static_cast<Eigen::Index>(k));
  }
  if (ep.has_skills()) {
    out.labels = ep.skills;
  } else {
    out.labels = IndexMatrix::Zero(T, n);
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < n; ++i) {
        if (alive_in(ep, t, i)) out.labels(t, i) = argmax_row(out.global_logp, static_cast<Eigen::Index>(t) * n + i);
      }
    }
  }
  return out;
}

IndexMatrix skill_labels(const ParamBundle& p, const data::EpisodeRecord& ep, const NetConfig& cfg) {
  return label_episode(p, ep, cfg).labels;
}

// ---------------------------------------------------------------------------------------------
// Stage-2 objective

namespace {

/// Layout and constant inputs shared by the stage-2 loss terms.
struct Prepared {
  SeqLayout layout;
  StreamBatch streams;
  MixBatch mixer;
  std::vector<int> labels;         // per row
  std::vector<int> living;         // rows of living agents
  Matrix global_logp;              // living rows x |Z|
  Vector rewards, not_done;        // per group
  std::vector<int> next_group;     // per group, -1 at the final step
};

Prepared prepare(std::span<const LabeledEpisode> batch, const NetConfig& cfg) {
  if (batch.empty()) throw ContractError("stage-2 loss: empty batch");
  Prepared pr;
  std::vector<skills::Stream> streams;
  for (const LabeledEpisode& le : batch) {
    if (le.episode == nullptr) throw ContractError("stage-2 loss: missing episode");
    const auto& ep = *le.episode;
    if (le.labels.rows() != ep.length() || le.labels.cols() != ep.n_agents()) {
      throw ContractError("stage-2 loss: skill labels missing for an episode of task " + ep.task.name());
    }
    streams.push_back({le.episode, ep.length()});
  }
  pr.streams = skills::build_streams(streams, cfg, pr.layout);
  const SeqLayout& L = pr.layout;
  const Eigen::Index rows = pr.streams.rows();
  pr.labels.assign(static_cast<std::size_t>(rows), 0);

  std::vector<int> position(batch.size());
  for (std::size_t k = 0; k < L.order.size(); ++k) position[static_cast<std::size_t>(L.order[k])] = static_cast<int>(k);
  std::vector<int> group_base;
  int groups = 0;
  std::vector<double> tokens;
  std::vector<double> rewards, not_done;
  std::vector<double> global_logp;  // living rows, which are visited in increasing order
  pr.mixer.agent_tokens.assign(static_cast<std::size_t>(rows), 0);
  int token_rows = 0;
  for (int t = 0; t < L.max_steps(); ++t) {
    group_base.push_back(groups);
    for (int s : L.order) {
      const LabeledEpisode& le = batch[static_cast<std::size_t>(s)];
      const auto& ep = *le.episode;
      if (ep.length() <= t) break;
      const int n = ep.n_agents();
      Vector state = ep.states.row(t).transpose();
      Matrix tok = state_tokens(state, ep.task, cfg);
      tokens.insert(tokens.end(), tok.data(), tok.data() + tok.size());
      pr.mixer.groups.emplace_back(token_rows, static_cast<int>(tok.rows()));
      const int first = L.row(s, 0, t);
      pr.mixer.agents.push_range(first, n);
      for (int i = 0; i < n; ++i) {
        pr.mixer.agent_tokens[static_cast<std::size_t>(first + i)] = token_rows + i;
        pr.labels[static_cast<std::size_t>(first + i)] = le.labels(t, i);
        if (pr.streams.alive[static_cast<std::size_t>(first + i)]) {
          pr.living.push_back(first + i);
          const auto src = le.global_logp.row(static_cast<Eigen::Index>(t) * n + i);
          global_logp.insert(global_logp.end(), src.data(), src.data() + src.size());
        }
      }
      token_rows += static_cast<int>(tok.rows());
      rewards.push_back(ep.rewards(t));
      not_done.push_back(ep.done[static_cast<std::size_t>(t)] ? 0.0 : 1.0);
      ++groups;
    }
  }
  pr.mixer.tokens = Eigen::Map<const Matrix>(tokens.data(), token_rows, cfg.token_length());
  pr.rewards = Eigen::Map<const Vector>(rewards.data(), groups);
  pr.not_done = Eigen::Map<const Vector>(not_done.data(), groups);
  pr.next_group.assign(static_cast<std::size_t>(groups), -1);
  for (int t = 0; t + 1 < L.max_steps(); ++t) {
    for (int s : L.order) {
      const auto& ep = *batch[static_cast<std::size_t>(s)].episode;
      if (ep.length() <= t + 1) break;
      const int pos = position[static_cast<std::size_t>(s)];
      pr.next_group[static_cast<std::size_t>(group_base[t] + pos)] = group_base[t + 1] + pos;
    }
  }
  pr.global_logp = Eigen::Map<const Matrix>(global_logp.data(), static_cast<Eigen::Index>(pr.living.size()),
                                             cfg.n_skills);
  return pr;
}

struct Online {
  Var q;           // rows x |Z|
  Var local_logp;  // rows x |Z|
};

Online forward(Tape& tape, const ParamBundle& p, const Prepared& pr, bool trainable) {
  TrunkOut v = skills::run_trunk(tape, p, "v.trunk", pr.streams, pr.layout, trainable);
  TrunkOut l = skills::run_trunk(tape, p, "lenc.trunk", pr.streams, pr.layout, trainable);
  Var logp = local_log_posterior(tape, p, l.hidden, trainable);
  return {q_head(tape, p, v.hidden, ad::exp(logp), trainable), logp};
}

/// TD targets y per group, computed on a private tape from the target networks.
Matrix td_targets(const ParamBundle& target, const Prepared& pr, const NetConfig& cfg, int mixer_embed, double gamma) {
  Tape tape;
  Online o = forward(tape, target, pr, false);
  const Matrix& q = o.q.value();
  std::vector<int> greedy(static_cast<std::size_t>(q.rows()), 0);
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    if (pr.streams.alive[static_cast<std::size_t>(r)]) greedy[static_cast<std::size_t>(r)] = argmax_row(q, r);
  }
  const Matrix next = mix(tape, target, ad::pick(o.q, greedy), pr.mixer, cfg, mixer_embed, false).value();
  Matrix y(pr.rewards.size(), 1);
  for (Eigen::Index g = 0; g < y.rows(); ++g) {
    const int ng = pr.next_group[static_cast<std::size_t>(g)];
    const double boot = ng < 0 ? 0.0 : pr.not_done(g) * next(ng, 0);
    y(g, 0) = pr.rewards(g) + gamma * boot;
  }
  return y;
}

Var td_term(Tape& tape, const ParamBundle& p, const ParamBundle& target, const Prepared& pr, const Online& o,
            const NetConfig& cfg, int mixer_embed, double gamma) {
  Matrix y = td_targets(target, pr, cfg, mixer_embed, gamma);
  Var qtot = mix(tape, p, ad::pick(o.q, pr.labels), pr.mixer, cfg, mixer_embed, true);
  return ad::mean(ad::square(ad::sub(qtot, tape.constant(std::move(y)))));
}

Var consistency_term(Tape& tape, const Prepared& pr, const Online& o) {
  if (pr.living.empty()) return tape.constant(Matrix::Zero(1, 1));
  Var lp = ad::gather_rows(o.local_logp, pr.living);
  return ad::mean(ad::rowwise_dot(ad::exp(lp), ad::sub(lp, tape.constant(pr.global_logp))));
}

Var cql_term(Tape& tape, const Prepared& pr, const Online& o) {
  if (pr.living.empty()) return tape.constant(Matrix::Zero(1, 1));
  Var q = ad::gather_rows(o.q, pr.living);
  std::vector<int> labels;
  labels.reserve(pr.living.size());
  for (int r : pr.living) labels.push_back(pr.labels[static_cast<std::size_t>(r)]);
  return ad::mean(ad::sub(ad::logsumexp(q, 1), ad::pick(q, labels)));
}

}  // namespace

Var td_loss(Tape& tape, const ParamBundle& p, const ParamBundle& target, std::span<const LabeledEpisode> batch,
            const NetConfig& cfg, int mixer_embed, double gamma) {
  Prepared pr = prepare(batch, cfg);
  Online o = forward(tape, p, pr, true);
  return td_term(tape, p, target, pr, o, cfg, mixer_embed, gamma);
}

Var consistency_loss(Tape& tape, const ParamBundle& p, std::span<const LabeledEpisode> batch, const NetConfig& cfg) {
  Prepared pr = prepare(batch, cfg);
  return consistency_term(tape, pr, forward(tape, p, pr, true));
}

Var cql_loss(Tape& tape, const ParamBundle& p, std::span<const LabeledEpisode> batch, const NetConfig& cfg) {
  Prepared pr = prepare(batch, cfg);
  return cql_term(tape, pr, forward(tape, p, pr, true));
}

LossTerms total_loss(Tape& tape, const ParamBundle& p, const ParamBundle& target,
                     std::span<const LabeledEpisode> batch, const NetConfig& cfg, int mixer_embed,
                     const LossWeights& w) {
  Prepared pr = prepare(batch, cfg);
  Online o = forward(tape, p, pr, true);
  Var td = td_term(tape, p, target, pr, o, cfg, mixer_embed, w.gamma);
  Var lc = consistency_term(tape, pr, o);
  Var cql = cql_term(tape, pr, o);
  LossTerms out;
  out.td = td.scalar();
  out.consistency = lc.scalar();
  out.cql = cql.scalar();
  out.total = td;
  if (w.alpha != 0.0) out.total = ad::add(out.total, ad::scale(lc, w.alpha));
  if (w.cql != 0.0) out.total = ad::add(out.total, ad::scale(cql, w.cql));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Acting

int select_skill(const Eigen::Ref<const Matrix>& q_row, double epsilon, Rng& rng, bool greedy) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  if (q_row.rows() != 1 || q_row.cols() < 1) throw DimensionError("select_skill expects one row of skill values");
  if (!greedy && epsilon > 0.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < epsilon) {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(q_row.cols()) - 1);
      return pick(rng);
    }
  }
  return argmax_row(q_row, 0);
}

int act(const Eigen::Ref<const Matrix>& logits_row, const Eigen::Ref<const BoolMatrix>& mask_row) {
  return skills::greedy_action(logits_row, mask_row);
}

std::vector<data::EpisodeRecord> rollout(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task,
                                         std::span<const std::uint64_t> reset_seeds, const RolloutOptions& opt,
                                         Rng& rng) {
  cfg.check_task(task);
  const int K = static_cast<int>(reset_seeds.size());
  const int n = task.n_allies;
  std::vector<arena::Arena> envs;
  envs.reserve(static_cast<std::size_t>(K));
  std::vector<data::EpisodeWriter> writers;
  std::vector<data::EpisodeRecord> out(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    envs.emplace_back(task);
    envs.back().reset(reset_seeds[static_cast<std::size_t>(k)]);
    if (opt.record) writers.emplace_back(task, opt.actor != Actor::Cloned);
    out[static_cast<std::size_t>(k)].task = task;
  }
  const bool skill_policy = opt.actor != Actor::Cloned;
  const std::string trunk = opt.actor == Actor::Cloned ? "bc.trunk" : "v.trunk";
  const std::string act_trunk = opt.actor == Actor::Frozen ? "dec.trunk" : trunk;
  const std::string head = opt.actor == Actor::Refined ? "v.dec" : opt.actor == Actor::Frozen ? "dec.head" : "bc.head";

  const Eigen::Index rows_all = static_cast<Eigen::Index>(K) * n;
  Matrix h_value = Matrix::Zero(rows_all, cfg.hidden);
  Matrix h_local = Matrix::Zero(rows_all, cfg.hidden);
  Matrix h_act = Matrix::Zero(rows_all, cfg.hidden);
  std::vector<int> prev(static_cast<std::size_t>(rows_all), -1);
  std::vector<std::vector<double>> rewards(static_cast<std::size_t>(K));
  std::vector<std::unique_ptr<bool[]>> masks(static_cast<std::size_t>(n));
  for (auto& m : masks) m.reset(new bool[static_cast<std::size_t>(task.n_actions())]);

  std::vector<int> active;
  for (;;) {
    active.clear();
    for (int k = 0; k < K; ++k) {
      if (!envs[static_cast<std::size_t>(k)].done()) active.push_back(k);
    }
    if (active.empty()) break;
    const Eigen::Index m = static_cast<Eigen::Index>(active.size()) * n;
    StreamBuilder sb(cfg, m, m * task.n_entities());
    std::vector<int> env_rows;
    for (int k : active) {
      const auto& env = envs[static_cast<std::size_t>(k)];
      for (int i = 0; i < n; ++i) {
        const auto obs = env.observation(i);
        const auto mask = env.action_mask(i);
        std::copy(mask.begin(), mask.end(), masks[static_cast<std::size_t>(i)].get());
        const int r = k * n + i;
        sb.add_row(obs.data(), task, prev[static_cast<std::size_t>(r)], masks[static_cast<std::size_t>(i)].get(), -1);
        env_rows.push_back(r);
      }
    }
    StreamBatch b = sb.finish();
    auto gather = [&](const Matrix& h) {
      Matrix g(m, cfg.hidden);
      for (Eigen::Index j = 0; j < m; ++j) g.row(j) = h.row(env_rows[static_cast<std::size_t>(j)]);
      return g;
    };
    auto scatter = [&](Matrix& h, const Matrix& g) {
      for (Eigen::Index j = 0; j < m; ++j) h.row(env_rows[static_cast<std::size_t>(j)]) = g.row(j);
    };

    Tape tape;
    std::vector<int> chosen(static_cast<std::size_t>(m), 0);
    TrunkOut tv = skills::step_trunk(tape, p, trunk, b, gather(h_value), false);
    if (skill_policy) {
      TrunkOut tl = skills::step_trunk(tape, p, "lenc.trunk", b, gather(h_local), false);
      Var post = ad::exp(local_log_posterior(tape, p, tl.hidden, false));
      const Matrix q = q_head(tape, p, tv.hidden, post, false).value();
      for (Eigen::Index j = 0; j < m; ++j) {
        if (b.alive[static_cast<std::size_t>(j)]) {
          chosen[static_cast<std::size_t>(j)] = select_skill(q.row(j), opt.epsilon, rng, opt.epsilon == 0.0);
        }
      }
      scatter(h_local, tl.hidden.value());
    }
    TrunkOut ta = tv;
    if (opt.actor == Actor::Frozen) {
      ta = skills::step_trunk(tape, p, act_trunk, b, gather(h_act), false);
      scatter(h_act, ta.hidden.value());
    }
    scatter(h_value, tv.hidden.value());
    const Matrix logits = skills::decoder_logits(tape, p, head, ta, b, chosen, false).value();

    for (std::size_t a = 0; a < active.size(); ++a) {
      const int k = active[a];
      auto& env = envs[static_cast<std::size_t>(k)];
      std::vector<int> actions(static_cast<std::size_t>(n));
      std::vector<int> skills_taken(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const Eigen::Index j = static_cast<Eigen::Index>(a) * n + i;
        actions[static_cast<std::size_t>(i)] = act(logits.row(j), b.masks.row(j));
        skills_taken[static_cast<std::size_t>(i)] = chosen[static_cast<std::size_t>(j)];
        prev[static_cast<std::size_t>(k * n + i)] = actions[static_cast<std::size_t>(i)];
      }
      if (opt.record) {
        const arena::Arena before = env;
        const arena::StepResult res = env.step(actions);
        writers[static_cast<std::size_t>(k)].record(before, actions, res,
                                                    skill_policy ? skills_taken : std::vector<int>{});
      } else {
        const arena::StepResult res = env.step(actions);
        auto& rec = out[static_cast<std::size_t>(k)];
        rewards[static_cast<std::size_t>(k)].push_back(res.reward);
        rec.done.push_back(res.done);
        rec.win.push_back(res.win);
      }
    }
  }
  for (int k = 0; k < K; ++k) {
    auto& rec = out[static_cast<std::size_t>(k)];
    if (opt.record) {
      rec = writers[static_cast<std::size_t>(k)].finish();
    } else {
      const auto& r = rewards[static_cast<std::size_t>(k)];
      rec.rewards = Eigen::Map<const Vector>(r.data(), static_cast<Eigen::Index>(r.size()));
    }
  }
  return out;
}

data::EpisodeRecord collect_episode(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task,
                                    std::uint64_t reset_seed, double epsilon, Rng& rng, Actor actor) {
  if (actor == Actor::Cloned) throw ContractError("collect_episode needs a skill policy");
  RolloutOptions opt;
  opt.actor = actor;
  opt.epsilon = epsilon;
  opt.record = true;
  const std::uint64_t seeds[] = {reset_seed};
  return std::move(rollout(p, cfg, task, seeds, opt, rng).front());
}

EvalResult zero_shot_eval(const ParamBundle& p, const NetConfig& cfg, const arena::TaskSpec& task, int n_episodes,
                          std::uint64_t seed, Actor actor, int threads) {
  if (n_episodes < 1) throw ContractError("evaluation needs at least one episode");
  task.validate();
  cfg.check_task(task);
  // Fixed-size chunks keep results independent of the worker count.
  constexpr int kChunk = 8;
  const int chunks = (n_episodes + kChunk - 1) / kChunk;
  std::vector<double> wins(static_cast<std::size_t>(chunks), 0.0), returns(static_cast<std::size_t>(chunks), 0.0);
  auto run_chunk = [&](int c) {
    std::vector<std::uint64_t> seeds;
    for (int k = c * kChunk; k < std::min(n_episodes, (c + 1) * kChunk); ++k) {
      seeds.push_back(mix_seed(seed, static_cast<std::uint64_t>(k)));
    }
    Rng unused(0);
    RolloutOptions opt;
    opt.actor = actor;
    for (const auto& ep : rollout(p, cfg, task, seeds, opt, unused)) {
      wins[static_cast<std::size_t>(c)] += ep.won() ? 1.0 : 0.0;
      returns[static_cast<std::size_t>(c)] += ep.total_return();
    }
  };
  const int workers = std::clamp(threads, 1, chunks);
  if (workers == 1) {
    for (int c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int c = w; c < chunks; c += workers) run_chunk(c);
      });
    }
    for (auto& t : pool) t.join();
  }
  EvalResult r;
  r.task = task.name();
  r.episodes = n_episodes;
  for (int c = 0; c < chunks; ++c) {
    r.win_rate += wins[static_cast<std::size_t>(c)];
    r.mean_return += returns[static_cast<std::size_t>(c)];
  }
  r.win_rate /= n_episodes;
  r.mean_return /= n_episodes;
  return r;
}

// ---------------------------------------------------------------------------------------------
// Variants

std::string variant_modes() {
  return "hygen, offline_only, online_only, bc, fixed_ratio:<r in [0,1]>, no_refine, cql:dynamic, cql:fixed, cql:none";
}

Variant parse_variant(const std::string& mode) {
  Variant v;
  v.name = mode;
  if (mode == "hygen" || mode == "cql:dynamic") return v;
  if (mode == "offline_only") {
    v.collect = false;
    v.fixed_ratio = 1.0;
    return v;
  }
  if (mode == "online_only") {
    v.offline = false;
    v.fixed_ratio = 0.0;
    v.cql = CqlScheme::None;
    return v;
  }
  if (mode == "bc") {
    v.bc = true;
    v.collect = false;
    return v;
  }
  if (mode == "no_refine") {
    v.refine = false;
    return v;
  }
  if (mode == "cql:fixed") {
    v.cql = CqlScheme::Fixed;
    return v;
  }
  if (mode == "cql:none") {
    v.cql = CqlScheme::None;
    return v;
  }
  const std::string prefix = "fixed_ratio:";
  if (mode.rfind(prefix, 0) == 0) {
    const std::string num = mode.substr(prefix.size());
    std::size_t used = 0;
    double r = -1;
    try {
      r = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == num.size() && used > 0 && r >= 0.0 && r <= 1.0) {
      v.fixed_ratio = r;
      return v;
    }
  }
  throw ConfigError("unknown mode '" + mode + "'; expected one of: " + variant_modes());
}

// ---------------------------------------------------------------------------------------------
// Training

double epsilon_at(std::int64_t t, const PolicyTrainConfig& pc) {
  if (pc.eps_steps <= 0 || t >= pc.eps_steps) return pc.eps_end;
  return pc.eps_start - (pc.eps_start - pc.eps_end) * static_cast<double>(t) / pc.eps_steps;
}

void write_metrics(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << "step,R_h,epsilon,L_total,L_TD,L_c,L_CQL,eval_task,eval_win_rate,eval_return\n";
  for (const MetricsRow& r : rows) {
    out << r.step << ',';
    if (r.is_eval) {
      out << ",,,,,," << r.eval_task << ',' << format_double(r.eval_win_rate) << ',' << format_double(r.eval_return);
    } else {
      out << format_double(r.ratio) << ',' << format_double(r.epsilon) << ',' << format_double(r.total) << ','
          << format_double(r.td) << ',' << format_double(r.consistency) << ',' << format_double(r.cql) << ",,,";
    }
    out << '\n';
  }
}

ParamBundle init_bc(const NetConfig& cfg, Rng& rng) {
  ParamBundle p;
  skills::init_trunk(p, "bc.trunk", cfg, rng);
  skills::init_decoder_head(p, "bc.head", cfg, 1, rng);
  return p;
}

Var bc_loss(Tape& tape, const ParamBundle& p, std::span<const data::EpisodeRecord* const> episodes,
            const NetConfig& cfg) {
  if (episodes.empty()) throw ContractError("bc_loss: empty batch");
  std::vector<skills::Stream> streams;
  for (const auto* ep : episodes) streams.push_back({ep, ep->length()});
  SeqLayout layout;
  StreamBatch b = skills::build_streams(streams, cfg, layout);
  TrunkOut trunk = skills::run_trunk(tape, p, "bc.trunk", b, layout, true);
  std::vector<int> living;
  std::vector<int> actions;
  for (Eigen::Index r = 0; r < b.rows(); ++r) {
    if (b.alive[static_cast<std::size_t>(r)]) {
      living.push_back(static_cast<int>(r));
      actions.push_back(b.actions[static_cast<std::size_t>(r)]);
    }
  }
  if (living.empty()) return tape.constant(Matrix::Zero(1, 1));
  Var logp = skills::decoder_log_probs_all(tape, p, "bc.head", trunk, b, 1, true).front();
  return ad::scale(ad::mean(ad::pick(ad::gather_rows(logp, living), actions)), -1.0);
}

namespace {

void evaluate_sources(const ParamBundle& p, const NetConfig& cfg, const std::vector<arena::TaskSpec>& tasks,
                      const PolicyTrainConfig& pc, Actor actor, int step, std::vector<MetricsRow>& rows,
                      const std::function<void(const MetricsRow&)>& on_row) {
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    EvalResult e = zero_shot_eval(p, cfg, tasks[k], pc.eval_episodes, mix_seed(pc.seed, 0xE7A100 + k), actor,
                                  pc.eval_threads);
    MetricsRow row;
    row.step = step;
    row.is_eval = true;
    row.eval_task = e.task;
    row.eval_win_rate = e.win_rate;
    row.eval_return = e.mean_return;
    rows.push_back(row);
    if (on_row) on_row(row);
  }
}

void validate(const PolicyTrainConfig& pc) {
  if (pc.steps < 0 || pc.batch < 1 || pc.eval_every < 1 || pc.eval_episodes < 1 || pc.log_every < 1 ||
      pc.target_every < 1 || pc.buffer_capacity < 1) {
    throw ConfigError("stage-2 step counts, batch and buffer sizes must be positive");
  }
  if (pc.r_end > pc.r_start) throw ConfigError("R_end must not exceed R_start");
}

PolicyResult train_bc(const data::MultiTaskDataset& dataset, const std::vector<arena::TaskSpec>& tasks,
                      const NetConfig& cfg, const PolicyTrainConfig& pc,
                      const std::function<void(const MetricsRow&)>& on_row) {
  if (dataset.empty()) throw DataError("behavior cloning needs offline data");
  Rng init_rng(mix_seed(pc.seed, 1));
  Rng batch_rng(mix_seed(pc.seed, 3));
  PolicyResult res;
  res.actor = Actor::Cloned;
  res.params = init_bc(cfg, init_rng);
  AdamState adam;
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  evaluate_sources(res.params, cfg, tasks, pc, Actor::Cloned, 0, res.metrics, on_row);
  for (int t = 0; t < pc.steps; ++t) {
    std::vector<const data::EpisodeRecord*> batch;
    for (int k = 0; k < pc.batch; ++k) batch.push_back(&dataset.episodes[pick(batch_rng)]);
    Tape tape;
    Var loss = bc_loss(tape, res.params, batch, cfg);
    if (!std::isfinite(loss.scalar())) {
      throw ValidityError("behavior cloning loss became non-finite at step " + std::to_string(t));
    }
    tape.backward(loss);
    ParamBundle grads = tape.bound_gradients(res.params);
    if (pc.clip_norm > 0) clip_grad_norm(grads, pc.clip_norm);
    adam_step(res.params, grads, adam, pc.adam);
    if (t % pc.log_every == 0 || t + 1 == pc.steps) {
      MetricsRow row;
      row.step = t;
      row.ratio = 1.0;
      row.total = loss.scalar();
      res.metrics.push_back(row);
      if (on_row) on_row(row);
    }
    if ((t + 1) % pc.eval_every == 0) evaluate_sources(res.params, cfg, tasks, pc, Actor::Cloned, t + 1, res.metrics, on_row);
  }
  return res;
}

}  // namespace

PolicyResult train_policy(const data::MultiTaskDataset& dataset, const ParamBundle& stage1,
                          const std::vector<arena::TaskSpec>& source_tasks, const NetConfig& cfg,
                          const PolicyTrainConfig& pc, const Variant& variant,
                          const std::function<void(const MetricsRow&)>& on_row) {
  cfg.validate();
  validate(pc);
  if (source_tasks.empty()) throw ConfigError("no source tasks configured");
  for (const auto& task : source_tasks) cfg.check_task(task);
  if (variant.bc) return train_bc(dataset, source_tasks, cfg, pc, on_row);
  if (variant.offline && dataset.empty()) throw DataError("mode " + variant.name + " needs offline data");
  if (!variant.offline && !variant.collect) throw ConfigError("a mode must use offline data or collect online");

  Rng init_rng(mix_seed(pc.seed, 1));
  Rng collect_rng(mix_seed(pc.seed, 2));
  Rng batch_rng(mix_seed(pc.seed, 3));
  PolicyResult res;
  res.actor = variant.refine ? Actor::Refined : Actor::Frozen;
  res.params = init_policy(stage1, cfg, pc.mixer_embed, init_rng);
  ParamBundle target = target_snapshot(res.params);
  AdamState adam;

  const data::MultiTaskDataset empty_dataset;
  const data::MultiTaskDataset& offline = variant.offline ? dataset : empty_dataset;
  data::OnlineBuffer buffer(static_cast<std::size_t>(pc.buffer_capacity));
  std::vector<std::unique_ptr<LabeledEpisode>> offline_labels(offline.size());
  std::map<std::uint64_t, LabeledEpisode> online_labels;

  evaluate_sources(res.params, cfg, source_tasks, pc, res.actor, 0, res.metrics, on_row);
  for (int t = 0; t < pc.steps; ++t) {
    const double eps = epsilon_at(t, pc);
    if (variant.collect) {
      const auto& task = source_tasks[static_cast<std::size_t>(t) % source_tasks.size()];
      data::EpisodeRecord ep = collect_episode(res.params, cfg, task, mix_seed(pc.seed ^ 0xC011EC7ULL, t), eps,
                                               collect_rng, res.actor);
      buffer.push(std::move(ep));
      const std::uint64_t id = buffer.id(buffer.size() - 1);
      online_labels.emplace(id, label_episode(res.params, buffer.at(buffer.size() - 1), cfg));
      while (!online_labels.empty() && online_labels.begin()->first < buffer.id(0)) {
        online_labels.erase(online_labels.begin());
      }
    }
    const double ratio = variant.fixed_ratio ? *variant.fixed_ratio
                                             : data::hybrid_ratio(t, pc.r_start, pc.r_end, pc.decay_steps);
    data::HybridBatch hb = data::sample_hybrid(offline, buffer, pc.batch, ratio, batch_rng);
    std::vector<LabeledEpisode> batch;
    batch.reserve(hb.items.size());
    for (const auto& item : hb.items) {
      if (item.origin == data::Origin::Offline) {
        auto& slot = offline_labels[static_cast<std::size_t>(item.key)];
        if (!slot) slot = std::make_unique<LabeledEpisode>(label_episode(res.params, *item.episode, cfg));
        batch.push_back(*slot);
      } else {
        batch.push_back(online_labels.at(item.key));
      }
    }

    LossWeights w;
    w.gamma = pc.gamma;
    w.alpha = pc.alpha;
    w.cql = variant.cql == CqlScheme::Dynamic ? pc.eta * ratio : variant.cql == CqlScheme::Fixed ? pc.eta : 0.0;
    Tape tape;
    LossTerms terms = total_loss(tape, res.params, target, batch, cfg, pc.mixer_embed, w);
    const double total = terms.total.scalar();
    if (!std::isfinite(total)) {
      throw ValidityError("stage-2 loss became non-finite at step " + std::to_string(t) + " (TD " +
                          std::to_string(terms.td) + ", consistency " + std::to_string(terms.consistency) + ", CQL " +
                          std::to_string(terms.cql) + ")");
    }
    tape.backward(terms.total);
    ParamBundle grads = tape.bound_gradients(res.params);
    if (pc.clip_norm > 0) clip_grad_norm(grads, pc.clip_norm);
    adam_step(res.params, grads, adam, pc.adam);
    if ((t + 1) % pc.target_every == 0) target = target_snapshot(res.params);

    if (t % pc.log_every == 0 || t + 1 == pc.steps) {
      MetricsRow row;
      row.step = t;
      row.ratio = ratio;
      row.epsilon = variant.collect ? eps : 0.0;
      row.total = total;
      row.td = terms.td;
      row.consistency = terms.consistency;
      row.cql = terms.cql * (w.cql != 0.0 ? 1.0 : 0.0);
      res.metrics.push_back(row);
      if (on_row) on_row(row);
    }
    if ((t + 1) % pc.eval_every == 0) {
      evaluate_sources(res.params, cfg, source_tasks, pc, res.actor, t + 1, res.metrics, on_row);
    }
  }
  return res;
}

}  // namespace hygen::policy
