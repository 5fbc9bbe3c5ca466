#include "hygen/datastore/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <ostream>

#include "hygen/errors.hpp"
#include "hygen/numcore/format.hpp"
#include "hygen/numcore/rng.hpp"

namespace hygen::data {

using arena::kStateFeatures;
using arena::kTokenFeatures;
using arena::TaskSpec;

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw DataError("field '" + field + "': " + what);
}

}  // namespace

void EpisodeRecord::validate() const {
  task.validate();
  const int t = length();
  const int n = task.n_allies;
  const int e = task.n_entities();
  const int a = task.n_actions();
  require(t >= 1, "steps", "episode has no steps");
  require(t <= task.episode_limit, "steps", "longer than the episode limit");
  require(states.rows() == t && states.cols() == e * kStateFeatures, "state", "wrong shape");
  require(obs.rows() == t * n && obs.cols() == e * kTokenFeatures, "obs", "wrong shape");
  require(actions.rows() == t && actions.cols() == n, "actions", "wrong shape");
  require(masks.rows() == t * n && masks.cols() == a, "masks", "wrong shape");
  require(static_cast<int>(done.size()) == t && static_cast<int>(win.size()) == t, "done", "wrong length");
  for (int s = 0; s < t; ++s) {
    require((done[s] != 0) == (s == t - 1), "done", "exactly the final step must be done");
    for (int i = 0; i < n; ++i) {
      const int act = actions(s, i);
      require(act >= 0 && act < a && masks(s * n + i, act), "actions",
              "step " + std::to_string(s) + " agent " + std::to_string(i) + " took a masked action");
    }
  }
  if (has_skills()) require(skills.rows() == t && skills.cols() == n, "skills", "wrong shape");
}

bool EpisodeRecord::operator==(const EpisodeRecord& o) const {
  auto same = [](const auto& x, const auto& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && (x.size() == 0 || (x.array() == y.array()).all());
  };
  return task == o.task && same(states, o.states) && same(obs, o.obs) && same(actions, o.actions) &&
         same(masks, o.masks) && same(rewards, o.rewards) && done == o.done && win == o.win &&
         same(skills, o.skills);
}

EpisodeWriter::EpisodeWriter(const TaskSpec& task, bool with_skills) : task_(task), with_skills_(with_skills) {}

void EpisodeWriter::record(const arena::Arena& env, const std::vector<int>& actions,
                           const arena::StepResult& result, const std::vector<int>& skills) {
  if (with_skills_ && static_cast<int>(skills.size()) != task_.n_allies) {
    throw ContractError("episode writer expects one skill per agent");
  }
  states_.push_back(env.global_state());
  for (int i = 0; i < task_.n_allies; ++i) {
    obs_.push_back(env.observation(i));
    masks_.push_back(env.action_mask(i));
  }
  actions_.push_back(actions);
  if (with_skills_) skills_.push_back(skills);
  rewards_.push_back(result.reward);
  done_.push_back(result.done);
  win_.push_back(result.win);
}

EpisodeRecord EpisodeWriter::finish() {
  EpisodeRecord r;
  r.task = task_;
  const int t = static_cast<int>(rewards_.size());
  const int n = task_.n_allies;
  r.states.resize(t, task_.n_entities() * kStateFeatures);
  r.obs.resize(t * n, task_.n_entities() * kTokenFeatures);
  r.masks.resize(t * n, task_.n_actions());
  r.actions.resize(t, n);
  r.rewards.resize(t);
  for (int s = 0; s < t; ++s) {
    std::copy(states_[s].begin(), states_[s].end(), r.states.row(s).data());
    for (int i = 0; i < n; ++i) {
      std::copy(obs_[s * n + i].begin(), obs_[s * n + i].end(), r.obs.row(s * n + i).data());
      for (int k = 0; k < task_.n_actions(); ++k) r.masks(s * n + i, k) = masks_[s * n + i][k];
      r.actions(s, i) = actions_[s][i];
    }
    r.rewards(s) = rewards_[s];
  }
  if (with_skills_) {
    r.skills.resize(t, n);
    for (int s = 0; s < t; ++s)
      for (int i = 0; i < n; ++i) r.skills(s, i) = skills_[s][i];
  }
  r.done = std::move(done_);
  r.win = std::move(win_);
  *this = EpisodeWriter(task_, with_skills_);
  return r;
}

std::string to_string(Quality q) { return q == Quality::Expert ? "expert" : "medium"; }

Quality parse_quality(const std::string& s) {
  if (s == "expert") return Quality::Expert;
  if (s == "medium") return Quality::Medium;
  throw ConfigError("dataset quality must be 'expert' or 'medium', got '" + s + "'");
}

std::size_t MultiTaskDataset::count(const TaskSpec& task) const {
  return static_cast<std::size_t>(
      std::count_if(episodes.begin(), episodes.end(), [&](const EpisodeRecord& e) { return e.task == task; }));
}

void MultiTaskDataset::append(MultiTaskDataset other) {
  for (const auto& t : other.tasks)
    if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
  episodes.reserve(episodes.size() + other.episodes.size());
  for (auto& e : other.episodes) episodes.push_back(std::move(e));
}

void MultiTaskDataset::validate() const {
  for (std::size_t k = 0; k < episodes.size(); ++k) {
    const auto& e = episodes[k];
    if (std::find(tasks.begin(), tasks.end(), e.task) == tasks.end()) {
      throw DataError("episode " + std::to_string(k) + ": task " + e.task.name() + " is not declared");
    }
    e.validate();
  }
}

MultiTaskDataset generate_dataset(const TaskSpec& task, double strength, Quality quality, int n_episodes,
                                  std::uint64_t seed, GenerationSummary* summary) {
  if (n_episodes < 1) throw ConfigError("generate_dataset needs at least one episode");
  MultiTaskDataset out;
  out.quality = quality;
  out.tasks = {task};
  out.episodes.reserve(static_cast<std::size_t>(n_episodes));
  arena::Arena env(task);
  EpisodeWriter writer(task, false);
  int wins = 0;
  double returns = 0;
  for (int k = 0; k < n_episodes; ++k) {
    const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(k));
    env.reset(s);
    arena::ScriptedController controller(strength, mix_seed(s, 1));
    while (!env.done()) {
      const std::vector<int> acts = controller.act_all(env);
      arena::Arena before = env;
      const arena::StepResult r = env.step(acts);
      writer.record(before, acts, r);
    }
    out.episodes.push_back(writer.finish());
    wins += env.won();
    returns += out.episodes.back().total_return();
  }
  if (summary) {
    summary->task = task.name();
    summary->quality = quality;
    summary->strength = strength;
    summary->episodes = n_episodes;
    summary->win_rate = static_cast<double>(wins) / n_episodes;
    summary->mean_return = returns / n_episodes;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// NDJSON

namespace {

template <typename Row>
void write_numbers(std::ostream& out, const Row& row) {
  out << '[';
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    if (k) out << ',';
    out << format_double(row(k));
  }
  out << ']';
}

}  // namespace

void write_dataset(const MultiTaskDataset& data, std::ostream& out) {
  const std::string quality = nlohmann::json(to_string(data.quality)).dump();
  for (const auto& ep : data.episodes) {
    const int n = ep.n_agents();
    out << "{\"task\":\"" << ep.task.name() << "\",\"quality\":" << quality << ",\"steps\":[";
    for (int s = 0; s < ep.length(); ++s) {
      if (s) out << ',';
      out << "{\"state\":";
      write_numbers(out, ep.states.row(s));
      out << ",\"obs\":[";
      for (int i = 0; i < n; ++i) {
        if (i) out << ',';
        write_numbers(out, ep.obs.row(s * n + i));
      }
      out << "],\"actions\":[";
      for (int i = 0; i < n; ++i) out << (i ? "," : "") << ep.actions(s, i);
      out << "],\"masks\":[";
      for (int i = 0; i < n; ++i) {
        out << (i ? ",[" : "[");
        for (Eigen::Index k = 0; k < ep.masks.cols(); ++k) out << (k ? "," : "") << (ep.masks(s * n + i, k) ? "true" : "false");
        out << ']';
      }
      out << "],\"reward\":" << format_double(ep.rewards(s)) << ",\"done\":" << (ep.done[s] ? "true" : "false")
          << ",\"win\":" << (ep.win[s] ? "true" : "false");
      if (ep.has_skills()) {
        out << ",\"skills\":[";
        for (int i = 0; i < n; ++i) out << (i ? "," : "") << ep.skills(s, i);
        out << ']';
      }
      out << '}';
    }
    out << "]}\n";
  }
}

namespace {

using json = nlohmann::json;

const json& field(const json& obj, const char* name, const std::string& where) {
  auto it = obj.find(name);
  if (it == obj.end()) throw DataError("missing field '" + where + name + "'");
  return *it;
}

template <typename Fill>
void read_array(const json& j, std::size_t expected, const std::string& where, Fill&& fill) {
  if (!j.is_array() || j.size() != expected) {
    throw DataError("field '" + where + "' must be an array of length " + std::to_string(expected));
  }
  for (std::size_t k = 0; k < expected; ++k) fill(k, j[k]);
}

EpisodeRecord parse_episode(const json& j, Quality& quality, bool& quality_seen) {
  if (!j.is_object()) throw DataError("episode must be a JSON object");
  EpisodeRecord ep;
  const json& task = field(j, "task", "");
  if (!task.is_string()) throw DataError("field 'task' must be a string");
  try {
    ep.task = TaskSpec::parse(task.get<std::string>());
  } catch (const ConfigError& e) {
    throw DataError(std::string("field 'task': ") + e.what());
  }
  const Quality q = parse_quality(field(j, "quality", "").get<std::string>());
  if (quality_seen && q != quality) throw DataError("field 'quality': mixed qualities in one dataset");
  quality = q;
  quality_seen = true;

  const json& steps = field(j, "steps", "");
  if (!steps.is_array() || steps.empty()) throw DataError("field 'steps' must be a nonempty array");
  const int t = static_cast<int>(steps.size());
  const int n = ep.task.n_allies;
  const int e = ep.task.n_entities();
  const int a = ep.task.n_actions();
  ep.states.resize(t, e * kStateFeatures);
  ep.obs.resize(t * n, e * kTokenFeatures);
  ep.actions.resize(t, n);
  ep.masks.resize(t * n, a);
  ep.rewards.resize(t);
  ep.done.resize(t);
  ep.win.resize(t);
  const bool with_skills = steps[0].contains("skills");
  if (with_skills) ep.skills.resize(t, n);

  auto number = [](const json& v, const std::string& where) {
    if (!v.is_number()) throw DataError("field '" + where + "' must be a number");
    return v.get<double>();
  };
  auto boolean = [](const json& v, const std::string& where) {
    if (!v.is_boolean()) throw DataError("field '" + where + "' must be a boolean");
    return v.get<bool>();
  };
  auto integer = [](const json& v, const std::string& where) {
    if (!v.is_number_integer()) throw DataError("field '" + where + "' must be an integer");
    return v.get<int>();
  };

  for (int s = 0; s < t; ++s) {
    const json& st = steps[s];
    const std::string at = "steps[" + std::to_string(s) + "].";
    if (!st.is_object()) throw DataError("field '" + at.substr(0, at.size() - 1) + "' must be an object");
    read_array(field(st, "state", at), static_cast<std::size_t>(e * kStateFeatures), at + "state",
               [&](std::size_t k, const json& v) { ep.states(s, k) = number(v, at + "state"); });
    read_array(field(st, "obs", at), static_cast<std::size_t>(n), at + "obs", [&](std::size_t i, const json& row) {
      const std::string w = at + "obs[" + std::to_string(i) + "]";
      read_array(row, static_cast<std::size_t>(e * kTokenFeatures), w,
                 [&](std::size_t k, const json& v) { ep.obs(s * n + i, k) = number(v, w); });
    });
    read_array(field(st, "actions", at), static_cast<std::size_t>(n), at + "actions",
               [&](std::size_t i, const json& v) { ep.actions(s, i) = integer(v, at + "actions"); });
    read_array(field(st, "masks", at), static_cast<std::size_t>(n), at + "masks", [&](std::size_t i, const json& row) {
      const std::string w = at + "masks[" + std::to_string(i) + "]";
      read_array(row, static_cast<std::size_t>(a), w,
                 [&](std::size_t k, const json& v) { ep.masks(s * n + i, k) = boolean(v, w); });
    });
    ep.rewards(s) = number(field(st, "reward", at), at + "reward");
    ep.done[s] = boolean(field(st, "done", at), at + "done");
    ep.win[s] = boolean(field(st, "win", at), at + "win");
    if (st.contains("skills") != with_skills) throw DataError("field '" + at + "skills' present on some steps only");
    if (with_skills) {
      read_array(st["skills"], static_cast<std::size_t>(n), at + "skills",
                 [&](std::size_t i, const json& v) { ep.skills(s, i) = integer(v, at + "skills"); });
    }
  }
  ep.validate();
  return ep;
}

}  // namespace

MultiTaskDataset read_dataset(std::istream& in) {
  MultiTaskDataset data;
  bool quality_seen = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    try {
      EpisodeRecord ep = parse_episode(j, data.quality, quality_seen);
      if (std::find(data.tasks.begin(), data.tasks.end(), ep.task) == data.tasks.end()) data.tasks.push_back(ep.task);
      data.episodes.push_back(std::move(ep));
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    } catch (const json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return data;
}

void save_dataset(const MultiTaskDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  write_dataset(data, out);
  if (!out) throw DataError("write failed: " + path);
}

MultiTaskDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path);
  try {
    return read_dataset(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.detail(), path);
  }
}

// ---------------------------------------------------------------------------------------------
// Online buffer and hybrid sampling

OnlineBuffer::OnlineBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("online buffer capacity must be positive");
}

void OnlineBuffer::push(EpisodeRecord episode) {
  if (!episode.has_skills()) throw ContractError("online episodes must carry executed skill labels");
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(Item{inserted_++, std::make_shared<const EpisodeRecord>(std::move(episode))});
}

void push_online(OnlineBuffer& buffer, EpisodeRecord episode) { buffer.push(std::move(episode)); }

double hybrid_ratio(std::int64_t t, double r_start, double r_end, std::int64_t n) {
  if (!(0.0 <= r_end && r_end <= r_start && r_start <= 1.0)) {
    throw ConfigError("hybrid ratio needs 0 <= R_end <= R_start <= 1");
  }
  if (n < 1) throw ConfigError("hybrid ratio decay length must be >= 1");
  if (t < 0) throw ConfigError("hybrid ratio step must be >= 0");
  return std::max(r_end, r_start - (r_start - r_end) * static_cast<double>(t) / static_cast<double>(n));
}

int offline_count(int batch_size, double ratio) {
  const double raw = std::round(ratio * batch_size);
  return static_cast<int>(std::clamp(raw, 0.0, static_cast<double>(batch_size)));
}

HybridBatch sample_hybrid(const MultiTaskDataset& dataset, const OnlineBuffer& buffer, int batch_size, double ratio,
                          Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (dataset.empty() && buffer.empty()) throw DataError("cannot sample a batch: dataset and buffer are both empty");
  HybridBatch batch;
  batch.n_offline = offline_count(batch_size, ratio);
  batch.n_online = batch_size - batch.n_offline;

  int from_dataset = batch.n_offline;
  int from_buffer = batch.n_online;
  if (static_cast<int>(buffer.size()) < from_buffer) {
    const int shortfall = dataset.empty() ? 0 : from_buffer - static_cast<int>(buffer.size());
    batch.backfilled = shortfall;
    from_buffer -= shortfall;
    from_dataset += shortfall;
  }
  if (from_dataset > 0 && dataset.empty()) throw DataError("batch needs offline episodes but the dataset is empty");

  batch.items.reserve(static_cast<std::size_t>(batch_size));
  if (from_dataset > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    for (int k = 0; k < from_dataset; ++k) {
      const std::size_t i = pick(rng);
      batch.items.push_back(BatchItem{&dataset.episodes[i], Origin::Offline, i});
    }
  }
  if (from_buffer > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
    for (int k = 0; k < from_buffer; ++k) {
      const std::size_t i = pick(rng);
      batch.items.push_back(BatchItem{&buffer.at(i), Origin::Online, buffer.id(i)});
    }
  }
  return batch;
}

}  // namespace hygen::data
