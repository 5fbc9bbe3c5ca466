#include "hygen/harness/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "hygen/numcore/format.hpp"
#include "hygen/numcore/rng.hpp"

namespace hygen::harness {

using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------------------------
// Config fields. One table drives serialization, parsing and the unknown-key check.

struct Field {
  const char* key;
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

[[noreturn]] void bad_type(const char* key, const char* expected) {
  throw ConfigError(std::string("config key '") + key + "' must be " + expected);
}

template <typename T>
Field int_field(const char* key, T ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return json(c.*member); },
          [key, member](ExperimentConfig& c, const json& v) {
            if (!v.is_number_integer()) bad_type(key, "an integer");
            const auto x = v.get<std::int64_t>();
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) bad_type(key, "an int");
            c.*member = static_cast<T>(x);
          }};
}

Field double_field(const char* key, double ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return json(c.*member); },
          [key, member](ExperimentConfig& c, const json& v) {
            if (!v.is_number()) bad_type(key, "a number");
            c.*member = v.get<double>();
          }};
}

Field task_list_field(const char* key, std::vector<std::string> ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return json(c.*member); },
          [key, member](ExperimentConfig& c, const json& v) {
            if (!v.is_array()) bad_type(key, "an array of task names");
            std::vector<std::string> out;
            for (const auto& e : v) {
              if (!e.is_string()) bad_type(key, "an array of task names");
              out.push_back(e.get<std::string>());
            }
            c.*member = std::move(out);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(task_list_field("source_tasks", &ExperimentConfig::source_tasks));
    f.push_back(task_list_field("unseen_tasks", &ExperimentConfig::unseen_tasks));
    f.push_back({"quality", [](const ExperimentConfig& c) { return json(data::to_string(c.quality)); },
                 [](ExperimentConfig& c, const json& v) {
                   if (!v.is_string()) bad_type("quality", "\"expert\" or \"medium\"");
                   c.quality = data::parse_quality(v.get<std::string>());
                 }});
    f.push_back(int_field("hidden", &ExperimentConfig::hidden));
    f.push_back(int_field("embedding", &ExperimentConfig::embedding));
    f.push_back(double_field("alpha", &ExperimentConfig::alpha));
    f.push_back(double_field("beta", &ExperimentConfig::beta));
    f.push_back(double_field("eta", &ExperimentConfig::eta));
    f.push_back(int_field("n_skills", &ExperimentConfig::n_skills));
    f.push_back(int_field("n_heads", &ExperimentConfig::n_heads));
    f.push_back(int_field("stage1_steps", &ExperimentConfig::stage1_steps));
    f.push_back(int_field("stage2_steps", &ExperimentConfig::stage2_steps));
    f.push_back(double_field("r_start", &ExperimentConfig::r_start));
    f.push_back(double_field("r_end", &ExperimentConfig::r_end));
    f.push_back(int_field("decay_steps", &ExperimentConfig::decay_steps));
    f.push_back(int_field("eps_steps", &ExperimentConfig::eps_steps));
    f.push_back(int_field("target_every", &ExperimentConfig::target_every));
    f.push_back(int_field("batch", &ExperimentConfig::batch));
    f.push_back(double_field("lr", &ExperimentConfig::lr));
    f.push_back({"seeds", [](const ExperimentConfig& c) { return json(c.seeds); },
                 [](ExperimentConfig& c, const json& v) {
                   if (!v.is_array()) bad_type("seeds", "an array of non-negative integers");
                   std::vector<std::uint64_t> out;
                   for (const auto& e : v) {
                     if (!e.is_number_unsigned()) bad_type("seeds", "an array of non-negative integers");
                     out.push_back(e.get<std::uint64_t>());
                   }
                   c.seeds = std::move(out);
                 }});
    f.push_back(int_field("episodes_per_task", &ExperimentConfig::episodes_per_task));
    f.push_back(int_field("eval_episodes", &ExperimentConfig::eval_episodes));
    f.push_back(int_field("eval_every", &ExperimentConfig::eval_every));
    f.push_back(int_field("log_every", &ExperimentConfig::log_every));
    f.push_back(int_field("threads", &ExperimentConfig::threads));
    f.push_back({"data_dir", [](const ExperimentConfig& c) { return json(c.data_dir); },
                 [](ExperimentConfig& c, const json& v) {
                   if (!v.is_string()) bad_type("data_dir", "a string");
                   c.data_dir = v.get<std::string>();
                 }});
    return f;
  }();
  return table;
}

json config_object(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(cfg);
  return j;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string hash_line(const std::string& hash) { return "# config_hash=" + hash + "\n"; }

const char* actor_name(policy::Actor a) {
  switch (a) {
    case policy::Actor::Refined: return "refined";
    case policy::Actor::Frozen: return "frozen";
    case policy::Actor::Cloned: return "cloned";
  }
  return "refined";
}

policy::Actor parse_actor(const std::string& s) {
  if (s == "refined") return policy::Actor::Refined;
  if (s == "frozen") return policy::Actor::Frozen;
  if (s == "cloned") return policy::Actor::Cloned;
  throw DataError("manifest: unknown actor '" + s + "'");
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

/// Directory-safe form of a mode string.
std::string slug(std::string s) {
  std::replace(s.begin(), s.end(), ':', '_');
  return s;
}

void write_run_files(const SeedRun& run, const std::string& hash, const fs::path& dir) {
  make_dir(dir);
  save_params(run.params, (dir / "params.txt").string());
  std::ostringstream metrics;
  metrics << hash_line(hash);
  policy::write_metrics(run.metrics, metrics);
  write_file(dir / "metrics.csv", metrics.str());
  if (!run.stage1_log.empty()) {
    std::ostringstream s1;
    s1 << hash_line(hash);
    skills::write_skill_log(run.stage1_log, s1);
    write_file(dir / "stage1.csv", s1.str());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Parameter template a trained model must match, by name and shape.
ParamBundle shape_template(const ExperimentConfig& cfg, policy::Actor actor) {
  const skills::NetConfig net = net_config(cfg);
  Rng rng(0);
  if (actor == policy::Actor::Cloned) return policy::init_bc(net, rng);
  ParamBundle stage1;
  skills::init_skill_model(stage1, net, rng);
  return policy::init_policy(stage1, net, policy_train_config(cfg, 0).mixer_embed, rng);
}

void check_shapes(const ParamBundle& params, const ParamBundle& expected, const std::string& source) {
  for (const auto& name : expected.names()) {
    if (!params.contains(name)) throw ConfigError(source + ": missing parameter '" + name + "' for this config");
    const Matrix& a = params.at(name);
    const Matrix& b = expected.at(name);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw ConfigError(source + ": parameter '" + name + "' is " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + ", config expects " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Config

void ExperimentConfig::validate(bool skill_sweep) const {
  if (source_tasks.empty()) throw ConfigError("at least one source task is required");
  for (const auto* list : {&source_tasks, &unseen_tasks}) {
    for (const auto& name : *list) arena::TaskSpec::parse(name);
  }
  auto positive = [](int v, const char* key) {
    if (v < 1) throw ConfigError(std::string(key) + " must be positive");
  };
  positive(hidden, "hidden");
  positive(embedding, "embedding");
  positive(n_skills, "n_skills");
  positive(n_heads, "n_heads");
  positive(batch, "batch");
  positive(decay_steps, "decay_steps");
  positive(eps_steps, "eps_steps");
  positive(target_every, "target_every");
  positive(episodes_per_task, "episodes_per_task");
  positive(eval_episodes, "eval_episodes");
  positive(eval_every, "eval_every");
  positive(log_every, "log_every");
  positive(threads, "threads");
  if (stage1_steps < 0 || stage2_steps < 0) throw ConfigError("stage step counts must be non-negative");
  if (embedding % n_heads != 0) throw ConfigError("embedding must be divisible by n_heads");
  if (!skill_sweep && n_skills != n_heads) {
    throw ConfigError("n_skills must equal n_heads (only the skills sweep varies them independently)");
  }
  if (!(r_start >= 0 && r_start <= 1 && r_end >= 0 && r_end <= 1)) throw ConfigError("R_start and R_end must lie in [0, 1]");
  if (r_end > r_start) throw ConfigError("R_end must not exceed R_start");
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta >= 0) || !(alpha >= 0) || !(eta >= 0)) throw ConfigError("alpha, beta and eta must be non-negative");
  if (seeds.empty()) throw ConfigError("the seed list is empty");
  if (data_dir.empty()) throw ConfigError("data_dir is empty");
}

std::string to_json(const ExperimentConfig& cfg) { return config_object(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  for (const auto& [key, value] : j.items()) {
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second->set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_json(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed_override(ExperimentConfig& cfg, const char* env_value) {
  if (env_value == nullptr || *env_value == '\0') return;
  const std::string text(env_value);
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text + ",");
  std::string item;
  for (std::size_t pos = 0; pos < text.size() + 1; pos += item.size() + 1) {
    std::getline(ss, item, ',');
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (item.empty() || item[0] == '-') throw std::invalid_argument("negative");
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) {
      throw ConfigError("HYGEN_SEED must be a comma-separated list of non-negative integers, got '" +
                        std::string(env_value) + "'");
    }
    seeds.push_back(v);
  }
  cfg.seeds = std::move(seeds);
}

std::string content_hash(const std::string& bytes) {
  const std::string blob = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 computation failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string config_hash(const ExperimentConfig& cfg) { return content_hash(to_json(cfg)); }

std::vector<arena::TaskSpec> source_specs(const ExperimentConfig& cfg) {
  std::vector<arena::TaskSpec> out;
  for (const auto& name : cfg.source_tasks) out.push_back(arena::TaskSpec::parse(name));
  return out;
}

std::vector<arena::TaskSpec> unseen_specs(const ExperimentConfig& cfg) {
  std::vector<arena::TaskSpec> out;
  for (const auto& name : cfg.unseen_tasks) out.push_back(arena::TaskSpec::parse(name));
  return out;
}

skills::NetConfig net_config(const ExperimentConfig& cfg) {
  skills::NetConfig net;
  net.n_skills = cfg.n_skills;
  net.n_heads = cfg.n_heads;
  net.embed = cfg.embedding;
  net.hidden = cfg.hidden;
  int enemies = 1;
  for (const auto& t : source_specs(cfg)) enemies = std::max(enemies, t.n_enemies);
  for (const auto& t : unseen_specs(cfg)) enemies = std::max(enemies, t.n_enemies);
  net.max_enemies = enemies;
  net.validate();
  return net;
}

skills::SkillTrainConfig skill_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  skills::SkillTrainConfig tc;
  tc.steps = cfg.stage1_steps;
  tc.batch = cfg.batch;
  tc.beta = cfg.beta;
  tc.adam.lr = cfg.lr;
  tc.log_every = cfg.log_every;
  tc.seed = seed;
  return tc;
}

policy::PolicyTrainConfig policy_train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  policy::PolicyTrainConfig pc;
  pc.steps = cfg.stage2_steps;
  pc.batch = cfg.batch;
  pc.alpha = cfg.alpha;
  pc.eta = cfg.eta;
  pc.r_start = cfg.r_start;
  pc.r_end = cfg.r_end;
  pc.decay_steps = cfg.decay_steps;
  pc.eps_steps = cfg.eps_steps;
  pc.target_every = cfg.target_every;
  pc.eval_every = cfg.eval_every;
  pc.eval_episodes = cfg.eval_episodes;
  pc.log_every = cfg.log_every;
  pc.adam.lr = cfg.lr;
  pc.eval_threads = cfg.threads;
  pc.seed = seed;
  return pc;
}

// ---------------------------------------------------------------------------------------------
// gen-data

std::vector<TaskData> gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, const Logger& log) {
  cfg.validate();
  make_dir(out_dir);
  constexpr int kCalibrationEpisodes = 1000;
  constexpr double kSweepStep = 0.05;
  const std::uint64_t seed = cfg.seeds.front();
  std::vector<TaskData> out;
  json tasks = json::array();
  const auto specs = source_specs(cfg);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& task = specs[k];
    const std::uint64_t calib_seed = mix_seed(seed, 0xCA1B0000ULL + k);
    TaskData td;
    td.expert_win_rate = arena::evaluate_controller(task, kExpertStrength, kCalibrationEpisodes, calib_seed).win_rate;
    double strength = kExpertStrength;
    if (cfg.quality == data::Quality::Medium) {
      const auto sweep = arena::sweep_strength(task, kSweepStep, kCalibrationEpisodes, calib_seed);
      try {
        strength = arena::pick_strength(sweep, 0.4 * td.expert_win_rate, 0.6 * td.expert_win_rate).strength;
      } catch (const DataError& e) {
        throw DataError("medium calibration for " + task.name() + ": " + e.what());
      }
    }
    const auto ds = data::generate_dataset(task, strength, cfg.quality, cfg.episodes_per_task,
                                           mix_seed(seed, 0xDA7A0000ULL + k), &td.summary);
    td.file = out_dir / (task.name() + ".ndjson");
    data::save_dataset(ds, td.file.string());
    if (log) {
      std::ostringstream line;
      line << task.name() << ": " << cfg.episodes_per_task << " episodes at p=" << strength << ", win rate "
           << td.summary.win_rate << " (expert " << td.expert_win_rate << ")";
      log(line.str());
    }
    tasks.push_back({{"task", task.name()},
                     {"quality", data::to_string(cfg.quality)},
                     {"strength", strength},
                     {"episodes", td.summary.episodes},
                     {"win_rate", td.summary.win_rate},
                     {"mean_return", td.summary.mean_return},
                     {"expert_win_rate", td.expert_win_rate},
                     {"file", td.file.filename().string()}});
    out.push_back(std::move(td));
  }
  json summary = {{"config_hash", config_hash(cfg)}, {"tasks", tasks}};
  write_file(out_dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

data::MultiTaskDataset load_source_data(const ExperimentConfig& cfg, const fs::path& dir) {
  data::MultiTaskDataset all;
  all.quality = cfg.quality;
  for (const auto& task : source_specs(cfg)) {
    const fs::path file = dir / (task.name() + ".ndjson");
    if (!fs::exists(file)) throw DataError("missing dataset " + file.string() + " (run gen-data first)");
    data::MultiTaskDataset part = data::load_dataset(file.string());
    if (part.empty()) throw DataError("dataset " + file.string() + " is empty");
    if (part.quality != cfg.quality) {
      throw DataError("dataset " + file.string() + " holds " + data::to_string(part.quality) +
                      " data, config asks for " + data::to_string(cfg.quality));
    }
    for (const auto& ep : part.episodes) {
      if (ep.task.name() != task.name()) {
        throw DataError("dataset " + file.string() + " contains an episode of task " + ep.task.name());
      }
    }
    part.tasks = {task};
    all.append(std::move(part));
  }
  return all;
}

// ---------------------------------------------------------------------------------------------
// train

ParamBundle run_stage1(const ExperimentConfig& cfg, const data::MultiTaskDataset& dataset, std::uint64_t seed,
                       std::vector<skills::SkillLogRow>* stage1_log, const Logger& log) {
  const skills::NetConfig net = net_config(cfg);
  return skills::train_skills(dataset, net, skill_train_config(cfg, seed), stage1_log,
                              [&](const skills::SkillLogRow& row) {
                                if (!log) return;
                                std::ostringstream line;
                                line << "stage1 seed " << seed << " step " << row.step << " loss " << row.loss
                                     << " kl " << row.kl;
                                log(line.str());
                              });
}

SeedRun run_stage2(const ExperimentConfig& cfg, const data::MultiTaskDataset& dataset, const ParamBundle& stage1,
                   std::uint64_t seed, const policy::Variant& variant, const Logger& log) {
  const skills::NetConfig net = net_config(cfg);
  auto on_row = [&](const policy::MetricsRow& row) {
    if (!log) return;
    std::ostringstream line;
    line << variant.name << " seed " << seed << " step " << row.step;
    if (row.is_eval) {
      line << " eval " << row.eval_task << " win " << row.eval_win_rate;
    } else {
      line << " R_h " << row.ratio << " loss " << row.total << " td " << row.td << " c " << row.consistency
           << " cql " << row.cql;
    }
    log(line.str());
  };
  policy::PolicyResult res =
      policy::train_policy(dataset, stage1, source_specs(cfg), net, policy_train_config(cfg, seed), variant, on_row);
  SeedRun run;
  run.seed = seed;
  run.params = std::move(res.params);
  run.actor = res.actor;
  run.metrics = std::move(res.metrics);
  return run;
}

TrainOutput train(const ExperimentConfig& cfg, const std::string& mode, const fs::path& out_dir, const Logger& log) {
  cfg.validate();
  const policy::Variant variant = policy::parse_variant(mode);
  const auto t0 = std::chrono::steady_clock::now();
  const data::MultiTaskDataset dataset = load_source_data(cfg, cfg.data_dir);
  const std::string hash = config_hash(cfg);
  make_dir(out_dir);

  TrainOutput out;
  out.mode = mode;
  json runs = json::array();
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<skills::SkillLogRow> stage1_log;
    const ParamBundle stage1 = variant.bc ? ParamBundle{} : run_stage1(cfg, dataset, seed, &stage1_log, log);
    SeedRun run = run_stage2(cfg, dataset, stage1, seed, variant, log);
    run.stage1_log = std::move(stage1_log);
    write_run_files(run, hash, out_dir / seed_dir(seed));
    runs.push_back({{"seed", seed}, {"params", seed_dir(seed) + "/params.txt"}});
    out.runs.push_back(std::move(run));
  }
  out.wall_seconds = seconds_since(t0);
  const policy::Actor actor = out.runs.front().actor;
  json manifest = {{"mode", mode},
                   {"actor", actor_name(actor)},
                   {"config_hash", hash},
                   {"config", config_object(cfg)},
                   {"runs", runs},
                   {"wall_seconds", out.wall_seconds}};
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------------------------
// eval

std::uint64_t eval_seed(std::uint64_t seed) { return mix_seed(seed, 0xE7A1ULL); }

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("mean_std of an empty list");
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

TrainedModel load_model(const fs::path& path, const ExperimentConfig& cfg) {
  if (!fs::exists(path)) throw DataError("missing params " + path.string());
  TrainedModel model;
  std::string hashed = to_json(cfg);
  if (fs::is_directory(path)) {
    const fs::path manifest_path = path / "manifest.json";
    if (!fs::exists(manifest_path)) throw DataError("missing " + manifest_path.string());
    const std::string text = read_file(manifest_path);
    json manifest;
    try {
      manifest = json::parse(text);
      model.actor = parse_actor(manifest.at("actor").get<std::string>());
      for (const auto& run : manifest.at("runs")) {
        const fs::path file = path / run.at("params").get<std::string>();
        if (!fs::exists(file)) throw DataError("missing params " + file.string());
        model.seeds.push_back(run.at("seed").get<std::uint64_t>());
        model.params.push_back(load_params(file.string()));
        hashed += read_file(file);
      }
    } catch (const json::exception& e) {
      throw DataError(manifest_path.string() + ": " + e.what());
    }
    if (model.params.empty()) throw DataError(manifest_path.string() + " lists no runs");
  } else {
    ParamBundle p = load_params(path.string());
    hashed += read_file(path);
    model.actor = p.contains("bc.head.u.wz") ? policy::Actor::Cloned : policy::Actor::Refined;
    model.seeds = cfg.seeds;
    model.params.assign(cfg.seeds.size(), p);
  }
  const ParamBundle expected = shape_template(cfg, model.actor);
  for (const auto& p : model.params) check_shapes(p, expected, path.string());
  model.input_hash = content_hash(hashed);
  return model;
}

RunReport evaluate(const TrainedModel& model, const ExperimentConfig& cfg) {
  if (model.params.size() != model.seeds.size() || model.params.empty()) {
    throw ContractError("a trained model needs one parameter set per seed");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const skills::NetConfig net = net_config(cfg);
  RunReport report;
  report.config = cfg;
  report.input_hash = model.input_hash;
  std::vector<std::pair<arena::TaskSpec, bool>> tasks;
  for (const auto& t : source_specs(cfg)) tasks.emplace_back(t, false);
  for (const auto& t : unseen_specs(cfg)) tasks.emplace_back(t, true);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    TaskScore score;
    score.task = tasks[k].first.name();
    score.unseen = tasks[k].second;
    for (std::size_t s = 0; s < model.seeds.size(); ++s) {
      const policy::EvalResult r =
          policy::zero_shot_eval(model.params[s], net, tasks[k].first, cfg.eval_episodes,
                                 mix_seed(eval_seed(model.seeds[s]), k), model.actor, cfg.threads);
      score.win_rates.push_back(r.win_rate);
      score.returns.push_back(r.mean_return);
    }
    std::tie(score.win_mean, score.win_std) = mean_std(score.win_rates);
    score.return_mean = mean_std(score.returns).first;
    report.tasks.push_back(std::move(score));
  }
  report.wall_seconds = seconds_since(t0);
  return report;
}

RunReport cmd_eval(const fs::path& params, const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const TrainedModel model = load_model(params, cfg);
  RunReport report = evaluate(model, cfg);
  make_dir(out_dir);
  const std::string hash = config_hash(cfg);

  json tasks = json::array();
  std::ostringstream csv;
  csv << hash_line(hash) << "task,split,win_rate_mean,win_rate_std,return_mean,n_seeds\n";
  for (const auto& t : report.tasks) {
    json per_seed = json::array();
    for (std::size_t s = 0; s < t.win_rates.size(); ++s) {
      per_seed.push_back({{"seed", model.seeds[s]}, {"win_rate", t.win_rates[s]}, {"mean_return", t.returns[s]}});
    }
    const char* split = t.unseen ? "unseen" : "source";
    tasks.push_back({{"task", t.task},
                     {"split", split},
                     {"win_rate_mean", t.win_mean},
                     {"win_rate_std", t.win_std},
                     {"return_mean", t.return_mean},
                     {"per_seed", per_seed}});
    csv << t.task << ',' << split << ',' << format_double(t.win_mean) << ',' << format_double(t.win_std) << ','
        << format_double(t.return_mean) << ',' << t.win_rates.size() << '\n';
  }
  json doc = {{"config_hash", hash},
              {"input_hash", report.input_hash},
              {"wall_seconds", report.wall_seconds},
              {"config", config_object(cfg)},
              {"tasks", tasks}};
  write_file(out_dir / "report.json", doc.dump(2) + "\n");
  write_file(out_dir / "report.csv", csv.str());
  return report;
}

// ---------------------------------------------------------------------------------------------
// ablate

std::vector<AblationRow> ablation_grid(const std::string& which) {
  auto row = [](std::string variant, bool is_default, int n_skills = 4) {
    AblationRow r;
    r.variant = std::move(variant);
    r.is_default = is_default;
    r.n_skills = n_skills;
    return r;
  };
  if (which == "ratio") {
    return {row("hygen", true), row("fixed_ratio:0.2", false), row("fixed_ratio:0.5", false),
            row("fixed_ratio:0.8", false)};
  }
  if (which == "refine") return {row("hygen", true), row("no_refine", false)};
  if (which == "cql") return {row("cql:dynamic", true), row("cql:fixed", false), row("cql:none", false)};
  if (which == "skills") {
    std::vector<AblationRow> rows;
    for (int z : {1, 2, 3, 4, 5, 6, 8}) rows.push_back(row("hygen", z == 4, z));
    return rows;
  }
  throw ConfigError("unknown ablation '" + which + "'; expected one of ratio, refine, cql, skills");
}

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::string& which, const fs::path& out_dir,
                                const Logger& log) {
  cfg.validate();
  std::vector<AblationRow> rows = ablation_grid(which);
  const bool sweep = which == "skills";
  const data::MultiTaskDataset dataset = load_source_data(cfg, cfg.data_dir);
  const std::string hash = config_hash(cfg);
  make_dir(out_dir);

  const std::size_t n_source = cfg.source_tasks.size();
  for (std::uint64_t seed : cfg.seeds) {
    ParamBundle shared_stage1;
    if (!sweep) shared_stage1 = run_stage1(cfg, dataset, seed, nullptr, log);
    for (auto& row : rows) {
      ExperimentConfig run_cfg = cfg;
      run_cfg.n_skills = row.n_skills;
      run_cfg.validate(sweep);
      const ParamBundle stage1 = sweep ? run_stage1(run_cfg, dataset, seed, nullptr, log) : shared_stage1;
      const SeedRun run = run_stage2(run_cfg, dataset, stage1, seed, policy::parse_variant(row.variant), log);
      const std::string name = sweep ? "skills_" + std::to_string(row.n_skills) : slug(row.variant);
      write_run_files(run, hash, out_dir / name / seed_dir(seed));

      TrainedModel model;
      model.seeds = {seed};
      model.params = {run.params};
      model.actor = run.actor;
      const RunReport report = evaluate(model, run_cfg);
      double source = 0, unseen = 0;
      for (std::size_t k = 0; k < report.tasks.size(); ++k) {
        (k < n_source ? source : unseen) += report.tasks[k].win_rates.front();
      }
      row.source.push_back(source / static_cast<double>(n_source));
      if (report.tasks.size() > n_source) {
        row.unseen.push_back(unseen / static_cast<double>(report.tasks.size() - n_source));
      }
      if (log) {
        std::ostringstream line;
        line << "ablate " << which << ' ' << name << " seed " << seed << ": source " << row.source.back();
        if (!row.unseen.empty()) line << ", unseen " << row.unseen.back();
        log(line.str());
      }
    }
  }
  std::ostringstream csv;
  write_ablation_csv(rows, which, hash, csv);
  write_file(out_dir / ("ablation_" + which + ".csv"), csv.str());
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& which, const std::string& hash,
                        std::ostream& out) {
  out << hash_line(hash) << "which,variant,n_skills,default,n_seeds,source_mean,source_std,unseen_mean,unseen_std\n";
  for (const auto& r : rows) {
    const auto [sm, ss] = mean_std(r.source);
    out << which << ',' << r.variant << ',' << r.n_skills << ',' << (r.is_default ? 1 : 0) << ',' << r.source.size()
        << ',' << format_double(sm) << ',' << format_double(ss) << ',';
    if (r.unseen.empty()) {
      out << ",\n";
    } else {
      const auto [um, us] = mean_std(r.unseen);
      out << format_double(um) << ',' << format_double(us) << '\n';
    }
  }
}

}  // namespace hygen::harness
