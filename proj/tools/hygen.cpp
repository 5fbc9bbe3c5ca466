#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "hygen/harness/harness.hpp"

namespace h = hygen::harness;

namespace {

h::ExperimentConfig resolve_config(const std::string& path) {
  h::ExperimentConfig cfg = path.empty() ? h::ExperimentConfig{} : h::load_config(path);
  h::apply_seed_override(cfg, std::getenv("HYGEN_SEED"));
  cfg.validate();
  return cfg;
}

void log_line(const std::string& line) { std::cerr << line << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage hybrid multi-task MARL on a grid combat arena"};
  app.require_subcommand(1);
  std::string config_path, out_dir, mode, params, which;

  auto* gen = app.add_subcommand("gen-data", "Generate offline datasets for the source tasks");
  gen->add_option("--config", config_path, "Experiment config (JSON)");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train skills and the high-level policy for every seed");
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--mode", mode, "One of: " + hygen::policy::variant_modes())->default_val("hygen");
  train->add_option("--out", out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Greedy evaluation on source and unseen tasks");
  eval->add_option("--params", params, "Train output directory or parameter file")->required();
  eval->add_option("--config", config_path, "Experiment config (JSON)");
  eval->add_option("--out", out_dir, "Output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid over the seed list");
  ablate->add_option("--config", config_path, "Experiment config (JSON)");
  ablate->add_option("--which", which, "ratio, refine, cql or skills")->required();
  ablate->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const h::ExperimentConfig cfg = resolve_config(config_path);
    if (*gen) {
      h::gen_data(cfg, out_dir, log_line);
    } else if (*train) {
      const auto out = h::train(cfg, mode, out_dir, log_line);
      std::cerr << "trained " << out.runs.size() << " seed(s) in " << out.wall_seconds << " s\n";
    } else if (*eval) {
      const auto report = h::cmd_eval(params, cfg, out_dir);
      for (const auto& t : report.tasks) {
        std::cout << t.task << (t.unseen ? " (unseen)" : " (source)") << ": win rate " << t.win_mean << " +- "
                  << t.win_std << '\n';
      }
    } else if (*ablate) {
      h::ablate(cfg, which, out_dir, log_line);
    }
  } catch (const hygen::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const hygen::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
