// amalgam: train, evaluate, and report on amalgamated learned optimizers.
//
// Usage:
//   amalgam train     --config exp.cfg [--seed N] [--out DIR]
//   amalgam evaluate  --config exp.cfg [--seed N] [--out DIR]
//   amalgam stability --config exp.cfg [--seed N] [--out DIR]
//   amalgam report    --config exp.cfg [--seed N] [--out DIR]
//
// All four subcommands share one flat key-value config file; --seed and
// --out override the config's seed and output.dir for this invocation only.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "amalgam/commands.hpp"
#include "amalgam/errors.hpp"
#include "amalgam/file_io.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_override;
  uint64_t seed_override = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "path to the experiment config file")
      ->required();
  cmd->add_option("--seed", args->seed_override, "override the config's master seed")
      ->each([args](const std::string&) { args->seed_set = true; });
  cmd->add_option("--out", args->out_override, "override the config's output directory");
}

amalgam::ExperimentConfig load_config(const CommonArgs& args) {
  amalgam::ExperimentConfig cfg =
      amalgam::experiment_from_text(amalgam::read_text_file(args.config_path));
  if (args.seed_set) cfg.seed = args.seed_override;
  if (!args.out_override.empty()) cfg.out_dir = args.out_override;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amalgamated learned-optimizer experiments"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, stab_args, report_args;
  CLI::App* train = app.add_subcommand("train", "tune the pool, then train one policy per replicate");
  CLI::App* evaluate = app.add_subcommand("evaluate", "roll out trained policies and write evaluation.csv");
  CLI::App* stability = app.add_subcommand("stability", "fit stability metrics from evaluation.csv");
  CLI::App* report = app.add_subcommand("report", "render loss-vs-epoch charts from evaluation.csv");
  add_common(train, &train_args);
  add_common(evaluate, &eval_args);
  add_common(stability, &stab_args);
  add_common(report, &report_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const amalgam::TrainArtifacts art = amalgam::cmd_train(load_config(train_args));
      std::printf("%s\n", art.effective_config.c_str());
      std::printf("%s\n", art.grid_file.c_str());
      for (const std::string& p : art.checkpoints) std::printf("%s\n", p.c_str());
      for (const std::string& p : art.train_logs) std::printf("%s\n", p.c_str());
      for (const std::string& p : art.summaries) std::printf("%s\n", p.c_str());
    } else if (evaluate->parsed()) {
      std::printf("%s\n", amalgam::cmd_evaluate(load_config(eval_args)).c_str());
    } else if (stability->parsed()) {
      std::printf("%s\n", amalgam::cmd_stability(load_config(stab_args)).c_str());
    } else if (report->parsed()) {
      std::printf("%s\n", amalgam::cmd_report(load_config(report_args)).c_str());
    }
  } catch (const amalgam::Error& e) {
    std::fprintf(stderr, "amalgam: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "amalgam: %s\n", e.what());
    return 1;
  }
  return 0;
}
