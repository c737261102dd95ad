#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rgrpo/cli.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string seed;
  std::string out;
  std::string judge;
  std::string profile;
  std::vector<std::string> sets;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "config file (key = value lines)");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--judge", f.judge, "judge backend")->check(CLI::IsMember({"oracle", "remote"}));
  cmd->add_option("--profile", f.profile, "default profile")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--set", f.sets, "override a config key (key=value), repeatable");
  cmd->add_flag("-v,--verbose", f.verbose, "info-level logging");
}

rgrpo::RunConfig resolve(const CommonFlags& f) {
  rgrpo::ConfigMap cli;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw rgrpo::ConfigError("--set expects key=value, got '" + s + "'");
    cli[rgrpo::trim(s.substr(0, eq))] = rgrpo::trim(s.substr(eq + 1));
  }
  if (!f.profile.empty()) cli["profile"] = f.profile;
  if (!f.seed.empty()) cli["seed"] = f.seed;
  if (!f.out.empty()) cli["out"] = f.out;
  if (!f.judge.empty()) cli["judge"] = f.judge;
  if (f.verbose) rgrpo::set_log_level(rgrpo::LogLevel::Info);
  return rgrpo::RunConfig(rgrpo::resolve_config(f.config, cli));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rubric-grounded GRPO: data generation, training, evaluation"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto* datagen = app.add_subcommand("datagen", "build (question, rubric) tuples from a corpus");
  auto* train = app.add_subcommand("train", "train the policy");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  auto* report = app.add_subcommand("report", "summarize a metrics CSV");
  for (auto* c : {datagen, train, eval}) add_common(c, flags);

  std::string checkpoint;
  std::string split = "validation";
  eval->add_option("--checkpoint", checkpoint, "checkpoint JSON, or 'init' for the initial policy")->required();
  eval->add_option("--split", split, "train, validation or test")
      ->check(CLI::IsMember({"train", "validation", "test"}));

  std::string metrics;
  std::string report_out = "report";
  int window = 10;
  report->add_option("--metrics", metrics, "metrics.csv written by train")->required();
  report->add_option("--out", report_out, "output directory");
  report->add_option("--window", window, "smoothing window in steps")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? rgrpo::kExitOk : rgrpo::kExitConfig;
  }

  return rgrpo::run_command([&] {
    if (datagen->parsed()) {
      rgrpo::cmd_datagen(resolve(flags));
    } else if (train->parsed()) {
      rgrpo::cmd_train(resolve(flags));
    } else if (eval->parsed()) {
      rgrpo::cmd_eval(resolve(flags), checkpoint == "init" ? "" : checkpoint, split);
    } else {
      rgrpo::cmd_report(metrics, report_out, window);
    }
  });
}
