#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"

using namespace rgrpo;
using namespace testing_support;

namespace {

RunConfig config_for(const fs::path& out, ConfigMap extra = {}) {
  extra["out"] = out.string();
  return RunConfig(resolve_config("", extra));
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RGRPO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, PrecedenceDefaultsFileCli) {
  TempDir dir("cfg");
  std::ofstream(dir / "run.cfg") << "# comment\ntrain.kl_coef = 0.5\ntrain.group_size = 4  # inline\n";
  const auto m = resolve_config((dir / "run.cfg").string(), {{"train.group_size", "6"}});
  EXPECT_EQ(m.at("train.kl_coef"), "0.5");
  EXPECT_EQ(m.at("train.group_size"), "6");
  EXPECT_EQ(m.at("train.batch_prompts"), "8");
  const RunConfig rc(m);
  EXPECT_EQ(rc.train().group_size, 6);
  EXPECT_DOUBLE_EQ(rc.train().kl_coef, 0.5);
}

TEST(Config, PaperProfileHyperparameters) {
  const RunConfig rc(resolve_config("", {{"profile", "paper"}}));
  const auto t = rc.train();
  EXPECT_EQ(t.batch_prompts, 64);
  EXPECT_EQ(t.group_size, 32);
  EXPECT_DOUBLE_EQ(t.learning_rate, 3e-7);
  EXPECT_DOUBLE_EQ(t.weight_decay, 0.01);
  EXPECT_DOUBLE_EQ(t.clip_eps, 0.2);
  EXPECT_DOUBLE_EQ(t.kl_coef, 0.01);
  EXPECT_DOUBLE_EQ(t.max_grad_norm, 1.0);
  EXPECT_EQ(t.warmup_steps, 13);
  EXPECT_EQ(t.epochs, 1);
  const auto j = rc.judge();
  EXPECT_DOUBLE_EQ(j.temperature, 0.1);
  EXPECT_EQ(j.max_response_tokens, 16000);
  EXPECT_EQ(j.max_passage_chars, 50000u);
  EXPECT_EQ(j.workers, 32);
}

TEST(Config, ErrorsAreConfigErrors) {
  EXPECT_THROW(resolve_config("", {{"train.bogus", "1"}}), ConfigError);
  EXPECT_THROW(resolve_config("/nonexistent/run.cfg", {}), ConfigError);
  EXPECT_THROW(RunConfig(resolve_config("", {{"train.group_size", "1"}})), ConfigError);
  EXPECT_THROW(RunConfig(resolve_config("", {{"train.clip_eps", "abc"}})), ConfigError);
  EXPECT_THROW(RunConfig(resolve_config("", {{"judge", "magic"}})), ConfigError);
  EXPECT_THROW(parse_config_text("no equals sign", "t"), ConfigError);
}

TEST(CmdDatagen, SplitsStatsAndNoOpRerun) {
  TempDir dir("cli_dg");
  write_corpus(dir / "corpus", 20);
  const auto cfg = config_for(dir / "out", {{"data.corpus", (dir / "corpus").string()}});
  std::ostringstream log;
  ProbeGenerator gen;
  const auto first = cmd_datagen(cfg, &gen, log);
  EXPECT_EQ(first.train + first.validation + first.test, 60u);
  EXPECT_EQ(first.train, 42u);  // 14 of 20 documents, three tuples each
  for (const char* f : {"train.jsonl", "validation.jsonl", "test.jsonl", "stats.json", "resolved_config.cfg"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  const auto train_file = slurp(dir / "out" / "train.jsonl");
  const auto calls = gen.calls();
  const auto second = cmd_datagen(cfg, &gen, log);
  EXPECT_EQ(gen.calls(), calls);
  EXPECT_EQ(second.run.processed, 0u);
  EXPECT_EQ(slurp(dir / "out" / "train.jsonl"), train_file);
}

TEST(CmdDatagen, BadCorpusIsConfigError) {
  TempDir dir("cli_dg_bad");
  EXPECT_THROW(cmd_datagen(config_for(dir / "out", {{"data.corpus", (dir / "nope").string()}})), ConfigError);
  EXPECT_THROW(cmd_datagen(config_for(dir / "out")), ConfigError);
}

TEST(CmdTrain, DeterministicMetricsAndCheckpoints) {
  TempDir dir("cli_train");
  const ConfigMap extra{{"train.max_steps", "30"}, {"env.train_tasks", "64"}, {"env.heldout_tasks", "16"}};
  std::ostringstream log;
  cmd_train(config_for(dir / "a", extra), log);
  cmd_train(config_for(dir / "b", extra), log);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoint_best.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoint_last.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "resolved_config.cfg"));
  EXPECT_NE(log.str().find("step 30/30"), std::string::npos);
  EXPECT_EQ(read_metrics_csv(dir / "a" / "metrics.csv").size(), 30u);
}

TEST(CmdTrain, ResumeContinuesStepCount) {
  TempDir dir("cli_resume");
  const ConfigMap base{{"env.train_tasks", "64"}, {"env.heldout_tasks", "16"}, {"checkpoint_every", "10"}};
  std::ostringstream log;
  auto full = base;
  full["train.max_steps"] = "30";
  cmd_train(config_for(dir / "full", full), log);

  auto part = base;
  part["train.max_steps"] = "20";
  cmd_train(config_for(dir / "part", part), log);
  auto resume = full;
  resume["resume"] = (dir / "part" / "checkpoint_last.json").string();
  const auto res = cmd_train(config_for(dir / "part", resume), log);
  ASSERT_EQ(res.history.size(), 10u);
  EXPECT_EQ(res.history.front().step, 21);
  EXPECT_EQ(slurp(dir / "part" / "metrics.csv"), slurp(dir / "full" / "metrics.csv"));
  EXPECT_EQ(load_checkpoint(dir / "part" / "checkpoint_last.json").policy,
            load_checkpoint(dir / "full" / "checkpoint_last.json").policy);
}

TEST(CmdEval, ReportsAndImprovesAfterTraining) {
  TempDir dir("cli_eval");
  const ConfigMap extra{{"train.max_steps", "60"}, {"env.train_tasks", "64"}, {"env.heldout_tasks", "32"}};
  std::ostringstream log;
  const auto cfg = config_for(dir / "run", extra);
  cmd_train(cfg, log);
  const auto init1 = cmd_eval(cfg, "", "validation", log);
  const auto j1 = slurp(dir / "run" / "eval_validation.json");
  const auto init2 = cmd_eval(cfg, "", "validation", log);
  EXPECT_EQ(slurp(dir / "run" / "eval_validation.json"), j1);
  EXPECT_EQ(init1.mean_reward, init2.mean_reward);
  const auto trained = cmd_eval(cfg, (dir / "run" / "checkpoint_best.json").string(), "validation", log);
  EXPECT_GT(trained.mean_reward, init1.mean_reward);
  const auto j = nlohmann::json::parse(slurp(dir / "run" / "eval_validation.json"));
  EXPECT_TRUE(j.contains("per_criterion"));
  EXPECT_TRUE(j.contains("zero_reward_fraction"));
}

TEST(CmdEval, EmptySplitIsError) {
  TempDir dir("cli_eval_empty");
  write_corpus(dir / "corpus", 2);
  const auto dg = config_for(dir / "data", {{"data.corpus", (dir / "corpus").string()}});
  std::ostringstream log;
  ProbeGenerator gen;
  cmd_datagen(dg, &gen, log);
  const auto cfg = config_for(dir / "run", {{"dataset.train", (dir / "data" / "train.jsonl").string()},
                                            {"dataset.validation", (dir / "data" / "validation.jsonl").string()},
                                            {"dataset.test", (dir / "data" / "test.jsonl").string()}});
  EXPECT_NO_THROW(cmd_eval(cfg, "", "train", log));
  EXPECT_THROW(cmd_eval(cfg, "", "validation", log), ConfigError);
}

TEST(CmdTrain, TextDatasetsTrainEndToEnd) {
  TempDir dir("cli_text");
  write_corpus(dir / "corpus", 10);
  std::ostringstream log;
  ProbeGenerator gen;
  cmd_datagen(config_for(dir / "data", {{"data.corpus", (dir / "corpus").string()}}), &gen, log);
  const auto cfg = config_for(dir / "run", {{"dataset.train", (dir / "data" / "train.jsonl").string()},
                                            {"dataset.validation", (dir / "data" / "validation.jsonl").string()},
                                            {"dataset.test", (dir / "data" / "test.jsonl").string()},
                                            {"train.max_steps", "60"}});
  const auto res = cmd_train(cfg, log);
  double first = 0, last = 0;
  for (int k = 0; k < 10; ++k) {
    first += res.history[k].train_reward;
    last += res.history[res.history.size() - 1 - k].train_reward;
  }
  EXPECT_GT(last, first);
}

TEST(CmdReport, SummaryAndErrors) {
  TempDir dir("cli_report");
  std::ostringstream log;
  cmd_train(config_for(dir / "run", {{"train.max_steps", "40"}, {"env.train_tasks", "64"}, {"env.heldout_tasks", "16"}}),
            log);
  const auto s = cmd_report(dir / "run" / "metrics.csv", dir / "rep", 10, log);
  EXPECT_GE(s["final_train_reward"].get<double>(), s["initial_train_reward"].get<double>());
  EXPECT_TRUE(fs::exists(dir / "rep" / "report_plot.csv"));
  EXPECT_TRUE(fs::exists(dir / "rep" / "report_plot.svg"));
  EXPECT_EQ(sorted_lines(dir / "rep" / "report_plot.csv").size(), 41u);

  EXPECT_THROW(cmd_report(dir / "missing.csv", dir / "rep", 10, log), ConfigError);

  std::ofstream(dir / "one.csv") << kMetricsHeader << "\n1,0.5,,0.25,0.1,0.01,0,0.3,0.1\n";
  const auto one = cmd_report(dir / "one.csv", dir / "rep1", 10, log);
  EXPECT_EQ(one["rows"], 1);
  EXPECT_EQ(one["initial_train_reward"], one["final_train_reward"]);
  EXPECT_FALSE(one.contains("best_heldout_reward"));
}

TEST(Binary, ExitCodes) {
  TempDir dir("cli_bin");
  const auto out = (dir / "run").string();
  EXPECT_EQ(run_cli("train --out " + out + " --set train.max_steps=3 --set env.train_tasks=16 --set env.heldout_tasks=8"), 0);
  EXPECT_EQ(run_cli("train --out " + out + " --set train.bogus=1"), kExitConfig);
  EXPECT_EQ(run_cli("train --out " + out + " --profile nonsense"), kExitConfig);
  EXPECT_EQ(run_cli("datagen --out " + out + " --set data.corpus=" + (dir / "missing").string()), kExitConfig);
  EXPECT_EQ(run_cli("report --metrics " + (dir / "missing.csv").string()), kExitConfig);
  std::ofstream(dir / "file") << "x";
  EXPECT_EQ(run_cli("train --out " + (dir / "file" / "sub").string() + " --set train.max_steps=1"), kExitRuntime);
  EXPECT_EQ(run_cli("eval --out " + out + " --checkpoint init --split test --set env.train_tasks=16"), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "eval_test.json"));
}
