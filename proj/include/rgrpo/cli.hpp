#pragma once

// Implementation of the `rgrpo` subcommands. Kept in the library so the
// integration tests can drive them without spawning processes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgrpo/config.hpp"
#include "rgrpo/datagen.hpp"
#include "rgrpo/judge.hpp"
#include "rgrpo/synthetic.hpp"
#include "rgrpo/trainer.hpp"

namespace rgrpo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Map exceptions escaping a command onto exit codes.
template <class Fn>
int run_command(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    fn();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SchemaError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void persist_config(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  write_text(cfg.out_dir() / "resolved_config.cfg", render_config(cfg.values()));
}

// ---------------------------------------------------------------------------
// Environment: policy shape plus train / validation / test items

struct Environment {
  PolicyParams init;
  std::vector<TrainItem> train;
  std::vector<TrainItem> validation;
  std::vector<TrainItem> test;

  const std::vector<TrainItem>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "validation" || name == "heldout") return validation;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

namespace detail {

inline std::vector<std::string> words_of(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{to_lower(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

/// Policy over the words of the rubrics' required elements, one prompt class
/// per distinct question.
inline Environment text_environment(const RunConfig& cfg, const std::vector<TaskInstance>& train,
                                    const std::vector<TaskInstance>& validation,
                                    const std::vector<TaskInstance>& test) {
  std::set<std::string> words;
  std::map<std::string, int> classes;
  std::size_t longest = 0;
  for (const auto* split : {&train, &validation, &test}) {
    for (const auto& t : *split) {
      std::set<std::string> needed;
      for (const auto& c : t.rubric.criteria)
        for (const auto& e : c.required_elements.empty() ? c.expected_keywords : c.required_elements)
          for (auto& w : words_of(e)) needed.insert(w);
      longest = std::max(longest, needed.size());
      words.insert(needed.begin(), needed.end());
      classes.emplace(t.question, static_cast<int>(classes.size()));
    }
  }
  if (words.empty()) throw ConfigError("datasets contain no required elements to learn");
  const int max_len = std::max(static_cast<int>(cfg.integer("env.max_len")), static_cast<int>(longest) + 1);
  Environment env{PolicyParams(Vocab::from_words({words.begin(), words.end()}), static_cast<int>(classes.size()),
                               max_len, cfg.real("env.rollout_temperature")),
                  {}, {}, {}};
  auto items = [&](const std::vector<TaskInstance>& tasks) {
    std::vector<TrainItem> out;
    for (const auto& t : tasks) out.push_back({t, classes.at(t.question)});
    return out;
  };
  env.train = items(train);
  env.validation = items(validation);
  env.test = items(test);
  return env;
}

}  // namespace detail

inline Environment build_environment(const RunConfig& cfg) {
  const auto& train_path = cfg.str("dataset.train");
  if (!train_path.empty()) {
    auto load = [&](const std::string& key) {
      const auto& p = cfg.str(key);
      return p.empty() ? std::vector<TaskInstance>{} : read_tuples(p);
    };
    return detail::text_environment(cfg, load("dataset.train"), load("dataset.validation"), load("dataset.test"));
  }
  const auto env = cfg.env();
  const auto difficulty = parse_difficulty(cfg.str("env.difficulty"));
  auto items = [&](int n, std::uint64_t stream) {
    std::vector<TrainItem> out;
    for (auto& t : make_synthetic_tasks(n, difficulty, mix_seed(cfg.seed(), stream), env))
      out.push_back({std::move(t.instance), t.prompt_id});
    return out;
  };
  const auto heldout = static_cast<int>(cfg.integer("env.heldout_tasks"));
  return {PolicyParams(Vocab::synthetic(env.vocab_size), env.prompt_classes, env.max_len,
                       cfg.real("env.rollout_temperature")),
          items(static_cast<int>(cfg.integer("env.train_tasks")), 1), items(heldout, 2), items(heldout, 3)};
}

inline std::unique_ptr<JudgeBackend> make_judge(const RunConfig& cfg) {
  if (cfg.str("judge") == "remote") return std::make_unique<RemoteJudge>(cfg.judge());
  return std::make_unique<OracleJudge>(cfg.credit_mode());
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr std::string_view kMetricsHeader =
    "step,train_reward,heldout_reward,zero_reward_frac,loss,kl,clip_frac,grad_norm,lr";

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

inline std::string metrics_row(const StepMetrics& m) {
  std::string row = std::to_string(m.step);
  for (double v : {m.train_reward, m.heldout_reward, m.zero_reward_fraction, m.loss, m.kl, m.clip_fraction,
                   m.grad_norm, m.learning_rate})
    row += "," + csv_number(v);
  return row;
}

struct MetricsRow {
  long step = 0;
  std::vector<double> values;  // columns after `step`; NaN when blank

  double train_reward() const { return values[0]; }
  double heldout_reward() const { return values[1]; }
  double zero_reward_frac() const { return values[2]; }
};

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMetricsHeader)
    throw SchemaError(path.string() + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 9) throw SchemaError(path.string() + ": row with " + std::to_string(cells.size()) + " columns");
    MetricsRow r;
    r.step = std::stol(cells[0]);
    for (std::size_t k = 1; k < cells.size(); ++k)
      r.values.push_back(cells[k].empty() ? std::nan("") : std::stod(cells[k]));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands

inline fs::path best_checkpoint_path(const fs::path& out) { return out / "checkpoint_best.json"; }
inline fs::path last_checkpoint_path(const fs::path& out) { return out / "checkpoint_last.json"; }
inline fs::path metrics_path(const fs::path& out) { return out / "metrics.csv"; }

inline TrainerState load_checkpoint(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw SchemaError(path.string() + " is not valid JSON");
  return trainer_state_from_json(j);
}

inline void save_checkpoint(const fs::path& path, const TrainerState& s) {
  const auto tmp = fs::path(path.string() + ".tmp");
  write_text(tmp, to_json(s).dump() + "\n");
  fs::rename(tmp, path);
}

/// Train and write metrics.csv, checkpoint_best.json (on held-out
/// improvement) and checkpoint_last.json (every `checkpoint_every` steps).
inline TrainResult cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  persist_config(cfg);
  const auto out = cfg.out_dir();
  const auto env = build_environment(cfg);
  const auto judge = make_judge(cfg);
  const auto tcfg = cfg.train();
  const auto jcfg = cfg.judge();

  TrainerState state = TrainerState::fresh(env.init);
  const auto& resume = cfg.str("resume");
  if (!resume.empty()) {
    state = load_checkpoint(resume);
    if (state.policy.theta().size() != env.init.theta().size() || !(state.policy.vocab() == env.init.vocab()))
      throw ConfigError("checkpoint does not match the configured environment");
    log << "resuming from step " << state.step << '\n';
  }

  const auto csv = metrics_path(out);
  if (resume.empty() || !fs::exists(csv)) write_text(csv, std::string(kMetricsHeader) + "\n");
  std::ofstream metrics(csv, std::ios::app);

  const long every = cfg.integer("checkpoint_every");
  const long total = planned_steps(tcfg, env.train.size());
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    metrics << metrics_row(m) << '\n';
    metrics.flush();
    log << "step " << m.step << "/" << total << " reward " << std::fixed << std::setprecision(4) << m.train_reward
        << " zero " << m.zero_reward_fraction << " loss " << m.loss << " kl " << m.kl;
    if (!std::isnan(m.heldout_reward)) log << " heldout " << m.heldout_reward;
    log << std::defaultfloat << '\n';
  };
  hooks.on_best = [&](const TrainerState& s) { save_checkpoint(best_checkpoint_path(out), s); };
  hooks.on_state = [&](const TrainerState& s) {
    if (s.step % every == 0 || s.step == total) save_checkpoint(last_checkpoint_path(out), s);
  };
  auto result = train(env.train, env.validation, state, *judge, jcfg, tcfg, hooks);
  log << "best held-out reward " << result.best_heldout << " at step " << result.best_step << '\n';
  return result;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, st] : r.per_criterion)
    per[id] = {{"count", st.count}, {"mean_credit", st.mean_credit}, {"histogram", st.histogram}};
  return {{"instances", r.instances},
          {"responses", r.responses},
          {"mean_reward", r.mean_reward},
          {"zero_reward_fraction", r.zero_reward_fraction},
          {"per_criterion", per}};
}

/// Score `split` with the policy from `checkpoint` (empty: the initial
/// policy). Writes eval_<split>.json.
inline EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& split,
                           std::ostream& log = std::cout) {
  persist_config(cfg);
  const auto env = build_environment(cfg);
  const auto& items = env.split(split);
  if (items.empty()) throw ConfigError("split '" + split + "' is empty");
  PolicyParams policy = env.init;
  if (!checkpoint.empty()) {
    policy = load_checkpoint(checkpoint).policy;
    if (!(policy.vocab() == env.init.vocab()) || policy.theta().size() != env.init.theta().size())
      throw ConfigError("checkpoint does not match the configured environment");
  }
  const auto judge = make_judge(cfg);
  const auto tcfg = cfg.train();
  const auto report = evaluate_policy(policy, items, *judge, cfg.judge(), tcfg.eval_samples,
                                      mix_seed(cfg.seed(), 0x636d6465ULL));
  auto j = to_json(report);
  j["split"] = split;
  j["checkpoint"] = checkpoint.empty() ? "initial" : checkpoint;
  write_text(cfg.out_dir() / ("eval_" + split + ".json"), j.dump(2) + "\n");
  log << "split " << split << ": mean reward " << report.mean_reward << ", zero-reward fraction "
      << report.zero_reward_fraction << " over " << report.responses << " responses\n";
  return report;
}

struct DatagenResult {
  PipelineRun run;
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

/// Run the pipeline into <out>/ and write train/validation/test JSONL files.
inline DatagenResult cmd_datagen(const RunConfig& cfg, TextGenerator* generator = nullptr,
                                 std::ostream& log = std::cout) {
  persist_config(cfg);
  const auto& corpus = cfg.str("data.corpus");
  if (corpus.empty()) throw ConfigError("data.corpus is not set");
  if (!fs::exists(corpus)) throw ConfigError("corpus not found: " + corpus);

  std::unique_ptr<TextGenerator> owned;
  if (!generator) {
    if (cfg.str("data.generator") == "remote") {
      EndpointConfig e;
      e.url = cfg.str("data.generator_url");
      e.model = cfg.str("data.generator_model");
      e.max_retries = static_cast<int>(cfg.integer("judge.max_retries"));
      owned = std::make_unique<ChatGenerator>(e);
    } else {
      owned = std::make_unique<HeuristicGenerator>();
    }
    generator = owned.get();
  }

  PipelineConfig p;
  p.corpus = corpus;
  p.out_dir = cfg.out_dir();
  p.concurrency = static_cast<int>(cfg.integer("data.concurrency"));
  p.questions_per_doc = static_cast<int>(cfg.integer("data.questions_per_doc"));
  p.qa = cfg.qa();

  DatagenResult res;
  res.run = run_pipeline(p, *generator);
  std::vector<TaskInstance> all;
  if (fs::exists(tuples_path(p.out_dir))) all = read_tuples(tuples_path(p.out_dir));
  // Sort so the split files do not depend on worker completion order.
  std::sort(all.begin(), all.end(), [](const TaskInstance& a, const TaskInstance& b) {
    return std::tie(a.doc_hash, a.question) < std::tie(b.doc_hash, b.question);
  });
  const auto split = split_dataset(all, cfg.split(), cfg.seed());
  write_tuples(p.out_dir / "train.jsonl", split.train);
  write_tuples(p.out_dir / "validation.jsonl", split.validation);
  write_tuples(p.out_dir / "test.jsonl", split.test);
  res.train = split.train.size();
  res.validation = split.validation.size();
  res.test = split.test.size();
  log << "documents " << res.run.documents << " (skipped " << res.run.skipped_existing << ", processed "
      << res.run.processed << ", failed " << res.run.failed << "); tuples accepted " << res.run.accepted
      << ", rejected " << res.run.rejected << "; split " << res.train << "/" << res.validation << "/" << res.test
      << '\n';
  return res;
}

namespace detail {

inline std::string svg_polyline(const std::vector<std::pair<double, double>>& pts, double x_max, const char* color) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
  for (const auto& [x, y] : pts)
    os << std::fixed << std::setprecision(1) << 40.0 + 520.0 * (x_max > 0 ? x / x_max : 0.0) << ','
       << 260.0 - 220.0 * std::clamp(y, 0.0, 1.0) << ' ';
  os << "\"/>\n";
  return os.str();
}

}  // namespace detail

/// Plot-ready data (report_plot.csv), a summary (report_summary.json) and a
/// small SVG chart of reward curves and the zero-reward fraction.
inline nlohmann::json cmd_report(const fs::path& metrics_csv, const fs::path& out_dir, int window = 10,
                                 std::ostream& log = std::cout) {
  const auto rows = read_metrics_csv(metrics_csv);
  if (rows.empty()) throw ConfigError(metrics_csv.string() + " has no data rows");
  fs::create_directories(out_dir);

  std::ostringstream plot;
  plot << "step,train_reward,train_reward_smoothed,heldout_reward,zero_reward_frac\n";
  std::vector<std::pair<double, double>> train_pts, held_pts, zero_pts;
  double best_held = std::nan("");
  long best_step = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - static_cast<std::size_t>(window) : 0;
    double sm = 0.0;
    for (std::size_t k = lo; k <= i; ++k) sm += rows[k].train_reward();
    sm /= static_cast<double>(i - lo + 1);
    const auto& r = rows[i];
    plot << r.step << ',' << csv_number(r.train_reward()) << ',' << csv_number(sm) << ','
         << csv_number(r.heldout_reward()) << ',' << csv_number(r.zero_reward_frac()) << '\n';
    train_pts.emplace_back(static_cast<double>(r.step), sm);
    zero_pts.emplace_back(static_cast<double>(r.step), r.zero_reward_frac());
    if (!std::isnan(r.heldout_reward())) {
      held_pts.emplace_back(static_cast<double>(r.step), r.heldout_reward());
      if (std::isnan(best_held) || r.heldout_reward() > best_held) {
        best_held = r.heldout_reward();
        best_step = r.step;
      }
    }
  }
  write_text(out_dir / "report_plot.csv", plot.str());

  auto window_mean = [&](bool head, auto getter) {
    const std::size_t n = std::min<std::size_t>(rows.size(), static_cast<std::size_t>(window));
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += getter(rows[head ? k : rows.size() - n + k]);
    return s / static_cast<double>(n);
  };
  auto reward = [](const MetricsRow& r) { return r.train_reward(); };
  auto zero = [](const MetricsRow& r) { return r.zero_reward_frac(); };
  nlohmann::json summary = {
      {"rows", rows.size()},
      {"first_step", rows.front().step},
      {"last_step", rows.back().step},
      {"initial_train_reward", window_mean(true, reward)},
      {"final_train_reward", window_mean(false, reward)},
      {"initial_zero_reward_frac", window_mean(true, zero)},
      {"final_zero_reward_frac", window_mean(false, zero)},
      {"window", window},
  };
  if (!std::isnan(best_held)) {
    summary["best_heldout_reward"] = best_held;
    summary["best_heldout_step"] = best_step;
  }
  write_text(out_dir / "report_summary.json", summary.dump(2) + "\n");

  const double x_max = static_cast<double>(rows.back().step);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"300\">\n"
      << "<rect width=\"600\" height=\"300\" fill=\"white\"/>\n"
      << "<line x1=\"40\" y1=\"260\" x2=\"560\" y2=\"260\" stroke=\"black\"/>\n"
      << "<line x1=\"40\" y1=\"40\" x2=\"40\" y2=\"260\" stroke=\"black\"/>\n"
      << detail::svg_polyline(train_pts, x_max, "steelblue") << detail::svg_polyline(held_pts, x_max, "darkorange")
      << detail::svg_polyline(zero_pts, x_max, "firebrick")
      << "<text x=\"50\" y=\"20\" font-size=\"12\">train (blue), held-out (orange), zero-reward fraction (red)</text>\n"
      << "</svg>\n";
  write_text(out_dir / "report_plot.svg", svg.str());
  log << "report: train reward " << summary["initial_train_reward"].get<double>() << " -> "
      << summary["final_train_reward"].get<double>() << " over " << rows.size() << " steps\n";
  return summary;
}

}  // namespace rgrpo
