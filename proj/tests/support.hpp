#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "rgrpo/rgrpo.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("rgrpo_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) { return rgrpo::read_file(p); }

inline std::vector<std::string> sorted_lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  std::sort(out.begin(), out.end());
  return out;
}

/// Small corpus of distinct documents with repeated domain vocabulary.
inline void write_corpus(const fs::path& dir, int n_docs, unsigned seed = 11) {
  static const std::vector<std::string> words = {
      "thermal", "conduction", "convection", "radiation", "gradient", "boundary", "turbulence",
      "viscosity", "entropy", "enthalpy", "pressure", "reactor", "neutron", "isotope",
      "catalyst", "membrane", "electrode", "plasma", "magnetic", "spectrum"};
  fs::create_directories(dir);
  std::mt19937 rng(seed);
  for (int d = 0; d < n_docs; ++d) {
    std::string text = "Report " + std::to_string(d) + ".\n";
    for (int s = 0; s < 25; ++s) {
      for (int w = 0; w < 10; ++w) text += words[rng() % words.size()] + " ";
      text += ".\n";
    }
    char name[32];
    std::snprintf(name, sizeof name, "doc%03d.txt", d);
    std::ofstream(dir / name) << text;
  }
}

inline rgrpo::Criterion make_criterion(const std::string& id, double weight,
                                       std::vector<std::string> elements = {"alpha"}) {
  rgrpo::Criterion c;
  c.id = id;
  c.name = "criterion " + id;
  c.weight = weight;
  c.description = "checks " + id;
  c.required_elements = std::move(elements);
  c.scoring_guide = "full credit when present";
  c.verification_method = "term presence";
  return c;
}

inline rgrpo::Rubric make_rubric(const std::vector<double>& weights) {
  rgrpo::Rubric r;
  for (std::size_t j = 0; j < weights.size(); ++j)
    r.criteria.push_back(make_criterion("c_" + std::to_string(j + 1), weights[j]));
  return r;
}

inline rgrpo::JudgeVerdict make_verdict(const rgrpo::Rubric& r, const std::vector<double>& scores) {
  rgrpo::JudgeVerdict v;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    v.scores[r.criteria[j].id] = scores[j];
    v.total += scores[j];
  }
  v.max_total = r.total_weight();
  v.parse_ok = true;
  return v;
}

/// Delegates to the heuristic generator; optionally sleeps per call and
/// records the peak number of concurrent analysis calls.
class ProbeGenerator : public rgrpo::TextGenerator {
 public:
  explicit ProbeGenerator(std::chrono::milliseconds delay = std::chrono::milliseconds(0)) : delay_(delay) {}

  std::string generate(const rgrpo::ChatRequest& req) override {
    const bool analysis = req.system.starts_with(rgrpo::kAnalysisTag);
    if (analysis) {
      const int now = ++active_;
      int prev = peak_.load();
      while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
      }
    }
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    if (analysis) --active_;
    if (fail_enrichment && req.system.starts_with(rgrpo::kEnrichmentTag))
      throw rgrpo::TransportError("injected enrichment failure");
    return inner_.generate(req);
  }
  std::string model_name() const override { return "probe"; }

  std::size_t calls() const { return inner_.calls(); }
  int peak() const { return peak_.load(); }
  bool fail_enrichment = false;

 private:
  rgrpo::HeuristicGenerator inner_;
  std::chrono::milliseconds delay_;
  std::atomic<int> active_{0};
  std::atomic<int> peak_{0};
};

/// Replays canned responses by stage tag.
class ScriptedGenerator : public rgrpo::TextGenerator {
 public:
  std::string analysis;
  std::string synthesis;
  std::string enrichment;
  std::size_t calls = 0;

  std::string generate(const rgrpo::ChatRequest& req) override {
    ++calls;
    if (req.system.starts_with(rgrpo::kAnalysisTag)) return analysis;
    if (req.system.starts_with(rgrpo::kSynthesisTag)) return synthesis;
    if (req.system.starts_with(rgrpo::kEnrichmentTag)) return enrichment;
    return "";
  }
};

// ---------------------------------------------------------------------------
// Independent loss oracle. Recomputes the token-averaged clipped surrogate
// plus k3 penalty straight from the parameter vectors, without touching the
// library's softmax, ratio, clip or KL helpers.

struct OracleLossOptions {
  double eps = 0.2;
  double beta = 0.0;
  std::optional<double> dual_c;
  bool sequence_is = false;
};

inline double oracle_token_logprob(const std::vector<double>& theta, int vocab, int pad, int max_len,
                                   double temperature, int cls, int pos, int tok) {
  const std::size_t off = (static_cast<std::size_t>(cls) * max_len + pos) * vocab;
  double mx = -1e300;
  for (int v = 0; v < vocab; ++v)
    if (v != pad) mx = std::max(mx, theta[off + v] / temperature);
  long double z = 0.0L;
  for (int v = 0; v < vocab; ++v)
    if (v != pad) z += std::exp(static_cast<long double>(theta[off + v] / temperature - mx));
  return theta[off + tok] / temperature - mx - static_cast<double>(std::log(z));
}

inline double oracle_loss(const std::vector<double>& theta, const std::vector<double>& ref_theta,
                          const rgrpo::PolicyParams& shape, const std::vector<rgrpo::SampledGroup>& groups,
                          const std::vector<std::vector<double>>& adv, const OracleLossOptions& o) {
  const int V = shape.vocab_size();
  const int pad = shape.vocab().pad;
  const int L = shape.max_len();
  const double T = shape.temperature();
  double total = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& grp = groups[i];
    for (int g = 0; g < grp.group_size; ++g) {
      const int len = grp.lengths[g];
      std::vector<double> lp(len), lr(len), lg(len);
      for (int t = 0; t < len; ++t) {
        const int tok = grp.tokens[g * grp.max_len + t];
        lp[t] = oracle_token_logprob(theta, V, pad, L, T, grp.prompt_id, t, tok);
        lr[t] = oracle_token_logprob(ref_theta, V, pad, L, T, grp.prompt_id, t, tok);
        lg[t] = grp.gen_logprobs[g * grp.max_len + t];
      }
      double seq = 0.0;
      for (int t = 0; t < len; ++t) seq += lp[t] - lg[t];
      const double seq_ratio = len ? std::exp(seq / len) : 1.0;
      const double A = adv[i][g];
      for (int t = 0; t < len; ++t) {
        const double r = o.sequence_is ? seq_ratio : std::exp(lp[t] - lg[t]);
        const double rc = r < 1 - o.eps ? 1 - o.eps : (r > 1 + o.eps ? 1 + o.eps : r);
        double l = -std::min(r * A, rc * A);
        if (o.dual_c && A < 0) l = std::max(l, -*o.dual_c * A);
        double u = lr[t] - lp[t];
        u = u > 20 ? 20 : (u < -20 ? -20 : u);
        total += l + o.beta * (std::exp(u) - 1 - u);
        ++n;
      }
    }
  }
  return total / n;
}

/// Max over coordinates of |a - f| / max(|a|, |f|, floor).
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& f, double floor) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double den = std::max({std::abs(a[k]), std::abs(f[k]), floor});
    worst = std::max(worst, std::abs(a[k] - f[k]) / den);
  }
  return worst;
}

struct GradientCase {
  rgrpo::PolicyParams policy;
  rgrpo::PolicyParams reference;
  std::vector<rgrpo::SampledGroup> groups;
  std::vector<std::vector<double>> adv_rows;
  rgrpo::AdvantageTensor adv;
};

/// Random small instance: B groups of G rollouts from a generation policy
/// near the live one, so both clipped and unclipped tokens occur.
inline GradientCase random_gradient_case(std::uint64_t seed, int B = 2, int G = 2, int len = 3, int vocab = 5,
                                         int classes = 2) {
  rgrpo::Rng rng(seed);
  rgrpo::PolicyParams gen(rgrpo::Vocab::synthetic(vocab), classes, len, 1.0);
  for (auto& x : gen.theta()) x = rng.normal();
  // Make <stop> unlikely so responses usually fill max_len.
  for (int c = 0; c < classes; ++c)
    for (int t = 0; t < len; ++t) gen.logits(c, t)[gen.vocab().stop] -= 2.0;
  GradientCase gc{gen, gen, {}, {}, {}};
  for (auto& x : gc.policy.theta()) x += 0.3 * rng.normal();
  for (auto& x : gc.reference.theta()) x += 0.5 * rng.normal();
  rgrpo::GroupRewards adv(B, G);
  for (int i = 0; i < B; ++i) {
    gc.groups.push_back(rgrpo::sample_group(gen, i % classes, G, rgrpo::mix_seed(seed, i)));
    gc.adv_rows.emplace_back();
    for (int g = 0; g < G; ++g) {
      adv(i, g) = 2.0 * rng.normal();
      gc.adv_rows.back().push_back(adv(i, g));
    }
  }
  gc.adv.advantages = adv;
  gc.adv.baselines = rgrpo::GroupMatrix<double>(B, G);
  gc.adv.sigmas.assign(static_cast<std::size_t>(B), 1.0);
  return gc;
}

inline std::vector<double> central_difference(const GradientCase& gc, const OracleLossOptions& o, double h) {
  std::vector<double> theta(gc.policy.theta().begin(), gc.policy.theta().end());
  const std::vector<double> ref(gc.reference.theta().begin(), gc.reference.theta().end());
  std::vector<double> out(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double x = theta[k];
    theta[k] = x + h;
    const double up = oracle_loss(theta, ref, gc.policy, gc.groups, gc.adv_rows, o);
    theta[k] = x - h;
    const double dn = oracle_loss(theta, ref, gc.policy, gc.groups, gc.adv_rows, o);
    theta[k] = x;
    out[k] = (up - dn) / (2 * h);
  }
  return out;
}

}  // namespace testing_support
