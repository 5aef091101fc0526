// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance                 all criteria
//   acceptance --only 1-8      property suite only
//   acceptance --cache DIR     keep trend-suite job files in DIR and resume from them
//
// RLHF_ACCEPTANCE_CACHE sets the cache directory when --cache is not given.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "rlhf/annotate.hpp"
#include "rlhf/eval.hpp"
#include "rlhf/exp.hpp"
#include "rlhf/rl.hpp"
#include "tiny_config.hpp"

using namespace rlhf;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kFdStep = 1e-5;
constexpr double kFdRelTol = 1e-4;
constexpr std::size_t kFdCoords = 50;
constexpr double kLossTol = 1e-12;
constexpr double kNormTol = 1e-9;
constexpr double kAnnotationTol = 0.05;
constexpr std::size_t kAnnotationRollouts = 2000;
constexpr std::size_t kEnumerationLimit = 100;
constexpr double kPropertySeconds = 5.0;
constexpr double kRlhfGain = 0.05;
constexpr double kPpoGrpoGap = 0.03;
constexpr std::size_t kSeedMajority = 4;  // of 5
const std::vector<std::uint64_t> kTrendSeeds{0, 1, 2, 3, 4};

constexpr int P = tok::kPlus, M = tok::kMinus, EQ = tok::kEq, S = tok::kSep, E = tok::kEnd;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Task small_task() { return oracle::make_task(11, {3, P, 2, M, 1, EQ}); }

PolicyParams random_policy(int capacity, std::uint64_t seed, double scale) {
  PolicyParams p = PolicyParams::init(capacity, seed, 0.5);
  Rng rng(seed + 1);
  for (Eigen::Index i = 0; i < p.context_weights.size(); ++i) p.context_weights.data()[i] = scale * rng.normal();
  return p;
}

RewardModelParams random_rm(int h, std::uint64_t seed) {
  RewardModelParams p = RewardModelParams::init(h, seed, 0.5);
  Rng rng(seed + 7);
  for (Eigen::Index i = 0; i < p.hidden_weights.size(); ++i) p.hidden_weights.data()[i] = 0.3 * rng.normal();
  p.output_bias = 0.2;
  return p;
}

const std::vector<Task>& pool() {
  static const std::vector<Task> tasks = generate_dataset(64, {1, 2}, 3);
  return tasks;
}

// Worst relative error over kFdCoords random coordinates with a non-zero
// analytic gradient; each Coord pairs the analytic value with the objective
// as a function of a perturbation.
struct Coord {
  double analytic;
  std::function<double(double)> f;
};

double worst_fd_error(std::vector<Coord> coords, std::uint64_t seed, std::size_t* used) {
  Rng rng(seed);
  rng.shuffle(coords);
  if (coords.size() > kFdCoords) coords.resize(kFdCoords);
  *used = coords.size();
  double worst = 0;
  for (const auto& c : coords)
    worst = std::max(worst, oracle::relative_error(c.analytic, oracle::central_difference(c.f, kFdStep)));
  return worst;
}

std::vector<Coord> policy_coords(const PolicyParams& p, const PolicyParams& g,
                                 const std::function<double(const PolicyParams&)>& f) {
  std::vector<Coord> out;
  for (int block = 0; block < 2; ++block) {
    const auto& m = block ? g.embedding : g.context_weights;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (std::abs(m.data()[i]) <= 1e-8) continue;
      out.push_back({m.data()[i], [&p, &f, block, i](double d) {
                       PolicyParams q = p;
                       (block ? q.embedding : q.context_weights).data()[i] += d;
                       return f(q);
                     }});
    }
  }
  return out;
}

Verdict gradient_oracles() {
  std::string detail;
  bool ok = true;
  auto report = [&](const char* name, double worst, std::size_t n) {
    ok = ok && n >= kFdCoords && worst <= kFdRelTol;
    detail += fmt("%s max rel err %.2e over %zu coords; ", name, worst, n);
  };

  {
    const Task t = small_task();
    const PolicyParams p = random_policy(6, 31, 0.2);
    const Response y(TokenSeq{5, S, 3, E});
    const std::function<double(const PolicyParams&)> f = [&](const PolicyParams& q) {
      const auto lp = logprob(q, t, y);
      return std::accumulate(lp.begin(), lp.end(), 0.0);
    };
    const PolicyParams g = grad_logprob(p, t, y);
    std::size_t n = 0;
    const double w = worst_fd_error(policy_coords(p, g, f), 3, &n);
    report("grad_logprob", w, n);
  }
  {
    const Task t = small_task();
    const Task u = oracle::make_task(12, {4, M, 6, EQ});
    const std::vector<PreferencePair> pref{{t, canonical_response(t), Response(TokenSeq{5, S, 3, E})},
                                           {u, canonical_response(u), Response(TokenSeq{2, E})}};
    const std::vector<BinaryExample> bin{{t, Response(TokenSeq{1, S, 4, E}), 1}, {u, Response(TokenSeq{3, E}), 0}};
    const std::vector<StepLabeledExample> steps{{t, Response(TokenSeq{5, S, 6, E}), {0.8, 0.1}}};
    const RewardModelParams p = random_rm(6, 9);
    const RewardModelParams g = reward_objective_gradient(p, pref, bin, steps);
    auto slot = [](RewardModelParams& q, int block, Eigen::Index i) -> double& {
      switch (block) {
        case 0: return q.hidden_weights.data()[i];
        case 1: return q.hidden_bias[i];
        case 2: return q.output_weights[i];
        default: return q.output_bias;
      }
    };
    std::vector<Coord> coords;
    auto add = [&](int block, Eigen::Index i) {
      RewardModelParams gc = g;
      coords.push_back({slot(gc, block, i), [&, block, i](double d) {
                          RewardModelParams q = p;
                          slot(q, block, i) += d;
                          return reward_objective(q, pref, bin, steps);
                        }});
    };
    for (Eigen::Index i = 0; i < g.hidden_weights.size(); ++i)
      if (std::abs(g.hidden_weights.data()[i]) > 1e-8) add(0, i);
    for (Eigen::Index i = 0; i < g.hidden_bias.size(); ++i) add(1, i);
    for (Eigen::Index i = 0; i < g.output_weights.size(); ++i) add(2, i);
    add(3, 0);
    std::size_t n = 0;
    const double w = worst_fd_error(std::move(coords), 17, &n);
    report("reward objective", w, n);
  }
  {
    const PolicyParams p = random_policy(6, 7, 0.2);
    RlConfig cfg;
    cfg.group_size = 3;
    cfg.prompts_per_rollout = 1;
    cfg.max_tokens = 8;
    Rng rng(11);
    RolloutBatch batch = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, rng);
    Rng adv(5);
    batch.groups[0].advantages.clear();
    for (const auto& tr : batch.groups[0].trajectories) {
      std::vector<double> a(tr.response.size());
      for (double& x : a) x = adv.normal();
      batch.groups[0].advantages.push_back(a);
    }
    const PolicyParams g = surrogate_gradient(p, batch, cfg);
    const std::function<double(const PolicyParams&)> f = [&](const PolicyParams& q) {
      return surrogate_objective(q, batch, cfg);
    };
    std::size_t n = 0;
    const double w = worst_fd_error(policy_coords(p, g, f), 1, &n);
    report("clipped surrogate at theta_old", w, n);
  }
  return {ok, detail};
}

Verdict loss_identities() {
  const Task t = small_task();
  const RewardModelParams z = RewardModelParams::zeros(4);
  const PreferencePair pair{t, canonical_response(t), Response(TokenSeq{7, E})};
  const BinaryExample ex{t, canonical_response(t), 1};
  const double ln2 = std::log(2.0);
  const double pref = preference_loss(z, pair);
  const double bin = binary_loss(z, ex);
  const double multi = multitask_loss(z, std::span(&pair, 1), std::span(&ex, 1));
  const bool ok = std::abs(pref - ln2) <= kLossTol && std::abs(bin - ln2) <= kLossTol &&
                  std::abs(preference_loss_from_gap(0.0) - ln2) <= kLossTol &&
                  std::abs(binary_loss_from_score(0.0, 1.0) - ln2) <= kLossTol && multi == pref + bin;
  return {ok, fmt("preference %.17g, binary %.17g, multitask %.17g (= sum: %s)", pref, bin, multi,
                  multi == pref + bin ? "yes" : "no")};
}

Verdict shaping_identities() {
  const auto n = normalize_group(std::vector<double>{1, 2, 3});
  const auto c = normalize_group(std::vector<double>{4, 4, 4});
  const auto s = shrink(std::vector<double>{-2, 1}, 0.5);
  const bool norm_ok = n.size() == 3 && std::abs(n[0] + 1.224745) <= 1e-6 && std::abs(n[1]) <= kNormTol &&
                       std::abs(n[2] - 1.224745) <= 1e-6 &&
                       std::abs(n[2] - std::sqrt(1.5)) <= kNormTol && std::abs(n[0] + std::sqrt(1.5)) <= kNormTol;
  const bool const_ok = c == std::vector<double>{0, 0, 0};
  const bool shrink_ok = s == std::vector<double>{-1, 1};
  const bool clip_ok = clipped_surrogate(1, 1, 0.2) == 1.0 && clipped_surrogate(2, 1, 0.2) == 1.2 &&
                       clipped_surrogate(0.5, -1, 0.2) == -0.8;
  return {norm_ok && const_ok && shrink_ok && clip_ok,
          fmt("normalize [%.9f, %.3g, %.9f] %s; constant group %s; shrink %s; surrogate triples %s", n[0], n[1], n[2],
              norm_ok ? "ok" : "bad", const_ok ? "ok" : "bad", shrink_ok ? "ok" : "bad", clip_ok ? "ok" : "bad")};
}

Verdict zero_advantage() {
  const PolicyParams sft = random_policy(4, 9, 0.2);
  const RewardModelParams flat = RewardModelParams::zeros(4);
  int runs = 0, identical = 0;
  for (Algorithm alg : {Algorithm::ppo, Algorithm::grpo})
    for (std::size_t m : {std::size_t{1}, std::size_t{4}}) {
      RlConfig cfg;
      cfg.algorithm = alg;
      cfg.group_size = m;
      cfg.prompts_per_rollout = 8;
      cfg.max_tokens = 8;
      cfg.iterations = 1;
      const TrainResult r = train(sft, RewardSource::model(flat), pool(), cfg);
      ++runs;
      identical += r.policy == sft;
    }
  return {identical == runs, fmt("%d of %d runs (ppo/grpo x M 1/4) bit-identical", identical, runs)};
}

Verdict argmax_invariance() {
  Rng rng(2024);
  int same = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + rng.uniform_int(0, 63));
    for (double& x : s) x = rng.normal() * 3;
    std::vector<double> affine = s, cubic = s;
    for (double& x : affine) x = 2 * x + 7;
    for (double& x : cubic) x = x * x * x + x;
    const auto i = select_best(s);
    same += select_best(affine) == i && select_best(cubic) == i;
  }
  return {same == 100, fmt("%d of 100 score sets keep their pick", same)};
}

Verdict annotation_oracle() {
  const Task t = small_task();
  const PolicyParams p = oracle::constant_policy({{4, 0.4}, {5, 0.1}, {S, -0.2}, {E, -0.5}});
  AnnotationConfig cfg;
  cfg.rollouts_per_step = kAnnotationRollouts;
  cfg.max_tokens = 4;
  cfg.temperature = 0.9;
  double worst = 0;
  std::size_t steps = 0, largest_space = 0;
  for (const TokenSeq& ys : {TokenSeq{5, S, 4, E}, TokenSeq{4, S, 5, E}, TokenSeq{5, S, S, E}}) {
    const Response y(ys);
    Rng rng(42);
    const auto got = annotate_response(p, t, y, cfg, rng);
    for (std::size_t i = 0; i < y.num_steps(); ++i) {
      const auto prefix = y.prefix_through_step(i);
      const TokenSeq pre(prefix.begin(), prefix.end());
      std::size_t count = 0;
      oracle::enumerate(p, t, pre, cfg.temperature, cfg.max_tokens, 1.0, [&](const TokenSeq&, double) { ++count; });
      largest_space = std::max(largest_space, count);
      worst = std::max(worst, std::abs(got.step_labels[i] - oracle::success_probability(p, t, pre, cfg.temperature,
                                                                                         cfg.max_tokens)));
      ++steps;
    }
  }
  return {worst <= kAnnotationTol && largest_space <= kEnumerationLimit,
          fmt("max |soft - exact| %.4f over %zu steps, K=%zu, largest continuation space %zu", worst, steps,
              kAnnotationRollouts, largest_space)};
}

Verdict oracle_bon_monotone() {
  const Task t = oracle::make_task(1000, {3, P, 2, EQ});
  const PolicyParams p = oracle::constant_policy({{4, 0.3}, {5, -0.2}, {E, 0.1}});
  const ResponseScorer scorer = outcome_scorer(RewardSource::oracle());
  std::vector<oracle::Outcome> outs;
  oracle::enumerate(p, t, {}, 1.0, 3, 1.0, [&](const TokenSeq& y, double m) {
    const Response r(y);
    outs.push_back({m, scorer(t, r), verify(t, r)});
  }, 1e-25);
  bool ok = outs.size() <= kEnumerationLimit;
  double prev = -1;
  std::string curve;
  for (int n : {1, 2, 4, 8}) {
    const double acc = oracle::best_of_n_accuracy(outs, n);
    ok = ok && acc >= prev;
    prev = acc;
    curve += fmt("N=%d %.6f ", n, acc);
  }
  return {ok, fmt("%zu responses; %s", outs.size(), curve.c_str())};
}

Verdict reproducibility() {
  std::size_t identical = 0;
  std::string failed;
  for (auto kind : all_experiment_kinds()) {
    const ExperimentConfig cfg = tiny_config(kind);
    RunOptions serial;
    serial.exec = Exec::serial;
    const std::string a = metrics_to_csv(run_experiment(cfg, {}).table);
    const std::string b = metrics_to_csv(run_experiment(cfg, serial).table);
    if (a == b && !a.empty())
      ++identical;
    else
      failed += " " + to_string(kind);
  }
  return {identical == all_experiment_kinds().size(),
          fmt("%zu of %zu kinds bit-identical between a parallel run and a serial rerun%s", identical,
              all_experiment_kinds().size(), failed.empty() ? "" : (";" + failed + " differ").c_str())};
}

// ---------------------------------------------------------------------------
// Trend suite

class Trends {
 public:
  explicit Trends(std::optional<fs::path> cache) : cache_(std::move(cache)) {}

  const MetricsTable& table(ExperimentKind kind) {
    auto it = tables_.find(kind);
    if (it != tables_.end()) return it->second;
    ExperimentConfig cfg = default_experiment_config(kind);
    cfg.seeds = kTrendSeeds;
    RunOptions opt;
    if (cache_) {
      opt.job_dir = *cache_ / to_string(kind);
      opt.resume = true;
      fs::create_directories(opt.job_dir);
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto res = run_experiment(cfg, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "  [%s: %zu jobs run, %zu resumed, %.0f s]\n", to_string(kind).c_str(), res.jobs_run,
                 res.jobs_resumed, secs);
    return tables_.emplace(kind, std::move(res.table)).first->second;
  }

 private:
  std::optional<fs::path> cache_;
  std::map<ExperimentKind, MetricsTable> tables_;
};

using Pred = std::function<bool(const MetricsRecord&)>;

// value of the unique row matching `pred` for `seed`; throws if absent
double value(const MetricsTable& t, std::uint64_t seed, const Pred& pred) {
  const MetricsRecord* hit = nullptr;
  for (const auto& r : t)
    if (r.seed == seed && pred(r)) {
      if (hit) throw std::runtime_error("ambiguous metric row for " + r.metric);
      hit = &r;
    }
  if (!hit) throw std::runtime_error("missing metric row");
  return hit->value;
}

Pred metric_at(std::string metric, std::optional<int> it) {
  return [metric, it](const MetricsRecord& r) { return r.metric == metric && r.iteration == it; };
}

Pred with_m(std::size_t m, Pred inner) {
  return [m, inner](const MetricsRecord& r) { return r.point.group_size == m && inner(r); };
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt(i ? " %+.3f" : "%+.3f", v[i]);
  return s + "]";
}

Verdict rlhf_improves(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::sampling_scaling);
  std::vector<double> gain;
  for (auto s : kTrendSeeds)
    gain.push_back(value(t, s, with_m(4, metric_at("final_greedy_accuracy", std::nullopt))) -
                   value(t, s, with_m(4, metric_at("greedy_accuracy", 0))));
  return {mean(gain) >= kRlhfGain, fmt("M=4 gain over SFT per seed %s, mean %+.4f (need >= %+.2f)",
                                       list(gain).c_str(), mean(gain), kRlhfGain)};
}

Verdict sampling_plateau(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::sampling_scaling);
  std::vector<double> early, late;
  std::size_t wins = 0;
  for (auto s : kTrendSeeds) {
    auto acc = [&](std::size_t m) { return value(t, s, with_m(m, metric_at("final_greedy_accuracy", std::nullopt))); };
    early.push_back(acc(4) - acc(1));
    late.push_back(acc(16) - acc(4));
    wins += acc(4) > acc(1);
  }
  return {mean(early) >= mean(late) && wins >= kSeedMajority,
          fmt("gain 1->4 %s mean %+.4f; gain 4->16 %s mean %+.4f; M=4 > M=1 in %zu/5 seeds", list(early).c_str(),
              mean(early), list(late).c_str(), mean(late), wins)};
}

Verdict rm_diversity(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::rm_diversity);
  std::vector<double> per_seed;
  std::size_t wins = 0, groups = 0;
  for (auto s : kTrendSeeds) {
    std::map<std::size_t, std::vector<const MetricsRecord*>> by_total;
    for (const auto& r : t)
      if (r.seed == s && r.point.matched && r.metric == "bon_64") by_total[r.point.total_examples].push_back(&r);
    std::vector<double> diffs;
    for (auto& [total, rows] : by_total) {
      if (rows.size() != 2) throw std::runtime_error("matched group without exactly two points");
      const auto& [lo, hi] = std::minmax(rows[0], rows[1], [](auto* a, auto* b) {
        return a->point.rm_prompts < b->point.rm_prompts;
      });
      diffs.push_back(hi->value - lo->value);
    }
    groups = diffs.size();
    per_seed.push_back(mean(diffs));
    wins += per_seed.back() > 0;
  }
  return {wins >= kSeedMajority && groups > 0,
          fmt("more prompts minus more solutions, BoN-64, mean over %zu matched counts per seed %s; better in %zu/5 "
              "seeds",
              groups, list(per_seed).c_str(), wins)};
}

Verdict prm_vs_orm(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::prm_vs_orm);
  const int hidden = default_experiment_config(ExperimentKind::prm_vs_orm).rm.hidden_size;
  std::vector<double> diff;
  std::size_t wins = 0;
  for (auto s : kTrendSeeds) {
    const double prm = value(t, s, [&](const MetricsRecord& r) {
      return r.point.rm_hidden_size == hidden && r.point.reward_source == "prm" &&
             r.point.aggregation == "last_step" && r.metric == "bon_64";
    });
    const double orm = value(t, s, [&](const MetricsRecord& r) {
      return r.point.rm_hidden_size == hidden && r.point.reward_source == "orm" && r.metric == "bon_64";
    });
    diff.push_back(prm - orm);
    wins += prm >= orm;
  }
  return {wins >= kSeedMajority,
          fmt("hidden %d, PRM(last_step) minus ORM BoN-64 per seed %s; PRM >= ORM in %zu/5 seeds", hidden,
              list(diff).c_str(), wins)};
}

Verdict ppo_vs_grpo(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::ppo_vs_grpo);
  bool ok = true;
  std::string detail;
  for (auto m : default_experiment_config(ExperimentKind::ppo_vs_grpo).grid.group_sizes) {
    std::vector<double> ppo, grpo;
    std::size_t kl_wins = 0;
    for (auto s : kTrendSeeds) {
      auto get = [&](const char* alg, const char* metric) {
        return value(t, s, [&](const MetricsRecord& r) {
          return r.point.group_size == m && r.point.algorithm == alg && r.metric == metric && !r.iteration;
        });
      };
      ppo.push_back(get("ppo", "final_greedy_accuracy"));
      grpo.push_back(get("grpo", "final_greedy_accuracy"));
      kl_wins += get("grpo", "final_kl") >= get("ppo", "final_kl");
    }
    const double gap = std::abs(mean(ppo) - mean(grpo));
    ok = ok && gap <= kPpoGrpoGap && kl_wins >= kSeedMajority;
    detail += fmt("M=%zu: PPO %.4f vs GRPO %.4f (|diff| %.4f), GRPO KL >= PPO KL in %zu/5 seeds; ", m, mean(ppo),
                  mean(grpo), gap, kl_wins);
  }
  return {ok, detail};
}

Verdict early_gain(Trends& tr) {
  const auto& t = tr.table(ExperimentKind::data_volume_policy);
  const auto cfg = default_experiment_config(ExperimentKind::data_volume_policy);
  const int n = cfg.rl.iterations, third = n / 3, window = cfg.eval.eval_every;
  std::vector<double> first, last, reward_gain;
  for (auto s : kTrendSeeds) {
    auto acc = [&](int it) { return value(t, s, metric_at("greedy_accuracy", it)); };
    first.push_back(acc(third) - acc(0));
    last.push_back(acc(n) - acc(n - third));
    // training reward averaged over the first and last eval windows
    double start = 0, end = 0;
    for (int i = 1; i <= window; ++i) {
      start += value(t, s, metric_at("train_reward", i)) / window;
      end += value(t, s, metric_at("train_reward", n - window + i)) / window;
    }
    reward_gain.push_back(end - start);
  }
  const bool ok = mean(first) >= mean(last) && mean(reward_gain) > 0;
  return {ok, fmt("accuracy gain iters 0-%d %s mean %+.4f; iters %d-%d %s mean %+.4f; train reward last %d minus "
                  "first %d iters %s mean %+.4f",
                  third, list(first).c_str(), mean(first), n - third, n, list(last).c_str(), mean(last), window,
                  window, list(reward_gain).c_str(), mean(reward_gain))};
}

std::set<int> parse_range(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    const int a = std::stoi(part.substr(0, dash));
    const int b = dash == std::string::npos ? a : std::stoi(part.substr(dash + 1));
    for (int i = a; i <= b; ++i) out.insert(i);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string only = "1-14", cache;
  app.add_option("--only", only, "criteria to run, e.g. 1-8,12");
  app.add_option("--cache", cache, "directory for trend-suite job files (resumed when present)");
  CLI11_PARSE(app, argc, argv);
  if (cache.empty())
    if (const char* env = std::getenv("RLHF_ACCEPTANCE_CACHE")) cache = env;

  Trends trends(cache.empty() ? std::nullopt : std::optional<fs::path>(cache));
  struct Criterion {
    int id;
    const char* name;
    bool property;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient oracles", true, gradient_oracles},
      {2, "loss identities", true, loss_identities},
      {3, "normalization, shrinking and clipping", true, shaping_identities},
      {4, "zero-advantage no-op", true, zero_advantage},
      {5, "argmax invariance", true, argmax_invariance},
      {6, "annotation oracle", true, annotation_oracle},
      {7, "oracle Best-of-N monotonicity", true, oracle_bon_monotone},
      {8, "reproducibility", true, reproducibility},
      {9, "RLHF improves the policy", false, [&] { return rlhf_improves(trends); }},
      {10, "sampling plateau", false, [&] { return sampling_plateau(trends); }},
      {11, "RM prompt diversity", false, [&] { return rm_diversity(trends); }},
      {12, "PRM vs ORM", false, [&] { return prm_vs_orm(trends); }},
      {13, "PPO vs GRPO", false, [&] { return ppo_vs_grpo(trends); }},
      {14, "early-gain concentration", false, [&] { return early_gain(trends); }},
  };

  const std::set<int> selected = parse_range(only);
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.property && secs >= kPropertySeconds) {
      v.pass = false;
      v.detail += fmt(" took %.1f s (limit %.0f s)", secs, kPropertySeconds);
    }
    failures += !v.pass;
    std::printf("criterion %2d %s: %s | %s (%.1f s)\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
