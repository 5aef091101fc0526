#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "rlhf/exp.hpp"
#include "rlhf/io.hpp"
#include "tiny_config.hpp"

using namespace rlhf;
namespace fs = std::filesystem;

namespace {

MetricsRecord row(const std::string& kind, std::size_t m, std::uint64_t seed, const std::string& metric,
                  double value, std::optional<int> it = std::nullopt) {
  MetricsRecord r;
  r.experiment_kind = kind;
  r.point.group_size = m;
  r.seed = seed;
  r.metric = metric;
  r.value = value;
  r.iteration = it;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rlhf_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("experiment kinds round-trip") {
  CHECK(all_experiment_kinds().size() == 8);
  for (auto k : all_experiment_kinds()) CHECK(experiment_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(experiment_kind_from_string("bogus"), InvalidArgument);
}

TEST_CASE("config parsing") {
  const auto c = parse_experiment_config(R"({"experiment_kind": "sampling_scaling", "seeds": [3, 4],
      "rl": {"iterations": 7, "normalize": null, "algorithm": "grpo"}, "grid": {"group_sizes": [1, 16]}})");
  CHECK(c.kind == ExperimentKind::sampling_scaling);
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.rl.iterations == 7);
  CHECK(c.rl.algorithm == Algorithm::grpo);
  CHECK_FALSE(c.rl.normalize.has_value());
  CHECK(c.grid.group_sizes == std::vector<std::size_t>{1, 16});
  CHECK(c.env.train_prompts == 512);

  auto err = [](const std::string& text) {
    try {
      parse_experiment_config(text);
    } catch (const InvalidArgument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(err(R"({"experiment_kind": "sampling_scaling", "rl": {"iteratons": 3}})").find("rl.iteratons") != std::string::npos);
  CHECK(err(R"({"experiment_kind": "sampling_scaling", "colour": 1})").find("unknown key 'colour'") != std::string::npos);
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "rl": {"group_size": -1}})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "rl": {"group_size": 2.5}})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "oracle_reward": "yes"})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "grid": {"group_sizes": [3]}})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "seeds": []})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "seeds": [1, 1]})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "rm_diversity", "oracle_reward": true})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "rm_diversity", "grid": {"prompt_fractions": [0]}})").empty());
  CHECK_FALSE(err(R"({"seeds": [1]})").empty());
  CHECK_FALSE(err("not json").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "prm_vs_orm", "eval": {"prm_aggregations": ["max"]}})").empty());
  CHECK_FALSE(err(R"({"experiment_kind": "sampling_scaling", "rl": {"prompts_per_rollout": 9999}})").empty());
}

TEST_CASE("config canonical form and digest") {
  for (auto k : all_experiment_kinds()) {
    ExperimentConfig c = default_experiment_config(k);
    c.validate();
    const auto back = parse_experiment_config(experiment_config_to_json(c));
    CHECK(experiment_config_to_json(back) == experiment_config_to_json(c));
    CHECK(config_digest(back) == config_digest(c));
  }
  ExperimentConfig a = default_experiment_config(ExperimentKind::ppo_vs_grpo), b = a;
  b.output_dir = "elsewhere";
  CHECK(config_digest(a) == config_digest(b));
  b.rl.kl_coefficient = 0.02;
  CHECK(config_digest(a) != config_digest(b));
}

TEST_CASE("metrics csv round trip") {
  MetricsTable t{row("sampling_scaling", 4, 1, "train_reward", 0.1 + 0.2, 3),
                 row("sampling_scaling", 1, 0, "final_greedy_accuracy", 1.0 / 3.0)};
  t[0].point.algorithm = "ppo";
  const std::string csv = metrics_to_csv(t);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "experiment_kind,seed,algorithm,group_size,policy_capacity,rm_hidden_size,reward_source,aggregation,"
        "rm_prompts,solutions_per_prompt,total_examples,matched,metric,iteration,value");
  const MetricsTable back = metrics_from_csv(csv);
  REQUIRE(back.size() == 2);
  // sorted by point first: M=1 before M=4
  CHECK(back[0].point.group_size == 1);
  CHECK(back[0].value == 1.0 / 3.0);
  CHECK(back[1].value == 0.1 + 0.2);
  CHECK(back[1].iteration == 3);
  CHECK_FALSE(back[0].iteration.has_value());
  CHECK(metrics_to_csv(back) == csv);
  CHECK_THROWS_AS(metrics_from_csv("a,b\n"), FormatError);
}

TEST_CASE("plot series aggregation") {
  MetricsTable t{row("sampling_scaling", 1, 0, "final_greedy_accuracy", 1.0),
                 row("sampling_scaling", 1, 1, "final_greedy_accuracy", 3.0),
                 row("sampling_scaling", 4, 0, "final_greedy_accuracy", 0.5),
                 row("sampling_scaling", 16, 0, "final_greedy_accuracy", 0.2),
                 row("sampling_scaling", 16, 1, "final_greedy_accuracy", 0.4),
                 row("sampling_scaling", 16, 2, "final_greedy_accuracy", 0.9),
                 row("ppo_vs_grpo", 1, 0, "final_greedy_accuracy", 9.0)};
  const auto series = plot_series(t, "sampling_scaling");
  const auto it = std::find_if(series.begin(), series.end(),
                               [](const PlotSeries& s) { return s.name == "sampling_scaling_final_accuracy"; });
  REQUIRE(it != series.end());
  REQUIRE(it->points.size() == 3);
  CHECK(it->points[0].x == 1);
  CHECK(it->points[0].mean == 2.0);
  CHECK(it->points[0].stderr_ == doctest::Approx(1.0));  // sd sqrt(2), n 2
  CHECK(it->points[1].stderr_ == 0.0);
  // spreadsheet: AVERAGE(0.2,0.4,0.9) = 0.5, STDEV.S = 0.360555, / SQRT(3) = 0.208167
  CHECK(it->points[2].mean == doctest::Approx(0.5));
  CHECK(it->points[2].stderr_ == doctest::Approx(0.2081665999).epsilon(1e-9));
  CHECK_THROWS_AS(plot_series(t, "nope"), InvalidArgument);

  const fs::path dir = scratch("plots");
  const auto files = emit_plot_data(t, "sampling_scaling", dir);
  REQUIRE(files.size() == 1);
  CHECK(read_file(files[0]) == "x,mean,stderr\n1,2,1\n4,0.5,0\n16,0.5,0.20816659994661327\n");
}

TEST_CASE("rm_diversity grid") {
  ExperimentConfig c = default_experiment_config(ExperimentKind::rm_diversity);
  const auto pts = rm_diversity_points(c);
  CHECK(pts.size() == 7);
  int full_40 = 0;
  for (const auto& p : pts) {
    CHECK(p.total_examples == p.rm_prompts * p.solutions_per_prompt);
    if (p.rm_prompts == 2048 && p.solutions_per_prompt == 40) ++full_40;
    if (p.matched) {
      int partners = 0;
      for (const auto& q : pts) partners += &q != &p && q.total_examples == p.total_examples;
      CHECK(partners == 1);
    }
  }
  CHECK(full_40 == 1);
}

TEST_CASE("paired PPO/GRPO comparison") {
  MetricsTable t;
  const double ppo[] = {0.30, 0.32, 0.35}, grpo[] = {0.28, 0.33, 0.31};
  for (std::uint64_t s = 0; s < 3; ++s) {
    t.push_back(row("ppo_vs_grpo", 4, s, "final_greedy_accuracy", ppo[s]));
    t.back().point.algorithm = "ppo";
    t.push_back(row("ppo_vs_grpo", 4, s, "final_greedy_accuracy", grpo[s]));
    t.back().point.algorithm = "grpo";
  }
  const auto c = paired_ppo_grpo(t);
  REQUIRE(c.size() == 1);
  // differences 0.02, -0.01, 0.04: mean 0.016667, sd 0.025166, t(0.975, 2) = 4.302653
  CHECK(c[0].n == 3);
  CHECK(c[0].mean_difference == doctest::Approx(0.0166666667));
  const double half = 4.302652729749464 * 0.025166114784235836 / std::sqrt(3.0);
  CHECK(c[0].ci_low == doctest::Approx(0.0166666667 - half).epsilon(1e-9));
  CHECK(c[0].ci_high == doctest::Approx(0.0166666667 + half).epsilon(1e-9));
}

TEST_CASE("runners are reproducible and parallel equals serial") {
  for (auto kind : all_experiment_kinds()) {
    const ExperimentConfig c = tiny_config(kind);
    RunOptions par, ser;
    ser.exec = Exec::serial;
    const auto a = run_experiment(c, par);
    const auto b = run_experiment(c, par);
    const auto s = run_experiment(c, ser);
    CAPTURE(to_string(kind));
    CHECK_FALSE(a.table.empty());
    CHECK(metrics_to_csv(a.table) == metrics_to_csv(b.table));
    CHECK(metrics_to_csv(a.table) == metrics_to_csv(s.table));
    CHECK(a.digests == s.digests);
  }
}

TEST_CASE("sampling_scaling rows") {
  ExperimentConfig c = tiny_config(ExperimentKind::sampling_scaling);
  c.grid.group_sizes = {1};
  const auto r = run_sampling_scaling(c);
  std::size_t acc_rows = 0;
  for (const auto& x : r.table) {
    CHECK(x.point.group_size == 1);
    acc_rows += x.metric == "greedy_accuracy";
  }
  CHECK(acc_rows == c.grid.group_sizes.size() * c.seeds.size() * (c.rl.iterations + 1));
  CHECK_THROWS_AS(run_rm_diversity(c), InvalidArgument);
}

TEST_CASE("eval cadence is honored") {
  ExperimentConfig c = tiny_config(ExperimentKind::data_volume_policy);
  c.rl.iterations = 7;
  c.eval.eval_every = 3;
  const auto r = run_data_volume_policy(c);
  std::set<int> its;
  for (const auto& x : r.table)
    if (x.metric == "greedy_accuracy" && x.seed == c.seeds[0]) its.insert(*x.iteration);
  CHECK(its == std::set<int>{0, 3, 6, 7});
}

TEST_CASE("policy size rows carry gain = final - baseline") {
  const auto r = run_policy_size_scaling(tiny_config(ExperimentKind::policy_size_scaling));
  std::map<std::pair<int, std::uint64_t>, std::map<std::string, double>> v;
  for (const auto& x : r.table) v[{x.point.policy_capacity, x.seed}][x.metric] = x.value;
  CHECK(v.size() == 4);
  for (auto& [k, m] : v) CHECK(m["gain"] == m["final_accuracy"] - m["baseline_accuracy"]);
}

TEST_CASE("paired designs share inputs") {
  const auto rm = run_rm_size_scaling(tiny_config(ExperimentKind::rm_size_scaling));
  std::set<std::string> init_digests;
  for (const auto& [k, v] : rm.digests)
    if (k.rfind("policy_init/0/", 0) == 0) init_digests.insert(v);
  CHECK(init_digests.size() == 1);

  const auto prm = run_prm_vs_orm(tiny_config(ExperimentKind::prm_vs_orm));
  std::set<std::string> corpus;
  bool has_agg = false;
  for (const auto& [k, v] : prm.digests)
    if (k.rfind("corpus/0/", 0) == 0) corpus.insert(v);
  for (const auto& x : prm.table) has_agg |= x.point.reward_source == "prm" && x.point.aggregation == "last_step";
  CHECK(corpus.size() == 1);
  CHECK(has_agg);
}

TEST_CASE("run_and_save writes outputs and resumes") {
  ExperimentConfig c = tiny_config(ExperimentKind::ppo_vs_grpo);
  c.output_dir = scratch("run").string();
  RunOptions opts;
  const auto first = run_and_save(c, opts);
  CHECK(first.jobs_run == 4 * c.seeds.size());
  const fs::path out = c.output_dir;
  for (const char* f : {"metrics.csv", "manifest.json", "config.json"}) CHECK(fs::exists(out / f));
  CHECK(read_metrics_csv(out / "metrics.csv") == metrics_from_csv(metrics_to_csv(first.table)));
  const auto manifest = nlohmann::json::parse(read_file(out / "manifest.json"));
  CHECK(manifest["row_count"] == first.table.size());
  CHECK(manifest["paired_comparisons"].size() == 2);
  CHECK(fs::exists(out / "plots" / "ppo_vs_grpo_final_accuracy_ppo.csv"));

  opts.resume = true;
  const auto again = run_and_save(c, opts);
  CHECK(again.jobs_run == 0);
  CHECK(again.jobs_resumed == first.jobs_run);
  CHECK(metrics_to_csv(again.table) == metrics_to_csv(first.table));

  // a partially finished run only recomputes missing jobs
  fs::remove(*fs::directory_iterator(out / "jobs"));
  const auto partial = run_and_save(c, opts);
  CHECK(partial.jobs_run == 1);
  CHECK(metrics_to_csv(partial.table) == metrics_to_csv(first.table));

  ExperimentConfig changed = c;
  changed.rl.kl_coefficient = 0.5;
  CHECK_THROWS_AS(run_and_save(changed, opts), InvalidArgument);
}
