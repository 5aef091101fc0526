// Serial vs OpenMP timings for the parallel kernels. Argument 0 = serial,
// 1 = parallel.

#include <benchmark/benchmark.h>

#include "rlhf/annotate.hpp"
#include "rlhf/eval.hpp"
#include "rlhf/reward.hpp"
#include "rlhf/rl.hpp"

using namespace rlhf;

namespace {

struct Fixture {
  std::vector<Task> tasks = generate_dataset(256, {1, 3}, 7);
  PolicyParams policy = PolicyParams::init(16, 1, 0.5);
  RewardModelParams rm = RewardModelParams::init(32, 2);
  std::vector<TaskResponse> responses;
  std::vector<PreferencePair> pref;
  std::vector<BinaryExample> binary;

  Fixture() {
    Rng rng(3);
    for (std::size_t i = 0; i < 64; ++i) {
      const Task& t = tasks[i];
      const Response y = sample_response(policy, t, 0.9, 16, rng).response;
      responses.push_back({t, y});
      pref.push_back({t, canonical_response(t), y});
      binary.push_back({t, y, verify(t, y) ? 1 : 0});
    }
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

Exec exec_of(const benchmark::State& s) { return s.range(0) ? Exec::parallel : Exec::serial; }

void BM_collect_rollouts(benchmark::State& state) {
  RlConfig cfg;
  cfg.group_size = 4;
  cfg.prompts_per_rollout = 128;
  const RewardSource reward = RewardSource::model(fx().rm);
  for (auto _ : state) {
    Rng rng(5);
    benchmark::DoNotOptimize(collect_rollouts(fx().policy, reward, fx().tasks, cfg, rng, exec_of(state)));
  }
}

void BM_annotate_dataset(benchmark::State& state) {
  AnnotationConfig cfg;
  const std::span<const TaskResponse> items(fx().responses.data(), 16);
  for (auto _ : state) {
    Rng rng(6);
    benchmark::DoNotOptimize(annotate_dataset(fx().policy, items, cfg, rng, exec_of(state)));
  }
}

void BM_best_of_n_curve(benchmark::State& state) {
  const std::vector<std::size_t> ns{4, 16};
  const ResponseScorer scorer = outcome_scorer(RewardSource::model(fx().rm));
  const std::span<const Task> tasks(fx().tasks.data(), 64);
  for (auto _ : state) {
    Rng rng(7);
    benchmark::DoNotOptimize(best_of_n_curve(fx().policy, scorer, tasks, ns, rng, {}, exec_of(state)));
  }
}

void BM_reward_objective_gradient(benchmark::State& state) {
  for (auto _ : state)
    benchmark::DoNotOptimize(reward_objective_gradient(fx().rm, fx().pref, fx().binary, {}, exec_of(state)));
}

void BM_greedy_accuracy(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(greedy_accuracy(fx().policy, fx().tasks, 16, exec_of(state)));
}

}  // namespace

BENCHMARK(BM_collect_rollouts)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_annotate_dataset)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_best_of_n_curve)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_reward_objective_gradient)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_greedy_accuracy)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
