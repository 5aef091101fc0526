#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rlhf/common.hpp"
#include "rlhf/env.hpp"
#include "rlhf/policy.hpp"
#include "rlhf/reward.hpp"

namespace rlhf {

struct EvalReport {
  std::string dataset_id;
  std::size_t n_tasks = 0;
  std::string metric_name;
  double value = 0.0;  // mean of per_task_outcomes
  std::vector<bool> per_task_outcomes;
  std::uint64_t config_digest = 0;
};

/// Index of the largest score; ties go to the lowest index.
std::size_t select_best(std::span<const double> scores);

enum class StepAggregation { last_step, min_step, mean_step };

std::string to_string(StepAggregation a);
StepAggregation aggregation_from_string(const std::string& s);
double aggregate_steps(std::span<const double> step_scores, StepAggregation a);

struct BonConfig {
  double temperature = 0.9;
  std::size_t max_tokens = 16;
};

/// Samples N responses and returns the one the reward model scores highest.
Response best_of_n(const PolicyParams& policy, const RewardModelParams& rm, const Task& task,
                   std::size_t n, Rng& rng, const BonConfig& config = {});

/// As best_of_n, ranking by an aggregation of the per-step scores.
Response best_of_n_prm(const PolicyParams& policy, const RewardModelParams& prm, const Task& task,
                       std::size_t n, StepAggregation aggregation, Rng& rng,
                       const BonConfig& config = {});

/// Ranks responses by a scalar score per response.
using ResponseScorer = std::function<double(const Task&, const Response&)>;

ResponseScorer outcome_scorer(const RewardSource& source);
ResponseScorer process_scorer(const RewardModelParams& prm, StepAggregation aggregation);

/// Fraction of tasks whose Best-of-N pick passes verify. Every task gets its
/// own stream derived from one draw of `rng` and the task id.
EvalReport best_of_n_accuracy(const PolicyParams& policy, const ResponseScorer& scorer,
                              std::span<const Task> tasks, std::size_t n, Rng& rng,
                              const BonConfig& config = {}, Exec exec = Exec::parallel);

/// Best-of-N accuracy for several N from one set of max(ns) samples per task;
/// the pick for N uses the first N samples.
std::vector<EvalReport> best_of_n_curve(const PolicyParams& policy, const ResponseScorer& scorer,
                                        std::span<const Task> tasks, std::span<const std::size_t> ns,
                                        Rng& rng, const BonConfig& config = {},
                                        Exec exec = Exec::parallel);

EvalReport greedy_accuracy(const PolicyParams& policy, std::span<const Task> tasks,
                           std::size_t max_tokens = 16, Exec exec = Exec::parallel);

}  // namespace rlhf
