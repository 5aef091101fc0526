#include "rlhf/eval.hpp"

#include <algorithm>
#include <numeric>

#include "rlhf/parallel.hpp"

namespace rlhf {
namespace {

std::vector<Response> sample_n(const PolicyParams& policy, const Task& task, std::size_t n, Rng& rng,
                               const BonConfig& config) {
  std::vector<Response> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(sample_response(policy, task, config.temperature, config.max_tokens, rng).response);
  return out;
}

std::uint64_t tasks_digest(std::span<const Task> tasks) {
  std::uint64_t h = 0;
  for (const auto& t : tasks) h = mix64(h ^ t.id());
  return h;
}

EvalReport make_report(std::string metric, std::vector<bool> outcomes, std::uint64_t digest,
                       std::span<const Task> tasks) {
  EvalReport r;
  r.dataset_id = std::to_string(tasks_digest(tasks));
  r.n_tasks = outcomes.size();
  r.metric_name = std::move(metric);
  r.value = outcomes.empty() ? 0.0
                             : static_cast<double>(std::count(outcomes.begin(), outcomes.end(), true)) /
                                   static_cast<double>(outcomes.size());
  r.per_task_outcomes = std::move(outcomes);
  r.config_digest = digest;
  return r;
}

}  // namespace

std::size_t select_best(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::string to_string(StepAggregation a) {
  switch (a) {
    case StepAggregation::last_step: return "last_step";
    case StepAggregation::min_step: return "min_step";
    case StepAggregation::mean_step: return "mean_step";
  }
  return "?";
}

StepAggregation aggregation_from_string(const std::string& s) {
  if (s == "last_step") return StepAggregation::last_step;
  if (s == "min_step") return StepAggregation::min_step;
  if (s == "mean_step") return StepAggregation::mean_step;
  throw InvalidArgument("unknown step aggregation '" + s + "'");
}

double aggregate_steps(std::span<const double> s, StepAggregation a) {
  if (s.empty()) throw InvalidArgument("aggregate_steps: no step scores");
  switch (a) {
    case StepAggregation::last_step: return s.back();
    case StepAggregation::min_step: return *std::min_element(s.begin(), s.end());
    case StepAggregation::mean_step: return mean(s);
  }
  return s.back();
}

ResponseScorer outcome_scorer(const RewardSource& source) {
  return [source](const Task& t, const Response& r) { return source(t, r); };
}

ResponseScorer process_scorer(const RewardModelParams& prm, StepAggregation aggregation) {
  return [&prm, aggregation](const Task& t, const Response& r) {
    // a response without steps cannot be scored per step; rank it last
    if (r.num_steps() == 0) return -std::numeric_limits<double>::infinity();
    return aggregate_steps(score_steps(prm, t, r), aggregation);
  };
}

Response best_of_n(const PolicyParams& policy, const RewardModelParams& rm, const Task& task,
                   std::size_t n, Rng& rng, const BonConfig& config) {
  if (n < 1) throw InvalidArgument("best_of_n: N must be >= 1");
  auto samples = sample_n(policy, task, n, rng, config);
  std::vector<double> scores;
  for (const auto& r : samples) scores.push_back(score(rm, task, r));
  return samples[select_best(scores)];
}

Response best_of_n_prm(const PolicyParams& policy, const RewardModelParams& prm, const Task& task,
                       std::size_t n, StepAggregation aggregation, Rng& rng,
                       const BonConfig& config) {
  if (n < 1) throw InvalidArgument("best_of_n_prm: N must be >= 1");
  auto samples = sample_n(policy, task, n, rng, config);
  const auto scorer = process_scorer(prm, aggregation);
  std::vector<double> scores;
  for (const auto& r : samples) scores.push_back(scorer(task, r));
  return samples[select_best(scores)];
}

std::vector<EvalReport> best_of_n_curve(const PolicyParams& policy, const ResponseScorer& scorer,
                                        std::span<const Task> tasks, std::span<const std::size_t> ns,
                                        Rng& rng, const BonConfig& config, Exec exec) {
  if (tasks.empty()) throw InvalidArgument("best_of_n_accuracy: no tasks");
  if (ns.empty()) throw InvalidArgument("best_of_n_curve: no N values");
  for (auto n : ns)
    if (n < 1) throw InvalidArgument("best_of_n_accuracy: N must be >= 1");
  const std::size_t n_max = *std::max_element(ns.begin(), ns.end());
  const std::uint64_t base = rng.next();

  // outcome[i][k] for task i and ns[k]
  std::vector<std::vector<bool>> outcome(tasks.size(), std::vector<bool>(ns.size()));
  parallel_for(tasks.size(), exec, [&](std::size_t i) {
    Rng local(derive_seed(base, tasks[i].id()));
    const auto samples = sample_n(policy, tasks[i], n_max, local, config);
    std::vector<double> scores;
    for (const auto& r : samples) scores.push_back(scorer(tasks[i], r));
    for (std::size_t k = 0; k < ns.size(); ++k) {
      const auto best = select_best(std::span(scores).first(ns[k]));
      outcome[i][k] = verify(tasks[i], samples[best]);
    }
  });

  std::vector<EvalReport> out;
  for (std::size_t k = 0; k < ns.size(); ++k) {
    std::vector<bool> col;
    for (const auto& row : outcome) col.push_back(row[k]);
    const std::uint64_t digest =
        derive_seed(base, ns[k], checksum_bytes(&config.temperature, sizeof(double)));
    out.push_back(make_report("bon_" + std::to_string(ns[k]), std::move(col), digest, tasks));
  }
  return out;
}

EvalReport best_of_n_accuracy(const PolicyParams& policy, const ResponseScorer& scorer,
                              std::span<const Task> tasks, std::size_t n, Rng& rng,
                              const BonConfig& config, Exec exec) {
  const std::size_t ns[] = {n};
  return best_of_n_curve(policy, scorer, tasks, ns, rng, config, exec).front();
}

EvalReport greedy_accuracy(const PolicyParams& policy, std::span<const Task> tasks,
                           std::size_t max_tokens, Exec exec) {
  if (tasks.empty()) throw InvalidArgument("greedy_accuracy: no tasks");
  std::vector<char> ok(tasks.size(), 0);
  parallel_for(tasks.size(), exec, [&](std::size_t i) {
    ok[i] = verify(tasks[i], greedy_decode(policy, tasks[i], max_tokens)) ? 1 : 0;
  });
  return make_report("greedy_accuracy", std::vector<bool>(ok.begin(), ok.end()), max_tokens, tasks);
}

}  // namespace rlhf
