#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlhf/annotate.hpp"
#include "rlhf/common.hpp"
#include "rlhf/eval.hpp"
#include "rlhf/rl.hpp"

namespace rlhf {

enum class ExperimentKind {
  sampling_scaling,
  rm_size_scaling,
  policy_size_scaling,
  data_scaling,
  rm_diversity,
  prm_vs_orm,
  ppo_vs_grpo,
  data_volume_policy,
};

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);
const std::vector<ExperimentKind>& all_experiment_kinds();

/// Task pools of one seed. The splits are disjoint; the reward model is
/// trained on responses to the RL prompts plus `rm_extra_prompts` more.
struct EnvSettings {
  std::size_t sft_prompts = 256;
  std::size_t train_prompts = 512;
  std::size_t rm_extra_prompts = 1536;
  std::size_t eval_prompts = 1000;
  int difficulty_min = 1;
  int difficulty_max = 3;
};

struct RmSettings {
  int hidden_size = 32;
  std::size_t solutions_per_prompt = 8;
  RmDataConfig data;
  RewardTrainConfig train;
};

struct EvalSettings {
  std::vector<std::size_t> bon_n{4, 64};
  double bon_temperature = 0.9;
  std::vector<StepAggregation> prm_aggregations{StepAggregation::last_step};
  int eval_every = 1;  // greedy-accuracy cadence in RL iterations
  std::size_t max_tokens = 16;
};

struct GridSettings {
  std::vector<std::size_t> group_sizes;
  std::vector<int> rm_hidden_sizes;
  std::vector<int> capacities;
  std::vector<std::size_t> solutions_per_prompt;
  std::vector<double> prompt_fractions;
  std::vector<Algorithm> algorithms;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::sampling_scaling;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  EnvSettings env;
  int policy_capacity = 16;
  SftConfig sft;
  RlConfig rl;
  RmSettings rm;
  AnnotationConfig annotation;
  EvalSettings eval;
  GridSettings grid;
  /// Reward the policy with the verifier instead of a trained reward model.
  bool oracle_reward = false;
  std::string output_dir;

  void validate() const;
};

/// Desk-scale defaults for one experiment kind, grid included.
ExperimentConfig default_experiment_config(ExperimentKind kind);

/// Reads a JSON config. Missing keys keep the kind's defaults; unknown keys,
/// wrong types and invalid values throw InvalidArgument.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Canonical JSON with every field (output_dir included).
std::string experiment_config_to_json(const ExperimentConfig& config, int indent = 2);

/// Checksum of the canonical form without output_dir.
std::uint64_t config_digest(const ExperimentConfig& config);

/// The knob values of one grid point. Fields a kind does not vary are left
/// empty / zero and written as empty cells.
struct ConfigPoint {
  std::string algorithm;
  std::size_t group_size = 0;
  int policy_capacity = 0;
  int rm_hidden_size = 0;
  std::string reward_source;  // oracle | orm | prm
  std::string aggregation;
  std::size_t rm_prompts = 0;
  std::size_t solutions_per_prompt = 0;
  std::size_t total_examples = 0;
  int matched = 0;  // rm_diversity: another point has the same total_examples

  auto operator<=>(const ConfigPoint&) const = default;
  bool operator==(const ConfigPoint&) const = default;
};

struct MetricsRecord {
  std::string experiment_kind;
  ConfigPoint point;
  std::uint64_t seed = 0;
  std::string metric;
  std::optional<int> iteration;
  double value = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

using MetricsTable = std::vector<MetricsRecord>;

const std::vector<std::string>& metrics_columns();

/// Sorts by (point, seed, metric, iteration) and renders CSV with a header
/// row. Values use round-trip precision.
std::string metrics_to_csv(MetricsTable table);
MetricsTable metrics_from_csv(const std::string& text);
void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table);
MetricsTable read_metrics_csv(const std::filesystem::path& path);

struct RunOptions {
  Exec exec = Exec::parallel;
  /// Completed jobs are stored here (one JSON file per grid point and seed).
  std::filesystem::path job_dir;
  /// Reuse completed job files from job_dir instead of recomputing.
  bool resume = false;
  std::function<void(const std::string&)> progress;
};

/// Per-run digests of shared inputs, keyed "<name>/<seed>[/<point>]".
using DigestMap = std::map<std::string, std::string>;

struct ExperimentResult {
  MetricsTable table;
  DigestMap digests;
  std::size_t jobs_run = 0;
  std::size_t jobs_resumed = 0;
};

ExperimentResult run_sampling_scaling(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_rm_size_scaling(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_policy_size_scaling(const ExperimentConfig& config,
                                         const RunOptions& options = {});
ExperimentResult run_data_scaling(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_rm_diversity(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_prm_vs_orm(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_ppo_vs_grpo(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_data_volume_policy(const ExperimentConfig& config,
                                        const RunOptions& options = {});

/// Dispatches on config.kind.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// rm_diversity grid: full prompts x every solutions value, then the largest
/// solutions value x every prompt fraction, deduplicated, with matched flags.
std::vector<ConfigPoint> rm_diversity_points(const ExperimentConfig& config);

struct PlotPoint {
  double x = 0.0;
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

struct PlotSeries {
  std::string name;  // file stem
  std::vector<PlotPoint> points;
};

/// Aggregates seeds to (x, mean, standard error) series for each figure of
/// the kind. Unknown kind names throw InvalidArgument.
std::vector<PlotSeries> plot_series(const MetricsTable& table, const std::string& experiment_kind);

/// Writes plot_series to <dir>/<name>.csv with columns x,mean,stderr and
/// returns the written paths.
std::vector<std::filesystem::path> emit_plot_data(const MetricsTable& table,
                                                  const std::string& experiment_kind,
                                                  const std::filesystem::path& dir);

struct PairedComparison {
  std::size_t group_size = 0;
  std::size_t n = 0;
  double mean_difference = 0.0;  // PPO - GRPO final greedy accuracy
  double ci_low = 0.0;           // 95% t interval
  double ci_high = 0.0;
};

std::vector<PairedComparison> paired_ppo_grpo(const MetricsTable& table);

/// Runs the experiment, then writes metrics.csv, plots/ and manifest.json
/// under config.output_dir. Job files go to <output_dir>/jobs.
ExperimentResult run_and_save(const ExperimentConfig& config, RunOptions options);

}  // namespace rlhf
