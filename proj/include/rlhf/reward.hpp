#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rlhf/common.hpp"
#include "rlhf/env.hpp"
#include "rlhf/features.hpp"
#include "rlhf/policy.hpp"

namespace rlhf {

/// One-hidden-layer tanh scorer over the shared featurizer:
///   score = output_weights . tanh(hidden_weights^T phi + hidden_bias) + output_bias
/// The raw score is unbounded; sigmoid(score) is the probability used by the
/// cross-entropy terms.
struct RewardModelParams {
  int hidden_size = 0;
  RowMatrix hidden_weights;  // [feature_dim x h]
  Vector hidden_bias;        // [h]
  Vector output_weights;     // [h]
  double output_bias = 0.0;

  static RewardModelParams zeros(int hidden_size);
  static RewardModelParams init(int hidden_size, std::uint64_t seed, double scale = 0.1);

  bool all_finite() const;
  std::uint64_t checksum() const;
  bool operator==(const RewardModelParams&) const = default;
};

struct PreferencePair {
  Task task;
  Response chosen;
  Response rejected;
};

struct BinaryExample {
  Task task;
  Response response;
  int label = 0;
};

struct StepLabeledExample {
  Task task;
  Response response;
  std::vector<double> step_labels;  // one per step, in [0, 1]
};

double score(const RewardModelParams& params, const Task& task, const Response& response);
double score(const RewardModelParams& params, const FeatureVector& phi);
std::vector<double> score_steps(const RewardModelParams& params, const Task& task,
                                const Response& response);

double preference_loss(const RewardModelParams& params, const PreferencePair& pair);
double binary_loss(const RewardModelParams& params, const BinaryExample& example);

/// -log sigmoid(gap), the pairwise loss as a function of the score gap.
inline double preference_loss_from_gap(double gap) { return softplus(-gap); }
/// Cross-entropy of sigmoid(score) against a (possibly soft) label.
inline double binary_loss_from_score(double score, double label) {
  return softplus(score) - label * score;
}

/// mean binary loss + mean preference loss; an empty batch contributes 0.
double multitask_loss(const RewardModelParams& params, std::span<const PreferencePair> pref_batch,
                      std::span<const BinaryExample> binary_batch);

/// Mean cross-entropy over every step of every example.
double prm_loss(const RewardModelParams& params, std::span<const StepLabeledExample> examples);

/// Full training objective: multitask_loss (when either outcome set is
/// non-empty) plus prm_loss (when step data is non-empty).
double reward_objective(const RewardModelParams& params, std::span<const PreferencePair> pref,
                        std::span<const BinaryExample> binary,
                        std::span<const StepLabeledExample> steps);

/// Dense gradient of reward_objective, shaped like the parameters.
RewardModelParams reward_objective_gradient(const RewardModelParams& params,
                                            std::span<const PreferencePair> pref,
                                            std::span<const BinaryExample> binary,
                                            std::span<const StepLabeledExample> steps,
                                            Exec exec = Exec::serial);

struct RewardTrainConfig {
  int epochs = 20;
  double learning_rate = 0.05;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct RewardTrainLog {
  std::vector<double> epoch_loss;  // objective on the full data after each epoch
  double initial_loss = 0.0;
};

/// Mini-batch gradient descent on reward_objective. Each step draws one
/// batch_size slice from every non-empty dataset. Throws TrainingDiverged on a
/// non-finite loss or gradient.
RewardModelParams train_reward_model(const RewardModelParams& init,
                                     std::span<const PreferencePair> pref_data,
                                     std::span<const BinaryExample> binary_data,
                                     std::span<const StepLabeledExample> step_data,
                                     const RewardTrainConfig& config,
                                     RewardTrainLog* log = nullptr, Exec exec = Exec::parallel);

/// Either a trained reward model or the verifier mapped to {0, 1}.
class RewardSource {
 public:
  static RewardSource oracle() { return RewardSource(nullptr); }
  static RewardSource model(const RewardModelParams& rm) { return RewardSource(&rm); }

  bool is_oracle() const { return rm_ == nullptr; }
  double operator()(const Task& task, const Response& response) const;

 private:
  explicit RewardSource(const RewardModelParams* rm) : rm_(rm) {}
  const RewardModelParams* rm_;
};

struct RmDataConfig {
  double temperature = 0.9;
  std::size_t max_tokens = 16;
  std::size_t pair_cap = 8;  // per task
};

struct RmDataset {
  std::vector<PreferencePair> pref;
  std::vector<BinaryExample> binary;
};

/// Samples n responses per task, labels them with verify, and pairs every
/// correct response against every incorrect one (a random subset of at most
/// pair_cap pairs per task is kept).
RmDataset build_rm_dataset(std::span<const Task> tasks, const PolicyParams& sampler,
                           std::size_t n_solutions_per_prompt, Rng& rng,
                           const RmDataConfig& config = {}, Exec exec = Exec::parallel);

}  // namespace rlhf
