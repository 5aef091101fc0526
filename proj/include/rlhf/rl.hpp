#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlhf/common.hpp"
#include "rlhf/env.hpp"
#include "rlhf/policy.hpp"
#include "rlhf/reward.hpp"

namespace rlhf {

enum class Algorithm { ppo, grpo };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

/// Order in which group normalization and asymmetric shrinking are applied.
/// The KL penalty always comes last.
enum class ShapingOrder { normalize_then_shrink, shrink_then_normalize };

struct RlConfig {
  Algorithm algorithm = Algorithm::ppo;
  std::size_t group_size = 4;  // M, responses per prompt
  double clip_epsilon = 0.2;
  double kl_coefficient = 0.01;
  double shrink_alpha = 0.5;
  double policy_lr = 8.0;
  double value_lr = 0.1;
  std::size_t prompts_per_rollout = 128;
  std::size_t gradient_batch = 0;  // trajectories per gradient step; 0 means 16 * M
  int epochs_per_rollout = 1;
  double temperature = 1.0;  // rollout sampling temperature
  std::size_t max_tokens = 16;
  int iterations = 40;
  std::uint64_t seed = 0;
  /// Group normalization; unset means "on iff M > 1".
  std::optional<bool> normalize;
  ShapingOrder shaping_order = ShapingOrder::normalize_then_shrink;
  /// Record and compare log-probs at the sampling temperature instead of the
  /// untempered policy.
  bool tempered_logprobs = false;
  double ratio_cap = 1e4;
  /// Policy minibatch gradients with a larger Euclidean norm are rescaled to
  /// this norm; 0 disables.
  double max_grad_norm = 0.25;

  std::size_t effective_gradient_batch() const {
    return gradient_batch ? gradient_batch : 16 * group_size;
  }
  bool normalization_enabled() const { return normalize.value_or(group_size > 1); }
  void validate() const;
};

struct PromptGroup {
  Task task;
  std::vector<Trajectory> trajectories;
  std::vector<double> raw_rewards;
  std::vector<double> shaped_rewards;
  std::vector<std::vector<double>> advantages;     // per trajectory, per token
  std::vector<std::vector<double>> returns;        // reward-to-go per token
  std::vector<std::vector<double>> old_logprobs;   // per trajectory, per token
  std::vector<double> kl_to_reference;             // sampled KL per trajectory
  bool variance_guard = false;
};

struct RolloutBatch {
  std::size_t group_size = 0;
  std::vector<PromptGroup> groups;

  std::size_t num_trajectories() const { return groups.size() * group_size; }
};

struct SftConfig {
  int epochs = 3;
  double learning_rate = 0.5;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
};

/// Maximum-likelihood training on canonical solutions. `epoch_loss` receives
/// the mean per-response negative log-likelihood after each epoch.
PolicyParams sft_pretrain(const PolicyParams& init, std::span<const Task> tasks,
                          const SftConfig& config, std::vector<double>* epoch_loss = nullptr);

/// Samples M responses for each of prompts_per_rollout tasks drawn from
/// `tasks`, scores them, and records the sampling policy's log-probs.
/// Rewards are left unshaped (shaped = raw).
RolloutBatch collect_rollouts(const PolicyParams& policy, const RewardSource& reward,
                              std::span<const Task> tasks, const RlConfig& config, Rng& rng,
                              Exec exec = Exec::parallel);

/// (r - mean) / population std; all zeros when std < 1e-8.
std::vector<double> normalize_group(std::span<const double> raw);

/// Scales negative entries by alpha.
std::vector<double> shrink(std::span<const double> rewards, double alpha);

/// kl_estimate over the sampled tokens only; a forced END is left out.
double sampled_kl(const PolicyParams& policy, const PolicyParams& ref, const Task& task,
                  const Trajectory& trajectory);

/// reward_i - beta * sampled_kl(policy, ref, trajectory_i).
std::vector<double> apply_kl_penalty(std::span<const double> shaped_rewards,
                                     const PolicyParams& policy, const PolicyParams& ref,
                                     const Task& task, std::span<const Trajectory> trajectories,
                                     double beta);

/// Runs normalization, shrinking and the KL penalty over every group.
void shape_rewards(RolloutBatch& batch, const PolicyParams& policy, const PolicyParams& ref,
                   const RlConfig& config, Exec exec = Exec::parallel);

/// GRPO: every token gets its response's shaped reward. PPO: A_t = r - V(prefix_t)
/// with the terminal reward as the (undiscounted) return for every t.
void compute_advantages(RolloutBatch& batch, Algorithm algorithm, const ValueParams* value);

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)
double clipped_surrogate(double ratio, double advantage, double epsilon);

struct UpdateStats {
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;  // sampled KL(old || new) per response
  double mean_reward = 0.0;
  double value_loss = 0.0;
  std::size_t ratio_cap_hits = 0;
  std::size_t grad_clips = 0;  // minibatches whose gradient was rescaled
};

struct UpdateResult {
  PolicyParams policy;
  std::optional<ValueParams> value;
  UpdateStats stats;
};

/// Mean clipped surrogate over the given trajectories, each averaged over its
/// tokens. Exposed for gradient checks.
double surrogate_objective(const PolicyParams& policy, const RolloutBatch& batch,
                           const RlConfig& config);
PolicyParams surrogate_gradient(const PolicyParams& policy, const RolloutBatch& batch,
                                const RlConfig& config);

/// epochs_per_rollout passes of mini-batch ascent on the clipped surrogate
/// (plus value regression under PPO).
UpdateResult policy_update(const PolicyParams& policy, const ValueParams* value,
                           const RolloutBatch& batch, const RlConfig& config,
                           Exec exec = Exec::parallel);

struct TrainLogRecord {
  int iteration = 0;
  double mean_raw_reward = 0.0;
  double mean_shaped_reward = 0.0;
  double mean_kl = 0.0;  // to the reference policy
  double mean_length = 0.0;
  double clip_fraction = 0.0;
  double mean_ratio = 0.0;
  std::size_t ratio_cap_hits = 0;
};

struct TrainResult {
  PolicyParams policy;
  std::optional<ValueParams> value;
  std::vector<TrainLogRecord> log;
};

/// Called after each iteration with the 1-based iteration count and the
/// updated policy.
using IterationHook = std::function<void(int, const PolicyParams&)>;

TrainResult train(const PolicyParams& sft, const RewardSource& reward, std::span<const Task> tasks,
                  const RlConfig& config, const IterationHook& hook = {},
                  Exec exec = Exec::parallel);

}  // namespace rlhf
