#pragma once

#include <span>
#include <vector>

#include "rlhf/common.hpp"
#include "rlhf/env.hpp"
#include "rlhf/policy.hpp"
#include "rlhf/reward.hpp"

namespace rlhf {

enum class LabelMode { soft, hard };

struct AnnotationConfig {
  std::size_t rollouts_per_step = 16;
  double temperature = 0.9;
  std::size_t max_tokens = 16;
  LabelMode label_mode = LabelMode::soft;
  double threshold = 0.5;  // hard mode only

  void validate() const;
};

struct TaskResponse {
  Task task;
  Response response;
};

/// Monte-Carlo process labels: for every step prefix, the fraction of K
/// policy continuations that end in a verified answer (or its thresholded
/// indicator in hard mode). The final step's prefix is the whole response, so
/// its label is the outcome itself.
StepLabeledExample annotate_response(const PolicyParams& policy, const Task& task,
                                     const Response& response, const AnnotationConfig& config,
                                     Rng& rng);

/// Annotates every item. Each item's stream is derived from one draw of `rng`
/// and the item's content, so results do not depend on order or scheduling.
std::vector<StepLabeledExample> annotate_dataset(const PolicyParams& policy,
                                                 std::span<const TaskResponse> responses,
                                                 const AnnotationConfig& config, Rng& rng,
                                                 Exec exec = Exec::parallel);

}  // namespace rlhf
