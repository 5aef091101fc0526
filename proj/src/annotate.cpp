#include "rlhf/annotate.hpp"

#include "rlhf/parallel.hpp"

namespace rlhf {
namespace {

StepLabeledExample annotate_with_seed(const PolicyParams& policy, const Task& task,
                                      const Response& response, const AnnotationConfig& config,
                                      std::uint64_t base) {
  if (response.num_steps() == 0) throw InvalidArgument("annotate_response: response has no steps");
  StepLabeledExample out{task, response, {}};
  for (std::size_t i = 0; i < response.num_steps(); ++i) {
    const auto prefix = response.prefix_through_step(i);
    Rng rng(derive_seed(base, i));
    std::size_t hits = 0;
    for (std::size_t k = 0; k < config.rollouts_per_step; ++k) {
      const TokenSeq full =
          complete_response(policy, task, prefix, config.temperature, config.max_tokens, &rng);
      if (verify(task, Response(full))) ++hits;
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(config.rollouts_per_step);
    out.step_labels.push_back(config.label_mode == LabelMode::soft
                                  ? rate
                                  : (rate >= config.threshold ? 1.0 : 0.0));
  }
  return out;
}

}  // namespace

void AnnotationConfig::validate() const {
  if (rollouts_per_step < 1) throw InvalidArgument("annotation: rollouts_per_step must be >= 1");
  if (!(temperature > 0)) throw InvalidArgument("annotation: temperature must be > 0");
  if (max_tokens < 1) throw InvalidArgument("annotation: max_tokens must be >= 1");
  if (label_mode == LabelMode::hard && !(threshold > 0 && threshold < 1))
    throw InvalidArgument("annotation: hard-mode threshold must lie in (0, 1)");
}

StepLabeledExample annotate_response(const PolicyParams& policy, const Task& task,
                                     const Response& response, const AnnotationConfig& config,
                                     Rng& rng) {
  config.validate();
  return annotate_with_seed(policy, task, response, config, rng.next());
}

std::vector<StepLabeledExample> annotate_dataset(const PolicyParams& policy,
                                                 std::span<const TaskResponse> responses,
                                                 const AnnotationConfig& config, Rng& rng,
                                                 Exec exec) {
  config.validate();
  const std::uint64_t base = rng.next();
  std::vector<StepLabeledExample> out(responses.size());
  parallel_for(responses.size(), exec, [&](std::size_t i) {
    const auto& [task, response] = responses[i];
    const std::uint64_t content =
        checksum_bytes(response.tokens().data(), response.tokens().size(), task.id());
    out[i] = annotate_with_seed(policy, task, response, config, derive_seed(base, content));
  });
  return out;
}

}  // namespace rlhf
