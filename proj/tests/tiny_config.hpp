#pragma once

#include "rlhf/exp.hpp"

// Seconds-scale version of each experiment: same code paths, tiny pools.
inline rlhf::ExperimentConfig tiny_config(rlhf::ExperimentKind kind) {
  using rlhf::ExperimentKind;
  rlhf::ExperimentConfig c = rlhf::default_experiment_config(kind);
  c.seeds = {0, 1};
  c.env.sft_prompts = 48;
  c.env.train_prompts = 32;
  c.env.rm_extra_prompts = 32;
  c.env.eval_prompts = 40;
  c.env.difficulty_max = 2;
  c.policy_capacity = 8;
  c.sft.epochs = 1;
  c.rl.iterations = 2;
  c.rl.prompts_per_rollout = 8;
  c.rm.hidden_size = 4;
  c.rm.solutions_per_prompt = 4;
  c.rm.train.epochs = 2;
  c.annotation.rollouts_per_step = 4;
  c.eval.bon_n = {2, 4};
  auto& g = c.grid;
  switch (kind) {
    case ExperimentKind::sampling_scaling: g.group_sizes = {1, 4}; break;
    case ExperimentKind::rm_size_scaling:
      g.rm_hidden_sizes = {4, 8};
      g.group_sizes = {2};
      break;
    case ExperimentKind::policy_size_scaling: g.capacities = {4, 8}; break;
    case ExperimentKind::data_scaling: g.solutions_per_prompt = {2, 4}; break;
    case ExperimentKind::rm_diversity:
      g.solutions_per_prompt = {2, 4};
      g.prompt_fractions = {0.5, 1.0};
      break;
    case ExperimentKind::prm_vs_orm: g.rm_hidden_sizes = {4}; break;
    case ExperimentKind::ppo_vs_grpo: g.group_sizes = {2, 4}; break;
    case ExperimentKind::data_volume_policy:
      c.env.train_prompts = 64;
      c.rl.iterations = 4;
      c.eval.eval_every = 2;
      break;
  }
  c.validate();
  return c;
}
