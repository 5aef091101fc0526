#include "rlhf/rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlhf/parallel.hpp"

namespace rlhf {

std::string to_string(Algorithm a) { return a == Algorithm::ppo ? "ppo" : "grpo"; }

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "ppo" || s == "PPO") return Algorithm::ppo;
  if (s == "grpo" || s == "GRPO") return Algorithm::grpo;
  throw InvalidArgument("unknown algorithm '" + s + "'");
}

void RlConfig::validate() const {
  if (group_size < 1) throw InvalidArgument("rl config: group_size must be >= 1");
  if (!(clip_epsilon > 0 && clip_epsilon < 1)) throw InvalidArgument("rl config: clip epsilon must lie in (0, 1)");
  if (!(kl_coefficient >= 0)) throw InvalidArgument("rl config: kl coefficient must be >= 0");
  if (!(shrink_alpha > 0 && shrink_alpha <= 1)) throw InvalidArgument("rl config: shrink alpha must lie in (0, 1]");
  if (!(policy_lr > 0) || !(value_lr > 0)) throw InvalidArgument("rl config: learning rates must be > 0");
  if (prompts_per_rollout < 1) throw InvalidArgument("rl config: prompts_per_rollout must be >= 1");
  if (epochs_per_rollout < 1) throw InvalidArgument("rl config: epochs_per_rollout must be >= 1");
  if (!(temperature > 0)) throw InvalidArgument("rl config: temperature must be > 0");
  if (max_tokens < 1) throw InvalidArgument("rl config: max_tokens must be >= 1");
  if (iterations < 0) throw InvalidArgument("rl config: iterations must be >= 0");
  if (!(ratio_cap > 1)) throw InvalidArgument("rl config: ratio cap must be > 1");
  if (!(max_grad_norm >= 0) || !std::isfinite(max_grad_norm))
    throw InvalidArgument("rl config: max_grad_norm must be finite and >= 0");
}

// ---------------------------------------------------------------------------
// SFT

PolicyParams sft_pretrain(const PolicyParams& init, std::span<const Task> tasks,
                          const SftConfig& config, std::vector<double>* epoch_loss) {
  if (tasks.empty()) throw InvalidArgument("sft_pretrain: no tasks");
  if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate > 0))
    throw InvalidArgument("sft_pretrain: bad hyperparameters");
  PolicyParams p = init;
  if (config.epochs == 0) return p;

  std::vector<Response> targets;
  for (const auto& t : tasks) targets.push_back(canonical_response(t));
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, 0x736674ULL));
  PolicyGradient grad(p);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      grad.clear();
      for (std::size_t k = start; k < end; ++k) {
        const auto i = order[k];
        const std::vector<double> coeff(targets[i].size(), w);
        grad.accumulate(p, tasks[i], targets[i], coeff);
      }
      if (!grad.all_finite())
        throw TrainingDiverged("sft_pretrain: non-finite gradient in epoch " + std::to_string(epoch));
      grad.apply(p, config.learning_rate);
    }
    double nll = 0.0;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      for (double lp : logprob(p, tasks[i], targets[i])) nll -= lp;
    nll /= static_cast<double>(tasks.size());
    if (!std::isfinite(nll))
      throw TrainingDiverged("sft_pretrain: non-finite loss after epoch " + std::to_string(epoch));
    if (epoch_loss) epoch_loss->push_back(nll);
  }
  return p;
}

// ---------------------------------------------------------------------------
// rollouts and shaping

RolloutBatch collect_rollouts(const PolicyParams& policy, const RewardSource& reward,
                              std::span<const Task> tasks, const RlConfig& config, Rng& rng,
                              Exec exec) {
  config.validate();
  if (tasks.size() < config.prompts_per_rollout)
    throw InvalidArgument("collect_rollouts: fewer tasks than prompts_per_rollout");

  std::vector<std::size_t> pick(tasks.size());
  std::iota(pick.begin(), pick.end(), 0);
  for (std::size_t i = 0; i < config.prompts_per_rollout; ++i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(pick.size()) - 1));
    std::swap(pick[i], pick[j]);
  }
  const std::uint64_t base = rng.next();

  RolloutBatch batch;
  batch.group_size = config.group_size;
  batch.groups.resize(config.prompts_per_rollout);
  parallel_for(batch.groups.size(), exec, [&](std::size_t g) {
    const Task& task = tasks[pick[g]];
    Rng local(derive_seed(base, task.id(), g));
    PromptGroup& group = batch.groups[g];
    group.task = task;
    for (std::size_t m = 0; m < config.group_size; ++m) {
      Trajectory t = sample_response(policy, task, config.temperature, config.max_tokens, local);
      group.raw_rewards.push_back(reward(task, t.response));
      group.old_logprobs.push_back(config.tempered_logprobs
                                       ? logprob(policy, task, t.response, config.temperature)
                                       : t.token_logprobs);
      group.trajectories.push_back(std::move(t));
    }
    group.shaped_rewards = group.raw_rewards;
  });
  return batch;
}

namespace {

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

Moments population_moments(std::span<const double> v) {
  Moments m;
  m.mean = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = v.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

constexpr double kVarianceGuard = 1e-8;

}  // namespace

std::vector<double> normalize_group(std::span<const double> raw) {
  if (raw.empty()) throw InvalidArgument("normalize_group: empty group");
  const Moments m = population_moments(raw);
  std::vector<double> out(raw.size(), 0.0);
  if (m.std < kVarianceGuard) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - m.mean) / m.std;
  return out;
}

std::vector<double> shrink(std::span<const double> rewards, double alpha) {
  if (!(alpha > 0 && alpha <= 1)) throw InvalidArgument("shrink: alpha must lie in (0, 1]");
  std::vector<double> out(rewards.begin(), rewards.end());
  for (double& r : out)
    if (r < 0) r *= alpha;
  return out;
}

double sampled_kl(const PolicyParams& policy, const PolicyParams& ref, const Task& task,
                  const Trajectory& trajectory) {
  const auto a = logprob(policy, task, trajectory.response);
  const auto b = logprob(ref, task, trajectory.response);
  double s = 0.0;
  for (std::size_t t = 0; t < trajectory.sampled_tokens(); ++t) s += a[t] - b[t];
  return s;
}

std::vector<double> apply_kl_penalty(std::span<const double> shaped_rewards,
                                     const PolicyParams& policy, const PolicyParams& ref,
                                     const Task& task, std::span<const Trajectory> trajectories,
                                     double beta) {
  if (!(beta >= 0)) throw InvalidArgument("apply_kl_penalty: beta must be >= 0");
  if (shaped_rewards.size() != trajectories.size())
    throw InvalidArgument("apply_kl_penalty: one reward per trajectory");
  std::vector<double> out(shaped_rewards.begin(), shaped_rewards.end());
  if (beta == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= beta * sampled_kl(policy, ref, task, trajectories[i]);
  return out;
}

void shape_rewards(RolloutBatch& batch, const PolicyParams& policy, const PolicyParams& ref,
                   const RlConfig& config, Exec exec) {
  const bool normalize = config.normalization_enabled();
  parallel_for(batch.groups.size(), exec, [&](std::size_t g) {
    PromptGroup& group = batch.groups[g];
    std::vector<double> r = group.raw_rewards;
    auto do_normalize = [&] {
      if (!normalize) return;
      group.variance_guard = population_moments(r).std < kVarianceGuard;
      r = normalize_group(r);
    };
    if (config.shaping_order == ShapingOrder::normalize_then_shrink) {
      do_normalize();
      r = shrink(r, config.shrink_alpha);
    } else {
      r = shrink(r, config.shrink_alpha);
      do_normalize();
    }
    group.kl_to_reference.clear();
    for (const auto& t : group.trajectories)
      group.kl_to_reference.push_back(sampled_kl(policy, ref, group.task, t));
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= config.kl_coefficient * group.kl_to_reference[i];
    group.shaped_rewards = std::move(r);
  });
}

void compute_advantages(RolloutBatch& batch, Algorithm algorithm, const ValueParams* value_params) {
  if (algorithm == Algorithm::ppo && value_params == nullptr)
    throw InvalidArgument("compute_advantages: PPO needs value parameters");
  for (PromptGroup& group : batch.groups) {
    group.advantages.clear();
    group.returns.clear();
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const Response& resp = group.trajectories[i].response;
      const double r = group.shaped_rewards[i];
      std::vector<double> adv(resp.size(), r);
      if (algorithm == Algorithm::ppo)
        for (std::size_t t = 0; t < resp.size(); ++t)
          adv[t] = r - value(*value_params, group.task, std::span(resp.tokens()).first(t));
      group.advantages.push_back(std::move(adv));
      group.returns.emplace_back(resp.size(), r);
    }
  }
}

double clipped_surrogate(double ratio, double advantage, double epsilon) {
  if (!(ratio > 0)) throw InvalidArgument("clipped_surrogate: ratio must be > 0");
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

// ---------------------------------------------------------------------------
// policy update

namespace {

struct TrajRef {
  std::size_t group;
  std::size_t index;
};

std::vector<TrajRef> flatten(const RolloutBatch& batch) {
  std::vector<TrajRef> out;
  for (std::size_t g = 0; g < batch.groups.size(); ++g)
    for (std::size_t i = 0; i < batch.groups[g].trajectories.size(); ++i) out.push_back({g, i});
  return out;
}

// Per-trajectory surrogate pieces at the current parameters.
struct TokenTerms {
  std::vector<double> coeff;  // d objective / d logprob_t, before the 1/n_batch factor
  double objective = 0.0;     // token-mean surrogate
  double ratio_sum = 0.0;
  std::size_t clipped = 0;
  std::size_t cap_hits = 0;
  double kl_old_new = 0.0;
};

TokenTerms token_terms(const PolicyParams& policy, const PromptGroup& group, std::size_t i,
                       const RlConfig& config) {
  const Trajectory& traj = group.trajectories[i];
  const double temp = config.tempered_logprobs ? config.temperature : 1.0;
  const std::vector<double> lp = logprob(policy, group.task, traj.response, temp);
  const auto& old = group.old_logprobs[i];
  const auto& adv = group.advantages[i];
  TokenTerms out;
  out.coeff.assign(lp.size(), 0.0);
  // a forced END is not an action of the policy and gets no ratio
  const std::size_t n = traj.sampled_tokens();
  if (n == 0) return out;
  const double inv_len = 1.0 / static_cast<double>(n);
  const double eps = config.clip_epsilon;
  for (std::size_t t = 0; t < n; ++t) {
    double ratio = std::exp(lp[t] - old[t]);
    bool capped = false;
    if (ratio > config.ratio_cap) {
      ratio = config.ratio_cap;
      capped = true;
      ++out.cap_hits;
    }
    const double a = adv[t];
    const double unclipped = ratio * a;
    const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * a;
    out.objective += std::min(unclipped, clipped) * inv_len;
    out.ratio_sum += ratio;
    out.kl_old_new += old[t] - lp[t];
    if (ratio < 1.0 - eps || ratio > 1.0 + eps) ++out.clipped;
    // gradient flows through the unclipped branch whenever the min selects it
    if (!capped && unclipped <= clipped) out.coeff[t] = a * ratio * inv_len;
  }
  return out;
}

std::uint64_t batch_fingerprint(const RolloutBatch& batch) {
  std::uint64_t h = 0;
  for (const auto& g : batch.groups)
    for (const auto& t : g.trajectories) h = mix64(h ^ t.context_features_digest);
  return h;
}

}  // namespace

double surrogate_objective(const PolicyParams& policy, const RolloutBatch& batch,
                           const RlConfig& config) {
  const auto refs = flatten(batch);
  if (refs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : refs) total += token_terms(policy, batch.groups[r.group], r.index, config).objective;
  return total / static_cast<double>(refs.size());
}

PolicyParams surrogate_gradient(const PolicyParams& policy, const RolloutBatch& batch,
                                const RlConfig& config) {
  const auto refs = flatten(batch);
  PolicyGradient grad(policy);
  const double temp = config.tempered_logprobs ? config.temperature : 1.0;
  for (const auto& r : refs) {
    const auto& group = batch.groups[r.group];
    TokenTerms tt = token_terms(policy, group, r.index, config);
    for (double& c : tt.coeff) c /= static_cast<double>(refs.size());
    grad.accumulate(policy, group.task, group.trajectories[r.index].response, tt.coeff, temp);
  }
  return grad.to_dense();
}

UpdateResult policy_update(const PolicyParams& policy, const ValueParams* value_params,
                           const RolloutBatch& batch, const RlConfig& config, Exec exec) {
  config.validate();
  const bool ppo = config.algorithm == Algorithm::ppo;
  if (ppo && value_params == nullptr) throw InvalidArgument("policy_update: PPO needs value parameters");
  for (const auto& g : batch.groups)
    if (g.advantages.size() != g.trajectories.size())
      throw InvalidArgument("policy_update: advantages not computed");

  UpdateResult res{policy, ppo ? std::optional<ValueParams>(*value_params) : std::nullopt, {}};
  std::vector<TrajRef> refs = flatten(batch);
  if (refs.empty()) return res;

  const double temp = config.tempered_logprobs ? config.temperature : 1.0;
  const std::size_t bsz = config.effective_gradient_batch();
  Rng rng(derive_seed(config.seed, 0x757064ULL, batch_fingerprint(batch)));
  PolicyGradient grad(policy);
  Vector value_grad;
  if (ppo) value_grad = Vector::Zero(res.value->weights.size());

  double ratio_sum = 0.0, kl_sum = 0.0, vloss_sum = 0.0;
  std::size_t tokens = 0, clipped = 0, cap_hits = 0, traj_seen = 0, grad_clips = 0;

  for (int epoch = 0; epoch < config.epochs_per_rollout; ++epoch) {
    rng.shuffle(refs);
    for (std::size_t start = 0; start < refs.size(); start += bsz) {
      const std::size_t end = std::min(refs.size(), start + bsz);
      const double inv_n = 1.0 / static_cast<double>(end - start);
      std::vector<TokenTerms> terms(end - start);
      std::vector<std::vector<std::pair<FeatureVector, double>>> vres(ppo ? end - start : 0);
      parallel_for(end - start, exec, [&](std::size_t k) {
        const auto& r = refs[start + k];
        const PromptGroup& group = batch.groups[r.group];
        terms[k] = token_terms(res.policy, group, r.index, config);
        if (ppo) {
          const auto& toks = group.trajectories[r.index].response.tokens();
          for (std::size_t t = 0; t < toks.size(); ++t) {
            FeatureVector phi = featurize_sparse(group.task.prompt_tokens, std::span(toks).first(t));
            const double resid = value(*res.value, phi) - group.returns[r.index][t];
            vres[k].emplace_back(std::move(phi), resid);
          }
        }
      });

      grad.clear();
      for (std::size_t k = 0; k < terms.size(); ++k) {
        const auto& r = refs[start + k];
        const PromptGroup& group = batch.groups[r.group];
        for (double& c : terms[k].coeff) c *= inv_n;
        grad.accumulate(res.policy, group.task, group.trajectories[r.index].response, terms[k].coeff, temp);
        ratio_sum += terms[k].ratio_sum;
        kl_sum += terms[k].kl_old_new;
        clipped += terms[k].clipped;
        cap_hits += terms[k].cap_hits;
        tokens += terms[k].coeff.size();
        ++traj_seen;
      }
      if (!grad.all_finite())
        throw TrainingDiverged("policy_update: non-finite policy gradient");
      double step = config.policy_lr;
      if (config.max_grad_norm > 0) {
        const double norm = grad.norm();
        if (norm > config.max_grad_norm) {
          step *= config.max_grad_norm / norm;
          ++grad_clips;
        }
      }
      grad.apply(res.policy, step);

      if (ppo) {
        double bias_grad = 0.0;
        std::vector<std::uint32_t> touched;
        for (const auto& per : vres) {
          if (per.empty()) continue;
          const double w = 2.0 * inv_n / static_cast<double>(per.size());
          for (const auto& [phi, resid] : per) {
            vloss_sum += resid * resid / static_cast<double>(per.size());
            for (std::size_t i = 0; i < phi.nnz(); ++i) {
              if (value_grad[phi.index[i]] == 0.0) touched.push_back(phi.index[i]);
              value_grad[phi.index[i]] += w * resid * phi.value[i];
            }
            bias_grad += w * resid;
          }
        }
        for (auto i : touched) {
          res.value->weights[i] -= config.value_lr * value_grad[i];
          value_grad[i] = 0.0;
        }
        res.value->bias -= config.value_lr * bias_grad;
        if (!res.value->all_finite()) throw TrainingDiverged("policy_update: non-finite value head");
      }
    }
  }

  res.stats.mean_ratio = tokens ? ratio_sum / static_cast<double>(tokens) : 1.0;
  res.stats.clip_fraction = tokens ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;
  res.stats.mean_kl = traj_seen ? kl_sum / static_cast<double>(traj_seen) : 0.0;
  res.stats.value_loss = traj_seen ? vloss_sum / static_cast<double>(traj_seen) : 0.0;
  res.stats.ratio_cap_hits = cap_hits;
  res.stats.grad_clips = grad_clips;
  double reward_sum = 0.0;
  for (const auto& g : batch.groups)
    for (double r : g.raw_rewards) reward_sum += r;
  res.stats.mean_reward = reward_sum / static_cast<double>(batch.num_trajectories());
  return res;
}

// ---------------------------------------------------------------------------

TrainResult train(const PolicyParams& sft, const RewardSource& reward, std::span<const Task> tasks,
                  const RlConfig& config, const IterationHook& hook, Exec exec) {
  config.validate();
  TrainResult out{sft, std::nullopt, {}};
  if (config.algorithm == Algorithm::ppo) out.value = ValueParams::zeros();
  Rng rng(derive_seed(config.seed, 0x747261696eULL));

  for (int it = 1; it <= config.iterations; ++it) {
    RolloutBatch batch = collect_rollouts(out.policy, reward, tasks, config, rng, exec);
    shape_rewards(batch, out.policy, sft, config, exec);
    compute_advantages(batch, config.algorithm, out.value ? &*out.value : nullptr);
    UpdateResult upd = policy_update(out.policy, out.value ? &*out.value : nullptr, batch, config, exec);

    TrainLogRecord rec;
    rec.iteration = it;
    double raw = 0, shaped = 0, kl = 0, len = 0;
    for (const auto& g : batch.groups)
      for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
        raw += g.raw_rewards[i];
        shaped += g.shaped_rewards[i];
        kl += g.kl_to_reference[i];
        len += static_cast<double>(g.trajectories[i].response.size());
      }
    const double n = static_cast<double>(batch.num_trajectories());
    rec.mean_raw_reward = raw / n;
    rec.mean_shaped_reward = shaped / n;
    rec.mean_kl = kl / n;
    rec.mean_length = len / n;
    rec.clip_fraction = upd.stats.clip_fraction;
    rec.mean_ratio = upd.stats.mean_ratio;
    rec.ratio_cap_hits = upd.stats.ratio_cap_hits;
    out.log.push_back(rec);

    out.policy = std::move(upd.policy);
    out.value = std::move(upd.value);
    if (hook) hook(it, out.policy);
  }
  return out;
}

}  // namespace rlhf
