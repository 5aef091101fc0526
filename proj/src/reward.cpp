#include "rlhf/reward.hpp"

#include <algorithm>
#include <cmath>

#include "rlhf/parallel.hpp"

namespace rlhf {
namespace {

void check_shapes(const RewardModelParams& p) {
  const auto h = static_cast<Eigen::Index>(p.hidden_size);
  if (p.hidden_size < 1 || p.hidden_weights.rows() != static_cast<Eigen::Index>(feature_dim()) ||
      p.hidden_weights.cols() != h || p.hidden_bias.size() != h || p.output_weights.size() != h)
    throw InvalidArgument("reward model parameters have inconsistent shapes");
}

Vector hidden_activation(const RewardModelParams& p, const FeatureVector& phi) {
  Vector a = p.hidden_bias;
  for (std::size_t i = 0; i < phi.nnz(); ++i)
    a += phi.value[i] * p.hidden_weights.row(phi.index[i]).transpose();
  return a.array().tanh().matrix();
}

// Row-sparse gradient in the parameter layout.
class RewardGradient {
 public:
  explicit RewardGradient(const RewardModelParams& p)
      : hidden_(RowMatrix::Zero(p.hidden_weights.rows(), p.hidden_weights.cols())),
        hidden_bias_(Vector::Zero(p.hidden_size)),
        output_(Vector::Zero(p.hidden_size)),
        is_touched_(static_cast<std::size_t>(p.hidden_weights.rows()), 0) {}

  // dL/dscore = g for a score computed from phi with hidden activation z
  void backward(const RewardModelParams& p, const FeatureVector& phi, const Vector& z, double g) {
    if (g == 0.0) return;
    output_ += g * z;
    output_bias_ += g;
    const Vector da = g * p.output_weights.cwiseProduct((1.0 - z.array().square()).matrix());
    hidden_bias_ += da;
    for (std::size_t i = 0; i < phi.nnz(); ++i) {
      const std::uint32_t r = phi.index[i];
      if (!is_touched_[r]) {
        is_touched_[r] = 1;
        touched_.push_back(r);
      }
      hidden_.row(r) += phi.value[i] * da.transpose();
    }
  }

  bool all_finite() const {
    if (!hidden_bias_.allFinite() || !output_.allFinite() || !std::isfinite(output_bias_))
      return false;
    for (auto r : touched_)
      if (!hidden_.row(r).allFinite()) return false;
    return true;
  }

  void clear() {
    for (auto r : touched_) {
      hidden_.row(r).setZero();
      is_touched_[r] = 0;
    }
    touched_.clear();
    hidden_bias_.setZero();
    output_.setZero();
    output_bias_ = 0.0;
  }

  void apply(RewardModelParams& p, double step) const {
    for (auto r : touched_) p.hidden_weights.row(r) += step * hidden_.row(r);
    p.hidden_bias += step * hidden_bias_;
    p.output_weights += step * output_;
    p.output_bias += step * output_bias_;
  }

  RewardModelParams to_dense(int h) const {
    RewardModelParams g;
    g.hidden_size = h;
    g.hidden_weights = hidden_;
    g.hidden_bias = hidden_bias_;
    g.output_weights = output_;
    g.output_bias = output_bias_;
    return g;
  }

 private:
  RowMatrix hidden_;
  Vector hidden_bias_;
  Vector output_;
  double output_bias_ = 0.0;
  std::vector<std::uint32_t> touched_;
  std::vector<char> is_touched_;
};

// Featurized training data; every score evaluation is one "item".
struct Prepared {
  std::vector<FeatureVector> binary;
  std::vector<double> binary_label;
  std::vector<std::pair<FeatureVector, FeatureVector>> pref;
  std::vector<std::vector<FeatureVector>> steps;
  std::vector<std::vector<double>> step_label;
};

FeatureVector full_features(const Task& task, const Response& r) {
  return featurize_sparse(task.prompt_tokens, r.tokens());
}

Prepared prepare(std::span<const PreferencePair> pref, std::span<const BinaryExample> binary,
                 std::span<const StepLabeledExample> steps) {
  Prepared d;
  for (const auto& b : binary) {
    if (b.label != 0 && b.label != 1) throw InvalidArgument("binary label must be 0 or 1");
    d.binary.push_back(full_features(b.task, b.response));
    d.binary_label.push_back(b.label);
  }
  for (const auto& p : pref)
    d.pref.emplace_back(full_features(p.task, p.chosen), full_features(p.task, p.rejected));
  for (const auto& s : steps) {
    if (s.step_labels.size() != s.response.num_steps())
      throw InvalidArgument("step labels must match the number of steps");
    std::vector<FeatureVector> per;
    for (std::size_t i = 0; i < s.response.num_steps(); ++i)
      per.push_back(featurize_sparse(s.task.prompt_tokens, s.response.prefix_through_step(i)));
    d.steps.push_back(std::move(per));
    d.step_label.push_back(s.step_labels);
  }
  return d;
}

// Index selection of a minibatch (or the whole set).
struct Selection {
  std::vector<std::size_t> binary, pref, steps;
};

Selection select_all(const Prepared& d) {
  Selection s;
  for (std::size_t i = 0; i < d.binary.size(); ++i) s.binary.push_back(i);
  for (std::size_t i = 0; i < d.pref.size(); ++i) s.pref.push_back(i);
  for (std::size_t i = 0; i < d.steps.size(); ++i) s.steps.push_back(i);
  return s;
}

struct Item {
  const FeatureVector* phi;
  Vector z;
  double score = 0.0;
};

// Objective and (optionally) gradient over a selection. Forward passes run in
// parallel; accumulation is serial in item order, so the result does not
// depend on `exec`.
double evaluate(const RewardModelParams& p, const Prepared& d, const Selection& sel,
                RewardGradient* grad, Exec exec) {
  std::vector<Item> items;
  for (auto i : sel.binary) items.push_back({&d.binary[i], {}, 0.0});
  for (auto i : sel.pref) {
    items.push_back({&d.pref[i].first, {}, 0.0});
    items.push_back({&d.pref[i].second, {}, 0.0});
  }
  std::size_t n_steps = 0;
  for (auto i : sel.steps)
    for (const auto& phi : d.steps[i]) {
      items.push_back({&phi, {}, 0.0});
      ++n_steps;
    }

  parallel_for(items.size(), exec, [&](std::size_t k) {
    items[k].z = hidden_activation(p, *items[k].phi);
    items[k].score = p.output_weights.dot(items[k].z) + p.output_bias;
  });

  std::vector<double> dscore(items.size(), 0.0);
  double binary_sum = 0.0, pref_sum = 0.0, step_sum = 0.0;
  std::size_t k = 0;
  const double nb = static_cast<double>(sel.binary.size());
  const double np = static_cast<double>(sel.pref.size());
  for (auto i : sel.binary) {
    const double s = items[k].score, y = d.binary_label[i];
    binary_sum += binary_loss_from_score(s, y);
    dscore[k++] = (sigmoid(s) - y) / nb;
  }
  for (std::size_t j = 0; j < sel.pref.size(); ++j) {
    const double gap = items[k].score - items[k + 1].score;
    pref_sum += preference_loss_from_gap(gap);
    const double g = (sigmoid(gap) - 1.0) / np;
    dscore[k] = g;
    dscore[k + 1] = -g;
    k += 2;
  }
  for (auto i : sel.steps)
    for (double y : d.step_label[i]) {
      const double s = items[k].score;
      step_sum += binary_loss_from_score(s, y);
      dscore[k++] = (sigmoid(s) - y) / static_cast<double>(n_steps);
    }

  if (grad)
    for (std::size_t j = 0; j < items.size(); ++j) grad->backward(p, *items[j].phi, items[j].z, dscore[j]);

  double loss = 0.0;
  if (nb > 0) loss += binary_sum / nb;
  if (np > 0) loss += pref_sum / np;
  if (n_steps > 0) loss += step_sum / static_cast<double>(n_steps);
  return loss;
}

}  // namespace

// ---------------------------------------------------------------------------

RewardModelParams RewardModelParams::zeros(int hidden_size) {
  if (hidden_size < 1) throw InvalidArgument("reward model hidden size must be >= 1");
  RewardModelParams p;
  p.hidden_size = hidden_size;
  p.hidden_weights = RowMatrix::Zero(feature_dim(), hidden_size);
  p.hidden_bias = Vector::Zero(hidden_size);
  p.output_weights = Vector::Zero(hidden_size);
  return p;
}

RewardModelParams RewardModelParams::init(int hidden_size, std::uint64_t seed, double scale) {
  RewardModelParams p = zeros(hidden_size);
  Rng rng(derive_seed(seed, 0x726577617264ULL));
  for (Eigen::Index i = 0; i < p.hidden_weights.size(); ++i)
    p.hidden_weights.data()[i] = scale * rng.normal();
  for (Eigen::Index i = 0; i < p.output_weights.size(); ++i)
    p.output_weights[i] = scale * rng.normal();
  return p;
}

bool RewardModelParams::all_finite() const {
  return hidden_weights.allFinite() && hidden_bias.allFinite() && output_weights.allFinite() &&
         std::isfinite(output_bias);
}

std::uint64_t RewardModelParams::checksum() const {
  std::uint64_t h = checksum_bytes(&hidden_size, sizeof(hidden_size));
  h = checksum_doubles({hidden_weights.data(), static_cast<std::size_t>(hidden_weights.size())}, h);
  h = checksum_doubles({hidden_bias.data(), static_cast<std::size_t>(hidden_bias.size())}, h);
  h = checksum_doubles({output_weights.data(), static_cast<std::size_t>(output_weights.size())}, h);
  return checksum_bytes(&output_bias, sizeof(output_bias), h);
}

double score(const RewardModelParams& params, const FeatureVector& phi) {
  check_shapes(params);
  return params.output_weights.dot(hidden_activation(params, phi)) + params.output_bias;
}

double score(const RewardModelParams& params, const Task& task, const Response& response) {
  return score(params, full_features(task, response));
}

std::vector<double> score_steps(const RewardModelParams& params, const Task& task,
                                const Response& response) {
  if (response.num_steps() == 0) throw InvalidArgument("score_steps: response has no steps");
  std::vector<double> out;
  for (std::size_t i = 0; i < response.num_steps(); ++i)
    out.push_back(score(params, featurize_sparse(task.prompt_tokens, response.prefix_through_step(i))));
  return out;
}

double preference_loss(const RewardModelParams& params, const PreferencePair& pair) {
  return preference_loss_from_gap(score(params, pair.task, pair.chosen) -
                                  score(params, pair.task, pair.rejected));
}

double binary_loss(const RewardModelParams& params, const BinaryExample& example) {
  if (example.label != 0 && example.label != 1) throw InvalidArgument("binary label must be 0 or 1");
  return binary_loss_from_score(score(params, example.task, example.response), example.label);
}

double multitask_loss(const RewardModelParams& params, std::span<const PreferencePair> pref_batch,
                      std::span<const BinaryExample> binary_batch) {
  if (pref_batch.empty() && binary_batch.empty())
    throw InvalidArgument("multitask_loss: both batches are empty");
  double b = 0.0, p = 0.0;
  for (const auto& e : binary_batch) b += binary_loss(params, e);
  for (const auto& e : pref_batch) p += preference_loss(params, e);
  double loss = 0.0;
  if (!binary_batch.empty()) loss += b / static_cast<double>(binary_batch.size());
  if (!pref_batch.empty()) loss += p / static_cast<double>(pref_batch.size());
  return loss;
}

double prm_loss(const RewardModelParams& params, std::span<const StepLabeledExample> examples) {
  if (examples.empty()) throw InvalidArgument("prm_loss: no examples");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : examples) {
    if (e.step_labels.size() != e.response.num_steps())
      throw InvalidArgument("step labels must match the number of steps");
    const auto scores = score_steps(params, e.task, e.response);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      sum += binary_loss_from_score(scores[i], e.step_labels[i]);
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

double reward_objective(const RewardModelParams& params, std::span<const PreferencePair> pref,
                        std::span<const BinaryExample> binary,
                        std::span<const StepLabeledExample> steps) {
  if (pref.empty() && binary.empty() && steps.empty())
    throw InvalidArgument("reward objective: no training data");
  double loss = 0.0;
  if (!pref.empty() || !binary.empty()) loss += multitask_loss(params, pref, binary);
  if (!steps.empty()) loss += prm_loss(params, steps);
  return loss;
}

RewardModelParams reward_objective_gradient(const RewardModelParams& params,
                                            std::span<const PreferencePair> pref,
                                            std::span<const BinaryExample> binary,
                                            std::span<const StepLabeledExample> steps, Exec exec) {
  check_shapes(params);
  if (pref.empty() && binary.empty() && steps.empty())
    throw InvalidArgument("reward objective: no training data");
  const Prepared d = prepare(pref, binary, steps);
  RewardGradient g(params);
  evaluate(params, d, select_all(d), &g, exec);
  return g.to_dense(params.hidden_size);
}

RewardModelParams train_reward_model(const RewardModelParams& init,
                                     std::span<const PreferencePair> pref_data,
                                     std::span<const BinaryExample> binary_data,
                                     std::span<const StepLabeledExample> step_data,
                                     const RewardTrainConfig& config, RewardTrainLog* log,
                                     Exec exec) {
  check_shapes(init);
  if (pref_data.empty() && binary_data.empty() && step_data.empty())
    throw InvalidArgument("train_reward_model: no training data");
  if (config.batch_size < 1 || config.epochs < 0 || !(config.learning_rate > 0) || !std::isfinite(config.learning_rate))
    throw InvalidArgument("train_reward_model: bad hyperparameters");

  const Prepared d = prepare(pref_data, binary_data, step_data);
  const Selection all = select_all(d);
  RewardModelParams p = init;
  RewardGradient grad(p);
  Rng rng(derive_seed(config.seed, 0x726d7472ULL));

  auto full_loss = [&] { return evaluate(p, d, all, nullptr, exec); };
  if (log) log->initial_loss = full_loss();

  Selection order = all;
  const std::size_t b = config.batch_size;
  auto n_batches = [b](std::size_t n) { return (n + b - 1) / b; };
  const std::size_t steps_per_epoch = std::max(
      {n_batches(order.binary.size()), n_batches(order.pref.size()), n_batches(order.steps.size())});

  auto slice = [b](const std::vector<std::size_t>& v, std::size_t step) {
    std::vector<std::size_t> out;
    const std::size_t take = std::min(b, v.size());
    for (std::size_t i = 0; i < take; ++i) out.push_back(v[(step * b + i) % v.size()]);
    return out;
  };

  std::size_t global_step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.binary);
    rng.shuffle(order.pref);
    rng.shuffle(order.steps);
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
      const Selection batch{slice(order.binary, s), slice(order.pref, s), slice(order.steps, s)};
      grad.clear();
      const double loss = evaluate(p, d, batch, &grad, exec);
      if (!std::isfinite(loss) || !grad.all_finite())
        throw TrainingDiverged("reward model training diverged at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(global_step));
      grad.apply(p, -config.learning_rate);
    }
    const double loss = full_loss();
    if (!std::isfinite(loss) || !p.all_finite())
      throw TrainingDiverged("reward model training diverged after epoch " + std::to_string(epoch));
    if (log) log->epoch_loss.push_back(loss);
  }
  return p;
}

double RewardSource::operator()(const Task& task, const Response& response) const {
  if (rm_ == nullptr) return verify(task, response) ? 1.0 : 0.0;
  return score(*rm_, task, response);
}

RmDataset build_rm_dataset(std::span<const Task> tasks, const PolicyParams& sampler,
                           std::size_t n_solutions_per_prompt, Rng& rng,
                           const RmDataConfig& config, Exec exec) {
  if (n_solutions_per_prompt < 1) throw InvalidArgument("build_rm_dataset: need >= 1 solution");
  const std::uint64_t base = rng.next();
  struct PerTask {
    std::vector<BinaryExample> binary;
    std::vector<PreferencePair> pref;
  };
  std::vector<PerTask> per(tasks.size());
  parallel_for(tasks.size(), exec, [&](std::size_t i) {
    const Task& task = tasks[i];
    Rng local(derive_seed(base, task.id(), i));
    std::vector<std::size_t> good, bad;
    for (std::size_t j = 0; j < n_solutions_per_prompt; ++j) {
      Trajectory t = sample_response(sampler, task, config.temperature, config.max_tokens, local);
      const int label = verify(task, t.response) ? 1 : 0;
      (label ? good : bad).push_back(j);
      per[i].binary.push_back({task, std::move(t.response), label});
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (auto g : good)
      for (auto r : bad) pairs.emplace_back(g, r);
    if (pairs.size() > config.pair_cap) {
      local.shuffle(pairs);
      pairs.resize(config.pair_cap);
      std::sort(pairs.begin(), pairs.end());
    }
    for (auto [g, r] : pairs)
      per[i].pref.push_back({task, per[i].binary[g].response, per[i].binary[r].response});
  });
  RmDataset out;
  for (auto& p : per) {
    std::move(p.binary.begin(), p.binary.end(), std::back_inserter(out.binary));
    std::move(p.pref.begin(), p.pref.end(), std::back_inserter(out.pref));
  }
  return out;
}

}  // namespace rlhf
