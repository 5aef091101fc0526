#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "rlhf/eval.hpp"
#include "rlhf/rl.hpp"

using namespace rlhf;

namespace {

constexpr int P = tok::kPlus, M = tok::kMinus, EQ = tok::kEq, S = tok::kSep, E = tok::kEnd;

Task small_task(std::uint64_t seed = 11) { return oracle::make_task(seed, {3, P, 2, M, 1, EQ}); }

PolicyParams random_policy(int capacity, std::uint64_t seed, double scale = 0.2) {
  PolicyParams p = PolicyParams::init(capacity, seed, 0.5);
  Rng rng(seed + 1);
  for (Eigen::Index i = 0; i < p.context_weights.size(); ++i) p.context_weights.data()[i] = scale * rng.normal();
  return p;
}

const std::vector<Task>& pool() {
  static const std::vector<Task> tasks = generate_dataset(64, {1, 2}, 3);
  return tasks;
}

}  // namespace

TEST_CASE("normalize_group") {
  const auto z = normalize_group(std::vector<double>{1, 2, 3});
  CHECK(std::abs(z[0] + 1.224744871391589) <= 1e-9);
  CHECK(z[1] == 0.0);
  CHECK(std::abs(z[2] - 1.224744871391589) <= 1e-9);
  CHECK(normalize_group(std::vector<double>{0.3, 0.3, 0.3}) == std::vector<double>{0, 0, 0});
  CHECK(normalize_group(std::vector<double>{0, 1}) == std::vector<double>{-1, 1});
  CHECK(normalize_group(std::vector<double>{7}) == std::vector<double>{0});
  CHECK_THROWS_AS(normalize_group(std::vector<double>{}), InvalidArgument);
}

TEST_CASE("shrink") {
  CHECK(shrink(std::vector<double>{-2, 1}, 0.5) == std::vector<double>{-1, 1});
  const std::vector<double> x{-3, 0.5, 0, 2};
  CHECK(shrink(x, 1.0) == x);
  const auto s = shrink(std::vector<double>{-1, 0, 2}, 0.1);
  CHECK(s[0] == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(s[1] == 0.0);
  CHECK(s[2] == 2.0);
  CHECK_THROWS_AS(shrink(x, 0.0), InvalidArgument);
}

TEST_CASE("clipped_surrogate") {
  CHECK(clipped_surrogate(1.0, 1.0, 0.2) == 1.0);
  CHECK(clipped_surrogate(2.0, 1.0, 0.2) == 1.2);
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == -0.8);
  CHECK(clipped_surrogate(0.5, 1.0, 0.2) == 0.5);
  CHECK(clipped_surrogate(2.0, -1.0, 0.2) == -2.0);
}

TEST_CASE("kl penalty") {
  const Task t = small_task();
  const PolicyParams a = random_policy(4, 1), b = random_policy(4, 2);
  std::vector<Trajectory> trajs;
  Rng rng(3);
  for (int i = 0; i < 3; ++i) trajs.push_back(sample_response(a, t, 1.0, 8, rng));
  const std::vector<double> r{1.0, -0.5, 0.25};
  CHECK(apply_kl_penalty(r, a, b, t, trajs, 0.0) == r);
  CHECK(apply_kl_penalty(r, a, a, t, trajs, 0.3) == r);
  const auto pen = apply_kl_penalty(r, a, b, t, trajs, 0.3);
  int forced = 0;
  for (int i = 0; i < 3; ++i) {
    const TokenSeq& y = trajs[i].response.tokens();
    CHECK(trajs[i].forced_end == (y.size() == 8 && y.back() == E));
    forced += trajs[i].forced_end;
    // a forced END is not sampled, so it does not count
    const TokenSeq sampled(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(trajs[i].sampled_tokens()));
    const double kl = oracle::sequence_logprob(a, t, sampled) - oracle::sequence_logprob(b, t, sampled);
    CHECK(pen[i] == doctest::Approx(r[i] - 0.3 * kl).epsilon(1e-12));
  }
  CHECK(forced > 0);
}

TEST_CASE("collect_rollouts") {
  const PolicyParams p = random_policy(4, 5);
  RlConfig cfg;
  cfg.group_size = 1;
  cfg.prompts_per_rollout = 8;
  cfg.max_tokens = 8;
  Rng a(1), b(1), c(1);
  const auto ba = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, a);
  CHECK(ba.groups.size() == 8);
  for (const auto& g : ba.groups) {
    CHECK(g.trajectories.size() == 1);
    for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
      CHECK((g.raw_rewards[i] == 0.0 || g.raw_rewards[i] == 1.0));
      CHECK(g.raw_rewards[i] == (verify(g.task, g.trajectories[i].response) ? 1.0 : 0.0));
    }
  }
  cfg.group_size = 4;
  const auto par = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, b, Exec::parallel);
  const auto ser = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, c, Exec::serial);
  CHECK(par.num_trajectories() == 32);
  for (std::size_t g = 0; g < par.groups.size(); ++g) {
    CHECK(par.groups[g].task == ser.groups[g].task);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(par.groups[g].trajectories[i].response == ser.groups[g].trajectories[i].response);
      CHECK(par.groups[g].old_logprobs[i] == ser.groups[g].old_logprobs[i]);
    }
  }
}

TEST_CASE("compute_advantages") {
  const Task t = small_task();
  RolloutBatch batch;
  batch.group_size = 2;
  PromptGroup g;
  g.task = t;
  g.trajectories = {Trajectory{t.id(), Response(TokenSeq{5, S, 3, E}), {}, 0},
                    Trajectory{t.id(), Response(TokenSeq{4, E}), {}, 0}};
  g.raw_rewards = {0, 1};
  g.shaped_rewards = {-1, 1};
  batch.groups.push_back(g);

  compute_advantages(batch, Algorithm::grpo, nullptr);
  CHECK(batch.groups[0].advantages[0] == std::vector<double>(4, -1.0));
  CHECK(batch.groups[0].advantages[1] == std::vector<double>(2, 1.0));

  const ValueParams zero = ValueParams::zeros();
  compute_advantages(batch, Algorithm::ppo, &zero);
  CHECK(batch.groups[0].advantages[0] == std::vector<double>(4, -1.0));
  CHECK(batch.groups[0].returns[1] == std::vector<double>(2, 1.0));

  // a value function equal to the reward everywhere leaves no advantage
  ValueParams perfect = ValueParams::zeros();
  batch.groups[0].shaped_rewards = {0.5, 0.5};
  perfect.bias = 0.5;
  compute_advantages(batch, Algorithm::ppo, &perfect);
  for (const auto& a : batch.groups[0].advantages)
    for (double x : a) CHECK(x == 0.0);
  CHECK_THROWS_AS(compute_advantages(batch, Algorithm::ppo, nullptr), InvalidArgument);
}

TEST_CASE("shape_rewards applies normalization, shrinking and KL in order") {
  const PolicyParams p = random_policy(4, 6);
  RlConfig cfg;
  cfg.group_size = 4;
  cfg.prompts_per_rollout = 4;
  cfg.max_tokens = 8;
  cfg.kl_coefficient = 0.0;
  Rng rng(2);
  RolloutBatch batch = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, rng);
  batch.groups[0].raw_rewards = {0, 1, 1, 0};
  batch.groups[1].raw_rewards = {1, 1, 1, 1};
  RolloutBatch b2 = batch;
  shape_rewards(batch, p, p, cfg);
  CHECK(batch.groups[0].shaped_rewards == shrink(normalize_group(batch.groups[0].raw_rewards), 0.5));
  CHECK(batch.groups[1].shaped_rewards == std::vector<double>{0, 0, 0, 0});

  cfg.shaping_order = ShapingOrder::shrink_then_normalize;
  shape_rewards(b2, p, p, cfg);
  CHECK(b2.groups[0].shaped_rewards == normalize_group(shrink(b2.groups[0].raw_rewards, 0.5)));

  // M = 1 leaves normalization off by default
  RlConfig one = cfg;
  one.group_size = 1;
  CHECK_FALSE(one.normalization_enabled());
  one.normalize = true;
  CHECK(one.normalization_enabled());
}

TEST_CASE("surrogate gradient at the sampling policy matches central differences") {
  const PolicyParams p = random_policy(6, 7);
  RlConfig cfg;
  cfg.group_size = 3;
  cfg.prompts_per_rollout = 1;
  cfg.max_tokens = 8;
  Rng rng(11);
  RolloutBatch batch = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, rng);
  Rng adv(5);
  batch.groups[0].advantages.clear();
  for (const auto& tr : batch.groups[0].trajectories) {
    std::vector<double> a(tr.response.size());
    for (double& x : a) x = adv.normal();
    batch.groups[0].advantages.push_back(a);
  }
  REQUIRE(batch.num_trajectories() == 3);
  const PolicyParams g = surrogate_gradient(p, batch, cfg);
  CHECK(surrogate_objective(p, batch, cfg) != 0.0);

  std::vector<std::pair<int, Eigen::Index>> coords;
  for (Eigen::Index i = 0; i < g.context_weights.size(); ++i)
    if (std::abs(g.context_weights.data()[i]) > 1e-8) coords.push_back({0, i});
  for (Eigen::Index i = 0; i < g.embedding.size(); ++i)
    if (std::abs(g.embedding.data()[i]) > 1e-8) coords.push_back({1, i});
  REQUIRE(coords.size() >= 50);
  Rng pick(1);
  pick.shuffle(coords);
  coords.resize(50);
  double worst = 0;
  for (auto [block, i] : coords) {
    const double analytic = (block ? g.embedding : g.context_weights).data()[i];
    const double numeric = oracle::central_difference(
        [&](double d) {
          PolicyParams q = p;
          (block ? q.embedding : q.context_weights).data()[i] += d;
          return surrogate_objective(q, batch, cfg);
        },
        1e-5);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("policy_update") {
  const PolicyParams p = random_policy(4, 8);
  RlConfig cfg;
  cfg.algorithm = Algorithm::grpo;
  cfg.group_size = 1;
  cfg.prompts_per_rollout = 1;
  cfg.max_tokens = 8;
  cfg.policy_lr = 0.5;
  Rng rng(4);
  RolloutBatch batch = collect_rollouts(p, RewardSource::oracle(), pool(), cfg, rng);
  auto& g = batch.groups[0];
  g.shaped_rewards = {1.0};
  compute_advantages(batch, Algorithm::grpo, nullptr);
  const UpdateResult up = policy_update(p, nullptr, batch, cfg);
  const auto& y = g.trajectories[0].response;
  const auto before = logprob(p, g.task, y), after = logprob(up.policy, g.task, y);
  CHECK(std::accumulate(after.begin(), after.end(), 0.0) > std::accumulate(before.begin(), before.end(), 0.0));

  // one minibatch with a tiny norm limit: the step has norm lr * limit
  cfg.max_grad_norm = 1e-3;
  const UpdateResult small = policy_update(p, nullptr, batch, cfg);
  CHECK(small.stats.grad_clips == 1);
  const double moved = std::sqrt((small.policy.context_weights - p.context_weights).squaredNorm() +
                                 (small.policy.embedding - p.embedding).squaredNorm());
  CHECK(moved == doctest::Approx(cfg.policy_lr * 1e-3).epsilon(1e-9));
  cfg.max_grad_norm = 0.25;

  g.shaped_rewards = {0.0};
  compute_advantages(batch, Algorithm::grpo, nullptr);
  CHECK(policy_update(p, nullptr, batch, cfg).policy == p);
}

TEST_CASE("a constant reward model leaves the policy bit-identical") {
  const PolicyParams sft = random_policy(4, 9);
  const RewardModelParams flat = RewardModelParams::zeros(4);
  for (Algorithm alg : {Algorithm::ppo, Algorithm::grpo})
    for (std::size_t m : {std::size_t{1}, std::size_t{4}}) {
      RlConfig cfg;
      cfg.algorithm = alg;
      cfg.group_size = m;
      cfg.prompts_per_rollout = 8;
      cfg.max_tokens = 8;
      cfg.iterations = 1;
      const TrainResult r = train(sft, RewardSource::model(flat), pool(), cfg);
      CHECK(r.policy == sft);
      if (r.value) CHECK(*r.value == ValueParams::zeros());
    }
}

TEST_CASE("train") {
  const PolicyParams sft = random_policy(4, 10);
  RlConfig cfg;
  cfg.group_size = 2;
  cfg.prompts_per_rollout = 8;
  cfg.max_tokens = 8;
  cfg.iterations = 0;
  CHECK(train(sft, RewardSource::oracle(), pool(), cfg).policy == sft);

  cfg.iterations = 3;
  std::vector<int> seen;
  const TrainResult a = train(sft, RewardSource::oracle(), pool(), cfg, [&](int it, const PolicyParams&) { seen.push_back(it); });
  CHECK(a.log.size() == 3);
  CHECK(seen == std::vector<int>{1, 2, 3});
  CHECK(a.value.has_value());
  const TrainResult b = train(sft, RewardSource::oracle(), pool(), cfg, {}, Exec::serial);
  CHECK(a.policy == b.policy);
  CHECK(a.log.back().mean_kl == b.log.back().mean_kl);
  cfg.algorithm = Algorithm::grpo;
  CHECK_FALSE(train(sft, RewardSource::oracle(), pool(), cfg).value.has_value());
}

TEST_CASE("sft_pretrain") {
  const auto tasks = generate_dataset(300, {1, 1}, 8);
  const std::span<const Task> train_set(tasks.data(), 200), held(tasks.data() + 200, 100);
  const PolicyParams init = PolicyParams::init(8, 1);
  SftConfig cfg;
  cfg.epochs = 0;
  CHECK(sft_pretrain(init, train_set, cfg) == init);
  cfg.epochs = 3;
  std::vector<double> losses;
  const PolicyParams trained = sft_pretrain(init, train_set, cfg, &losses);
  REQUIRE(losses.size() == 3);
  CHECK(losses.back() < losses.front());
  const double before = greedy_accuracy(init, held).value;
  const double after = greedy_accuracy(trained, held).value;
  MESSAGE("difficulty-1 held-out greedy accuracy " << before << " -> " << after);
  CHECK(after > before);
}

TEST_CASE("oracle-reward training raises reward on average over seeds") {
  // desk defaults on a shortened run
  const auto tasks = generate_dataset(256 + 512, {1, 3}, 99);
  double first = 0, last = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SftConfig sc;
    sc.seed = seed;
    const PolicyParams sft = sft_pretrain(PolicyParams::init(16, seed), std::span(tasks).first(256), sc);
    RlConfig cfg;
    cfg.iterations = 12;
    cfg.seed = seed;
    const auto r = train(sft, RewardSource::oracle(), std::span(tasks).subspan(256), cfg);
    first += (r.log[0].mean_raw_reward + r.log[1].mean_raw_reward) / 2;
    last += (r.log[10].mean_raw_reward + r.log[11].mean_raw_reward) / 2;
  }
  CHECK(last > first);
}
