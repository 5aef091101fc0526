#include "rlhf/exp.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "rlhf/io.hpp"
#include "rlhf/parallel.hpp"

namespace rlhf {
namespace {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// names

constexpr std::pair<ExperimentKind, const char*> kKindNames[] = {
    {ExperimentKind::sampling_scaling, "sampling_scaling"},
    {ExperimentKind::rm_size_scaling, "rm_size_scaling"},
    {ExperimentKind::policy_size_scaling, "policy_size_scaling"},
    {ExperimentKind::data_scaling, "data_scaling"},
    {ExperimentKind::rm_diversity, "rm_diversity"},
    {ExperimentKind::prm_vs_orm, "prm_vs_orm"},
    {ExperimentKind::ppo_vs_grpo, "ppo_vs_grpo"},
    {ExperimentKind::data_volume_policy, "data_volume_policy"},
};

std::string label_mode_name(LabelMode m) { return m == LabelMode::soft ? "soft" : "hard"; }

LabelMode label_mode_from(const std::string& s) {
  if (s == "soft") return LabelMode::soft;
  if (s == "hard") return LabelMode::hard;
  throw InvalidArgument("unknown label mode '" + s + "'");
}

std::string shaping_order_name(ShapingOrder o) {
  return o == ShapingOrder::normalize_then_shrink ? "normalize_then_shrink" : "shrink_then_normalize";
}

ShapingOrder shaping_order_from(const std::string& s) {
  if (s == "normalize_then_shrink") return ShapingOrder::normalize_then_shrink;
  if (s == "shrink_then_normalize") return ShapingOrder::shrink_then_normalize;
  throw InvalidArgument("unknown shaping order '" + s + "'");
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Stage tags for seed derivation.
constexpr std::uint64_t tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ULL;
  return h;
}

// ---------------------------------------------------------------------------
// strict JSON reading

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidArgument("config: '" + where() + "' must be an object");
  }

  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const char* key, T& out) {
    if (const json* v = find(key)) out = convert<T>(*v, key_path(key));
  }

  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array()) throw InvalidArgument("config: '" + key_path(key) + "' must be a list");
    out.clear();
    for (const auto& x : *v) out.push_back(convert<T>(x, key_path(key)));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw InvalidArgument("config: unknown key '" + key_path(k.c_str()) + "'");
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    auto bad = [&](const char* want) {
      return InvalidArgument("config: '" + where + "' must be " + want + ", got " + v.dump());
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::optional<bool>>) {
      if (v.is_null()) return std::nullopt;
      if (!v.is_boolean()) throw bad("true, false or null");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw bad("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw bad("a number");
      return v.get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw bad("a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw bad("an integer");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, Algorithm>) {
      return algorithm_from_string(convert<std::string>(v, where));
    } else if constexpr (std::is_same_v<T, StepAggregation>) {
      return aggregation_from_string(convert<std::string>(v, where));
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void section(Fields& parent, const char* key, F&& body) {
  if (const json* v = parent.find(key)) {
    Fields f(*v, parent.key_path(key));
    body(f);
    f.finish();
  }
}

// ---------------------------------------------------------------------------
// per-seed inputs, computed once and shared by every job of the seed

template <typename V>
class Memo {
 public:
  template <typename Make>
  const V& get(const std::string& key, Make&& make) {
    std::shared_ptr<Slot> slot;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto& s = slots_[key];
      if (!s) s = std::make_shared<Slot>();
      slot = s;
    }
    std::call_once(slot->once, [&] { slot->value.emplace(make()); });
    return *slot->value;
  }

 private:
  struct Slot {
    std::once_flag once;
    std::optional<V> value;
  };
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
};

struct SeedData {
  std::vector<Task> sft;
  std::vector<Task> pool;        // RL prompts
  std::vector<Task> rm_prompts;  // pool first, then the extra RM prompts
  std::vector<Task> eval;
};

std::string key_of(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  std::string k = std::to_string(seed);
  for (auto p : parts) k += "/" + std::to_string(p);
  return k;
}

class Lab {
 public:
  Lab(const ExperimentConfig& config, Exec exec) : cfg_(config), exec_(exec) {}

  const ExperimentConfig& config() const { return cfg_; }
  Exec exec() const { return exec_; }

  const SeedData& data(std::uint64_t seed) {
    return data_.get(key_of(seed, {}), [&] {
      const auto& e = cfg_.env;
      const std::size_t total = e.sft_prompts + e.train_prompts + e.rm_extra_prompts + e.eval_prompts;
      auto all = generate_dataset(total, {e.difficulty_min, e.difficulty_max},
                                  derive_seed(seed, tag("tasks")));
      Rng rng(derive_seed(seed, tag("split")));
      rng.shuffle(all);
      SeedData d;
      auto take = [&, pos = std::size_t{0}](std::size_t n) mutable {
        std::vector<Task> out(all.begin() + static_cast<std::ptrdiff_t>(pos),
                              all.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return out;
      };
      d.sft = take(e.sft_prompts);
      d.pool = take(e.train_prompts);
      d.rm_prompts = d.pool;
      const auto extra = take(e.rm_extra_prompts);
      d.rm_prompts.insert(d.rm_prompts.end(), extra.begin(), extra.end());
      d.eval = take(e.eval_prompts);
      return d;
    });
  }

  const PolicyParams& policy_init(std::uint64_t seed, int capacity) {
    return init_.get(key_of(seed, {static_cast<std::uint64_t>(capacity)}), [&] {
      return PolicyParams::init(capacity, derive_seed(seed, tag("policy-init"), capacity));
    });
  }

  const PolicyParams& sft(std::uint64_t seed, int capacity) {
    return sft_.get(key_of(seed, {static_cast<std::uint64_t>(capacity)}), [&] {
      SftConfig sc = cfg_.sft;
      sc.seed = derive_seed(seed, tag("sft"));
      return sft_pretrain(policy_init(seed, capacity), data(seed).sft, sc);
    });
  }

  /// Responses of the default-capacity SFT policy to the first n_prompts RM
  /// prompts, `solutions` per prompt. Smaller requests are nested in larger
  /// ones because each prompt's samples come from its own stream.
  const RmDataset& rm_data(std::uint64_t seed, std::size_t n_prompts, std::size_t solutions) {
    return rm_data_.get(key_of(seed, {n_prompts, solutions}), [&] {
      const auto& prompts = data(seed).rm_prompts;
      if (n_prompts > prompts.size()) throw InvalidArgument("more RM prompts requested than exist");
      Rng rng(derive_seed(seed, tag("rm-data")));
      return build_rm_dataset(std::span(prompts).first(n_prompts), sft(seed, cfg_.policy_capacity),
                              solutions, rng, cfg_.rm.data, exec_);
    });
  }

  RewardModelParams rm_init(std::uint64_t seed, int hidden) const {
    return RewardModelParams::init(hidden, derive_seed(seed, tag("rm-init"), hidden));
  }

  RewardTrainConfig rm_train_config(std::uint64_t seed) const {
    RewardTrainConfig t = cfg_.rm.train;
    t.seed = derive_seed(seed, tag("rm-train"));
    return t;
  }

  const RewardModelParams& orm(std::uint64_t seed, int hidden, std::size_t n_prompts,
                               std::size_t solutions) {
    return orm_.get(key_of(seed, {static_cast<std::uint64_t>(hidden), n_prompts, solutions}), [&] {
      const auto& d = rm_data(seed, n_prompts, solutions);
      return train_reward_model(rm_init(seed, hidden), d.pref, d.binary, {}, rm_train_config(seed),
                                nullptr, exec_);
    });
  }

  const RewardModelParams& default_orm(std::uint64_t seed, int hidden) {
    return orm(seed, hidden, data(seed).rm_prompts.size(), cfg_.rm.solutions_per_prompt);
  }

  const std::vector<StepLabeledExample>& step_labels(std::uint64_t seed) {
    return steps_.get(key_of(seed, {}), [&] {
      const auto& d = rm_data(seed, data(seed).rm_prompts.size(), cfg_.rm.solutions_per_prompt);
      std::vector<TaskResponse> corpus;
      for (const auto& b : d.binary) corpus.push_back({b.task, b.response});
      Rng rng(derive_seed(seed, tag("annotate")));
      return annotate_dataset(sft(seed, cfg_.policy_capacity), corpus, cfg_.annotation, rng, exec_);
    });
  }

  const RewardModelParams& prm(std::uint64_t seed, int hidden) {
    // the outcome objective on the ORM corpus plus per-step cross-entropy
    return prm_.get(key_of(seed, {static_cast<std::uint64_t>(hidden)}), [&] {
      const auto& d = rm_data(seed, data(seed).rm_prompts.size(), cfg_.rm.solutions_per_prompt);
      return train_reward_model(rm_init(seed, hidden), d.pref, d.binary, step_labels(seed),
                                rm_train_config(seed), nullptr, exec_);
    });
  }

  /// Best-of-N accuracies of the default SFT policy on the eval split. Every
  /// scorer sees the same samples for a given seed.
  std::vector<EvalReport> bon(std::uint64_t seed, const ResponseScorer& scorer) {
    Rng rng(derive_seed(seed, tag("bon")));
    BonConfig bc{cfg_.eval.bon_temperature, cfg_.eval.max_tokens};
    return best_of_n_curve(sft(seed, cfg_.policy_capacity), scorer, data(seed).eval, cfg_.eval.bon_n,
                           rng, bc, exec_);
  }

  double greedy(const PolicyParams& p, std::uint64_t seed) {
    return greedy_accuracy(p, data(seed).eval, cfg_.eval.max_tokens, exec_).value;
  }

 private:
  const ExperimentConfig& cfg_;
  Exec exec_;
  Memo<SeedData> data_;
  Memo<PolicyParams> init_;
  Memo<PolicyParams> sft_;
  Memo<RmDataset> rm_data_;
  Memo<RewardModelParams> orm_;
  Memo<std::vector<StepLabeledExample>> steps_;
  Memo<RewardModelParams> prm_;
};

std::uint64_t rm_data_digest(const RmDataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& b : d.binary) {
    h = checksum_bytes(b.response.tokens().data(), b.response.size(), mix64(h ^ b.task.id()));
    h = mix64(h ^ static_cast<std::uint64_t>(b.label));
  }
  for (const auto& p : d.pref) {
    h = checksum_bytes(p.chosen.tokens().data(), p.chosen.size(), mix64(h ^ p.task.id()));
    h = checksum_bytes(p.rejected.tokens().data(), p.rejected.size(), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// jobs

struct JobOutput {
  MetricsTable rows;
  DigestMap digests;
};

struct Job {
  ConfigPoint point;
  std::uint64_t seed = 0;
  std::function<JobOutput()> run;
};

std::string point_key(const ConfigPoint& p) {
  std::vector<std::string> parts;
  auto add = [&](const char* k, const std::string& v) {
    if (!v.empty()) parts.push_back(std::string(k) + "-" + v);
  };
  auto num = [](auto v) { return v ? std::to_string(v) : std::string(); };
  add("alg", p.algorithm);
  add("M", num(p.group_size));
  add("d", num(p.policy_capacity));
  add("h", num(p.rm_hidden_size));
  add("rm", p.reward_source);
  add("agg", p.aggregation);
  add("P", num(p.rm_prompts));
  add("S", num(p.solutions_per_prompt));
  std::string out;
  for (const auto& s : parts) out += (out.empty() ? "" : "_") + s;
  return out.empty() ? "all" : out;
}

struct Row {
  const std::string& kind;
  const ConfigPoint& point;
  std::uint64_t seed;
  MetricsTable& out;

  void add(const std::string& metric, double value, std::optional<int> iteration = std::nullopt) {
    out.push_back({kind, point, seed, metric, iteration, value});
  }
};

ExperimentResult run_jobs(const ExperimentConfig& cfg, std::vector<Job> jobs,
                          const RunOptions& options) {
  const std::string digest = hex(config_digest(cfg));
  auto job_path = [&](const Job& j) {
    return options.job_dir / ("seed" + std::to_string(j.seed) + "_" + point_key(j.point) + ".json");
  };

  std::vector<std::optional<JobOutput>> done(jobs.size());
  ExperimentResult result;
  if (options.resume && !options.job_dir.empty()) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto path = job_path(jobs[i]);
      if (!std::filesystem::exists(path)) continue;
      json j;
      try {
        j = json::parse(read_file(path));
      } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
      }
      if (j.at("config_digest").get<std::string>() != digest)
        throw InvalidArgument(path.string() + " was written by a different config; cannot resume");
      JobOutput o;
      o.rows = metrics_from_csv(j.at("metrics").get<std::string>());
      o.digests = j.at("digests").get<DigestMap>();
      done[i] = std::move(o);
      ++result.jobs_resumed;
    }
  }

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (!done[i]) pending.push_back(i);

  std::mutex progress_mu;
  std::size_t finished = 0;
  parallel_for(pending.size(), options.exec, [&](std::size_t k) {
    const Job& job = jobs[pending[k]];
    JobOutput o = job.run();
    if (!options.job_dir.empty()) {
      json j{{"config_digest", digest},
             {"seed", job.seed},
             {"point", point_key(job.point)},
             {"metrics", metrics_to_csv(o.rows)},
             {"digests", o.digests}};
      write_file_atomic(job_path(job), j.dump(1) + "\n");
    }
    done[pending[k]] = std::move(o);
    if (options.progress) {
      std::lock_guard<std::mutex> lock(progress_mu);
      ++finished;
      options.progress("job " + std::to_string(finished) + "/" + std::to_string(pending.size()) +
                       " done: seed " + std::to_string(job.seed) + " " + point_key(job.point));
    }
  });

  for (auto& o : done) {
    result.table.insert(result.table.end(), o->rows.begin(), o->rows.end());
    for (auto& [k, v] : o->digests) result.digests[k] = v;
  }
  result.jobs_run = pending.size();
  std::sort(result.table.begin(), result.table.end(), [](const auto& a, const auto& b) {
    return std::tie(a.experiment_kind, a.point, a.seed, a.metric, a.iteration, a.value) <
           std::tie(b.experiment_kind, b.point, b.seed, b.metric, b.iteration, b.value);
  });
  return result;
}

/// One RL run from the given SFT policy; greedy accuracy on the eval split at
/// iteration 0, every eval_every iterations and at the end, plus per-iteration
/// training curves.
TrainResult rl_run(Lab& lab, std::uint64_t seed, const PolicyParams& sft, const RewardSource& reward,
                   RlConfig rc, Row& row) {
  const auto& cfg = lab.config();
  rc.seed = derive_seed(seed, tag("rl"));
  const int every = cfg.eval.eval_every;
  row.add("greedy_accuracy", lab.greedy(sft, seed), 0);
  auto hook = [&](int it, const PolicyParams& p) {
    if (it % every == 0 || it == rc.iterations) row.add("greedy_accuracy", lab.greedy(p, seed), it);
  };
  TrainResult res = train(sft, reward, lab.data(seed).pool, rc, hook, lab.exec());
  for (const auto& r : res.log) {
    row.add("train_reward", r.mean_raw_reward, r.iteration);
    row.add("train_kl", r.mean_kl, r.iteration);
    row.add("response_length", r.mean_length, r.iteration);
    row.add("clip_fraction", r.clip_fraction, r.iteration);
  }
  row.add("final_greedy_accuracy", lab.greedy(res.policy, seed));
  row.add("final_kl", res.log.empty() ? 0.0 : res.log.back().mean_kl);
  return res;
}

RewardSource policy_reward(Lab& lab, std::uint64_t seed, int hidden) {
  if (lab.config().oracle_reward) return RewardSource::oracle();
  return RewardSource::model(lab.default_orm(seed, hidden));
}

std::string reward_name(const ExperimentConfig& cfg) { return cfg.oracle_reward ? "oracle" : "orm"; }

void add_bon_rows(Row& row, const std::vector<EvalReport>& reports) {
  for (const auto& r : reports) row.add(r.metric_name, r.value);
}

// ---------------------------------------------------------------------------
// CSV helpers

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("metrics: bad number '" + s + "'");
  return v;
}

template <typename T>
T parse_uint(const std::string& s) {
  if (s.empty()) return 0;
  T v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("metrics: bad integer '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// kinds and config

std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKindNames)
    if (kind == k) return name;
  return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kKindNames)
    if (s == name) return kind;
  throw InvalidArgument("unknown experiment kind '" + s + "'");
}

const std::vector<ExperimentKind>& all_experiment_kinds() {
  static const std::vector<ExperimentKind> kinds = [] {
    std::vector<ExperimentKind> v;
    for (const auto& [kind, name] : kKindNames) v.push_back(kind);
    return v;
  }();
  return kinds;
}

ExperimentConfig default_experiment_config(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  auto& g = c.grid;
  switch (kind) {
    case ExperimentKind::sampling_scaling:
      g.group_sizes = {1, 2, 4, 8, 16};
      break;
    case ExperimentKind::rm_size_scaling:
      g.rm_hidden_sizes = {8, 128};
      g.group_sizes = {4};
      break;
    case ExperimentKind::policy_size_scaling:
      g.capacities = {4, 8, 16, 32};
      break;
    case ExperimentKind::data_scaling:
      g.solutions_per_prompt = {5, 10, 20, 40};
      break;
    case ExperimentKind::rm_diversity:
      g.solutions_per_prompt = {5, 10, 20, 40};
      g.prompt_fractions = {0.125, 0.25, 0.5, 1.0};
      break;
    case ExperimentKind::prm_vs_orm:
      g.rm_hidden_sizes = {8, 32};
      break;
    case ExperimentKind::ppo_vs_grpo:
      g.group_sizes = {4, 16};
      g.algorithms = {Algorithm::ppo, Algorithm::grpo};
      break;
    case ExperimentKind::data_volume_policy:
      c.env.train_prompts = 2048;
      c.rl.iterations = 120;
      c.eval.eval_every = 10;
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw InvalidArgument("config: seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw InvalidArgument("config: seeds must be distinct");
  if (env.sft_prompts < 1 || env.train_prompts < 1 || env.eval_prompts < 1)
    throw InvalidArgument("config: env prompt counts must be >= 1");
  if (env.difficulty_min < 1 || env.difficulty_max < env.difficulty_min)
    throw InvalidArgument("config: difficulty range must satisfy 1 <= min <= max");
  if (policy_capacity < 1) throw InvalidArgument("config: policy_capacity must be >= 1");
  if (sft.epochs < 0 || sft.batch_size < 1 || !(sft.learning_rate > 0))
    throw InvalidArgument("config: bad sft settings");
  rl.validate();
  if (rl.prompts_per_rollout > env.train_prompts)
    throw InvalidArgument("config: rl.prompts_per_rollout exceeds env.train_prompts");
  if (rm.hidden_size < 1 || rm.solutions_per_prompt < 1 || rm.data.pair_cap < 1)
    throw InvalidArgument("config: bad rm settings");
  if (rm.train.epochs < 0 || rm.train.batch_size < 1 || !(rm.train.learning_rate > 0))
    throw InvalidArgument("config: bad rm.train settings");
  if (!(rm.data.temperature > 0) || rm.data.max_tokens < 1)
    throw InvalidArgument("config: bad rm.data settings");
  annotation.validate();
  if (eval.bon_n.empty()) throw InvalidArgument("config: eval.bon_n must not be empty");
  for (auto n : eval.bon_n)
    if (n < 1) throw InvalidArgument("config: eval.bon_n values must be >= 1");
  if (eval.prm_aggregations.empty())
    throw InvalidArgument("config: eval.prm_aggregations must not be empty");
  if (eval.eval_every < 1) throw InvalidArgument("config: eval.eval_every must be >= 1");
  if (!(eval.bon_temperature > 0) || eval.max_tokens < 1)
    throw InvalidArgument("config: bad eval settings");

  auto need = [&](bool empty, const char* what) {
    if (empty)
      throw InvalidArgument(std::string("config: grid.") + what + " must not be empty for " +
                            to_string(kind));
  };
  for (auto m : grid.group_sizes)
    if (m < 1) throw InvalidArgument("config: grid.group_sizes values must be >= 1");
  for (auto h : grid.rm_hidden_sizes)
    if (h < 1) throw InvalidArgument("config: grid.rm_hidden_sizes values must be >= 1");
  for (auto d : grid.capacities)
    if (d < 1) throw InvalidArgument("config: grid.capacities values must be >= 1");
  for (auto s : grid.solutions_per_prompt)
    if (s < 1) throw InvalidArgument("config: grid.solutions_per_prompt values must be >= 1");
  for (auto f : grid.prompt_fractions)
    if (!(f > 0 && f <= 1)) throw InvalidArgument("config: grid.prompt_fractions must lie in (0, 1]");

  const bool rm_centric = kind == ExperimentKind::data_scaling ||
                          kind == ExperimentKind::rm_diversity ||
                          kind == ExperimentKind::prm_vs_orm ||
                          kind == ExperimentKind::rm_size_scaling;
  if (oracle_reward && rm_centric)
    throw InvalidArgument("config: oracle_reward bypasses the reward model, which " +
                          to_string(kind) + " is about");

  switch (kind) {
    case ExperimentKind::sampling_scaling:
      need(grid.group_sizes.empty(), "group_sizes");
      for (auto m : grid.group_sizes)
        if (m != 1 && m != 2 && m != 4 && m != 8 && m != 16)
          throw InvalidArgument("config: sampling_scaling group sizes must come from {1,2,4,8,16}");
      break;
    case ExperimentKind::rm_size_scaling:
      need(grid.rm_hidden_sizes.empty(), "rm_hidden_sizes");
      need(grid.group_sizes.empty(), "group_sizes");
      break;
    case ExperimentKind::policy_size_scaling:
      need(grid.capacities.empty(), "capacities");
      break;
    case ExperimentKind::data_scaling:
      need(grid.solutions_per_prompt.empty(), "solutions_per_prompt");
      break;
    case ExperimentKind::rm_diversity:
      need(grid.solutions_per_prompt.empty(), "solutions_per_prompt");
      need(grid.prompt_fractions.empty(), "prompt_fractions");
      break;
    case ExperimentKind::prm_vs_orm:
      need(grid.rm_hidden_sizes.empty(), "rm_hidden_sizes");
      break;
    case ExperimentKind::ppo_vs_grpo:
      need(grid.group_sizes.empty(), "group_sizes");
      need(grid.algorithms.empty(), "algorithms");
      break;
    case ExperimentKind::data_volume_policy:
      break;
  }
}

std::string experiment_config_to_json(const ExperimentConfig& c, int indent) {
  auto aggs = json::array();
  for (auto a : c.eval.prm_aggregations) aggs.push_back(to_string(a));
  auto algs = json::array();
  for (auto a : c.grid.algorithms) algs.push_back(to_string(a));
  json j = {
      {"experiment_kind", to_string(c.kind)},
      {"seeds", c.seeds},
      {"oracle_reward", c.oracle_reward},
      {"output_dir", c.output_dir},
      {"policy_capacity", c.policy_capacity},
      {"env",
       {{"sft_prompts", c.env.sft_prompts},
        {"train_prompts", c.env.train_prompts},
        {"rm_extra_prompts", c.env.rm_extra_prompts},
        {"eval_prompts", c.env.eval_prompts},
        {"difficulty_min", c.env.difficulty_min},
        {"difficulty_max", c.env.difficulty_max}}},
      {"sft",
       {{"epochs", c.sft.epochs},
        {"learning_rate", c.sft.learning_rate},
        {"batch_size", c.sft.batch_size}}},
      {"rl",
       {{"algorithm", to_string(c.rl.algorithm)},
        {"group_size", c.rl.group_size},
        {"clip_epsilon", c.rl.clip_epsilon},
        {"kl_coefficient", c.rl.kl_coefficient},
        {"shrink_alpha", c.rl.shrink_alpha},
        {"policy_lr", c.rl.policy_lr},
        {"value_lr", c.rl.value_lr},
        {"prompts_per_rollout", c.rl.prompts_per_rollout},
        {"gradient_batch", c.rl.gradient_batch},
        {"epochs_per_rollout", c.rl.epochs_per_rollout},
        {"temperature", c.rl.temperature},
        {"max_tokens", c.rl.max_tokens},
        {"iterations", c.rl.iterations},
        {"normalize", c.rl.normalize ? json(*c.rl.normalize) : json(nullptr)},
        {"shaping_order", shaping_order_name(c.rl.shaping_order)},
        {"tempered_logprobs", c.rl.tempered_logprobs},
        {"ratio_cap", c.rl.ratio_cap},
        {"max_grad_norm", c.rl.max_grad_norm}}},
      {"rm",
       {{"hidden_size", c.rm.hidden_size},
        {"solutions_per_prompt", c.rm.solutions_per_prompt},
        {"sample_temperature", c.rm.data.temperature},
        {"max_tokens", c.rm.data.max_tokens},
        {"pair_cap", c.rm.data.pair_cap},
        {"epochs", c.rm.train.epochs},
        {"learning_rate", c.rm.train.learning_rate},
        {"batch_size", c.rm.train.batch_size}}},
      {"annotation",
       {{"rollouts_per_step", c.annotation.rollouts_per_step},
        {"temperature", c.annotation.temperature},
        {"max_tokens", c.annotation.max_tokens},
        {"label_mode", label_mode_name(c.annotation.label_mode)},
        {"threshold", c.annotation.threshold}}},
      {"eval",
       {{"bon_n", c.eval.bon_n},
        {"bon_temperature", c.eval.bon_temperature},
        {"prm_aggregations", aggs},
        {"eval_every", c.eval.eval_every},
        {"max_tokens", c.eval.max_tokens}}},
      {"grid",
       {{"group_sizes", c.grid.group_sizes},
        {"rm_hidden_sizes", c.grid.rm_hidden_sizes},
        {"capacities", c.grid.capacities},
        {"solutions_per_prompt", c.grid.solutions_per_prompt},
        {"prompt_fractions", c.grid.prompt_fractions},
        {"algorithms", algs}}},
  };
  return j.dump(indent);
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: not valid JSON: ") + e.what());
  }
  Fields root(j, "");
  const json* kind = root.find("experiment_kind");
  if (!kind) throw InvalidArgument("config: 'experiment_kind' is required");
  ExperimentConfig c =
      default_experiment_config(experiment_kind_from_string(Fields::convert<std::string>(*kind, "experiment_kind")));

  root.get_list("seeds", c.seeds);
  root.get("oracle_reward", c.oracle_reward);
  root.get("output_dir", c.output_dir);
  root.get("policy_capacity", c.policy_capacity);
  section(root, "env", [&](Fields& f) {
    f.get("sft_prompts", c.env.sft_prompts);
    f.get("train_prompts", c.env.train_prompts);
    f.get("rm_extra_prompts", c.env.rm_extra_prompts);
    f.get("eval_prompts", c.env.eval_prompts);
    f.get("difficulty_min", c.env.difficulty_min);
    f.get("difficulty_max", c.env.difficulty_max);
  });
  section(root, "sft", [&](Fields& f) {
    f.get("epochs", c.sft.epochs);
    f.get("learning_rate", c.sft.learning_rate);
    f.get("batch_size", c.sft.batch_size);
  });
  section(root, "rl", [&](Fields& f) {
    f.get("algorithm", c.rl.algorithm);
    f.get("group_size", c.rl.group_size);
    f.get("clip_epsilon", c.rl.clip_epsilon);
    f.get("kl_coefficient", c.rl.kl_coefficient);
    f.get("shrink_alpha", c.rl.shrink_alpha);
    f.get("policy_lr", c.rl.policy_lr);
    f.get("value_lr", c.rl.value_lr);
    f.get("prompts_per_rollout", c.rl.prompts_per_rollout);
    f.get("gradient_batch", c.rl.gradient_batch);
    f.get("epochs_per_rollout", c.rl.epochs_per_rollout);
    f.get("temperature", c.rl.temperature);
    f.get("max_tokens", c.rl.max_tokens);
    f.get("iterations", c.rl.iterations);
    f.get("normalize", c.rl.normalize);
    std::string order = shaping_order_name(c.rl.shaping_order);
    f.get("shaping_order", order);
    c.rl.shaping_order = shaping_order_from(order);
    f.get("tempered_logprobs", c.rl.tempered_logprobs);
    f.get("ratio_cap", c.rl.ratio_cap);
    f.get("max_grad_norm", c.rl.max_grad_norm);
  });
  section(root, "rm", [&](Fields& f) {
    f.get("hidden_size", c.rm.hidden_size);
    f.get("solutions_per_prompt", c.rm.solutions_per_prompt);
    f.get("sample_temperature", c.rm.data.temperature);
    f.get("max_tokens", c.rm.data.max_tokens);
    f.get("pair_cap", c.rm.data.pair_cap);
    f.get("epochs", c.rm.train.epochs);
    f.get("learning_rate", c.rm.train.learning_rate);
    f.get("batch_size", c.rm.train.batch_size);
  });
  section(root, "annotation", [&](Fields& f) {
    f.get("rollouts_per_step", c.annotation.rollouts_per_step);
    f.get("temperature", c.annotation.temperature);
    f.get("max_tokens", c.annotation.max_tokens);
    std::string mode = label_mode_name(c.annotation.label_mode);
    f.get("label_mode", mode);
    c.annotation.label_mode = label_mode_from(mode);
    f.get("threshold", c.annotation.threshold);
  });
  section(root, "eval", [&](Fields& f) {
    f.get_list("bon_n", c.eval.bon_n);
    f.get("bon_temperature", c.eval.bon_temperature);
    f.get_list("prm_aggregations", c.eval.prm_aggregations);
    f.get("eval_every", c.eval.eval_every);
    f.get("max_tokens", c.eval.max_tokens);
  });
  section(root, "grid", [&](Fields& f) {
    f.get_list("group_sizes", c.grid.group_sizes);
    f.get_list("rm_hidden_sizes", c.grid.rm_hidden_sizes);
    f.get_list("capacities", c.grid.capacities);
    f.get_list("solutions_per_prompt", c.grid.solutions_per_prompt);
    f.get_list("prompt_fractions", c.grid.prompt_fractions);
    f.get_list("algorithms", c.grid.algorithms);
  });
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const FormatError& e) {
    throw InvalidArgument(e.what());
  }
  return parse_experiment_config(text);
}

std::uint64_t config_digest(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.output_dir.clear();
  const std::string s = experiment_config_to_json(c, -1);
  return checksum_bytes(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// metrics table

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "experiment_kind", "seed",       "algorithm",  "group_size",           "policy_capacity",
      "rm_hidden_size",  "reward_source", "aggregation", "rm_prompts",      "solutions_per_prompt",
      "total_examples",  "matched",    "metric",     "iteration",            "value"};
  return cols;
}

std::string metrics_to_csv(MetricsTable table) {
  std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
    return std::tie(a.experiment_kind, a.point, a.seed, a.metric, a.iteration, a.value) <
           std::tie(b.experiment_kind, b.point, b.seed, b.metric, b.iteration, b.value);
  });
  std::string out;
  for (std::size_t i = 0; i < metrics_columns().size(); ++i)
    out += (i ? "," : "") + metrics_columns()[i];
  out += "\n";
  auto num = [](auto v) { return v ? std::to_string(v) : std::string(); };
  auto text = [](const std::string& s) {
    if (s.find_first_of(",\n\"") != std::string::npos)
      throw InvalidArgument("metrics: field contains a delimiter: " + s);
    return s;
  };
  for (const auto& r : table) {
    const auto& p = r.point;
    out += text(r.experiment_kind) + "," + std::to_string(r.seed) + "," + text(p.algorithm) + "," +
           num(p.group_size) + "," + num(p.policy_capacity) + "," + num(p.rm_hidden_size) + "," +
           text(p.reward_source) + "," + text(p.aggregation) + "," + num(p.rm_prompts) + "," +
           num(p.solutions_per_prompt) + "," + num(p.total_examples) + "," + num(p.matched) + "," +
           text(r.metric) + "," + (r.iteration ? std::to_string(*r.iteration) : "") + "," +
           fmt_double(r.value) + "\n";
  }
  return out;
}

MetricsTable metrics_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics: empty file");
  if (split(line, ',') != metrics_columns()) throw FormatError("metrics: unexpected header: " + line);
  MetricsTable out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != metrics_columns().size()) throw FormatError("metrics: bad row: " + line);
    MetricsRecord r;
    r.experiment_kind = f[0];
    r.seed = parse_uint<std::uint64_t>(f[1]);
    r.point.algorithm = f[2];
    r.point.group_size = parse_uint<std::size_t>(f[3]);
    r.point.policy_capacity = parse_uint<int>(f[4]);
    r.point.rm_hidden_size = parse_uint<int>(f[5]);
    r.point.reward_source = f[6];
    r.point.aggregation = f[7];
    r.point.rm_prompts = parse_uint<std::size_t>(f[8]);
    r.point.solutions_per_prompt = parse_uint<std::size_t>(f[9]);
    r.point.total_examples = parse_uint<std::size_t>(f[10]);
    r.point.matched = parse_uint<int>(f[11]);
    r.metric = f[12];
    if (!f[13].empty()) r.iteration = parse_uint<int>(f[13]);
    r.value = parse_double(f[14]);
    out.push_back(std::move(r));
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table) {
  write_file_atomic(path, metrics_to_csv(table));
}

MetricsTable read_metrics_csv(const std::filesystem::path& path) {
  return metrics_from_csv(read_file(path));
}

// ---------------------------------------------------------------------------
// runners

ExperimentResult run_sampling_scaling(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::sampling_scaling)
    throw InvalidArgument("run_sampling_scaling: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto m : cfg.grid.group_sizes)
    for (auto seed : cfg.seeds) {
      ConfigPoint p;
      p.algorithm = to_string(cfg.rl.algorithm);
      p.group_size = m;
      p.reward_source = reward_name(cfg);
      jobs.push_back({p, seed, [&lab, &kind, p, seed, m] {
                        JobOutput o;
                        Row row{kind, p, seed, o.rows};
                        RlConfig rc = lab.config().rl;
                        rc.group_size = m;
                        const auto& sft = lab.sft(seed, lab.config().policy_capacity);
                        rl_run(lab, seed, sft, policy_reward(lab, seed, lab.config().rm.hidden_size), rc,
                               row);
                        return o;
                      }});
    }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_rm_size_scaling(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::rm_size_scaling)
    throw InvalidArgument("run_rm_size_scaling: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto h : cfg.grid.rm_hidden_sizes)
    for (auto m : cfg.grid.group_sizes)
      for (auto seed : cfg.seeds) {
        ConfigPoint p;
        p.algorithm = to_string(cfg.rl.algorithm);
        p.group_size = m;
        p.rm_hidden_size = h;
        p.reward_source = "orm";
        jobs.push_back({p, seed, [&lab, &kind, p, seed, m, h] {
                          JobOutput o;
                          Row row{kind, p, seed, o.rows};
                          RlConfig rc = lab.config().rl;
                          rc.group_size = m;
                          const int d = lab.config().policy_capacity;
                          o.digests["policy_init/" + std::to_string(seed) + "/" + point_key(p)] =
                              hex(lab.policy_init(seed, d).checksum());
                          const auto& sft = lab.sft(seed, d);
                          rl_run(lab, seed, sft, RewardSource::model(lab.default_orm(seed, h)), rc, row);
                          return o;
                        }});
      }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_policy_size_scaling(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::policy_size_scaling)
    throw InvalidArgument("run_policy_size_scaling: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto d : cfg.grid.capacities)
    for (auto seed : cfg.seeds) {
      ConfigPoint p;
      p.algorithm = to_string(cfg.rl.algorithm);
      p.group_size = cfg.rl.group_size;
      p.policy_capacity = d;
      p.reward_source = reward_name(cfg);
      jobs.push_back({p, seed, [&lab, &kind, p, seed, d] {
                        JobOutput o;
                        MetricsTable curves;
                        Row curve_row{kind, p, seed, curves};
                        Row row{kind, p, seed, o.rows};
                        const auto& sft = lab.sft(seed, d);
                        const double baseline = lab.greedy(sft, seed);
                        auto res = rl_run(lab, seed, sft,
                                          policy_reward(lab, seed, lab.config().rm.hidden_size),
                                          lab.config().rl, curve_row);
                        const double final_acc = lab.greedy(res.policy, seed);
                        row.add("baseline_accuracy", baseline);
                        row.add("final_accuracy", final_acc);
                        row.add("gain", final_acc - baseline);
                        for (auto& r : curves)
                          if (r.metric == "train_reward" || r.metric == "train_kl") o.rows.push_back(r);
                        return o;
                      }});
    }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_data_scaling(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::data_scaling)
    throw InvalidArgument("run_data_scaling: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  const std::size_t prompts = cfg.env.train_prompts + cfg.env.rm_extra_prompts;
  std::vector<Job> jobs;
  for (auto s : cfg.grid.solutions_per_prompt)
    for (auto seed : cfg.seeds) {
      ConfigPoint p;
      p.rm_hidden_size = cfg.rm.hidden_size;
      p.reward_source = "orm";
      p.rm_prompts = prompts;
      p.solutions_per_prompt = s;
      p.total_examples = prompts * s;
      jobs.push_back({p, seed, [&lab, &kind, p, seed] {
                        JobOutput o;
                        Row row{kind, p, seed, o.rows};
                        const auto& rm =
                            lab.orm(seed, p.rm_hidden_size, p.rm_prompts, p.solutions_per_prompt);
                        add_bon_rows(row, lab.bon(seed, outcome_scorer(RewardSource::model(rm))));
                        return o;
                      }});
    }
  return run_jobs(cfg, std::move(jobs), options);
}

std::vector<ConfigPoint> rm_diversity_points(const ExperimentConfig& cfg) {
  const std::size_t full = cfg.env.train_prompts + cfg.env.rm_extra_prompts;
  const std::size_t max_s =
      *std::max_element(cfg.grid.solutions_per_prompt.begin(), cfg.grid.solutions_per_prompt.end());
  std::vector<ConfigPoint> pts;
  auto add = [&](std::size_t prompts, std::size_t s) {
    ConfigPoint p;
    p.rm_hidden_size = cfg.rm.hidden_size;
    p.reward_source = "orm";
    p.rm_prompts = prompts;
    p.solutions_per_prompt = s;
    p.total_examples = prompts * s;
    for (const auto& q : pts)
      if (q.rm_prompts == prompts && q.solutions_per_prompt == s) return;
    pts.push_back(p);
  };
  for (auto s : cfg.grid.solutions_per_prompt) add(full, s);
  for (auto f : cfg.grid.prompt_fractions) {
    const auto n = static_cast<std::size_t>(std::llround(f * static_cast<double>(full)));
    if (n < 1) throw InvalidArgument("rm_diversity: prompt fraction selects no prompts");
    add(n, max_s);
  }
  for (auto& p : pts)
    for (const auto& q : pts)
      if (&p != &q && p.total_examples == q.total_examples) p.matched = 1;
  return pts;
}

ExperimentResult run_rm_diversity(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::rm_diversity)
    throw InvalidArgument("run_rm_diversity: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (const auto& p : rm_diversity_points(cfg))
    for (auto seed : cfg.seeds)
      jobs.push_back({p, seed, [&lab, &kind, p, seed] {
                        JobOutput o;
                        Row row{kind, p, seed, o.rows};
                        const auto& rm =
                            lab.orm(seed, p.rm_hidden_size, p.rm_prompts, p.solutions_per_prompt);
                        add_bon_rows(row, lab.bon(seed, outcome_scorer(RewardSource::model(rm))));
                        return o;
                      }});
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_prm_vs_orm(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::prm_vs_orm)
    throw InvalidArgument("run_prm_vs_orm: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto h : cfg.grid.rm_hidden_sizes)
    for (const char* model : {"orm", "prm"})
      for (auto seed : cfg.seeds) {
        ConfigPoint p;
        p.rm_hidden_size = h;
        p.reward_source = model;
        jobs.push_back({p, seed, [&lab, &kind, p, seed, h] {
                          JobOutput o;
                          const auto& c = lab.config();
                          const auto& corpus =
                              lab.rm_data(seed, lab.data(seed).rm_prompts.size(), c.rm.solutions_per_prompt);
                          o.digests["corpus/" + std::to_string(seed) + "/" + point_key(p)] =
                              hex(rm_data_digest(corpus));
                          if (p.reward_source == "orm") {
                            Row row{kind, p, seed, o.rows};
                            const auto& rm = lab.default_orm(seed, h);
                            add_bon_rows(row, lab.bon(seed, outcome_scorer(RewardSource::model(rm))));
                          } else {
                            const auto& rm = lab.prm(seed, h);
                            for (auto agg : c.eval.prm_aggregations) {
                              ConfigPoint q = p;
                              q.aggregation = to_string(agg);
                              Row row{kind, q, seed, o.rows};
                              add_bon_rows(row, lab.bon(seed, process_scorer(rm, agg)));
                            }
                          }
                          return o;
                        }});
      }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_ppo_vs_grpo(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::ppo_vs_grpo)
    throw InvalidArgument("run_ppo_vs_grpo: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto alg : cfg.grid.algorithms)
    for (auto m : cfg.grid.group_sizes)
      for (auto seed : cfg.seeds) {
        ConfigPoint p;
        p.algorithm = to_string(alg);
        p.group_size = m;
        p.reward_source = reward_name(cfg);
        jobs.push_back({p, seed, [&lab, &kind, p, seed, m, alg] {
                          JobOutput o;
                          Row row{kind, p, seed, o.rows};
                          RlConfig rc = lab.config().rl;
                          rc.algorithm = alg;
                          rc.group_size = m;
                          const auto& sft = lab.sft(seed, lab.config().policy_capacity);
                          rl_run(lab, seed, sft, policy_reward(lab, seed, lab.config().rm.hidden_size),
                                 rc, row);
                          return o;
                        }});
      }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_data_volume_policy(const ExperimentConfig& cfg, const RunOptions& options) {
  if (cfg.kind != ExperimentKind::data_volume_policy)
    throw InvalidArgument("run_data_volume_policy: config is for " + to_string(cfg.kind));
  cfg.validate();
  Lab lab(cfg, Exec::serial);
  const std::string kind = to_string(cfg.kind);
  std::vector<Job> jobs;
  for (auto seed : cfg.seeds) {
    ConfigPoint p;
    p.algorithm = to_string(cfg.rl.algorithm);
    p.group_size = cfg.rl.group_size;
    p.reward_source = reward_name(cfg);
    jobs.push_back({p, seed, [&lab, &kind, p, seed] {
                      JobOutput o;
                      Row row{kind, p, seed, o.rows};
                      const auto& sft = lab.sft(seed, lab.config().policy_capacity);
                      rl_run(lab, seed, sft, policy_reward(lab, seed, lab.config().rm.hidden_size),
                             lab.config().rl, row);
                      return o;
                    }});
  }
  return run_jobs(cfg, std::move(jobs), options);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  switch (cfg.kind) {
    case ExperimentKind::sampling_scaling: return run_sampling_scaling(cfg, options);
    case ExperimentKind::rm_size_scaling: return run_rm_size_scaling(cfg, options);
    case ExperimentKind::policy_size_scaling: return run_policy_size_scaling(cfg, options);
    case ExperimentKind::data_scaling: return run_data_scaling(cfg, options);
    case ExperimentKind::rm_diversity: return run_rm_diversity(cfg, options);
    case ExperimentKind::prm_vs_orm: return run_prm_vs_orm(cfg, options);
    case ExperimentKind::ppo_vs_grpo: return run_ppo_vs_grpo(cfg, options);
    case ExperimentKind::data_volume_policy: return run_data_volume_policy(cfg, options);
  }
  throw InvalidArgument("run_experiment: unknown kind");
}

// ---------------------------------------------------------------------------
// plot data

namespace {

using XFn = std::function<std::optional<double>(const MetricsRecord&)>;
using NameFn = std::function<std::optional<std::string>(const MetricsRecord&)>;

class SeriesBuilder {
 public:
  SeriesBuilder(const MetricsTable& table, std::string kind) : table_(table), kind_(std::move(kind)) {}

  void add(const std::string& metric, const NameFn& name, const XFn& x) {
    for (const auto& r : table_) {
      if (r.experiment_kind != kind_ || r.metric != metric) continue;
      const auto n = name(r);
      const auto xv = x(r);
      if (!n || !xv) continue;
      acc_[*n][*xv].push_back(r.value);
    }
  }

  std::vector<PlotSeries> build() const {
    std::vector<PlotSeries> out;
    for (const auto& [name, by_x] : acc_) {
      PlotSeries s{name, {}};
      for (const auto& [x, vals] : by_x) {
        PlotPoint p;
        p.x = x;
        p.n = vals.size();
        p.mean = mean(vals);
        if (vals.size() > 1) {
          double ss = 0;
          for (double v : vals) ss += (v - p.mean) * (v - p.mean);
          p.stderr_ = std::sqrt(ss / static_cast<double>(vals.size() - 1) / static_cast<double>(vals.size()));
        }
        s.points.push_back(p);
      }
      out.push_back(std::move(s));
    }
    return out;
  }

 private:
  const MetricsTable& table_;
  std::string kind_;
  std::map<std::string, std::map<double, std::vector<double>>> acc_;
};

std::optional<double> x_iteration(const MetricsRecord& r) {
  if (!r.iteration) return std::nullopt;
  return static_cast<double>(*r.iteration);
}

std::optional<double> x_group(const MetricsRecord& r) { return static_cast<double>(r.point.group_size); }

std::set<std::string> bon_metrics(const MetricsTable& t, const std::string& kind) {
  std::set<std::string> out;
  for (const auto& r : t)
    if (r.experiment_kind == kind && r.metric.rfind("bon_", 0) == 0) out.insert(r.metric);
  return out;
}

}  // namespace

std::vector<PlotSeries> plot_series(const MetricsTable& table, const std::string& kind_name) {
  const ExperimentKind kind = experiment_kind_from_string(kind_name);
  SeriesBuilder b(table, kind_name);
  auto fixed = [](std::string name) { return [name](const MetricsRecord&) { return std::optional(name); }; };
  auto per_m = [](std::string base) {
    return [base](const MetricsRecord& r) {
      return std::optional(base + "_M" + std::to_string(r.point.group_size));
    };
  };
  switch (kind) {
    case ExperimentKind::sampling_scaling:
      b.add("final_greedy_accuracy", fixed("sampling_scaling_final_accuracy"), x_group);
      b.add("greedy_accuracy", per_m("sampling_scaling_accuracy"), x_iteration);
      b.add("train_reward", per_m("sampling_scaling_reward"), x_iteration);
      break;
    case ExperimentKind::rm_size_scaling:
      b.add("final_greedy_accuracy", per_m("rm_size_scaling_final_accuracy"),
            [](const MetricsRecord& r) { return std::optional<double>(r.point.rm_hidden_size); });
      break;
    case ExperimentKind::policy_size_scaling:
      for (const char* m : {"baseline_accuracy", "final_accuracy", "gain"})
        b.add(m, fixed(std::string("policy_size_scaling_") + m),
              [](const MetricsRecord& r) { return std::optional<double>(r.point.policy_capacity); });
      break;
    case ExperimentKind::data_scaling:
      for (const auto& m : bon_metrics(table, kind_name))
        b.add(m, fixed("data_scaling_" + m), [](const MetricsRecord& r) {
          return std::optional<double>(static_cast<double>(r.point.solutions_per_prompt));
        });
      break;
    case ExperimentKind::rm_diversity: {
      std::size_t max_prompts = 0, max_s = 0;
      for (const auto& r : table)
        if (r.experiment_kind == kind_name) {
          max_prompts = std::max(max_prompts, r.point.rm_prompts);
          max_s = std::max(max_s, r.point.solutions_per_prompt);
        }
      auto x_total = [](const MetricsRecord& r) {
        return std::optional<double>(static_cast<double>(r.point.total_examples));
      };
      for (const auto& m : bon_metrics(table, kind_name)) {
        b.add(m,
              [=](const MetricsRecord& r) -> std::optional<std::string> {
                if (r.point.rm_prompts != max_prompts) return std::nullopt;
                return "rm_diversity_" + m + "_more_solutions";
              },
              x_total);
        b.add(m,
              [=](const MetricsRecord& r) -> std::optional<std::string> {
                if (r.point.solutions_per_prompt != max_s) return std::nullopt;
                return "rm_diversity_" + m + "_more_prompts";
              },
              x_total);
      }
      break;
    }
    case ExperimentKind::prm_vs_orm:
      for (const auto& m : bon_metrics(table, kind_name))
        b.add(m,
              [=](const MetricsRecord& r) {
                std::string arm = r.point.reward_source;
                if (!r.point.aggregation.empty()) arm += "_" + r.point.aggregation;
                return std::optional("prm_vs_orm_" + m + "_" + arm);
              },
              [](const MetricsRecord& r) { return std::optional<double>(r.point.rm_hidden_size); });
      break;
    case ExperimentKind::ppo_vs_grpo:
      b.add("final_greedy_accuracy",
            [](const MetricsRecord& r) { return std::optional("ppo_vs_grpo_final_accuracy_" + r.point.algorithm); },
            x_group);
      b.add("final_kl",
            [](const MetricsRecord& r) { return std::optional("ppo_vs_grpo_final_kl_" + r.point.algorithm); },
            x_group);
      for (const char* m : {"train_reward", "train_kl", "response_length", "greedy_accuracy"})
        b.add(m,
              [m](const MetricsRecord& r) {
                return std::optional("ppo_vs_grpo_" + std::string(m) + "_" + r.point.algorithm + "_M" +
                                     std::to_string(r.point.group_size));
              },
              x_iteration);
      break;
    case ExperimentKind::data_volume_policy:
      b.add("greedy_accuracy", fixed("data_volume_policy_accuracy"), x_iteration);
      b.add("train_reward", fixed("data_volume_policy_reward"), x_iteration);
      break;
  }
  return b.build();
}

std::vector<std::filesystem::path> emit_plot_data(const MetricsTable& table,
                                                  const std::string& experiment_kind,
                                                  const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (const auto& s : plot_series(table, experiment_kind)) {
    std::string out = "x,mean,stderr\n";
    for (const auto& p : s.points)
      out += fmt_double(p.x) + "," + fmt_double(p.mean) + "," + fmt_double(p.stderr_) + "\n";
    const auto path = dir / (s.name + ".csv");
    write_file_atomic(path, out);
    written.push_back(path);
  }
  return written;
}

std::vector<PairedComparison> paired_ppo_grpo(const MetricsTable& table) {
  std::map<std::size_t, std::map<std::uint64_t, std::pair<std::optional<double>, std::optional<double>>>> by;
  for (const auto& r : table) {
    if (r.experiment_kind != "ppo_vs_grpo" || r.metric != "final_greedy_accuracy") continue;
    auto& slot = by[r.point.group_size][r.seed];
    (r.point.algorithm == "ppo" ? slot.first : slot.second) = r.value;
  }
  std::vector<PairedComparison> out;
  for (const auto& [m, seeds] : by) {
    std::vector<double> d;
    for (const auto& [seed, pr] : seeds)
      if (pr.first && pr.second) d.push_back(*pr.first - *pr.second);
    if (d.empty()) continue;
    PairedComparison c;
    c.group_size = m;
    c.n = d.size();
    c.mean_difference = mean(d);
    c.ci_low = c.ci_high = c.mean_difference;
    if (d.size() > 1) {
      double ss = 0;
      for (double v : d) ss += (v - c.mean_difference) * (v - c.mean_difference);
      const double se = std::sqrt(ss / static_cast<double>(d.size() - 1) / static_cast<double>(d.size()));
      const boost::math::students_t dist(static_cast<double>(d.size() - 1));
      const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
      c.ci_low = c.mean_difference - t * se;
      c.ci_high = c.mean_difference + t * se;
    }
    out.push_back(c);
  }
  return out;
}

ExperimentResult run_and_save(const ExperimentConfig& config, RunOptions options) {
  if (config.output_dir.empty()) throw InvalidArgument("run_and_save: output_dir is empty");
  const std::filesystem::path out = config.output_dir;
  options.job_dir = out / "jobs";
  std::filesystem::create_directories(options.job_dir);
  write_file_atomic(out / "config.json", experiment_config_to_json(config) + "\n");

  ExperimentResult res = run_experiment(config, options);
  write_metrics_csv(out / "metrics.csv", res.table);
  const auto plots = emit_plot_data(res.table, to_string(config.kind), out / "plots");

  std::map<std::string, std::size_t> rows_by_metric;
  for (const auto& r : res.table) ++rows_by_metric[r.metric];
  json files = json::array({"config.json", "metrics.csv"});
  for (const auto& p : plots) files.push_back(std::filesystem::relative(p, out).string());
  json manifest = {
      {"experiment_kind", to_string(config.kind)},
      {"config_digest", hex(config_digest(config))},
      {"config", json::parse(experiment_config_to_json(config))},
      {"seeds", config.seeds},
      {"row_count", res.table.size()},
      {"rows_by_metric", rows_by_metric},
      {"jobs_run", res.jobs_run},
      {"jobs_resumed", res.jobs_resumed},
      {"digests", res.digests},
      {"files", files},
      {"checkpoint_format_version", kCheckpointVersion},
  };
  if (config.kind == ExperimentKind::ppo_vs_grpo) {
    json pairs = json::array();
    for (const auto& c : paired_ppo_grpo(res.table))
      pairs.push_back({{"group_size", c.group_size},
                       {"n", c.n},
                       {"mean_difference_ppo_minus_grpo", c.mean_difference},
                       {"ci95_low", c.ci_low},
                       {"ci95_high", c.ci_high}});
    manifest["paired_comparisons"] = pairs;
  }
  write_file_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  return res;
}

}  // namespace rlhf
