#include "rlhf/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "rlhf/features.hpp"

namespace rlhf {
namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'R', 'L', 'H', 'F', 'C', 'K', 'P', 'T'};

enum class Kind : std::uint32_t { policy = 1, reward_model = 2, value = 3 };

class Writer {
 public:
  Writer(Kind kind) {
    buf_.append(kMagic, sizeof kMagic);
    u32(kCheckpointVersion);
    u32(static_cast<std::uint32_t>(kind));
  }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void doubles(const double* p, std::size_t n) { raw(p, n * sizeof(double)); }
  std::string finish() {
    u64(checksum_bytes(buf_.data(), buf_.size()));
    return std::move(buf_);
  }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, Kind kind, const std::filesystem::path& path)
      : data_(std::move(data)), path_(path.string()) {
    if (data_.size() < sizeof kMagic + 16 || std::memcmp(data_.data(), kMagic, sizeof kMagic) != 0)
      fail("not a checkpoint file");
    const std::size_t body = data_.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, data_.data() + body, sizeof stored);
    if (stored != checksum_bytes(data_.data(), body)) fail("checksum mismatch");
    end_ = body;
    pos_ = sizeof kMagic;
    if (const auto v = u32(); v != kCheckpointVersion)
      fail("unsupported format version " + std::to_string(v));
    if (const auto k = u32(); k != static_cast<std::uint32_t>(kind))
      fail("checkpoint holds a different kind of model");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  void doubles(double* p, std::size_t n) { raw(p, n * sizeof(double)); }
  void expect_shape(const char* what, std::uint64_t got, std::uint64_t want) {
    if (got != want)
      fail(std::string("shape mismatch in ") + what + ": file has " + std::to_string(got) +
           ", expected " + std::to_string(want));
  }
  void done() {
    if (pos_ != end_) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(path_ + ": " + msg);
  }

 private:
  void raw(void* p, std::size_t n) {
    if (n > end_ - pos_) fail("truncated");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

json tokens_json(std::span<const Token> t) {
  json a = json::array();
  for (Token x : t) a.push_back(static_cast<int>(x));
  return a;
}

TokenSeq tokens_from(const json& a) {
  TokenSeq out;
  for (const auto& x : a) {
    const int v = x.get<int>();
    if (!Vocabulary::contains(v)) throw FormatError("token id out of range: " + std::to_string(v));
    out.push_back(static_cast<Token>(v));
  }
  return out;
}

json task_json(const Task& t) {
  return json{{"seed", t.seed},
              {"difficulty", t.difficulty},
              {"prompt_tokens", tokens_json(t.prompt_tokens)},
              {"ground_truth_steps", t.ground_truth_steps}};
}

Task task_from(const json& j) {
  Task t = task_from_prompt(j.at("seed").get<std::uint64_t>(), tokens_from(j.at("prompt_tokens")));
  if (t.difficulty != j.at("difficulty").get<int>() ||
      t.ground_truth_steps != j.at("ground_truth_steps").get<std::vector<int>>())
    throw FormatError("task record is inconsistent with its prompt");
  return t;
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      f(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const InvalidArgument& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void write_lines(const std::filesystem::path& path, const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  write_file_atomic(path, out);
}

class TaskIndex {
 public:
  explicit TaskIndex(std::span<const Task> tasks) {
    for (const auto& t : tasks) {
      auto [it, inserted] = by_id_.emplace(t.id(), &t);
      if (!inserted && !(*it->second == t))
        throw InvalidArgument("task list has two different tasks with id " + std::to_string(t.id()));
    }
  }
  const Task& at(const json& ref) const {
    const auto id = ref.get<std::uint64_t>();
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) throw FormatError("unknown task_ref " + std::to_string(id));
    return *it->second;
  }

 private:
  std::map<std::uint64_t, const Task*> by_id_;
};

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// checkpoints

void save_policy(const std::filesystem::path& path, const PolicyParams& p) {
  Writer w(Kind::policy);
  w.u64(static_cast<std::uint64_t>(p.capacity));
  w.u64(static_cast<std::uint64_t>(p.context_weights.rows()));
  w.u64(static_cast<std::uint64_t>(p.embedding.rows()));
  w.doubles(p.embedding.data(), static_cast<std::size_t>(p.embedding.size()));
  w.doubles(p.context_weights.data(), static_cast<std::size_t>(p.context_weights.size()));
  write_file_atomic(path, w.finish());
}

PolicyParams load_policy(const std::filesystem::path& path, std::optional<int> expected_capacity) {
  Reader r(read_file(path), Kind::policy, path);
  const auto capacity = r.u64();
  r.expect_shape("feature dimension", r.u64(), feature_dim());
  r.expect_shape("vocabulary size", r.u64(), Vocabulary::kSize);
  if (expected_capacity) r.expect_shape("capacity", capacity, static_cast<std::uint64_t>(*expected_capacity));
  if (capacity < 1 || capacity > (1u << 16)) r.fail("implausible capacity");
  auto p = PolicyParams::zeros(static_cast<int>(capacity));
  r.doubles(p.embedding.data(), static_cast<std::size_t>(p.embedding.size()));
  r.doubles(p.context_weights.data(), static_cast<std::size_t>(p.context_weights.size()));
  r.done();
  return p;
}

void save_reward_model(const std::filesystem::path& path, const RewardModelParams& p) {
  Writer w(Kind::reward_model);
  w.u64(static_cast<std::uint64_t>(p.hidden_size));
  w.u64(static_cast<std::uint64_t>(p.hidden_weights.rows()));
  w.doubles(p.hidden_weights.data(), static_cast<std::size_t>(p.hidden_weights.size()));
  w.doubles(p.hidden_bias.data(), static_cast<std::size_t>(p.hidden_bias.size()));
  w.doubles(p.output_weights.data(), static_cast<std::size_t>(p.output_weights.size()));
  w.doubles(&p.output_bias, 1);
  write_file_atomic(path, w.finish());
}

RewardModelParams load_reward_model(const std::filesystem::path& path,
                                    std::optional<int> expected_hidden_size) {
  Reader r(read_file(path), Kind::reward_model, path);
  const auto hidden = r.u64();
  r.expect_shape("feature dimension", r.u64(), feature_dim());
  if (expected_hidden_size)
    r.expect_shape("hidden size", hidden, static_cast<std::uint64_t>(*expected_hidden_size));
  if (hidden < 1 || hidden > (1u << 16)) r.fail("implausible hidden size");
  auto p = RewardModelParams::zeros(static_cast<int>(hidden));
  r.doubles(p.hidden_weights.data(), static_cast<std::size_t>(p.hidden_weights.size()));
  r.doubles(p.hidden_bias.data(), static_cast<std::size_t>(p.hidden_bias.size()));
  r.doubles(p.output_weights.data(), static_cast<std::size_t>(p.output_weights.size()));
  r.doubles(&p.output_bias, 1);
  r.done();
  return p;
}

void save_value(const std::filesystem::path& path, const ValueParams& p) {
  Writer w(Kind::value);
  w.u64(static_cast<std::uint64_t>(p.weights.size()));
  w.doubles(p.weights.data(), static_cast<std::size_t>(p.weights.size()));
  w.doubles(&p.bias, 1);
  write_file_atomic(path, w.finish());
}

ValueParams load_value(const std::filesystem::path& path) {
  Reader r(read_file(path), Kind::value, path);
  r.expect_shape("feature dimension", r.u64(), feature_dim());
  auto p = ValueParams::zeros();
  r.doubles(p.weights.data(), static_cast<std::size_t>(p.weights.size()));
  r.doubles(&p.bias, 1);
  r.done();
  return p;
}

// ---------------------------------------------------------------------------
// JSONL

std::string task_to_json(const Task& task) { return task_json(task).dump(); }

Task task_from_json(const std::string& line) {
  try {
    return task_from(json::parse(line));
  } catch (const json::exception& e) {
    throw FormatError(std::string("task record: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("task record: ") + e.what());
  }
}

void write_tasks_jsonl(const std::filesystem::path& path, std::span<const Task> tasks) {
  std::vector<json> rows;
  for (const auto& t : tasks) rows.push_back(task_json(t));
  write_lines(path, rows);
}

std::vector<Task> read_tasks_jsonl(const std::filesystem::path& path) {
  std::vector<Task> out;
  for_each_line(path, [&](const json& j) { out.push_back(task_from(j)); });
  return out;
}

void write_rm_dataset_jsonl(const std::filesystem::path& path, const RmDataset& data) {
  std::vector<json> rows;
  for (const auto& p : data.pref)
    rows.push_back({{"kind", "preference"},
                    {"task_ref", p.task.id()},
                    {"chosen", tokens_json(p.chosen.tokens())},
                    {"rejected", tokens_json(p.rejected.tokens())}});
  for (const auto& b : data.binary)
    rows.push_back({{"kind", "binary"},
                    {"task_ref", b.task.id()},
                    {"response", tokens_json(b.response.tokens())},
                    {"label", b.label}});
  write_lines(path, rows);
}

RmDataset read_rm_dataset_jsonl(const std::filesystem::path& path, std::span<const Task> tasks) {
  const TaskIndex index(tasks);
  RmDataset out;
  for_each_line(path, [&](const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    const Task& task = index.at(j.at("task_ref"));
    if (kind == "preference") {
      out.pref.push_back({task, Response(tokens_from(j.at("chosen"))),
                          Response(tokens_from(j.at("rejected")))});
    } else if (kind == "binary") {
      const int label = j.at("label").get<int>();
      if (label != 0 && label != 1) throw FormatError("binary label must be 0 or 1");
      out.binary.push_back({task, Response(tokens_from(j.at("response"))), label});
    } else {
      throw FormatError("unknown record kind '" + kind + "'");
    }
  });
  return out;
}

void write_step_labels_jsonl(const std::filesystem::path& path,
                             std::span<const StepLabeledExample> examples) {
  std::vector<json> rows;
  for (const auto& e : examples)
    rows.push_back({{"task_ref", e.task.id()},
                    {"response", tokens_json(e.response.tokens())},
                    {"step_labels", e.step_labels}});
  write_lines(path, rows);
}

std::vector<StepLabeledExample> read_step_labels_jsonl(const std::filesystem::path& path,
                                                       std::span<const Task> tasks) {
  const TaskIndex index(tasks);
  std::vector<StepLabeledExample> out;
  for_each_line(path, [&](const json& j) {
    StepLabeledExample e{index.at(j.at("task_ref")), Response(tokens_from(j.at("response"))),
                         j.at("step_labels").get<std::vector<double>>()};
    if (e.step_labels.size() != e.response.num_steps())
      throw FormatError("step label count does not match the response's steps");
    out.push_back(std::move(e));
  });
  return out;
}

void write_train_log_jsonl(const std::filesystem::path& path,
                           std::span<const TrainLogRecord> records) {
  std::vector<json> rows;
  for (const auto& r : records)
    rows.push_back({{"iteration", r.iteration},
                    {"mean_raw_reward", r.mean_raw_reward},
                    {"mean_shaped_reward", r.mean_shaped_reward},
                    {"mean_kl", r.mean_kl},
                    {"mean_length", r.mean_length},
                    {"clip_fraction", r.clip_fraction},
                    {"mean_ratio", r.mean_ratio},
                    {"ratio_cap_hits", r.ratio_cap_hits}});
  write_lines(path, rows);
}

std::vector<TrainLogRecord> read_train_log_jsonl(const std::filesystem::path& path) {
  std::vector<TrainLogRecord> out;
  for_each_line(path, [&](const json& j) {
    TrainLogRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.mean_raw_reward = j.at("mean_raw_reward").get<double>();
    r.mean_shaped_reward = j.at("mean_shaped_reward").get<double>();
    r.mean_kl = j.at("mean_kl").get<double>();
    r.mean_length = j.at("mean_length").get<double>();
    r.clip_fraction = j.at("clip_fraction").get<double>();
    r.mean_ratio = j.at("mean_ratio").get<double>();
    r.ratio_cap_hits = j.at("ratio_cap_hits").get<std::size_t>();
    out.push_back(r);
  });
  return out;
}

namespace {

json report_json(const EvalReport& r) {
  std::vector<int> outcomes(r.per_task_outcomes.begin(), r.per_task_outcomes.end());
  return {{"dataset_id", r.dataset_id},      {"n_tasks", r.n_tasks},
          {"metric_name", r.metric_name},    {"value", r.value},
          {"per_task_outcomes", outcomes},   {"config_digest", r.config_digest}};
}

EvalReport report_from(const json& j) {
  EvalReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.n_tasks = j.at("n_tasks").get<std::size_t>();
  r.metric_name = j.at("metric_name").get<std::string>();
  r.value = j.at("value").get<double>();
  for (int v : j.at("per_task_outcomes").get<std::vector<int>>()) r.per_task_outcomes.push_back(v != 0);
  r.config_digest = j.at("config_digest").get<std::uint64_t>();
  if (r.per_task_outcomes.size() != r.n_tasks)
    throw FormatError("EvalReport outcome count does not match n_tasks");
  return r;
}

}  // namespace

std::string eval_report_to_json(const EvalReport& report) { return report_json(report).dump(); }

EvalReport eval_report_from_json(const std::string& line) {
  try {
    return report_from(json::parse(line));
  } catch (const json::exception& e) {
    throw FormatError(std::string("EvalReport record: ") + e.what());
  }
}

void write_eval_reports_jsonl(const std::filesystem::path& path,
                              std::span<const EvalReport> reports) {
  std::vector<json> rows;
  for (const auto& r : reports) rows.push_back(report_json(r));
  write_lines(path, rows);
}

std::vector<EvalReport> read_eval_reports_jsonl(const std::filesystem::path& path) {
  std::vector<EvalReport> out;
  for_each_line(path, [&](const json& j) { out.push_back(report_from(j)); });
  return out;
}

}  // namespace rlhf
