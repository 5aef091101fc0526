#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlhf/annotate.hpp"
#include "rlhf/env.hpp"
#include "rlhf/eval.hpp"
#include "rlhf/policy.hpp"
#include "rlhf/reward.hpp"
#include "rlhf/rl.hpp"

namespace rlhf {

// Binary checkpoints: magic, format version, kind, shape header, little-endian
// doubles, then a checksum over everything before it. Loading throws
// FormatError on a bad magic, version, kind, checksum, truncation, or on a
// shape that does not match this build (or the expected size when given).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_policy(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams load_policy(const std::filesystem::path& path,
                         std::optional<int> expected_capacity = std::nullopt);

void save_reward_model(const std::filesystem::path& path, const RewardModelParams& params);
RewardModelParams load_reward_model(const std::filesystem::path& path,
                                    std::optional<int> expected_hidden_size = std::nullopt);

void save_value(const std::filesystem::path& path, const ValueParams& params);
ValueParams load_value(const std::filesystem::path& path);

// JSONL records. Token sequences are integer arrays. Records that refer to a
// task carry `task_ref` (the task id) and are resolved against a task list on
// read; an unknown reference is a FormatError.

std::string task_to_json(const Task& task);
Task task_from_json(const std::string& line);
void write_tasks_jsonl(const std::filesystem::path& path, std::span<const Task> tasks);
std::vector<Task> read_tasks_jsonl(const std::filesystem::path& path);

void write_rm_dataset_jsonl(const std::filesystem::path& path, const RmDataset& data);
RmDataset read_rm_dataset_jsonl(const std::filesystem::path& path, std::span<const Task> tasks);

void write_step_labels_jsonl(const std::filesystem::path& path,
                             std::span<const StepLabeledExample> examples);
std::vector<StepLabeledExample> read_step_labels_jsonl(const std::filesystem::path& path,
                                                       std::span<const Task> tasks);

void write_train_log_jsonl(const std::filesystem::path& path,
                           std::span<const TrainLogRecord> records);
std::vector<TrainLogRecord> read_train_log_jsonl(const std::filesystem::path& path);

std::string eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& line);
void write_eval_reports_jsonl(const std::filesystem::path& path,
                              std::span<const EvalReport> reports);
std::vector<EvalReport> read_eval_reports_jsonl(const std::filesystem::path& path);

/// Writes `contents` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace rlhf
