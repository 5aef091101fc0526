#include "rlhf/env.hpp"

#include <cmath>
#include <set>

namespace rlhf {

const char* Vocabulary::symbol(Token t) {
  static constexpr const char* kSymbols[kSize] = {"0", "1", "2", "3", "4", "5", "6", "7",
                                                  "8", "9", "-", "+", "~", "=", "|", "$"};
  return contains(t) ? kSymbols[t] : "?";
}

std::string render(std::span<const Token> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token t = tokens[i];
    const bool glue = i > 0 && (Vocabulary::is_digit(t)) &&
                      (Vocabulary::is_digit(tokens[i - 1]) || tokens[i - 1] == tok::kNeg);
    if (i > 0 && !glue) out += ' ';
    out += Vocabulary::symbol(t);
  }
  return out;
}

TokenSeq encode_int(int value) {
  TokenSeq out;
  if (value < 0) out.push_back(tok::kNeg);
  const std::string digits = std::to_string(std::abs(value));
  for (char c : digits) out.push_back(static_cast<Token>(c - '0'));
  return out;
}

std::optional<int> parse_int(std::span<const Token> tokens) {
  std::size_t i = 0;
  bool neg = false;
  if (!tokens.empty() && tokens[0] == tok::kNeg) {
    neg = true;
    i = 1;
  }
  const std::size_t n_digits = tokens.size() - i;
  if (n_digits == 0 || n_digits > 9) return std::nullopt;
  long long v = 0;
  for (; i < tokens.size(); ++i) {
    if (!Vocabulary::is_digit(tokens[i])) return std::nullopt;
    v = v * 10 + tokens[i];
  }
  return static_cast<int>(neg ? -v : v);
}

Response::Response(TokenSeq tokens) : tokens_(std::move(tokens)) {
  for (Token t : tokens_)
    if (!Vocabulary::contains(t)) throw InvalidArgument("Response: token " + std::to_string(t) + " out of range");
  std::size_t start = 0;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!Vocabulary::is_terminator(tokens_[i])) continue;
    boundaries_.push_back(i + 1);
    parsed_.push_back(parse_int(std::span(tokens_).subspan(start, i - start)));
    start = i + 1;
  }
  if (start < tokens_.size()) {
    boundaries_.push_back(tokens_.size());
    parsed_.push_back(parse_int(std::span(tokens_).subspan(start)));
  }
}

std::span<const Token> Response::prefix_through_step(std::size_t i) const {
  if (i >= boundaries_.size()) throw InvalidArgument("prefix_through_step: step index out of range");
  return std::span(tokens_).first(boundaries_[i]);
}

Task generate_task(std::uint64_t seed, int difficulty) {
  if (difficulty < 1) throw InvalidArgument("generate_task: difficulty must be >= 1");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(difficulty)));
  Task task;
  task.seed = seed;
  task.difficulty = difficulty;
  int acc = static_cast<int>(rng.uniform_int(kOperandMin, kOperandMax));
  task.prompt_tokens = encode_int(acc);
  for (int k = 0; k < difficulty; ++k) {
    const bool plus = rng.uniform_int(0, kNumOperators - 1) == 0;
    const int operand = static_cast<int>(rng.uniform_int(kOperandMin, kOperandMax));
    task.prompt_tokens.push_back(plus ? tok::kPlus : tok::kMinus);
    for (Token t : encode_int(operand)) task.prompt_tokens.push_back(t);
    acc = plus ? acc + operand : acc - operand;
    task.ground_truth_steps.push_back(acc);
  }
  task.prompt_tokens.push_back(tok::kEq);
  task.final_answer = acc;
  return task;
}

Task task_from_prompt(std::uint64_t seed, std::span<const Token> prompt) {
  if (prompt.empty() || prompt.back() != tok::kEq)
    throw FormatError("task prompt must end with '='");
  Task task;
  task.seed = seed;
  task.prompt_tokens.assign(prompt.begin(), prompt.end());
  std::size_t start = 0;
  std::optional<int> acc;
  Token pending = 0;
  auto flush = [&](std::size_t end) {
    const auto v = parse_int(prompt.subspan(start, end - start));
    if (!v || *v < kOperandMin || *v > kOperandMax) throw FormatError("task prompt: bad operand");
    if (!acc) {
      acc = *v;
    } else {
      acc = pending == tok::kPlus ? *acc + *v : *acc - *v;
      task.ground_truth_steps.push_back(*acc);
    }
  };
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
    if (!Vocabulary::is_operator(prompt[i])) continue;
    flush(i);
    pending = prompt[i];
    start = i + 1;
  }
  flush(prompt.size() - 1);
  if (task.ground_truth_steps.empty()) throw FormatError("task prompt: no operator");
  task.difficulty = static_cast<int>(task.ground_truth_steps.size());
  task.final_answer = task.ground_truth_steps.back();
  return task;
}

Response canonical_response(const Task& task) {
  TokenSeq out;
  for (std::size_t k = 0; k < task.ground_truth_steps.size(); ++k) {
    for (Token t : encode_int(task.ground_truth_steps[k])) out.push_back(t);
    out.push_back(k + 1 == task.ground_truth_steps.size() ? tok::kEnd : tok::kSep);
  }
  return Response(std::move(out));
}

bool verify(const Task& task, const Response& response) {
  if (response.num_steps() == 0) return false;
  const auto& last = response.parsed_steps().back();
  return last.has_value() && *last == task.final_answer;
}

bool verify_step(const Task& task, const Response& response, std::size_t step_index) {
  if (step_index >= response.num_steps())
    throw InvalidArgument("verify_step: step index " + std::to_string(step_index) +
                          " out of range (" + std::to_string(response.num_steps()) + " steps)");
  if (step_index >= task.ground_truth_steps.size()) return false;
  const auto& v = response.parsed_steps()[step_index];
  return v.has_value() && *v == task.ground_truth_steps[step_index];
}

double task_space_size(int difficulty) {
  const double operands = kOperandMax - kOperandMin + 1;
  return std::pow(operands, difficulty + 1) * std::pow(kNumOperators, difficulty);
}

std::vector<Task> generate_dataset(std::size_t n_prompts, std::pair<int, int> difficulty_range,
                                   std::uint64_t seed) {
  const auto [lo, hi] = difficulty_range;
  if (n_prompts < 1) throw InvalidArgument("generate_dataset: n_prompts must be >= 1");
  if (lo < 1 || hi < lo) throw InvalidArgument("generate_dataset: bad difficulty range");
  double space = 0.0;
  for (int d = lo; d <= hi; ++d) space += task_space_size(d);
  if (static_cast<double>(n_prompts) > space)
    throw ExhaustionError("generate_dataset: " + std::to_string(n_prompts) +
                          " distinct prompts requested but only " +
                          std::to_string(static_cast<long long>(space)) + " exist");

  Rng rng(derive_seed(seed, 0x64617461ULL));
  std::set<TokenSeq> seen;
  std::vector<Task> out;
  out.reserve(n_prompts);
  // Saturated difficulty levels are skipped so filling a nearly exhausted
  // range still terminates.
  std::vector<std::size_t> count(hi - lo + 1, 0);
  while (out.size() < n_prompts) {
    int d = static_cast<int>(rng.uniform_int(lo, hi));
    if (static_cast<double>(count[d - lo]) >= task_space_size(d)) continue;
    Task t = generate_task(rng.next(), d);
    if (!seen.insert(t.prompt_tokens).second) continue;
    ++count[d - lo];
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace rlhf
