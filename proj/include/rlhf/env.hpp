#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rlhf/common.hpp"

namespace rlhf {

using Token = std::uint8_t;
using TokenSeq = std::vector<Token>;

// Token ids. Digits occupy 0..9.
namespace tok {
inline constexpr Token kNeg = 10;    // sign of a negative number
inline constexpr Token kPlus = 11;
inline constexpr Token kMinus = 12;  // binary subtraction
inline constexpr Token kEq = 13;
inline constexpr Token kSep = 14;  // step separator
inline constexpr Token kEnd = 15;  // end of response
}  // namespace tok

struct Vocabulary {
  static constexpr int kSize = 16;
  static constexpr bool contains(int t) { return t >= 0 && t < kSize; }
  static constexpr bool is_digit(Token t) { return t <= 9; }
  static constexpr bool is_terminator(Token t) { return t == tok::kSep || t == tok::kEnd; }
  static constexpr bool is_operator(Token t) { return t == tok::kPlus || t == tok::kMinus; }
  static const char* symbol(Token t);
};

/// Human-readable rendering, e.g. "3 + -4 =" or "-1 | 5 $".
std::string render(std::span<const Token> tokens);

/// Canonical token rendering of an integer: optional sign token, then digits.
TokenSeq encode_int(int value);

/// Parses a sign-plus-digits token run. Empty, stray symbols or more than
/// nine digits give nullopt.
std::optional<int> parse_int(std::span<const Token> tokens);

/// Synthetic arithmetic-chain problem: a0 op1 a1 ... op_d a_d =
struct Task {
  std::uint64_t seed = 0;
  int difficulty = 0;
  TokenSeq prompt_tokens;
  std::vector<int> ground_truth_steps;  // running value after each operator
  int final_answer = 0;

  std::uint64_t id() const { return seed; }
  bool operator==(const Task&) const = default;
};

/// A token sequence split into steps. Boundaries are always recomputed from
/// the separator/end tokens, never taken from the producer.
class Response {
 public:
  Response() = default;
  explicit Response(TokenSeq tokens);

  const TokenSeq& tokens() const { return tokens_; }
  /// Exclusive end index of each step; the last entry equals tokens().size().
  const std::vector<std::size_t>& step_boundaries() const { return boundaries_; }
  const std::vector<std::optional<int>>& parsed_steps() const { return parsed_; }
  std::size_t num_steps() const { return boundaries_.size(); }
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }

  /// Tokens [0, step_boundaries()[i]).
  std::span<const Token> prefix_through_step(std::size_t i) const;

  bool operator==(const Response& o) const { return tokens_ == o.tokens_; }

 private:
  TokenSeq tokens_;
  std::vector<std::size_t> boundaries_;
  std::vector<std::optional<int>> parsed_;
};

/// Operand range and operator set of the generator.
inline constexpr int kOperandMin = -9;
inline constexpr int kOperandMax = 9;
inline constexpr int kNumOperators = 2;

Task generate_task(std::uint64_t seed, int difficulty);

/// Reconstructs a Task from its prompt and checks it is well formed.
Task task_from_prompt(std::uint64_t seed, std::span<const Token> prompt);

/// The correct step-by-step answer: "s1 | s2 | ... | sd $".
Response canonical_response(const Task& task);

bool verify(const Task& task, const Response& response);
bool verify_step(const Task& task, const Response& response, std::size_t step_index);

/// Number of distinct prompts of the given difficulty.
double task_space_size(int difficulty);

/// n distinct tasks (by prompt) with difficulty drawn uniformly from the
/// inclusive range. Throws ExhaustionError if the range cannot hold n prompts.
std::vector<Task> generate_dataset(std::size_t n_prompts, std::pair<int, int> difficulty_range,
                                   std::uint64_t seed);

}  // namespace rlhf
