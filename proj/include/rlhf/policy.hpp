#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rlhf/common.hpp"
#include "rlhf/env.hpp"
#include "rlhf/features.hpp"

namespace rlhf {

/// Softmax next-token policy.
///
///   logits[v] = phi . context_weights[:, v] + u . embedding[v]
///   u         = (1/W) sum_p tag_p * embedding[window_p]
///
/// phi is the fixed featurizer output; u mean-pools the learned embeddings of
/// the last W generated tokens, each scaled elementwise by a fixed positional
/// tag. `capacity` is the embedding width d.
struct PolicyParams {
  int capacity = 0;
  RowMatrix embedding;        // [vocab x d]
  RowMatrix context_weights;  // [feature_dim x vocab]

  static PolicyParams zeros(int capacity);
  /// Zero context weights, N(0, scale^2) embeddings.
  static PolicyParams init(int capacity, std::uint64_t seed, double scale = 0.1);

  bool all_finite() const;
  std::uint64_t checksum() const;
  bool operator==(const PolicyParams& o) const {
    return capacity == o.capacity && embedding == o.embedding && context_weights == o.context_weights;
  }

  PolicyParams& operator+=(const PolicyParams& o);
  PolicyParams& operator*=(double s);
};

struct ValueParams {
  Vector weights;  // [feature_dim]
  double bias = 0.0;

  static ValueParams zeros();
  bool all_finite() const;
  bool operator==(const ValueParams& o) const { return weights == o.weights && bias == o.bias; }
};

/// Everything the policy needs at one decoding position.
struct Context {
  FeatureVector phi;
  WindowTokens window;
};

Context make_context(std::span<const Token> prompt, std::span<const Token> prefix);

struct Trajectory {
  std::uint64_t task_ref = 0;
  Response response;
  std::vector<double> token_logprobs;  // temperature-1 log-probs
  std::uint64_t context_features_digest = 0;
  bool forced_end = false;  // the final END was appended at max_tokens, not sampled

  /// Tokens the policy actually chose.
  std::size_t sampled_tokens() const { return response.size() - (forced_end ? 1 : 0); }
};

/// Fixed positional tag of window slot p (length d).
Vector positional_tag(std::size_t p, int capacity);

std::vector<double> next_token_distribution(const PolicyParams& params, const Context& ctx);

/// Dense-feature form; `features` must have length feature_dim().
std::vector<double> next_token_distribution(const PolicyParams& params,
                                            std::span<const double> features,
                                            const WindowTokens& window);

std::vector<double> next_token_logits(const PolicyParams& params, const Context& ctx);

/// Samples a response. Logits are divided by `temperature` for sampling while
/// the recorded log-probs are those of the untempered policy. A response that
/// reaches max_tokens without an end marker gets one forced into its last slot.
Trajectory sample_response(const PolicyParams& params, const Task& task, double temperature,
                           std::size_t max_tokens, Rng& rng);

/// Continues `prefix` to a full response of at most max_tokens tokens.
/// temperature == 0 decodes greedily. Returns the whole token sequence.
TokenSeq complete_response(const PolicyParams& params, const Task& task,
                           std::span<const Token> prefix, double temperature,
                           std::size_t max_tokens, Rng* rng);

Response greedy_decode(const PolicyParams& params, const Task& task, std::size_t max_tokens);

/// Per-token log-probabilities; `temperature` selects the tempered policy
/// softmax(logits / T).
std::vector<double> logprob(const PolicyParams& params, const Task& task, const Response& response,
                            double temperature = 1.0);

/// Gradient of sum_t log pi(token_t | prefix_t).
PolicyParams grad_logprob(const PolicyParams& params, const Task& task, const Response& response);

/// Row-sparse gradient accumulator for the policy: only touched rows of the
/// context map are stored and cleared.
class PolicyGradient {
 public:
  explicit PolicyGradient(const PolicyParams& shape);

  /// Adds sum_t coeff[t] * grad log pi(token_t | prefix_t).
  void accumulate(const PolicyParams& params, const Task& task, const Response& response,
                  std::span<const double> coeff, double temperature = 1.0);
  void add(const PolicyGradient& other);
  void clear();
  bool all_finite() const;
  /// Euclidean norm over both blocks.
  double norm() const;
  /// params += step * gradient
  void apply(PolicyParams& params, double step) const;
  PolicyParams to_dense() const;

 private:
  RowMatrix context_;
  RowMatrix embedding_;
  std::vector<std::uint32_t> touched_;
  std::vector<char> is_touched_;
};

double value(const ValueParams& vp, const Task& task, std::span<const Token> response_prefix);
double value(const ValueParams& vp, const FeatureVector& phi);

/// Sampled KL estimate: sum_t log pi_a(y_t) - log pi_b(y_t).
double kl_estimate(const PolicyParams& a, const PolicyParams& b, const Task& task,
                   const Response& response);

}  // namespace rlhf
