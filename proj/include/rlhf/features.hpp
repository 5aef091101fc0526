#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "rlhf/env.hpp"

namespace rlhf {

/// Width of the sliding token window over the generated prefix.
inline constexpr std::size_t kWindow = 8;

/// Sparse, sorted, duplicate-free feature vector.
struct FeatureVector {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t nnz() const { return index.size(); }

  template <typename Row>
  double dot(const Row& dense) const {
    double s = 0.0;
    for (std::size_t i = 0; i < index.size(); ++i) s += value[i] * dense[index[i]];
    return s;
  }
};

/// The last kWindow tokens of the generated prefix, most recent first;
/// -1 marks padding.
using WindowTokens = std::array<int, kWindow>;

/// Fixed context featurizer shared by the policy, the value head and the
/// reward model.
///
/// Layout (block offsets are fixed, see feature_dim()):
///   bias                     always 1
///   window                   (offset, token) one-hots of the prefix window,
///                            each weighted 1/kWindow; padding is all-zero
///   open-step conjunctions   hashed tuples over the step being written:
///                            its emitted tokens, the prompt segment it
///                            consumes, and the previous step's value
///   closed-step conjunctions hashed tuples over the last completed step and
///                            the inputs that produced it
/// The prompt segment for step k is located by splitting the prompt at its
/// operator tokens, which stands in for attention to the relevant operand.
FeatureVector featurize_sparse(std::span<const Token> prompt, std::span<const Token> prefix);

/// Dense view of featurize_sparse, length feature_dim().
std::vector<double> featurize(std::span<const Token> prompt, std::span<const Token> prefix);

std::size_t feature_dim();

/// Start offset of the window block inside the feature vector.
std::size_t window_block_offset();

WindowTokens window_tokens(std::span<const Token> prefix);

}  // namespace rlhf
