#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rlhf {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Error types. Everything derives from std::runtime_error / std::invalid_argument
// so callers that do not care can catch the std base.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ExhaustionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Selects the serial reference path or the OpenMP path of a data-parallel
// kernel. Both produce bit-identical results.
enum class Exec { serial, parallel };

/// 64-bit mixer (splitmix64 finalizer).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and up to two keys.
/// Used wherever work is split across prompts/steps so results do not depend
/// on scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                    std::uint64_t b = 0) {
  return mix64(mix64(mix64(base) ^ a) + b * 0x632be59bd9b4e019ULL);
}

/// Random stream. Wraps std::mt19937_64 (whose output sequence is fixed by
/// the standard) and derives every variate itself, so draws are identical
/// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi], unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Standard normal (Box-Muller, no caching).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Draws an index from a probability vector by inverse CDF.
std::size_t sample_index(std::span<const double> probs, Rng& rng);

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

/// In-place numerically stable softmax.
void softmax_inplace(std::span<double> logits);

/// Content checksum (FNV-1a over raw bytes).
std::uint64_t checksum_bytes(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

inline std::uint64_t checksum_doubles(std::span<const double> v,
                                      std::uint64_t h = 0xcbf29ce484222325ULL) {
  return checksum_bytes(v.data(), v.size() * sizeof(double), h);
}

double mean(std::span<const double> v);

}  // namespace rlhf
