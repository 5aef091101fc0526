#include "rlhf/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rlhf {
namespace {

constexpr std::size_t kVocab = Vocabulary::kSize;

Vector pooled_embedding(const PolicyParams& params, const WindowTokens& window) {
  Vector u = Vector::Zero(params.capacity);
  for (std::size_t p = 0; p < kWindow; ++p) {
    if (window[p] < 0) continue;
    u += positional_tag(p, params.capacity).cwiseProduct(params.embedding.row(window[p]).transpose());
  }
  return u / static_cast<double>(kWindow);
}

void check_shapes(const PolicyParams& params) {
  if (params.capacity < 1 || params.embedding.rows() != static_cast<Eigen::Index>(kVocab) ||
      params.embedding.cols() != params.capacity ||
      params.context_weights.rows() != static_cast<Eigen::Index>(feature_dim()) ||
      params.context_weights.cols() != static_cast<Eigen::Index>(kVocab))
    throw InvalidArgument("policy parameters have inconsistent shapes");
}

void check_tokens(const Response& response) {
  for (Token t : response.tokens())
    if (!Vocabulary::contains(t))
      throw InvalidArgument("response contains token " + std::to_string(t) +
                            " outside the vocabulary");
}

struct Generated {
  TokenSeq tokens;
  std::vector<double> logprobs;  // for the generated part only
  std::uint64_t digest = 0xcbf29ce484222325ULL;
  bool forced_end = false;
};

Generated generate(const PolicyParams& params, const Task& task, std::span<const Token> prefix,
                   double temperature, std::size_t max_tokens, Rng* rng) {
  check_shapes(params);
  Generated g;
  g.tokens.assign(prefix.begin(), prefix.end());
  if (!g.tokens.empty() && g.tokens.back() == tok::kEnd) return g;
  while (g.tokens.size() < max_tokens) {
    const Context ctx = make_context(task.prompt_tokens, g.tokens);
    g.digest = checksum_bytes(ctx.phi.index.data(), ctx.phi.index.size() * sizeof(std::uint32_t),
                              g.digest);
    g.digest = checksum_doubles(ctx.phi.value, g.digest);
    std::vector<double> logits = next_token_logits(params, ctx);
    std::vector<double> probs = logits;
    softmax_inplace(probs);

    Token next;
    if (g.tokens.size() + 1 == max_tokens) {
      next = tok::kEnd;
      g.forced_end = true;
    } else if (temperature == 0.0) {
      next = static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else if (temperature == 1.0) {
      next = static_cast<Token>(sample_index(probs, *rng));
    } else {
      std::vector<double> tempered(kVocab);
      for (std::size_t v = 0; v < kVocab; ++v) tempered[v] = logits[v] / temperature;
      softmax_inplace(tempered);
      next = static_cast<Token>(sample_index(tempered, *rng));
    }
    g.tokens.push_back(next);
    g.logprobs.push_back(std::log(probs[next]));
    if (next == tok::kEnd) break;
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// parameters

PolicyParams PolicyParams::zeros(int capacity) {
  if (capacity < 1) throw InvalidArgument("policy capacity must be >= 1");
  PolicyParams p;
  p.capacity = capacity;
  p.embedding = RowMatrix::Zero(kVocab, capacity);
  p.context_weights = RowMatrix::Zero(feature_dim(), kVocab);
  return p;
}

PolicyParams PolicyParams::init(int capacity, std::uint64_t seed, double scale) {
  PolicyParams p = zeros(capacity);
  Rng rng(derive_seed(seed, 0x706f6c6963ULL));
  for (Eigen::Index i = 0; i < p.embedding.size(); ++i) p.embedding.data()[i] = scale * rng.normal();
  return p;
}

bool PolicyParams::all_finite() const {
  return embedding.allFinite() && context_weights.allFinite();
}

std::uint64_t PolicyParams::checksum() const {
  std::uint64_t h = checksum_bytes(&capacity, sizeof(capacity));
  h = checksum_doubles({embedding.data(), static_cast<std::size_t>(embedding.size())}, h);
  return checksum_doubles({context_weights.data(), static_cast<std::size_t>(context_weights.size())}, h);
}

PolicyParams& PolicyParams::operator+=(const PolicyParams& o) {
  embedding += o.embedding;
  context_weights += o.context_weights;
  return *this;
}

PolicyParams& PolicyParams::operator*=(double s) {
  embedding *= s;
  context_weights *= s;
  return *this;
}

ValueParams ValueParams::zeros() { return {Vector::Zero(feature_dim()), 0.0}; }

bool ValueParams::all_finite() const { return weights.allFinite() && std::isfinite(bias); }

// ---------------------------------------------------------------------------
// forward

Context make_context(std::span<const Token> prompt, std::span<const Token> prefix) {
  return {featurize_sparse(prompt, prefix), window_tokens(prefix)};
}

Vector positional_tag(std::size_t p, int capacity) {
  Vector tag(capacity);
  for (int i = 0; i < capacity; ++i)
    tag[i] = 1.0 + 0.5 * std::cos(std::numbers::pi * static_cast<double>((p + 1) * (i + 1)) /
                                  static_cast<double>(kWindow + 1));
  return tag;
}

std::vector<double> next_token_logits(const PolicyParams& params, const Context& ctx) {
  const Vector u = pooled_embedding(params, ctx.window);
  std::vector<double> logits(kVocab, 0.0);
  for (std::size_t i = 0; i < ctx.phi.nnz(); ++i) {
    const double x = ctx.phi.value[i];
    const auto row = params.context_weights.row(ctx.phi.index[i]);
    for (std::size_t v = 0; v < kVocab; ++v) logits[v] += x * row[v];
  }
  for (std::size_t v = 0; v < kVocab; ++v) logits[v] += params.embedding.row(v).dot(u);
  return logits;
}

std::vector<double> next_token_distribution(const PolicyParams& params, const Context& ctx) {
  check_shapes(params);
  for (auto i : ctx.phi.index)
    if (i >= feature_dim()) throw InvalidArgument("feature index out of range");
  std::vector<double> p = next_token_logits(params, ctx);
  softmax_inplace(p);
  return p;
}

std::vector<double> next_token_distribution(const PolicyParams& params,
                                            std::span<const double> features,
                                            const WindowTokens& window) {
  if (features.size() != feature_dim())
    throw InvalidArgument("feature vector has length " + std::to_string(features.size()) +
                          ", expected " + std::to_string(feature_dim()));
  Context ctx;
  ctx.window = window;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i] == 0.0) continue;
    ctx.phi.index.push_back(static_cast<std::uint32_t>(i));
    ctx.phi.value.push_back(features[i]);
  }
  return next_token_distribution(params, ctx);
}

Trajectory sample_response(const PolicyParams& params, const Task& task, double temperature,
                           std::size_t max_tokens, Rng& rng) {
  if (!(temperature > 0.0)) throw InvalidArgument("sample_response: temperature must be > 0");
  if (max_tokens < 1) throw InvalidArgument("sample_response: max_tokens must be >= 1");
  Generated g = generate(params, task, {}, temperature, max_tokens, &rng);
  Trajectory t;
  t.task_ref = task.id();
  t.response = Response(std::move(g.tokens));
  t.token_logprobs = std::move(g.logprobs);
  t.context_features_digest = g.digest;
  t.forced_end = g.forced_end;
  return t;
}

TokenSeq complete_response(const PolicyParams& params, const Task& task,
                           std::span<const Token> prefix, double temperature,
                           std::size_t max_tokens, Rng* rng) {
  if (temperature < 0.0) throw InvalidArgument("complete_response: negative temperature");
  if (temperature > 0.0 && rng == nullptr)
    throw InvalidArgument("complete_response: sampling needs a random stream");
  return generate(params, task, prefix, temperature, max_tokens, rng).tokens;
}

Response greedy_decode(const PolicyParams& params, const Task& task, std::size_t max_tokens) {
  if (max_tokens < 1) throw InvalidArgument("greedy_decode: max_tokens must be >= 1");
  return Response(generate(params, task, {}, 0.0, max_tokens, nullptr).tokens);
}

std::vector<double> logprob(const PolicyParams& params, const Task& task, const Response& response,
                            double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("logprob: temperature must be > 0");
  check_shapes(params);
  check_tokens(response);
  const auto& toks = response.tokens();
  std::vector<double> out(toks.size());
  for (std::size_t t = 0; t < toks.size(); ++t) {
    const Context ctx = make_context(task.prompt_tokens, std::span(toks).first(t));
    std::vector<double> p = next_token_logits(params, ctx);
    if (temperature != 1.0)
      for (double& x : p) x /= temperature;
    softmax_inplace(p);
    out[t] = std::log(p[toks[t]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradients

PolicyGradient::PolicyGradient(const PolicyParams& shape)
    : context_(RowMatrix::Zero(shape.context_weights.rows(), shape.context_weights.cols())),
      embedding_(RowMatrix::Zero(shape.embedding.rows(), shape.embedding.cols())),
      is_touched_(static_cast<std::size_t>(shape.context_weights.rows()), 0) {}

void PolicyGradient::accumulate(const PolicyParams& params, const Task& task,
                                const Response& response, std::span<const double> coeff,
                                double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("accumulate: temperature must be > 0");
  check_shapes(params);
  check_tokens(response);
  const auto& toks = response.tokens();
  if (coeff.size() != toks.size()) throw InvalidArgument("accumulate: one coefficient per token");
  const int d = params.capacity;
  std::vector<Vector> tags;
  for (std::size_t p = 0; p < kWindow; ++p) tags.push_back(positional_tag(p, d));

  for (std::size_t t = 0; t < toks.size(); ++t) {
    if (coeff[t] == 0.0) continue;
    const Context ctx = make_context(task.prompt_tokens, std::span(toks).first(t));
    const Vector u = pooled_embedding(params, ctx.window);
    std::vector<double> g = next_token_logits(params, ctx);
    if (temperature != 1.0)
      for (double& x : g) x /= temperature;
    softmax_inplace(g);
    for (double& x : g) x = -x;
    g[toks[t]] += 1.0;  // onehot - softmax, per unit of logit/T
    for (double& x : g) x *= coeff[t] / temperature;

    for (std::size_t i = 0; i < ctx.phi.nnz(); ++i) {
      const std::uint32_t r = ctx.phi.index[i];
      if (!is_touched_[r]) {
        is_touched_[r] = 1;
        touched_.push_back(r);
      }
      auto row = context_.row(r);
      for (std::size_t v = 0; v < kVocab; ++v) row[v] += ctx.phi.value[i] * g[v];
    }
    Vector du = Vector::Zero(d);
    for (std::size_t v = 0; v < kVocab; ++v) {
      embedding_.row(v) += g[v] * u.transpose();
      du += g[v] * params.embedding.row(v).transpose();
    }
    for (std::size_t p = 0; p < kWindow; ++p) {
      if (ctx.window[p] < 0) continue;
      embedding_.row(ctx.window[p]) += (tags[p].cwiseProduct(du) / static_cast<double>(kWindow)).transpose();
    }
  }
}

void PolicyGradient::add(const PolicyGradient& other) {
  for (std::uint32_t r : other.touched_) {
    if (!is_touched_[r]) {
      is_touched_[r] = 1;
      touched_.push_back(r);
    }
    context_.row(r) += other.context_.row(r);
  }
  embedding_ += other.embedding_;
}

void PolicyGradient::clear() {
  for (std::uint32_t r : touched_) {
    context_.row(r).setZero();
    is_touched_[r] = 0;
  }
  touched_.clear();
  embedding_.setZero();
}

bool PolicyGradient::all_finite() const {
  if (!embedding_.allFinite()) return false;
  for (std::uint32_t r : touched_)
    if (!context_.row(r).allFinite()) return false;
  return true;
}

double PolicyGradient::norm() const {
  double sq = embedding_.squaredNorm();
  for (std::uint32_t r : touched_) sq += context_.row(r).squaredNorm();
  return std::sqrt(sq);
}

void PolicyGradient::apply(PolicyParams& params, double step) const {
  for (std::uint32_t r : touched_) params.context_weights.row(r) += step * context_.row(r);
  params.embedding += step * embedding_;
}

PolicyParams PolicyGradient::to_dense() const {
  PolicyParams g;
  g.capacity = static_cast<int>(embedding_.cols());
  g.embedding = embedding_;
  g.context_weights = context_;
  return g;
}

PolicyParams grad_logprob(const PolicyParams& params, const Task& task, const Response& response) {
  PolicyGradient acc(params);
  const std::vector<double> ones(response.size(), 1.0);
  acc.accumulate(params, task, response, ones);
  return acc.to_dense();
}

// ---------------------------------------------------------------------------
// value head and KL

double value(const ValueParams& vp, const FeatureVector& phi) {
  if (vp.weights.size() != static_cast<Eigen::Index>(feature_dim()))
    throw InvalidArgument("value weights have the wrong length");
  return phi.dot(vp.weights) + vp.bias;
}

double value(const ValueParams& vp, const Task& task, std::span<const Token> response_prefix) {
  return value(vp, featurize_sparse(task.prompt_tokens, response_prefix));
}

double kl_estimate(const PolicyParams& a, const PolicyParams& b, const Task& task,
                   const Response& response) {
  const auto la = logprob(a, task, response);
  const auto lb = logprob(b, task, response);
  double s = 0.0;
  for (std::size_t t = 0; t < la.size(); ++t) s += la[t] - lb[t];
  return s;
}

}  // namespace rlhf
