#include "rlhf/features.hpp"

#include <algorithm>
#include <numeric>

namespace rlhf {
namespace {

constexpr std::size_t kVocab = Vocabulary::kSize;
constexpr std::size_t kBias = 0;
constexpr std::size_t kWindowBase = 1;

enum Family : std::size_t {
  kOpenTail,       // (emitted tokens of the open step, more steps follow?)
  kOpenSegment,    // (+ prompt segment consumed by the open step)
  kOpenLookup,     // (+ previous value)
  kOpenDigit,      // (+ sign and last digit of the previous value only)
  kClosedLookup,   // per closed step: (previous value, addend, step tokens, terminator)
  kClosedDigit,    // per closed step: (sign/last digit of previous value, addend, sign/last digit of step)
  kClosedShape,    // (step count, operation count, terminator)
  kNumFamilies
};

constexpr std::array<std::size_t, kNumFamilies> kBuckets = {512, 2048, 16384, 4096,
                                                            16384, 32768, 128};

constexpr std::array<std::size_t, kNumFamilies + 1> family_offsets() {
  std::array<std::size_t, kNumFamilies + 1> off{};
  off[0] = kWindowBase + kWindow * kVocab;
  for (std::size_t f = 0; f < kNumFamilies; ++f) off[f + 1] = off[f] + kBuckets[f];
  return off;
}
constexpr auto kOffsets = family_offsets();

constexpr Token kFieldBreak = 0xFE;
constexpr Token kNone = 0xFD;

class KeyHasher {
 public:
  explicit KeyHasher(std::size_t family) { byte(static_cast<std::uint8_t>(family)); }
  KeyHasher& field(std::span<const Token> toks) {
    for (Token t : toks) byte(t);
    return byte(kFieldBreak);
  }
  KeyHasher& field(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) byte(static_cast<std::uint8_t>(v >> (8 * i)));
    return byte(kFieldBreak);
  }
  std::uint64_t digest() const { return mix64(h_); }

 private:
  KeyHasher& byte(std::uint8_t b) {
    h_ = (h_ ^ b) * 0x100000001b3ULL;
    return *this;
  }
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

struct Steps {
  std::vector<std::span<const Token>> values;  // completed steps without terminator
  std::vector<Token> terminators;
  std::span<const Token> open;
};

Steps split_steps(std::span<const Token> prefix) {
  Steps s;
  std::size_t start = 0;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (!Vocabulary::is_terminator(prefix[i])) continue;
    s.values.push_back(prefix.subspan(start, i - start));
    s.terminators.push_back(prefix[i]);
    start = i + 1;
  }
  s.open = prefix.subspan(start);
  return s;
}

// segment 0 = first operand; segment k = operator k plus its operand
std::vector<std::span<const Token>> split_prompt(std::span<const Token> prompt) {
  std::vector<std::span<const Token>> segs;
  std::size_t end = prompt.size();
  if (end > 0 && prompt[end - 1] == tok::kEq) --end;
  std::size_t start = 0;
  for (std::size_t i = 0; i < end; ++i) {
    if (Vocabulary::is_operator(prompt[i]) && i > start) {
      segs.push_back(prompt.subspan(start, i - start));
      start = i;
    }
  }
  segs.push_back(prompt.subspan(start, end - start));
  return segs;
}

// sign flag and last digit of a value run; unparseable runs map to a sentinel
std::uint64_t sign_digit_key(std::span<const Token> value) {
  if (value.empty() || !Vocabulary::is_digit(value.back())) return 0xFFFF;
  const bool neg = value.front() == tok::kNeg;
  return (neg ? 100u : 0u) + value.back();
}

// signed addend a segment applies to the running value ("- -3" and "+ 3" share a key)
std::uint64_t addend_key(std::span<const Token> seg) {
  if (seg.size() < 2 || !Vocabulary::is_operator(seg[0])) return 0xFFFF;
  const auto v = parse_int(seg.subspan(1));
  if (!v) return 0xFFFF;
  return static_cast<std::uint64_t>(100 + (seg[0] == tok::kPlus ? *v : -*v));
}

}  // namespace

std::size_t feature_dim() { return kOffsets[kNumFamilies]; }

std::size_t window_block_offset() { return kWindowBase; }

WindowTokens window_tokens(std::span<const Token> prefix) {
  WindowTokens w;
  w.fill(-1);
  for (std::size_t p = 0; p < kWindow && p < prefix.size(); ++p)
    w[p] = prefix[prefix.size() - 1 - p];
  return w;
}

FeatureVector featurize_sparse(std::span<const Token> prompt, std::span<const Token> prefix) {
  std::vector<std::pair<std::uint32_t, double>> raw;
  raw.reserve(kWindow + kNumFamilies + 1);
  raw.emplace_back(kBias, 1.0);

  const WindowTokens w = window_tokens(prefix);
  for (std::size_t p = 0; p < kWindow; ++p)
    if (w[p] >= 0) raw.emplace_back(kWindowBase + p * kVocab + w[p], 1.0 / kWindow);

  auto emit = [&](Family f, const KeyHasher& key) {
    raw.emplace_back(kOffsets[f] + key.digest() % kBuckets[f], 1.0);
  };

  const auto segs = split_prompt(prompt);
  const std::size_t n_ops = segs.size() - 1;
  const Steps steps = split_steps(prefix);
  const std::size_t k = steps.values.size();
  const Token none[] = {kNone};

  auto segment = [&](std::size_t step) -> std::span<const Token> {
    return step + 1 < segs.size() ? segs[step + 1] : std::span<const Token>(none);
  };
  auto value_before = [&](std::size_t step) -> std::span<const Token> {
    return step == 0 ? segs[0] : steps.values[step - 1];
  };

  // open step k
  {
    const auto prev = value_before(k);
    const auto seg = segment(k);
    const std::uint64_t more = k + 1 < n_ops ? 1 : 0;
    emit(kOpenTail, KeyHasher(kOpenTail).field(steps.open).field(more));
    emit(kOpenSegment, KeyHasher(kOpenSegment).field(seg).field(steps.open).field(more));
    emit(kOpenLookup, KeyHasher(kOpenLookup).field(prev).field(addend_key(seg)).field(steps.open));
    emit(kOpenDigit,
         KeyHasher(kOpenDigit).field(sign_digit_key(prev)).field(addend_key(seg)).field(steps.open));
  }
  // every closed step
  for (std::size_t c = 0; c < k; ++c) {
    const auto prev = value_before(c);
    const auto addend = addend_key(segment(c));
    const std::uint64_t term = steps.terminators[c];
    emit(kClosedLookup,
         KeyHasher(kClosedLookup).field(prev).field(addend).field(steps.values[c]).field(term));
    emit(kClosedDigit, KeyHasher(kClosedDigit)
                           .field(sign_digit_key(prev))
                           .field(addend)
                           .field(sign_digit_key(steps.values[c]))
                           .field(term));
  }
  if (k > 0) {
    const std::uint64_t term = steps.terminators[k - 1];
    emit(kClosedShape, KeyHasher(kClosedShape).field(k).field(n_ops).field(term));
  }

  std::sort(raw.begin(), raw.end());
  FeatureVector fv;
  for (const auto& [i, v] : raw) {
    if (!fv.index.empty() && fv.index.back() == i) {
      fv.value.back() += v;
    } else {
      fv.index.push_back(i);
      fv.value.push_back(v);
    }
  }
  return fv;
}

std::vector<double> featurize(std::span<const Token> prompt, std::span<const Token> prefix) {
  const FeatureVector fv = featurize_sparse(prompt, prefix);
  std::vector<double> dense(feature_dim(), 0.0);
  for (std::size_t i = 0; i < fv.nnz(); ++i) dense[fv.index[i]] = fv.value[i];
  return dense;
}

}  // namespace rlhf
