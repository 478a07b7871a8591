#pragma once

#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "searchrl/common.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

using TokenId = std::int32_t;

/// A token is an id plus the exact text it contributes; concatenating the
/// pieces of a sequence reproduces its text byte for byte.
struct Token {
  TokenId id = 0;
  std::string piece;

  bool operator==(const Token&) const = default;
};

inline std::string concat_pieces(std::span<const Token> tokens) {
  std::string out;
  for (const auto& t : tokens) out += t.piece;
  return out;
}

inline std::vector<std::string> pieces_of(std::span<const Token> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.piece);
  return out;
}

/// What a policy conditions on. `prompt` is the full prompt text (system
/// template plus question); `question` is the bare user question. `observed`
/// lists the injected (environment) spans of the sequence response ++
/// continuation in ascending order, and `observations` holds the inner
/// document text of each span.
struct Context {
  std::string_view question;
  std::string_view prompt;
  std::span<const Token> response;
  std::span<const TokenSpan> observed;
  std::span<const std::string> observations;
};

struct GenerateRequest {
  double temperature = 1.0;
  std::vector<std::string> stop;  // generation ends after a stop string, inclusive
  std::size_t max_tokens = 1;
};

/// Sampled tokens with their untempered log-probabilities (exactly what
/// score() returns for the same tokens).
struct Generation {
  std::vector<Token> tokens;
  std::vector<double> logprobs;
};

/// A generative policy. Implementations must be safe to call concurrently
/// through const methods.
class Policy {
 public:
  virtual ~Policy() = default;

  /// Lossless tokenization; used to turn injected documents into tokens.
  virtual std::vector<Token> tokenize(std::string_view text) const = 0;

  virtual Generation generate(const Context& ctx, const GenerateRequest& req,
                              Rng& rng) const = 0;

  /// Per-token log-probs of `continuation` after the context. Tokens inside
  /// observed spans score 0.
  virtual std::vector<double> score(const Context& ctx,
                                    std::span<const Token> continuation) const = 0;

  virtual std::string descriptor() const = 0;
};

/// A policy whose log-probs are differentiable in a flat parameter vector.
template <typename P>
concept TrainablePolicy =
    std::derived_from<P, Policy> &&
    requires(P& p, const P& cp, const Context& ctx,
             std::span<const Token> cont, std::span<const double> coeffs,
             std::span<double> grad) {
      { cp.parameter_count() } -> std::convertible_to<std::size_t>;
      { p.parameters() } -> std::same_as<std::span<double>>;
      { cp.parameters() } -> std::same_as<std::span<const double>>;
      // grad += sum_t coeffs[t] * d log pi(cont[t] | ...) / d params
      cp.accumulate_logprob_grad(ctx, cont, coeffs, grad);
      { cp.snapshot() } -> std::same_as<P>;
    };

}  // namespace searchrl
