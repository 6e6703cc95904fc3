#pragma once
// Token distributions, deterministic ordering and knee truncation.
//
// Everything here is an immutable value or a pure function; instances can be
// shared freely between decode streams.

#include <compare>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ecrd {

/// Index into a vocabulary table. Surfaces live in `Vocabulary`.
struct TokenId {
    std::int32_t value = 0;

    constexpr auto operator<=>(const TokenId&) const = default;
};

struct TokenProb {
    TokenId token;
    double prob = 0.0;

    bool operator==(const TokenProb&) const = default;
};

/// Descending probability, ties broken by ascending token id.
constexpr bool ranks_before(const TokenProb& a, const TokenProb& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
}

inline constexpr double kMassTolerance = 1e-6;

/// A next-token distribution that may enumerate only part of the vocabulary.
/// Whatever is not enumerated is carried as `residual_mass`.
class TokenDistribution {
public:
    TokenDistribution() = default;

    /// Validates probabilities and the total mass; throws std::invalid_argument.
    TokenDistribution(std::size_t vocab_size, std::vector<TokenProb> probs, double residual_mass);

    /// Builds a distribution whose residual is `1 - sum(probs)` clamped to [0, 1].
    static TokenDistribution with_implicit_residual(std::size_t vocab_size, std::vector<TokenProb> probs);

    std::size_t vocab_size() const noexcept { return vocab_size_; }
    std::span<const TokenProb> probs() const noexcept { return probs_; }
    double residual_mass() const noexcept { return residual_mass_; }
    bool empty() const noexcept { return probs_.empty(); }
    std::size_t enumerated() const noexcept { return probs_.size(); }

    /// Probability of an enumerated token, 0 when absent.
    double prob(TokenId id) const noexcept;
    bool contains(TokenId id) const noexcept;

private:
    std::size_t vocab_size_ = 0;
    std::vector<TokenProb> probs_;
    double residual_mass_ = 1.0;
};

struct CandidateSet {
    std::vector<TokenProb> candidates;  // descending, tie order by id
    std::size_t knee_index = 0;         // == candidates.size()
    double covered_mass = 0.0;

    bool contains(TokenId id) const noexcept;
    std::vector<TokenId> tokens() const;
};

/// A distribution supported on a candidate set; entries follow candidate order.
struct RestrictedDistribution {
    std::vector<TokenProb> entries;

    double mass() const noexcept;
    double prob(TokenId id) const noexcept;
};

/// Enumerated tokens in rank order. Throws std::invalid_argument("empty distribution").
std::vector<TokenProb> sort_descending(const TokenDistribution& dist);

/// Largest-gap truncation over the enumerated tokens. Gap ties resolve to the
/// smallest k; residual mass never takes part.
CandidateSet knee_truncate(const TokenDistribution& dist);

}  // namespace ecrd

template <>
struct std::hash<ecrd::TokenId> {
    std::size_t operator()(const ecrd::TokenId& t) const noexcept {
        return std::hash<std::int32_t>{}(t.value);
    }
};
