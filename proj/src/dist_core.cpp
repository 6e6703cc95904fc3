#include "ecrd/dist_core.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ecrd {

TokenDistribution::TokenDistribution(std::size_t vocab_size, std::vector<TokenProb> probs,
                                     double residual_mass)
    : vocab_size_(vocab_size), probs_(std::move(probs)), residual_mass_(residual_mass) {
    if (!(residual_mass_ >= 0.0) || residual_mass_ > 1.0 + kMassTolerance) {
        throw std::invalid_argument("residual mass outside [0, 1]");
    }
    if (probs_.size() > vocab_size_) {
        throw std::invalid_argument("more enumerated tokens than vocabulary entries");
    }
    std::unordered_set<TokenId> seen;
    double total = residual_mass_;
    for (const auto& tp : probs_) {
        if (!(tp.prob >= 0.0 && tp.prob <= 1.0)) {
            throw std::invalid_argument("probability outside [0, 1] for token " +
                                        std::to_string(tp.token.value));
        }
        if (tp.token.value < 0 || static_cast<std::size_t>(tp.token.value) >= vocab_size_) {
            throw std::invalid_argument("token id " + std::to_string(tp.token.value) +
                                        " outside vocabulary");
        }
        if (!seen.insert(tp.token).second) {
            throw std::invalid_argument("duplicate token id " + std::to_string(tp.token.value));
        }
        total += tp.prob;
    }
    if (std::abs(total - 1.0) > kMassTolerance) {
        throw std::invalid_argument("distribution mass " + std::to_string(total) + " != 1");
    }
}

TokenDistribution TokenDistribution::with_implicit_residual(std::size_t vocab_size,
                                                            std::vector<TokenProb> probs) {
    double sum = 0.0;
    for (const auto& tp : probs) sum += tp.prob;
    const double residual = std::clamp(1.0 - sum, 0.0, 1.0);
    return TokenDistribution(vocab_size, std::move(probs), residual);
}

double TokenDistribution::prob(TokenId id) const noexcept {
    for (const auto& tp : probs_) {
        if (tp.token == id) return tp.prob;
    }
    return 0.0;
}

bool TokenDistribution::contains(TokenId id) const noexcept {
    return std::any_of(probs_.begin(), probs_.end(), [&](const TokenProb& tp) { return tp.token == id; });
}

bool CandidateSet::contains(TokenId id) const noexcept {
    return std::any_of(candidates.begin(), candidates.end(),
                       [&](const TokenProb& tp) { return tp.token == id; });
}

std::vector<TokenId> CandidateSet::tokens() const {
    std::vector<TokenId> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates) out.push_back(c.token);
    return out;
}

double RestrictedDistribution::mass() const noexcept {
    double m = 0.0;
    for (const auto& e : entries) m += e.prob;
    return m;
}

double RestrictedDistribution::prob(TokenId id) const noexcept {
    for (const auto& e : entries) {
        if (e.token == id) return e.prob;
    }
    return 0.0;
}

std::vector<TokenProb> sort_descending(const TokenDistribution& dist) {
    if (dist.empty()) throw std::invalid_argument("empty distribution");
    std::vector<TokenProb> sorted(dist.probs().begin(), dist.probs().end());
    std::sort(sorted.begin(), sorted.end(), ranks_before);
    return sorted;
}

CandidateSet knee_truncate(const TokenDistribution& dist) {
    auto sorted = sort_descending(dist);

    std::size_t knee = 1;
    if (sorted.size() >= 2) {
        double best_gap = sorted[0].prob - sorted[1].prob;
        for (std::size_t k = 2; k < sorted.size(); ++k) {
            const double gap = sorted[k - 1].prob - sorted[k].prob;
            if (gap > best_gap) {  // strict: ties keep the smaller k
                best_gap = gap;
                knee = k;
            }
        }
    }

    CandidateSet out;
    sorted.resize(knee);
    out.candidates = std::move(sorted);
    out.knee_index = knee;
    for (const auto& c : out.candidates) out.covered_mass += c.prob;
    return out;
}

}  // namespace ecrd
