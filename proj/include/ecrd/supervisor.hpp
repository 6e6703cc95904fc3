#pragma once
// Mass matching, the negotiated base/evidence mixture, and the trigger rule.

#include <optional>
#include <string_view>

#include "ecrd/dist_core.hpp"

namespace ecrd {

inline constexpr double kDefaultDelta = 0.08;

struct MixtureOutcome {
    TokenDistribution p_mix;  // renormalized over the full vocabulary
    double alpha = 0.0;       // base top-1 probability
    double margin = 0.0;      // top1 - top2 of p_mix
    double raw_mass = 0.0;    // total mass before renormalization
    TokenProb top1;
    std::optional<TokenProb> top2;
};

enum class TriggerReason { knee_singleton, margin_above_delta, margin_within_delta };

std::string_view to_string(TriggerReason reason);
TriggerReason trigger_reason_from_string(std::string_view text);

struct TriggerDecision {
    bool fired = false;
    TriggerReason reason = TriggerReason::knee_singleton;
    double delta = kDefaultDelta;
};

/// Rescales r so its mass on C equals the base mass there.
/// Throws std::invalid_argument("degenerate candidate mass") when that mass is 0.
RestrictedDistribution mass_match(const RestrictedDistribution& r, const CandidateSet& cands);

/// alpha * p + (1 - alpha) * r~ on C and alpha * p elsewhere, then renormalized.
MixtureOutcome negotiate(const TokenDistribution& base, const RestrictedDistribution& r_tilde,
                         const CandidateSet& cands);

/// Fires iff the knee kept more than one candidate and the margin is <= delta.
TriggerDecision decide_trigger(const MixtureOutcome& outcome, const CandidateSet& cands, double delta);
TriggerDecision decide_trigger(double margin, std::size_t knee_index, double delta);

}  // namespace ecrd
