#include "ecrd/supervisor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ecrd {

std::string_view to_string(TriggerReason reason) {
    switch (reason) {
        case TriggerReason::knee_singleton: return "knee_singleton";
        case TriggerReason::margin_above_delta: return "margin_above_delta";
        case TriggerReason::margin_within_delta: return "margin_within_delta";
    }
    return "unknown";
}

TriggerReason trigger_reason_from_string(std::string_view text) {
    if (text == "knee_singleton") return TriggerReason::knee_singleton;
    if (text == "margin_above_delta") return TriggerReason::margin_above_delta;
    if (text == "margin_within_delta") return TriggerReason::margin_within_delta;
    throw std::invalid_argument("unknown trigger reason '" + std::string(text) + "'");
}

RestrictedDistribution mass_match(const RestrictedDistribution& r, const CandidateSet& cands) {
    if (!(cands.covered_mass > 0.0)) throw std::invalid_argument("degenerate candidate mass");
    if (r.entries.size() != cands.candidates.size()) {
        throw std::invalid_argument("evidence distribution does not match the candidate set");
    }
    const double r_mass = r.mass();
    if (!(r_mass > 0.0)) throw std::invalid_argument("evidence distribution has no mass");

    RestrictedDistribution out;
    out.entries.reserve(r.entries.size());
    const double scale = cands.covered_mass / r_mass;
    for (const auto& e : r.entries) {
        if (!cands.contains(e.token)) throw std::invalid_argument("evidence distribution leaves the candidate set");
        out.entries.push_back({e.token, e.prob * scale});
    }
    return out;
}

MixtureOutcome negotiate(const TokenDistribution& base, const RestrictedDistribution& r_tilde,
                         const CandidateSet& cands) {
    if (base.empty()) throw std::invalid_argument("empty distribution");
    for (const auto& c : cands.candidates) {
        if (!base.contains(c.token) || base.prob(c.token) != c.prob) {
            throw std::invalid_argument("candidate set was not derived from this base distribution");
        }
    }
    for (const auto& e : r_tilde.entries) {
        if (!cands.contains(e.token)) throw std::invalid_argument("mass-matched distribution leaves the candidate set");
    }

    double alpha = 0.0;
    for (const auto& tp : base.probs()) alpha = std::max(alpha, tp.prob);

    std::vector<TokenProb> mixed;
    mixed.reserve(base.enumerated());
    double raw_mass = alpha * base.residual_mass();
    for (const auto& tp : base.probs()) {
        double u = alpha * tp.prob;
        if (cands.contains(tp.token)) u += (1.0 - alpha) * r_tilde.prob(tp.token);
        mixed.push_back({tp.token, u});
        raw_mass += u;
    }
    if (!(raw_mass > 0.0)) throw std::invalid_argument("mixture has no mass");

    for (auto& tp : mixed) tp.prob /= raw_mass;
    const double residual = alpha * base.residual_mass() / raw_mass;

    MixtureOutcome out{TokenDistribution(base.vocab_size(), std::move(mixed), residual), alpha, 0.0, raw_mass, {}, {}};
    const auto ranked = sort_descending(out.p_mix);
    out.top1 = ranked[0];
    if (ranked.size() >= 2) {
        out.top2 = ranked[1];
        out.margin = ranked[0].prob - ranked[1].prob;
    } else {
        out.margin = ranked[0].prob;
    }
    return out;
}

TriggerDecision decide_trigger(double margin, std::size_t knee_index, double delta) {
    if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
    if (knee_index <= 1) return {false, TriggerReason::knee_singleton, delta};
    if (margin <= delta) return {true, TriggerReason::margin_within_delta, delta};
    return {false, TriggerReason::margin_above_delta, delta};
}

TriggerDecision decide_trigger(const MixtureOutcome& outcome, const CandidateSet& cands, double delta) {
    return decide_trigger(outcome.margin, cands.knee_index, delta);
}

}  // namespace ecrd
