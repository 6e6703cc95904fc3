#pragma once
// Evidence sentences, the append-only pool, and evidence-based token scoring.
//
// Scoring looks only at evidence text (its tokens). Region annotations ride
// along for interpretability and are never read by any scoring path.

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ecrd/dist_core.hpp"
#include "ecrd/model_backend.hpp"

namespace ecrd {

struct RegionAnnotation {
    std::array<double, 4> bbox{};  // x_min, y_min, x_max, y_max in image pixels
    std::optional<std::string> label;

    void validate() const;  // throws std::invalid_argument
    bool operator==(const RegionAnnotation&) const = default;
};

struct Provenance {
    enum class Kind { global_description, decider };

    Kind kind = Kind::global_description;
    std::optional<std::size_t> step;  // set for decider evidence

    static Provenance global() { return {}; }
    static Provenance from_decider(std::size_t step) { return {Kind::decider, step}; }
    bool operator==(const Provenance&) const = default;
};

struct Evidence {
    std::string id;
    std::string text;
    std::vector<TokenId> tokens;
    std::vector<RegionAnnotation> annotations;
    Provenance provenance;

    /// Tokenizes `text`; throws std::invalid_argument for an empty sentence.
    static Evidence make(std::string id, std::string text, const Vocabulary& vocab, Provenance provenance,
                         std::vector<RegionAnnotation> annotations = {});

    std::size_t length() const noexcept { return tokens.size(); }
};

class EvidencePool {
public:
    /// Throws std::invalid_argument on a duplicate id or an empty sentence.
    EvidencePool& append(Evidence ev);

    std::size_t size() const noexcept { return evidences_.size(); }
    bool empty() const noexcept { return evidences_.empty(); }
    const Evidence& operator[](std::size_t i) const { return evidences_.at(i); }
    std::span<const Evidence> evidences() const noexcept { return evidences_; }
    std::size_t count(Provenance::Kind kind) const noexcept;

    /// `include_tokens` adds each evidence's token ids, making the document
    /// readable without a vocabulary.
    nlohmann::json to_json(bool include_tokens = false) const;
    /// Uses stored token ids when present, otherwise tokenizes the text with
    /// `vocab` (which must then be non-null).
    static EvidencePool from_json(const nlohmann::json& doc, const Vocabulary* vocab);
    static EvidencePool from_json(const nlohmann::json& doc, const Vocabulary& vocab) { return from_json(doc, &vocab); }

private:
    std::vector<Evidence> evidences_;
};

/// Nearest IEEE binary16 value, for reduced-precision cache storage.
double round_to_half(double value) noexcept;

/// Conditionals p(token | e_<j) keyed by (evidence id, j, token). Safe for
/// concurrent lookups and inserts; re-inserting a key is a no-op.
class PrefixSupportCache {
public:
    enum class Precision { full, half };

    explicit PrefixSupportCache(Precision precision = Precision::full) : precision_(precision) {}

    std::optional<double> find(const std::string& evidence_id, std::size_t j, TokenId token) const;
    /// Returns the value as stored (rounded when precision is half).
    double insert(const std::string& evidence_id, std::size_t j, TokenId token, double prob);
    std::size_t size() const;
    Precision precision() const noexcept { return precision_; }

private:
    struct Key {
        std::string evidence_id;
        std::size_t j;
        std::int32_t token;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const noexcept;
    };

    Precision precision_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<Key, double, KeyHash> values_;
};

/// Text wrapper around each evidence prefix, e.g. "Evidence: {prefix}".
/// An empty template scores the bare prefix.
struct ScoringTemplate {
    std::vector<TokenId> lead;
    std::vector<TokenId> trail;

    static ScoringTemplate parse(std::string_view text, const Vocabulary& vocab);
    std::vector<TokenId> wrap(std::span<const TokenId> prefix) const;
};

class ScoringError : public std::runtime_error {
public:
    ScoringError(std::string evidence_id, std::size_t prefix_length, const std::string& cause)
        : std::runtime_error("scoring evidence '" + evidence_id + "' at prefix length " +
                             std::to_string(prefix_length) + ": " + cause),
          evidence_id_(std::move(evidence_id)),
          prefix_length_(prefix_length) {}

    const std::string& evidence_id() const noexcept { return evidence_id_; }
    std::size_t prefix_length() const noexcept { return prefix_length_; }

private:
    std::string evidence_id_;
    std::size_t prefix_length_;
};

inline constexpr double kZeroSupport = 1e-12;

struct EvidenceDistribution {
    RestrictedDistribution r;
    std::vector<double> pooled_means;  // aligned with the candidates
    bool zero_support = false;         // r fell back to uniform
};

/// Evidence-side scoring against one backend handle. Holds an optional cache
/// shared across steps of a decode.
class EvidenceScorer {
public:
    struct Options {
        ConditioningContext context;
        ScoringTemplate scoring_template;
        bool parallel = false;  // fan out over evidences when the backend allows it
    };

    EvidenceScorer(const ScoringBackend& backend, std::shared_ptr<PrefixSupportCache> cache, Options options);
    explicit EvidenceScorer(const ScoringBackend& backend)
        : EvidenceScorer(backend, nullptr, Options{}) {}

    /// Mean over prefixes j = 1..L of p(w | e_<j); e_<1 is the empty prefix.
    std::vector<double> prefix_mean_support(std::span<const TokenId> tokens, const Evidence& ev) const;
    /// (1/N) * sum over the pool of prefix_mean_support.
    std::vector<double> pooled_means(std::span<const TokenId> tokens, const EvidencePool& pool) const;
    /// -log of the pooled mean; +inf when every evidence gives zero support.
    double pooled_score(TokenId token, const EvidencePool& pool) const;
    EvidenceDistribution evidence_distribution(const CandidateSet& cands, const EvidencePool& pool) const;
    /// min over j of -log p(w | d_<j).
    std::vector<double> vdgd_min_kl(std::span<const TokenId> tokens, const Evidence& desc) const;

    const PrefixSupportCache* cache() const noexcept { return cache_.get(); }

private:
    /// Row j-1 holds p(token | e_<j) for every requested token.
    std::vector<std::vector<double>> prefix_table(std::span<const TokenId> tokens, const Evidence& ev) const;

    const ScoringBackend& backend_;
    std::shared_ptr<PrefixSupportCache> cache_;
    Options options_;
};

// Cache-free conveniences over a single backend.
double prefix_mean_support(TokenId token, const Evidence& ev, const ScoringBackend& backend);
double pooled_score(TokenId token, const EvidencePool& pool, const ScoringBackend& backend);
EvidenceDistribution evidence_distribution(const CandidateSet& cands, const EvidencePool& pool,
                                           const ScoringBackend& backend);
double vdgd_min_kl(TokenId token, const Evidence& desc, const ScoringBackend& backend);

nlohmann::json to_json(const RegionAnnotation& a);
RegionAnnotation region_from_json(const nlohmann::json& doc);

}  // namespace ecrd
