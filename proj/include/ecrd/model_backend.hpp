#pragma once
// Next-token providers and evidence-prefix scorers.
//
// Generation and scoring are separate handles even when one object implements
// both: the evidence scorer runs its own pass and may be configured without
// any serving-side cache.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ecrd/dist_core.hpp"

namespace ecrd {

/// Surface strings for token ids plus a whitespace tokenizer.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> surfaces);

    std::size_t size() const noexcept { return surfaces_.size(); }
    const std::string& surface(TokenId id) const;
    std::optional<TokenId> find(std::string_view surface) const;
    TokenId at(std::string_view surface) const;  // throws std::out_of_range
    const std::vector<std::string>& surfaces() const noexcept { return surfaces_; }

    /// Splits on whitespace. Unknown words map to "<unk>" when the vocabulary
    /// has one; otherwise std::invalid_argument.
    std::vector<TokenId> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const TokenId> tokens) const;

    bool operator==(const Vocabulary& other) const { return surfaces_ == other.surfaces_; }

private:
    std::vector<std::string> surfaces_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Opaque conditioning handle (an image/session reference for real deployments).
struct ConditioningContext {
    std::string id;
};

struct BackendCapabilities {
    std::size_t max_top_k = 0;  // 0 = whole vocabulary
    bool concurrent = false;
    std::string tokenizer;
};

class BackendError : public std::runtime_error {
public:
    enum class Kind { timeout, transport, http_status, malformed };

    BackendError(Kind kind, const std::string& what, int attempts, bool retryable)
        : std::runtime_error(what), kind_(kind), attempts_(attempts), retryable_(retryable) {}

    Kind kind() const noexcept { return kind_; }
    int attempts() const noexcept { return attempts_; }
    bool retryable() const noexcept { return retryable_; }

private:
    Kind kind_;
    int attempts_;
    bool retryable_;
};

std::string_view to_string(BackendError::Kind kind);

class GenerationBackend {
public:
    virtual ~GenerationBackend() = default;

    virtual TokenDistribution next_distribution(std::span<const TokenId> prefix,
                                                const ConditioningContext& ctx) const = 0;
    virtual BackendCapabilities capabilities() const = 0;
    virtual const Vocabulary& vocabulary() const = 0;
};

class ScoringBackend {
public:
    virtual ~ScoringBackend() = default;

    /// p(token | prefix) for each requested token, aligned with `tokens`.
    virtual std::vector<double> score_conditionals(std::span<const TokenId> tokens,
                                                   std::span<const TokenId> prefix,
                                                   const ConditioningContext& ctx) const = 0;
    virtual BackendCapabilities capabilities() const = 0;
    virtual const Vocabulary& vocabulary() const = 0;
};

/// Lookup-table model. A context matches on the longest suffix of the prefix
/// that has an entry; otherwise the dense default distribution applies.
/// Non-enumerated tokens of a sparse entry share its residual uniformly when scored.
class TabularModel final : public GenerationBackend, public ScoringBackend {
public:
    TabularModel(Vocabulary vocab, std::vector<double> default_probs);

    void set_entry(std::vector<TokenId> context, TokenDistribution dist);
    /// Convenience for fixtures: surfaces in, implicit residual.
    void set_entry(std::string_view context_text,
                   const std::vector<std::pair<std::string, double>>& probs);

    const TokenDistribution& lookup(std::span<const TokenId> prefix) const;

    TokenDistribution next_distribution(std::span<const TokenId> prefix,
                                        const ConditioningContext& ctx) const override;
    std::vector<double> score_conditionals(std::span<const TokenId> tokens,
                                           std::span<const TokenId> prefix,
                                           const ConditioningContext& ctx) const override;
    BackendCapabilities capabilities() const override;
    const Vocabulary& vocabulary() const override { return vocab_; }

    nlohmann::json to_json() const;
    static TabularModel from_json(const nlohmann::json& doc);
    static TabularModel load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

private:
    Vocabulary vocab_;
    TokenDistribution default_;
    std::map<std::vector<TokenId>, TokenDistribution> entries_;
    std::size_t longest_context_ = 0;
};

/// Counts every (token, prefix) conditional forwarded to the wrapped scorer.
class CountingScoringBackend final : public ScoringBackend {
public:
    explicit CountingScoringBackend(const ScoringBackend& inner) : inner_(inner) {}

    std::vector<double> score_conditionals(std::span<const TokenId> tokens,
                                           std::span<const TokenId> prefix,
                                           const ConditioningContext& ctx) const override;
    BackendCapabilities capabilities() const override { return inner_.capabilities(); }
    const Vocabulary& vocabulary() const override { return inner_.vocabulary(); }

    std::size_t conditional_queries() const noexcept { return queries_.load(); }
    std::size_t calls() const noexcept { return calls_.load(); }
    void reset() noexcept {
        queries_ = 0;
        calls_ = 0;
    }

private:
    const ScoringBackend& inner_;
    mutable std::atomic<std::size_t> queries_{0};
    mutable std::atomic<std::size_t> calls_{0};
};

inline constexpr double kMissingTokenFloor = 1e-6;

struct RemoteConfig {
    enum class Wire { native, openai_completions };

    std::string endpoint;  // http://host:port/path
    std::chrono::milliseconds timeout{30'000};
    std::size_t top_k = 20;
    int max_retries = 2;
    std::chrono::milliseconds retry_backoff{100};
    std::string auth_env;  // name of the variable holding a bearer token
    Wire wire = Wire::native;
    std::string model;     // forwarded on the completions wire
    bool no_cache = false;
    double missing_floor = kMissingTokenFloor;

    static RemoteConfig from_json(const nlohmann::json& doc);
};

/// HTTP client for a remote model that exposes top-k logprobs.
/// Each request opens its own connection, so calls may overlap freely.
class RemoteModelClient final : public GenerationBackend, public ScoringBackend {
public:
    RemoteModelClient(RemoteConfig config, Vocabulary vocab);

    TokenDistribution next_distribution(std::span<const TokenId> prefix,
                                        const ConditioningContext& ctx) const override;
    std::vector<double> score_conditionals(std::span<const TokenId> tokens,
                                           std::span<const TokenId> prefix,
                                           const ConditioningContext& ctx) const override;
    BackendCapabilities capabilities() const override;
    const Vocabulary& vocabulary() const override { return vocab_; }

    const RemoteConfig& config() const noexcept { return config_; }

    /// Exposed for contract tests: builds the wire request body.
    nlohmann::json build_request(std::span<const TokenId> prefix, const ConditioningContext& ctx) const;
    /// Exposed for contract tests: parses a wire response into (token, prob) pairs.
    std::vector<TokenProb> parse_response(const nlohmann::json& body) const;

private:
    std::vector<TokenProb> query(std::span<const TokenId> prefix, const ConditioningContext& ctx) const;

    RemoteConfig config_;
    Vocabulary vocab_;
};

}  // namespace ecrd
