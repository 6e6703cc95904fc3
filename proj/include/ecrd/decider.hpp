#pragma once
// The decider consulted on uncertain steps. It sees the conditioning handle,
// the tail of the decoded prefix and the candidates. Requests have no field
// that could carry the user's question.

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecrd/dist_core.hpp"
#include "ecrd/evidence.hpp"
#include "ecrd/model_backend.hpp"

namespace ecrd {

inline constexpr std::size_t kDefaultTailLength = 64;

struct DeciderCandidate {
    TokenId id;
    std::string surface;
    bool operator==(const DeciderCandidate&) const = default;
};

struct DeciderRequest {
    std::string context_id;
    std::vector<std::string> prefix_tail;
    std::vector<DeciderCandidate> candidates;

    bool offers(TokenId id) const noexcept;
    bool operator==(const DeciderRequest&) const = default;
};

struct DeciderVerdict {
    TokenId chosen;
    std::string sentence;
    std::vector<RegionAnnotation> annotations;
    double latency_s = 0.0;
};

class DeciderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The verdict picked a token outside the candidate set, or said nothing.
class InvalidVerdict : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Decider {
public:
    virtual ~Decider() = default;
    virtual DeciderVerdict decide(const DeciderRequest& request) = 0;
};

/// Last min(tail, prefix) tokens plus the candidate surfaces.
DeciderRequest build_request(std::span<const TokenId> prefix, const CandidateSet& cands, const Vocabulary& vocab,
                             const ConditioningContext& ctx, std::size_t tail = kDefaultTailLength);

/// Throws InvalidVerdict.
void validate_verdict(const DeciderRequest& request, const DeciderVerdict& verdict);

nlohmann::json to_json(const DeciderRequest& request);
DeciderRequest request_from_json(const nlohmann::json& doc);
/// Parses the remote wire reply {"chosen_id","sentence","annotations"}.
DeciderVerdict verdict_from_json(const nlohmann::json& doc);

/// Test double: hands out verdicts in order and fails once the script runs dry.
class ScriptedDecider final : public Decider {
public:
    struct Entry {
        std::optional<TokenId> chosen_id;
        std::optional<std::string> chosen_surface;  // resolved against the request
        std::string sentence;
        std::vector<RegionAnnotation> annotations;
        double latency_s = 0.0;
    };

    explicit ScriptedDecider(std::vector<Entry> script) : script_(std::move(script)) {}

    /// [{"chosen_id": 3 | "chosen": "blue", "sentence": "...", "annotations": [...]}]
    static ScriptedDecider from_json(const nlohmann::json& doc);
    static ScriptedDecider load(const std::filesystem::path& path);

    DeciderVerdict decide(const DeciderRequest& request) override;

    std::size_t calls() const noexcept { return next_; }
    const std::vector<DeciderRequest>& requests() const noexcept { return requests_; }

private:
    std::vector<Entry> script_;
    std::size_t next_ = 0;
    std::vector<DeciderRequest> requests_;
};

struct RemoteDeciderConfig {
    std::string endpoint;
    std::chrono::milliseconds timeout{30'000};
    int max_retries = 0;
    std::chrono::milliseconds retry_backoff{100};
    std::string auth_env;

    static RemoteDeciderConfig from_json(const nlohmann::json& doc);
};

class RemoteDecider final : public Decider {
public:
    explicit RemoteDecider(RemoteDeciderConfig config);
    DeciderVerdict decide(const DeciderRequest& request) override;

private:
    RemoteDeciderConfig config_;
};

}  // namespace ecrd
