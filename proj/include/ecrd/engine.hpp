#pragma once
// The evidence-constrained decode loop, its per-step audit trail, and replay
// of frozen traces under a different threshold.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ecrd/decider.hpp"
#include "ecrd/dist_core.hpp"
#include "ecrd/evidence.hpp"
#include "ecrd/model_backend.hpp"
#include "ecrd/supervisor.hpp"

namespace ecrd {

enum class DecodeMode { ecrd, vdgd_baseline, base_greedy, supervisor_only };

std::string_view to_string(DecodeMode mode);
DecodeMode decode_mode_from_string(std::string_view text);

enum class GainTag { none, decider_direct_answer, decider_midchain_grounding, supervisor_reweight };

std::string_view to_string(GainTag tag);
GainTag gain_tag_from_string(std::string_view text);

struct DecodeConfig {
    enum class DescriptionSource { provided, backend_generated };

    double delta = kDefaultDelta;
    std::size_t max_tokens = 128;
    std::vector<std::string> stop_tokens;
    std::size_t tail = kDefaultTailLength;
    DecodeMode mode = DecodeMode::ecrd;

    DescriptionSource description_source = DescriptionSource::provided;
    std::string global_description;
    std::string caption_instruction = "Describe the image .";
    std::size_t caption_max_tokens = 64;

    std::string scoring_template;  // "" or e.g. "Evidence: {prefix}"
    PrefixSupportCache::Precision cache_precision = PrefixSupportCache::Precision::full;
    bool parallel_scoring = false;

    // Descriptors of the bound backends, kept for the trace header.
    std::string backend;
    std::string scoring_backend;
    std::string decider;

    void validate() const;  // throws std::invalid_argument
    nlohmann::json to_json() const;
    static DecodeConfig from_json(const nlohmann::json& doc);
};

struct StepTimings {
    double base_ms = 0.0;
    double scoring_ms = 0.0;
    double decider_ms = 0.0;
};

struct StepRecord {
    std::size_t step = 0;
    std::vector<TokenProb> base_topk;  // every enumerated base token, ranked
    double base_residual = 0.0;
    std::optional<std::size_t> knee_index;
    std::optional<double> covered_mass;
    std::vector<double> pooled_means;   // aligned with the candidates
    std::vector<TokenProb> r;
    std::vector<TokenProb> r_tilde;
    std::vector<double> vdgd_scores;    // min-over-prefix KL, baseline mode only
    std::optional<double> alpha;
    std::vector<TokenProb> p_mix_topk;  // every enumerated mixture token, ranked
    std::optional<double> p_mix_residual;
    std::optional<double> raw_mass;
    std::optional<double> margin;       // on the renormalized mixture
    std::optional<double> margin_raw;   // same gap before renormalization
    std::optional<TriggerDecision> trigger;
    std::optional<std::string> decider_verdict_id;
    bool zero_support = false;
    bool verdict_violation = false;
    TokenId committed;
    StepTimings timings;
    std::optional<GainTag> gain_tag;

    nlohmann::json to_json() const;
    static StepRecord from_json(const nlohmann::json& doc);
};

struct TraceTotals {
    std::size_t tokens = 0;
    std::size_t decider_calls = 0;
    double wall_time_s = 0.0;
};

struct DecodeTrace {
    DecodeConfig config;
    std::string context_id;
    std::vector<TokenId> prompt;
    std::vector<StepRecord> steps;
    std::vector<TokenId> output;
    std::string final_text;
    EvidencePool pool;
    TraceTotals totals;
    bool aborted = false;
    std::string abort_reason;

    /// Header line, one line per step, footer line.
    void write_jsonl(std::ostream& out) const;
    std::string to_jsonl() const;
    static DecodeTrace read_jsonl(std::istream& in);
    static DecodeTrace from_jsonl(const std::string& text);
};

/// Millisecond time source. Injected so traces can be made reproducible.
class Clock {
public:
    virtual ~Clock() = default;
    virtual double now_ms() = 0;
};

class SteadyClock final : public Clock {
public:
    double now_ms() override;

private:
    std::chrono::steady_clock::time_point origin_ = std::chrono::steady_clock::now();
};

/// Advances by a fixed tick on every read.
class ManualClock final : public Clock {
public:
    explicit ManualClock(double tick_ms = 0.0) : tick_ms_(tick_ms) {}
    double now_ms() override;

private:
    double tick_ms_;
    std::atomic<std::int64_t> reads_{0};
};

class Engine {
public:
    Engine(const GenerationBackend& generator, const ScoringBackend& scorer, Clock& clock);

    /// Backend and decider failures end the decode early with `aborted` set.
    /// Configuration problems throw std::invalid_argument.
    DecodeTrace decode(std::span<const TokenId> prompt, const ConditioningContext& ctx, const DecodeConfig& cfg,
                       Decider* decider = nullptr) const;
    DecodeTrace decode(std::string_view prompt_text, const ConditioningContext& ctx, const DecodeConfig& cfg,
                       Decider* decider = nullptr) const;

    /// Greedy caption under the configured instruction.
    std::string describe(const ConditioningContext& ctx, const DecodeConfig& cfg) const;

private:
    const GenerationBackend& generator_;
    const ScoringBackend& scorer_;
    Clock& clock_;
};

struct ReplayReport {
    double delta = 0.0;
    std::size_t steps = 0;
    std::size_t triggers = 0;
    std::vector<bool> fired;  // per step
};

/// Re-applies the trigger rule to the recorded (knee, margin) of each step.
/// Trajectories are not re-decoded. Throws std::invalid_argument when a step
/// lacks either field.
ReplayReport replay(const DecodeTrace& trace, double delta);

/// Fills `gain_tag` on every step. Decider steps inside the last `answer_tokens`
/// committed tokens count as direct answers.
void tag_gains(DecodeTrace& trace, std::size_t answer_tokens = 1);

/// Recomputes the mixture from the recorded base, r and candidate mass and
/// compares it with the recorded mixture. Returns the largest deviation.
double trace_integrity_error(const StepRecord& record);

}  // namespace ecrd
