#pragma once
// Threshold sweeps over a corpus and the linear end-to-end latency model
// T = t0 + l0 * r.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecrd/engine.hpp"

namespace ecrd {

struct LatencyObservation {
    double r = 0.0;       // decider calls
    double seconds = 0.0; // end-to-end time
};

struct LatencyModel {
    double t0 = 0.0;
    double l0 = 0.0;
    double residual_rms = 0.0;
    std::size_t observations = 0;

    double predict(double r) const noexcept { return t0 + l0 * r; }
    nlohmann::json to_json() const;
    static LatencyModel from_json(const nlohmann::json& doc);
};

/// Ordinary least squares. Throws std::invalid_argument("underdetermined")
/// unless at least two distinct r values are present.
LatencyModel fit_latency_model(const std::vector<LatencyObservation>& obs);

inline const std::vector<double> kDefaultDeltaGrid{0.00, 0.02, 0.04, 0.06, 0.08, 0.12, 0.16};

struct SweepRow {
    double delta = 0.0;
    double r = 0.0;                     // mean decider calls per item
    std::optional<double> mean_time;    // seconds; absent for frozen replays
    std::optional<double> score;        // exact-match accuracy; absent without a key
    bool operator==(const SweepRow&) const = default;
};

struct SweepReport {
    std::vector<SweepRow> rows;

    /// Columns delta,r,mean_time,score; absent values are empty cells.
    void write_csv(std::ostream& out) const;
    std::string to_csv() const;
    static SweepReport read_csv(std::istream& in);
    static SweepReport from_csv(const std::string& text);
};

/// Throws std::invalid_argument unless the grid is non-empty, strictly
/// increasing and inside [0, 1].
void validate_grid(const std::vector<double>& grid);

/// Replays frozen traces under each threshold. Trajectories are not re-decoded,
/// so time and score are left empty.
SweepReport sweep_frozen(const std::vector<DecodeTrace>& traces, const std::vector<double>& grid);

struct CorpusItem {
    std::string context_id;
    std::string prompt;
    std::optional<std::string> answer;
    std::optional<std::string> global_description;  // overrides the config's
    std::optional<std::string> decider;             // descriptor, overrides the default
};

/// Decodes one item under one threshold. Called concurrently for distinct
/// items when jobs > 1, so it must not share mutable state across calls.
using ItemDecoder = std::function<DecodeTrace(const CorpusItem& item, double delta)>;

/// Decodes every item at every threshold with at most `jobs` items in flight.
/// Score is filled only when every item carries an answer.
SweepReport sweep_decode(const std::vector<CorpusItem>& corpus, const std::vector<double>& grid,
                         const ItemDecoder& decode_item, std::size_t jobs = 1);

/// Whitespace-normalized exact match.
bool exact_match(const std::string& output, const std::string& answer);

/// Reads a JSON array of {"context_id","prompt","answer"?,"global_description"?,"decider"?}.
std::vector<CorpusItem> corpus_from_json(const nlohmann::json& doc);

}  // namespace ecrd
