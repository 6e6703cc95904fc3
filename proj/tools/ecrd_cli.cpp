// ecrd: decode, replay, sweep and fit-latency entry points.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecrd/analysis.hpp"
#include "ecrd/decider.hpp"
#include "ecrd/engine.hpp"
#include "ecrd/model_backend.hpp"

using namespace ecrd;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

nlohmann::json read_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

std::pair<std::string, std::string> split_descriptor(const std::string& desc) {
    const auto colon = desc.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == desc.size()) {
        throw UsageError("descriptor '" + desc + "' must look like kind:path");
    }
    return {desc.substr(0, colon), desc.substr(colon + 1)};
}

// A loaded backend usable for both generation and scoring.
struct LoadedBackend {
    std::unique_ptr<TabularModel> tabular;
    std::unique_ptr<RemoteModelClient> remote;

    const GenerationBackend& generator() const {
        return tabular ? static_cast<const GenerationBackend&>(*tabular) : *remote;
    }
    const ScoringBackend& scorer() const { return tabular ? static_cast<const ScoringBackend&>(*tabular) : *remote; }
};

Vocabulary vocabulary_from(const nlohmann::json& doc) {
    if (doc.contains("vocab") && doc["vocab"].is_array()) return Vocabulary(doc["vocab"].get<std::vector<std::string>>());
    if (doc.contains("vocab_file")) return Vocabulary(read_json(doc["vocab_file"].get<std::string>()).get<std::vector<std::string>>());
    throw std::runtime_error("remote backend config needs 'vocab' or 'vocab_file'");
}

LoadedBackend load_backend(const std::string& desc) {
    const auto [kind, path] = split_descriptor(desc);
    LoadedBackend out;
    if (kind == "tabular") {
        out.tabular = std::make_unique<TabularModel>(TabularModel::from_json(read_json(path)));
    } else if (kind == "remote") {
        const auto doc = read_json(path);
        out.remote = std::make_unique<RemoteModelClient>(RemoteConfig::from_json(doc), vocabulary_from(doc));
    } else {
        throw UsageError("unknown backend kind '" + kind + "' (expected tabular or remote)");
    }
    return out;
}

std::unique_ptr<Decider> load_decider(const std::string& desc) {
    if (desc.empty()) return nullptr;
    const auto [kind, path] = split_descriptor(desc);
    if (kind == "script") return std::make_unique<ScriptedDecider>(ScriptedDecider::from_json(read_json(path)));
    if (kind == "remote") return std::make_unique<RemoteDecider>(RemoteDeciderConfig::from_json(read_json(path)));
    throw UsageError("unknown decider kind '" + kind + "' (expected script or remote)");
}

// Flags shared by decode and sweep.
struct DecodeFlags {
    std::string backend;
    std::string scoring_backend;
    std::string decider;
    std::string mode = "ecrd";
    double delta = kDefaultDelta;
    std::size_t max_tokens = 128;
    std::size_t tail = kDefaultTailLength;
    std::vector<std::string> stop = {"<eos>"};
    std::string description;
    std::string description_file;
    bool generate_description = false;
    std::string scoring_template;
    std::string cache_precision = "full";
    bool parallel_scoring = false;
    std::string config;

    void attach(CLI::App& app) {
        app.add_option("--backend", backend, "generation backend: tabular:FILE or remote:CONFIG.json");
        app.add_option("--scoring-backend", scoring_backend, "evidence scoring backend (defaults to --backend)");
        app.add_option("--decider", decider, "decider: script:FILE or remote:CONFIG.json");
        app.add_option("--mode", mode, "ecrd, supervisor_only, vdgd_baseline or base_greedy")
            ->check(CLI::IsMember({"ecrd", "supervisor_only", "vdgd_baseline", "base_greedy"}));
        app.add_option("--delta", delta, "trigger threshold in [0, 1]")->check(CLI::Range(0.0, 1.0));
        app.add_option("--max-tokens", max_tokens)->check(CLI::PositiveNumber);
        app.add_option("--tail", tail, "prefix tokens shown to the decider");
        app.add_option("--stop", stop, "stop token surfaces");
        app.add_option("--description", description, "global description text");
        app.add_option("--description-file", description_file, "file holding the global description");
        app.add_flag("--generate-description", generate_description, "caption with the backend before decoding");
        app.add_option("--scoring-template", scoring_template, "wrapper such as 'Evidence: {prefix}'");
        app.add_option("--cache-precision", cache_precision)->check(CLI::IsMember({"full", "half"}));
        app.add_flag("--parallel-scoring", parallel_scoring);
        app.add_option("--config", config, "JSON config; its fields override flags")->check(CLI::ExistingFile);
    }

    DecodeConfig resolve(bool require_decider = true) const {
        DecodeConfig cfg;
        cfg.mode = decode_mode_from_string(mode);
        cfg.delta = delta;
        cfg.max_tokens = max_tokens;
        cfg.tail = tail;
        cfg.stop_tokens = stop;
        cfg.global_description = description_file.empty() ? description : read_file(description_file);
        if (generate_description) cfg.description_source = DecodeConfig::DescriptionSource::backend_generated;
        cfg.scoring_template = scoring_template;
        cfg.cache_precision =
            cache_precision == "half" ? PrefixSupportCache::Precision::half : PrefixSupportCache::Precision::full;
        cfg.parallel_scoring = parallel_scoring;
        cfg.backend = backend;
        cfg.scoring_backend = scoring_backend.empty() ? backend : scoring_backend;
        cfg.decider = decider;
        if (!config.empty()) {
            auto doc = cfg.to_json();
            doc.merge_patch(read_json(config));
            cfg = DecodeConfig::from_json(doc);
        }
        try {
            cfg.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (cfg.backend.empty()) throw UsageError("--backend is required");
        if (require_decider && cfg.mode == DecodeMode::ecrd && cfg.decider.empty()) throw UsageError("mode ecrd needs --decider");
        return cfg;
    }
};

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

DecodeTrace read_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return DecodeTrace::read_jsonl(in);
}

int cmd_decode(const DecodeFlags& flags, const std::string& prompt_text, const std::string& prompt_file,
               const std::string& context_id, const std::string& trace_out) {
    const auto cfg = flags.resolve();
    const std::string prompt = prompt_file.empty() ? prompt_text : read_file(prompt_file);
    const auto gen = load_backend(cfg.backend);
    const auto score = cfg.scoring_backend == cfg.backend ? LoadedBackend{} : load_backend(cfg.scoring_backend);
    const auto& scorer = score.tabular || score.remote ? score.scorer() : gen.scorer();
    auto decider = cfg.mode == DecodeMode::ecrd ? load_decider(cfg.decider) : nullptr;

    SteadyClock clock;
    Engine engine(gen.generator(), scorer, clock);
    auto trace = engine.decode(prompt, ConditioningContext{context_id}, cfg, decider.get());
    if (!trace_out.empty()) write_text(trace_out, trace.to_jsonl());

    std::cout << trace.final_text << '\n';
    std::cout << nlohmann::json{{"tokens", trace.totals.tokens},
                                {"decider_calls", trace.totals.decider_calls},
                                {"wall_time_s", trace.totals.wall_time_s},
                                {"aborted", trace.aborted}}
                     .dump()
              << '\n';
    if (trace.aborted) {
        std::cerr << "decode aborted: " << trace.abort_reason << '\n';
        return kRuntimeError;
    }
    return 0;
}

int cmd_replay(const std::vector<std::string>& traces, double delta) {
    for (const auto& path : traces) {
        const auto report = replay(read_trace(path), delta);
        std::cout << nlohmann::json{{"trace", path},
                                    {"delta", report.delta},
                                    {"steps", report.steps},
                                    {"triggers", report.triggers}}
                         .dump()
                  << '\n';
    }
    return 0;
}

int cmd_sweep(const DecodeFlags& flags, std::vector<double> grid, const std::vector<std::string>& frozen,
              const std::string& corpus_path, std::size_t jobs, const std::string& out) {
    if (grid.empty()) grid = kDefaultDeltaGrid;
    try {
        validate_grid(grid);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    SweepReport report;
    if (!frozen.empty()) {
        std::vector<DecodeTrace> traces;
        for (const auto& path : frozen) traces.push_back(read_trace(path));
        report = sweep_frozen(traces, grid);
    } else {
        if (corpus_path.empty()) throw UsageError("sweep needs --corpus or --frozen");
        const auto corpus = corpus_from_json(read_json(corpus_path));
        const auto base_cfg = flags.resolve(false);
        const auto gen = load_backend(base_cfg.backend);
        const auto score =
            base_cfg.scoring_backend == base_cfg.backend ? LoadedBackend{} : load_backend(base_cfg.scoring_backend);
        const auto& scorer = score.tabular || score.remote ? score.scorer() : gen.scorer();

        const ItemDecoder decode_item = [&](const CorpusItem& item, double delta) {
            auto cfg = base_cfg;
            cfg.delta = delta;
            if (item.global_description) cfg.global_description = *item.global_description;
            if (item.decider) cfg.decider = *item.decider;
            if (cfg.mode == DecodeMode::ecrd && cfg.decider.empty()) {
                throw UsageError("item '" + item.context_id + "' has no decider");
            }
            auto decider = cfg.mode == DecodeMode::ecrd ? load_decider(cfg.decider) : nullptr;
            SteadyClock clock;
            Engine engine(gen.generator(), scorer, clock);
            auto trace = engine.decode(item.prompt, ConditioningContext{item.context_id}, cfg, decider.get());
            if (trace.aborted) throw std::runtime_error("item '" + item.context_id + "': " + trace.abort_reason);
            return trace;
        };
        report = sweep_decode(corpus, grid, decode_item, jobs);
    }
    write_text(out, report.to_csv());
    return 0;
}

std::vector<LatencyObservation> observations_from(const std::string& path) {
    // Sweep CSV, a JSON array of {r, seconds}, or a JSONL trace.
    const auto text = read_file(path);
    if (text.rfind("delta,r,mean_time,score", 0) == 0) {
        std::vector<LatencyObservation> obs;
        for (const auto& row : SweepReport::from_csv(text).rows) {
            if (row.mean_time) obs.push_back({row.r, *row.mean_time});
        }
        return obs;
    }
    if (text.find("\"header\"") != std::string::npos) {
        const auto trace = DecodeTrace::from_jsonl(text);
        return {{static_cast<double>(trace.totals.decider_calls), trace.totals.wall_time_s}};
    }
    std::vector<LatencyObservation> obs;
    for (const auto& item : nlohmann::json::parse(text)) {
        obs.push_back({item.at("r").get<double>(), item.at("seconds").get<double>()});
    }
    return obs;
}

int cmd_fit_latency(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<LatencyObservation> obs;
    for (const auto& path : inputs) {
        const auto more = observations_from(path);
        obs.insert(obs.end(), more.begin(), more.end());
    }
    const auto model = fit_latency_model(obs);
    write_text(out, model.to_json().dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidence-constrained reweighting decoder"};
    app.require_subcommand(1);

    DecodeFlags decode_flags;
    std::string prompt;
    std::string prompt_file;
    std::string context_id;
    std::string trace_out;
    auto* decode = app.add_subcommand("decode", "decode one prompt and write its trace");
    decode_flags.attach(*decode);
    decode->add_option("--prompt", prompt, "prompt text");
    decode->add_option("--prompt-file", prompt_file, "file holding the prompt")->check(CLI::ExistingFile);
    decode->add_option("--context-id", context_id, "image or context identifier forwarded to backends");
    decode->add_option("--trace-out", trace_out, "JSONL trace path");

    std::vector<std::string> replay_traces;
    double replay_delta = kDefaultDelta;
    auto* replay_cmd = app.add_subcommand("replay", "recount triggers of frozen traces under a new threshold");
    replay_cmd->add_option("traces", replay_traces, "JSONL traces")->required()->check(CLI::ExistingFile);
    replay_cmd->add_option("--delta", replay_delta)->check(CLI::Range(0.0, 1.0));

    DecodeFlags sweep_flags;
    std::vector<double> grid;
    std::vector<std::string> frozen;
    std::string corpus;
    std::size_t jobs = 1;
    std::string sweep_out;
    auto* sweep = app.add_subcommand("sweep", "trigger rate, time and score over a threshold grid");
    sweep_flags.attach(*sweep);
    sweep->add_option("--grid", grid, "thresholds, strictly increasing")->check(CLI::Range(0.0, 1.0));
    sweep->add_option("--frozen", frozen, "replay these traces instead of decoding")->check(CLI::ExistingFile);
    sweep->add_option("--corpus", corpus, "JSON corpus of prompts")->check(CLI::ExistingFile);
    sweep->add_option("--jobs", jobs, "items decoded concurrently")->check(CLI::PositiveNumber);
    sweep->add_option("--out", sweep_out, "CSV path (stdout when omitted)");

    std::vector<std::string> latency_inputs;
    std::string latency_out;
    auto* fit = app.add_subcommand("fit-latency", "fit T = t0 + l0 * r by least squares");
    fit->add_option("inputs", latency_inputs, "sweep CSVs, JSON observation arrays or traces")
        ->required()
        ->check(CLI::ExistingFile);
    fit->add_option("--out", latency_out, "JSON report path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (*decode) return cmd_decode(decode_flags, prompt, prompt_file, context_id, trace_out);
        if (*replay_cmd) return cmd_replay(replay_traces, replay_delta);
        if (*sweep) return cmd_sweep(sweep_flags, grid, frozen, corpus, jobs, sweep_out);
        if (*fit) return cmd_fit_latency(latency_inputs, latency_out);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
    return kUsageError;
}
