#include "ecrd/engine.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace ecrd {

std::string_view to_string(DecodeMode mode) {
    switch (mode) {
        case DecodeMode::ecrd: return "ecrd";
        case DecodeMode::vdgd_baseline: return "vdgd_baseline";
        case DecodeMode::base_greedy: return "base_greedy";
        case DecodeMode::supervisor_only: return "supervisor_only";
    }
    return "unknown";
}

DecodeMode decode_mode_from_string(std::string_view text) {
    if (text == "ecrd") return DecodeMode::ecrd;
    if (text == "vdgd_baseline") return DecodeMode::vdgd_baseline;
    if (text == "base_greedy") return DecodeMode::base_greedy;
    if (text == "supervisor_only") return DecodeMode::supervisor_only;
    throw std::invalid_argument("unknown decode mode '" + std::string(text) + "'");
}

std::string_view to_string(GainTag tag) {
    switch (tag) {
        case GainTag::none: return "none";
        case GainTag::decider_direct_answer: return "decider_direct_answer";
        case GainTag::decider_midchain_grounding: return "decider_midchain_grounding";
        case GainTag::supervisor_reweight: return "supervisor_reweight";
    }
    return "unknown";
}

GainTag gain_tag_from_string(std::string_view text) {
    if (text == "none") return GainTag::none;
    if (text == "decider_direct_answer") return GainTag::decider_direct_answer;
    if (text == "decider_midchain_grounding") return GainTag::decider_midchain_grounding;
    if (text == "supervisor_reweight") return GainTag::supervisor_reweight;
    throw std::invalid_argument("unknown gain tag '" + std::string(text) + "'");
}

// ------------------------------------------------------------------ config

void DecodeConfig::validate() const {
    if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    if (description_source == DescriptionSource::backend_generated && caption_max_tokens < 1) {
        throw std::invalid_argument("caption_max_tokens must be >= 1");
    }
}

nlohmann::json DecodeConfig::to_json() const {
    return {
        {"delta", delta},
        {"max_tokens", max_tokens},
        {"stop_tokens", stop_tokens},
        {"tail", tail},
        {"mode", to_string(mode)},
        {"description_source", description_source == DescriptionSource::provided ? "provided" : "backend_generated"},
        {"global_description", global_description},
        {"caption_instruction", caption_instruction},
        {"caption_max_tokens", caption_max_tokens},
        {"scoring_template", scoring_template},
        {"cache_precision", cache_precision == PrefixSupportCache::Precision::full ? "full" : "half"},
        {"parallel_scoring", parallel_scoring},
        {"backend", backend},
        {"scoring_backend", scoring_backend},
        {"decider", decider},
    };
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& doc) {
    DecodeConfig cfg;
    cfg.delta = doc.value("delta", cfg.delta);
    cfg.max_tokens = doc.value("max_tokens", cfg.max_tokens);
    cfg.stop_tokens = doc.value("stop_tokens", cfg.stop_tokens);
    cfg.tail = doc.value("tail", cfg.tail);
    if (doc.contains("mode")) cfg.mode = decode_mode_from_string(doc["mode"].get<std::string>());
    if (doc.contains("description_source")) {
        const auto src = doc["description_source"].get<std::string>();
        if (src == "provided") {
            cfg.description_source = DescriptionSource::provided;
        } else if (src == "backend_generated") {
            cfg.description_source = DescriptionSource::backend_generated;
        } else {
            throw std::invalid_argument("unknown description_source '" + src + "'");
        }
    }
    cfg.global_description = doc.value("global_description", cfg.global_description);
    cfg.caption_instruction = doc.value("caption_instruction", cfg.caption_instruction);
    cfg.caption_max_tokens = doc.value("caption_max_tokens", cfg.caption_max_tokens);
    cfg.scoring_template = doc.value("scoring_template", cfg.scoring_template);
    if (doc.contains("cache_precision")) {
        const auto p = doc["cache_precision"].get<std::string>();
        if (p == "full") {
            cfg.cache_precision = PrefixSupportCache::Precision::full;
        } else if (p == "half") {
            cfg.cache_precision = PrefixSupportCache::Precision::half;
        } else {
            throw std::invalid_argument("unknown cache_precision '" + p + "'");
        }
    }
    cfg.parallel_scoring = doc.value("parallel_scoring", cfg.parallel_scoring);
    cfg.backend = doc.value("backend", cfg.backend);
    cfg.scoring_backend = doc.value("scoring_backend", cfg.scoring_backend);
    cfg.decider = doc.value("decider", cfg.decider);
    return cfg;
}

// ------------------------------------------------------------- step record

namespace {

nlohmann::json token_list(const std::vector<TokenProb>& list) {
    auto out = nlohmann::json::array();
    for (const auto& tp : list) out.push_back({tp.token.value, tp.prob});
    return out;
}

std::vector<TokenProb> token_list_from(const nlohmann::json& doc) {
    std::vector<TokenProb> out;
    for (const auto& item : doc) out.push_back({TokenId{item.at(0).get<std::int32_t>()}, item.at(1).get<double>()});
    return out;
}

// JSON has no infinity; unsupported scores are written as null.
nlohmann::json score_list(const std::vector<double>& list) {
    auto out = nlohmann::json::array();
    for (double v : list) out.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    return out;
}

std::vector<double> score_list_from(const nlohmann::json& doc) {
    std::vector<double> out;
    for (const auto& v : doc) out.push_back(v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>());
    return out;
}

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const nlohmann::json& doc, const char* key) {
    if (!doc.contains(key) || doc[key].is_null()) return std::nullopt;
    return doc[key].get<T>();
}

}  // namespace

nlohmann::json StepRecord::to_json() const {
    nlohmann::json doc;
    doc["step"] = step;
    doc["base_topk"] = token_list(base_topk);
    doc["base_residual"] = base_residual;
    doc["knee_index"] = optional_json(knee_index);
    doc["covered_mass"] = optional_json(covered_mass);
    doc["pooled_means"] = pooled_means;
    doc["r"] = token_list(r);
    doc["r_tilde"] = token_list(r_tilde);
    doc["vdgd_scores"] = score_list(vdgd_scores);
    doc["alpha"] = optional_json(alpha);
    doc["p_mix_topk"] = token_list(p_mix_topk);
    doc["p_mix_residual"] = optional_json(p_mix_residual);
    doc["raw_mass"] = optional_json(raw_mass);
    doc["margin"] = optional_json(margin);
    doc["margin_raw"] = optional_json(margin_raw);
    if (trigger) {
        doc["trigger"] = {{"fired", trigger->fired}, {"reason", to_string(trigger->reason)}, {"delta", trigger->delta}};
    } else {
        doc["trigger"] = nullptr;
    }
    doc["decider_verdict_id"] = optional_json(decider_verdict_id);
    doc["zero_support"] = zero_support;
    doc["verdict_violation"] = verdict_violation;
    doc["committed"] = committed.value;
    doc["timings"] = {{"base_ms", timings.base_ms}, {"scoring_ms", timings.scoring_ms},
                      {"decider_ms", timings.decider_ms}};
    doc["gain_tag"] = gain_tag ? nlohmann::json(to_string(*gain_tag)) : nlohmann::json(nullptr);
    return doc;
}

StepRecord StepRecord::from_json(const nlohmann::json& doc) {
    StepRecord rec;
    rec.step = doc.at("step").get<std::size_t>();
    rec.base_topk = token_list_from(doc.at("base_topk"));
    rec.base_residual = doc.at("base_residual").get<double>();
    rec.knee_index = optional_from<std::size_t>(doc, "knee_index");
    rec.covered_mass = optional_from<double>(doc, "covered_mass");
    rec.pooled_means = doc.at("pooled_means").get<std::vector<double>>();
    rec.r = token_list_from(doc.at("r"));
    rec.r_tilde = token_list_from(doc.at("r_tilde"));
    rec.vdgd_scores = score_list_from(doc.at("vdgd_scores"));
    rec.alpha = optional_from<double>(doc, "alpha");
    rec.p_mix_topk = token_list_from(doc.at("p_mix_topk"));
    rec.p_mix_residual = optional_from<double>(doc, "p_mix_residual");
    rec.raw_mass = optional_from<double>(doc, "raw_mass");
    rec.margin = optional_from<double>(doc, "margin");
    rec.margin_raw = optional_from<double>(doc, "margin_raw");
    if (doc.contains("trigger") && !doc["trigger"].is_null()) {
        const auto& t = doc["trigger"];
        rec.trigger = TriggerDecision{t.at("fired").get<bool>(),
                                      trigger_reason_from_string(t.at("reason").get<std::string>()),
                                      t.at("delta").get<double>()};
    }
    rec.decider_verdict_id = optional_from<std::string>(doc, "decider_verdict_id");
    rec.zero_support = doc.value("zero_support", false);
    rec.verdict_violation = doc.value("verdict_violation", false);
    rec.committed = TokenId{doc.at("committed").get<std::int32_t>()};
    const auto& t = doc.at("timings");
    rec.timings = {t.at("base_ms").get<double>(), t.at("scoring_ms").get<double>(), t.at("decider_ms").get<double>()};
    if (auto tag = optional_from<std::string>(doc, "gain_tag")) rec.gain_tag = gain_tag_from_string(*tag);
    return rec;
}

// ------------------------------------------------------------------- trace

void DecodeTrace::write_jsonl(std::ostream& out) const {
    nlohmann::json prompt_ids = nlohmann::json::array();
    for (TokenId t : prompt) prompt_ids.push_back(t.value);
    out << nlohmann::json{{"header", {{"config", config.to_json()}, {"context_id", context_id}, {"prompt", prompt_ids}}}}
               .dump()
        << '\n';
    for (const auto& rec : steps) out << rec.to_json().dump() << '\n';

    nlohmann::json output_ids = nlohmann::json::array();
    for (TokenId t : output) output_ids.push_back(t.value);
    nlohmann::json footer = {
        {"totals",
         {{"tokens", totals.tokens}, {"decider_calls", totals.decider_calls}, {"wall_time_s", totals.wall_time_s}}},
        {"final_text", final_text},
        {"output", output_ids},
        {"pool", pool.to_json(true)},
        {"aborted", aborted},
        {"abort_reason", abort_reason},
    };
    out << nlohmann::json{{"footer", footer}}.dump() << '\n';
}

std::string DecodeTrace::to_jsonl() const {
    std::ostringstream out;
    write_jsonl(out);
    return out.str();
}

DecodeTrace DecodeTrace::read_jsonl(std::istream& in) {
    DecodeTrace trace;
    bool seen_header = false;
    bool seen_footer = false;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (seen_footer) throw std::invalid_argument("trace has content after the footer");
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::invalid_argument("trace line " + std::to_string(line_no) + ": " + e.what());
        }
        if (doc.contains("header")) {
            const auto& h = doc["header"];
            trace.config = DecodeConfig::from_json(h.at("config"));
            trace.context_id = h.at("context_id").get<std::string>();
            for (const auto& t : h.at("prompt")) trace.prompt.push_back(TokenId{t.get<std::int32_t>()});
            seen_header = true;
        } else if (doc.contains("footer")) {
            const auto& f = doc["footer"];
            const auto& totals = f.at("totals");
            trace.totals = {totals.at("tokens").get<std::size_t>(), totals.at("decider_calls").get<std::size_t>(),
                            totals.at("wall_time_s").get<double>()};
            trace.final_text = f.at("final_text").get<std::string>();
            for (const auto& t : f.at("output")) trace.output.push_back(TokenId{t.get<std::int32_t>()});
            trace.pool = EvidencePool::from_json(f.at("pool"), nullptr);
            trace.aborted = f.at("aborted").get<bool>();
            trace.abort_reason = f.at("abort_reason").get<std::string>();
            seen_footer = true;
        } else {
            if (!seen_header) throw std::invalid_argument("trace step before header");
            try {
                trace.steps.push_back(StepRecord::from_json(doc));
            } catch (const nlohmann::json::exception& e) {
                throw std::invalid_argument("trace line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    }
    if (!seen_header || !seen_footer) throw std::invalid_argument("trace is missing its header or footer");
    return trace;
}

DecodeTrace DecodeTrace::from_jsonl(const std::string& text) {
    std::istringstream in(text);
    return read_jsonl(in);
}

// ------------------------------------------------------------------- clocks

double SteadyClock::now_ms() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - origin_).count();
}

double ManualClock::now_ms() {
    return static_cast<double>(++reads_) * tick_ms_;
}

// ------------------------------------------------------------------- engine

Engine::Engine(const GenerationBackend& generator, const ScoringBackend& scorer, Clock& clock)
    : generator_(generator), scorer_(scorer), clock_(clock) {}

std::string Engine::describe(const ConditioningContext& ctx, const DecodeConfig& cfg) const {
    const auto& vocab = generator_.vocabulary();
    std::unordered_set<TokenId> stops;
    for (const auto& s : cfg.stop_tokens) {
        if (auto id = vocab.find(s)) stops.insert(*id);
    }
    auto prefix = vocab.tokenize(cfg.caption_instruction);
    const std::size_t start = prefix.size();
    for (std::size_t i = 0; i < cfg.caption_max_tokens; ++i) {
        const auto next = sort_descending(generator_.next_distribution(prefix, ctx)).front().token;
        if (stops.contains(next)) break;
        prefix.push_back(next);
    }
    return vocab.detokenize(std::span(prefix).subspan(start));
}

DecodeTrace Engine::decode(std::string_view prompt_text, const ConditioningContext& ctx, const DecodeConfig& cfg,
                           Decider* decider) const {
    const auto prompt = generator_.vocabulary().tokenize(prompt_text);
    return decode(prompt, ctx, cfg, decider);
}

DecodeTrace Engine::decode(std::span<const TokenId> prompt, const ConditioningContext& ctx, const DecodeConfig& cfg,
                           Decider* decider) const {
    cfg.validate();
    if (cfg.mode == DecodeMode::ecrd && decider == nullptr) {
        throw std::invalid_argument("ecrd mode needs a decider");
    }
    if (generator_.vocabulary().size() != scorer_.vocabulary().size()) {
        throw std::invalid_argument("generation and scoring backends disagree on vocabulary size");
    }

    const auto& vocab = generator_.vocabulary();
    const auto& scoring_vocab = scorer_.vocabulary();

    std::unordered_set<TokenId> stops;
    for (const auto& s : cfg.stop_tokens) stops.insert(vocab.at(s));

    DecodeTrace trace;
    trace.config = cfg;
    trace.context_id = ctx.id;
    trace.prompt.assign(prompt.begin(), prompt.end());

    const double started = clock_.now_ms();
    std::vector<TokenId> prefix(prompt.begin(), prompt.end());

    EvidenceScorer::Options options{ctx, ScoringTemplate::parse(cfg.scoring_template, scoring_vocab),
                                    cfg.parallel_scoring};
    EvidenceScorer scorer(scorer_, std::make_shared<PrefixSupportCache>(cfg.cache_precision), std::move(options));

    try {
        if (cfg.mode != DecodeMode::base_greedy) {
            std::string description = cfg.global_description;
            if (cfg.description_source == DecodeConfig::DescriptionSource::backend_generated) {
                description = describe(ctx, cfg);
            }
            trace.pool.append(Evidence::make("global", description, scoring_vocab, Provenance::global()));
        }

        for (std::size_t step = 0; step < cfg.max_tokens; ++step) {
            StepRecord rec;
            rec.step = step;

            double t = clock_.now_ms();
            const auto base = generator_.next_distribution(prefix, ctx);
            double now = clock_.now_ms();
            rec.timings.base_ms = now - t;
            rec.base_topk = sort_descending(base);
            rec.base_residual = base.residual_mass();

            if (cfg.mode == DecodeMode::base_greedy) {
                rec.committed = rec.base_topk.front().token;
            } else {
                const auto cands = knee_truncate(base);
                rec.knee_index = cands.knee_index;
                rec.covered_mass = cands.covered_mass;
                const auto tokens = cands.tokens();

                t = clock_.now_ms();
                if (cfg.mode == DecodeMode::vdgd_baseline) {
                    // Candidate logits become -KL; softmax over C, then argmax.
                    rec.vdgd_scores = scorer.vdgd_min_kl(tokens, trace.pool[0]);
                    double best = std::numeric_limits<double>::infinity();
                    for (double s : rec.vdgd_scores) best = std::min(best, s);
                    std::vector<double> weights;
                    double total = 0.0;
                    for (double s : rec.vdgd_scores) {
                        const double w = std::isfinite(best) ? std::exp(-(s - best)) : 1.0;
                        weights.push_back(w);
                        total += w;
                    }
                    for (std::size_t i = 0; i < tokens.size(); ++i) rec.r.push_back({tokens[i], weights[i] / total});
                    now = clock_.now_ms();
                    rec.timings.scoring_ms = now - t;
                    auto ranked = rec.r;
                    std::stable_sort(ranked.begin(), ranked.end(), ranks_before);
                    rec.committed = ranked.front().token;
                } else {
                    const auto ev = scorer.evidence_distribution(cands, trace.pool);
                    const auto r_tilde = mass_match(ev.r, cands);
                    const auto mix = negotiate(base, r_tilde, cands);
                    now = clock_.now_ms();
                    rec.timings.scoring_ms = now - t;

                    rec.pooled_means = ev.pooled_means;
                    rec.zero_support = ev.zero_support;
                    rec.r = ev.r.entries;
                    rec.r_tilde = r_tilde.entries;
                    rec.alpha = mix.alpha;
                    rec.p_mix_topk = sort_descending(mix.p_mix);
                    rec.p_mix_residual = mix.p_mix.residual_mass();
                    rec.raw_mass = mix.raw_mass;
                    rec.margin = mix.margin;
                    rec.margin_raw = mix.margin * mix.raw_mass;
                    rec.committed = mix.top1.token;

                    if (cfg.mode == DecodeMode::ecrd) {
                        rec.trigger = decide_trigger(mix, cands, cfg.delta);
                        if (rec.trigger->fired) {
                            const auto request = build_request(prefix, cands, vocab, ctx, cfg.tail);
                            t = clock_.now_ms();
                            const auto verdict = decider->decide(request);
                            rec.timings.decider_ms = clock_.now_ms() - t;
                            try {
                                validate_verdict(request, verdict);
                                auto evidence = Evidence::make("decider-" + std::to_string(step), verdict.sentence,
                                                               scoring_vocab, Provenance::from_decider(step),
                                                               verdict.annotations);
                                rec.decider_verdict_id = evidence.id;
                                trace.pool.append(std::move(evidence));
                                rec.committed = verdict.chosen;
                                ++trace.totals.decider_calls;
                            } catch (const std::invalid_argument&) {
                                // Fail open: keep the mixture's choice, skip the append.
                                rec.verdict_violation = true;
                            } catch (const InvalidVerdict&) {
                                rec.verdict_violation = true;
                            }
                        }
                    }
                }
            }

            const TokenId committed = rec.committed;
            trace.steps.push_back(std::move(rec));
            prefix.push_back(committed);
            if (stops.contains(committed)) break;
            trace.output.push_back(committed);
        }
    } catch (const std::exception& e) {
        trace.aborted = true;
        trace.abort_reason = e.what();
    }

    trace.final_text = vocab.detokenize(trace.output);
    trace.totals.tokens = trace.steps.size();
    trace.totals.wall_time_s = (clock_.now_ms() - started) / 1000.0;
    return trace;
}

// ------------------------------------------------------------------ replay

ReplayReport replay(const DecodeTrace& trace, double delta) {
    if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
    ReplayReport report;
    report.delta = delta;
    report.steps = trace.steps.size();
    report.fired.reserve(trace.steps.size());
    for (const auto& rec : trace.steps) {
        if (!rec.knee_index || !rec.margin) {
            throw std::invalid_argument("trace step " + std::to_string(rec.step) + " lacks knee_index or margin");
        }
        const bool fired = decide_trigger(*rec.margin, *rec.knee_index, delta).fired;
        report.fired.push_back(fired);
        if (fired) ++report.triggers;
    }
    return report;
}

void tag_gains(DecodeTrace& trace, std::size_t answer_tokens) {
    // Steps whose token made it into the output, in order.
    std::vector<std::size_t> content_steps;
    for (std::size_t i = 0; i < trace.steps.size() && content_steps.size() < trace.output.size(); ++i) {
        content_steps.push_back(i);
    }
    const std::size_t answer_from =
        content_steps.size() > answer_tokens ? content_steps.size() - answer_tokens : 0;

    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        auto& rec = trace.steps[i];
        if (rec.decider_verdict_id) {
            const bool in_answer = i < content_steps.size() && i >= answer_from;
            rec.gain_tag = in_answer ? GainTag::decider_direct_answer : GainTag::decider_midchain_grounding;
        } else if (!rec.p_mix_topk.empty() && rec.p_mix_topk.front().token != rec.base_topk.front().token) {
            rec.gain_tag = GainTag::supervisor_reweight;
        } else {
            rec.gain_tag = GainTag::none;
        }
    }
}

double trace_integrity_error(const StepRecord& record) {
    if (!record.covered_mass || !record.alpha || record.r.empty() || record.p_mix_topk.empty()) {
        throw std::invalid_argument("step record lacks mixture fields");
    }
    const auto& base = record.base_topk;

    // Candidates are the first knee_index tokens of the ranked base.
    const std::size_t k = record.r.size();
    double cand_mass = 0.0;
    for (std::size_t i = 0; i < k; ++i) cand_mass += base[i].prob;
    double r_mass = 0.0;
    for (const auto& e : record.r) r_mass += e.prob;

    double alpha = 0.0;
    for (const auto& tp : base) alpha = std::max(alpha, tp.prob);

    std::vector<TokenProb> mixed;
    double total = alpha * record.base_residual;
    for (std::size_t i = 0; i < base.size(); ++i) {
        double u = alpha * base[i].prob;
        for (const auto& e : record.r) {
            if (e.token == base[i].token) u += (1.0 - alpha) * e.prob * (*record.covered_mass / r_mass);
        }
        mixed.push_back({base[i].token, u});
        total += u;
    }

    double worst = std::abs(alpha - *record.alpha) + std::abs(cand_mass - *record.covered_mass);
    for (const auto& m : mixed) {
        auto it = std::find_if(record.p_mix_topk.begin(), record.p_mix_topk.end(),
                               [&](const TokenProb& tp) { return tp.token == m.token; });
        const double recorded = it == record.p_mix_topk.end() ? 0.0 : it->prob;
        worst = std::max(worst, std::abs(m.prob / total - recorded));
    }
    return worst;
}

}  // namespace ecrd
