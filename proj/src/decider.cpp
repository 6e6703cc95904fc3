#include "ecrd/decider.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "http_json.hpp"

namespace ecrd {

bool DeciderRequest::offers(TokenId id) const noexcept {
    return std::any_of(candidates.begin(), candidates.end(), [&](const DeciderCandidate& c) { return c.id == id; });
}

DeciderRequest build_request(std::span<const TokenId> prefix, const CandidateSet& cands, const Vocabulary& vocab,
                             const ConditioningContext& ctx, std::size_t tail) {
    DeciderRequest req;
    req.context_id = ctx.id;
    const std::size_t keep = std::min(tail, prefix.size());
    for (TokenId t : prefix.last(keep)) req.prefix_tail.push_back(vocab.surface(t));
    for (const auto& c : cands.candidates) req.candidates.push_back({c.token, vocab.surface(c.token)});
    return req;
}

void validate_verdict(const DeciderRequest& request, const DeciderVerdict& verdict) {
    if (!request.offers(verdict.chosen)) {
        throw InvalidVerdict("decider chose token " + std::to_string(verdict.chosen.value) +
                             " outside the candidate set");
    }
    if (verdict.sentence.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw InvalidVerdict("decider returned an empty evidence sentence");
    }
    for (const auto& a : verdict.annotations) {
        try {
            a.validate();
        } catch (const std::invalid_argument& e) {
            throw InvalidVerdict(std::string("decider annotation: ") + e.what());
        }
    }
}

nlohmann::json to_json(const DeciderRequest& request) {
    auto cands = nlohmann::json::array();
    for (const auto& c : request.candidates) cands.push_back({{"id", c.id.value}, {"surface", c.surface}});
    return {{"context_id", request.context_id}, {"prefix_tail", request.prefix_tail}, {"candidates", cands}};
}

DeciderRequest request_from_json(const nlohmann::json& doc) {
    DeciderRequest req;
    req.context_id = doc.at("context_id").get<std::string>();
    req.prefix_tail = doc.at("prefix_tail").get<std::vector<std::string>>();
    for (const auto& c : doc.at("candidates")) {
        req.candidates.push_back({TokenId{c.at("id").get<std::int32_t>()}, c.at("surface").get<std::string>()});
    }
    return req;
}

namespace {

std::vector<RegionAnnotation> annotations_from_json(const nlohmann::json& doc) {
    std::vector<RegionAnnotation> out;
    if (doc.contains("annotations") && !doc["annotations"].is_null()) {
        for (const auto& a : doc["annotations"]) {
            RegionAnnotation region;
            const auto& bbox = a.at("bbox");
            if (!bbox.is_array() || bbox.size() != 4) throw std::invalid_argument("bbox must have four coordinates");
            for (std::size_t i = 0; i < 4; ++i) region.bbox[i] = bbox[i].get<double>();
            if (a.contains("label") && !a["label"].is_null()) region.label = a["label"].get<std::string>();
            out.push_back(std::move(region));
        }
    }
    return out;
}

}  // namespace

DeciderVerdict verdict_from_json(const nlohmann::json& doc) {
    try {
        DeciderVerdict v;
        v.chosen = TokenId{doc.at("chosen_id").get<std::int32_t>()};
        v.sentence = doc.at("sentence").get<std::string>();
        v.annotations = annotations_from_json(doc);
        return v;
    } catch (const std::exception& e) {
        throw BackendError(BackendError::Kind::malformed, std::string("malformed decider reply: ") + e.what(), 1, false);
    }
}

// ---------------------------------------------------------------- scripted

ScriptedDecider ScriptedDecider::from_json(const nlohmann::json& doc) {
    const auto& list = doc.is_object() && doc.contains("verdicts") ? doc["verdicts"] : doc;
    if (!list.is_array()) throw std::invalid_argument("decider script must be a JSON array");
    std::vector<Entry> script;
    for (const auto& item : list) {
        Entry e;
        if (item.contains("chosen_id")) e.chosen_id = TokenId{item["chosen_id"].get<std::int32_t>()};
        if (item.contains("chosen")) e.chosen_surface = item["chosen"].get<std::string>();
        if (!e.chosen_id && !e.chosen_surface) throw std::invalid_argument("script entry needs chosen_id or chosen");
        e.sentence = item.at("sentence").get<std::string>();
        e.annotations = annotations_from_json(item);
        e.latency_s = item.value("latency_s", 0.0);
        script.push_back(std::move(e));
    }
    return ScriptedDecider(std::move(script));
}

ScriptedDecider ScriptedDecider::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open decider script " + path.string());
    return from_json(nlohmann::json::parse(in));
}

DeciderVerdict ScriptedDecider::decide(const DeciderRequest& request) {
    requests_.push_back(request);
    if (next_ >= script_.size()) {
        throw DeciderError("decider script exhausted after " + std::to_string(script_.size()) + " verdicts");
    }
    const Entry& e = script_[next_++];
    DeciderVerdict v;
    if (e.chosen_id) {
        v.chosen = *e.chosen_id;
    } else {
        auto it = std::find_if(request.candidates.begin(), request.candidates.end(),
                               [&](const DeciderCandidate& c) { return c.surface == *e.chosen_surface; });
        // An unknown surface yields an id no candidate carries; validation flags it.
        v.chosen = it == request.candidates.end() ? TokenId{-1} : it->id;
    }
    v.sentence = e.sentence;
    v.annotations = e.annotations;
    v.latency_s = e.latency_s;
    return v;
}

// ------------------------------------------------------------------ remote

RemoteDeciderConfig RemoteDeciderConfig::from_json(const nlohmann::json& doc) {
    RemoteDeciderConfig cfg;
    cfg.endpoint = doc.at("endpoint").get<std::string>();
    if (doc.contains("timeout_s")) {
        cfg.timeout = std::chrono::milliseconds(
            static_cast<std::int64_t>(std::llround(doc["timeout_s"].get<double>() * 1000.0)));
    }
    cfg.max_retries = doc.value("max_retries", cfg.max_retries);
    if (doc.contains("retry_backoff_ms")) {
        cfg.retry_backoff = std::chrono::milliseconds(doc["retry_backoff_ms"].get<std::int64_t>());
    }
    cfg.auth_env = doc.value("auth_env", cfg.auth_env);
    return cfg;
}

RemoteDecider::RemoteDecider(RemoteDeciderConfig config) : config_(std::move(config)) {
    detail::split_endpoint(config_.endpoint);
}

DeciderVerdict RemoteDecider::decide(const DeciderRequest& request) {
    const auto start = std::chrono::steady_clock::now();
    const detail::PostOptions opts{config_.timeout, config_.max_retries, config_.retry_backoff, config_.auth_env};
    auto verdict = verdict_from_json(detail::post_json(detail::split_endpoint(config_.endpoint), to_json(request), opts));
    verdict.latency_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return verdict;
}

}  // namespace ecrd
