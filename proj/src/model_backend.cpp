#include "ecrd/model_backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "http_json.hpp"

namespace ecrd {

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> surfaces) : surfaces_(std::move(surfaces)) {
    index_.reserve(surfaces_.size());
    for (std::size_t i = 0; i < surfaces_.size(); ++i) {
        if (!index_.emplace(surfaces_[i], TokenId{static_cast<std::int32_t>(i)}).second) {
            throw std::invalid_argument("duplicate vocabulary surface '" + surfaces_[i] + "'");
        }
    }
}

const std::string& Vocabulary::surface(TokenId id) const {
    if (id.value < 0 || static_cast<std::size_t>(id.value) >= surfaces_.size()) {
        throw std::out_of_range("token id " + std::to_string(id.value) + " outside vocabulary");
    }
    return surfaces_[static_cast<std::size_t>(id.value)];
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocabulary::at(std::string_view surface) const {
    if (auto id = find(surface)) return *id;
    throw std::out_of_range("surface '" + std::string(surface) + "' not in vocabulary");
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    std::istringstream in{std::string(text)};
    std::string word;
    const auto unk = find("<unk>");
    while (in >> word) {
        if (auto id = find(word)) {
            out.push_back(*id);
        } else if (unk) {
            out.push_back(*unk);
        } else {
            throw std::invalid_argument("word '" + word + "' not in vocabulary and no <unk> entry");
        }
    }
    return out;
}

std::string Vocabulary::detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += surface(tokens[i]);
    }
    return out;
}

std::string_view to_string(BackendError::Kind kind) {
    switch (kind) {
        case BackendError::Kind::timeout: return "timeout";
        case BackendError::Kind::transport: return "transport";
        case BackendError::Kind::http_status: return "http_status";
        case BackendError::Kind::malformed: return "malformed";
    }
    return "unknown";
}

// -------------------------------------------------------------- TabularModel

namespace {

TokenDistribution dense_distribution(std::size_t vocab_size, const std::vector<double>& probs) {
    if (probs.size() != vocab_size) {
        throw std::invalid_argument("default distribution has " + std::to_string(probs.size()) +
                                    " entries for a vocabulary of " + std::to_string(vocab_size));
    }
    std::vector<TokenProb> tp;
    tp.reserve(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        tp.push_back({TokenId{static_cast<std::int32_t>(i)}, probs[i]});
    }
    return TokenDistribution(vocab_size, std::move(tp), 0.0);
}

}  // namespace

TabularModel::TabularModel(Vocabulary vocab, std::vector<double> default_probs)
    : vocab_(std::move(vocab)), default_(dense_distribution(vocab_.size(), default_probs)) {}

void TabularModel::set_entry(std::vector<TokenId> context, TokenDistribution dist) {
    if (context.empty()) throw std::invalid_argument("tabular entry needs a non-empty context");
    if (dist.vocab_size() != vocab_.size()) {
        throw std::invalid_argument("tabular entry vocabulary size mismatch");
    }
    longest_context_ = std::max(longest_context_, context.size());
    entries_.insert_or_assign(std::move(context), std::move(dist));
}

void TabularModel::set_entry(std::string_view context_text,
                             const std::vector<std::pair<std::string, double>>& probs) {
    std::vector<TokenProb> tp;
    tp.reserve(probs.size());
    for (const auto& [surface, p] : probs) tp.push_back({vocab_.at(surface), p});
    set_entry(vocab_.tokenize(context_text),
              TokenDistribution::with_implicit_residual(vocab_.size(), std::move(tp)));
}

const TokenDistribution& TabularModel::lookup(std::span<const TokenId> prefix) const {
    const std::size_t max_len = std::min(prefix.size(), longest_context_);
    for (std::size_t len = max_len; len >= 1; --len) {
        std::vector<TokenId> key(prefix.end() - static_cast<std::ptrdiff_t>(len), prefix.end());
        if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    }
    return default_;
}

TokenDistribution TabularModel::next_distribution(std::span<const TokenId> prefix,
                                                  const ConditioningContext&) const {
    return lookup(prefix);
}

std::vector<double> TabularModel::score_conditionals(std::span<const TokenId> tokens,
                                                     std::span<const TokenId> prefix,
                                                     const ConditioningContext&) const {
    if (tokens.empty()) throw std::invalid_argument("score_conditionals needs at least one token");
    const auto& dist = lookup(prefix);
    const std::size_t unlisted = vocab_.size() - dist.enumerated();
    const double residual_share = unlisted ? dist.residual_mass() / static_cast<double>(unlisted) : 0.0;
    std::vector<double> out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t.value < 0 || static_cast<std::size_t>(t.value) >= vocab_.size()) {
            throw std::out_of_range("scored token outside vocabulary");
        }
        out.push_back(dist.contains(t) ? dist.prob(t) : residual_share);
    }
    return out;
}

BackendCapabilities TabularModel::capabilities() const {
    return {0, true, "whitespace"};
}

nlohmann::json TabularModel::to_json() const {
    nlohmann::json doc;
    doc["vocab"] = vocab_.surfaces();
    std::vector<double> dense(vocab_.size(), 0.0);
    for (const auto& tp : default_.probs()) dense[static_cast<std::size_t>(tp.token.value)] = tp.prob;
    doc["default"] = dense;
    auto entries = nlohmann::json::array();
    for (const auto& [context, dist] : entries_) {
        nlohmann::json ctx = nlohmann::json::array();
        for (TokenId t : context) ctx.push_back(t.value);
        nlohmann::json probs = nlohmann::json::object();
        for (const auto& tp : dist.probs()) probs[std::to_string(tp.token.value)] = tp.prob;
        entries.push_back({{"context", std::move(ctx)}, {"probs", std::move(probs)}});
    }
    doc["entries"] = std::move(entries);
    return doc;
}

TabularModel TabularModel::from_json(const nlohmann::json& doc) {
    TabularModel model(Vocabulary(doc.at("vocab").get<std::vector<std::string>>()),
                       doc.at("default").get<std::vector<double>>());
    if (doc.contains("entries")) {
        for (const auto& entry : doc.at("entries")) {
            std::vector<TokenId> context;
            for (const auto& id : entry.at("context")) context.push_back(TokenId{id.get<std::int32_t>()});
            std::vector<TokenProb> probs;
            for (const auto& [key, p] : entry.at("probs").items()) {
                probs.push_back({TokenId{std::stoi(key)}, p.get<double>()});
            }
            std::sort(probs.begin(), probs.end(),
                      [](const TokenProb& a, const TokenProb& b) { return a.token < b.token; });
            model.set_entry(std::move(context),
                            TokenDistribution::with_implicit_residual(model.vocab_.size(), std::move(probs)));
        }
    }
    return model;
}

TabularModel TabularModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open tabular model " + path.string());
    return from_json(nlohmann::json::parse(in));
}

void TabularModel::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write tabular model " + path.string());
    out << to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------- Counting

std::vector<double> CountingScoringBackend::score_conditionals(std::span<const TokenId> tokens,
                                                               std::span<const TokenId> prefix,
                                                               const ConditioningContext& ctx) const {
    queries_ += tokens.size();
    ++calls_;
    return inner_.score_conditionals(tokens, prefix, ctx);
}

// ------------------------------------------------------------------ Remote

RemoteConfig RemoteConfig::from_json(const nlohmann::json& doc) {
    RemoteConfig cfg;
    cfg.endpoint = doc.at("endpoint").get<std::string>();
    if (doc.contains("timeout_s")) {
        cfg.timeout = std::chrono::milliseconds(
            static_cast<std::int64_t>(std::llround(doc["timeout_s"].get<double>() * 1000.0)));
    }
    cfg.top_k = doc.value("top_k", cfg.top_k);
    cfg.max_retries = doc.value("max_retries", cfg.max_retries);
    if (doc.contains("retry_backoff_ms")) {
        cfg.retry_backoff = std::chrono::milliseconds(doc["retry_backoff_ms"].get<std::int64_t>());
    }
    cfg.auth_env = doc.value("auth_env", cfg.auth_env);
    const auto wire = doc.value("wire", std::string("native"));
    if (wire == "native") {
        cfg.wire = Wire::native;
    } else if (wire == "openai_completions") {
        cfg.wire = Wire::openai_completions;
    } else {
        throw std::invalid_argument("unknown remote wire '" + wire + "'");
    }
    cfg.model = doc.value("model", cfg.model);
    cfg.no_cache = doc.value("no_cache", cfg.no_cache);
    cfg.missing_floor = doc.value("missing_floor", cfg.missing_floor);
    return cfg;
}

RemoteModelClient::RemoteModelClient(RemoteConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
    if (config_.top_k == 0) throw std::invalid_argument("remote top_k must be >= 1");
    detail::split_endpoint(config_.endpoint);
}

nlohmann::json RemoteModelClient::build_request(std::span<const TokenId> prefix,
                                                const ConditioningContext& ctx) const {
    nlohmann::json ids = nlohmann::json::array();
    for (TokenId t : prefix) ids.push_back(t.value);
    if (config_.wire == RemoteConfig::Wire::openai_completions) {
        nlohmann::json body = {{"prompt", std::move(ids)},
                               {"max_tokens", 1},
                               {"logprobs", config_.top_k},
                               {"temperature", 0},
                               {"echo", false}};
        if (!config_.model.empty()) body["model"] = config_.model;
        if (!ctx.id.empty()) body["user"] = ctx.id;
        if (config_.no_cache) body["cache_prompt"] = false;
        return body;
    }
    nlohmann::json body = {{"prefix_tokens", std::move(ids)}, {"context_id", ctx.id}, {"top_k", config_.top_k}};
    if (config_.no_cache) body["no_cache"] = true;
    return body;
}

std::vector<TokenProb> RemoteModelClient::parse_response(const nlohmann::json& body) const {
    auto malformed = [](const std::string& why) {
        return BackendError(BackendError::Kind::malformed, "malformed model response: " + why, 1, false);
    };

    std::vector<std::pair<TokenId, double>> logprobs;
    try {
        if (config_.wire == RemoteConfig::Wire::openai_completions) {
            const auto& top = body.at("choices").at(0).at("logprobs").at("top_logprobs").at(0);
            for (const auto& [surface, lp] : top.items()) {
                // Surfaces the vocabulary cannot name stay in the residual.
                if (auto id = vocab_.find(surface)) logprobs.emplace_back(*id, lp.get<double>());
            }
        } else {
            const auto& tokens = body.at("tokens");
            const auto& lps = body.at("logprobs");
            if (!tokens.is_array() || !lps.is_array() || tokens.size() != lps.size()) {
                throw malformed("tokens/logprobs must be arrays of equal length");
            }
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                logprobs.emplace_back(TokenId{tokens[i].get<std::int32_t>()}, lps[i].get<double>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw malformed(e.what());
    }

    std::vector<TokenProb> out;
    out.reserve(logprobs.size());
    double sum = 0.0;
    for (const auto& [id, lp] : logprobs) {
        if (id.value < 0 || static_cast<std::size_t>(id.value) >= vocab_.size()) {
            throw malformed("token id " + std::to_string(id.value) + " outside vocabulary");
        }
        if (std::isnan(lp) || lp > 1e-9) throw malformed("logprob must be <= 0");
        if (std::any_of(out.begin(), out.end(), [&](const TokenProb& tp) { return tp.token == id; })) {
            throw malformed("duplicate token id " + std::to_string(id.value));
        }
        const double p = std::exp(std::min(lp, 0.0));
        out.push_back({id, p});
        sum += p;
    }
    if (sum > 1.0) {
        for (auto& tp : out) tp.prob /= sum;
    }
    return out;
}

std::vector<TokenProb> RemoteModelClient::query(std::span<const TokenId> prefix,
                                                const ConditioningContext& ctx) const {
    const detail::PostOptions opts{config_.timeout, config_.max_retries, config_.retry_backoff, config_.auth_env};
    return parse_response(detail::post_json(detail::split_endpoint(config_.endpoint),
                                            build_request(prefix, ctx), opts));
}

TokenDistribution RemoteModelClient::next_distribution(std::span<const TokenId> prefix,
                                                       const ConditioningContext& ctx) const {
    return TokenDistribution::with_implicit_residual(vocab_.size(), query(prefix, ctx));
}

std::vector<double> RemoteModelClient::score_conditionals(std::span<const TokenId> tokens,
                                                          std::span<const TokenId> prefix,
                                                          const ConditioningContext& ctx) const {
    if (tokens.empty()) throw std::invalid_argument("score_conditionals needs at least one token");
    const auto top = query(prefix, ctx);
    std::vector<double> out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        auto it = std::find_if(top.begin(), top.end(), [&](const TokenProb& tp) { return tp.token == t; });
        out.push_back(it == top.end() ? config_.missing_floor : it->prob);
    }
    return out;
}

BackendCapabilities RemoteModelClient::capabilities() const {
    return {config_.top_k, true, "remote"};
}

}  // namespace ecrd
