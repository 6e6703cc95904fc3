#include "ecrd/evidence.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <mutex>
#include <unordered_set>

namespace ecrd {

void RegionAnnotation::validate() const {
    const auto [x0, y0, x1, y1] = bbox;
    for (double c : bbox) {
        if (!(c >= 0.0) || !std::isfinite(c)) throw std::invalid_argument("bbox coordinates must be finite and >= 0");
    }
    if (x0 > x1 || y0 > y1) throw std::invalid_argument("bbox must satisfy x_min <= x_max and y_min <= y_max");
}

Evidence Evidence::make(std::string id, std::string text, const Vocabulary& vocab, Provenance provenance,
                        std::vector<RegionAnnotation> annotations) {
    Evidence ev;
    ev.tokens = vocab.tokenize(text);
    if (ev.tokens.empty()) throw std::invalid_argument("evidence '" + id + "' has no tokens");
    for (const auto& a : annotations) a.validate();
    ev.id = std::move(id);
    ev.text = std::move(text);
    ev.annotations = std::move(annotations);
    ev.provenance = provenance;
    return ev;
}

// ------------------------------------------------------------------- pool

EvidencePool& EvidencePool::append(Evidence ev) {
    if (ev.tokens.empty()) throw std::invalid_argument("evidence '" + ev.id + "' has no tokens");
    const bool dup = std::any_of(evidences_.begin(), evidences_.end(),
                                 [&](const Evidence& e) { return e.id == ev.id; });
    if (dup) throw std::invalid_argument("duplicate evidence id '" + ev.id + "'");
    evidences_.push_back(std::move(ev));
    return *this;
}

std::size_t EvidencePool::count(Provenance::Kind kind) const noexcept {
    return static_cast<std::size_t>(std::count_if(evidences_.begin(), evidences_.end(),
                                                  [&](const Evidence& e) { return e.provenance.kind == kind; }));
}

nlohmann::json to_json(const RegionAnnotation& a) {
    nlohmann::json doc = {{"bbox", a.bbox}};
    doc["label"] = a.label ? nlohmann::json(*a.label) : nlohmann::json(nullptr);
    return doc;
}

RegionAnnotation region_from_json(const nlohmann::json& doc) {
    RegionAnnotation a;
    const auto& bbox = doc.at("bbox");
    if (!bbox.is_array() || bbox.size() != 4) throw std::invalid_argument("bbox must have four coordinates");
    for (std::size_t i = 0; i < 4; ++i) a.bbox[i] = bbox[i].get<double>();
    if (doc.contains("label") && !doc["label"].is_null()) a.label = doc["label"].get<std::string>();
    a.validate();
    return a;
}

nlohmann::json EvidencePool::to_json(bool include_tokens) const {
    auto list = nlohmann::json::array();
    for (const auto& ev : evidences_) {
        nlohmann::json prov;
        if (ev.provenance.kind == Provenance::Kind::global_description) {
            prov = {{"kind", "global_description"}, {"step", nullptr}};
        } else {
            prov = {{"kind", "decider"}, {"step", *ev.provenance.step}};
        }
        auto annotations = nlohmann::json::array();
        for (const auto& a : ev.annotations) annotations.push_back(ecrd::to_json(a));
        nlohmann::json item = {{"id", ev.id}, {"text", ev.text}, {"provenance", prov}, {"annotations", annotations}};
        if (include_tokens) {
            auto ids = nlohmann::json::array();
            for (TokenId t : ev.tokens) ids.push_back(t.value);
            item["tokens"] = std::move(ids);
        }
        list.push_back(std::move(item));
    }
    return {{"evidences", list}};
}

EvidencePool EvidencePool::from_json(const nlohmann::json& doc, const Vocabulary* vocab) {
    EvidencePool pool;
    for (const auto& item : doc.at("evidences")) {
        const auto& prov = item.at("provenance");
        const auto kind = prov.at("kind").get<std::string>();
        Provenance p;
        if (kind == "global_description") {
            p = Provenance::global();
        } else if (kind == "decider") {
            p = Provenance::from_decider(prov.at("step").get<std::size_t>());
        } else {
            throw std::invalid_argument("unknown provenance kind '" + kind + "'");
        }
        std::vector<RegionAnnotation> annotations;
        if (item.contains("annotations")) {
            for (const auto& a : item["annotations"]) annotations.push_back(region_from_json(a));
        }
        auto id = item.at("id").get<std::string>();
        auto text = item.at("text").get<std::string>();
        if (item.contains("tokens")) {
            Evidence ev;
            for (const auto& t : item["tokens"]) ev.tokens.push_back(TokenId{t.get<std::int32_t>()});
            ev.id = std::move(id);
            ev.text = std::move(text);
            ev.annotations = std::move(annotations);
            ev.provenance = p;
            pool.append(std::move(ev));
        } else {
            if (!vocab) throw std::invalid_argument("evidence pool without token ids needs a vocabulary");
            pool.append(Evidence::make(std::move(id), std::move(text), *vocab, p, std::move(annotations)));
        }
    }
    return pool;
}

// ------------------------------------------------------------------- cache

double round_to_half(double value) noexcept {
    if (value == 0.0 || !std::isfinite(value)) return value;
    int exp = 0;
    std::frexp(value, &exp);  // |value| = m * 2^exp, m in [0.5, 1)
    // 11 significant bits for normals, fixed 2^-24 spacing for subnormals.
    const double quantum = std::ldexp(1.0, std::max(exp - 11, -24));
    const double rounded = std::nearbyint(value / quantum) * quantum;
    constexpr double kHalfMax = 65504.0;
    if (std::abs(rounded) > kHalfMax) return std::copysign(std::numeric_limits<double>::infinity(), value);
    return rounded;
}

std::size_t PrefixSupportCache::KeyHash::operator()(const Key& k) const noexcept {
    std::size_t h = std::hash<std::string>{}(k.evidence_id);
    h ^= std::hash<std::size_t>{}(k.j) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= std::hash<std::int32_t>{}(k.token) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

std::optional<double> PrefixSupportCache::find(const std::string& evidence_id, std::size_t j, TokenId token) const {
    std::shared_lock lock(mutex_);
    auto it = values_.find(Key{evidence_id, j, token.value});
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

double PrefixSupportCache::insert(const std::string& evidence_id, std::size_t j, TokenId token, double prob) {
    const double stored = precision_ == Precision::half ? round_to_half(prob) : prob;
    std::unique_lock lock(mutex_);
    return values_.try_emplace(Key{evidence_id, j, token.value}, stored).first->second;
}

std::size_t PrefixSupportCache::size() const {
    std::shared_lock lock(mutex_);
    return values_.size();
}

// ---------------------------------------------------------------- template

ScoringTemplate ScoringTemplate::parse(std::string_view text, const Vocabulary& vocab) {
    constexpr std::string_view kSlot = "{prefix}";
    ScoringTemplate t;
    if (text.empty()) return t;
    const auto pos = text.find(kSlot);
    if (pos == std::string_view::npos) {
        throw std::invalid_argument("scoring template must contain {prefix}");
    }
    t.lead = vocab.tokenize(text.substr(0, pos));
    t.trail = vocab.tokenize(text.substr(pos + kSlot.size()));
    return t;
}

std::vector<TokenId> ScoringTemplate::wrap(std::span<const TokenId> prefix) const {
    std::vector<TokenId> out;
    out.reserve(lead.size() + prefix.size() + trail.size());
    out.insert(out.end(), lead.begin(), lead.end());
    out.insert(out.end(), prefix.begin(), prefix.end());
    out.insert(out.end(), trail.begin(), trail.end());
    return out;
}

// ------------------------------------------------------------------ scorer

EvidenceScorer::EvidenceScorer(const ScoringBackend& backend, std::shared_ptr<PrefixSupportCache> cache,
                               Options options)
    : backend_(backend), cache_(std::move(cache)), options_(std::move(options)) {}

std::vector<std::vector<double>> EvidenceScorer::prefix_table(std::span<const TokenId> tokens,
                                                              const Evidence& ev) const {
    if (ev.tokens.empty()) throw std::invalid_argument("evidence '" + ev.id + "' has no tokens");
    const std::size_t len = ev.tokens.size();
    std::vector<std::vector<double>> table(len, std::vector<double>(tokens.size(), 0.0));

    for (std::size_t j = 1; j <= len; ++j) {
        auto& row = table[j - 1];
        std::vector<TokenId> missing;
        std::vector<std::size_t> missing_at;
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            std::optional<double> hit;
            if (cache_) hit = cache_->find(ev.id, j, tokens[t]);
            if (hit) {
                row[t] = *hit;
            } else {
                missing.push_back(tokens[t]);
                missing_at.push_back(t);
            }
        }
        if (missing.empty()) continue;

        std::vector<double> fresh;
        try {
            const auto prefix = options_.scoring_template.wrap(std::span(ev.tokens).first(j - 1));
            fresh = backend_.score_conditionals(missing, prefix, options_.context);
        } catch (const std::exception& e) {
            throw ScoringError(ev.id, j, e.what());
        }
        if (fresh.size() != missing.size()) throw ScoringError(ev.id, j, "backend returned a short row");
        for (std::size_t m = 0; m < missing.size(); ++m) {
            if (!(fresh[m] >= 0.0 && fresh[m] <= 1.0)) {
                throw ScoringError(ev.id, j, "conditional probability outside [0, 1]");
            }
            row[missing_at[m]] = cache_ ? cache_->insert(ev.id, j, missing[m], fresh[m]) : fresh[m];
        }
    }
    return table;
}

std::vector<double> EvidenceScorer::prefix_mean_support(std::span<const TokenId> tokens, const Evidence& ev) const {
    const auto table = prefix_table(tokens, ev);
    std::vector<double> mean(tokens.size(), 0.0);
    for (const auto& row : table) {
        for (std::size_t t = 0; t < row.size(); ++t) mean[t] += row[t];
    }
    const double len = static_cast<double>(table.size());
    for (auto& m : mean) m /= len;
    return mean;
}

std::vector<double> EvidenceScorer::pooled_means(std::span<const TokenId> tokens, const EvidencePool& pool) const {
    if (pool.empty()) throw std::invalid_argument("empty evidence pool");
    const auto evidences = pool.evidences();

    std::vector<std::vector<double>> per_evidence(evidences.size());
    if (options_.parallel && backend_.capabilities().concurrent && evidences.size() > 1) {
        std::vector<std::future<std::vector<double>>> jobs;
        jobs.reserve(evidences.size());
        for (const auto& ev : evidences) {
            jobs.push_back(std::async(std::launch::async, [&, tokens] { return prefix_mean_support(tokens, ev); }));
        }
        for (std::size_t e = 0; e < jobs.size(); ++e) per_evidence[e] = jobs[e].get();
    } else {
        for (std::size_t e = 0; e < evidences.size(); ++e) per_evidence[e] = prefix_mean_support(tokens, evidences[e]);
    }

    // Summed in pool order regardless of how the work was scheduled.
    std::vector<double> means(tokens.size(), 0.0);
    for (const auto& q : per_evidence) {
        for (std::size_t t = 0; t < q.size(); ++t) means[t] += q[t];
    }
    const double n = static_cast<double>(evidences.size());
    for (auto& m : means) m /= n;
    return means;
}

double EvidenceScorer::pooled_score(TokenId token, const EvidencePool& pool) const {
    const double mean = pooled_means(std::span(&token, 1), pool).front();
    if (mean <= 0.0) return std::numeric_limits<double>::infinity();
    return -std::log(mean);
}

EvidenceDistribution EvidenceScorer::evidence_distribution(const CandidateSet& cands, const EvidencePool& pool) const {
    if (cands.candidates.empty()) throw std::invalid_argument("empty candidate set");
    const auto tokens = cands.tokens();

    EvidenceDistribution out;
    out.pooled_means = pooled_means(tokens, pool);

    const bool all_zero = std::all_of(out.pooled_means.begin(), out.pooled_means.end(),
                                      [](double m) { return m < kZeroSupport; });
    double total = 0.0;
    for (double m : out.pooled_means) total += m;

    out.r.entries.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const double p = all_zero ? 1.0 / static_cast<double>(tokens.size()) : out.pooled_means[i] / total;
        out.r.entries.push_back({tokens[i], p});
    }
    out.zero_support = all_zero;
    return out;
}

std::vector<double> EvidenceScorer::vdgd_min_kl(std::span<const TokenId> tokens, const Evidence& desc) const {
    const auto table = prefix_table(tokens, desc);
    std::vector<double> best(tokens.size(), std::numeric_limits<double>::infinity());
    for (const auto& row : table) {
        for (std::size_t t = 0; t < row.size(); ++t) {
            const double kl = row[t] > 0.0 ? -std::log(row[t]) : std::numeric_limits<double>::infinity();
            best[t] = std::min(best[t], kl);
        }
    }
    return best;
}

double prefix_mean_support(TokenId token, const Evidence& ev, const ScoringBackend& backend) {
    return EvidenceScorer(backend).prefix_mean_support(std::span(&token, 1), ev).front();
}

double pooled_score(TokenId token, const EvidencePool& pool, const ScoringBackend& backend) {
    return EvidenceScorer(backend).pooled_score(token, pool);
}

EvidenceDistribution evidence_distribution(const CandidateSet& cands, const EvidencePool& pool,
                                           const ScoringBackend& backend) {
    return EvidenceScorer(backend).evidence_distribution(cands, pool);
}

double vdgd_min_kl(TokenId token, const Evidence& desc, const ScoringBackend& backend) {
    return EvidenceScorer(backend).vdgd_min_kl(std::span(&token, 1), desc).front();
}

}  // namespace ecrd
