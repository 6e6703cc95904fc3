#include "ecrd/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <future>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ecrd {

nlohmann::json LatencyModel::to_json() const {
    return {{"t0", t0}, {"l0", l0}, {"residual_rms", residual_rms}, {"observations", observations}};
}

LatencyModel LatencyModel::from_json(const nlohmann::json& doc) {
    return {doc.at("t0").get<double>(), doc.at("l0").get<double>(), doc.at("residual_rms").get<double>(),
            doc.value("observations", std::size_t{0})};
}

LatencyModel fit_latency_model(const std::vector<LatencyObservation>& obs) {
    if (obs.size() < 2) throw std::invalid_argument("underdetermined");
    const double n = static_cast<double>(obs.size());
    double mean_r = 0.0;
    double mean_t = 0.0;
    for (const auto& o : obs) {
        mean_r += o.r;
        mean_t += o.seconds;
    }
    mean_r /= n;
    mean_t /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    for (const auto& o : obs) {
        sxx += (o.r - mean_r) * (o.r - mean_r);
        sxy += (o.r - mean_r) * (o.seconds - mean_t);
    }
    if (sxx <= 0.0) throw std::invalid_argument("underdetermined");

    LatencyModel m;
    m.l0 = sxy / sxx;
    m.t0 = mean_t - m.l0 * mean_r;
    double sse = 0.0;
    for (const auto& o : obs) {
        const double e = o.seconds - m.predict(o.r);
        sse += e * e;
    }
    m.residual_rms = std::sqrt(sse / n);
    m.observations = obs.size();
    return m;
}

// --------------------------------------------------------------------- csv

namespace {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& cell, std::size_t line_no) {
    double v = 0.0;
    auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw std::invalid_argument("sweep csv line " + std::to_string(line_no) + ": bad number '" + cell + "'");
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

void SweepReport::write_csv(std::ostream& out) const {
    out << "delta,r,mean_time,score\n";
    for (const auto& row : rows) {
        out << format_double(row.delta) << ',' << format_double(row.r) << ','
            << (row.mean_time ? format_double(*row.mean_time) : "") << ','
            << (row.score ? format_double(*row.score) : "") << '\n';
    }
}

std::string SweepReport::to_csv() const {
    std::ostringstream out;
    write_csv(out);
    return out.str();
}

SweepReport SweepReport::read_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "delta,r,mean_time,score") {
        throw std::invalid_argument("sweep csv: missing header");
    }
    SweepReport report;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != 4) {
            throw std::invalid_argument("sweep csv line " + std::to_string(line_no) + ": expected 4 columns");
        }
        SweepRow row;
        row.delta = parse_double(cells[0], line_no);
        row.r = parse_double(cells[1], line_no);
        if (!cells[2].empty()) row.mean_time = parse_double(cells[2], line_no);
        if (!cells[3].empty()) row.score = parse_double(cells[3], line_no);
        report.rows.push_back(row);
    }
    return report;
}

SweepReport SweepReport::from_csv(const std::string& text) {
    std::istringstream in(text);
    return read_csv(in);
}

// ------------------------------------------------------------------- sweep

void validate_grid(const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("delta grid is empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
        if (i > 0 && !(grid[i] > grid[i - 1])) throw std::invalid_argument("delta grid must be strictly increasing");
    }
}

SweepReport sweep_frozen(const std::vector<DecodeTrace>& traces, const std::vector<double>& grid) {
    validate_grid(grid);
    if (traces.empty()) throw std::invalid_argument("empty corpus");
    SweepReport report;
    for (double delta : grid) {
        double calls = 0.0;
        for (const auto& t : traces) calls += static_cast<double>(replay(t, delta).triggers);
        report.rows.push_back({delta, calls / static_cast<double>(traces.size()), std::nullopt, std::nullopt});
    }
    return report;
}

bool exact_match(const std::string& output, const std::string& answer) {
    auto words = [](const std::string& s) {
        std::vector<std::string> out;
        std::istringstream in(s);
        std::string w;
        while (in >> w) out.push_back(w);
        return out;
    };
    return words(output) == words(answer);
}

SweepReport sweep_decode(const std::vector<CorpusItem>& corpus, const std::vector<double>& grid,
                         const ItemDecoder& decode_item, std::size_t jobs) {
    validate_grid(grid);
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    jobs = std::max<std::size_t>(1, std::min(jobs, corpus.size()));
    const bool scored = std::all_of(corpus.begin(), corpus.end(), [](const CorpusItem& c) { return c.answer; });

    SweepReport report;
    for (double delta : grid) {
        std::vector<DecodeTrace> traces(corpus.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < corpus.size(); i = next++) traces[i] = decode_item(corpus[i], delta);
        };
        std::vector<std::future<void>> workers;
        for (std::size_t w = 1; w < jobs; ++w) workers.push_back(std::async(std::launch::async, worker));
        worker();
        for (auto& f : workers) f.get();

        double calls = 0.0;
        double seconds = 0.0;
        double correct = 0.0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            calls += static_cast<double>(traces[i].totals.decider_calls);
            seconds += traces[i].totals.wall_time_s;
            if (scored && exact_match(traces[i].final_text, *corpus[i].answer)) correct += 1.0;
        }
        const double n = static_cast<double>(corpus.size());
        SweepRow row{delta, calls / n, seconds / n, std::nullopt};
        if (scored) row.score = correct / n;
        report.rows.push_back(row);
    }
    return report;
}

std::vector<CorpusItem> corpus_from_json(const nlohmann::json& doc) {
    if (!doc.is_array()) throw std::invalid_argument("corpus must be a JSON array");
    std::vector<CorpusItem> out;
    for (const auto& item : doc) {
        CorpusItem c;
        c.context_id = item.at("context_id").get<std::string>();
        c.prompt = item.at("prompt").get<std::string>();
        if (item.contains("answer") && !item["answer"].is_null()) c.answer = item["answer"].get<std::string>();
        if (item.contains("global_description")) c.global_description = item["global_description"].get<std::string>();
        if (item.contains("decider")) c.decider = item["decider"].get<std::string>();
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace ecrd
