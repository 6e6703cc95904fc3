#include <doctest.h>

#include <random>
#include <stdexcept>

#include "ecrd/analysis.hpp"
#include "fixtures.hpp"

using namespace ecrd;

TEST_CASE("latency fit recovers an exact line") {
    const auto m = fit_latency_model({{0, 12.92}, {1, 14.38}, {2, 15.84}, {3, 17.30}});
    CHECK(m.t0 == doctest::Approx(12.92).epsilon(1e-12));
    CHECK(m.l0 == doctest::Approx(1.46).epsilon(1e-12));
    CHECK(m.residual_rms < 1e-9);
    CHECK(m.observations == 4);
    CHECK(m.predict(2.0) == doctest::Approx(15.84));
    const auto back = LatencyModel::from_json(m.to_json());
    CHECK(back.t0 == m.t0);
    CHECK(back.l0 == m.l0);
}

TEST_CASE("latency fit agrees with closed-form least squares") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<LatencyObservation> obs;
    for (int i = 0; i < 30; ++i) obs.push_back({std::floor(u(rng)), u(rng)});
    obs.push_back({0.0, 1.0});
    obs.push_back({9.0, 2.0});
    double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& o : obs) {
        n += 1;
        sx += o.r;
        sy += o.seconds;
        sxx += o.r * o.r;
        sxy += o.r * o.seconds;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / n;
    const auto m = fit_latency_model(obs);
    CHECK(m.l0 == doctest::Approx(slope).epsilon(1e-9));
    CHECK(m.t0 == doctest::Approx(intercept).epsilon(1e-9));
}

TEST_CASE("latency fit needs two distinct call counts") {
    CHECK_THROWS_WITH_AS(fit_latency_model({{2, 1.0}, {2, 3.0}}), "underdetermined", std::invalid_argument);
    CHECK_THROWS_AS(fit_latency_model({}), std::invalid_argument);
    CHECK_THROWS_AS(fit_latency_model({{1, 1.0}}), std::invalid_argument);
}

TEST_CASE("sweep CSV round-trips with empty cells") {
    SweepReport rep;
    rep.rows = {{0.0, 0.0, 12.5, 0.5}, {0.02, 1.0 / 3.0, std::nullopt, 0.1 + 0.2}, {0.16, 2.75, 19.0, std::nullopt}};
    const auto text = rep.to_csv();
    CHECK(text.rfind("delta,r,mean_time,score\n", 0) == 0);
    CHECK(SweepReport::from_csv(text).rows == rep.rows);
    CHECK_THROWS(SweepReport::from_csv("delta,r\n0,1\n"));
    CHECK_THROWS(SweepReport::from_csv("delta,r,mean_time,score\n0,x,,\n"));
}

TEST_CASE("frozen sweep counts replayed triggers") {
    auto make = [](std::vector<double> margins) {
        DecodeTrace t;
        for (double m : margins) {
            StepRecord s;
            s.margin = m;
            s.knee_index = 2;
            t.steps.push_back(s);
        }
        return t;
    };
    const std::vector<DecodeTrace> traces{make({0.01, 0.5}), make({0.05, 0.10, 0.03})};
    const auto rep = sweep_frozen(traces, {0.0, 0.04, 0.12});
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.rows[0].r == 0.0);
    CHECK(rep.rows[1].r == 1.0);  // (1 + 1) / 2
    CHECK(rep.rows[2].r == 2.0);  // (1 + 3) / 2
    CHECK_FALSE(rep.rows[1].mean_time.has_value());
    CHECK_FALSE(rep.rows[1].score.has_value());
    CHECK(sweep_frozen(traces, {0.08}).rows.size() == 1);
}

TEST_CASE("grid validation") {
    CHECK_NOTHROW(validate_grid(kDefaultDeltaGrid));
    CHECK_THROWS_AS(validate_grid({}), std::invalid_argument);
    CHECK_THROWS_AS(validate_grid({0.1, 0.1}), std::invalid_argument);
    CHECK_THROWS_AS(validate_grid({0.2, 0.1}), std::invalid_argument);
    CHECK_THROWS_AS(validate_grid({0.5, 1.5}), std::invalid_argument);
    CHECK_THROWS_AS(validate_grid({-0.1}), std::invalid_argument);
}

TEST_CASE("decode sweep over a corpus is deterministic across job counts") {
    const auto world = fixtures::dress_colour();
    ItemDecoder decode_item = [&](const CorpusItem& item, double delta) {
        ManualClock clock(1.0);
        Engine engine(*world.generator, *world.scorer, clock);
        auto cfg = world.config;
        cfg.delta = delta;
        if (item.global_description) cfg.global_description = *item.global_description;
        auto d = world.decider();
        return engine.decode(item.prompt, ConditioningContext{item.context_id}, cfg, &d);
    };
    std::vector<CorpusItem> corpus;
    for (int i = 0; i < 6; ++i)
        corpus.push_back({"img-" + std::to_string(i), world.prompt, std::string("the first dress is blue , so the answer is blue"),
                          std::nullopt, std::nullopt});
    const std::vector<double> grid{0.0, 0.08};
    const auto one = sweep_decode(corpus, grid, decode_item, 1);
    const auto four = sweep_decode(corpus, grid, decode_item, 4);
    CHECK(one.to_csv() == four.to_csv());
    CHECK(one.rows[0].r == 0.0);
    CHECK(*one.rows[0].score == 0.0);
    CHECK(one.rows[1].r == 1.0);
    CHECK(*one.rows[1].score == 1.0);
    CHECK(one.rows[0].mean_time.has_value());

    corpus[0].answer.reset();
    CHECK_FALSE(sweep_decode(corpus, {0.08}, decode_item, 2).rows[0].score.has_value());
    CHECK_THROWS_AS(sweep_decode({}, grid, decode_item, 1), std::invalid_argument);
}

TEST_CASE("exact match normalizes whitespace only") {
    CHECK(exact_match("  3 0  0\n", "3 0 0"));
    CHECK_FALSE(exact_match("3 0 0", "300"));
    CHECK_FALSE(exact_match("Blue", "blue"));
}

TEST_CASE("corpus JSON parsing") {
    const auto items = corpus_from_json(nlohmann::json::parse(R"([
        {"context_id": "a", "prompt": "q", "answer": "x"},
        {"context_id": "b", "prompt": "r", "global_description": "d", "decider": "script:v.json"}
    ])"));
    REQUIRE(items.size() == 2);
    CHECK(*items[0].answer == "x");
    CHECK_FALSE(items[1].answer.has_value());
    CHECK(*items[1].decider == "script:v.json");
    CHECK_THROWS(corpus_from_json(nlohmann::json::parse(R"([{"prompt": "q"}])")));
    CHECK_THROWS(corpus_from_json(nlohmann::json::object()));
}
