#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <future>
#include <random>

#include "ecrd/model_backend.hpp"
#include "fixtures.hpp"
#include "stub_server.hpp"

using namespace ecrd;
using fixtures::dense;
using fixtures::words;

TEST_CASE("vocabulary tokenizes on whitespace") {
    const auto v = words("the cat dog <unk>");
    CHECK(v.tokenize("the  cat\tdog") == std::vector<TokenId>{TokenId{0}, TokenId{1}, TokenId{2}});
    CHECK(v.tokenize("the bird") == std::vector<TokenId>{TokenId{0}, TokenId{3}});
    CHECK(v.detokenize(v.tokenize("the cat")) == "the cat");
    CHECK_THROWS_AS(words("a b").tokenize("c"), std::invalid_argument);
    CHECK_THROWS_AS(v.at("bird"), std::out_of_range);
}

TEST_CASE("tabular lookup: exact, longest suffix, default") {
    const auto v = words("ctx0 the cat dog x");
    TabularModel m(v, {0.2, 0.2, 0.2, 0.2, 0.2});
    m.set_entry("ctx0 the", {{"cat", 0.6}, {"dog", 0.4}});
    m.set_entry("the", {{"x", 1.0}});

    const auto hit = m.next_distribution(v.tokenize("ctx0 the"), {});
    CHECK(hit.prob(v.at("cat")) == 0.6);
    CHECK(hit.prob(v.at("dog")) == 0.4);
    CHECK(hit.residual_mass() == doctest::Approx(0.0));

    CHECK(m.next_distribution(v.tokenize("dog ctx0 the"), {}).prob(v.at("cat")) == 0.6);
    CHECK(m.next_distribution(v.tokenize("cat the"), {}).prob(v.at("x")) == 1.0);
    const auto fallback = m.next_distribution(v.tokenize("dog"), {});
    for (int t = 0; t < 5; ++t) CHECK(fallback.prob(TokenId{t}) == 0.2);
    CHECK(m.next_distribution({}, {}).prob(TokenId{0}) == 0.2);
}

TEST_CASE("tabular scoring gives exact values and spreads the residual") {
    const auto v = words("a b c d p");
    TabularModel m(v, dense(v, {{"a", 0.4}}));
    m.set_entry("p", {{"a", 0.5}, {"b", 0.3}});  // residual 0.2 over c, d, p
    const auto scored = m.score_conditionals(v.tokenize("a b c"), v.tokenize("p"), {});
    CHECK(scored[0] == 0.5);
    CHECK(scored[1] == 0.3);
    CHECK(scored[2] == doctest::Approx(0.2 / 3));
    CHECK(m.score_conditionals(v.tokenize("a"), {}, {})[0] == 0.4);
    CHECK_THROWS_AS(m.score_conditionals({}, {}, {}), std::invalid_argument);
}

TEST_CASE("tabular model rejects inconsistent tables") {
    const auto v = words("a b");
    CHECK_THROWS_AS(TabularModel(v, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(TabularModel(v, {0.7, 0.7}), std::invalid_argument);
    TabularModel m(v, {0.5, 0.5});
    CHECK_THROWS_AS(m.set_entry(std::vector<TokenId>{}, TokenDistribution(2, {{TokenId{0}, 1.0}}, 0.0)),
                    std::invalid_argument);
    CHECK_THROWS_AS(m.set_entry(std::vector<TokenId>{TokenId{0}}, TokenDistribution(3, {{TokenId{0}, 1.0}}, 0.0)),
                    std::invalid_argument);
}

TEST_CASE("tabular model file round-trips") {
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto v = words("a b c d e");
    std::vector<double> def(5);
    double s = 0;
    for (auto& x : def) s += (x = u(rng));
    for (auto& x : def) x /= s;
    TabularModel m(v, def);
    m.set_entry("a b", {{"c", 0.1 + u(rng) * 0.3}, {"d", 0.2}});
    m.set_entry("e", {{"a", 1.0 / 3.0}, {"b", 2.0 / 3.0}});
    const auto path = std::filesystem::temp_directory_path() / "ecrd_tabular_roundtrip.json";
    m.save(path);
    const auto back = TabularModel::load(path);
    std::filesystem::remove(path);
    CHECK(back.to_json() == m.to_json());
    for (const auto& ctx : {"a b", "e", "c", "x"}) {
        if (std::string(ctx) == "x") break;
        const auto p = v.tokenize(ctx);
        const auto d1 = m.next_distribution(p, {});
        const auto d2 = back.next_distribution(p, {});
        CHECK(std::equal(d1.probs().begin(), d1.probs().end(), d2.probs().begin(), d2.probs().end()));
        CHECK(d1.residual_mass() == d2.residual_mass());
    }
}

TEST_CASE("counting backend counts tokens and calls") {
    const auto v = words("a b c");
    TabularModel m(v, {0.2, 0.3, 0.5});
    CountingScoringBackend counting(m);
    counting.score_conditionals(v.tokenize("a b"), {}, {});
    counting.score_conditionals(v.tokenize("c"), v.tokenize("a"), {});
    CHECK(counting.conditional_queries() == 3);
    CHECK(counting.calls() == 2);
    counting.reset();
    CHECK(counting.conditional_queries() == 0);
}

namespace {

const Vocabulary& remote_vocab() {
    static const Vocabulary v = words("<eos> alpha beta gamma delta epsilon");
    return v;
}

RemoteConfig config_for(const stub::Server& server, const std::string& path) {
    RemoteConfig rc;
    rc.endpoint = server.url(path);
    rc.top_k = 5;
    rc.max_retries = 0;
    rc.timeout = std::chrono::milliseconds(5000);
    return rc;
}

}  // namespace

TEST_CASE("remote client: native wire, residual and determinism") {
    // Five logprobs summing to 0.97.
    stub::Server server("/topk", [](const nlohmann::json&) {
        return nlohmann::json{{"tokens", {1, 2, 3, 4, 5}},
                              {"logprobs",
                               {std::log(0.5), std::log(0.2), std::log(0.12), std::log(0.1), std::log(0.05)}}};
    });
    auto rc = config_for(server, "/topk");
    rc.no_cache = true;
    const RemoteModelClient client(rc, remote_vocab());
    const std::vector<TokenId> prefix{TokenId{1}, TokenId{2}};
    const auto d = client.next_distribution(prefix, ConditioningContext{"img-1"});
    CHECK(d.enumerated() == 5);
    CHECK(d.residual_mass() == doctest::Approx(0.03).epsilon(1e-9));
    const auto again = client.next_distribution(prefix, ConditioningContext{"img-1"});
    CHECK(std::equal(d.probs().begin(), d.probs().end(), again.probs().begin(), again.probs().end()));

    const auto sent = server.requests().front();
    CHECK(sent == nlohmann::json{{"prefix_tokens", {1, 2}}, {"context_id", "img-1"}, {"top_k", 5}, {"no_cache", true}});
}

TEST_CASE("remote client: floor for tokens missing from top-k") {
    stub::Server server("/topk", [](const nlohmann::json&) {
        return nlohmann::json{{"tokens", {1}}, {"logprobs", {std::log(0.9)}}};
    });
    const RemoteModelClient client(config_for(server, "/topk"), remote_vocab());
    const std::vector<TokenId> ask{TokenId{1}, TokenId{3}};
    const auto got = client.score_conditionals(ask, {}, {});
    CHECK(got[0] == doctest::Approx(0.9));
    CHECK(got[1] == 1e-6);
}

TEST_CASE("remote client: completions adapter") {
    stub::Server server("/v1/completions", [](const nlohmann::json&) {
        return nlohmann::json{
            {"choices",
             {{{"logprobs", {{"top_logprobs", {{{"alpha", std::log(0.7)}, {"beta", std::log(0.2)}, {"zzz", -1.0}}}}}}}}}};
    });
    auto rc = config_for(server, "/v1/completions");
    rc.wire = RemoteConfig::Wire::openai_completions;
    rc.model = "served-model";
    const RemoteModelClient client(rc, remote_vocab());
    const std::vector<TokenId> prefix{TokenId{3}};
    const auto d = client.next_distribution(prefix, ConditioningContext{"ctx"});
    CHECK(d.prob(remote_vocab().at("alpha")) == doctest::Approx(0.7));
    CHECK(d.prob(remote_vocab().at("beta")) == doctest::Approx(0.2));
    CHECK(d.residual_mass() == doctest::Approx(0.1));
    const auto sent = server.requests().front();
    CHECK(sent.at("max_tokens") == 1);
    CHECK(sent.at("logprobs") == 5);
    CHECK(sent.at("model") == "served-model");
    CHECK(sent.at("prompt") == nlohmann::json{3});
}

TEST_CASE("remote client: errors are typed") {
    SUBCASE("malformed body") {
        stub::Server server("/topk", [](const nlohmann::json&) { return nlohmann::json{{"tokens", {1, 2}}}; });
        const RemoteModelClient client(config_for(server, "/topk"), remote_vocab());
        try {
            client.next_distribution({}, {});
            FAIL("expected an error");
        } catch (const BackendError& e) {
            CHECK(e.kind() == BackendError::Kind::malformed);
            CHECK_FALSE(e.retryable());
        }
    }
    SUBCASE("server error is retried then reported") {
        stub::Server server("/topk", [](const nlohmann::json&) { return nlohmann::json{{"error", "busy"}}; }, 503);
        auto rc = config_for(server, "/topk");
        rc.max_retries = 2;
        rc.retry_backoff = std::chrono::milliseconds(1);
        const RemoteModelClient client(rc, remote_vocab());
        try {
            client.next_distribution({}, {});
            FAIL("expected an error");
        } catch (const BackendError& e) {
            CHECK(e.kind() == BackendError::Kind::http_status);
            CHECK(e.attempts() == 3);
        }
        CHECK(server.requests().size() == 3);
    }
    SUBCASE("unreachable endpoint") {
        RemoteConfig rc;
        rc.endpoint = "http://127.0.0.1:1/topk";
        rc.max_retries = 0;
        rc.timeout = std::chrono::milliseconds(500);
        const RemoteModelClient client(rc, remote_vocab());
        CHECK_THROWS_AS(client.next_distribution({}, {}), BackendError);
    }
    SUBCASE("logprob out of range") {
        stub::Server server("/topk", [](const nlohmann::json&) {
            return nlohmann::json{{"tokens", {1}}, {"logprobs", {0.5}}};
        });
        const RemoteModelClient client(config_for(server, "/topk"), remote_vocab());
        CHECK_THROWS_AS(client.next_distribution({}, {}), BackendError);
    }
}

TEST_CASE("remote client: bearer token from the named variable") {
    stub::Server server("/topk", [](const nlohmann::json&) {
        return nlohmann::json{{"tokens", {1}}, {"logprobs", {0.0}}};
    });
    ::setenv("ECRD_TEST_TOKEN", "s3cret", 1);
    auto rc = config_for(server, "/topk");
    rc.auth_env = "ECRD_TEST_TOKEN";
    const RemoteModelClient client(rc, remote_vocab());
    client.next_distribution({}, {});
    CHECK(server.auth_headers().front() == "Bearer s3cret");
    ::unsetenv("ECRD_TEST_TOKEN");
}

TEST_CASE("remote client: eight requests in flight") {
    stub::Server server("/topk", [](const nlohmann::json& req) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        const int last = req.at("prefix_tokens").empty() ? 1 : req.at("prefix_tokens").back().get<int>();
        return nlohmann::json{{"tokens", {last}}, {"logprobs", {std::log(0.5)}}};
    });
    const RemoteModelClient client(config_for(server, "/topk"), remote_vocab());
    std::vector<std::future<double>> jobs;
    for (int i = 0; i < 8; ++i) {
        jobs.push_back(std::async(std::launch::async, [&client, i] {
            const std::vector<TokenId> prefix{TokenId{1 + i % 5}};
            const std::vector<TokenId> ask{TokenId{1 + i % 5}};
            return client.score_conditionals(ask, prefix, {})[0];
        }));
    }
    for (auto& j : jobs) CHECK(j.get() == doctest::Approx(0.5));
    CHECK(server.requests().size() == 8);
}

TEST_CASE("remote config parses from JSON") {
    const auto rc = RemoteConfig::from_json({{"endpoint", "http://host:8080/v1/completions"},
                                             {"timeout_s", 2.5},
                                             {"top_k", 10},
                                             {"wire", "openai_completions"},
                                             {"auth_env", "MODEL_TOKEN"}});
    CHECK(rc.timeout == std::chrono::milliseconds(2500));
    CHECK(rc.top_k == 10);
    CHECK(rc.wire == RemoteConfig::Wire::openai_completions);
    CHECK(rc.auth_env == "MODEL_TOKEN");
    CHECK_THROWS(RemoteConfig::from_json({{"endpoint", "x"}, {"wire", "carrier-pigeon"}}));
}
