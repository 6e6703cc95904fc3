#include <doctest.h>

#include <algorithm>
#include <random>

#include "ecrd/dist_core.hpp"
#include "oracle/oracle.hpp"

using namespace ecrd;

namespace {

TokenDistribution dist(std::vector<TokenProb> probs, double residual = 0.0, std::size_t vocab = 8) {
    return TokenDistribution(vocab, std::move(probs), residual);
}

constexpr TokenId a{0}, b{1}, c{2}, d{3};

}  // namespace

TEST_CASE("sort_descending orders by probability then id") {
    auto s = sort_descending(dist({{a, 0.2}, {b, 0.7}, {c, 0.1}}));
    REQUIRE(s.size() == 3);
    CHECK(s[0] == TokenProb{b, 0.7});
    CHECK(s[1] == TokenProb{a, 0.2});
    CHECK(s[2] == TokenProb{c, 0.1});

    s = sort_descending(dist({{b, 0.5}, {a, 0.5}}));
    CHECK(s[0].token == a);
    CHECK(s[1].token == b);

    s = sort_descending(dist({{a, 1.0}}));
    CHECK(s == std::vector<TokenProb>{{a, 1.0}});
}

TEST_CASE("sort_descending rejects an empty distribution") {
    const TokenDistribution empty(4, {}, 1.0);
    CHECK_THROWS_WITH_AS(sort_descending(empty), "empty distribution", std::invalid_argument);
    CHECK_THROWS_AS(knee_truncate(empty), std::invalid_argument);
}

TEST_CASE("knee_truncate picks the largest gap") {
    auto cs = knee_truncate(dist({{a, 0.7}, {b, 0.2}, {c, 0.1}}));
    CHECK(cs.knee_index == 1);
    CHECK(cs.candidates.size() == 1);
    CHECK(cs.candidates[0].token == a);
    CHECK(cs.covered_mass == doctest::Approx(0.7).epsilon(1e-12));

    cs = knee_truncate(dist({{a, 0.4}, {b, 0.35}, {c, 0.15}, {d, 0.1}}));
    CHECK(cs.knee_index == 2);
    CHECK(cs.tokens() == std::vector<TokenId>{a, b});
    CHECK(cs.covered_mass == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("uniform distributions keep the smallest k") {
    const auto cs = knee_truncate(dist({{a, 0.25}, {b, 0.25}, {c, 0.25}, {d, 0.25}}));
    CHECK(cs.knee_index == 1);
    CHECK(cs.candidates[0].token == a);
}

TEST_CASE("residual mass never enters the knee") {
    // Enumerated gaps (0.05, 0.25); the residual 0.3 would otherwise dominate.
    const auto cs = knee_truncate(dist({{a, 0.35}, {b, 0.30}, {c, 0.05}}, 0.30));
    CHECK(cs.knee_index == 2);
    CHECK(cs.covered_mass == doctest::Approx(0.65));
}

TEST_CASE("single enumerated token has knee 1") {
    const auto cs = knee_truncate(dist({{c, 0.4}}, 0.6));
    CHECK(cs.knee_index == 1);
    CHECK(cs.candidates[0].token == c);
}

TEST_CASE("TokenDistribution validates its invariants") {
    CHECK_THROWS_AS(dist({{a, 0.6}, {b, 0.6}}), std::invalid_argument);
    CHECK_THROWS_AS(dist({{a, -0.1}, {b, 1.1}}), std::invalid_argument);
    CHECK_THROWS_AS(dist({{a, 0.5}, {a, 0.5}}), std::invalid_argument);
    CHECK_THROWS_AS(dist({{TokenId{9}, 1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(dist({{a, 0.5}}, -0.5), std::invalid_argument);
    CHECK_NOTHROW(dist({{a, 0.5}, {b, 0.5 - 5e-7}}));

    const auto implicit = TokenDistribution::with_implicit_residual(8, {{a, 0.5}, {b, 0.3}});
    CHECK(implicit.residual_mass() == doctest::Approx(0.2));
    CHECK(implicit.prob(c) == 0.0);
    CHECK_FALSE(implicit.contains(c));
}

TEST_CASE("knee_truncate agrees with the exhaustive oracle") {
    std::mt19937_64 rng(11);
    for (int n = 0; n < 10000; ++n) {
        const auto in = oracle::random_instance(rng, 16, 1, 1);
        const auto want = oracle::ranked(in.ids, in.probs);
        const int k = oracle::knee(want);
        const auto got = knee_truncate(oracle::base_of(in));
        REQUIRE(got.knee_index == static_cast<std::size_t>(k));
        if (in.ids.size() >= 2) REQUIRE(got.knee_index <= in.ids.size() - 1);
        for (int i = 0; i < k; ++i) REQUIRE(got.candidates[static_cast<std::size_t>(i)].token.value == want[i].first);
    }
}

TEST_CASE("insertion order never changes the candidate set") {
    std::mt19937_64 rng(12);
    for (int n = 0; n < 2000; ++n) {
        const auto in = oracle::random_instance(rng, 16, 1, 1);
        std::vector<TokenProb> tp;
        for (std::size_t i = 0; i < in.ids.size(); ++i) tp.push_back({TokenId{in.ids[i]}, in.probs[i]});
        const auto first = knee_truncate(TokenDistribution(static_cast<std::size_t>(in.vocab), tp, in.residual));
        std::shuffle(tp.begin(), tp.end(), rng);
        const auto second = knee_truncate(TokenDistribution(static_cast<std::size_t>(in.vocab), tp, in.residual));
        REQUIRE(first.candidates == second.candidates);
        REQUIRE(first.covered_mass == second.covered_mass);
    }
}
