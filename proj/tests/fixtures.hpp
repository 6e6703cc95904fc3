#pragma once
// Hand-built tabular worlds shared by unit and acceptance tests.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ecrd/decider.hpp"
#include "ecrd/engine.hpp"
#include "ecrd/model_backend.hpp"

namespace fixtures {

// Listed surfaces get their probability; the rest of the mass is spread evenly.
inline std::vector<double> dense(const ecrd::Vocabulary& vocab, const std::map<std::string, double>& listed) {
    double used = 0.0;
    for (const auto& [s, p] : listed) used += p;
    const double rest = (1.0 - used) / static_cast<double>(vocab.size() - listed.size());
    std::vector<double> out(vocab.size(), rest);
    for (const auto& [s, p] : listed) out[static_cast<std::size_t>(vocab.at(s).value)] = p;
    return out;
}

inline ecrd::Vocabulary words(const std::string& text) {
    std::vector<std::string> out;
    std::string w;
    for (char c : text) {
        if (c == ' ') {
            if (!w.empty()) out.push_back(w);
            w.clear();
        } else {
            w += c;
        }
    }
    if (!w.empty()) out.push_back(w);
    return ecrd::Vocabulary(out);
}

struct World {
    std::unique_ptr<ecrd::TabularModel> generator;
    std::unique_ptr<ecrd::TabularModel> scorer;
    std::string prompt;
    ecrd::DecodeConfig config;
    std::vector<ecrd::ScriptedDecider::Entry> script;

    ecrd::ScriptedDecider decider() const { return ecrd::ScriptedDecider(script); }
};

// Mid-chain grounding: the colour of one dress decides the rest of the answer.
// At "dress is" the candidates are {red, blue}; the base leans red, the global
// description leans slightly blue, and the mixed gap is tiny. The decider's
// sentence later carries the answer step without another call.
inline World dress_colour() {
    const auto vocab = words(
        "<eos> question : which colour is the first dress from right ? red blue green , so answer "
        "three dresses hang in a park . right-hand side partially hidden by tree");
    World w;
    w.generator = std::make_unique<ecrd::TabularModel>(vocab, dense(vocab, {{"<eos>", 1.0}}));
    auto& g = *w.generator;
    g.set_entry("right ?", {{"the", 1.0}});
    g.set_entry("? the", {{"first", 1.0}});
    g.set_entry("the first", {{"dress", 1.0}});
    g.set_entry("first dress", {{"is", 1.0}});
    g.set_entry("dress is", {{"red", 0.45}, {"blue", 0.40}, {"green", 0.15}});
    g.set_entry("is blue", {{",", 1.0}});
    g.set_entry("is red", {{",", 1.0}});
    g.set_entry(", so", {{"the", 1.0}});
    g.set_entry("so the", {{"answer", 1.0}});
    g.set_entry("the answer", {{"is", 1.0}});
    g.set_entry("blue ,", {{"so", 1.0}});
    g.set_entry("red ,", {{"so", 1.0}});
    g.set_entry("answer is", {{"red", 0.44}, {"blue", 0.36}, {"green", 0.20}});
    g.set_entry("answer is red", {{"<eos>", 1.0}});
    g.set_entry("answer is blue", {{"<eos>", 1.0}});

    w.scorer = std::make_unique<ecrd::TabularModel>(
        vocab, dense(vocab, {{"blue", 0.26}, {"red", 0.24}, {"green", 0.10}}));
    for (const char* ctx : {"the", "first", "dress", "from", "right-hand", "side", "is", "blue", ",", "partially",
                            "hidden", "by", "tree"}) {
        w.scorer->set_entry(ctx, {{"blue", 0.65}, {"red", 0.05}, {"green", 0.05}});
    }

    w.prompt = "question : which colour is the first dress from the right ?";
    w.config.global_description = "three dresses hang in a park .";
    w.config.stop_tokens = {"<eos>"};
    w.config.max_tokens = 32;
    w.script = {{std::nullopt, std::string("blue"),
                 "the first dress from the right-hand side is blue , partially hidden by the tree .",
                 {{{412.0, 96.0, 530.0, 388.0}, std::string("dress")}},
                 0.0}};
    return w;
}

// Final-answer arbitration: the decider picks "3" and its "300" sentence makes
// the supervisor pick "0" twice with no further calls.
inline World price_tag() {
    const auto vocab = words(
        "<eos> question : what is the number behind box ? answer 3 5 8 0 "
        "a shelf of near boxes with and price tag . cardboard favorita brand banana illustration 300");
    World w;
    w.generator = std::make_unique<ecrd::TabularModel>(vocab, dense(vocab, {{"<eos>", 1.0}}));
    auto& g = *w.generator;
    g.set_entry("answer :", {{"5", 0.45}, {"3", 0.40}, {"8", 0.15}});
    g.set_entry(": 3", {{"5", 0.42}, {"0", 0.38}, {"<eos>", 0.20}});
    g.set_entry("3 0", {{"5", 0.42}, {"0", 0.38}, {"<eos>", 0.20}});
    g.set_entry("3 0 0", {{"<eos>", 1.0}});
    g.set_entry(": 5", {{"<eos>", 1.0}});

    w.scorer = std::make_unique<ecrd::TabularModel>(
        vocab, dense(vocab, {{"3", 0.12}, {"5", 0.09}, {"0", 0.08}, {"8", 0.05}}));
    for (const char* ctx : {"the", "number", "behind", "cardboard", "box", "with", "favorita", "brand", "and",
                            "banana", "illustration", "is", "300"}) {
        w.scorer->set_entry(ctx, {{"0", 0.60}, {"5", 0.02}, {"3", 0.05}});
    }

    w.prompt = "question : what is the number behind the box ? answer :";
    w.config.global_description = "a shelf of boxes near a price tag .";
    w.config.stop_tokens = {"<eos>"};
    w.config.max_tokens = 16;
    w.script = {{std::nullopt, std::string("3"),
                 "the number behind the cardboard box with the favorita brand and banana illustration is 300 .",
                 {{{120.0, 40.0, 260.0, 150.0}, std::string("price tag")}},
                 0.0}};
    return w;
}

// Mean-over-prefix and min-over-prefix disagree: "a" has one sharp peak in the
// description, "b" has sustained support.
inline World sharp_versus_sustained() {
    const auto vocab = words("<eos> p a b c x y z");
    World w;
    w.generator = std::make_unique<ecrd::TabularModel>(vocab, dense(vocab, {{"<eos>", 1.0}}));
    w.generator->set_entry("p", {{"a", 0.45}, {"b", 0.40}, {"c", 0.15}});
    w.generator->set_entry("a", {{"<eos>", 1.0}});
    w.generator->set_entry("b", {{"<eos>", 1.0}});

    w.scorer = std::make_unique<ecrd::TabularModel>(vocab, dense(vocab, {{"a", 0.90}, {"b", 0.05}}));
    w.scorer->set_entry("x", {{"a", 0.01}, {"b", 0.70}});
    w.scorer->set_entry("y", {{"a", 0.01}, {"b", 0.70}});

    w.prompt = "p";
    w.config.global_description = "x y z";
    w.config.stop_tokens = {"<eos>"};
    w.config.max_tokens = 4;
    return w;
}

}  // namespace fixtures
