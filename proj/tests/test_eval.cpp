#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "pixcap/eval.hpp"

using namespace pixcap;

TEST_CASE("whitespace-insensitive exact match") {
    CHECK(match_equal_ws("crane bird", "cranebird"));
    CHECK(match_equal_ws("crane  bird", "crane bird"));
    CHECK_FALSE(match_equal_ws("ipad", "hand-held computer"));
    CHECK(match_equal_ws("", ""));
    CHECK(match_equal_ws("Light Blue", "light blue"));
    CHECK_FALSE(match_equal_ws("", "x"));
}

TEST_CASE("containment match") {
    CHECK(match_in("a white stingray swimming", "stingray"));
    CHECK_FALSE(match_in("cat", "category"));  // ground truth longer than prediction
    CHECK(match_in("CATEGORY five", "category"));
}

TEST_CASE("whitespace-equal implies containment after whitespace removal") {
    std::mt19937_64 rng(3);
    const std::string letters = "ab c";
    for (int trial = 0; trial < 200; ++trial) {
        std::string p, g;
        const int n = 1 + static_cast<int>(rng() % 8);
        for (int i = 0; i < n; ++i) p += letters[rng() % letters.size()];
        g = p;
        if (rng() % 2) g.erase(std::remove(g.begin(), g.end(), ' '), g.end());
        if (match_equal_ws(p, g)) {
            const auto strip = [](std::string s) {
                s.erase(std::remove(s.begin(), s.end(), ' '), s.end());
                return s;
            };
            CHECK(match_in(strip(p), strip(g)));
        }
    }
}

TEST_CASE("scene-text match keeps internal whitespace") {
    CHECK_FALSE(match_scene_text("ab c", "abc"));
    CHECK(match_scene_text("ab c", "AB C"));
    CHECK(match_equal_ws("ab c", "abc"));  // contrast with the relaxed rule
}

TEST_CASE("evaluate aggregates and orders do not matter") {
    std::vector<std::string> preds = {"red", "blue green", "wrong"};
    std::vector<std::string> gts = {"red", "bluegreen", "right"};
    auto rep = evaluate(preds, gts, EvalMode::equal);
    CHECK(rep.n == 3);
    CHECK(rep.equal_acc == Catch::Approx(2.0 / 3));
    // containment is checked whitespace-stripped, so it dominates equal
    CHECK(rep.in_acc >= rep.equal_acc - 1e-12);
    CHECK(rep.records[1].contains);

    std::vector<size_t> perm = {2, 0, 1};
    std::vector<std::string> p2, g2;
    for (size_t i : perm) {
        p2.push_back(preds[i]);
        g2.push_back(gts[i]);
    }
    auto rep2 = evaluate(p2, g2, EvalMode::equal);
    CHECK(rep2.equal_acc == rep.equal_acc);
    CHECK(rep2.in_acc == rep.in_acc);
}

TEST_CASE("all-correct predictions score one in every mode") {
    std::vector<std::string> text = {"red", "light blue", "abc"};
    for (auto mode : {EvalMode::equal, EvalMode::in, EvalMode::scene_text}) {
        auto rep = evaluate(text, text, mode);
        CHECK(rep.equal_acc == 1.0);
        CHECK(rep.in_acc == 1.0);
    }
    auto rep = evaluate(text, text, EvalMode::voc_prior, &text);
    REQUIRE(rep.vocprior_acc.has_value());
    CHECK(*rep.vocprior_acc == 1.0);
}

TEST_CASE("empty prediction fails against nonempty truth") {
    auto rep = evaluate({""}, {"cat"}, EvalMode::equal);
    CHECK(rep.equal_acc == 0.0);
    CHECK(rep.in_acc == 0.0);
    CHECK(evaluate({""}, {"cat"}, EvalMode::scene_text).equal_acc == 0.0);
}

TEST_CASE("in accuracy dominates equal accuracy on mixed batches") {
    std::mt19937_64 rng(9);
    const std::vector<std::string> words = {"red", "blue", "light", "crane", "bird"};
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<std::string> preds, gts;
        for (int i = 0; i < 12; ++i) {
            std::string p = words[rng() % words.size()];
            if (rng() % 2) p += " " + words[rng() % words.size()];
            std::string g = rng() % 3 == 0 ? p : words[rng() % words.size()];
            preds.push_back(p);
            gts.push_back(g);
        }
        auto rep = evaluate(preds, gts, EvalMode::equal);
        CHECK(rep.in_acc >= rep.equal_acc);
    }
}

TEST_CASE("evaluate rejects mismatched lengths") {
    CHECK_THROWS_AS(evaluate({"a"}, {"a", "b"}, EvalMode::equal), InputError);
}

TEST_CASE("voc-prior fails loudly on an out-of-set prediction") {
    std::vector<std::string> labels = {"cat", "dog"};
    CHECK_THROWS_AS(evaluate({"bird"}, {"cat"}, EvalMode::voc_prior, &labels), ContractError);
    CHECK_THROWS_AS(evaluate({"cat"}, {"cat"}, EvalMode::voc_prior, nullptr), InputError);
    auto ok = evaluate({"cat"}, {"dog"}, EvalMode::voc_prior, &labels);
    CHECK(*ok.vocprior_acc == 0.0);
}

TEST_CASE("report serializes to json") {
    auto rep = evaluate({"red"}, {"red"}, EvalMode::equal);
    auto j = rep.to_json();
    CHECK(j["n"] == 1);
    CHECK(j["equal_acc"] == 1.0);
    CHECK(j["samples"].size() == 1);
}
