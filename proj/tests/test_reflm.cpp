#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "doctest.h"
#include "lexi/reflm.hpp"

using namespace lexi;

// ---- toy language

TEST_CASE("two-string toy conditionals") {
    auto toy = two_string_toy(); // 'a' = 0, 'b' = 1
    CHECK(toy->alphabet_size() == 2);
    CHECK(toy->string_length() == 6);
    // first token: one string starts with each letter, equal weights
    const ProbVec first = toy->cond_dist({});
    CHECK(first[0] == doctest::Approx(0.5).epsilon(1e-15));
    // after "b" only babbbb survives
    const ProbVec after_b = toy->cond_dist({1});
    CHECK(after_b[0] == 1.0);
    CHECK(after_b[1] == 0.0);
    // after "ab" only ababab survives and continues with a
    const ProbVec after_ab = toy->cond_dist({0, 1});
    CHECK(after_ab[0] == 1.0);
    CHECK(toy->seq_logprob({1, 0, 1, 1, 1, 1}) == doctest::Approx(std::log(0.5)));
    CHECK(std::isinf(toy->seq_logprob({1, 1, 0, 0, 0, 0})));
    CHECK(toy->prefix_mass({0}) == doctest::Approx(0.5));
    CHECK(toy->prefix_mass({}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(toy->cond_dist({1, 1}), DeadPrefixError); // no string starts bb
    CHECK_THROWS_AS(toy->cond_dist({1, 0, 1, 1, 1, 1}), DeadPrefixError); // past the end
}

TEST_CASE("toy language validation") {
    CHECK_THROWS(ToyLanguage(2, {{0, 1}, {0}}, {0.5, 0.5}));   // ragged strings
    CHECK_THROWS(ToyLanguage(2, {{0, 2}}, {1.0}));             // token outside alphabet
    CHECK_THROWS(ToyLanguage(2, {{0, 1}}, {0.0}));             // weight must be positive
    CHECK_THROWS(ToyLanguage(2, {{0, 1}}, {1.0, 1.0}));        // weight count mismatch
}

// ---- markov fixtures

TEST_CASE("diagonal markov rows and uniform start") {
    auto m = diagonal_markov(4);
    CHECK(m->order() == 1);
    const ProbVec start = m->cond_dist({});
    for (int v = 0; v < 4; ++v) CHECK(start[v] == doctest::Approx(0.25).epsilon(1e-15));
    for (Token i = 0; i < 4; ++i) {
        const ProbVec row = m->cond_dist({i});
        for (int v = 0; v < 4; ++v) {
            const double expect = v == i ? 0.8 : 0.2 / 3.0;
            CHECK(row[v] == doctest::Approx(expect).epsilon(1e-15));
        }
    }
    // longer context: only the order-1 suffix matters
    const ProbVec a = m->cond_dist({0, 1, 2});
    const ProbVec b = m->cond_dist({2});
    for (int v = 0; v < 4; ++v) CHECK(a[v] == b[v]);
}

TEST_CASE("diagonal markov is invariant under every relabeling") {
    auto m = diagonal_markov(5);
    for (Token i = 0; i < 5; ++i) {
        for (Token j = 0; j < 5; ++j) {
            // row i at its diagonal equals row j at its diagonal, etc: all
            // rows are the same function of (position == context token)
            CHECK(m->cond_dist({i})[i] == doctest::Approx(m->cond_dist({j})[j]));
        }
    }
}

TEST_CASE("identifiable markov has no nontrivial automorphisms") {
    for (int d : {3, 4, 6}) {
        auto m = identifiable_markov(d);
        const auto perms = enumerate_permutations(d);
        int automorphisms = 0;
        for (const Permutation& pi : perms) {
            // pi is an automorphism iff relabeling contexts and outcomes
            // reproduces the same conditional table
            bool same = true;
            for (Token i = 0; i < d && same; ++i) {
                const ProbVec lhs = m->cond_dist({i}).permuted(pi);
                const ProbVec rhs = m->cond_dist({pi(i)});
                for (int v = 0; v < d; ++v)
                    if (std::abs(lhs[v] - rhs[v]) > 1e-12) { same = false; break; }
            }
            automorphisms += same ? 1 : 0;
        }
        CHECK(automorphisms == 1); // identity only
    }
    CHECK_THROWS(identifiable_markov(2));
}

TEST_CASE("identifiable markov rows are normalised with 0.8 diagonal") {
    auto m = identifiable_markov(6);
    for (Token i = 0; i < 6; ++i) {
        const ProbVec row = m->cond_dist({i});
        CHECK(row[i] == doctest::Approx(0.8).epsilon(1e-15));
        double sum = 0.0;
        for (int v = 0; v < 6; ++v) sum += row[v];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("successor markov rows are a near-deterministic cycle") {
    auto m = successor_markov(6);
    double prev_top = 2.0;
    for (Token i = 0; i < 6; ++i) {
        const ProbVec row = m->cond_dist({i});
        const double q = 0.995 - 0.035 * i / 5.0;
        double sum = 0.0;
        for (int v = 0; v < 6; ++v) {
            const double want = (v == (i + 1) % 6) ? q + (1.0 - q) / 6.0 : (1.0 - q) / 6.0;
            CHECK(row[v] == doctest::Approx(want).epsilon(1e-13));
            CHECK(row[v] > 0.0);
            sum += row[v];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
        // strictly decreasing top masses keep every row distinct
        CHECK(row[(i + 1) % 6] < prev_top);
        prev_top = row[(i + 1) % 6];
        CHECK(m->initial()[i] == doctest::Approx(1.0 / 6).epsilon(1e-15));
    }
    CHECK_THROWS(successor_markov(2));
}

TEST_CASE("successor markov has no nontrivial automorphisms") {
    for (int d : {3, 5, 8}) {
        auto m = successor_markov(d);
        const auto perms = enumerate_permutations(d);
        int automorphisms = 0;
        for (const Permutation& pi : perms) {
            bool same = true;
            for (Token i = 0; i < d && same; ++i) {
                const ProbVec lhs = m->cond_dist({i}).permuted(pi);
                const ProbVec rhs = m->cond_dist({pi(i)});
                for (int v = 0; v < d; ++v)
                    if (std::abs(lhs[v] - rhs[v]) > 1e-12) { same = false; break; }
            }
            automorphisms += same ? 1 : 0;
        }
        CHECK(automorphisms == 1); // rotations break on the distinct masses
    }
}

TEST_CASE("random markov shapes and determinism") {
    Rng a(31), b(31);
    auto m1 = random_markov(3, 2, a);
    auto m2 = random_markov(3, 2, b);
    CHECK(m1->order() == 2);
    for (Token i = 0; i < 3; ++i)
        for (Token j = 0; j < 3; ++j)
            for (int v = 0; v < 3; ++v)
                CHECK(m1->cond_dist({i, j})[v] == m2->cond_dist({i, j})[v]);
    // marginal conditionals for short prefixes stay normalised
    for (const TokenSeq& ctx : {TokenSeq{}, TokenSeq{1}}) {
        double sum = 0.0;
        for (int v = 0; v < 3; ++v) sum += m1->cond_dist(ctx)[v];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("order-2 short-prefix conditionals are exact marginals") {
    Rng rng(77);
    auto m = random_markov(2, 2, rng);
    // the generative story draws the whole length-2 prefix at once, so
    // p(x1 = v | x0) reads off the pair probabilities by Bayes
    const ProbVec init = m->initial(); // over length-2 prefixes, row-major
    for (Token x0 = 0; x0 < 2; ++x0) {
        const double p_x0 = init[x0 * 2 + 0] + init[x0 * 2 + 1];
        const ProbVec got = m->cond_dist({x0});
        for (Token v = 0; v < 2; ++v) {
            CHECK(got[v] == doctest::Approx(init[x0 * 2 + v] / p_x0).epsilon(1e-12));
            // chain rule ties the sequence scorer to the same marginals
            const double lhs = m->seq_logprob({x0, v});
            const double rhs = std::log(p_x0) + std::log(got[v]);
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        }
    }
    // beyond the prefix the transition rows take over
    const double l3 = m->seq_logprob({0, 1, 1});
    CHECK(l3 == doctest::Approx(std::log(init[1]) + std::log(m->row({0, 1})[1])).epsilon(1e-12));
}

// ---- smoothing

TEST_CASE("smoothing mixes toward uniform") {
    auto base = identifiable_markov(4);
    const double sigma = 0.1;
    auto s = smooth(base, sigma);
    for (Token i = 0; i < 4; ++i) {
        const ProbVec raw = base->cond_dist({i});
        const ProbVec mixed = s->cond_dist({i});
        for (int v = 0; v < 4; ++v)
            CHECK(mixed[v] == doctest::Approx((1 - sigma) * raw[v] + sigma / 4).epsilon(1e-15));
    }
    CHECK_THROWS(smooth(base, -0.1));
    CHECK_THROWS(smooth(base, 1.5));
}

TEST_CASE("smoothing revives dead prefixes as uniform") {
    auto s = smooth(two_string_toy(), 0.01);
    const ProbVec after_bb = s->cond_dist({1, 1});
    CHECK(after_bb[0] == doctest::Approx(0.5));
    CHECK(after_bb[1] == doctest::Approx(0.5));
    // sigma zero keeps the base exactly
    auto s0 = smooth(two_string_toy(), 0.0);
    CHECK(s0->cond_dist({1})[0] == 1.0);
}

// ---- sampling

TEST_CASE("sample_sequence range determinism and statistics") {
    auto m = diagonal_markov(4);
    Rng a(101), b(101);
    const TokenSeq s1 = sample_sequence(*m, 4000, a);
    const TokenSeq s2 = sample_sequence(*m, 4000, b);
    CHECK(s1 == s2);
    CHECK(s1.size() == 4000);
    int repeats = 0;
    for (std::size_t t = 1; t < s1.size(); ++t) {
        REQUIRE(s1[t] >= 0);
        REQUIRE(s1[t] < 4);
        repeats += s1[t] == s1[t - 1] ? 1 : 0;
    }
    CHECK(std::abs(repeats / 3999.0 - 0.8) < 0.03);
}

TEST_CASE("sample_corpus is deterministic per seed and per index") {
    auto m = identifiable_markov(3);
    const auto c1 = sample_corpus(*m, 5, 32, 9);
    const auto c2 = sample_corpus(*m, 5, 32, 9);
    const auto c3 = sample_corpus(*m, 5, 32, 10);
    CHECK(c1 == c2);
    CHECK(c1 != c3);
    CHECK(c1.size() == 5);
    for (const TokenSeq& s : c1) CHECK(s.size() == 32);
}

TEST_CASE("toy sampling dies past the string length") {
    auto toy = two_string_toy();
    Rng rng(1);
    const TokenSeq s = sample_sequence(*toy, 6, rng);
    CHECK(s.size() == 6);
    Rng rng2(1);
    CHECK_THROWS_AS(sample_sequence(*toy, 7, rng2), DeadPrefixError);
}

// ---- model files

TEST_CASE("markov model file round trip is exact") {
    Rng rng(55);
    auto m = random_markov(3, 1, rng);
    const std::string text = serialize_model(*m);
    auto back = parse_model(text);
    CHECK(back->alphabet_size() == 3);
    for (Token i = 0; i < 3; ++i)
        for (int v = 0; v < 3; ++v)
            CHECK(back->cond_dist({i})[v] == m->cond_dist({i})[v]); // bitwise via %.17g
    CHECK(back->cond_dist({})[0] == m->cond_dist({})[0]);
}

TEST_CASE("toy model file round trip is exact") {
    auto toy = two_string_toy();
    auto back = parse_model(serialize_model(*toy));
    const auto* t = dynamic_cast<const ToyLanguage*>(back.get());
    REQUIRE(t != nullptr);
    CHECK(t->strings() == toy->strings());
    CHECK(t->weights() == toy->weights());
}

TEST_CASE("model parser reports line numbers") {
    CHECK_THROWS_AS(parse_model("nonsense\n"), ParseError);
    CHECK_THROWS_AS(parse_model("markov d=3 k=1\nctx=0 p=0.5,0.5\n"), ParseError); // short row
    CHECK_THROWS_AS(parse_model("markov d=0 k=1\n"), ParseError);
    CHECK_THROWS_AS(parse_model(""), ParseError);
    try {
        parse_model("markov d=2 k=1\nctx=0 p=1,0\nwhat\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
}

TEST_CASE("save and load through a file") {
    const std::string path = "test_reflm_model.tmp";
    auto m = identifiable_markov(3);
    save_model(*m, path);
    auto back = load_model(path);
    CHECK(back->alphabet_size() == 3);
    CHECK(back->cond_dist({1})[1] == m->cond_dist({1})[1]);
    std::remove(path.c_str());
    CHECK_THROWS(load_model("no_such_file.model"));
}
