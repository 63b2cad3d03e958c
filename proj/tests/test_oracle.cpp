#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "lexi/oracle.hpp"

using namespace lexi;

namespace {

LexinvOracle toy_oracle() { return LexinvOracle(smooth(two_string_toy(), 0.0)); }

} // namespace

// ---- the associated lexinvariant model on the two-string language

TEST_CASE("two-string worked example is exact") {
    // 'a' = 0, 'b' = 1; the mixture over both permutations of {babbbb, ababab}
    LexinvOracle oracle = toy_oracle();
    const ProbVec after_aba = oracle.predictive({0, 1, 0});
    CHECK(std::abs(after_aba[0] - 0.5) <= 1e-12);
    CHECK(std::abs(after_aba[1] - 0.5) <= 1e-12);
    const ProbVec after_abab = oracle.predictive({0, 1, 0, 1});
    CHECK(std::abs(after_abab[0] - 1.0) <= 1e-12);
    CHECK(std::abs(after_abab[1] - 0.0) <= 1e-12);
}

TEST_CASE("two-string joint probabilities") {
    LexinvOracle oracle = toy_oracle();
    // Each base string carries weight 1/2 split over its two relabelings, so
    // the mixture puts exactly 1/4 on each of the four image strings.
    const std::vector<TokenSeq> images = {
        {0, 1, 0, 1, 0, 1}, // ababab
        {1, 0, 1, 0, 1, 0}, // its flip
        {1, 0, 1, 1, 1, 1}, // babbbb
        {0, 1, 0, 0, 0, 0}, // its flip
    };
    double total = 0.0;
    for (const TokenSeq& x : images) {
        const double lp = oracle.joint_logprob(x);
        CHECK(lp == doctest::Approx(std::log(0.25)).epsilon(1e-12));
        total += std::exp(lp);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("first token is uniform regardless of the base model") {
    Rng rng(2);
    for (int trial = 0; trial < 12; ++trial) {
        const int d = 2 + static_cast<int>(rng.next_below(4));
        LexinvOracle oracle(smooth(random_markov(d, 1, rng), 1e-3));
        const ProbVec first = oracle.predictive({});
        for (int v = 0; v < d; ++v) CHECK(std::abs(first[v] - 1.0 / d) <= 1e-12);
    }
}

TEST_CASE("oracle joint is invariant under every relabeling") {
    Rng rng(3);
    for (int d : {3, 4}) {
        LexinvOracle oracle(smooth(random_markov(d, 1, rng), 1e-3));
        const auto perms = enumerate_permutations(d);
        for (int trial = 0; trial < 6; ++trial) {
            TokenSeq x;
            for (int t = 0; t < 24; ++t) x.push_back(static_cast<Token>(rng.next_below(d)));
            const double ref = oracle.joint_logprob(x);
            for (const Permutation& pi : perms)
                CHECK(std::abs(oracle.joint_logprob(pi.apply(x)) - ref) <= 1e-10);
        }
    }
}

TEST_CASE("joint factorises through the predictive") {
    LexinvOracle oracle(smooth(identifiable_markov(3), 1e-2));
    const TokenSeq x = {0, 2, 2, 1, 0, 0, 2};
    double acc = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        const TokenSeq ctx(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(t));
        acc += std::log(oracle.predictive(ctx)[x[t]]);
    }
    CHECK(oracle.joint_logprob(x) == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("alphabet capacity is enforced") {
    CHECK_THROWS_AS(LexinvOracle(smooth(diagonal_markov(9), 1e-3)), CapacityError);
}

// ---- posterior updates

TEST_CASE("incremental hedge equals batch posterior") {
    LexinvOracle oracle(smooth(diagonal_markov(3), 1e-4));
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
        TokenSeq seq;
        for (int t = 0; t < 200; ++t) seq.push_back(static_cast<Token>(rng.next_below(3)));
        OracleStream stream(oracle);
        for (Token y : seq) stream.push(y);
        const auto inc = stream.posterior().probs();
        const auto batch = oracle.posterior(seq).probs();
        for (std::size_t k = 0; k < inc.size(); ++k)
            worst = std::max(worst, std::abs(inc[k] - batch[k]));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("hedge_step matches a one-token batch update") {
    LexinvOracle oracle(smooth(identifiable_markov(3), 1e-3));
    const PermPosterior prior = oracle.prior();
    const auto conds = oracle.per_perm_cond_loglik({}, 2);
    const PermPosterior one = oracle.hedge_step(prior, conds);
    const PermPosterior batch = oracle.posterior({2});
    for (std::size_t k = 0; k < one.log_probs.size(); ++k)
        CHECK(one.log_probs[k] == doctest::Approx(batch.log_probs[k]).epsilon(1e-12));
}

TEST_CASE("incremental predictive equals batch predictive") {
    LexinvOracle oracle(smooth(identifiable_markov(4), 1e-3));
    Rng rng(19);
    TokenSeq seq = sample_sequence(*identifiable_markov(4), 60, rng);
    OracleStream stream(oracle);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const TokenSeq ctx(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
        const ProbVec batch = oracle.predictive(ctx);
        const ProbVec inc = stream.predictive();
        for (int v = 0; v < 4; ++v) CHECK(std::abs(batch[v] - inc[v]) <= 1e-11);
        stream.push(seq[t]);
    }
}

TEST_CASE("posterior concentrates on the true key for identifiable chains") {
    auto base = identifiable_markov(4);
    LexinvOracle oracle(smooth(base, 1e-4));
    Rng rng(23);
    const Permutation key = Permutation::random(4, rng);
    const TokenSeq plain = sample_sequence(*base, 400, rng);
    const TokenSeq cipher = key.apply(plain);
    const PermPosterior post = oracle.posterior(cipher);
    const Permutation found = oracle.perms()[post.argmax()];
    CHECK(found == key);
    CHECK(post.probs()[post.argmax()] > 0.95);
    CHECK(post.entropy() < 0.3);
}

TEST_CASE("posterior recovers the key on the successor chain") {
    // rotations of the cycle are near-automorphisms separated only by the
    // distinct row masses, so discrimination needs a long ciphertext
    auto base = successor_markov(4);
    LexinvOracle oracle(smooth(base, 1e-4));
    Rng rng(31);
    const Permutation key = Permutation::random(4, rng);
    const TokenSeq plain = sample_sequence(*base, 2000, rng);
    const TokenSeq cipher = key.apply(plain);
    const PermPosterior post = oracle.posterior(cipher);
    CHECK(oracle.perms()[post.argmax()] == key);
    CHECK(post.probs()[post.argmax()] > 0.99);
}

TEST_CASE("posterior stays exactly uniform on the self-symmetric chain") {
    // every relabeling of the diagonal chain is the same model, so no
    // sequence can favour any permutation
    auto base = diagonal_markov(4);
    LexinvOracle oracle(smooth(base, 1e-4));
    Rng rng(29);
    const TokenSeq seq = sample_sequence(*base, 300, rng);
    const auto probs = oracle.posterior(seq).probs();
    for (double p : probs) CHECK(std::abs(p - 1.0 / 24) <= 1e-12);
    CHECK(oracle.posterior(seq).entropy() == doctest::Approx(std::log(24.0)).epsilon(1e-12));
}

TEST_CASE("posterior entropy and argmax basics") {
    LexinvOracle oracle(smooth(identifiable_markov(3), 1e-3));
    const PermPosterior prior = oracle.prior();
    CHECK(prior.entropy() == doctest::Approx(std::log(6.0)).epsilon(1e-12));
    const auto probs = prior.probs();
    double sum = 0.0;
    for (double p : probs) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

// ---- mapping marginals

TEST_CASE("mapping marginals are doubly stochastic on random posteriors") {
    LexinvOracle oracle(smooth(identifiable_markov(4), 1e-3));
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        PermPosterior post;
        post.d = 4;
        std::vector<double> w(oracle.n_perms());
        for (double& x : w) x = rng.next_double() + 1e-9;
        double total = 0.0;
        for (double x : w) total += x;
        for (double& x : w) x = std::log(x / total);
        post.log_probs = std::move(w);
        const KeyMatrix m = oracle.mapping_marginals(post);
        for (int c = 0; c < 4; ++c) CHECK(std::abs(m.row_sum(c) - 1.0) <= 1e-9);
        for (int t = 0; t < 4; ++t) CHECK(std::abs(m.col_sum(t) - 1.0) <= 1e-9);
    }
}

TEST_CASE("mapping marginals of a point posterior read off the key") {
    LexinvOracle oracle(smooth(identifiable_markov(3), 1e-3));
    const std::size_t which = 4;
    PermPosterior post;
    post.d = 3;
    post.log_probs.assign(oracle.n_perms(), -1e30);
    post.log_probs[which] = 0.0;
    const KeyMatrix m = oracle.mapping_marginals(post);
    const Permutation& pi = oracle.perms()[which];
    for (Token t = 0; t < 3; ++t)
        CHECK(m.at(pi(t), t) == doctest::Approx(1.0).epsilon(1e-12));
}

// ---- regret diagnostics

TEST_CASE("log ratios respect the smoothing bound") {
    const double sigma = 1e-3;
    auto base = identifiable_markov(4);
    LexinvOracle oracle(smooth(base, sigma));
    Rng rng(47);
    const TokenSeq seq = sample_sequence(*base, 200, rng);
    const RegretDiagnostics diag = regret_diagnostics(oracle, seq);
    REQUIRE(diag.logratio.size() == seq.size());
    const double bound = std::log(4.0 / sigma);
    for (double r : diag.logratio) CHECK(std::abs(r) <= bound + 1e-9);
    for (double kl : diag.kl) CHECK(kl >= -1e-12);
}

TEST_CASE("regret increments average to zero under the truth") {
    // E[kl_t - logratio_t | context] = 0 when x_t is drawn from the smoothed
    // reference itself, so the averaged martingale increment shrinks
    const double sigma = 1e-3;
    auto base = identifiable_markov(3);
    auto smoothed = smooth(base, sigma);
    LexinvOracle oracle(smoothed);
    double total = 0.0;
    std::size_t count = 0;
    for (int s = 0; s < 24; ++s) {
        Rng rng(900 + static_cast<std::uint64_t>(s));
        const TokenSeq seq = sample_sequence(*smoothed, 120, rng);
        const RegretDiagnostics diag = regret_diagnostics(oracle, seq);
        total += diag.z.back();
        count += seq.size();
    }
    CHECK(std::abs(total / static_cast<double>(count)) < 0.02);
}

TEST_CASE("late-context increments vanish once the posterior converges") {
    const double sigma = 1e-4;
    auto base = identifiable_markov(4);
    LexinvOracle oracle(smooth(base, sigma));
    Rng rng(53);
    const TokenSeq seq = sample_sequence(*base, 300, rng);
    const RegretDiagnostics diag = regret_diagnostics(oracle, seq);
    // once the posterior has locked on, kl ~ 0 and logratio ~ 0, so the
    // cumulative z stops moving
    double drift = 0.0;
    for (std::size_t t = 260; t < diag.z.size(); ++t)
        drift = std::max(drift, std::abs(diag.z[t] - diag.z[260]));
    CHECK(drift < 0.05);
}

// ---- convergence experiment

TEST_CASE("predictive converges to the reference on identifiable chains") {
    const ConvergenceResult r =
        run_convergence_experiment(identifiable_markov(4), 1e-4, 128, 16, 61);
    REQUIRE(r.mean_l1.size() == 128);
    REQUIRE(r.mean_kl.size() == 128);
    double early = 0.0, late = 0.0;
    for (int t = 0; t < 16; ++t) early += r.mean_l1[static_cast<std::size_t>(t)] / 16;
    for (int t = 112; t < 128; ++t) late += r.mean_l1[static_cast<std::size_t>(t)] / 16;
    CHECK(early > 0.1);       // mixture starts far from the reference
    CHECK(late < 0.5 * early); // and closes most of the gap
    CHECK(late < 0.1);
    for (double v : r.mean_kl) CHECK(v >= -1e-12);
}

TEST_CASE("convergence runs are deterministic in the seed") {
    const ConvergenceResult a = run_convergence_experiment(identifiable_markov(3), 1e-3, 40, 4, 5);
    const ConvergenceResult b = run_convergence_experiment(identifiable_markov(3), 1e-3, 40, 4, 5);
    CHECK(a.mean_l1 == b.mean_l1);
    CHECK(a.mean_kl == b.mean_kl);
    CHECK(a.mean_logratio == b.mean_logratio);
}

TEST_CASE("convergence csv format") {
    const std::string path = "test_oracle_conv.tmp";
    const ConvergenceResult r = run_convergence_experiment(identifiable_markov(3), 1e-3, 8, 2, 5);
    write_csv(r, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "position,mean_l1,mean_kl,mean_logratio,n_seqs,sigma,seed");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 8);
    in.close();
    std::remove(path.c_str());
}

TEST_CASE("smoothed predictive respects the probability floor") {
    const double sigma = 0.01;
    LexinvOracle oracle(smooth(identifiable_markov(4), sigma));
    Rng rng(71);
    for (int trial = 0; trial < 10; ++trial) {
        TokenSeq ctx;
        for (int t = 0; t < 30; ++t) ctx.push_back(static_cast<Token>(rng.next_below(4)));
        const ProbVec p = oracle.predictive(ctx);
        for (int v = 0; v < 4; ++v) CHECK(p[v] >= sigma / 4 - 1e-15);
    }
}
