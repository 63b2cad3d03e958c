#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "lexi/decipher.hpp"

using namespace lexi;

// ---- ciphering

TEST_CASE("sample_cipher applies the key it reports") {
    auto base = identifiable_markov(5);
    Rng rng(3);
    const CipherSample cs = sample_cipher(*base, 40, rng);
    CHECK(cs.plain.size() == 40);
    CHECK(cs.cipher == cs.key.apply(cs.plain));
    CHECK(cs.key.inverse().apply(cs.cipher) == cs.plain);
    Rng rng2(3);
    const CipherSample again = sample_cipher(*base, 40, rng2);
    CHECK(again.plain == cs.plain);
    CHECK(again.key == cs.key);
}

// ---- window vote extraction

TEST_CASE("window majority vote worked example") {
    //            pos:    0  1  2  3  4  5
    const TokenSeq cipher     = {0, 1, 0, 2, 0, 1};
    const TokenSeq deciphered = {1, 2, 1, 0, 2, 2};
    const WindowKey wk = extract_key_window(deciphered, cipher, 0, 6, 3);
    // cipher 0 saw votes {1: 2, 2: 1}; cipher 1 saw {2: 2}; cipher 2 saw {0: 1}
    CHECK(wk.key.map[0] == 1);
    CHECK(wk.key.map[1] == 2);
    CHECK(wk.key.map[2] == 0);
    CHECK(wk.key.predicted_count() == 3);
    CHECK(wk.votes.at(0, 1) == 2.0);
    CHECK(wk.votes.at(0, 2) == 1.0);
    CHECK(wk.votes.at(1, 2) == 2.0);
    CHECK(!wk.key.tie[0]);
}

TEST_CASE("window vote ties break to the smaller token and are flagged") {
    const TokenSeq cipher     = {0, 0, 1};
    const TokenSeq deciphered = {2, 1, 0};
    const WindowKey wk = extract_key_window(deciphered, cipher, 0, 3, 3);
    CHECK(wk.key.map[0] == 1); // tie between 1 and 2
    CHECK(wk.key.tie[0]);
    CHECK(!wk.key.tie[1]);
    CHECK(wk.key.map[2] == -1); // cipher symbol 2 never appeared
    CHECK(wk.key.predicted_count() == 2);
}

TEST_CASE("window extraction bounds are checked") {
    const TokenSeq seq = {0, 1, 2};
    CHECK_THROWS(extract_key_window(seq, seq, 2, 5, 3));
    CHECK_THROWS(extract_key_window(seq, {0, 1}, 0, 3, 3));
    CHECK_THROWS(extract_key_window(seq, seq, 0, 0, 3));
}

TEST_CASE("key precision conventions") {
    // true key pi: plain -> cipher as 0->1, 1->2, 2->0; decipher map is its
    // inverse: cipher 1 -> plain 0, etc
    const Permutation key = Permutation::from_map({1, 2, 0});
    PredictedKey pred;
    pred.map = {2, 0, -1}; // cipher 0 -> 2 (right), cipher 1 -> 0 (right), 2 unpredicted
    pred.tie = {0, 0, 0};
    CHECK(key_precision(pred, key) == doctest::Approx(1.0));
    CHECK(key_precision(pred, key, true) == doctest::Approx(2.0 / 3.0));
    pred.map = {2, 1, -1}; // second entry now wrong
    CHECK(key_precision(pred, key) == doctest::Approx(0.5));
    PredictedKey empty;
    empty.map = {-1, -1, -1};
    empty.tie = {0, 0, 0};
    CHECK_THROWS(key_precision(empty, key));
    CHECK(key_precision(empty, key, true) == 0.0);
}

TEST_CASE("aggregate_key sums votes across windows") {
    KeyMatrix a = KeyMatrix::zeros(3, false);
    KeyMatrix b = KeyMatrix::zeros(3, false);
    // window a: cipher 0 votes plain 1 twice; window b: cipher 0 votes plain
    // 2 three times, so the aggregate flips the decision
    a.at(0, 1) = 2.0;
    a.row_seen[0] = 1;
    b.at(0, 2) = 3.0;
    b.row_seen[0] = 1;
    b.at(1, 0) = 1.0;
    b.row_seen[1] = 1;
    const PredictedKey agg = aggregate_key({a, b});
    CHECK(agg.map[0] == 2);
    CHECK(agg.map[1] == 0);
    CHECK(agg.map[2] == -1);
}

// ---- soft key matrices

TEST_CASE("soft key matrix from constant and peaked rows") {
    const int d = 3;
    const TokenSeq cipher = {0, 1, 0, 1};
    // rows for cipher 0 are flat, rows for cipher 1 prefer plaintext 2
    const std::vector<double> logits = {
        0.0, 0.0, 0.0,
        0.0, 0.0, 50.0,
        0.0, 0.0, 0.0,
        0.0, 0.0, 50.0,
    };
    const KeyMatrix m = soft_key_matrix(logits, d, cipher, 0, 4);
    CHECK(m.soft);
    for (int t = 0; t < d; ++t) CHECK(m.at(0, t) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(m.at(1, 2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(!m.row_seen[2]);
    CHECK(m.row_entropy(0) == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    CHECK(m.row_entropy(1) == doctest::Approx(0.0).epsilon(1e-6));
    // mean over the two seen rows
    CHECK(m.mean_row_entropy() == doctest::Approx(0.5 * std::log(3.0)).epsilon(1e-6));
}

TEST_CASE("key matrix accessors validate") {
    KeyMatrix m = KeyMatrix::zeros(2, true);
    CHECK_THROWS(m.mean_row_entropy()); // nothing seen yet
    CHECK_THROWS(m.at(2, 0));
    CHECK_THROWS(m.row_entropy(0)); // empty row cannot normalise
}

// ---- oracle readout

TEST_CASE("oracle key readout recovers the key from a long cipher") {
    auto base = identifiable_markov(4);
    LexinvOracle oracle(smooth(base, 1e-4));
    Rng rng(9);
    const CipherSample cs = sample_cipher(*base, 400, rng);
    const KeyMatrix marg = oracle_key_readout(oracle, cs.cipher, cs.cipher.size());
    // each cipher row should be nearly a point mass on key^{-1}(c)
    const Permutation inv = cs.key.inverse();
    for (Token c = 0; c < 4; ++c) {
        CHECK(marg.at(c, inv(c)) > 0.95);
        CHECK(marg.row_entropy(c) < 0.3);
    }
    // and stay doubly stochastic
    for (int i = 0; i < 4; ++i) {
        CHECK(marg.row_sum(i) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(marg.col_sum(i) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("oracle decipher pipeline end to end") {
    OracleDecipherParams params;
    params.sigma = 1e-4;
    params.seq_len = 192;
    params.n_seqs = 6;
    params.window = 48;
    params.stride = 48;
    params.seed = 31;
    const OracleDecipherResult res = run_oracle_decipher(identifiable_markov(4), params);
    REQUIRE(!res.windows.empty());
    CHECK(res.windows.front().window_start == 0);
    CHECK(res.windows.back().window_start == 192 - 48);
    for (const auto& w : res.windows) {
        CHECK(w.n_sequences == 6);
        CHECK(w.mean_precision >= 0.0);
        CHECK(w.mean_precision <= 1.0);
    }
    CHECK(res.windows.back().mean_precision > res.windows.front().mean_precision);
    CHECK(res.windows.back().mean_precision > 0.9);
    CHECK(res.aggregate_precision > 0.9);
    CHECK(res.entropy_late < res.entropy_early);
    // determinism
    const OracleDecipherResult again = run_oracle_decipher(identifiable_markov(4), params);
    CHECK(again.windows.back().mean_precision == res.windows.back().mean_precision);
    CHECK(again.entropy_late == res.entropy_late);
}

TEST_CASE("oracle decipher csv writers") {
    OracleDecipherParams params;
    params.seq_len = 96;
    params.n_seqs = 2;
    params.window = 32;
    params.stride = 32;
    params.seed = 5;
    const OracleDecipherResult res = run_oracle_decipher(identifiable_markov(3), params);

    const std::string prec_path = "test_decipher_prec.tmp";
    write_precision_csv(res.windows, prec_path);
    std::ifstream in(prec_path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "window_start,mean_precision,n_sequences");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == static_cast<int>(res.windows.size()));
    in.close();
    std::remove(prec_path.c_str());

    const std::string key_path = "test_decipher_key.tmp";
    write_key_matrix_csv(res.last_window_marginals, Alphabet::letters(3), key_path);
    std::ifstream kin(key_path);
    std::getline(kin, header);
    CHECK(header == "cipher,a,b,c");
    rows = 0;
    while (std::getline(kin, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    kin.close();
    std::remove(key_path.c_str());
}

// ---- probe

TEST_CASE("probe config defaults and validation") {
    ProbeConfig cfg;
    cfg.vocab = 16;
    cfg.lm_width = 32;
    CHECK(cfg.hidden() == 32);
    CHECK(cfg.out() == 32);
    cfg.hidden_width = 8;
    cfg.out_width = 12;
    CHECK(cfg.hidden() == 8);
    CHECK(cfg.out() == 12);
    CHECK_NOTHROW(cfg.validate());
    ProbeConfig bad = cfg;
    bad.vocab = 0;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.lm_width = -1;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("probe init shapes and determinism") {
    ProbeConfig cfg;
    cfg.vocab = 6;
    cfg.lm_width = 16;
    cfg.hidden_width = 8;
    const ProbeParams a = init_probe(cfg, 4);
    const ProbeParams b = init_probe(cfg, 4);
    const ProbeParams c = init_probe(cfg, 5);
    CHECK(a.w1.size() == 8 * 16);
    CHECK(a.b1.size() == 8);
    CHECK(a.w2.size() == 16 * 8);
    CHECK(a.b2.size() == 16);
    CHECK(a.eprime.size() == 6 * 16);
    CHECK(a.w1 == b.w1);
    CHECK(a.eprime == b.eprime);
    CHECK(a.w1 != c.w1);
    for (double v : a.b1) CHECK(v == 0.0);
    for (double v : a.b2) CHECK(v == 0.0);
}

TEST_CASE("identical output rows give exactly uniform probe probabilities") {
    ProbeConfig cfg;
    cfg.vocab = 5;
    cfg.lm_width = 12;
    ProbeParams probe = init_probe(cfg, 9);
    // overwrite the table so every plaintext row is the same vector
    for (int v = 0; v < 5; ++v)
        for (int j = 0; j < cfg.out(); ++j)
            probe.eprime[static_cast<std::size_t>(v * cfg.out() + j)] =
                0.1 * static_cast<double>(j);
    std::vector<double> act(12, 0.3);
    const ProbVec p = probe_forward(probe, act.data(), act.size());
    for (int v = 0; v < 5; ++v) CHECK(p[v] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("freshly initialised probes are near uniform") {
    // entropy at init should stay within a whisker of log d
    ProbeConfig cfg;
    cfg.vocab = 16;
    cfg.lm_width = 32;
    const ProbeParams probe = init_probe(cfg, 13);
    Rng rng(14);
    double mean_entropy = 0.0;
    const int trials = 50;
    for (int i = 0; i < trials; ++i) {
        std::vector<double> act(32);
        for (double& x : act) x = rng.next_gauss();
        const ProbVec p = probe_forward(probe, act.data(), act.size());
        double h = 0.0;
        for (int v = 0; v < 16; ++v)
            if (p[v] > 0) h -= p[v] * std::log(p[v]);
        mean_entropy += h / trials;
    }
    CHECK(mean_entropy >= 0.9 * std::log(16.0));
}

TEST_CASE("probe logits match the layer algebra") {
    ProbeConfig cfg;
    cfg.vocab = 3;
    cfg.lm_width = 2;
    cfg.hidden_width = 2;
    cfg.out_width = 2;
    ProbeParams probe = init_probe(cfg, 1);
    probe.w1 = {1.0, 0.0, 0.0, 1.0}; // identity
    probe.b1 = {0.0, 0.0};
    probe.w2 = {1.0, 0.0, 0.0, 1.0};
    probe.b2 = {0.5, -0.5};
    probe.eprime = {1.0, 0.0, 0.0, 1.0, 1.0, 1.0};
    const std::vector<double> act = {2.0, -1.0};
    const auto logits = probe_logits(probe, act.data(), act.size());
    auto gelu = [](double x) {
        const double u = 0.797884560802865355 * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    };
    const double z0 = gelu(2.0) + 0.5;
    const double z1 = gelu(-1.0) - 0.5;
    CHECK(logits[0] == doctest::Approx(z0).epsilon(1e-12));
    CHECK(logits[1] == doctest::Approx(z1).epsilon(1e-12));
    CHECK(logits[2] == doctest::Approx(z0 + z1).epsilon(1e-12));
}

TEST_CASE("probe file round trip is bitwise") {
    ProbeConfig cfg;
    cfg.vocab = 4;
    cfg.lm_width = 8;
    cfg.hidden_width = 6;
    const ProbeParams probe = init_probe(cfg, 77);
    const std::string path = "test_decipher_probe.tmp";
    save_probe(probe, path);
    const ProbeParams back = load_probe(path);
    CHECK(back.cfg.vocab == 4);
    CHECK(back.cfg.lm_width == 8);
    CHECK(back.cfg.hidden_width == 6);
    CHECK(back.w1 == probe.w1);
    CHECK(back.b1 == probe.b1);
    CHECK(back.w2 == probe.w2);
    CHECK(back.b2 == probe.b2);
    CHECK(back.eprime == probe.eprime);
    std::remove(path.c_str());
    CHECK_THROWS(load_probe("missing.probe"));
    {
        std::ofstream out("test_decipher_garbage.tmp", std::ios::binary);
        out << "LEXIPROBnot really";
    }
    CHECK_THROWS(load_probe("test_decipher_garbage.tmp"));
    std::remove("test_decipher_garbage.tmp");
}

TEST_CASE("probe training requires a gaussian language model") {
    ModelConfig cfg;
    cfg.vocab = 4;
    cfg.width = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.head_width = 4;
    cfg.ffn_width = 16;
    cfg.max_seq_len = 16;
    cfg.relpos_buckets = 8;
    cfg.mode = EmbeddingMode::kLearned;
    const auto params = init_params<double>(cfg, 1);
    MarkovSource src(identifiable_markov(4), 16, 2);
    OptimConfig opt;
    opt.steps = 1;
    opt.batch = 1;
    CHECK_THROWS(train_probe<double>(cfg, params, src, opt, 3));
}

TEST_CASE("probe training reduces the readout loss") {
    ModelConfig cfg;
    cfg.vocab = 4;
    cfg.width = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.head_width = 8;
    cfg.ffn_width = 32;
    cfg.max_seq_len = 24;
    cfg.relpos_buckets = 8;
    cfg.mode = EmbeddingMode::kGaussianPerSeq;
    cfg.precision = Precision::kF64;
    const auto params = init_params<double>(cfg, 5);
    MarkovSource src(identifiable_markov(4), 24, 6);
    OptimConfig opt;
    opt.steps = 120;
    opt.batch = 4;
    opt.peak_lr = 3e-3;
    opt.min_lr = 3e-4;
    const ProbeTrainResult res = train_probe<double>(cfg, params, src, opt, 7);
    CHECK(res.initial_loss == doctest::Approx(std::log(4.0)).epsilon(0.2));
    CHECK(res.final_loss < res.initial_loss);
    CHECK(res.probe.cfg.vocab == 4);

    // steps = 0 returns the bare initialisation
    OptimConfig none = opt;
    none.steps = 0;
    const ProbeTrainResult init_only = train_probe<double>(cfg, params, src, none, 7);
    CHECK(init_only.probe.w1 == init_probe(init_only.probe.cfg, derive_seed(7, kProbeInitSalt)).w1);
}

TEST_CASE("probe decipher evaluation runs and scores in range") {
    ModelConfig cfg;
    cfg.vocab = 4;
    cfg.width = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.head_width = 8;
    cfg.ffn_width = 32;
    cfg.max_seq_len = 32;
    cfg.relpos_buckets = 8;
    cfg.mode = EmbeddingMode::kGaussianPerSeq;
    cfg.precision = Precision::kF64;
    const auto params = init_params<double>(cfg, 11);
    ProbeConfig pcfg;
    pcfg.vocab = 4;
    pcfg.lm_width = 16;
    const ProbeParams probe = init_probe(pcfg, 12);
    MarkovSource src(identifiable_markov(4), 32, 13);
    const ProbeEvalResult res =
        eval_probe_decipher<double>(cfg, params, probe, src, 3, 16, 16, 14);
    CHECK(res.n_seqs == 3);
    REQUIRE(res.windows.size() == 2);
    CHECK(res.windows[0].window_start == 0);
    CHECK(res.windows[1].window_start == 16);
    CHECK(res.token_accuracy >= 0.0);
    CHECK(res.token_accuracy <= 1.0);
    const ProbeEvalResult again =
        eval_probe_decipher<double>(cfg, params, probe, src, 3, 16, 16, 14);
    CHECK(again.token_accuracy == res.token_accuracy);
}
