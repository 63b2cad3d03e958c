#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "lexi/decipher.hpp"
#include "lexi/neural.hpp"
#include "lexi/reflm.hpp"

using namespace lexi;

namespace {

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

double loss_field(const std::string& csv_row) {
    std::istringstream in(csv_row);
    std::string step, loss;
    std::getline(in, step, ',');
    std::getline(in, loss, ',');
    return std::stod(loss);
}

// One uniform random block tiled to seq_len.  Late positions repeat the
// block verbatim, so they are predictable only by in-context copying, while
// the first block is irreducibly uniform for any model.
class BlockRepeatSource : public SequenceSource {
public:
    BlockRepeatSource(int vocab, int block, int seq_len, std::uint64_t seed)
        : vocab_(vocab), block_(block), seq_len_(seq_len), seed_(seed) {}
    int vocab() const override { return vocab_; }
    int seq_len() const override { return seq_len_; }
    TokenSeq next(std::uint64_t index) override {
        Rng rng = Rng::substream(seed_, index);
        TokenSeq block(static_cast<std::size_t>(block_));
        for (Token& t : block)
            t = static_cast<Token>(rng.next_below(static_cast<std::size_t>(vocab_)));
        TokenSeq seq(static_cast<std::size_t>(seq_len_));
        for (int t = 0; t < seq_len_; ++t)
            seq[static_cast<std::size_t>(t)] = block[static_cast<std::size_t>(t % block_)];
        return seq;
    }

private:
    int vocab_, block_, seq_len_;
    std::uint64_t seed_;
};

// I.i.d. draws from a fixed skewed marginal; gives the decipher probe a
// plaintext distribution it can visibly descend on within a few hundred
// steps, which a near-uniform markov stationary does not.
class SkewedIidSource : public SequenceSource {
public:
    SkewedIidSource(std::vector<double> weights, int seq_len, std::uint64_t seed)
        : weights_(std::move(weights)), seq_len_(seq_len), seed_(seed) {}
    int vocab() const override { return static_cast<int>(weights_.size()); }
    int seq_len() const override { return seq_len_; }
    TokenSeq next(std::uint64_t index) override {
        Rng rng = Rng::substream(seed_, index);
        TokenSeq seq(static_cast<std::size_t>(seq_len_));
        for (Token& t : seq) t = static_cast<Token>(rng.next_categorical(weights_));
        return seq;
    }

private:
    std::vector<double> weights_;
    int seq_len_;
    std::uint64_t seed_;
};

struct GaussianFixture {
    ModelConfig cfg;
    TrainResult result;
    TrainState<float> state;
};

// Shared across cases so the expensive run happens once.
const GaussianFixture& trained_gaussian() {
    static const GaussianFixture fx = [] {
        GaussianFixture f;
        f.cfg.vocab = 8;
        f.cfg.width = 32;
        f.cfg.layers = 2;
        f.cfg.heads = 2;
        f.cfg.head_width = 16;
        f.cfg.ffn_width = 64;
        f.cfg.max_seq_len = 128;
        f.cfg.mode = EmbeddingMode::kGaussianPerSeq;
        f.cfg.precision = Precision::kF32;
        f.cfg.validate();
        BlockRepeatSource source(8, 16, 128, 101);
        OptimConfig opt;
        opt.steps = 1500;
        opt.batch = 4;
        opt.peak_lr = 3e-3;
        opt.min_lr = 3e-4;
        opt.log_every = 100;
        TrainOptions options;
        options.checkpoint_path = "test_training_gauss.ckpt";
        options.metrics_csv = "test_training_gauss.csv";
        f.result = train<float>(f.cfg, source, opt, 21, options);
        f.state = load_checkpoint<float>(options.checkpoint_path);
        return f;
    }();
    return fx;
}

} // namespace

TEST_CASE("learned embeddings fit an identifiable markov chain") {
    ModelConfig cfg;
    cfg.vocab = 8;
    cfg.width = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.head_width = 8;
    cfg.ffn_width = 32;
    cfg.max_seq_len = 64;
    cfg.mode = EmbeddingMode::kLearned;
    cfg.precision = Precision::kF32;
    cfg.validate();
    MarkovSource source(identifiable_markov(8), 64, 11);
    OptimConfig opt;
    opt.steps = 400;
    opt.batch = 4;
    opt.peak_lr = 3e-3;
    opt.min_lr = 3e-4;
    opt.log_every = 50;
    TrainOptions options;
    options.metrics_csv = "test_training_learned.csv";
    const TrainResult res = train<float>(cfg, source, opt, 13, options);
    CHECK(res.steps_done == 400);
    // untrained loss is log 8 = 2.079; a fitted bigram model sits well below
    CHECK(res.final_loss < 1.6);

    // header plus rows at steps 0, 50, ..., 350 and the final step 399
    const auto lines = read_lines(options.metrics_csv);
    REQUIRE(lines.size() == 10);
    CHECK(lines[0] == "step,loss,lr,mode,seed");
    CHECK(lines[1].find("learned") != std::string::npos);
    const double first = loss_field(lines[1]);
    const double last = loss_field(lines.back());
    CHECK(std::isfinite(first));
    CHECK(last < first);
    std::remove(options.metrics_csv.c_str());
}

TEST_CASE("gaussian embeddings learn in-context copying") {
    const GaussianFixture& fx = trained_gaussian();
    CHECK(fx.result.steps_done == 1500);
    CHECK(fx.state.step == 1500);
    CHECK(fx.state.cfg.vocab == 8);
    // a model that ignores context stays at log 8 = 2.079 everywhere; with
    // 112 of 127 predictions copyable the mean must drop far below that
    CHECK(fx.result.final_loss < 1.3);

    // header plus rows at steps 0, 100, ..., 1400 and the final step 1499
    const auto lines = read_lines("test_training_gauss.csv");
    REQUIRE(lines.size() == 17);
    CHECK(lines[1].find("gaussian") != std::string::npos);
    CHECK(loss_field(lines.back()) < loss_field(lines[1]));

    BlockRepeatSource eval_src(8, 16, 128, 777);
    const PplSeries ser = eval_positionwise_nll<float>(fx.cfg, fx.state.params, eval_src, 32, 5);
    REQUIRE(ser.mean_nll.size() == 127);
    CHECK(ser.n_seqs == 32);
    for (double v : ser.mean_nll) CHECK(std::isfinite(v));
    // the first block is uniform noise, so no model beats perplexity 8 there
    const double early = band_ppl(ser.mean_nll, 0, 15);
    const double late = band_ppl(ser.mean_nll, 111, 127);
    CHECK(early > 6.0);
    CHECK(early < 64.0);
    CHECK(late < 5.0);
    CHECK(late < 0.7 * early);
}

TEST_CASE("probe training composes with a trained gaussian model") {
    const GaussianFixture& fx = trained_gaussian();
    const std::vector<double> weights = {16, 8, 4, 2, 1, 1, 1, 1};
    SkewedIidSource source(weights, 128, 31);
    OptimConfig opt;
    opt.steps = 300;
    opt.batch = 4;
    opt.peak_lr = 3e-3;
    opt.min_lr = 3e-4;
    const ProbeTrainResult probe = train_probe<float>(fx.cfg, fx.state.params, source, opt, 17);
    CHECK(probe.initial_loss == doctest::Approx(std::log(8.0)).epsilon(0.2));
    CHECK(probe.final_loss < probe.initial_loss);
    CHECK(probe.probe.cfg.vocab == 8);
    CHECK(probe.probe.cfg.lm_width == 32);

    SkewedIidSource eval_src(weights, 128, 41);
    const ProbeEvalResult ev = eval_probe_decipher<float>(fx.cfg, fx.state.params, probe.probe,
                                                          eval_src, 8, 32, 32, 3);
    REQUIRE(ev.windows.size() == 4);
    CHECK(ev.windows[0].window_start == 0);
    CHECK(ev.windows[3].window_start == 96);
    for (const DecipherWindowStat& w : ev.windows) {
        CHECK(w.mean_precision >= 0.0);
        CHECK(w.mean_precision <= 1.0);
        CHECK(w.n_sequences == 8);
    }
    CHECK(ev.token_accuracy >= 0.0);
    CHECK(ev.token_accuracy <= 1.0);
    CHECK(ev.n_seqs == 8);

    SkewedIidSource eval_src2(weights, 128, 41);
    const ProbeEvalResult again = eval_probe_decipher<float>(fx.cfg, fx.state.params, probe.probe,
                                                             eval_src2, 8, 32, 32, 3);
    CHECK(again.token_accuracy == ev.token_accuracy);

    std::remove("test_training_gauss.ckpt");
    std::remove("test_training_gauss.csv");
}
