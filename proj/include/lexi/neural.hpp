#pragma once

// Toy decoder-only transformer with manual backprop.  Pre-norm RMSNorm
// blocks, causal multi-head attention with bucketed relative-position bias
// (shared across layers, per head), GELU feed-forward, tied readout.  Four
// embedding regimes select where input rows come from and which table the
// readout uses:
//
//   Learned           learned table in, same table out
//   GaussianPerSeq    per-sequence random codebook in AND out, no table
//   EmbedDropout      per-token coin picks codebook row, learned table out
//   PartialPermutation data-side transform; the network itself is Learned
//
// Everything is templated on float/double; verification paths run double.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lexi/core.hpp"
#include "lexi/reflm.hpp"
#include "lexi/rng.hpp"

namespace lexi {

enum class EmbeddingMode { kLearned, kGaussianPerSeq, kEmbedDropout, kPartialPermutation };
const char* mode_name(EmbeddingMode mode);
EmbeddingMode mode_from_name(const std::string& name);

enum class Precision { kF32, kF64 };

struct ModelConfig {
    int vocab = 130;
    int width = 128;
    int layers = 2;
    int heads = 4;
    int head_width = 32;
    int ffn_width = 256;
    int max_seq_len = 512;
    int relpos_buckets = 32;
    EmbeddingMode mode = EmbeddingMode::kLearned;
    double p_mix = 0.2;
    // Scale codebook rows by 1/sqrt(width) at input and readout, keeping
    // logit magnitudes comparable to the learned-table modes.
    bool scale_gaussian = false;
    // EmbedDropout only: layer-normalise candidate rows before the coin is
    // applied, so learned and random rows enter at comparable norms.
    bool normalize_mixed_rows = true;
    // Apply the learnable embedding scale/bias on the readout rows as well
    // as the input path.
    bool scale_bias_readout = false;
    Precision precision = Precision::kF32;

    void validate() const;
    bool uses_learned_table() const { return mode != EmbeddingMode::kGaussianPerSeq; }
    bool uses_codebook() const {
        return mode == EmbeddingMode::kGaussianPerSeq || mode == EmbeddingMode::kEmbedDropout;
    }

    // Flat key=value text used as the checkpoint config echo.
    std::string serialize() const;
    static ModelConfig deserialize(const std::string& text);
    bool operator==(const ModelConfig& o) const;
    bool operator!=(const ModelConfig& o) const { return !(*this == o); }
};

// ------------------------------------------------------------- parameters

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
};

std::vector<TensorSpec> param_layout(const ModelConfig& cfg);
std::size_t param_count(const ModelConfig& cfg);

template <typename T>
struct ParamBuffer {
    std::vector<TensorSpec> layout;
    std::vector<T> data;

    T* tensor(const std::string& name);
    const T* tensor(const std::string& name) const;
    const TensorSpec& spec(const std::string& name) const;
    void zero();
};

template <typename T>
ParamBuffer<T> make_params(const ModelConfig& cfg); // zero-filled
template <typename T>
ParamBuffer<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Per-sequence codebook: vocab x width standard normal entries, drawn in
// double and cast, so float and double models see the same stream.
template <typename T>
std::vector<T> sample_sequence_embedding(std::uint64_t seed, std::uint64_t sequence_index,
                                         const ModelConfig& cfg);

// EmbedDropout coins, 1 = replace with the codebook row.
std::vector<std::uint8_t> sample_mix_coins(std::uint64_t seed, std::uint64_t sequence_index,
                                           std::size_t n, double p_mix);

// B_p: per-token coin flips the token to pi(token) with probability p_mix.
TokenSeq apply_partial_permutation(const TokenSeq& tokens, const Permutation& pi, double p_mix,
                                   std::uint64_t seed);

// ------------------------------------------------------------ transformer

// Reusable activation storage so the training loop does not reallocate.
// Contents are an implementation detail of Transformer.
template <typename T>
struct Scratch {
    struct Layer {
        std::vector<T> x_in1, xn1, q, k, v, att, ctx, x_in2, xn2, h_pre, h_act;
        std::vector<T> inv_rms1, inv_rms2;
    };
    std::vector<T> e_cand, e_used, ln_mean, ln_inv_std;
    std::vector<T> x, xn_final, inv_rms_final, r_eff;
    std::vector<Layer> layers;
    // backward buffers
    std::vector<T> dlogits, dx, dxn, dq, dk, dv, dctx, dh, dr, row;
};

template <typename T>
class Transformer {
public:
    explicit Transformer(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }

    // codebook: vocab x width, required when config().uses_codebook().
    // coins: per-token, required in EmbedDropout mode.
    // logits_out: n x vocab, row-major.
    void forward(const ParamBuffer<T>& params, const TokenSeq& tokens, const T* codebook,
                 const std::uint8_t* coins, std::vector<T>& logits_out, Scratch<T>& scratch) const;
    void forward(const ParamBuffer<T>& params, const TokenSeq& tokens, const T* codebook,
                 const std::uint8_t* coins, std::vector<T>& logits_out) const;

    // Also exposes the post-final-norm hidden states (n x width) the
    // readout sees; the decipher probe trains on these.
    void forward_acts(const ParamBuffer<T>& params, const TokenSeq& tokens, const T* codebook,
                      const std::uint8_t* coins, std::vector<T>& logits_out,
                      std::vector<T>& acts_out, Scratch<T>& scratch) const;

    // Mean cross-entropy over targets >= 0 (negative target = ignore).
    // Gradients are accumulated into `grads` (caller zeroes when desired).
    double loss_and_grads(const ParamBuffer<T>& params, const TokenSeq& tokens,
                          const std::vector<Token>& targets, const T* codebook,
                          const std::uint8_t* coins, ParamBuffer<T>& grads,
                          Scratch<T>& scratch) const;

    double loss_only(const ParamBuffer<T>& params, const TokenSeq& tokens,
                     const std::vector<Token>& targets, const T* codebook,
                     const std::uint8_t* coins, Scratch<T>& scratch) const;

private:
    void check_inputs(const TokenSeq& tokens, const T* codebook, const std::uint8_t* coins) const;
    void run_forward(const ParamBuffer<T>& params, const TokenSeq& tokens, const T* codebook,
                     const std::uint8_t* coins, std::vector<T>& logits_out,
                     Scratch<T>& scratch) const;
    void run_backward(const ParamBuffer<T>& params, const TokenSeq& tokens, const T* codebook,
                      const std::uint8_t* coins, ParamBuffer<T>& grads,
                      Scratch<T>& scratch) const;
    ModelConfig cfg_;
    std::vector<int> bucket_of_; // distance -> relative-position bucket
};

// Mean cross-entropy of row-major logits (n x d) against targets; negative
// targets are ignored.  Standalone double-precision reference.
double softmax_xent(const std::vector<double>& logits, int d, const std::vector<Token>& targets);

// T5-style log-spaced distance bucketing (causal form).  distance >= 0 is
// how far back the key sits from the query.  Documented by golden tests.
int relpos_bucket(int distance, int num_buckets, int max_distance = 128);

// --------------------------------------------------------- verification

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double analytic = 0.0, numeric = 0.0;
};

// Central differences over every parameter; 64-bit only.
FdReport finite_difference_check(const ModelConfig& cfg, const ParamBuffer<double>& params,
                                 const TokenSeq& tokens, const std::vector<Token>& targets,
                                 const double* codebook, const std::uint8_t* coins,
                                 double h = 1e-5);

// forward(tokens, E) vs forward(pi(tokens), E') with E'[pi(v)] = E[v];
// returns max |logits[t][v] - logits'[t][pi(v)]|.
template <typename T>
double equivariance_check(const ModelConfig& cfg, const ParamBuffer<T>& params,
                          const TokenSeq& tokens, const std::vector<T>& codebook,
                          const Permutation& pi);

// --------------------------------------------------------------- training

// Deterministic data feed: next(index) must depend only on (source, index).
class SequenceSource {
public:
    virtual ~SequenceSource() = default;
    virtual int vocab() const = 0;
    virtual int seq_len() const = 0;
    virtual TokenSeq next(std::uint64_t index) = 0;
};

// Fresh ancestral samples from a reference model.
class MarkovSource : public SequenceSource {
public:
    MarkovSource(std::shared_ptr<const ReferenceModel> model, int seq_len, std::uint64_t seed);
    int vocab() const override { return model_->alphabet_size(); }
    int seq_len() const override { return seq_len_; }
    TokenSeq next(std::uint64_t index) override;

private:
    std::shared_ptr<const ReferenceModel> model_;
    int seq_len_;
    std::uint64_t seed_;
};

// I.i.d. draws (with replacement) from a fixed set of sequences.
class FixedCorpusSource : public SequenceSource {
public:
    FixedCorpusSource(std::vector<TokenSeq> seqs, int vocab, std::uint64_t seed);
    int vocab() const override { return vocab_; }
    int seq_len() const override { return seq_len_; }
    TokenSeq next(std::uint64_t index) override;

private:
    std::vector<TokenSeq> seqs_;
    int vocab_, seq_len_;
    std::uint64_t seed_;
};

struct OptimConfig {
    int steps = 1000;
    int batch = 2;
    double peak_lr = 1e-3;
    double min_lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip = 1.0; // global grad-norm clip, <= 0 disables
    int log_every = 1;
};

struct TrainOptions {
    std::string metrics_csv;     // empty = no metrics file
    std::string checkpoint_path; // empty = no checkpoint persisted
    std::string resume_from;     // empty = fresh start
    int checkpoint_every = 0;    // extra periodic saves; 0 = final only
    bool quiet = true;           // no stderr progress
};

template <typename T>
struct TrainState {
    ModelConfig cfg;
    std::uint64_t step = 0;
    ParamBuffer<T> params, adam_m, adam_v;
    Rng::State rng{};
};

struct TrainResult {
    std::uint64_t steps_done = 0;
    double final_loss = 0.0;
    std::string checkpoint_path;
};

double cosine_lr(const OptimConfig& opt, std::uint64_t step);

template <typename T>
TrainResult train(const ModelConfig& cfg, SequenceSource& source, const OptimConfig& opt,
                  std::uint64_t seed, const TrainOptions& options);

// ------------------------------------------------------------ checkpoints

struct CheckpointMeta {
    ModelConfig cfg;
    Precision precision = Precision::kF32;
    std::uint64_t step = 0;
    bool has_optimizer = false;
};

CheckpointMeta peek_checkpoint(const std::string& path);
template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::string& path,
                     bool with_optimizer = true);
template <typename T>
TrainState<T> load_checkpoint(const std::string& path);

// ------------------------------------------------------------- evaluation

struct PplSeries {
    // mean_nll[t] = mean over sequences of -log p(x_{t+1} | x_{<=t});
    // indexed by context length t, so length = seq_len - 1.
    std::vector<double> mean_nll;
    int n_seqs = 0;
};

template <typename T>
PplSeries eval_positionwise_nll(const ModelConfig& cfg, const ParamBuffer<T>& params,
                                SequenceSource& source, int n_seqs, std::uint64_t seed);

// exp of the mean nll over positions [lo, hi).
double band_ppl(const std::vector<double>& nll, std::size_t lo, std::size_t hi);

} // namespace lexi
