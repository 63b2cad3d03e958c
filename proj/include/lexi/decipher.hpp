#pragma once

// Cipher-key readout.  Two routes to the same d x d key matrix: exact
// mapping marginals from the permutation oracle, and a small MLP probe
// trained on frozen transformer activations to name the plaintext identity
// of the current token.  Both feed the same majority-vote window extraction
// and precision metrics.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lexi/core.hpp"
#include "lexi/keymatrix.hpp"
#include "lexi/neural.hpp"
#include "lexi/oracle.hpp"
#include "lexi/reflm.hpp"
#include "lexi/rng.hpp"

namespace lexi {

// -------------------------------------------------------------- ciphering

struct CipherSample {
    TokenSeq plain;
    Permutation key; // encryption map, cipher = key(plain)
    TokenSeq cipher;
};

// Draws a plaintext from `model` and a uniform key; ciphertext follows.
CipherSample sample_cipher(const ReferenceModel& model, int seq_len, Rng& rng);

// ------------------------------------------------------------------ probe

struct ProbeConfig {
    int vocab = 0;
    int lm_width = 0;     // activation width fed in
    int hidden_width = 0; // 0 = default to lm_width
    int out_width = 0;    // code space of the output table, 0 = lm_width

    void validate() const;
    int hidden() const { return hidden_width > 0 ? hidden_width : lm_width; }
    int out() const { return out_width > 0 ? out_width : lm_width; }
};

// Two-layer MLP over a frozen activation, then inner products against a
// stable (trained, never resampled) output table eprime.  All double.
struct ProbeParams {
    ProbeConfig cfg;
    std::vector<double> w1, b1;   // hidden x lm_width, hidden
    std::vector<double> w2, b2;   // out x hidden, out
    std::vector<double> eprime;   // vocab x out
};

constexpr std::uint64_t kProbeInitSalt = 0x9B0E;

ProbeParams init_probe(const ProbeConfig& cfg, std::uint64_t seed);

// Raw pre-softmax scores over plaintext tokens for one activation row.
std::vector<double> probe_logits(const ProbeParams& probe, const double* act,
                                 std::size_t act_len);
// Softmaxed version, interpreted as P(plaintext of current token = .).
ProbVec probe_forward(const ProbeParams& probe, const double* act, std::size_t act_len);

// Little-endian binary probe files ("LEXIPROB" magic).
void save_probe(const ProbeParams& probe, const std::string& path);
ProbeParams load_probe(const std::string& path);

struct ProbeTrainOptions {
    std::string metrics_csv; // empty = no metrics file
    bool quiet = true;
    int hidden_width = 0;    // 0 = language model width
};

struct ProbeTrainResult {
    ProbeParams probe;
    double initial_loss = 0.0; // first-batch loss before any update
    double final_loss = 0.0;
};

// Trains the probe on ciphered sequences scored by a frozen GaussianPerSeq
// transformer: per step, sample plaintexts from `source`, encrypt with fresh
// keys, embed with fresh codebooks, and fit cross-entropy against the true
// plaintext of each position.  The transformer parameters are never touched.
// Optimizer mirrors the transformer trainer (Adam, cosine schedule, clip).
template <typename T>
ProbeTrainResult train_probe(const ModelConfig& lm_cfg, const ParamBuffer<T>& lm_params,
                             SequenceSource& source, const OptimConfig& opt,
                             std::uint64_t seed, const ProbeTrainOptions& options = {});

// ----------------------------------------------------------- key readout

struct PredictedKey {
    std::vector<Token> map;       // cipher -> plaintext, -1 = unpredicted
    std::vector<std::uint8_t> tie; // majority was tied (broken to smaller id)

    int predicted_count() const;
};

struct WindowKey {
    KeyMatrix votes; // vote form; row sums = occurrence counts in the window
    PredictedKey key;
};

// Majority vote over window positions [start, start+size): for each cipher
// symbol seen there, the modal deciphered token.  Ties break toward the
// smaller token id and are flagged.
WindowKey extract_key_window(const TokenSeq& deciphered, const TokenSeq& cipher,
                             std::size_t start, std::size_t size, int d);

// Fraction of predicted cipher symbols c with map[c] == true_key^{-1}(c).
// Unpredicted symbols are excluded from the denominator; count_unseen = true
// switches to the inclusive convention (unpredicted counted as wrong).
double key_precision(const PredictedKey& predicted, const Permutation& true_key,
                     bool count_unseen = false);

// Sum of vote matrices followed by row-wise argmax; rows with no votes
// anywhere stay unpredicted.  The cross-sequence aggregate key.
PredictedKey aggregate_key(const std::vector<KeyMatrix>& votes);

// Soft key matrix from per-position score rows (n x d, row-major): for each
// cipher symbol in the window, mean of its rows, softmaxed.  Rows of symbols
// absent from the window are left unmarked.
KeyMatrix soft_key_matrix(const std::vector<double>& logits, int d, const TokenSeq& cipher,
                          std::size_t start, std::size_t size);

// Exact-oracle counterpart of the probe readout: mapping marginals of the
// posterior after the first `upto` cipher tokens.
KeyMatrix oracle_key_readout(const LexinvOracle& oracle, const TokenSeq& cipher,
                             std::size_t upto);

// ------------------------------------------------- oracle decipher runs

struct DecipherWindowStat {
    std::size_t window_start = 0;
    double mean_precision = 0.0;
    int n_sequences = 0;
};

struct OracleDecipherParams {
    double sigma = 1e-4;
    int seq_len = 512;
    int n_seqs = 100;
    std::size_t window = 100;
    std::size_t stride = 50;
    std::uint64_t seed = 0;
    // One key across all sequences (the single-cipher corpus setting; makes
    // the cross-sequence vote aggregate meaningful).  false = fresh key per
    // sequence; per-window mean precision is unaffected either way.
    bool shared_key = true;
};

struct OracleDecipherResult {
    std::vector<DecipherWindowStat> windows; // last entry starts at seq_len - window
    double aggregate_precision = 0.0;        // summed last-window votes, exclusive
    double aggregate_precision_inclusive = 0.0;
    // mean soft-row entropy of windows starting at entropy_early_start /
    // entropy_late_start, averaged over sequences
    std::size_t entropy_early_start = 0, entropy_late_start = 0;
    double entropy_early = 0.0, entropy_late = 0.0;
    KeyMatrix last_window_marginals; // final sequence, for plotting
};

// Full exact-oracle pipeline: sample (plaintext, key) pairs, stream the
// ciphertext through the smoothed-base oracle, decipher each position by
// argmax of the current mapping-marginal row, then window majority votes
// against the true key.
OracleDecipherResult run_oracle_decipher(std::shared_ptr<const ReferenceModel> base,
                                         const OracleDecipherParams& params);

// Header: window_start,mean_precision,n_sequences
void write_precision_csv(const std::vector<DecipherWindowStat>& windows,
                         const std::string& path);
// Glyph-labelled d x d matrix; unseen rows emit empty cells.
void write_key_matrix_csv(const KeyMatrix& key, const Alphabet& alphabet,
                          const std::string& path);

// -------------------------------------------------- probe decipher runs

struct ProbeEvalResult {
    std::vector<DecipherWindowStat> windows;
    double token_accuracy = 0.0; // per-position deciphered == plaintext
    int n_seqs = 0;
};

// Same pipeline with the probe in place of the oracle: fresh (key, codebook)
// per sequence, probe argmax per position, windowed votes vs the true key.
template <typename T>
ProbeEvalResult eval_probe_decipher(const ModelConfig& lm_cfg, const ParamBuffer<T>& lm_params,
                                    const ProbeParams& probe, SequenceSource& source,
                                    int n_seqs, std::size_t window, std::size_t stride,
                                    std::uint64_t seed);

} // namespace lexi
