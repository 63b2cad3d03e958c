#pragma once

// Reference language models: the "plaintext" distributions a lexinvariant
// model is measured against.  Two concrete families (order-k Markov chains
// and finite weighted toy languages), a smoothing wrapper, and a plain-text
// file format for both.

#include <memory>
#include <string>
#include <vector>

#include "lexi/core.hpp"

namespace lexi {

// Asking a toy language for the next-token distribution after a prefix that
// has zero mass is undefined; we make it a distinct error so callers (and
// the smoothing wrapper) can treat it deliberately.
class DeadPrefixError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(int line, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    int line() const { return line_; }
private:
    int line_;
};

class ReferenceModel {
public:
    virtual ~ReferenceModel() = default;
    virtual int alphabet_size() const = 0;
    // Distribution over the next token given a (possibly empty) prefix.
    virtual ProbVec cond_dist(const TokenSeq& prefix) const = 0;
    // log p(seq); -inf for impossible sequences.
    virtual double seq_logprob(const TokenSeq& seq) const;
    // Markov order when conditionals depend on a bounded suffix, -1 otherwise.
    // The oracle uses this to avoid remapping whole prefixes per permutation.
    virtual int context_order() const { return -1; }
    virtual std::string describe() const = 0;
};

// Order-k Markov chain: d^k context rows plus an initial distribution over
// length-k prefixes (uniform unless given).  Conditionals for prefixes
// shorter than k are exact marginals of the implied joint.
class MarkovModel : public ReferenceModel {
public:
    MarkovModel(int d, int k, std::vector<ProbVec> rows);
    MarkovModel(int d, int k, std::vector<ProbVec> rows, ProbVec initial);

    int alphabet_size() const override { return d_; }
    int order() const { return k_; }
    ProbVec cond_dist(const TokenSeq& prefix) const override;
    int context_order() const override { return k_; }
    std::string describe() const override;

    const ProbVec& row(const TokenSeq& ctx) const; // ctx.size() == k
    const ProbVec& initial() const { return init_; }
    std::size_t context_index(const TokenSeq& ctx) const;

private:
    int d_, k_;
    std::vector<ProbVec> rows_; // d^k rows
    ProbVec init_;              // over d^k length-k prefixes
};

// Finite language of equal-length strings with positive weights.
class ToyLanguage : public ReferenceModel {
public:
    ToyLanguage(int d, std::vector<TokenSeq> strings, std::vector<double> weights);

    int alphabet_size() const override { return d_; }
    int string_length() const { return len_; }
    ProbVec cond_dist(const TokenSeq& prefix) const override; // throws DeadPrefixError
    double seq_logprob(const TokenSeq& seq) const override;
    std::string describe() const override;

    // Total weight of strings extending the prefix.
    double prefix_mass(const TokenSeq& prefix) const;
    const std::vector<TokenSeq>& strings() const { return strings_; }
    const std::vector<double>& weights() const { return weights_; }

private:
    int d_, len_;
    std::vector<TokenSeq> strings_;
    std::vector<double> weights_;
};

// p_sigma = (1 - sigma) p + sigma / d.  For a dead prefix the base conditional
// is taken to be uniform: every continuation of the prefix has the same
// (purely smoothing) mass, so that convention is the exact conditional of the
// smoothed process in the limit of the base model contributing nothing.
class SmoothedModel : public ReferenceModel {
public:
    SmoothedModel(std::shared_ptr<const ReferenceModel> base, double sigma);

    int alphabet_size() const override { return base_->alphabet_size(); }
    ProbVec cond_dist(const TokenSeq& prefix) const override;
    int context_order() const override { return base_->context_order(); }
    std::string describe() const override;

    double sigma() const { return sigma_; }
    const ReferenceModel& base() const { return *base_; }

private:
    std::shared_ptr<const ReferenceModel> base_;
    double sigma_;
};

std::shared_ptr<const ReferenceModel> smooth(std::shared_ptr<const ReferenceModel> base,
                                             double sigma);

// ------------------------------------------------------------- model files
//
//   # comment
//   markov d=3 k=1
//   init ctx=0 p=0.5          (optional; one line per context, default uniform)
//   ctx=0 p=0.8,0.1,0.1
//   ...
//
//   toy d=2
//   s=babbbb w=0.5            (strings use glyphs 'a' + id)
//   s=ababab w=0.5
//
// Reals round-trip bit-exactly (written with %.17g).

std::shared_ptr<const ReferenceModel> parse_model(const std::string& text);
std::shared_ptr<const ReferenceModel> load_model(const std::string& path);
std::string serialize_model(const ReferenceModel& model);
void save_model(const ReferenceModel& model, const std::string& path);

// -------------------------------------------------------------- fixtures

// Diagonal self-loop chain: p(i|i) = diag, remaining mass spread equally.
// Note every relabelling of this chain is the same chain, so it is useful
// only as a table-lookup test case, never for key recovery.
std::shared_ptr<const MarkovModel> diagonal_markov(int d, double diag = 0.8);

// Identifiable order-1 chain: row i keeps 0.8 on the diagonal and spreads
// 0.2 over the next n_i = 1 + (i mod (d-1)) tokens cyclically.  The varying
// row supports destroy all nontrivial automorphisms, so the cipher key is
// recoverable from samples.  Requires d >= 3.
std::shared_ptr<const MarkovModel> identifiable_markov(int d);

// Near-deterministic cycle: row i puts q_i = 0.995 - 0.035*i/(d-1) on token
// (i+1) mod d and spreads 1 - q_i uniformly over the whole alphabet.  The
// q_i are pairwise distinct, so the only automorphism is the identity, yet
// without the key every successor looks uniform: conditional entropy is low
// given the labelling and near log d without it.  Requires d >= 3.
std::shared_ptr<const MarkovModel> successor_markov(int d);

// Uniform-random rows (and initial distribution) for property tests.
std::shared_ptr<const MarkovModel> random_markov(int d, int k, Rng& rng);

// The two-string language {babbbb, ababab} with equal weights.
std::shared_ptr<const ToyLanguage> two_string_toy();

// Ancestral sampling; throws DeadPrefixError if the model runs out of mass.
TokenSeq sample_sequence(const ReferenceModel& model, int len, Rng& rng);
std::vector<TokenSeq> sample_corpus(const ReferenceModel& model, int n_seqs, int len,
                                    std::uint64_t seed);

} // namespace lexi
