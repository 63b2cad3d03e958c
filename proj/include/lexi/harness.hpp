#pragma once

// Text plumbing and experiment surface: character tokenizer, corpus packing,
// moving-average perplexity, the two synthetic in-context tasks (lookup
// tables and subsequence permutations) with their generators, adapters and
// scoring, and a task-text SequenceSource for training toy models.

#include <cstdint>
#include <string>
#include <vector>

#include "lexi/core.hpp"
#include "lexi/neural.hpp"
#include "lexi/rng.hpp"

namespace lexi {

// --------------------------------------------------------------- tokenizer

// Byte-level: codes 0..127 are their own token ids, plus pad and unk.
class CharTokenizer {
public:
    static constexpr Token kPad = 128;
    static constexpr Token kUnk = 129;
    static constexpr int kVocab = 130;

    int vocab() const { return kVocab; }

    // Total on any input; bytes >= 128 become kUnk (counted if requested).
    TokenSeq tokenize(const std::string& text, std::size_t* unk_count = nullptr) const;
    // Inverse on mappable text; pad is skipped, unk renders as 0x1A (SUB).
    std::string detokenize(const TokenSeq& seq) const;
};

// ------------------------------------------------------------- evaluation

struct EvalConfig {
    int window = 100;  // moving-average window k
    int seq_len = 512; // evaluation sequence length L
    int n_seqs = 100;
    std::uint64_t seed = 0;

    void validate() const; // needs 1 <= window < seq_len
};

// Concatenates documents with `sep` between them and chops the stream into
// seq_len-token sequences, deterministically shuffled.  The tail that does
// not fill a sequence is dropped, except when the whole corpus is shorter
// than seq_len: then the single sequence is right-padded with `sep`.
std::vector<TokenSeq> pack_sequences(const std::vector<TokenSeq>& docs, int seq_len, Token sep,
                                     std::uint64_t seed);

// Value at position i covers tokens [i, i+k): exp of the mean negative log
// probability.  Only positions with a full window are emitted, so the result
// has size() - k + 1 entries.
std::vector<double> moving_average_perplexity(const std::vector<double>& probs, int k);

// ------------------------------------------------------------------ tasks

enum class TaskKind { kLookUp, kPermutation };
const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

enum class SamplingMode { kUniform, kFrequencyWeighted };

// Draws task symbols from a pool, uniformly or proportional to weights.
class SymbolSampler {
public:
    static SymbolSampler uniform(TokenSeq pool);
    static SymbolSampler frequency_weighted(TokenSeq pool, std::vector<double> weights);
    // A-Z, 0-9, a-z as their byte tokens.
    static TokenSeq default_pool();

    Token sample(Rng& rng) const;
    TokenSeq sample_distinct(int n, Rng& rng) const;
    const TokenSeq& pool() const { return pool_; }

private:
    SymbolSampler() = default;
    TokenSeq pool_;
    std::vector<double> weights_; // empty = uniform
};

struct TaskInstance {
    TaskKind kind = TaskKind::kLookUp;
    TokenSeq prompt;   // ends exactly where generation starts (after "->")
    TokenSeq expected; // completion tokens
    // generation metadata
    TokenSeq symbols;         // lookup: keys then values; permutation: query symbols
    std::vector<int> pattern; // permutation: output slot -> input position
};

// Byte-exact prompt rendering from explicit tables, shared by the samplers
// below so format tests pin the wire bytes directly.
std::string render_lookup(const TokenSeq& keys, const TokenSeq& values,
                          const std::vector<int>& answered, int final_query);
std::string render_permutation(const std::vector<int>& pattern,
                               const std::vector<TokenSeq>& demos, const TokenSeq& query);
std::string render_permutation_answer(const std::vector<int>& pattern, const TokenSeq& query);

// n_pairs lines "k->v\n" with distinct keys, then (query_count - 1) answered
// query lines and one open query "k->"; expected is that key's value.
TaskInstance gen_lookup(int n_pairs, int query_count, const SymbolSampler& sampler,
                        std::uint64_t seed);

// `demos` lines "s_1 .. s_n->t_1 .. t_m\n" sharing one injective pattern
// (t_j = s_pattern(j)), then a query line cut after "->"; expected applies
// the pattern to the query symbols.  Symbols are distinct within each line,
// so the pattern is recoverable from any single demo.
TaskInstance gen_permutation_task(int seq_length, int pattern_size, int demos,
                                  const SymbolSampler& sampler, std::uint64_t seed);

// Bundled generator settings, mirrored by the [tasks] config section.
struct TaskGenConfig {
    TaskKind kind = TaskKind::kLookUp;
    int n_pairs = 4;
    int query_count = 1;
    int seq_length = 5;   // permutation line length
    int pattern_size = 2; // permutation output length
    int demos = 2;
    SamplingMode sampling = SamplingMode::kUniform;
    std::vector<double> freq_weights; // aligned with default_pool() when weighted
};

TaskInstance gen_task(const TaskGenConfig& cfg, std::uint64_t seed);

// One record per instance: prompt 0x1F expected 0x1E (unit/record
// separators, which cannot occur in task text).
void write_task_file(const std::vector<TaskInstance>& tasks, const std::string& path);
std::vector<TaskInstance> read_task_file(const std::string& path, TaskKind kind);

// ---------------------------------------------------------------- scoring

// Greedy next-token generation surface the scorer drives.
class ModelAdapter {
public:
    virtual ~ModelAdapter() = default;
    virtual TokenSeq generate(const TokenSeq& prompt, int n_tokens) = 0;
    virtual std::string describe() const = 0;
};

// Scoring oracle: returns the expected completion of a known prompt.
class EchoAdapter : public ModelAdapter {
public:
    explicit EchoAdapter(const std::vector<TaskInstance>& tasks);
    TokenSeq generate(const TokenSeq& prompt, int n_tokens) override;
    std::string describe() const override { return "echo"; }

private:
    std::vector<std::pair<TokenSeq, TokenSeq>> known_;
};

class UniformRandomAdapter : public ModelAdapter {
public:
    UniformRandomAdapter(int vocab, std::uint64_t seed);
    TokenSeq generate(const TokenSeq& prompt, int n_tokens) override;
    std::string describe() const override { return "uniform"; }

private:
    int vocab_;
    Rng rng_;
};

// Greedy decoding from a transformer.  Codebook modes draw one fresh
// codebook per generate() call (substreamed on the call counter); embed
// dropout runs its stable path and partial permutation applies none.
template <typename T>
class NeuralAdapter : public ModelAdapter {
public:
    NeuralAdapter(const ModelConfig& cfg, const ParamBuffer<T>* params, std::uint64_t seed);
    TokenSeq generate(const TokenSeq& prompt, int n_tokens) override;
    std::string describe() const override;

private:
    ModelConfig cfg_;
    const ParamBuffer<T>* params_;
    Transformer<T> model_;
    Scratch<T> scratch_;
    std::uint64_t seed_;
    std::uint64_t calls_ = 0;
};

struct TaskScore {
    double token_accuracy = 0.0; // micro-averaged over completion tokens
    double exact_match = 0.0;    // per-instance all-tokens-correct rate
    std::size_t n_tokens = 0;
    int n_instances = 0;
};

TaskScore task_accuracy(ModelAdapter& adapter, const std::vector<TaskInstance>& tasks);

// --------------------------------------------------------- task corpora

// LM training text: independent instances (prompt + completion + newline)
// concatenated until seq_len tokens, deterministic per index.
class TaskSource : public SequenceSource {
public:
    TaskSource(TaskGenConfig cfg, int seq_len, std::uint64_t seed);
    int vocab() const override { return CharTokenizer::kVocab; }
    int seq_len() const override { return seq_len_; }
    TokenSeq next(std::uint64_t index) override;

private:
    TaskGenConfig cfg_;
    int seq_len_;
    std::uint64_t seed_;
};

} // namespace lexi
