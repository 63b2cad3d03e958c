#include "lexi/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lexi {

// --------------------------------------------------------------- tokenizer

TokenSeq CharTokenizer::tokenize(const std::string& text, std::size_t* unk_count) const {
    TokenSeq seq;
    seq.reserve(text.size());
    std::size_t unk = 0;
    for (unsigned char b : text) {
        if (b < 128) {
            seq.push_back(static_cast<Token>(b));
        } else {
            seq.push_back(kUnk);
            ++unk;
        }
    }
    if (unk_count) *unk_count = unk;
    return seq;
}

std::string CharTokenizer::detokenize(const TokenSeq& seq) const {
    std::string text;
    text.reserve(seq.size());
    for (Token t : seq) {
        if (t >= 0 && t < 128) text.push_back(static_cast<char>(t));
        else if (t == kPad) continue;
        else if (t == kUnk) text.push_back('\x1a');
        else throw std::out_of_range("detokenize: token " + std::to_string(t) + " outside vocab");
    }
    return text;
}

// ------------------------------------------------------------- evaluation

void EvalConfig::validate() const {
    if (window < 1 || window >= seq_len)
        throw std::invalid_argument("eval: need 1 <= window < seq_len");
    if (n_seqs < 1) throw std::invalid_argument("eval: n_seqs must be >= 1");
}

std::vector<TokenSeq> pack_sequences(const std::vector<TokenSeq>& docs, int seq_len, Token sep,
                                     std::uint64_t seed) {
    if (seq_len < 2) throw std::invalid_argument("pack_sequences: seq_len must be >= 2");
    if (docs.empty()) throw std::invalid_argument("pack_sequences: empty corpus");
    TokenSeq stream;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        if (i) stream.push_back(sep);
        stream.insert(stream.end(), docs[i].begin(), docs[i].end());
    }
    const std::size_t L = static_cast<std::size_t>(seq_len);
    std::vector<TokenSeq> seqs;
    if (stream.size() < L) {
        stream.resize(L, sep);
        seqs.push_back(std::move(stream));
        return seqs;
    }
    const std::size_t n = stream.size() / L;
    seqs.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        seqs.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i * L),
                          stream.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
    Rng rng(derive_seed(seed, 0x9ACF));
    rng.shuffle(seqs);
    return seqs;
}

std::vector<double> moving_average_perplexity(const std::vector<double>& probs, int k) {
    if (k < 1) throw std::invalid_argument("moving_average_perplexity: window must be >= 1");
    for (double p : probs) {
        if (!(p >= 0.0) || p > 1.0 + 1e-12)
            throw std::invalid_argument("moving_average_perplexity: probabilities must be in [0,1]");
    }
    std::vector<double> out;
    if (probs.size() < static_cast<std::size_t>(k)) return out;
    out.reserve(probs.size() - k + 1);
    for (std::size_t i = 0; i + k <= probs.size(); ++i) {
        double nll = 0.0;
        for (int j = 0; j < k; ++j) nll -= std::log(probs[i + static_cast<std::size_t>(j)]);
        out.push_back(std::exp(nll / k));
    }
    return out;
}

// ------------------------------------------------------------------ tasks

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::kLookUp: return "lookup";
        case TaskKind::kPermutation: return "permutation";
    }
    throw std::logic_error("unreachable task kind");
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "lookup") return TaskKind::kLookUp;
    if (name == "permutation") return TaskKind::kPermutation;
    throw std::invalid_argument("unknown task kind '" + name + "'");
}

SymbolSampler SymbolSampler::uniform(TokenSeq pool) {
    if (pool.empty()) throw std::invalid_argument("symbol pool must be nonempty");
    TokenSeq sorted = pool;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw std::invalid_argument("symbol pool has duplicates");
    for (Token t : pool) {
        if (t < 0 || t >= 128)
            throw std::invalid_argument("symbol pool tokens must be printable byte codes");
    }
    SymbolSampler s;
    s.pool_ = std::move(pool);
    return s;
}

SymbolSampler SymbolSampler::frequency_weighted(TokenSeq pool, std::vector<double> weights) {
    SymbolSampler s = uniform(std::move(pool));
    if (weights.size() != s.pool_.size())
        throw std::invalid_argument("frequency weights must match pool size");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w))
            throw std::invalid_argument("frequency weights must be finite and nonnegative");
        total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("frequency weights sum to zero");
    s.weights_ = std::move(weights);
    return s;
}

TokenSeq SymbolSampler::default_pool() {
    TokenSeq pool;
    for (char c = 'A'; c <= 'Z'; ++c) pool.push_back(static_cast<Token>(c));
    for (char c = '0'; c <= '9'; ++c) pool.push_back(static_cast<Token>(c));
    for (char c = 'a'; c <= 'z'; ++c) pool.push_back(static_cast<Token>(c));
    return pool;
}

Token SymbolSampler::sample(Rng& rng) const {
    if (weights_.empty()) return pool_[rng.next_below(pool_.size())];
    return pool_[rng.next_categorical(weights_)];
}

TokenSeq SymbolSampler::sample_distinct(int n, Rng& rng) const {
    if (n < 1) throw std::invalid_argument("sample_distinct: need n >= 1");
    if (static_cast<std::size_t>(n) > pool_.size())
        throw std::invalid_argument("symbol pool too small for " + std::to_string(n) +
                                    " distinct symbols");
    TokenSeq pool = pool_;
    std::vector<double> weights = weights_;
    TokenSeq out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::size_t j = weights.empty() ? rng.next_below(pool.size())
                                              : rng.next_categorical(weights);
        out.push_back(pool[j]);
        pool[j] = pool.back();
        pool.pop_back();
        if (!weights.empty()) {
            weights[j] = weights.back();
            weights.pop_back();
        }
    }
    return out;
}

namespace {

constexpr std::uint64_t kSaltLookup = 0x700C;
constexpr std::uint64_t kSaltPermTask = 0x9E21;

std::string glyphs_joined(const TokenSeq& toks, char join) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) s.push_back(join);
        s.push_back(static_cast<char>(toks[i]));
    }
    return s;
}

} // namespace

std::string render_lookup(const TokenSeq& keys, const TokenSeq& values,
                          const std::vector<int>& answered, int final_query) {
    if (keys.size() != values.size() || keys.empty())
        throw std::invalid_argument("render_lookup: keys and values must pair up");
    auto check = [&](int i) {
        if (i < 0 || static_cast<std::size_t>(i) >= keys.size())
            throw std::out_of_range("render_lookup: query index out of range");
        return static_cast<std::size_t>(i);
    };
    std::string text;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        text.push_back(static_cast<char>(keys[i]));
        text += "->";
        text.push_back(static_cast<char>(values[i]));
        text.push_back('\n');
    }
    for (int q : answered) {
        const std::size_t j = check(q);
        text.push_back(static_cast<char>(keys[j]));
        text += "->";
        text.push_back(static_cast<char>(values[j]));
        text.push_back('\n');
    }
    text.push_back(static_cast<char>(keys[check(final_query)]));
    text += "->";
    return text;
}

TaskInstance gen_lookup(int n_pairs, int query_count, const SymbolSampler& sampler,
                        std::uint64_t seed) {
    if (n_pairs < 1) throw std::invalid_argument("gen_lookup: n_pairs must be >= 1");
    if (query_count < 1) throw std::invalid_argument("gen_lookup: query_count must be >= 1");
    Rng rng(derive_seed(seed, kSaltLookup));
    const TokenSeq keys = sampler.sample_distinct(n_pairs, rng);
    TokenSeq values;
    values.reserve(static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) values.push_back(sampler.sample(rng));

    std::vector<int> answered;
    for (int q = 0; q + 1 < query_count; ++q)
        answered.push_back(static_cast<int>(rng.next_below(static_cast<std::size_t>(n_pairs))));
    const std::size_t j = rng.next_below(static_cast<std::size_t>(n_pairs));

    CharTokenizer tok;
    TaskInstance inst;
    inst.kind = TaskKind::kLookUp;
    inst.prompt = tok.tokenize(render_lookup(keys, values, answered, static_cast<int>(j)));
    inst.expected = TokenSeq{values[j]};
    inst.symbols = keys;
    inst.symbols.insert(inst.symbols.end(), values.begin(), values.end());
    return inst;
}

namespace {

TokenSeq pattern_outputs(const std::vector<int>& pattern, const TokenSeq& syms) {
    TokenSeq out;
    out.reserve(pattern.size());
    for (int p : pattern) {
        if (p < 0 || static_cast<std::size_t>(p) >= syms.size())
            throw std::out_of_range("pattern position out of range");
        out.push_back(syms[static_cast<std::size_t>(p)]);
    }
    return out;
}

} // namespace

std::string render_permutation(const std::vector<int>& pattern,
                               const std::vector<TokenSeq>& demos, const TokenSeq& query) {
    std::string text;
    for (const TokenSeq& syms : demos) {
        text += glyphs_joined(syms, ' ');
        text += "->";
        text += glyphs_joined(pattern_outputs(pattern, syms), ' ');
        text.push_back('\n');
    }
    text += glyphs_joined(query, ' ');
    text += "->";
    return text;
}

std::string render_permutation_answer(const std::vector<int>& pattern, const TokenSeq& query) {
    return glyphs_joined(pattern_outputs(pattern, query), ' ');
}

TaskInstance gen_permutation_task(int seq_length, int pattern_size, int demos,
                                  const SymbolSampler& sampler, std::uint64_t seed) {
    if (seq_length < 1) throw std::invalid_argument("gen_permutation_task: seq_length must be >= 1");
    if (pattern_size < 1 || pattern_size > seq_length)
        throw std::invalid_argument("gen_permutation_task: pattern size must be in [1, seq_length]");
    if (demos < 1) throw std::invalid_argument("gen_permutation_task: need at least one demo");
    Rng rng(derive_seed(seed, kSaltPermTask));

    std::vector<int> positions(static_cast<std::size_t>(seq_length));
    for (int i = 0; i < seq_length; ++i) positions[static_cast<std::size_t>(i)] = i;
    rng.shuffle(positions);
    std::vector<int> pattern(positions.begin(), positions.begin() + pattern_size);

    std::vector<TokenSeq> demo_syms;
    demo_syms.reserve(static_cast<std::size_t>(demos));
    for (int d = 0; d < demos; ++d) demo_syms.push_back(sampler.sample_distinct(seq_length, rng));
    const TokenSeq query = sampler.sample_distinct(seq_length, rng);

    CharTokenizer tok;
    TaskInstance inst;
    inst.kind = TaskKind::kPermutation;
    inst.prompt = tok.tokenize(render_permutation(pattern, demo_syms, query));
    inst.expected = tok.tokenize(render_permutation_answer(pattern, query));
    inst.symbols = query;
    inst.pattern = std::move(pattern);
    return inst;
}

TaskInstance gen_task(const TaskGenConfig& cfg, std::uint64_t seed) {
    SymbolSampler sampler = cfg.sampling == SamplingMode::kUniform
                                ? SymbolSampler::uniform(SymbolSampler::default_pool())
                                : SymbolSampler::frequency_weighted(SymbolSampler::default_pool(),
                                                                    cfg.freq_weights);
    switch (cfg.kind) {
        case TaskKind::kLookUp:
            return gen_lookup(cfg.n_pairs, cfg.query_count, sampler, seed);
        case TaskKind::kPermutation:
            return gen_permutation_task(cfg.seq_length, cfg.pattern_size, cfg.demos, sampler,
                                        seed);
    }
    throw std::logic_error("unreachable task kind");
}

void write_task_file(const std::vector<TaskInstance>& tasks, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write task file: " + path);
    CharTokenizer tok;
    for (const TaskInstance& t : tasks)
        out << tok.detokenize(t.prompt) << '\x1f' << tok.detokenize(t.expected) << '\x1e';
    out.close();
    if (out.fail()) throw std::runtime_error("task file write failed: " + path);
}

std::vector<TaskInstance> read_task_file(const std::string& path, TaskKind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open task file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();

    std::vector<TaskInstance> tasks;
    CharTokenizer tok;
    std::size_t pos = 0, record = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\x1e', pos);
        if (end == std::string::npos)
            throw std::runtime_error("task file: record " + std::to_string(record) +
                                     " missing record separator");
        const std::string rec = text.substr(pos, end - pos);
        const std::size_t us = rec.find('\x1f');
        if (us == std::string::npos || rec.find('\x1f', us + 1) != std::string::npos)
            throw std::runtime_error("task file: record " + std::to_string(record) +
                                     " needs exactly one unit separator");
        TaskInstance t;
        t.kind = kind;
        t.prompt = tok.tokenize(rec.substr(0, us));
        t.expected = tok.tokenize(rec.substr(us + 1));
        if (t.prompt.empty() || t.expected.empty())
            throw std::runtime_error("task file: record " + std::to_string(record) +
                                     " has an empty field");
        tasks.push_back(std::move(t));
        pos = end + 1;
        ++record;
    }
    return tasks;
}

// ---------------------------------------------------------------- scoring

EchoAdapter::EchoAdapter(const std::vector<TaskInstance>& tasks) {
    known_.reserve(tasks.size());
    for (const TaskInstance& t : tasks) known_.emplace_back(t.prompt, t.expected);
}

TokenSeq EchoAdapter::generate(const TokenSeq& prompt, int n_tokens) {
    for (const auto& [known_prompt, expected] : known_) {
        if (known_prompt != prompt) continue;
        TokenSeq out = expected;
        out.resize(static_cast<std::size_t>(n_tokens), CharTokenizer::kPad);
        return out;
    }
    throw std::invalid_argument("EchoAdapter: prompt not among its known tasks");
}

UniformRandomAdapter::UniformRandomAdapter(int vocab, std::uint64_t seed)
    : vocab_(vocab), rng_(seed) {
    if (vocab < 1) throw std::invalid_argument("UniformRandomAdapter: vocab must be >= 1");
}

TokenSeq UniformRandomAdapter::generate(const TokenSeq&, int n_tokens) {
    TokenSeq out;
    out.reserve(static_cast<std::size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i)
        out.push_back(static_cast<Token>(rng_.next_below(static_cast<std::size_t>(vocab_))));
    return out;
}

template <typename T>
NeuralAdapter<T>::NeuralAdapter(const ModelConfig& cfg, const ParamBuffer<T>* params,
                                std::uint64_t seed)
    : cfg_(cfg), params_(params), model_(cfg), seed_(seed) {
    if (!params_) throw std::invalid_argument("NeuralAdapter: null parameters");
    if (params_->data.size() != param_count(cfg_))
        throw std::invalid_argument("NeuralAdapter: parameter buffer does not match config");
}

template <typename T>
std::string NeuralAdapter<T>::describe() const {
    return std::string("neural-") + mode_name(cfg_.mode);
}

template <typename T>
TokenSeq NeuralAdapter<T>::generate(const TokenSeq& prompt, int n_tokens) {
    if (prompt.empty()) throw std::invalid_argument("NeuralAdapter: empty prompt");
    const std::uint64_t call = calls_++;
    std::vector<T> codebook;
    if (cfg_.uses_codebook())
        codebook = sample_sequence_embedding<T>(derive_seed(seed_, 0xADA), call, cfg_);
    TokenSeq ctx = prompt;
    TokenSeq out;
    out.reserve(static_cast<std::size_t>(n_tokens));
    std::vector<T> logits;
    std::vector<std::uint8_t> coins;
    for (int i = 0; i < n_tokens; ++i) {
        if (static_cast<int>(ctx.size()) > cfg_.max_seq_len)
            ctx.erase(ctx.begin(),
                      ctx.end() - static_cast<std::ptrdiff_t>(cfg_.max_seq_len));
        const std::uint8_t* cn = nullptr;
        if (cfg_.mode == EmbeddingMode::kEmbedDropout) {
            coins.assign(ctx.size(), 0); // stable path at inference
            cn = coins.data();
        }
        model_.forward(*params_, ctx, codebook.empty() ? nullptr : codebook.data(), cn, logits,
                       scratch_);
        const T* row = logits.data() + (ctx.size() - 1) * static_cast<std::size_t>(cfg_.vocab);
        Token best = 0;
        for (Token v = 1; v < cfg_.vocab; ++v)
            if (row[v] > row[best]) best = v;
        out.push_back(best);
        ctx.push_back(best);
    }
    return out;
}

TaskScore task_accuracy(ModelAdapter& adapter, const std::vector<TaskInstance>& tasks) {
    if (tasks.empty()) throw std::invalid_argument("task_accuracy: no tasks");
    TaskScore score;
    std::size_t hits = 0;
    int exact = 0;
    for (const TaskInstance& t : tasks) {
        const TokenSeq out = adapter.generate(t.prompt, static_cast<int>(t.expected.size()));
        bool all = out.size() >= t.expected.size();
        for (std::size_t i = 0; i < t.expected.size(); ++i) {
            const bool hit = i < out.size() && out[i] == t.expected[i];
            hits += hit ? 1 : 0;
            all = all && hit;
        }
        exact += all ? 1 : 0;
        score.n_tokens += t.expected.size();
    }
    score.n_instances = static_cast<int>(tasks.size());
    score.token_accuracy = static_cast<double>(hits) / static_cast<double>(score.n_tokens);
    score.exact_match = static_cast<double>(exact) / static_cast<double>(score.n_instances);
    return score;
}

// --------------------------------------------------------- task corpora

TaskSource::TaskSource(TaskGenConfig cfg, int seq_len, std::uint64_t seed)
    : cfg_(std::move(cfg)), seq_len_(seq_len), seed_(seed) {
    if (seq_len_ < 2) throw std::invalid_argument("TaskSource: seq_len must be >= 2");
    gen_task(cfg_, 0); // validate the generator settings up front
}

TokenSeq TaskSource::next(std::uint64_t index) {
    Rng rng = Rng::substream(seed_, index);
    TokenSeq seq;
    seq.reserve(static_cast<std::size_t>(seq_len_));
    while (seq.size() < static_cast<std::size_t>(seq_len_)) {
        const TaskInstance inst = gen_task(cfg_, rng.next_u64());
        seq.insert(seq.end(), inst.prompt.begin(), inst.prompt.end());
        seq.insert(seq.end(), inst.expected.begin(), inst.expected.end());
        seq.push_back('\n');
    }
    seq.resize(static_cast<std::size_t>(seq_len_));
    return seq;
}

template class NeuralAdapter<float>;
template class NeuralAdapter<double>;

} // namespace lexi
