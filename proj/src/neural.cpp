#include "lexi/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lexi/csv.hpp"

namespace lexi {

// ------------------------------------------------------------ mode / config

const char* mode_name(EmbeddingMode mode) {
    switch (mode) {
        case EmbeddingMode::kLearned: return "learned";
        case EmbeddingMode::kGaussianPerSeq: return "gaussian";
        case EmbeddingMode::kEmbedDropout: return "embed_dropout";
        case EmbeddingMode::kPartialPermutation: return "partial_permutation";
    }
    throw std::logic_error("unreachable embedding mode");
}

EmbeddingMode mode_from_name(const std::string& name) {
    if (name == "learned") return EmbeddingMode::kLearned;
    if (name == "gaussian") return EmbeddingMode::kGaussianPerSeq;
    if (name == "embed_dropout") return EmbeddingMode::kEmbedDropout;
    if (name == "partial_permutation") return EmbeddingMode::kPartialPermutation;
    throw std::invalid_argument("unknown embedding mode '" + name + "'");
}

void ModelConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
    if (width < 1 || heads < 1 || head_width < 1 || ffn_width < 1 || layers < 1)
        throw std::invalid_argument("config: widths, heads and layers must be >= 1");
    if (width != heads * head_width)
        throw std::invalid_argument("config: width (" + std::to_string(width) +
                                    ") != heads*head_width (" + std::to_string(heads * head_width) + ")");
    if (max_seq_len < 2) throw std::invalid_argument("config: max_seq_len must be >= 2");
    if (relpos_buckets < 2) throw std::invalid_argument("config: relpos_buckets must be >= 2");
    if (!(p_mix >= 0.0 && p_mix <= 1.0))
        throw std::invalid_argument("config: p_mix must be in [0,1]");
}

namespace {
std::string real17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}
} // namespace

std::string ModelConfig::serialize() const {
    std::ostringstream o;
    o << "vocab=" << vocab << "\n"
      << "width=" << width << "\n"
      << "layers=" << layers << "\n"
      << "heads=" << heads << "\n"
      << "head_width=" << head_width << "\n"
      << "ffn_width=" << ffn_width << "\n"
      << "max_seq_len=" << max_seq_len << "\n"
      << "relpos_buckets=" << relpos_buckets << "\n"
      << "mode=" << mode_name(mode) << "\n"
      << "p_mix=" << real17(p_mix) << "\n"
      << "scale_gaussian=" << (scale_gaussian ? 1 : 0) << "\n"
      << "normalize_mixed_rows=" << (normalize_mixed_rows ? 1 : 0) << "\n"
      << "scale_bias_readout=" << (scale_bias_readout ? 1 : 0) << "\n"
      << "precision=" << (precision == Precision::kF32 ? "f32" : "f64") << "\n";
    return o.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    int seen = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config echo: bad line '" + line + "'");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        ++seen;
        if (key == "vocab") cfg.vocab = std::stoi(val);
        else if (key == "width") cfg.width = std::stoi(val);
        else if (key == "layers") cfg.layers = std::stoi(val);
        else if (key == "heads") cfg.heads = std::stoi(val);
        else if (key == "head_width") cfg.head_width = std::stoi(val);
        else if (key == "ffn_width") cfg.ffn_width = std::stoi(val);
        else if (key == "max_seq_len") cfg.max_seq_len = std::stoi(val);
        else if (key == "relpos_buckets") cfg.relpos_buckets = std::stoi(val);
        else if (key == "mode") cfg.mode = mode_from_name(val);
        else if (key == "p_mix") cfg.p_mix = std::stod(val);
        else if (key == "scale_gaussian") cfg.scale_gaussian = val == "1";
        else if (key == "normalize_mixed_rows") cfg.normalize_mixed_rows = val == "1";
        else if (key == "scale_bias_readout") cfg.scale_bias_readout = val == "1";
        else if (key == "precision") {
            if (val == "f32") cfg.precision = Precision::kF32;
            else if (val == "f64") cfg.precision = Precision::kF64;
            else throw std::invalid_argument("config echo: unknown precision '" + val + "'");
        } else {
            throw std::invalid_argument("config echo: unknown key '" + key + "'");
        }
    }
    if (seen != 14) throw std::invalid_argument("config echo: expected 14 keys, got " + std::to_string(seen));
    cfg.validate();
    return cfg;
}

bool ModelConfig::operator==(const ModelConfig& o) const {
    return vocab == o.vocab && width == o.width && layers == o.layers && heads == o.heads &&
           head_width == o.head_width && ffn_width == o.ffn_width && max_seq_len == o.max_seq_len &&
           relpos_buckets == o.relpos_buckets && mode == o.mode && p_mix == o.p_mix &&
           scale_gaussian == o.scale_gaussian && normalize_mixed_rows == o.normalize_mixed_rows &&
           scale_bias_readout == o.scale_bias_readout && precision == o.precision;
}

// --------------------------------------------------------------- parameters

std::vector<TensorSpec> param_layout(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<TensorSpec> layout;
    std::size_t offset = 0;
    auto add = [&](const std::string& name, std::vector<int> shape) {
        std::size_t count = 1;
        for (int s : shape) count *= static_cast<std::size_t>(s);
        layout.push_back(TensorSpec{name, std::move(shape), offset, count});
        offset += count;
    };
    const int W = cfg.width, F = cfg.ffn_width;
    if (cfg.uses_learned_table()) add("embed", {cfg.vocab, W});
    add("emb_scale", {W});
    add("emb_bias", {W});
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "l" + std::to_string(l) + ".";
        add(p + "ln1_g", {W});
        add(p + "wq", {W, W});
        add(p + "wk", {W, W});
        add(p + "wv", {W, W});
        add(p + "wo", {W, W});
        add(p + "ln2_g", {W});
        add(p + "w1", {F, W});
        add(p + "w2", {W, F});
    }
    add("final_ln_g", {W});
    add("relbias", {cfg.relpos_buckets, cfg.heads});
    return layout;
}

std::size_t param_count(const ModelConfig& cfg) {
    const auto layout = param_layout(cfg);
    return layout.back().offset + layout.back().count;
}

template <typename T>
T* ParamBuffer<T>::tensor(const std::string& name) {
    return data.data() + spec(name).offset;
}
template <typename T>
const T* ParamBuffer<T>::tensor(const std::string& name) const {
    return data.data() + spec(name).offset;
}
template <typename T>
const TensorSpec& ParamBuffer<T>::spec(const std::string& name) const {
    for (const TensorSpec& s : layout) {
        if (s.name == name) return s;
    }
    throw std::invalid_argument("no tensor named '" + name + "'");
}
template <typename T>
void ParamBuffer<T>::zero() {
    std::fill(data.begin(), data.end(), T(0));
}

template <typename T>
ParamBuffer<T> make_params(const ModelConfig& cfg) {
    ParamBuffer<T> p;
    p.layout = param_layout(cfg);
    p.data.assign(p.layout.back().offset + p.layout.back().count, T(0));
    return p;
}

template <typename T>
ParamBuffer<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ParamBuffer<T> p = make_params<T>(cfg);
    Rng rng(derive_seed(seed, 0x1417));
    const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_width));
    for (const TensorSpec& s : p.layout) {
        T* t = p.data.data() + s.offset;
        // fan-in-scaled normals for matrices, ones for gains/scale, zeros
        // for biases and the relative-position table
        double std_dev = 0.0;
        double constant = 0.0;
        if (s.name == "embed") std_dev = inv_sqrt_w;
        else if (s.name.size() > 3 && s.name.compare(s.name.size() - 3, 3, ".w2") == 0) std_dev = inv_sqrt_f;
        else if (s.name.find(".w") != std::string::npos) std_dev = inv_sqrt_w;
        else if (s.name == "emb_scale" || s.name.find("ln") != std::string::npos) constant = 1.0;
        // emb_bias and relbias stay zero
        if (std_dev > 0.0) {
            for (std::size_t i = 0; i < s.count; ++i) t[i] = static_cast<T>(rng.next_gauss() * std_dev);
        } else if (constant != 0.0) {
            for (std::size_t i = 0; i < s.count; ++i) t[i] = static_cast<T>(constant);
        }
    }
    return p;
}

template <typename T>
std::vector<T> sample_sequence_embedding(std::uint64_t seed, std::uint64_t sequence_index,
                                         const ModelConfig& cfg) {
    Rng rng = Rng::substream(derive_seed(seed, 0xE0B), sequence_index);
    std::vector<T> e(static_cast<std::size_t>(cfg.vocab) * static_cast<std::size_t>(cfg.width));
    for (T& x : e) x = static_cast<T>(rng.next_gauss());
    return e;
}

std::vector<std::uint8_t> sample_mix_coins(std::uint64_t seed, std::uint64_t sequence_index,
                                           std::size_t n, double p_mix) {
    Rng rng = Rng::substream(derive_seed(seed, 0xC01), sequence_index);
    std::vector<std::uint8_t> coins(n);
    for (std::uint8_t& c : coins) c = rng.next_double() < p_mix ? 1 : 0;
    return coins;
}

TokenSeq apply_partial_permutation(const TokenSeq& tokens, const Permutation& pi, double p_mix,
                                   std::uint64_t seed) {
    if (!(p_mix >= 0.0 && p_mix <= 1.0))
        throw std::invalid_argument("apply_partial_permutation: p_mix must be in [0,1]");
    Rng rng(derive_seed(seed, 0xB9));
    TokenSeq out;
    out.reserve(tokens.size());
    for (Token t : tokens) out.push_back(rng.next_double() < p_mix ? pi(t) : t);
    return out;
}

// ---------------------------------------------------------- relpos buckets

// Log-spaced distance buckets as used with T5 relative attention, causal
// variant.  The first half of the buckets covers distances 0..B/2-1 exactly;
// the rest are log-spaced up to max_distance, and everything farther shares
// the last bucket:
//   bucket(n) = n                                        if n < B/2
//             = B/2 + floor( log(n/(B/2)) / log(max/(B/2)) * B/2 )   else
// capped at B-1.
int relpos_bucket(int distance, int num_buckets, int max_distance) {
    if (distance < 0) throw std::invalid_argument("relpos_bucket: causal distances are >= 0");
    if (num_buckets < 2 || max_distance < num_buckets)
        throw std::invalid_argument("relpos_bucket: need num_buckets >= 2 and max_distance >= num_buckets");
    const int exact = num_buckets / 2;
    if (distance < exact) return distance;
    const double ratio = std::log(static_cast<double>(distance) / exact) /
                         std::log(static_cast<double>(max_distance) / exact);
    const int bucket = exact + static_cast<int>(ratio * exact);
    return std::min(bucket, num_buckets - 1);
}

// ----------------------------------------------------------- small kernels

namespace {

template <typename T>
inline T dot(const T* a, const T* b, int n) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[n x O] = x[n x I] * M^T  with M row-major [O x I]
template <typename T>
void mm_xmt(T* y, const T* x, const T* m, int n, int in, int out) {
    for (int t = 0; t < n; ++t) {
        const T* xt = x + static_cast<std::size_t>(t) * in;
        T* yt = y + static_cast<std::size_t>(t) * out;
        for (int o = 0; o < out; ++o) yt[o] = dot(xt, m + static_cast<std::size_t>(o) * in, in);
    }
}

// y[n x I] = dy[n x O] * M  with M row-major [O x I]
template <typename T>
void mm_xm(T* y, const T* dy, const T* m, int n, int in, int out) {
    for (int t = 0; t < n; ++t) {
        const T* dyt = dy + static_cast<std::size_t>(t) * out;
        T* yt = y + static_cast<std::size_t>(t) * in;
        std::fill(yt, yt + in, T(0));
        for (int o = 0; o < out; ++o) axpy(dyt[o], m + static_cast<std::size_t>(o) * in, yt, in);
    }
}

// dM[O x I] += dy^T * x
template <typename T>
void acc_mt(T* dm, const T* dy, const T* x, int n, int in, int out) {
    for (int t = 0; t < n; ++t) {
        const T* dyt = dy + static_cast<std::size_t>(t) * out;
        const T* xt = x + static_cast<std::size_t>(t) * in;
        for (int o = 0; o < out; ++o) axpy(dyt[o], xt, dm + static_cast<std::size_t>(o) * in, in);
    }
}

constexpr double kNormEps = 1e-6;

// y = (x / rms(x)) .* g, returns 1/rms
template <typename T>
T rmsnorm_fwd(const T* x, const T* g, T* y, int w) {
    T ms = 0;
    for (int i = 0; i < w; ++i) ms += x[i] * x[i];
    const T ir = T(1) / std::sqrt(ms / w + T(kNormEps));
    for (int i = 0; i < w; ++i) y[i] = x[i] * ir * g[i];
    return ir;
}

// dy -> dx (+=), dg (+=)
template <typename T>
void rmsnorm_bwd(const T* x, T ir, const T* g, const T* dy, T* dx, T* dg, int w) {
    T acc = 0;
    for (int i = 0; i < w; ++i) {
        const T xhat = x[i] * ir;
        dg[i] += dy[i] * xhat;
        acc += dy[i] * g[i] * xhat;
    }
    acc /= w;
    for (int i = 0; i < w; ++i) dx[i] += ir * (dy[i] * g[i] - x[i] * ir * acc);
}

// zero-mean unit-variance normalisation of one row (EmbedDropout mix)
template <typename T>
void layernorm_fwd(const T* x, T* y, int w, T& mean_out, T& inv_std_out) {
    T mean = 0;
    for (int i = 0; i < w; ++i) mean += x[i];
    mean /= w;
    T var = 0;
    for (int i = 0; i < w; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= w;
    const T is = T(1) / std::sqrt(var + T(kNormEps));
    for (int i = 0; i < w; ++i) y[i] = (x[i] - mean) * is;
    mean_out = mean;
    inv_std_out = is;
}

template <typename T>
void layernorm_bwd(const T* y, T is, const T* dy, T* dx_add, int w) {
    T mean_dy = 0, mean_dyy = 0;
    for (int i = 0; i < w; ++i) {
        mean_dy += dy[i];
        mean_dyy += dy[i] * y[i];
    }
    mean_dy /= w;
    mean_dyy /= w;
    for (int i = 0; i < w; ++i) dx_add[i] += is * (dy[i] - mean_dy - y[i] * mean_dyy);
}

constexpr double kGeluC = 0.797884560802865355;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
inline T gelu(T x) {
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x) {
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    const T th = std::tanh(u);
    return T(0.5) * (T(1) + th) +
           T(0.5) * x * (T(1) - th * th) * T(kGeluC) * (T(1) + T(3) * T(kGeluA) * x * x);
}

template <typename T>
void resize_scratch(Scratch<T>& s, const ModelConfig& cfg, int n) {
    const std::size_t nw = static_cast<std::size_t>(n) * cfg.width;
    const std::size_t nf = static_cast<std::size_t>(n) * cfg.ffn_width;
    const std::size_t nd = static_cast<std::size_t>(n) * cfg.vocab;
    const std::size_t att = static_cast<std::size_t>(cfg.heads) * n * n;
    auto fit = [](std::vector<T>& v, std::size_t sz) { if (v.size() < sz) v.resize(sz); };
    fit(s.e_cand, nw);
    fit(s.e_used, nw);
    fit(s.ln_mean, static_cast<std::size_t>(n));
    fit(s.ln_inv_std, static_cast<std::size_t>(n));
    fit(s.x, nw);
    fit(s.xn_final, nw);
    fit(s.inv_rms_final, static_cast<std::size_t>(n));
    fit(s.r_eff, static_cast<std::size_t>(cfg.vocab) * cfg.width);
    if (static_cast<int>(s.layers.size()) < cfg.layers) s.layers.resize(cfg.layers);
    for (auto& l : s.layers) {
        fit(l.x_in1, nw); fit(l.xn1, nw); fit(l.q, nw); fit(l.k, nw); fit(l.v, nw);
        fit(l.att, att); fit(l.ctx, nw); fit(l.x_in2, nw); fit(l.xn2, nw);
        fit(l.h_pre, nf); fit(l.h_act, nf);
        fit(l.inv_rms1, static_cast<std::size_t>(n));
        fit(l.inv_rms2, static_cast<std::size_t>(n));
    }
    fit(s.dlogits, nd);
    fit(s.dx, nw);
    fit(s.dxn, nw);
    fit(s.dq, nw);
    fit(s.dk, nw);
    fit(s.dv, nw);
    fit(s.dctx, nw);
    fit(s.dh, nf);
    fit(s.dr, static_cast<std::size_t>(cfg.vocab) * cfg.width);
    fit(s.row, static_cast<std::size_t>(n));
}

} // namespace

// -------------------------------------------------------------- Transformer

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    bucket_of_.resize(static_cast<std::size_t>(cfg_.max_seq_len));
    for (int dist = 0; dist < cfg_.max_seq_len; ++dist)
        bucket_of_[static_cast<std::size_t>(dist)] = relpos_bucket(dist, cfg_.relpos_buckets);
}

template <typename T>
void Transformer<T>::check_inputs(const TokenSeq& tokens, const T* codebook,
                                  const std::uint8_t* coins) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
        throw std::invalid_argument("forward: sequence of length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (Token t : tokens) {
        if (t < 0 || t >= cfg_.vocab)
            throw std::out_of_range("forward: token " + std::to_string(t) +
                                    " outside vocab of size " + std::to_string(cfg_.vocab));
    }
    if (cfg_.uses_codebook() && codebook == nullptr)
        throw std::invalid_argument(std::string("forward: mode ") + mode_name(cfg_.mode) +
                                    " requires a per-sequence codebook");
    if (cfg_.mode == EmbeddingMode::kEmbedDropout && coins == nullptr)
        throw std::invalid_argument("forward: embed_dropout requires per-token mix coins");
}

template <typename T>
void Transformer<T>::run_forward(const ParamBuffer<T>& params, const TokenSeq& tokens,
                                 const T* codebook, const std::uint8_t* coins,
                                 std::vector<T>& logits_out, Scratch<T>& scratch) const {
    check_inputs(tokens, codebook, coins);
    const int n = static_cast<int>(tokens.size());
    const int W = cfg_.width, H = cfg_.heads, Dh = cfg_.head_width, F = cfg_.ffn_width,
              d = cfg_.vocab;
    resize_scratch(scratch, cfg_, n);
    logits_out.resize(static_cast<std::size_t>(n) * d);

    const T* embed = cfg_.uses_learned_table() ? params.tensor("embed") : nullptr;
    const T* es = params.tensor("emb_scale");
    const T* eb = params.tensor("emb_bias");
    const T cb_gain = cfg_.scale_gaussian ? T(1) / std::sqrt(static_cast<T>(W)) : T(1);
    const bool normalize = cfg_.mode == EmbeddingMode::kEmbedDropout && cfg_.normalize_mixed_rows;

    // ---- embedding
    for (int t = 0; t < n; ++t) {
        const std::size_t off = static_cast<std::size_t>(t) * W;
        const Token tok = tokens[static_cast<std::size_t>(t)];
        T* cand = scratch.e_cand.data() + off;
        switch (cfg_.mode) {
            case EmbeddingMode::kLearned:
            case EmbeddingMode::kPartialPermutation:
                std::copy_n(embed + static_cast<std::size_t>(tok) * W, W, cand);
                break;
            case EmbeddingMode::kGaussianPerSeq:
                for (int w = 0; w < W; ++w) cand[w] = codebook[static_cast<std::size_t>(tok) * W + w] * cb_gain;
                break;
            case EmbeddingMode::kEmbedDropout:
                if (coins[static_cast<std::size_t>(t)]) {
                    for (int w = 0; w < W; ++w) cand[w] = codebook[static_cast<std::size_t>(tok) * W + w] * cb_gain;
                } else {
                    std::copy_n(embed + static_cast<std::size_t>(tok) * W, W, cand);
                }
                break;
        }
        T* used = scratch.e_used.data() + off;
        if (normalize) {
            layernorm_fwd(cand, used, W, scratch.ln_mean[static_cast<std::size_t>(t)],
                          scratch.ln_inv_std[static_cast<std::size_t>(t)]);
        } else {
            std::copy_n(cand, W, used);
        }
        T* x = scratch.x.data() + off;
        for (int w = 0; w < W; ++w) x[w] = used[w] * es[w] + eb[w];
    }

    // ---- decoder stack
    const T* relbias = params.tensor("relbias");
    const T att_scale = T(1) / std::sqrt(static_cast<T>(Dh));
    std::vector<T>& score_row = scratch.row;
    for (int l = 0; l < cfg_.layers; ++l) {
        auto& lc = scratch.layers[static_cast<std::size_t>(l)];
        const std::string p = "l" + std::to_string(l) + ".";
        const T* g1 = params.tensor(p + "ln1_g");
        const T* wq = params.tensor(p + "wq");
        const T* wk = params.tensor(p + "wk");
        const T* wv = params.tensor(p + "wv");
        const T* wo = params.tensor(p + "wo");
        const T* g2 = params.tensor(p + "ln2_g");
        const T* w1 = params.tensor(p + "w1");
        const T* w2 = params.tensor(p + "w2");

        std::copy_n(scratch.x.data(), static_cast<std::size_t>(n) * W, lc.x_in1.data());
        for (int t = 0; t < n; ++t)
            lc.inv_rms1[static_cast<std::size_t>(t)] =
                rmsnorm_fwd(lc.x_in1.data() + static_cast<std::size_t>(t) * W, g1,
                            lc.xn1.data() + static_cast<std::size_t>(t) * W, W);
        mm_xmt(lc.q.data(), lc.xn1.data(), wq, n, W, W);
        mm_xmt(lc.k.data(), lc.xn1.data(), wk, n, W, W);
        mm_xmt(lc.v.data(), lc.xn1.data(), wv, n, W, W);

        std::fill(lc.att.begin(), lc.att.begin() + static_cast<std::size_t>(H) * n * n, T(0));
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            T* att_h = lc.att.data() + static_cast<std::size_t>(h) * n * n;
            for (int i = 0; i < n; ++i) {
                const T* qi = lc.q.data() + static_cast<std::size_t>(i) * W + hoff;
                T best = -std::numeric_limits<T>::infinity();
                for (int j = 0; j <= i; ++j) {
                    const T s = att_scale * dot(qi, lc.k.data() + static_cast<std::size_t>(j) * W + hoff, Dh) +
                                relbias[static_cast<std::size_t>(bucket_of_[static_cast<std::size_t>(i - j)]) * H + h];
                    score_row[static_cast<std::size_t>(j)] = s;
                    best = std::max(best, s);
                }
                T denom = 0;
                for (int j = 0; j <= i; ++j) {
                    const T e = std::exp(score_row[static_cast<std::size_t>(j)] - best);
                    score_row[static_cast<std::size_t>(j)] = e;
                    denom += e;
                }
                T* ctx_i = lc.ctx.data() + static_cast<std::size_t>(i) * W + hoff;
                std::fill(ctx_i, ctx_i + Dh, T(0));
                T* att_row = att_h + static_cast<std::size_t>(i) * n;
                for (int j = 0; j <= i; ++j) {
                    const T a = score_row[static_cast<std::size_t>(j)] / denom;
                    att_row[j] = a;
                    axpy(a, lc.v.data() + static_cast<std::size_t>(j) * W + hoff, ctx_i, Dh);
                }
            }
        }
        // attn output + residual
        for (int t = 0; t < n; ++t) {
            const T* ctx_t = lc.ctx.data() + static_cast<std::size_t>(t) * W;
            T* x_t = scratch.x.data() + static_cast<std::size_t>(t) * W;
            for (int o = 0; o < W; ++o) x_t[o] += dot(ctx_t, wo + static_cast<std::size_t>(o) * W, W);
        }

        std::copy_n(scratch.x.data(), static_cast<std::size_t>(n) * W, lc.x_in2.data());
        for (int t = 0; t < n; ++t)
            lc.inv_rms2[static_cast<std::size_t>(t)] =
                rmsnorm_fwd(lc.x_in2.data() + static_cast<std::size_t>(t) * W, g2,
                            lc.xn2.data() + static_cast<std::size_t>(t) * W, W);
        mm_xmt(lc.h_pre.data(), lc.xn2.data(), w1, n, W, F);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * F; ++i)
            lc.h_act[i] = gelu(lc.h_pre[i]);
        for (int t = 0; t < n; ++t) {
            const T* ha = lc.h_act.data() + static_cast<std::size_t>(t) * F;
            T* x_t = scratch.x.data() + static_cast<std::size_t>(t) * W;
            for (int o = 0; o < W; ++o) x_t[o] += dot(ha, w2 + static_cast<std::size_t>(o) * F, F);
        }
    }

    // ---- final norm and readout
    const T* gf = params.tensor("final_ln_g");
    for (int t = 0; t < n; ++t)
        scratch.inv_rms_final[static_cast<std::size_t>(t)] =
            rmsnorm_fwd(scratch.x.data() + static_cast<std::size_t>(t) * W, gf,
                        scratch.xn_final.data() + static_cast<std::size_t>(t) * W, W);

    T* r_eff = scratch.r_eff.data();
    for (int v = 0; v < d; ++v) {
        const T* base = cfg_.uses_learned_table() ? embed + static_cast<std::size_t>(v) * W
                                                  : codebook + static_cast<std::size_t>(v) * W;
        T* row = r_eff + static_cast<std::size_t>(v) * W;
        const T gain = cfg_.uses_learned_table() ? T(1) : cb_gain;
        if (cfg_.scale_bias_readout) {
            for (int w = 0; w < W; ++w) row[w] = base[w] * gain * es[w] + eb[w];
        } else if (gain != T(1)) {
            for (int w = 0; w < W; ++w) row[w] = base[w] * gain;
        } else {
            std::copy_n(base, W, row);
        }
    }
    mm_xmt(logits_out.data(), scratch.xn_final.data(), r_eff, n, W, d);
}

template <typename T>
void Transformer<T>::forward(const ParamBuffer<T>& params, const TokenSeq& tokens,
                             const T* codebook, const std::uint8_t* coins,
                             std::vector<T>& logits_out, Scratch<T>& scratch) const {
    run_forward(params, tokens, codebook, coins, logits_out, scratch);
}

template <typename T>
void Transformer<T>::forward(const ParamBuffer<T>& params, const TokenSeq& tokens,
                             const T* codebook, const std::uint8_t* coins,
                             std::vector<T>& logits_out) const {
    Scratch<T> scratch;
    run_forward(params, tokens, codebook, coins, logits_out, scratch);
}

template <typename T>
void Transformer<T>::forward_acts(const ParamBuffer<T>& params, const TokenSeq& tokens,
                                  const T* codebook, const std::uint8_t* coins,
                                  std::vector<T>& logits_out, std::vector<T>& acts_out,
                                  Scratch<T>& scratch) const {
    run_forward(params, tokens, codebook, coins, logits_out, scratch);
    const std::size_t nw = tokens.size() * static_cast<std::size_t>(cfg_.width);
    acts_out.assign(scratch.xn_final.begin(), scratch.xn_final.begin() + static_cast<std::ptrdiff_t>(nw));
}

// Backward pass.  Assumes run_forward has just filled `scratch` for these
// inputs and that scratch.dlogits holds dLoss/dlogits.
template <typename T>
void Transformer<T>::run_backward(const ParamBuffer<T>& params, const TokenSeq& tokens,
                                  const T* codebook, const std::uint8_t* coins,
                                  ParamBuffer<T>& grads, Scratch<T>& scratch) const {
    const int n = static_cast<int>(tokens.size());
    const int W = cfg_.width, H = cfg_.heads, Dh = cfg_.head_width, F = cfg_.ffn_width,
              d = cfg_.vocab;
    const T* es = params.tensor("emb_scale");
    const T cb_gain = cfg_.scale_gaussian ? T(1) / std::sqrt(static_cast<T>(W)) : T(1);
    const bool normalize = cfg_.mode == EmbeddingMode::kEmbedDropout && cfg_.normalize_mixed_rows;

    // ---- readout
    // dr = dlogits^T * xn_final ; dxn = dlogits * r_eff
    std::fill(scratch.dr.begin(), scratch.dr.begin() + static_cast<std::size_t>(d) * W, T(0));
    acc_mt(scratch.dr.data(), scratch.dlogits.data(), scratch.xn_final.data(), n, W, d);
    mm_xm(scratch.dxn.data(), scratch.dlogits.data(), scratch.r_eff.data(), n, W, d);

    {
        const T* embed = cfg_.uses_learned_table() ? params.tensor("embed") : nullptr;
        T* d_embed = cfg_.uses_learned_table() ? grads.tensor("embed") : nullptr;
        T* d_es = grads.tensor("emb_scale");
        T* d_eb = grads.tensor("emb_bias");
        const T* eb = params.tensor("emb_bias");
        (void)eb;
        for (int v = 0; v < d; ++v) {
            const T* drow = scratch.dr.data() + static_cast<std::size_t>(v) * W;
            const T* base = cfg_.uses_learned_table() ? embed + static_cast<std::size_t>(v) * W
                                                      : codebook + static_cast<std::size_t>(v) * W;
            if (cfg_.scale_bias_readout) {
                for (int w = 0; w < W; ++w) {
                    d_es[w] += drow[w] * base[w] * (cfg_.uses_learned_table() ? T(1) : cb_gain);
                    d_eb[w] += drow[w];
                }
                if (d_embed) {
                    T* de = d_embed + static_cast<std::size_t>(v) * W;
                    for (int w = 0; w < W; ++w) de[w] += drow[w] * es[w];
                }
            } else if (d_embed) {
                axpy(T(1), drow, d_embed + static_cast<std::size_t>(v) * W, W);
            }
            // codebook rows are noise, not parameters: no gradient
        }
    }

    // ---- final norm
    const T* gf = params.tensor("final_ln_g");
    T* d_gf = grads.tensor("final_ln_g");
    std::fill(scratch.dx.begin(), scratch.dx.begin() + static_cast<std::size_t>(n) * W, T(0));
    for (int t = 0; t < n; ++t)
        rmsnorm_bwd(scratch.x.data() + static_cast<std::size_t>(t) * W,
                    scratch.inv_rms_final[static_cast<std::size_t>(t)], gf,
                    scratch.dxn.data() + static_cast<std::size_t>(t) * W,
                    scratch.dx.data() + static_cast<std::size_t>(t) * W, d_gf, W);
    // NOTE: scratch.x still holds the final-layer output, which is exactly
    // what the final norm consumed.

    // ---- layers in reverse
    const T att_scale = T(1) / std::sqrt(static_cast<T>(Dh));
    T* d_relbias = grads.tensor("relbias");
    std::vector<T>& dp_row = scratch.row;
    for (int l = cfg_.layers - 1; l >= 0; --l) {
        auto& lc = scratch.layers[static_cast<std::size_t>(l)];
        const std::string p = "l" + std::to_string(l) + ".";
        const T* g1 = params.tensor(p + "ln1_g");
        const T* wq = params.tensor(p + "wq");
        const T* wk = params.tensor(p + "wk");
        const T* wv = params.tensor(p + "wv");
        const T* wo = params.tensor(p + "wo");
        const T* g2 = params.tensor(p + "ln2_g");
        const T* w1 = params.tensor(p + "w1");
        const T* w2 = params.tensor(p + "w2");
        T* d_g1 = grads.tensor(p + "ln1_g");
        T* d_wq = grads.tensor(p + "wq");
        T* d_wk = grads.tensor(p + "wk");
        T* d_wv = grads.tensor(p + "wv");
        T* d_wo = grads.tensor(p + "wo");
        T* d_g2 = grads.tensor(p + "ln2_g");
        T* d_w1 = grads.tensor(p + "w1");
        T* d_w2 = grads.tensor(p + "w2");

        // ffn: x_out = x_in2 + W2 gelu(W1 xn2); dx currently = d x_out
        // dh = (dx * W2) .* gelu'
        mm_xm(scratch.dh.data(), scratch.dx.data(), w2, n, F, W);
        acc_mt(d_w2, scratch.dx.data(), lc.h_act.data(), n, F, W);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * F; ++i)
            scratch.dh[i] *= gelu_grad(lc.h_pre[i]);
        mm_xm(scratch.dxn.data(), scratch.dh.data(), w1, n, W, F);
        acc_mt(d_w1, scratch.dh.data(), lc.xn2.data(), n, W, F);
        // residual: dx stays, plus the norm path into x_in2
        for (int t = 0; t < n; ++t)
            rmsnorm_bwd(lc.x_in2.data() + static_cast<std::size_t>(t) * W,
                        lc.inv_rms2[static_cast<std::size_t>(t)], g2,
                        scratch.dxn.data() + static_cast<std::size_t>(t) * W,
                        scratch.dx.data() + static_cast<std::size_t>(t) * W, d_g2, W);

        // attention: x_in2 = x_in1 + Wo ctx; dx = d x_in2
        mm_xm(scratch.dctx.data(), scratch.dx.data(), wo, n, W, W);
        acc_mt(d_wo, scratch.dx.data(), lc.ctx.data(), n, W, W);

        std::fill(scratch.dq.begin(), scratch.dq.begin() + static_cast<std::size_t>(n) * W, T(0));
        std::fill(scratch.dk.begin(), scratch.dk.begin() + static_cast<std::size_t>(n) * W, T(0));
        std::fill(scratch.dv.begin(), scratch.dv.begin() + static_cast<std::size_t>(n) * W, T(0));
        for (int h = 0; h < H; ++h) {
            const int hoff = h * Dh;
            const T* att_h = lc.att.data() + static_cast<std::size_t>(h) * n * n;
            for (int i = 0; i < n; ++i) {
                const T* att_row = att_h + static_cast<std::size_t>(i) * n;
                const T* dctx_i = scratch.dctx.data() + static_cast<std::size_t>(i) * W + hoff;
                T dsum = 0;
                for (int j = 0; j <= i; ++j) {
                    const T dp = dot(dctx_i, lc.v.data() + static_cast<std::size_t>(j) * W + hoff, Dh);
                    dp_row[static_cast<std::size_t>(j)] = dp;
                    dsum += att_row[j] * dp;
                }
                const T* qi = lc.q.data() + static_cast<std::size_t>(i) * W + hoff;
                T* dqi = scratch.dq.data() + static_cast<std::size_t>(i) * W + hoff;
                for (int j = 0; j <= i; ++j) {
                    const T a = att_row[j];
                    const T ds = a * (dp_row[static_cast<std::size_t>(j)] - dsum);
                    d_relbias[static_cast<std::size_t>(bucket_of_[static_cast<std::size_t>(i - j)]) * H + h] += ds;
                    axpy(ds * att_scale, lc.k.data() + static_cast<std::size_t>(j) * W + hoff, dqi, Dh);
                    axpy(ds * att_scale, qi, scratch.dk.data() + static_cast<std::size_t>(j) * W + hoff, Dh);
                    axpy(a, dctx_i, scratch.dv.data() + static_cast<std::size_t>(j) * W + hoff, Dh);
                }
            }
        }
        // back through the three projections into xn1
        mm_xm(scratch.dxn.data(), scratch.dq.data(), wq, n, W, W);
        acc_mt(d_wq, scratch.dq.data(), lc.xn1.data(), n, W, W);
        {
            // accumulate the k and v paths on top of the q path
            std::vector<T>& tmp = scratch.dctx; // reuse as temp
            mm_xm(tmp.data(), scratch.dk.data(), wk, n, W, W);
            for (std::size_t i = 0; i < static_cast<std::size_t>(n) * W; ++i) scratch.dxn[i] += tmp[i];
            acc_mt(d_wk, scratch.dk.data(), lc.xn1.data(), n, W, W);
            mm_xm(tmp.data(), scratch.dv.data(), wv, n, W, W);
            for (std::size_t i = 0; i < static_cast<std::size_t>(n) * W; ++i) scratch.dxn[i] += tmp[i];
            acc_mt(d_wv, scratch.dv.data(), lc.xn1.data(), n, W, W);
        }
        for (int t = 0; t < n; ++t)
            rmsnorm_bwd(lc.x_in1.data() + static_cast<std::size_t>(t) * W,
                        lc.inv_rms1[static_cast<std::size_t>(t)], g1,
                        scratch.dxn.data() + static_cast<std::size_t>(t) * W,
                        scratch.dx.data() + static_cast<std::size_t>(t) * W, d_g1, W);
    }

    // ---- embedding affine and table
    {
        T* d_es = grads.tensor("emb_scale");
        T* d_eb = grads.tensor("emb_bias");
        T* d_embed = cfg_.uses_learned_table() ? grads.tensor("embed") : nullptr;
        for (int t = 0; t < n; ++t) {
            const std::size_t off = static_cast<std::size_t>(t) * W;
            const T* dx_t = scratch.dx.data() + off;
            const T* used = scratch.e_used.data() + off;
            for (int w = 0; w < W; ++w) {
                d_es[w] += dx_t[w] * used[w];
                d_eb[w] += dx_t[w];
            }
            const bool learned_source =
                cfg_.mode == EmbeddingMode::kLearned ||
                cfg_.mode == EmbeddingMode::kPartialPermutation ||
                (cfg_.mode == EmbeddingMode::kEmbedDropout && !coins[static_cast<std::size_t>(t)]);
            if (!learned_source || !d_embed) continue;
            T* de = d_embed + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * W;
            if (normalize) {
                // d(used)/d(cand) through the row layernorm
                std::vector<T>& tmp = scratch.dxn; // reuse as a W-sized temp
                for (int w = 0; w < W; ++w) tmp[static_cast<std::size_t>(w)] = dx_t[w] * es[w];
                layernorm_bwd(used, scratch.ln_inv_std[static_cast<std::size_t>(t)],
                              tmp.data(), de, W);
            } else {
                for (int w = 0; w < W; ++w) de[w] += dx_t[w] * es[w];
            }
        }
    }
}

template <typename T>
double Transformer<T>::loss_and_grads(const ParamBuffer<T>& params, const TokenSeq& tokens,
                                      const std::vector<Token>& targets, const T* codebook,
                                      const std::uint8_t* coins, ParamBuffer<T>& grads,
                                      Scratch<T>& scratch) const {
    if (targets.size() != tokens.size())
        throw std::invalid_argument("loss: targets length " + std::to_string(targets.size()) +
                                    " != tokens length " + std::to_string(tokens.size()));
    const int n = static_cast<int>(tokens.size());
    const int d = cfg_.vocab;
    int n_eff = 0;
    for (Token t : targets) {
        if (t >= d) throw std::out_of_range("loss: target " + std::to_string(t) + " outside vocab");
        if (t >= 0) ++n_eff;
    }
    if (n_eff == 0) return 0.0;

    std::vector<T> logits;
    run_forward(params, tokens, codebook, coins, logits, scratch);

    // softmax + cross-entropy, gradient into scratch.dlogits
    double loss = 0.0;
    const T inv_eff = T(1) / static_cast<T>(n_eff);
    for (int t = 0; t < n; ++t) {
        T* row = logits.data() + static_cast<std::size_t>(t) * d;
        T* drow = scratch.dlogits.data() + static_cast<std::size_t>(t) * d;
        const Token target = targets[static_cast<std::size_t>(t)];
        if (target < 0) {
            std::fill(drow, drow + d, T(0));
            continue;
        }
        T best = row[0];
        for (int v = 1; v < d; ++v) best = std::max(best, row[v]);
        T denom = 0;
        for (int v = 0; v < d; ++v) denom += std::exp(row[v] - best);
        const T log_denom = std::log(denom);
        loss += -static_cast<double>(row[target] - best - log_denom);
        for (int v = 0; v < d; ++v)
            drow[v] = (std::exp(row[v] - best - log_denom) - (v == target ? T(1) : T(0))) * inv_eff;
    }
    loss /= n_eff;

    run_backward(params, tokens, codebook, coins, grads, scratch);
    return loss;
}

template <typename T>
double Transformer<T>::loss_only(const ParamBuffer<T>& params, const TokenSeq& tokens,
                                 const std::vector<Token>& targets, const T* codebook,
                                 const std::uint8_t* coins, Scratch<T>& scratch) const {
    if (targets.size() != tokens.size())
        throw std::invalid_argument("loss: targets length mismatch");
    std::vector<T> logits;
    run_forward(params, tokens, codebook, coins, logits, scratch);
    std::vector<double> dl(logits.begin(), logits.end());
    return softmax_xent(dl, cfg_.vocab, targets);
}

double softmax_xent(const std::vector<double>& logits, int d, const std::vector<Token>& targets) {
    if (d < 1 || logits.size() != targets.size() * static_cast<std::size_t>(d))
        throw std::invalid_argument("softmax_xent: logits shape does not match targets");
    double loss = 0.0;
    int n_eff = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const Token target = targets[t];
        if (target < 0) continue;
        if (target >= d) throw std::out_of_range("softmax_xent: target outside vocab");
        const double* row = logits.data() + t * static_cast<std::size_t>(d);
        double best = row[0];
        for (int v = 1; v < d; ++v) best = std::max(best, row[v]);
        double denom = 0;
        for (int v = 0; v < d; ++v) denom += std::exp(row[v] - best);
        loss += -(row[target] - best - std::log(denom));
        ++n_eff;
    }
    return n_eff == 0 ? 0.0 : loss / n_eff;
}

// ------------------------------------------------------------ verification

FdReport finite_difference_check(const ModelConfig& cfg, const ParamBuffer<double>& params,
                                 const TokenSeq& tokens, const std::vector<Token>& targets,
                                 const double* codebook, const std::uint8_t* coins, double h) {
    Transformer<double> model(cfg);
    Scratch<double> scratch;
    ParamBuffer<double> grads = make_params<double>(cfg);
    ParamBuffer<double> work = params; // perturbable copy
    model.loss_and_grads(work, tokens, targets, codebook, coins, grads, scratch);

    FdReport report;
    for (const TensorSpec& spec : params.layout) {
        for (std::size_t i = 0; i < spec.count; ++i) {
            double& theta = work.data[spec.offset + i];
            const double saved = theta;
            theta = saved + h;
            const double up = model.loss_only(work, tokens, targets, codebook, coins, scratch);
            theta = saved - h;
            const double down = model.loss_only(work, tokens, targets, codebook, coins, scratch);
            theta = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads.data[spec.offset + i];
            const double rel = std::abs(analytic - numeric) /
                               std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_tensor = spec.name;
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

template <typename T>
double equivariance_check(const ModelConfig& cfg, const ParamBuffer<T>& params,
                          const TokenSeq& tokens, const std::vector<T>& codebook,
                          const Permutation& pi) {
    if (cfg.mode != EmbeddingMode::kGaussianPerSeq)
        throw std::invalid_argument("equivariance_check: requires gaussian mode");
    if (pi.size() != cfg.vocab)
        throw std::invalid_argument("equivariance_check: permutation size != vocab");
    if (codebook.size() != static_cast<std::size_t>(cfg.vocab) * static_cast<std::size_t>(cfg.width))
        throw std::invalid_argument("equivariance_check: codebook shape mismatch");
    Transformer<T> model(cfg);
    const int W = cfg.width;

    std::vector<T> logits_a;
    model.forward(params, tokens, codebook.data(), nullptr, logits_a);

    std::vector<T> permuted_book(codebook.size());
    for (Token v = 0; v < cfg.vocab; ++v)
        std::copy_n(codebook.data() + static_cast<std::size_t>(v) * W, W,
                    permuted_book.data() + static_cast<std::size_t>(pi(v)) * W);
    std::vector<T> logits_b;
    model.forward(params, pi.apply(tokens), permuted_book.data(), nullptr, logits_b);

    double worst = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (Token v = 0; v < cfg.vocab; ++v) {
            const double a = logits_a[t * static_cast<std::size_t>(cfg.vocab) + static_cast<std::size_t>(v)];
            const double b = logits_b[t * static_cast<std::size_t>(cfg.vocab) + static_cast<std::size_t>(pi(v))];
            worst = std::max(worst, std::abs(a - b));
        }
    }
    return worst;
}

// ----------------------------------------------------------------- sources

MarkovSource::MarkovSource(std::shared_ptr<const ReferenceModel> model, int seq_len,
                           std::uint64_t seed)
    : model_(std::move(model)), seq_len_(seq_len), seed_(seed) {
    if (!model_) throw std::invalid_argument("MarkovSource: null model");
    if (seq_len_ < 2) throw std::invalid_argument("MarkovSource: seq_len must be >= 2");
}

TokenSeq MarkovSource::next(std::uint64_t index) {
    Rng rng = Rng::substream(seed_, index);
    return sample_sequence(*model_, seq_len_, rng);
}

FixedCorpusSource::FixedCorpusSource(std::vector<TokenSeq> seqs, int vocab, std::uint64_t seed)
    : seqs_(std::move(seqs)), vocab_(vocab), seed_(seed) {
    if (vocab_ < 1) throw std::invalid_argument("FixedCorpusSource: vocab must be >= 1");
    if (seqs_.empty()) throw std::invalid_argument("FixedCorpusSource: empty corpus");
    seq_len_ = static_cast<int>(seqs_[0].size());
    for (const TokenSeq& s : seqs_) {
        if (static_cast<int>(s.size()) != seq_len_)
            throw std::invalid_argument("FixedCorpusSource: ragged sequence lengths");
        for (Token t : s)
            if (t < 0 || t >= vocab_)
                throw std::invalid_argument("FixedCorpusSource: token outside vocab");
    }
}

TokenSeq FixedCorpusSource::next(std::uint64_t index) {
    Rng rng = Rng::substream(seed_, index);
    return seqs_[rng.next_below(seqs_.size())];
}

// ---------------------------------------------------------------- training

double cosine_lr(const OptimConfig& opt, std::uint64_t step) {
    if (opt.steps <= 0) return opt.min_lr;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(opt.steps));
    return opt.min_lr + 0.5 * (opt.peak_lr - opt.min_lr) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

namespace {

// Seed salts for the independent randomness consumers of a training run.
constexpr std::uint64_t kSaltInit = 1;
constexpr std::uint64_t kSaltData = 2;
constexpr std::uint64_t kSaltCodebook = 3;
constexpr std::uint64_t kSaltCoins = 4;
constexpr std::uint64_t kSaltPerm = 5;

} // namespace

template <typename T>
TrainResult train(const ModelConfig& cfg, SequenceSource& source, const OptimConfig& opt,
                  std::uint64_t seed, const TrainOptions& options) {
    cfg.validate();
    if (opt.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    if (opt.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (opt.log_every < 1) throw std::invalid_argument("train: log_every must be >= 1");
    if (source.vocab() > cfg.vocab)
        throw std::invalid_argument("train: source vocab exceeds model vocab");
    if (source.seq_len() > cfg.max_seq_len)
        throw std::invalid_argument("train: source seq_len exceeds model max_seq_len");

    TrainState<T> state;
    bool resumed = false;
    if (!options.resume_from.empty()) {
        if (!peek_checkpoint(options.resume_from).has_optimizer)
            throw std::runtime_error(
                "train: resume checkpoint lacks optimizer state (adam would restart)");
        state = load_checkpoint<T>(options.resume_from);
        if (state.cfg != cfg)
            throw std::runtime_error("train: resume checkpoint config does not match");
        resumed = true;
    } else {
        state.cfg = cfg;
        state.params = init_params<T>(cfg, derive_seed(seed, kSaltInit));
        state.adam_m = make_params<T>(cfg);
        state.adam_v = make_params<T>(cfg);
        Rng master(seed);
        state.rng = master.state();
    }

    Transformer<T> model(cfg);
    Scratch<T> scratch;
    ParamBuffer<T> grads = make_params<T>(cfg);
    std::vector<Token> targets;
    std::vector<T> codebook;
    std::vector<std::uint8_t> coins;

    std::unique_ptr<CsvWriter> metrics;
    if (!options.metrics_csv.empty())
        metrics = std::make_unique<CsvWriter>(options.metrics_csv, "step,loss,lr,mode,seed", resumed);

    double last_loss = 0.0;
    for (std::uint64_t step = state.step; step < static_cast<std::uint64_t>(opt.steps); ++step) {
        grads.zero();
        double loss_sum = 0.0;
        for (int slot = 0; slot < opt.batch; ++slot) {
            const std::uint64_t idx = step * static_cast<std::uint64_t>(opt.batch) +
                                      static_cast<std::uint64_t>(slot);
            TokenSeq tokens = source.next(idx);
            if (cfg.mode == EmbeddingMode::kPartialPermutation) {
                Rng prng = Rng::substream(derive_seed(seed, kSaltPerm), idx);
                const Permutation pi = Permutation::random(cfg.vocab, prng);
                tokens = apply_partial_permutation(tokens, pi, cfg.p_mix,
                                                   derive_seed(seed, kSaltPerm) ^ idx);
            }
            const T* cb = nullptr;
            if (cfg.uses_codebook()) {
                codebook = sample_sequence_embedding<T>(derive_seed(seed, kSaltCodebook), idx, cfg);
                cb = codebook.data();
            }
            const std::uint8_t* cn = nullptr;
            if (cfg.mode == EmbeddingMode::kEmbedDropout) {
                coins = sample_mix_coins(derive_seed(seed, kSaltCoins), idx, tokens.size(), cfg.p_mix);
                cn = coins.data();
            }
            targets.assign(tokens.begin() + 1, tokens.end());
            targets.push_back(-1);
            loss_sum += model.loss_and_grads(state.params, tokens, targets, cb, cn, grads, scratch);
        }
        const double loss = loss_sum / opt.batch;
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged: loss " + std::to_string(loss) +
                                     " at step " + std::to_string(step));
        last_loss = loss;

        const double inv_batch = 1.0 / opt.batch;
        double sq_norm = 0.0;
        for (T& g : grads.data) {
            g = static_cast<T>(g * inv_batch);
            sq_norm += static_cast<double>(g) * static_cast<double>(g);
        }
        double scale = 1.0;
        if (opt.clip > 0.0) {
            const double norm = std::sqrt(sq_norm);
            if (norm > opt.clip) scale = opt.clip / norm;
        }

        const double lr = cosine_lr(opt, step);
        const double t1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step + 1));
        const double t2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step + 1));
        for (std::size_t i = 0; i < grads.data.size(); ++i) {
            const double g = static_cast<double>(grads.data[i]) * scale;
            const double m = opt.beta1 * static_cast<double>(state.adam_m.data[i]) + (1.0 - opt.beta1) * g;
            const double v = opt.beta2 * static_cast<double>(state.adam_v.data[i]) + (1.0 - opt.beta2) * g * g;
            state.adam_m.data[i] = static_cast<T>(m);
            state.adam_v.data[i] = static_cast<T>(v);
            state.params.data[i] = static_cast<T>(
                static_cast<double>(state.params.data[i]) -
                lr * (m / t1) / (std::sqrt(v / t2) + opt.adam_eps));
        }

        state.step = step + 1;
        if (metrics && (step % static_cast<std::uint64_t>(opt.log_every) == 0 ||
                        step + 1 == static_cast<std::uint64_t>(opt.steps)))
            metrics->row({csv_num(static_cast<std::uint64_t>(step)), csv_num(loss), csv_num(lr),
                          mode_name(cfg.mode), csv_num(seed)});
        if (!options.checkpoint_path.empty() && options.checkpoint_every > 0 &&
            state.step % static_cast<std::uint64_t>(options.checkpoint_every) == 0)
            save_checkpoint(state, options.checkpoint_path);
        if (!options.quiet && (step % 100 == 0 || step + 1 == static_cast<std::uint64_t>(opt.steps)))
            std::fprintf(stderr, "step %llu loss %.4f lr %.6f\n",
                         static_cast<unsigned long long>(step), loss, lr);
    }

    if (metrics) metrics->close();
    if (!options.checkpoint_path.empty()) save_checkpoint(state, options.checkpoint_path);

    TrainResult result;
    result.steps_done = state.step;
    result.final_loss = last_loss;
    result.checkpoint_path = options.checkpoint_path;
    return result;
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'L', 'E', 'X', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& o, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& o, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    o.write(reinterpret_cast<const char*>(b), 8);
}
void put_f64(std::ostream& o, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(o, bits);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
double get_f64(std::istream& in) {
    const std::uint64_t bits = get_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

template <typename T>
void put_scalar_array(std::ostream& o, const T* data, std::size_t count) {
    if constexpr (sizeof(T) == 4) {
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits;
            float f = static_cast<float>(data[i]);
            std::memcpy(&bits, &f, 4);
            put_u32(o, bits);
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) put_f64(o, static_cast<double>(data[i]));
    }
}

template <typename T>
void get_scalar_array(std::istream& in, T* data, std::size_t count) {
    if constexpr (sizeof(T) == 4) {
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = get_u32(in);
            float f;
            std::memcpy(&f, &bits, 4);
            data[i] = static_cast<T>(f);
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<T>(get_f64(in));
    }
}

struct RawHeader {
    std::uint32_t precision_bytes = 0;
    std::uint64_t step = 0;
    Rng::State rng{};
    ModelConfig cfg;
};

RawHeader read_header(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
    const std::uint32_t version = get_u32(in);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    RawHeader h;
    h.precision_bytes = get_u32(in);
    if (h.precision_bytes != 4 && h.precision_bytes != 8)
        throw std::runtime_error("checkpoint: bad precision tag");
    h.step = get_u64(in);
    for (auto& s : h.rng.s) s = get_u64(in);
    char flag;
    in.read(&flag, 1);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    h.rng.has_gauss = flag != 0;
    h.rng.gauss = get_f64(in);
    const std::uint32_t cfg_len = get_u32(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), cfg_len);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    h.cfg = ModelConfig::deserialize(cfg_text);
    return h;
}

} // namespace

template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::string& path, bool with_optimizer) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
        out.write(kMagic, 8);
        put_u32(out, kVersion);
        put_u32(out, sizeof(T));
        put_u64(out, state.step);
        for (auto s : state.rng.s) put_u64(out, s);
        const char flag = state.rng.has_gauss ? 1 : 0;
        out.write(&flag, 1);
        put_f64(out, state.rng.gauss);
        const std::string cfg_text = state.cfg.serialize();
        put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
        out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));

        put_u32(out, static_cast<std::uint32_t>(state.params.layout.size()));
        for (const TensorSpec& spec : state.params.layout) {
            put_u32(out, static_cast<std::uint32_t>(spec.name.size()));
            out.write(spec.name.data(), static_cast<std::streamsize>(spec.name.size()));
            put_u32(out, static_cast<std::uint32_t>(spec.shape.size()));
            for (int dim : spec.shape) put_u32(out, static_cast<std::uint32_t>(dim));
            put_u64(out, spec.count);
            put_scalar_array(out, state.params.data.data() + spec.offset, spec.count);
        }
        const char opt_flag = with_optimizer ? 1 : 0;
        out.write(&opt_flag, 1);
        if (with_optimizer) {
            put_scalar_array(out, state.adam_m.data.data(), state.adam_m.data.size());
            put_scalar_array(out, state.adam_v.data.data(), state.adam_v.data.size());
        }
        out.close();
        if (out.fail()) throw std::runtime_error("checkpoint write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot move checkpoint into place: " + path);
}

CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    const RawHeader h = read_header(in);
    CheckpointMeta meta;
    meta.cfg = h.cfg;
    meta.precision = h.precision_bytes == 4 ? Precision::kF32 : Precision::kF64;
    meta.step = h.step;
    // skip tensor blocks to reach the optimizer flag
    const std::uint32_t n_tensors = get_u32(in);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint32_t name_len = get_u32(in);
        in.seekg(name_len, std::ios::cur);
        const std::uint32_t rank = get_u32(in);
        in.seekg(static_cast<std::streamoff>(rank) * 4, std::ios::cur);
        const std::uint64_t count = get_u64(in);
        in.seekg(static_cast<std::streamoff>(count * h.precision_bytes), std::ios::cur);
        if (!in) throw std::runtime_error("checkpoint: truncated file");
    }
    char opt_flag;
    in.read(&opt_flag, 1);
    meta.has_optimizer = in && opt_flag != 0;
    return meta;
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    const RawHeader h = read_header(in);
    if (h.precision_bytes != sizeof(T))
        throw std::runtime_error("checkpoint: stored precision (" + std::to_string(h.precision_bytes * 8) +
                                 "-bit) does not match requested " + std::to_string(sizeof(T) * 8) + "-bit");
    TrainState<T> state;
    state.cfg = h.cfg;
    state.step = h.step;
    state.rng = h.rng;
    state.params = make_params<T>(h.cfg);
    state.adam_m = make_params<T>(h.cfg);
    state.adam_v = make_params<T>(h.cfg);

    const std::uint32_t n_tensors = get_u32(in);
    if (n_tensors != state.params.layout.size())
        throw std::runtime_error("checkpoint: tensor count mismatch");
    for (const TensorSpec& spec : state.params.layout) {
        const std::uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in || name != spec.name)
            throw std::runtime_error("checkpoint: tensor '" + name + "' where '" + spec.name +
                                     "' expected");
        const std::uint32_t rank = get_u32(in);
        if (rank != spec.shape.size())
            throw std::runtime_error("checkpoint: rank mismatch for '" + name + "'");
        for (int dim : spec.shape) {
            if (get_u32(in) != static_cast<std::uint32_t>(dim))
                throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        }
        if (get_u64(in) != spec.count)
            throw std::runtime_error("checkpoint: element count mismatch for '" + name + "'");
        get_scalar_array(in, state.params.data.data() + spec.offset, spec.count);
    }
    char opt_flag;
    in.read(&opt_flag, 1);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    if (opt_flag) {
        get_scalar_array(in, state.adam_m.data.data(), state.adam_m.data.size());
        get_scalar_array(in, state.adam_v.data.data(), state.adam_v.data.size());
    }
    return state;
}

// -------------------------------------------------------------- evaluation

template <typename T>
PplSeries eval_positionwise_nll(const ModelConfig& cfg, const ParamBuffer<T>& params,
                                SequenceSource& source, int n_seqs, std::uint64_t seed) {
    if (n_seqs < 1) throw std::invalid_argument("eval: n_seqs must be >= 1");
    Transformer<T> model(cfg);
    Scratch<T> scratch;
    std::vector<T> logits;
    std::vector<std::uint8_t> coins;
    PplSeries out;
    out.n_seqs = n_seqs;
    const int n = source.seq_len();
    out.mean_nll.assign(static_cast<std::size_t>(n) - 1, 0.0);
    for (int s = 0; s < n_seqs; ++s) {
        const TokenSeq tokens = source.next(static_cast<std::uint64_t>(s));
        const T* cb = nullptr;
        std::vector<T> codebook;
        if (cfg.uses_codebook()) {
            codebook = sample_sequence_embedding<T>(derive_seed(seed, kSaltCodebook),
                                                    static_cast<std::uint64_t>(s), cfg);
            cb = codebook.data();
        }
        const std::uint8_t* cn = nullptr;
        if (cfg.mode == EmbeddingMode::kEmbedDropout) {
            // evaluation runs the stable path: no random replacement
            coins.assign(tokens.size(), 0);
            cn = coins.data();
        }
        model.forward(params, tokens, cb, cn, logits, scratch);
        const int d = cfg.vocab;
        for (int t = 0; t + 1 < n; ++t) {
            const T* row = logits.data() + static_cast<std::size_t>(t) * d;
            double best = row[0];
            for (int v = 1; v < d; ++v) best = std::max(best, static_cast<double>(row[v]));
            double denom = 0;
            for (int v = 0; v < d; ++v) denom += std::exp(static_cast<double>(row[v]) - best);
            const double lp = static_cast<double>(row[tokens[static_cast<std::size_t>(t) + 1]]) - best - std::log(denom);
            out.mean_nll[static_cast<std::size_t>(t)] += -lp;
        }
    }
    for (double& x : out.mean_nll) x /= n_seqs;
    return out;
}

double band_ppl(const std::vector<double>& nll, std::size_t lo, std::size_t hi) {
    if (lo >= hi || hi > nll.size())
        throw std::invalid_argument("band_ppl: bad position band");
    double sum = 0.0;
    for (std::size_t i = lo; i < hi; ++i) sum += nll[i];
    return std::exp(sum / static_cast<double>(hi - lo));
}

// ------------------------------------------------------- instantiations

template struct ParamBuffer<float>;
template struct ParamBuffer<double>;
template ParamBuffer<float> make_params<float>(const ModelConfig&);
template ParamBuffer<double> make_params<double>(const ModelConfig&);
template ParamBuffer<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamBuffer<double> init_params<double>(const ModelConfig&, std::uint64_t);
template std::vector<float> sample_sequence_embedding<float>(std::uint64_t, std::uint64_t,
                                                             const ModelConfig&);
template std::vector<double> sample_sequence_embedding<double>(std::uint64_t, std::uint64_t,
                                                               const ModelConfig&);
template class Transformer<float>;
template class Transformer<double>;
template double equivariance_check<float>(const ModelConfig&, const ParamBuffer<float>&,
                                          const TokenSeq&, const std::vector<float>&,
                                          const Permutation&);
template double equivariance_check<double>(const ModelConfig&, const ParamBuffer<double>&,
                                           const TokenSeq&, const std::vector<double>&,
                                           const Permutation&);
template TrainResult train<float>(const ModelConfig&, SequenceSource&, const OptimConfig&,
                                  std::uint64_t, const TrainOptions&);
template TrainResult train<double>(const ModelConfig&, SequenceSource&, const OptimConfig&,
                                   std::uint64_t, const TrainOptions&);
template void save_checkpoint<float>(const TrainState<float>&, const std::string&, bool);
template void save_checkpoint<double>(const TrainState<double>&, const std::string&, bool);
template TrainState<float> load_checkpoint<float>(const std::string&);
template TrainState<double> load_checkpoint<double>(const std::string&);
template PplSeries eval_positionwise_nll<float>(const ModelConfig&, const ParamBuffer<float>&,
                                                SequenceSource&, int, std::uint64_t);
template PplSeries eval_positionwise_nll<double>(const ModelConfig&, const ParamBuffer<double>&,
                                                 SequenceSource&, int, std::uint64_t);

} // namespace lexi
