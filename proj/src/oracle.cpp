#include "lexi/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "lexi/csv.hpp"

namespace lexi {

// ----------------------------------------------------------- PermPosterior

std::vector<double> PermPosterior::probs() const {
    std::vector<double> p(log_probs.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        p[i] = log_probs[i] == kNegInf ? 0.0 : std::exp(log_probs[i]);
    return p;
}

double PermPosterior::entropy() const {
    double h = 0.0;
    for (double lp : log_probs) {
        if (lp == kNegInf) continue;
        h -= std::exp(lp) * lp;
    }
    return h;
}

std::size_t PermPosterior::argmax() const {
    return static_cast<std::size_t>(
        std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
}

namespace {

PermPosterior normalise(int d, std::vector<double> log_w) {
    const double lse = log_sum_exp(log_w);
    if (lse == kNegInf)
        throw std::domain_error("permutation posterior degenerate: every permutation has zero likelihood");
    for (double& x : log_w) {
        if (x != kNegInf) x -= lse;
    }
    return PermPosterior{d, std::move(log_w)};
}

} // namespace

// ------------------------------------------------------------ LexinvOracle

LexinvOracle::LexinvOracle(std::shared_ptr<const ReferenceModel> model)
    : model_(std::move(model)) {
    if (!model_) throw std::invalid_argument("oracle: null reference model");
    d_ = model_->alphabet_size();
    perms_ = enumerate_permutations(d_); // enforces the d! capacity limit
    inv_maps_.reserve(perms_.size());
    for (const Permutation& p : perms_) inv_maps_.push_back(p.inverse().map());
}

PermPosterior LexinvOracle::prior() const {
    const double lp = -std::log(static_cast<double>(perms_.size()));
    return PermPosterior{d_, std::vector<double>(perms_.size(), lp)};
}

PermPosterior LexinvOracle::posterior(const TokenSeq& seq) const {
    std::vector<double> log_w(perms_.size());
    for (std::size_t i = 0; i < perms_.size(); ++i) {
        TokenSeq plain(seq.size());
        for (std::size_t t = 0; t < seq.size(); ++t)
            plain[t] = inv_maps_[i][static_cast<std::size_t>(seq[t])];
        log_w[i] = seq.empty() ? 0.0 : model_->seq_logprob(plain);
    }
    return normalise(d_, std::move(log_w));
}

std::vector<double> LexinvOracle::per_perm_cond_loglik(const TokenSeq& ctx, Token next) const {
    if (next < 0 || next >= d_)
        throw std::out_of_range("per_perm_cond_loglik: token " + std::to_string(next) +
                                " outside alphabet of size " + std::to_string(d_));
    std::vector<double> out(perms_.size());
    TokenSeq plain(ctx.size());
    for (std::size_t i = 0; i < perms_.size(); ++i) {
        const TokenSeq& inv = inv_maps_[i];
        for (std::size_t t = 0; t < ctx.size(); ++t)
            plain[t] = inv[static_cast<std::size_t>(ctx[t])];
        double lp;
        try {
            const ProbVec c = model_->cond_dist(plain);
            const double p = c[static_cast<std::size_t>(inv[static_cast<std::size_t>(next)])];
            lp = p > 0.0 ? std::log(p) : kNegInf;
        } catch (const DeadPrefixError&) {
            lp = kNegInf;
        }
        out[i] = lp;
    }
    return out;
}

PermPosterior LexinvOracle::hedge_step(const PermPosterior& state,
                                       const std::vector<double>& cond_loglik) const {
    if (state.log_probs.size() != perms_.size() || cond_loglik.size() != perms_.size())
        throw std::invalid_argument("hedge_step: weight vector size mismatch");
    std::vector<double> log_w(perms_.size());
    for (std::size_t i = 0; i < perms_.size(); ++i) {
        const double a = state.log_probs[i], b = cond_loglik[i];
        log_w[i] = (a == kNegInf || b == kNegInf) ? kNegInf : a + b;
    }
    return normalise(d_, std::move(log_w));
}

ProbVec LexinvOracle::predictive(const TokenSeq& ctx) const {
    OracleStream stream(*this);
    for (Token t : ctx) stream.push(t);
    return stream.predictive();
}

double LexinvOracle::joint_logprob(const TokenSeq& seq) const {
    std::vector<double> log_w(perms_.size());
    for (std::size_t i = 0; i < perms_.size(); ++i) {
        TokenSeq plain(seq.size());
        for (std::size_t t = 0; t < seq.size(); ++t)
            plain[t] = inv_maps_[i][static_cast<std::size_t>(seq[t])];
        log_w[i] = model_->seq_logprob(plain);
    }
    return log_sum_exp(log_w) - std::log(static_cast<double>(perms_.size()));
}

KeyMatrix LexinvOracle::mapping_marginals(const PermPosterior& post) const {
    if (post.log_probs.size() != perms_.size())
        throw std::invalid_argument("mapping_marginals: posterior size mismatch");
    KeyMatrix km = KeyMatrix::zeros(d_, true);
    for (std::size_t i = 0; i < perms_.size(); ++i) {
        if (post.log_probs[i] == kNegInf) continue;
        const double w = std::exp(post.log_probs[i]);
        const TokenSeq& map = perms_[i].map();
        for (Token t = 0; t < d_; ++t) km.at(map[static_cast<std::size_t>(t)], t) += w;
    }
    std::fill(km.row_seen.begin(), km.row_seen.end(), 1);
    return km;
}

// ------------------------------------------------------------ OracleStream

OracleStream::OracleStream(const LexinvOracle& oracle) : oracle_(&oracle) {
    log_w_.assign(oracle_->perms_.size(), 0.0);
    conds_.assign(oracle_->perms_.size() * static_cast<std::size_t>(oracle_->d_), 0.0);
    // Direct table access for (smoothed) Markov references once the context
    // is at least k long; the generic path below handles everything else.
    const ReferenceModel* m = oracle_->model_.get();
    if (const auto* sm = dynamic_cast<const SmoothedModel*>(m)) {
        sigma_ = sm->sigma();
        m = &sm->base();
    }
    markov_ = dynamic_cast<const MarkovModel*>(m);
}

const double* OracleStream::cond_row(std::size_t perm_index) const {
    return conds_.data() + perm_index * static_cast<std::size_t>(oracle_->d_);
}

void OracleStream::refresh_conds() {
    if (conds_valid_) return;
    const int d = oracle_->d_;
    const std::size_t n = oracle_->perms_.size();
    const int k = markov_ ? markov_->order() : -1;
    const bool fast = markov_ && static_cast<int>(ctx_.size()) >= k;
    TokenSeq plain(fast ? static_cast<std::size_t>(k) : ctx_.size());
    for (std::size_t i = 0; i < n; ++i) {
        const TokenSeq& inv = oracle_->inv_maps_[i];
        double* row = conds_.data() + i * static_cast<std::size_t>(d);
        if (fast) {
            for (int j = 0; j < k; ++j)
                plain[static_cast<std::size_t>(j)] =
                    inv[static_cast<std::size_t>(ctx_[ctx_.size() - static_cast<std::size_t>(k) + static_cast<std::size_t>(j)])];
            const ProbVec& base = markov_->row(plain);
            const double floor = sigma_ / d;
            // row in cipher coordinates: row[c] = ptilde(inv(c) | plain ctx)
            for (Token c = 0; c < d; ++c)
                row[c] = base[static_cast<std::size_t>(inv[static_cast<std::size_t>(c)])] * (1.0 - sigma_) + floor;
        } else {
            for (std::size_t t = 0; t < ctx_.size(); ++t)
                plain[t] = inv[static_cast<std::size_t>(ctx_[t])];
            try {
                const ProbVec c = oracle_->model_->cond_dist(plain);
                for (Token v = 0; v < d; ++v) row[v] = c[static_cast<std::size_t>(inv[static_cast<std::size_t>(v)])];
            } catch (const DeadPrefixError&) {
                for (Token v = 0; v < d; ++v) row[v] = 0.0;
            }
        }
    }
    conds_valid_ = true;
}

void OracleStream::push(Token y) {
    if (y < 0 || y >= oracle_->d_)
        throw std::out_of_range("oracle stream: token " + std::to_string(y) +
                                " outside alphabet of size " + std::to_string(oracle_->d_));
    refresh_conds();
    double best = kNegInf;
    for (std::size_t i = 0; i < log_w_.size(); ++i) {
        if (log_w_[i] == kNegInf) continue;
        const double p = cond_row(i)[y];
        log_w_[i] = p > 0.0 ? log_w_[i] + std::log(p) : kNegInf;
        best = std::max(best, log_w_[i]);
    }
    if (best == kNegInf)
        throw std::domain_error("permutation posterior degenerate: every permutation has zero likelihood");
    for (double& w : log_w_) {
        if (w != kNegInf) w -= best;
    }
    ctx_.push_back(y);
    conds_valid_ = false;
}

ProbVec OracleStream::predictive() {
    refresh_conds();
    const int d = oracle_->d_;
    const double lse = log_sum_exp(log_w_);
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (std::size_t i = 0; i < log_w_.size(); ++i) {
        if (log_w_[i] == kNegInf) continue;
        const double w = std::exp(log_w_[i] - lse);
        const double* row = cond_row(i);
        for (Token v = 0; v < d; ++v) out[static_cast<std::size_t>(v)] += w * row[v];
    }
    return ProbVec::normalized(std::move(out));
}

PermPosterior OracleStream::posterior() const {
    return normalise(oracle_->d_, log_w_);
}

// ------------------------------------------------------------- experiments

ConvergenceResult run_convergence_experiment(std::shared_ptr<const ReferenceModel> base,
                                             double sigma, int seq_len, int n_seqs,
                                             std::uint64_t seed) {
    if (seq_len < 1 || n_seqs < 1)
        throw std::invalid_argument("convergence experiment needs seq_len >= 1 and n_seqs >= 1");
    auto tilde = smooth(base, sigma);
    LexinvOracle oracle(tilde);

    ConvergenceResult r;
    r.seq_len = seq_len;
    r.n_seqs = n_seqs;
    r.sigma = sigma;
    r.seed = seed;
    r.mean_l1.assign(static_cast<std::size_t>(seq_len), 0.0);
    r.mean_kl.assign(static_cast<std::size_t>(seq_len), 0.0);
    r.mean_logratio.assign(static_cast<std::size_t>(seq_len), 0.0);

    TokenSeq prefix;
    for (int s = 0; s < n_seqs; ++s) {
        Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(s));
        const TokenSeq x = sample_sequence(*base, seq_len, rng);
        OracleStream stream(oracle);
        prefix.clear();
        for (int t = 0; t < seq_len; ++t) {
            const ProbVec ref = tilde->cond_dist(prefix);
            const ProbVec pred = stream.predictive();
            const auto ti = static_cast<std::size_t>(t);
            const auto xi = static_cast<std::size_t>(x[ti]);
            r.mean_l1[ti] += l1_distance(ref, pred);
            r.mean_kl[ti] += kl_divergence(ref, pred);
            r.mean_logratio[ti] += std::log(ref[xi]) - std::log(pred[xi]);
            stream.push(x[ti]);
            prefix.push_back(x[ti]);
        }
    }
    for (int t = 0; t < seq_len; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        r.mean_l1[ti] /= n_seqs;
        r.mean_kl[ti] /= n_seqs;
        r.mean_logratio[ti] /= n_seqs;
    }
    return r;
}

void write_csv(const ConvergenceResult& r, const std::string& path) {
    CsvWriter csv(path, "position,mean_l1,mean_kl,mean_logratio,n_seqs,sigma,seed");
    for (int t = 0; t < r.seq_len; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        csv.row({csv_num(t), csv_num(r.mean_l1[ti]), csv_num(r.mean_kl[ti]),
                 csv_num(r.mean_logratio[ti]), csv_num(r.n_seqs), csv_num(r.sigma),
                 csv_num(r.seed)});
    }
    csv.close();
}

RegretDiagnostics regret_diagnostics(const LexinvOracle& oracle, const TokenSeq& seq) {
    RegretDiagnostics d;
    d.logratio.reserve(seq.size());
    d.kl.reserve(seq.size());
    d.z.reserve(seq.size());
    OracleStream stream(oracle);
    TokenSeq prefix;
    double z = 0.0, lr_sum = 0.0;
    for (Token y : seq) {
        const ProbVec ref = oracle.model().cond_dist(prefix);
        const ProbVec pred = stream.predictive();
        const double lr = std::log(ref[static_cast<std::size_t>(y)]) - std::log(pred[static_cast<std::size_t>(y)]);
        const double kl = kl_divergence(ref, pred);
        z += kl - lr;
        d.logratio.push_back(lr);
        d.kl.push_back(kl);
        d.z.push_back(z);
        lr_sum += lr;
        stream.push(y);
        prefix.push_back(y);
    }
    d.mean_logratio = seq.empty() ? 0.0 : lr_sum / static_cast<double>(seq.size());
    return d;
}

} // namespace lexi
