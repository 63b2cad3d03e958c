#pragma once

// The exact lexinvariant model: a Bayesian mixture over all d! token
// permutations of a reference model.  The posterior update is literally the
// multiplicative-weights (Hedge) rule with the conditional likelihood as the
// multiplier; the learning-rate parameter of Hedge cancels against the
// exponent of its cost definition, so no such parameter appears here.
// Everything runs in log space with max-subtraction normalisation.

#include <memory>
#include <vector>

#include "lexi/core.hpp"
#include "lexi/keymatrix.hpp"
#include "lexi/reflm.hpp"

namespace lexi {

// Posterior over the permutations returned by enumerate_permutations(d),
// stored as normalised log-probabilities (log-sum-exp == 0).
struct PermPosterior {
    int d = 0;
    std::vector<double> log_probs;

    std::vector<double> probs() const;
    double entropy() const; // nats
    std::size_t argmax() const;
};

class LexinvOracle {
public:
    // `model` is the reference distribution the mixture runs over; pass a
    // smoothed model unless zero probabilities are intended.
    explicit LexinvOracle(std::shared_ptr<const ReferenceModel> model);

    int alphabet_size() const { return d_; }
    std::size_t n_perms() const { return perms_.size(); }
    const std::vector<Permutation>& perms() const { return perms_; }
    const ReferenceModel& model() const { return *model_; }

    PermPosterior prior() const;

    // Batch posterior after observing a whole sequence.
    PermPosterior posterior(const TokenSeq& seq) const;

    // log p(next = . | ctx under permutation pi) for every pi, the Hedge
    // "cost" vector for one step.
    std::vector<double> per_perm_cond_loglik(const TokenSeq& ctx, Token next) const;

    // One multiplicative-weights update: add conditional log-likelihoods to
    // the log-weights and renormalise.  Throws if every permutation dies.
    PermPosterior hedge_step(const PermPosterior& state,
                             const std::vector<double>& cond_loglik) const;

    // The associated lexinvariant predictive p'(. | ctx).
    ProbVec predictive(const TokenSeq& ctx) const;

    // log E_pi[ p(pi^{-1}(seq)) ] with the uniform prior.
    double joint_logprob(const TokenSeq& seq) const;

    // M[c][t] = P(pi maps plaintext t to cipher c) under the posterior.
    // Doubly stochastic by construction.
    KeyMatrix mapping_marginals(const PermPosterior& post) const;

private:
    friend class OracleStream;
    std::shared_ptr<const ReferenceModel> model_;
    std::vector<Permutation> perms_;
    std::vector<TokenSeq> inv_maps_; // inverse map arrays, one per permutation
    int d_;
};

// Incremental view over a growing context; O(d! * (k + d)) per position for
// order-k Markov references instead of remapping whole prefixes.
class OracleStream {
public:
    explicit OracleStream(const LexinvOracle& oracle);

    void push(Token y);
    ProbVec predictive();
    PermPosterior posterior() const;
    int position() const { return static_cast<int>(ctx_.size()); }
    const TokenSeq& context() const { return ctx_; }

private:
    void refresh_conds();
    const double* cond_row(std::size_t perm_index) const;

    const LexinvOracle* oracle_;
    TokenSeq ctx_;
    std::vector<double> log_w_;  // unnormalised log-weights
    std::vector<double> conds_;  // n_perms x d conditional rows at ctx_
    bool conds_valid_ = false;
    // Fast row access when the reference is (smoothed) Markov.
    const MarkovModel* markov_ = nullptr;
    double sigma_ = 0.0;
};

// ------------------------------------------------------------- experiments

// Samples n_seqs sequences from the *unsmoothed* base model, then compares
// the smoothed reference conditionals against the oracle predictive at every
// position.  Means are taken across sequences at fixed position.
struct ConvergenceResult {
    int seq_len = 0;
    int n_seqs = 0;
    double sigma = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> mean_l1, mean_kl, mean_logratio;
};

ConvergenceResult run_convergence_experiment(std::shared_ptr<const ReferenceModel> base,
                                             double sigma, int seq_len, int n_seqs,
                                             std::uint64_t seed);
// Header: position,mean_l1,mean_kl,mean_logratio,n_seqs,sigma,seed
void write_csv(const ConvergenceResult& r, const std::string& path);

// Per-step terms of the telescoped regret decomposition for one sequence:
// logratio_t = log ptilde(x_t|ctx) - log predictive(x_t|ctx), kl_t the full
// conditional KL, z_t the cumulative sum of (kl - logratio) increments.
struct RegretDiagnostics {
    std::vector<double> logratio, kl, z;
    double mean_logratio = 0.0;
};

RegretDiagnostics regret_diagnostics(const LexinvOracle& oracle, const TokenSeq& seq);

} // namespace lexi
