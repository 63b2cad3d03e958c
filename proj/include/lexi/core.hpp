#pragma once

// Alphabets, token sequences, permutations and probability vectors.
// Everything downstream (reference models, the permutation oracle, the
// decipherment code) is built on these types.

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "lexi/rng.hpp"

namespace lexi {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Exhaustive permutation enumeration is factorial; this is the hard cap on
// the alphabet size for which we allow it (8! = 40320).
constexpr int kMaxEnumerableAlphabet = 8;

// Thrown when a request exceeds a deliberate size limit (as opposed to being
// malformed).  Carries the limit so callers can report it.
class CapacityError : public std::runtime_error {
public:
    CapacityError(const std::string& what, int limit)
        : std::runtime_error(what), limit_(limit) {}
    int limit() const { return limit_; }
private:
    int limit_;
};

// A token alphabet of size d, optionally with printable glyphs for the
// small hand-written fixtures ('a' + id).
struct Alphabet {
    int size = 0;

    static Alphabet plain(int d);
    // a..z followed by space, for d <= 27.
    static Alphabet letters(int d);

    char glyph(Token t) const;
    Token from_glyph(char c) const;
    TokenSeq encode(const std::string& s) const;
    std::string decode(const TokenSeq& seq) const;

    bool contains(Token t) const { return t >= 0 && t < size; }
};

// Bijection on {0..d-1}.  Construction validates bijectivity.
class Permutation {
public:
    static Permutation identity(int d);
    static Permutation from_map(TokenSeq map);
    static Permutation random(int d, Rng& rng);

    Token operator()(Token t) const;
    int size() const { return static_cast<int>(map_.size()); }

    Permutation inverse() const;
    Permutation compose(const Permutation& inner) const; // this after inner
    TokenSeq apply(const TokenSeq& seq) const;

    const TokenSeq& map() const { return map_; }
    bool operator==(const Permutation& o) const { return map_ == o.map_; }

private:
    explicit Permutation(TokenSeq m) : map_(std::move(m)) {}
    TokenSeq map_;
};

// All d! permutations in lexicographic order of their maps.  Throws
// CapacityError for d > kMaxEnumerableAlphabet.
std::vector<Permutation> enumerate_permutations(int d);
std::uint64_t factorial(int d);

// Probability vector over an alphabet.  Entries must be nonnegative and sum
// to 1 within 1e-12; a drift up to 1e-9 is silently renormalised, anything
// worse is rejected.  Entries may be exactly zero.
class ProbVec {
public:
    static ProbVec uniform(int d);
    static ProbVec delta(int d, Token t);
    static ProbVec from_raw(std::vector<double> p);
    // Normalise arbitrary nonnegative weights (used where the caller has
    // unnormalised mass by construction, e.g. mixture telescoping).
    static ProbVec normalized(std::vector<double> w);

    int dim() const { return static_cast<int>(p_.size()); }
    double operator[](std::size_t i) const { return p_[i]; }
    const std::vector<double>& data() const { return p_; }

    ProbVec permuted(const Permutation& pi) const; // q[pi(i)] = p[i]

private:
    ProbVec() = default;
    std::vector<double> p_;
};

double l1_distance(const ProbVec& a, const ProbVec& b);
// KL(a || b) in nats; +inf when a puts mass where b has none.
double kl_divergence(const ProbVec& a, const ProbVec& b);

// log(sum(exp(x))) over finite and -inf entries; -inf iff all entries are.
double log_sum_exp(const std::vector<double>& x);

} // namespace lexi
