#include "lexi/core.hpp"

#include <algorithm>
#include <cmath>

namespace lexi {

// ---------------------------------------------------------------- Alphabet

Alphabet Alphabet::plain(int d) {
    if (d < 1) throw std::invalid_argument("alphabet size must be >= 1, got " + std::to_string(d));
    Alphabet a;
    a.size = d;
    return a;
}

Alphabet Alphabet::letters(int d) {
    if (d < 1 || d > 27)
        throw std::invalid_argument("letter alphabet supports d in [1,27], got " + std::to_string(d));
    Alphabet a;
    a.size = d;
    return a;
}

char Alphabet::glyph(Token t) const {
    if (!contains(t)) throw std::out_of_range("token " + std::to_string(t) + " outside alphabet of size " + std::to_string(size));
    return t == 26 ? ' ' : static_cast<char>('a' + t);
}

Token Alphabet::from_glyph(char c) const {
    Token t;
    if (c == ' ') t = 26;
    else if (c >= 'a' && c <= 'z') t = c - 'a';
    else throw std::invalid_argument(std::string("glyph '") + c + "' is not in a..z or space");
    if (!contains(t)) throw std::out_of_range(std::string("glyph '") + c + "' maps outside alphabet of size " + std::to_string(size));
    return t;
}

TokenSeq Alphabet::encode(const std::string& s) const {
    TokenSeq out;
    out.reserve(s.size());
    for (char c : s) out.push_back(from_glyph(c));
    return out;
}

std::string Alphabet::decode(const TokenSeq& seq) const {
    std::string out;
    out.reserve(seq.size());
    for (Token t : seq) out.push_back(glyph(t));
    return out;
}

// ------------------------------------------------------------- Permutation

Permutation Permutation::identity(int d) {
    if (d < 1) throw std::invalid_argument("permutation size must be >= 1");
    TokenSeq m(d);
    for (int i = 0; i < d; ++i) m[i] = i;
    return Permutation(std::move(m));
}

Permutation Permutation::from_map(TokenSeq map) {
    const int d = static_cast<int>(map.size());
    if (d < 1) throw std::invalid_argument("permutation map is empty");
    std::vector<char> seen(d, 0);
    for (Token t : map) {
        if (t < 0 || t >= d)
            throw std::invalid_argument("permutation entry " + std::to_string(t) +
                                        " outside [0," + std::to_string(d) + ")");
        if (seen[t]) throw std::invalid_argument("permutation maps two tokens to " + std::to_string(t));
        seen[t] = 1;
    }
    return Permutation(std::move(map));
}

Permutation Permutation::random(int d, Rng& rng) {
    Permutation p = identity(d);
    rng.shuffle(p.map_);
    return p;
}

Token Permutation::operator()(Token t) const {
    if (t < 0 || t >= size())
        throw std::out_of_range("token " + std::to_string(t) + " outside permutation domain of size " + std::to_string(size()));
    return map_[t];
}

Permutation Permutation::inverse() const {
    TokenSeq inv(map_.size());
    for (int i = 0; i < size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv));
}

Permutation Permutation::compose(const Permutation& inner) const {
    if (size() != inner.size()) throw std::invalid_argument("composing permutations of different sizes");
    TokenSeq m(map_.size());
    for (int i = 0; i < size(); ++i) m[i] = map_[inner.map_[i]];
    return Permutation(std::move(m));
}

TokenSeq Permutation::apply(const TokenSeq& seq) const {
    TokenSeq out;
    out.reserve(seq.size());
    for (Token t : seq) out.push_back((*this)(t));
    return out;
}

std::uint64_t factorial(int d) {
    std::uint64_t f = 1;
    for (int i = 2; i <= d; ++i) f *= static_cast<std::uint64_t>(i);
    return f;
}

std::vector<Permutation> enumerate_permutations(int d) {
    if (d < 1) throw std::invalid_argument("cannot enumerate permutations of empty alphabet");
    if (d > kMaxEnumerableAlphabet)
        throw CapacityError("permutation enumeration limited to alphabets of size <= " +
                                std::to_string(kMaxEnumerableAlphabet) + ", got " + std::to_string(d),
                            kMaxEnumerableAlphabet);
    TokenSeq m(d);
    for (int i = 0; i < d; ++i) m[i] = i;
    std::vector<Permutation> out;
    out.reserve(factorial(d));
    do {
        out.push_back(Permutation::from_map(m));
    } while (std::next_permutation(m.begin(), m.end()));
    return out;
}

// ----------------------------------------------------------------- ProbVec

namespace {
constexpr double kSumTol = 1e-12;   // accepted as-is
constexpr double kRenormTol = 1e-9; // silently renormalised
}

ProbVec ProbVec::uniform(int d) {
    if (d < 1) throw std::invalid_argument("probability vector needs dim >= 1");
    ProbVec v;
    v.p_.assign(d, 1.0 / d);
    return v;
}

ProbVec ProbVec::delta(int d, Token t) {
    if (t < 0 || t >= d) throw std::out_of_range("delta token outside alphabet");
    ProbVec v;
    v.p_.assign(d, 0.0);
    v.p_[t] = 1.0;
    return v;
}

ProbVec ProbVec::from_raw(std::vector<double> p) {
    if (p.empty()) throw std::invalid_argument("probability vector needs dim >= 1");
    double sum = 0.0;
    for (double x : p) {
        if (!(x >= 0.0)) // catches negatives and NaN
            throw std::invalid_argument("probability entry " + std::to_string(x) + " is negative or NaN");
        sum += x;
    }
    const double err = std::abs(sum - 1.0);
    if (err > kRenormTol)
        throw std::invalid_argument("probability vector sums to " + std::to_string(sum) +
                                    ", off by more than 1e-9");
    if (err > kSumTol) {
        for (double& x : p) x /= sum;
    }
    ProbVec v;
    v.p_ = std::move(p);
    return v;
}

ProbVec ProbVec::normalized(std::vector<double> w) {
    if (w.empty()) throw std::invalid_argument("probability vector needs dim >= 1");
    double sum = 0.0;
    for (double x : w) {
        if (!(x >= 0.0))
            throw std::invalid_argument("weight " + std::to_string(x) + " is negative or NaN");
        sum += x;
    }
    if (!(sum > 0.0)) throw std::invalid_argument("cannot normalise all-zero weights");
    for (double& x : w) x /= sum;
    ProbVec v;
    v.p_ = std::move(w);
    return v;
}

ProbVec ProbVec::permuted(const Permutation& pi) const {
    if (pi.size() != dim()) throw std::invalid_argument("permutation size does not match distribution dim");
    std::vector<double> q(p_.size());
    for (int i = 0; i < dim(); ++i) q[pi(i)] = p_[i];
    ProbVec v;
    v.p_ = std::move(q);
    return v;
}

double l1_distance(const ProbVec& a, const ProbVec& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("l1_distance: dimension mismatch");
    double s = 0.0;
    for (int i = 0; i < a.dim(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

double kl_divergence(const ProbVec& a, const ProbVec& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("kl_divergence: dimension mismatch");
    double s = 0.0;
    for (int i = 0; i < a.dim(); ++i) {
        if (a[i] == 0.0) continue;        // 0 log 0 = 0
        if (b[i] == 0.0) return std::numeric_limits<double>::infinity();
        s += a[i] * std::log(a[i] / b[i]);
    }
    return s;
}

double log_sum_exp(const std::vector<double>& x) {
    double m = kNegInf;
    for (double v : x) m = std::max(m, v);
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (double v : x) {
        if (v != kNegInf) s += std::exp(v - m);
    }
    return m + std::log(s);
}

} // namespace lexi
