#pragma once

// d x d cipher-key readout shared by the oracle and the decipher pipeline.
// Rows are cipher symbols, columns plaintext tokens.  Soft form holds
// probabilities (each observed row sums to 1), vote form holds counts.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lexi/core.hpp"

namespace lexi {

struct KeyMatrix {
    int d = 0;
    bool soft = true;
    std::vector<double> m;        // row-major, d*d
    std::vector<char> row_seen;   // cipher symbols with any evidence

    static KeyMatrix zeros(int d, bool soft) {
        if (d < 1) throw std::invalid_argument("KeyMatrix needs d >= 1");
        KeyMatrix k;
        k.d = d;
        k.soft = soft;
        k.m.assign(static_cast<std::size_t>(d) * d, 0.0);
        k.row_seen.assign(static_cast<std::size_t>(d), 0);
        return k;
    }

    double& at(Token cipher, Token plain) {
        check(cipher, plain);
        return m[static_cast<std::size_t>(cipher) * d + static_cast<std::size_t>(plain)];
    }
    double at(Token cipher, Token plain) const {
        check(cipher, plain);
        return m[static_cast<std::size_t>(cipher) * d + static_cast<std::size_t>(plain)];
    }

    double row_sum(Token cipher) const {
        double s = 0.0;
        for (Token t = 0; t < d; ++t) s += at(cipher, t);
        return s;
    }
    double col_sum(Token plain) const {
        double s = 0.0;
        for (Token c = 0; c < d; ++c) s += at(c, plain);
        return s;
    }

    // Entropy (nats) of a row, normalising votes if needed.
    double row_entropy(Token cipher) const {
        const double total = row_sum(cipher);
        if (!(total > 0.0)) throw std::invalid_argument("row_entropy: empty row");
        double h = 0.0;
        for (Token t = 0; t < d; ++t) {
            const double p = at(cipher, t) / total;
            if (p > 0.0) h -= p * std::log(p);
        }
        return h;
    }
    double mean_row_entropy() const {
        double h = 0.0;
        int n = 0;
        for (Token c = 0; c < d; ++c) {
            if (!row_seen[static_cast<std::size_t>(c)]) continue;
            h += row_entropy(c);
            ++n;
        }
        if (n == 0) throw std::invalid_argument("mean_row_entropy: no observed rows");
        return h / n;
    }

private:
    void check(Token cipher, Token plain) const {
        if (cipher < 0 || cipher >= d || plain < 0 || plain >= d)
            throw std::out_of_range("KeyMatrix index (" + std::to_string(cipher) + "," +
                                    std::to_string(plain) + ") outside d=" + std::to_string(d));
    }
};

} // namespace lexi
