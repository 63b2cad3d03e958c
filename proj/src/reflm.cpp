#include "lexi/reflm.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lexi {

namespace {

// d^k with an explicit cap so a typo in a spec file cannot allocate the moon.
std::size_t context_count(int d, int k) {
    std::size_t n = 1;
    for (int i = 0; i < k; ++i) {
        n *= static_cast<std::size_t>(d);
        if (n > (1u << 24))
            throw CapacityError("markov table with d^k > 2^24 contexts refused (d=" +
                                    std::to_string(d) + ", k=" + std::to_string(k) + ")",
                                1 << 24);
    }
    return n;
}

void check_token_range(const TokenSeq& seq, int d, const char* what) {
    for (Token t : seq) {
        if (t < 0 || t >= d)
            throw std::out_of_range(std::string(what) + ": token " + std::to_string(t) +
                                    " outside alphabet of size " + std::to_string(d));
    }
}

std::string format_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

} // namespace

// --------------------------------------------------------- ReferenceModel

double ReferenceModel::seq_logprob(const TokenSeq& seq) const {
    if (seq.empty()) throw std::invalid_argument("seq_logprob: sequence must be nonempty");
    check_token_range(seq, alphabet_size(), "seq_logprob");
    double lp = 0.0;
    TokenSeq prefix;
    prefix.reserve(seq.size());
    for (Token t : seq) {
        ProbVec c = ProbVec::uniform(1);
        try {
            c = cond_dist(prefix);
        } catch (const DeadPrefixError&) {
            return kNegInf;
        }
        const double p = c[static_cast<std::size_t>(t)];
        if (p == 0.0) return kNegInf;
        lp += std::log(p);
        prefix.push_back(t);
    }
    return lp;
}

// ------------------------------------------------------------ MarkovModel

MarkovModel::MarkovModel(int d, int k, std::vector<ProbVec> rows)
    : MarkovModel(d, k, std::move(rows),
                  ProbVec::uniform(static_cast<int>(context_count(d, k)))) {}

MarkovModel::MarkovModel(int d, int k, std::vector<ProbVec> rows, ProbVec initial)
    : d_(d), k_(k), rows_(std::move(rows)), init_(std::move(initial)) {
    if (d_ < 1) throw std::invalid_argument("markov: alphabet size must be >= 1");
    if (k_ < 0) throw std::invalid_argument("markov: order must be >= 0");
    const std::size_t n_ctx = context_count(d_, k_);
    if (rows_.size() != n_ctx)
        throw std::invalid_argument("markov: expected " + std::to_string(n_ctx) +
                                    " table rows, got " + std::to_string(rows_.size()));
    for (const ProbVec& r : rows_) {
        if (r.dim() != d_)
            throw std::invalid_argument("markov: table row has dim " + std::to_string(r.dim()) +
                                        ", alphabet is " + std::to_string(d_));
    }
    if (init_.dim() != static_cast<int>(n_ctx))
        throw std::invalid_argument("markov: initial distribution has dim " +
                                    std::to_string(init_.dim()) + ", expected " +
                                    std::to_string(n_ctx));
}

std::size_t MarkovModel::context_index(const TokenSeq& ctx) const {
    if (static_cast<int>(ctx.size()) != k_)
        throw std::invalid_argument("markov: context has length " + std::to_string(ctx.size()) +
                                    ", order is " + std::to_string(k_));
    check_token_range(ctx, d_, "markov context");
    std::size_t idx = 0;
    for (Token t : ctx) idx = idx * static_cast<std::size_t>(d_) + static_cast<std::size_t>(t);
    return idx;
}

const ProbVec& MarkovModel::row(const TokenSeq& ctx) const {
    return rows_[context_index(ctx)];
}

ProbVec MarkovModel::cond_dist(const TokenSeq& prefix) const {
    check_token_range(prefix, d_, "markov prefix");
    const int m = static_cast<int>(prefix.size());
    if (m >= k_) {
        TokenSeq ctx(prefix.end() - k_, prefix.end());
        return rows_[context_index(ctx)];
    }
    // Inside the initial segment: marginalise the length-k prefix
    // distribution over contexts agreeing with what we have seen.
    const std::size_t n_ctx = rows_.size();
    std::vector<double> mass(static_cast<std::size_t>(d_), 0.0);
    double denom = 0.0;
    TokenSeq ctx(static_cast<std::size_t>(k_));
    for (std::size_t idx = 0; idx < n_ctx; ++idx) {
        std::size_t rem = idx;
        for (int i = k_ - 1; i >= 0; --i) {
            ctx[static_cast<std::size_t>(i)] = static_cast<Token>(rem % static_cast<std::size_t>(d_));
            rem /= static_cast<std::size_t>(d_);
        }
        bool match = true;
        for (int i = 0; i < m; ++i) {
            if (ctx[static_cast<std::size_t>(i)] != prefix[static_cast<std::size_t>(i)]) {
                match = false;
                break;
            }
        }
        if (!match) continue;
        const double w = init_[idx];
        denom += w;
        mass[static_cast<std::size_t>(ctx[static_cast<std::size_t>(m)])] += w;
    }
    if (denom == 0.0)
        throw DeadPrefixError("markov: prefix has zero mass under the initial distribution");
    return ProbVec::normalized(std::move(mass));
}

std::string MarkovModel::describe() const {
    return "markov d=" + std::to_string(d_) + " k=" + std::to_string(k_);
}

// ------------------------------------------------------------ ToyLanguage

ToyLanguage::ToyLanguage(int d, std::vector<TokenSeq> strings, std::vector<double> weights)
    : d_(d), strings_(std::move(strings)), weights_(std::move(weights)) {
    if (d_ < 1) throw std::invalid_argument("toy: alphabet size must be >= 1");
    if (strings_.empty()) throw std::invalid_argument("toy: needs at least one string");
    if (strings_.size() != weights_.size())
        throw std::invalid_argument("toy: " + std::to_string(strings_.size()) + " strings but " +
                                    std::to_string(weights_.size()) + " weights");
    len_ = static_cast<int>(strings_[0].size());
    if (len_ < 1) throw std::invalid_argument("toy: strings must be nonempty");
    for (std::size_t i = 0; i < strings_.size(); ++i) {
        if (static_cast<int>(strings_[i].size()) != len_)
            throw std::invalid_argument("toy: string " + std::to_string(i) + " has length " +
                                        std::to_string(strings_[i].size()) + ", expected " +
                                        std::to_string(len_));
        check_token_range(strings_[i], d_, "toy string");
        for (std::size_t j = 0; j < i; ++j) {
            if (strings_[j] == strings_[i])
                throw std::invalid_argument("toy: duplicate string at index " + std::to_string(i));
        }
        if (!(weights_[i] > 0.0))
            throw std::invalid_argument("toy: weight " + std::to_string(i) + " must be positive");
    }
    // Validate the sum with the shared tolerance policy, then keep the
    // (possibly renormalised) values.
    weights_ = ProbVec::from_raw(std::move(weights_)).data();
}

double ToyLanguage::prefix_mass(const TokenSeq& prefix) const {
    check_token_range(prefix, d_, "toy prefix");
    if (static_cast<int>(prefix.size()) > len_) return 0.0;
    double mass = 0.0;
    for (std::size_t i = 0; i < strings_.size(); ++i) {
        if (std::equal(prefix.begin(), prefix.end(), strings_[i].begin())) mass += weights_[i];
    }
    return mass;
}

ProbVec ToyLanguage::cond_dist(const TokenSeq& prefix) const {
    check_token_range(prefix, d_, "toy prefix");
    if (static_cast<int>(prefix.size()) >= len_)
        throw DeadPrefixError("toy: no continuations past string length " + std::to_string(len_));
    std::vector<double> mass(static_cast<std::size_t>(d_), 0.0);
    double denom = 0.0;
    for (std::size_t i = 0; i < strings_.size(); ++i) {
        if (!std::equal(prefix.begin(), prefix.end(), strings_[i].begin())) continue;
        denom += weights_[i];
        mass[static_cast<std::size_t>(strings_[i][prefix.size()])] += weights_[i];
    }
    if (denom == 0.0) throw DeadPrefixError("toy: prefix has zero mass");
    return ProbVec::normalized(std::move(mass));
}

double ToyLanguage::seq_logprob(const TokenSeq& seq) const {
    if (seq.empty()) throw std::invalid_argument("seq_logprob: sequence must be nonempty");
    // Telescoping product of conditionals collapses to the prefix mass.
    const double mass = prefix_mass(seq);
    return mass > 0.0 ? std::log(mass) : kNegInf;
}

std::string ToyLanguage::describe() const {
    return "toy d=" + std::to_string(d_) + " (" + std::to_string(strings_.size()) +
           " strings of length " + std::to_string(len_) + ")";
}

// ---------------------------------------------------------- SmoothedModel

SmoothedModel::SmoothedModel(std::shared_ptr<const ReferenceModel> base, double sigma)
    : base_(std::move(base)), sigma_(sigma) {
    if (!base_) throw std::invalid_argument("smooth: null base model");
    if (!(sigma_ >= 0.0 && sigma_ <= 1.0))
        throw std::invalid_argument("smooth: sigma must be in [0,1], got " + std::to_string(sigma_));
}

ProbVec SmoothedModel::cond_dist(const TokenSeq& prefix) const {
    const int d = alphabet_size();
    const double floor = sigma_ / d;
    std::vector<double> p;
    try {
        const ProbVec base = base_->cond_dist(prefix);
        p.resize(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) p[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] * (1.0 - sigma_) + floor;
    } catch (const DeadPrefixError&) {
        // Dead prefix: only the smoothing mass is ever emitted there, and it
        // is symmetric, so the conditional is exactly uniform.
        if (sigma_ == 0.0) throw;
        p.assign(static_cast<std::size_t>(d), 1.0 / d);
    }
    return ProbVec::from_raw(std::move(p));
}

std::string SmoothedModel::describe() const {
    return "smoothed(sigma=" + format_real(sigma_) + ") " + base_->describe();
}

std::shared_ptr<const ReferenceModel> smooth(std::shared_ptr<const ReferenceModel> base,
                                             double sigma) {
    return std::make_shared<SmoothedModel>(std::move(base), sigma);
}

// ------------------------------------------------------------ model files

namespace {

struct Line {
    int number;
    std::string text;
};

std::vector<Line> significant_lines(const std::string& text) {
    std::vector<Line> out;
    std::istringstream in(text);
    std::string raw;
    int number = 0;
    while (std::getline(in, raw)) {
        ++number;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        std::size_t a = raw.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        std::size_t b = raw.find_last_not_of(" \t\r");
        out.push_back({number, raw.substr(a, b - a + 1)});
    }
    return out;
}

long parse_int(const std::string& s, int line, const char* what) {
    char* end = nullptr;
    errno = 0;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0')
        throw ParseError(line, std::string("bad integer for ") + what + ": '" + s + "'");
    return v;
}

double parse_real(const std::string& s, int line, const char* what) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || std::isnan(v))
        throw ParseError(line, std::string("bad real for ") + what + ": '" + s + "'");
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

// "key=value key=value" fields separated by whitespace; values may not
// contain spaces (token lists use commas, strings use glyphs).
std::vector<std::pair<std::string, std::string>> parse_fields(const std::string& s, int line) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(s);
    std::string word;
    while (in >> word) {
        const std::size_t eq = word.find('=');
        if (eq == std::string::npos)
            throw ParseError(line, "expected key=value, got '" + word + "'");
        out.emplace_back(word.substr(0, eq), word.substr(eq + 1));
    }
    return out;
}

TokenSeq parse_ctx_tokens(const std::string& s, int line, int d) {
    TokenSeq ctx;
    if (s.empty()) return ctx;
    for (const std::string& part : split(s, ',')) {
        const long t = parse_int(part, line, "context token");
        if (t < 0 || t >= d)
            throw ParseError(line, "context token " + std::to_string(t) +
                                       " outside alphabet of size " + std::to_string(d));
        ctx.push_back(static_cast<Token>(t));
    }
    return ctx;
}

std::shared_ptr<const ReferenceModel> parse_markov(const std::vector<Line>& lines,
                                                   std::size_t body_start, int d, int k) {
    const std::size_t n_ctx = context_count(d, k);
    std::vector<std::vector<double>> raw_rows(n_ctx);
    std::vector<int> row_line(n_ctx, 0);
    std::vector<double> init_mass(n_ctx, 0.0);
    bool has_init = false;

    for (std::size_t li = body_start; li < lines.size(); ++li) {
        const Line& ln = lines[li];
        std::string body = ln.text;
        bool is_init = false;
        if (body.rfind("init", 0) == 0 && (body.size() == 4 || body[4] == ' ' || body[4] == '\t')) {
            is_init = true;
            body = body.substr(4);
        }
        auto fields = parse_fields(body, ln.number);
        if (is_init) {
            if (k == 0) throw ParseError(ln.number, "init lines are meaningless for k=0");
            if (fields.size() != 2 || fields[0].first != "ctx" || fields[1].first != "w")
                throw ParseError(ln.number, "init line must be 'init ctx=<tokens> w=<real>'");
            TokenSeq ctx = parse_ctx_tokens(fields[0].second, ln.number, d);
            if (static_cast<int>(ctx.size()) != k)
                throw ParseError(ln.number, "init context has " + std::to_string(ctx.size()) +
                                                " tokens, order is " + std::to_string(k));
            std::size_t idx = 0;
            for (Token t : ctx) idx = idx * static_cast<std::size_t>(d) + static_cast<std::size_t>(t);
            const double w = parse_real(fields[1].second, ln.number, "init weight");
            if (w < 0.0) throw ParseError(ln.number, "init weight must be >= 0");
            init_mass[idx] += w;
            has_init = true;
            continue;
        }
        if (fields.size() != 2 || fields[0].first != "ctx" || fields[1].first != "p")
            throw ParseError(ln.number, "markov line must be 'ctx=<tokens> p=<reals>'");
        TokenSeq ctx = parse_ctx_tokens(fields[0].second, ln.number, d);
        if (static_cast<int>(ctx.size()) != k)
            throw ParseError(ln.number, "context has " + std::to_string(ctx.size()) +
                                            " tokens, order is " + std::to_string(k));
        std::size_t idx = 0;
        for (Token t : ctx) idx = idx * static_cast<std::size_t>(d) + static_cast<std::size_t>(t);
        if (row_line[idx] != 0)
            throw ParseError(ln.number, "context already defined on line " +
                                            std::to_string(row_line[idx]));
        std::vector<double> p;
        for (const std::string& part : split(fields[1].second, ','))
            p.push_back(parse_real(part, ln.number, "probability"));
        if (static_cast<int>(p.size()) != d)
            throw ParseError(ln.number, "row has " + std::to_string(p.size()) +
                                            " entries, alphabet is " + std::to_string(d));
        raw_rows[idx] = std::move(p);
        row_line[idx] = ln.number;
    }

    std::vector<ProbVec> rows;
    rows.reserve(n_ctx);
    for (std::size_t i = 0; i < n_ctx; ++i) {
        if (row_line[i] == 0)
            throw ParseError(lines.empty() ? 0 : lines.back().number,
                             "markov table is missing context index " + std::to_string(i));
        try {
            rows.push_back(ProbVec::from_raw(std::move(raw_rows[i])));
        } catch (const std::invalid_argument& e) {
            throw ParseError(row_line[i], e.what());
        }
    }
    if (!has_init) return std::make_shared<MarkovModel>(d, k, std::move(rows));
    return std::make_shared<MarkovModel>(d, k, std::move(rows), ProbVec::normalized(std::move(init_mass)));
}

std::shared_ptr<const ReferenceModel> parse_toy(const std::vector<Line>& lines,
                                                std::size_t body_start, int d) {
    if (d > 26) throw ParseError(lines[0].number, "toy glyph notation supports d <= 26");
    std::vector<TokenSeq> strings;
    std::vector<double> weights;
    for (std::size_t li = body_start; li < lines.size(); ++li) {
        const Line& ln = lines[li];
        auto fields = parse_fields(ln.text, ln.number);
        if (fields.size() != 2 || fields[0].first != "s" || fields[1].first != "w")
            throw ParseError(ln.number, "toy line must be 's=<string> w=<real>'");
        TokenSeq s;
        for (char c : fields[0].second) {
            if (c < 'a' || c >= static_cast<char>('a' + d))
                throw ParseError(ln.number, std::string("glyph '") + c +
                                                "' outside alphabet of size " + std::to_string(d));
            s.push_back(c - 'a');
        }
        strings.push_back(std::move(s));
        weights.push_back(parse_real(fields[1].second, ln.number, "weight"));
    }
    try {
        return std::make_shared<ToyLanguage>(d, std::move(strings), std::move(weights));
    } catch (const std::invalid_argument& e) {
        throw ParseError(lines.empty() ? 0 : lines.back().number, e.what());
    }
}

} // namespace

std::shared_ptr<const ReferenceModel> parse_model(const std::string& text) {
    const std::vector<Line> lines = significant_lines(text);
    if (lines.empty()) throw ParseError(0, "empty model file");
    const Line& head = lines[0];
    std::istringstream in(head.text);
    std::string kind;
    in >> kind;
    std::string rest;
    std::getline(in, rest);
    auto head_fields = parse_fields(rest, head.number);

    if (kind == "markov") {
        int d = -1, k = -1;
        for (auto& [key, val] : head_fields) {
            if (key == "d") d = static_cast<int>(parse_int(val, head.number, "d"));
            else if (key == "k") k = static_cast<int>(parse_int(val, head.number, "k"));
            else throw ParseError(head.number, "unknown header field '" + key + "'");
        }
        if (d < 1) throw ParseError(head.number, "markov header needs d >= 1");
        if (k < 0) throw ParseError(head.number, "markov header needs k >= 0");
        return parse_markov(lines, 1, d, k);
    }
    if (kind == "toy") {
        int d = -1;
        for (auto& [key, val] : head_fields) {
            if (key == "d") d = static_cast<int>(parse_int(val, head.number, "d"));
            else throw ParseError(head.number, "unknown header field '" + key + "'");
        }
        if (d < 1) throw ParseError(head.number, "toy header needs d >= 1");
        return parse_toy(lines, 1, d);
    }
    throw ParseError(head.number, "unknown model kind '" + kind + "' (expected markov or toy)");
}

std::shared_ptr<const ReferenceModel> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_model(ss.str());
}

std::string serialize_model(const ReferenceModel& model) {
    std::ostringstream out;
    if (const auto* m = dynamic_cast<const MarkovModel*>(&model)) {
        const int d = m->alphabet_size(), k = m->order();
        out << "markov d=" << d << " k=" << k << "\n";
        const std::size_t n_ctx = context_count(d, k);
        // Emit init lines only when the initial distribution is not uniform.
        bool uniform = true;
        for (std::size_t i = 0; i < n_ctx; ++i) {
            if (std::abs(m->initial()[i] - 1.0 / static_cast<double>(n_ctx)) > 0.0) {
                uniform = false;
                break;
            }
        }
        TokenSeq ctx(static_cast<std::size_t>(k));
        for (std::size_t idx = 0; idx < n_ctx; ++idx) {
            std::size_t rem = idx;
            for (int i = k - 1; i >= 0; --i) {
                ctx[static_cast<std::size_t>(i)] = static_cast<Token>(rem % static_cast<std::size_t>(d));
                rem /= static_cast<std::size_t>(d);
            }
            auto write_ctx = [&] {
                for (int i = 0; i < k; ++i) out << (i ? "," : "") << ctx[static_cast<std::size_t>(i)];
            };
            if (!uniform) {
                out << "init ctx=";
                write_ctx();
                out << " w=" << format_real(m->initial()[idx]) << "\n";
            }
            out << "ctx=";
            write_ctx();
            out << " p=";
            const ProbVec& row = m->row(ctx);
            for (int v = 0; v < d; ++v) out << (v ? "," : "") << format_real(row[static_cast<std::size_t>(v)]);
            out << "\n";
        }
        return out.str();
    }
    if (const auto* t = dynamic_cast<const ToyLanguage*>(&model)) {
        out << "toy d=" << t->alphabet_size() << "\n";
        for (std::size_t i = 0; i < t->strings().size(); ++i) {
            out << "s=";
            for (Token tok : t->strings()[i]) out << static_cast<char>('a' + tok);
            out << " w=" << format_real(t->weights()[i]) << "\n";
        }
        return out.str();
    }
    throw std::invalid_argument("serialize_model: only markov and toy models have a file form");
}

void save_model(const ReferenceModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write model file: " + path);
    out << serialize_model(model);
}

// --------------------------------------------------------------- fixtures

std::shared_ptr<const MarkovModel> diagonal_markov(int d, double diag) {
    if (d < 2) throw std::invalid_argument("diagonal_markov needs d >= 2");
    if (!(diag > 0.0 && diag < 1.0)) throw std::invalid_argument("diagonal_markov needs diag in (0,1)");
    std::vector<ProbVec> rows;
    rows.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        std::vector<double> p(static_cast<std::size_t>(d), (1.0 - diag) / (d - 1));
        p[static_cast<std::size_t>(i)] = diag;
        rows.push_back(ProbVec::normalized(std::move(p)));
    }
    return std::make_shared<MarkovModel>(d, 1, std::move(rows));
}

std::shared_ptr<const MarkovModel> identifiable_markov(int d) {
    if (d < 3) throw std::invalid_argument("identifiable_markov needs d >= 3");
    std::vector<ProbVec> rows;
    rows.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        const int n_i = 1 + (i % (d - 1));
        std::vector<double> p(static_cast<std::size_t>(d), 0.0);
        p[static_cast<std::size_t>(i)] = 0.8;
        for (int j = 0; j < n_i; ++j)
            p[static_cast<std::size_t>((i + 1 + j) % d)] = 0.2 / n_i;
        rows.push_back(ProbVec::normalized(std::move(p)));
    }
    return std::make_shared<MarkovModel>(d, 1, std::move(rows));
}

std::shared_ptr<const MarkovModel> successor_markov(int d) {
    if (d < 3) throw std::invalid_argument("successor_markov needs d >= 3");
    std::vector<ProbVec> rows;
    rows.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        const double q = 0.995 - 0.035 * i / (d - 1);
        std::vector<double> p(static_cast<std::size_t>(d), (1.0 - q) / d);
        p[static_cast<std::size_t>((i + 1) % d)] += q;
        rows.push_back(ProbVec::normalized(std::move(p)));
    }
    return std::make_shared<MarkovModel>(d, 1, std::move(rows));
}

std::shared_ptr<const MarkovModel> random_markov(int d, int k, Rng& rng) {
    const std::size_t n_ctx = context_count(d, k);
    auto draw_simplex = [&](std::size_t n) {
        std::vector<double> w(n);
        for (double& x : w) x = -std::log(1.0 - rng.next_double());
        return ProbVec::normalized(std::move(w));
    };
    std::vector<ProbVec> rows;
    rows.reserve(n_ctx);
    for (std::size_t i = 0; i < n_ctx; ++i) rows.push_back(draw_simplex(static_cast<std::size_t>(d)));
    ProbVec init = draw_simplex(n_ctx);
    return std::make_shared<MarkovModel>(d, k, std::move(rows), std::move(init));
}

std::shared_ptr<const ToyLanguage> two_string_toy() {
    // 'a' = 0, 'b' = 1
    std::vector<TokenSeq> strings = {
        {1, 0, 1, 1, 1, 1}, // babbbb
        {0, 1, 0, 1, 0, 1}, // ababab
    };
    return std::make_shared<ToyLanguage>(2, std::move(strings), std::vector<double>{0.5, 0.5});
}

TokenSeq sample_sequence(const ReferenceModel& model, int len, Rng& rng) {
    if (len < 1) throw std::invalid_argument("sample_sequence: len must be >= 1");
    TokenSeq seq;
    seq.reserve(static_cast<std::size_t>(len));
    for (int t = 0; t < len; ++t) {
        const ProbVec c = model.cond_dist(seq); // DeadPrefixError propagates
        seq.push_back(static_cast<Token>(rng.next_categorical(c.data())));
    }
    return seq;
}

std::vector<TokenSeq> sample_corpus(const ReferenceModel& model, int n_seqs, int len,
                                    std::uint64_t seed) {
    std::vector<TokenSeq> out;
    out.reserve(static_cast<std::size_t>(n_seqs));
    for (int i = 0; i < n_seqs; ++i) {
        Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
        out.push_back(sample_sequence(model, len, rng));
    }
    return out;
}

} // namespace lexi
