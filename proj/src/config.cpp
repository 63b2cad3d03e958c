#include "lexi/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lexi/reflm.hpp" // ParseError

namespace lexi {
namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long to_int(const std::string& v, int line) {
    std::size_t used = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw ParseError(line, "expected an integer, got '" + v + "'");
    }
    if (used != v.size()) throw ParseError(line, "expected an integer, got '" + v + "'");
    return x;
}

double to_double(const std::string& v, int line) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ParseError(line, "expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw ParseError(line, "expected a number, got '" + v + "'");
    return x;
}

bool to_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ParseError(line, "expected true/false, got '" + v + "'");
}

std::uint64_t to_u64(const std::string& v, int line) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw ParseError(line, "expected an unsigned integer, got '" + v + "'");
    }
    if (used != v.size()) throw ParseError(line, "expected an unsigned integer, got '" + v + "'");
    return x;
}

std::vector<double> to_weights(const std::string& v, int line) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_double(trim(item), line));
    if (out.empty()) throw ParseError(line, "expected a comma separated weight list");
    return out;
}

void set_model(ModelConfig& m, const std::string& key, const std::string& v, int line) {
    if (key == "vocab") m.vocab = static_cast<int>(to_int(v, line));
    else if (key == "width") m.width = static_cast<int>(to_int(v, line));
    else if (key == "layers") m.layers = static_cast<int>(to_int(v, line));
    else if (key == "heads") m.heads = static_cast<int>(to_int(v, line));
    else if (key == "head_width") m.head_width = static_cast<int>(to_int(v, line));
    else if (key == "ffn_width") m.ffn_width = static_cast<int>(to_int(v, line));
    else if (key == "max_seq_len") m.max_seq_len = static_cast<int>(to_int(v, line));
    else if (key == "relpos_buckets") m.relpos_buckets = static_cast<int>(to_int(v, line));
    else if (key == "mode") {
        try {
            m.mode = mode_from_name(v);
        } catch (const std::exception& e) {
            throw ParseError(line, e.what());
        }
    } else if (key == "p_mix") m.p_mix = to_double(v, line);
    else if (key == "scale_gaussian") m.scale_gaussian = to_bool(v, line);
    else if (key == "normalize_mixed_rows") m.normalize_mixed_rows = to_bool(v, line);
    else if (key == "scale_bias_readout") m.scale_bias_readout = to_bool(v, line);
    else if (key == "precision") {
        if (v == "f32") m.precision = Precision::kF32;
        else if (v == "f64") m.precision = Precision::kF64;
        else throw ParseError(line, "precision must be f32 or f64, got '" + v + "'");
    } else throw ParseError(line, "unknown [model] key '" + key + "'");
}

void set_train(TrainSection& t, const std::string& key, const std::string& v, int line) {
    if (key == "steps") t.optim.steps = static_cast<int>(to_int(v, line));
    else if (key == "batch") t.optim.batch = static_cast<int>(to_int(v, line));
    else if (key == "peak_lr") t.optim.peak_lr = to_double(v, line);
    else if (key == "min_lr") t.optim.min_lr = to_double(v, line);
    else if (key == "beta1") t.optim.beta1 = to_double(v, line);
    else if (key == "beta2") t.optim.beta2 = to_double(v, line);
    else if (key == "adam_eps") t.optim.adam_eps = to_double(v, line);
    else if (key == "clip") t.optim.clip = to_double(v, line);
    else if (key == "log_every") t.optim.log_every = static_cast<int>(to_int(v, line));
    else if (key == "checkpoint_every") t.checkpoint_every = static_cast<int>(to_int(v, line));
    else if (key == "checkpoint") t.checkpoint = v;
    else if (key == "resume") t.resume = to_bool(v, line);
    else if (key == "source") {
        if (v != "markov" && v != "tasks")
            throw ParseError(line, "source must be markov or tasks, got '" + v + "'");
        t.source = v;
    } else if (key == "markov_d") t.markov_d = static_cast<int>(to_int(v, line));
    else if (key == "seq_len") t.seq_len = static_cast<int>(to_int(v, line));
    else throw ParseError(line, "unknown [train] key '" + key + "'");
}

void set_eval(EvalSection& e, const std::string& key, const std::string& v, int line) {
    if (key == "window") e.window = static_cast<int>(to_int(v, line));
    else if (key == "stride") e.stride = static_cast<int>(to_int(v, line));
    else if (key == "seq_len") e.seq_len = static_cast<int>(to_int(v, line));
    else if (key == "n_seqs") e.n_seqs = static_cast<int>(to_int(v, line));
    else if (key == "checkpoint") e.checkpoint = v;
    else if (key == "probe_steps") e.probe_steps = static_cast<int>(to_int(v, line));
    else if (key == "probe_hidden") e.probe_hidden = static_cast<int>(to_int(v, line));
    else throw ParseError(line, "unknown [eval] key '" + key + "'");
}

void set_oracle(OracleSection& o, const std::string& key, const std::string& v, int line) {
    if (key == "d") o.d = static_cast<int>(to_int(v, line));
    else if (key == "sigma") o.sigma = to_double(v, line);
    else if (key == "seq_len") o.seq_len = static_cast<int>(to_int(v, line));
    else if (key == "n_seqs") o.n_seqs = static_cast<int>(to_int(v, line));
    else if (key == "window") o.window = static_cast<int>(to_int(v, line));
    else if (key == "stride") o.stride = static_cast<int>(to_int(v, line));
    else throw ParseError(line, "unknown [oracle] key '" + key + "'");
}

void set_tasks(TasksSection& t, const std::string& key, const std::string& v, int line) {
    if (key == "kind") {
        try {
            t.gen.kind = task_kind_from_name(v);
        } catch (const std::exception& e) {
            throw ParseError(line, e.what());
        }
    } else if (key == "n_pairs") t.gen.n_pairs = static_cast<int>(to_int(v, line));
    else if (key == "query_count") t.gen.query_count = static_cast<int>(to_int(v, line));
    else if (key == "seq_length") t.gen.seq_length = static_cast<int>(to_int(v, line));
    else if (key == "pattern_size") t.gen.pattern_size = static_cast<int>(to_int(v, line));
    else if (key == "demos") t.gen.demos = static_cast<int>(to_int(v, line));
    else if (key == "sampling") {
        if (v == "uniform") t.gen.sampling = SamplingMode::kUniform;
        else if (v == "frequency") t.gen.sampling = SamplingMode::kFrequencyWeighted;
        else throw ParseError(line, "sampling must be uniform or frequency, got '" + v + "'");
    } else if (key == "freq_weights") t.gen.freq_weights = to_weights(v, line);
    else if (key == "n_instances") t.n_instances = static_cast<int>(to_int(v, line));
    else if (key == "file") t.file = v;
    else if (key == "adapter") {
        if (v != "neural" && v != "random" && v != "echo")
            throw ParseError(line, "adapter must be neural, random or echo, got '" + v + "'");
        t.adapter = v;
    } else throw ParseError(line, "unknown [tasks] key '" + key + "'");
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ParseError(line, "unterminated section header");
            section = trim(s.substr(1, s.size() - 2));
            if (section != "model" && section != "train" && section != "eval" &&
                section != "oracle" && section != "tasks")
                throw ParseError(line, "unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) throw ParseError(line, "expected key = value");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key.empty()) throw ParseError(line, "empty key");
        if (section.empty()) {
            if (key == "seed") cfg.seed = to_u64(value, line);
            else throw ParseError(line, "key '" + key + "' outside any section (only seed is global)");
        } else if (section == "model") set_model(cfg.model, key, value, line);
        else if (section == "train") set_train(cfg.train, key, value, line);
        else if (section == "eval") set_eval(cfg.eval, key, value, line);
        else if (section == "oracle") set_oracle(cfg.oracle, key, value, line);
        else set_tasks(cfg.tasks, key, value, line);
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

} // namespace lexi
