#pragma once

// Run configuration: a small INI dialect shared by the command line tool.
// Sections: [model] [train] [eval] [oracle] [tasks]. Unknown keys are errors.

#include <cstdint>
#include <string>
#include <vector>

#include "lexi/harness.hpp"
#include "lexi/neural.hpp"

namespace lexi {

struct TrainSection {
    OptimConfig optim;
    int checkpoint_every = 0;       // steps between periodic saves, 0 = final only
    std::string checkpoint;         // stable checkpoint path, empty = in-memory run
    bool resume = false;            // pick up from `checkpoint` when it exists
    std::string source = "markov";  // markov | tasks
    int markov_d = 16;              // alphabet of the markov source
    int seq_len = 512;
};

struct EvalSection {
    int window = 100;
    int stride = 50;
    int seq_len = 512;
    int n_seqs = 100;
    std::string checkpoint;  // model to evaluate
    int probe_steps = 2000;
    int probe_hidden = 0;    // 0 = model width
};

struct OracleSection {
    int d = 6;
    double sigma = 1e-4;
    int seq_len = 512;
    int n_seqs = 100;
    int window = 100;
    int stride = 50;
};

struct TasksSection {
    TaskGenConfig gen;
    int n_instances = 200;
    std::string file;               // task file to write / read
    std::string adapter = "neural"; // neural | random | echo
};

struct RunConfig {
    std::uint64_t seed = 1;
    ModelConfig model;
    TrainSection train;
    EvalSection eval;
    OracleSection oracle;
    TasksSection tasks;
};

// Throws ParseError with a 1-based line number on any malformed input.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

} // namespace lexi
