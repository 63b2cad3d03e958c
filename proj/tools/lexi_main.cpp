// lexi: command line front end for the oracle, transformer, decipher and
// task experiments.  Every command reads one INI config plus a few flags and
// reports each artifact it produces on a "wrote <path>" line.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lexi/config.hpp"
#include "lexi/csv.hpp"
#include "lexi/decipher.hpp"
#include "lexi/harness.hpp"
#include "lexi/neural.hpp"
#include "lexi/oracle.hpp"
#include "lexi/reflm.hpp"

namespace fs = std::filesystem;
using namespace lexi;

namespace {

// ------------------------------------------------------------- plumbing

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool has_seed = false;
};

int usage() {
    std::cerr <<
        "usage: lexi <command> [--config FILE] [--seed N] [--out DIR]\n"
        "\n"
        "commands:\n"
        "  oracle-converge   predictive convergence curves for the exact oracle\n"
        "  oracle-decipher   windowed decipherment precision from posterior marginals\n"
        "  train             fit the toy transformer, optionally writing a checkpoint\n"
        "  eval-ppl          position wise nll and moving-window perplexity of a checkpoint\n"
        "  probe-train       fit the readout probe on frozen gaussian-mode activations\n"
        "  decipher-eval     score the trained probe on fresh ciphertexts\n"
        "  tasks-gen         write a task file from the [tasks] settings\n"
        "  tasks-eval        score an adapter on a task file\n";
    return 2;
}

CliArgs parse_args(int argc, char** argv) {
    CliArgs args;
    if (argc < 2) throw std::invalid_argument("missing command");
    args.command = argv[1];
    for (int i = 2; i < argc; ++i) {
        const std::string flag = argv[i];
        auto need_value = [&](const char* name) -> std::string {
            if (i + 1 >= argc) throw std::invalid_argument(std::string(name) + " needs a value");
            return argv[++i];
        };
        if (flag == "--config") args.config_path = need_value("--config");
        else if (flag == "--seed") {
            args.seed = std::stoull(need_value("--seed"));
            args.has_seed = true;
        } else if (flag == "--out") args.out_dir = need_value("--out");
        else throw std::invalid_argument("unknown flag '" + flag + "'");
    }
    return args;
}

std::string utc_timestamp() {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[20];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

std::string out_path(const CliArgs& args, const std::string& stem) {
    fs::create_directories(args.out_dir);
    return (fs::path(args.out_dir) / (stem + "-" + utc_timestamp() + ".csv")).string();
}

void report(const std::string& path) { std::cout << "wrote " << path << "\n"; }

std::shared_ptr<const ReferenceModel> markov_base(int d) { return identifiable_markov(d); }

std::unique_ptr<SequenceSource> make_source(const RunConfig& cfg, int seq_len,
                                            std::uint64_t seed) {
    if (cfg.train.source == "markov")
        return std::make_unique<MarkovSource>(markov_base(cfg.train.markov_d), seq_len, seed);
    return std::make_unique<TaskSource>(cfg.tasks.gen, seq_len, seed);
}

std::string require_checkpoint(const RunConfig& cfg) {
    if (!cfg.eval.checkpoint.empty()) return cfg.eval.checkpoint;
    if (!cfg.train.checkpoint.empty()) return cfg.train.checkpoint;
    throw std::invalid_argument("no checkpoint configured ([eval] or [train] checkpoint key)");
}

// ----------------------------------------------------- oracle commands

int cmd_oracle_converge(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    const OracleSection& o = cfg.oracle;
    ConvergenceResult res =
        run_convergence_experiment(markov_base(o.d), o.sigma, o.seq_len, o.n_seqs, seed);
    const std::string path = out_path(args, "oracle-converge");
    write_csv(res, path);
    const std::size_t n = res.mean_l1.size();
    std::printf("oracle-converge: d=%d sigma=%g n_seqs=%d\n", o.d, o.sigma, o.n_seqs);
    std::printf("  mean_l1 first=%.6f mid=%.6f last=%.6f\n", res.mean_l1.front(),
                res.mean_l1[n / 2], res.mean_l1.back());
    report(path);
    return 0;
}

int cmd_oracle_decipher(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    const OracleSection& o = cfg.oracle;
    OracleDecipherParams p;
    p.sigma = o.sigma;
    p.seq_len = o.seq_len;
    p.n_seqs = o.n_seqs;
    p.window = static_cast<std::size_t>(o.window);
    p.stride = static_cast<std::size_t>(o.stride);
    p.seed = seed;
    OracleDecipherResult res = run_oracle_decipher(markov_base(o.d), p);
    const std::string prec_path = out_path(args, "oracle-decipher");
    write_precision_csv(res.windows, prec_path);
    const std::string key_path = out_path(args, "oracle-keymatrix");
    write_key_matrix_csv(res.last_window_marginals, Alphabet::letters(o.d), key_path);
    std::printf("oracle-decipher: d=%d n_seqs=%d window=%d\n", o.d, o.n_seqs, o.window);
    std::printf("  precision first=%.4f last=%.4f aggregate=%.4f (incl %.4f)\n",
                res.windows.front().mean_precision, res.windows.back().mean_precision,
                res.aggregate_precision, res.aggregate_precision_inclusive);
    std::printf("  soft-key row entropy start=%zu:%.4f start=%zu:%.4f nats\n",
                res.entropy_early_start, res.entropy_early, res.entropy_late_start,
                res.entropy_late);
    report(prec_path);
    report(key_path);
    return 0;
}

// ------------------------------------------------------ neural commands

template <typename T>
int run_train(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    ModelConfig mc = cfg.model;
    mc.validate();
    auto source = make_source(cfg, cfg.train.seq_len, derive_seed(seed, 2));
    if (source->vocab() > mc.vocab)
        throw std::invalid_argument("model vocab " + std::to_string(mc.vocab) +
                                    " smaller than source vocab " +
                                    std::to_string(source->vocab()));
    TrainOptions options;
    options.metrics_csv = out_path(args, "train");
    options.checkpoint_path = cfg.train.checkpoint;
    options.checkpoint_every = cfg.train.checkpoint_every;
    options.quiet = false;
    if (cfg.train.resume) {
        if (cfg.train.checkpoint.empty())
            throw std::invalid_argument("resume=true needs a [train] checkpoint path");
        if (!fs::exists(cfg.train.checkpoint))
            throw std::runtime_error("resume requested but checkpoint not found: " +
                                     cfg.train.checkpoint);
        options.resume_from = cfg.train.checkpoint;
    }
    TrainResult res = train<T>(mc, *source, cfg.train.optim, seed, options);
    std::printf("train: mode=%s source=%s steps=%llu final_loss=%.6f\n", mode_name(mc.mode),
                cfg.train.source.c_str(), static_cast<unsigned long long>(res.steps_done),
                res.final_loss);
    report(options.metrics_csv);
    if (!res.checkpoint_path.empty()) report(res.checkpoint_path);
    return 0;
}

int cmd_train(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    if (cfg.model.precision == Precision::kF64) return run_train<double>(cfg, args, seed);
    return run_train<float>(cfg, args, seed);
}

template <typename T>
int run_eval_ppl(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed,
                 const std::string& ckpt) {
    TrainState<T> state = load_checkpoint<T>(ckpt);
    EvalConfig ec;
    ec.window = cfg.eval.window;
    ec.seq_len = cfg.eval.seq_len;
    ec.n_seqs = cfg.eval.n_seqs;
    ec.seed = seed;
    ec.validate();
    auto source = make_source(cfg, ec.seq_len, derive_seed(seed, 0xEA1D));
    PplSeries series = eval_positionwise_nll<T>(state.cfg, state.params, *source, ec.n_seqs,
                                                derive_seed(seed, 0xEA1));
    const std::vector<double>& nll = series.mean_nll;
    std::vector<double> probs(nll.size());
    for (std::size_t t = 0; t < nll.size(); ++t) probs[t] = std::exp(-nll[t]);
    const int k = ec.window;
    const std::vector<double> ma = moving_average_perplexity(probs, k);

    const std::string path = out_path(args, "eval-ppl");
    CsvWriter csv(path, "position,mean_nll,ma_ppl,n_seqs,seed");
    for (std::size_t t = 0; t < nll.size(); ++t) {
        // ma_ppl at position t covers the trailing window (t-k, t].
        std::string cell;
        if (t + 1 >= static_cast<std::size_t>(k)) cell = csv_num(ma[t + 1 - k]);
        csv.row({csv_num(static_cast<long long>(t)), csv_num(nll[t]), cell,
                 csv_num(series.n_seqs), csv_num(seed)});
    }
    csv.close();

    const std::size_t n = nll.size();
    const double early = band_ppl(nll, 0, static_cast<std::size_t>(k));
    const double late = band_ppl(nll, n - static_cast<std::size_t>(k), n);
    std::printf("eval-ppl: mode=%s step=%llu n_seqs=%d\n", mode_name(state.cfg.mode),
                static_cast<unsigned long long>(state.step), series.n_seqs);
    std::printf("  band ppl early[0,%d)=%.4f late[%zu,%zu)=%.4f\n", k, early,
                n - static_cast<std::size_t>(k), n, late);
    report(path);
    return 0;
}

int cmd_eval_ppl(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    const std::string ckpt = require_checkpoint(cfg);
    CheckpointMeta meta = peek_checkpoint(ckpt);
    if (meta.precision == Precision::kF64) return run_eval_ppl<double>(cfg, args, seed, ckpt);
    return run_eval_ppl<float>(cfg, args, seed, ckpt);
}

// ------------------------------------------------------ probe commands

std::string probe_path_for(const std::string& ckpt) { return ckpt + ".probe"; }

template <typename T>
int run_probe_train(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed,
                    const std::string& ckpt) {
    TrainState<T> state = load_checkpoint<T>(ckpt);
    auto source = make_source(cfg, cfg.train.seq_len, derive_seed(seed, 0x9B0));
    OptimConfig opt = cfg.train.optim;
    opt.steps = cfg.eval.probe_steps;
    ProbeTrainOptions options;
    options.metrics_csv = out_path(args, "probe-train");
    options.quiet = false;
    options.hidden_width = cfg.eval.probe_hidden;
    ProbeTrainResult res =
        train_probe<T>(state.cfg, state.params, *source, opt, derive_seed(seed, 0x9B), options);
    const std::string probe_path = probe_path_for(ckpt);
    save_probe(res.probe, probe_path);
    std::printf("probe-train: steps=%d initial_loss=%.6f final_loss=%.6f\n", opt.steps,
                res.initial_loss, res.final_loss);
    report(options.metrics_csv);
    report(probe_path);
    return 0;
}

int cmd_probe_train(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    const std::string ckpt = require_checkpoint(cfg);
    CheckpointMeta meta = peek_checkpoint(ckpt);
    if (meta.precision == Precision::kF64) return run_probe_train<double>(cfg, args, seed, ckpt);
    return run_probe_train<float>(cfg, args, seed, ckpt);
}

template <typename T>
int run_decipher_eval(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed,
                      const std::string& ckpt) {
    TrainState<T> state = load_checkpoint<T>(ckpt);
    ProbeParams probe = load_probe(probe_path_for(ckpt));
    auto source = make_source(cfg, cfg.eval.seq_len, derive_seed(seed, 0xD5));
    ProbeEvalResult res = eval_probe_decipher<T>(
        state.cfg, state.params, probe, *source, cfg.eval.n_seqs,
        static_cast<std::size_t>(cfg.eval.window), static_cast<std::size_t>(cfg.eval.stride),
        derive_seed(seed, 0xD5E));
    const std::string path = out_path(args, "decipher-eval");
    write_precision_csv(res.windows, path);
    std::printf("decipher-eval: n_seqs=%d token_accuracy=%.4f\n", res.n_seqs,
                res.token_accuracy);
    std::printf("  precision first=%.4f last=%.4f\n", res.windows.front().mean_precision,
                res.windows.back().mean_precision);
    report(path);
    return 0;
}

int cmd_decipher_eval(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    const std::string ckpt = require_checkpoint(cfg);
    CheckpointMeta meta = peek_checkpoint(ckpt);
    if (meta.precision == Precision::kF64)
        return run_decipher_eval<double>(cfg, args, seed, ckpt);
    return run_decipher_eval<float>(cfg, args, seed, ckpt);
}

// ------------------------------------------------------- task commands

int cmd_tasks_gen(const RunConfig& cfg, const CliArgs&, std::uint64_t seed) {
    if (cfg.tasks.file.empty())
        throw std::invalid_argument("tasks-gen needs a [tasks] file key");
    if (cfg.tasks.n_instances < 1)
        throw std::invalid_argument("n_instances must be >= 1");
    Rng rng(derive_seed(seed, 0x7A5C));
    std::vector<TaskInstance> tasks;
    tasks.reserve(static_cast<std::size_t>(cfg.tasks.n_instances));
    for (int i = 0; i < cfg.tasks.n_instances; ++i)
        tasks.push_back(gen_task(cfg.tasks.gen, rng.next_u64()));
    write_task_file(tasks, cfg.tasks.file);
    std::printf("tasks-gen: kind=%s n_instances=%d\n", task_kind_name(cfg.tasks.gen.kind),
                cfg.tasks.n_instances);
    report(cfg.tasks.file);
    return 0;
}

template <typename T>
std::unique_ptr<ModelAdapter> make_neural_adapter(TrainState<T>& state, std::uint64_t seed) {
    return std::make_unique<NeuralAdapter<T>>(state.cfg, &state.params, seed);
}

int cmd_tasks_eval(const RunConfig& cfg, const CliArgs& args, std::uint64_t seed) {
    if (cfg.tasks.file.empty())
        throw std::invalid_argument("tasks-eval needs a [tasks] file key");
    const std::vector<TaskInstance> tasks = read_task_file(cfg.tasks.file, cfg.tasks.gen.kind);

    // keep whichever state backs the adapter alive for the scoring pass
    TrainState<float> state32;
    TrainState<double> state64;
    std::unique_ptr<ModelAdapter> adapter;
    if (cfg.tasks.adapter == "echo") {
        adapter = std::make_unique<EchoAdapter>(tasks);
    } else if (cfg.tasks.adapter == "random") {
        adapter = std::make_unique<UniformRandomAdapter>(CharTokenizer::kVocab,
                                                         derive_seed(seed, 0xAD));
    } else {
        const std::string ckpt = require_checkpoint(cfg);
        CheckpointMeta meta = peek_checkpoint(ckpt);
        if (meta.precision == Precision::kF64) {
            state64 = load_checkpoint<double>(ckpt);
            adapter = make_neural_adapter(state64, derive_seed(seed, 0xAD));
        } else {
            state32 = load_checkpoint<float>(ckpt);
            adapter = make_neural_adapter(state32, derive_seed(seed, 0xAD));
        }
    }

    TaskScore score = task_accuracy(*adapter, tasks);
    const std::string path = out_path(args, "tasks-eval");
    CsvWriter csv(path, "adapter,kind,token_accuracy,exact_match,n_tokens,n_instances");
    csv.row({adapter->describe(), task_kind_name(cfg.tasks.gen.kind),
             csv_num(score.token_accuracy), csv_num(score.exact_match),
             csv_num(static_cast<std::uint64_t>(score.n_tokens)), csv_num(score.n_instances)});
    csv.close();
    std::printf("tasks-eval: adapter=%s token_accuracy=%.4f exact_match=%.4f (%d instances)\n",
                adapter->describe().c_str(), score.token_accuracy, score.exact_match,
                score.n_instances);
    report(path);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        CliArgs args = parse_args(argc, argv);
        RunConfig cfg;
        if (!args.config_path.empty()) cfg = load_config(args.config_path);
        const std::uint64_t seed = args.has_seed ? args.seed : cfg.seed;

        if (args.command == "oracle-converge") return cmd_oracle_converge(cfg, args, seed);
        if (args.command == "oracle-decipher") return cmd_oracle_decipher(cfg, args, seed);
        if (args.command == "train") return cmd_train(cfg, args, seed);
        if (args.command == "eval-ppl") return cmd_eval_ppl(cfg, args, seed);
        if (args.command == "probe-train") return cmd_probe_train(cfg, args, seed);
        if (args.command == "decipher-eval") return cmd_decipher_eval(cfg, args, seed);
        if (args.command == "tasks-gen") return cmd_tasks_gen(cfg, args, seed);
        if (args.command == "tasks-eval") return cmd_tasks_eval(cfg, args, seed);
        std::cerr << "unknown command '" << args.command << "'\n";
        return usage();
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
