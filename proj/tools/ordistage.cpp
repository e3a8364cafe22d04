// Command-line entry point: generate a synthetic dataset, run the cross-validated
// pipeline, or recompute diagnostics of a finished run.
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ordistage/errors.hpp"
#include "ordistage/pipeline.hpp"

using namespace ordistage;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Options {
    std::string config_path;
    std::string output;
    std::optional<std::uint64_t> seed;
    bool print_config = false;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config_path, "Experiment configuration (JSON)");
    cmd->add_option("--output", o.output, "Output directory (overrides the config)");
    cmd->add_option("--seed", o.seed, "Experiment seed (overrides the config)");
    cmd->add_flag("--print-config", o.print_config, "Print the resolved configuration and exit");
}

void print_report(const RunReport& r) {
    for (const auto& f : r.folds) {
        std::printf("fold %zu: accuracy %.4f  kappa_w %.4f  mae %.4f", f.fold, f.metrics.accuracy, f.metrics.kappa,
                    f.metrics.mae);
        if (f.mean_intra_distance && f.mean_inter_distance)
            std::printf("  intra %.4f  inter %.4f", *f.mean_intra_distance, *f.mean_inter_distance);
        std::printf("\n");
    }
    std::printf("mean (std): accuracy %.3f (%.3f)  kappa_w %.3f (%.3f)  mae %.3f (%.3f)\n", r.accuracy.mean,
                r.accuracy.std, r.kappa.mean, r.kappa.std, r.mae.mean, r.mae.std);
}

int dispatch(const std::string& command, const Options& o) {
    ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_experiment_config(o.config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.print_config) {
        std::cout << experiment_config_json(cfg);
        return kOk;
    }
    if (o.config_path.empty()) throw ConfigError("--config is required");
    cfg.validate();
    if (command == "generate") {
        const std::string dir = o.output.empty() ? cfg.dataset_dir : o.output;
        const std::size_t n = cmd_generate(cfg, dir);
        std::printf("wrote %zu samples (%zu stages x %zu per stage) to %s\n", n, cfg.synth.num_stages,
                    cfg.synth.samples_per_stage, dir.c_str());
    } else if (command == "run") {
        const std::string dir = o.output.empty() ? cfg.output_dir : o.output;
        print_report(cmd_run(cfg, dir));
        std::printf("outputs in %s\n", dir.c_str());
    } else {
        const std::string dir = o.output.empty() ? cfg.output_dir : o.output;
        print_report(cmd_diagnose(dir));
        std::printf("diagnostics refreshed in %s\n", dir.c_str());
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Explainable ordinal staging: autoencoder + vision transformer pipeline"};
    app.require_subcommand(1);
    Options opts;
    std::string command;
    for (const char* name : {"generate", "run", "diagnose"}) {
        static const char* help[] = {"Write a synthetic staged dataset", "Train and evaluate all folds",
                                     "Recompute diagnostics from stored checkpoints"};
        const std::string n = name;
        CLI::App* sub = app.add_subcommand(n, help[n == "generate" ? 0 : n == "run" ? 1 : 2]);
        add_common(sub, opts);
        sub->callback([&command, n] { command = n; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        return dispatch(command, opts);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInternal;
    }
}
