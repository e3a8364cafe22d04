#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ordistage/evaluation.hpp"
#include "ordistage/models.hpp"
#include "ordistage/synthdata.hpp"
#include "ordistage/training.hpp"

namespace ordistage {

struct PerceptualConfig {
    std::uint64_t seed = 0x1F5;
    std::vector<std::size_t> channels{8, 16, 32};
    std::string weights;  // checkpoint path; empty selects the seeded surrogate
};

/// Everything a generate/run/diagnose invocation needs. Every field has a
/// default; the JSON form mirrors the member layout.
struct ExperimentConfig {
    SynthConfig synth;
    AEConfig ae;
    ViTConfig vit;
    TrainConfig ae_train = TrainConfig::autoencoder_defaults();
    TrainConfig classifier_train = TrainConfig::classifier_defaults();
    AugmentParams augment;
    PerceptualConfig perceptual;
    bool use_ae = true;
    std::size_t folds = 4;
    double val_fraction = 0.10;
    std::string dataset_dir = "dataset";
    std::string output_dir = "run";
    std::uint64_t seed = 0;

    /// Throws ConfigError, including when image sizes disagree between sections.
    void validate() const;
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys,
/// wrong types and malformed JSON throw ConfigError.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Pretty JSON with every field, in a fixed key order.
std::string experiment_config_json(const ExperimentConfig& cfg);

struct FoldReport {
    std::size_t fold = 0;
    FoldMetrics metrics;
    std::size_t test_size = 0;
    /// Mean within-stage and mean off-diagonal between-stage cosine distance of
    /// test-set latent codes; absent without the autoencoder.
    std::optional<double> mean_intra_distance;
    std::optional<double> mean_inter_distance;
};

struct RunReport {
    std::vector<FoldReport> folds;
    MeanStd accuracy, kappa, mae;
};

/// Writes the synthetic dataset described by cfg.synth (seeded by cfg.seed) to `dir`.
std::size_t cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& dir);

/// Trains and evaluates every fold and writes the output tree under `run_dir`.
/// Errors keep their type and gain a "fold k: " prefix; MANIFEST.status records
/// failure before the error propagates.
RunReport cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

/// Recomputes predictions, metrics and diagnostics of an existing run from its
/// stored config and checkpoints, without training.
RunReport cmd_diagnose(const std::filesystem::path& run_dir);

/// Parallel fold limit from ORDISTAGE_THREADS (default 1). Throws ConfigError
/// when the variable is set but not a positive integer.
std::size_t parallel_fold_limit();

}  // namespace ordistage
