#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ordistage/checkpoint.hpp"
#include "ordistage/dataset.hpp"
#include "ordistage/losses.hpp"
#include "ordistage/models.hpp"
#include "ordistage/random.hpp"

namespace ordistage {

// ---------------------------------------------------------------- optimizer

struct OptimState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
};

/// One AdamW update from the gradients stored on `params`: decoupled decay
/// θ ← θ − lr·wd·θ, then θ ← θ − lr·m̂ / (√v̂ + ε). Throws NumericError, leaving
/// everything untouched, if any gradient is non-finite.
void adamw_step(const ParameterMap& params, OptimState& state);

void zero_grad(const ParameterMap& params);

// ---------------------------------------------------------------- scheduler

/// Reduce-on-plateau: after `patience` consecutive epochs without an
/// improvement larger than `min_delta`, lr is multiplied by `factor`.
struct PlateauState {
    double lr = 1e-4;
    double factor = 0.5;
    std::size_t patience = 10;
    double min_delta = 1e-6;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
};

double plateau_scheduler_step(PlateauState& state, double validation_loss);

// ---------------------------------------------------------------- augmentation

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct AugmentParams {
    double jitter_p = 0.3;
    Range brightness{0.8, 1.2};
    Range contrast{0.8, 1.2};
    Range rotation_deg{-5.0, 5.0};
    Range translate_x_px{-12.0, 12.0};
    Range translate_y_px{-12.0, 12.0};
    Range scale{0.8, 1.2};
    /// Image size the translation ranges are expressed at; they scale
    /// proportionally to the actual image size.
    double reference_size = 224.0;

    void validate() const;
    /// Parameters that leave every image unchanged.
    static AugmentParams identity();
};

/// Photometric jitter (with probability jitter_p) followed by one random
/// affine warp, bilinear with zero fill, about the image centre.
Tensor augment_sample(const Tensor& image, const AugmentParams& params, Rng& rng);

// ---------------------------------------------------------------- folds

struct FoldSplit {
    std::size_t fold = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

/// k stratified folds over stage×sex cells. The k test sets partition the
/// dataset; validation (≈ val_fraction of the total) is drawn per fold from
/// the non-test remainder. Splits depend on sample ids, not on input order.
std::vector<FoldSplit> stratified_folds(const Dataset& dataset, std::size_t k, std::uint64_t seed,
                                        double val_fraction = 0.10);

// ---------------------------------------------------------------- training loops

enum class Phase { autoencoder, classifier };

struct TrainConfig {
    Phase phase = Phase::autoencoder;
    std::size_t epochs = 300;
    std::size_t batch_size = 128;
    double lr = 5e-4;
    double weight_decay = 1e-5;
    double scheduler_factor = 0.5;
    std::size_t scheduler_patience = 10;
    double gamma = 0.7;
    bool augment = true;
    bool early_stopping = false;
    std::size_t early_stopping_patience = 60;
    double early_stopping_min_delta = 1e-6;
    std::uint64_t seed = 0;

    static TrainConfig autoencoder_defaults();
    static TrainConfig classifier_defaults();
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    Phase phase = Phase::autoencoder;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

const char* phase_name(Phase p);

struct AETrainStats {
    std::size_t mining_calls = 0;
    std::size_t triplets = 0;
    std::size_t semi_hard = 0;
    std::size_t empty_triplet_batches = 0;
    std::size_t degenerate_skipped = 0;
};

struct AETrainResult {
    Autoencoder model;
    ParameterMap checkpoint;  // best-validation parameters, also loaded into `model`
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
    AETrainStats stats;
};

struct ClassifierTrainResult {
    VisionTransformer model;
    ParameterMap checkpoint;
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
};

/// Mean AE objective over `indices` (no augmentation, no dropout, no graph).
double evaluate_ae_loss(const Autoencoder& ae, const Dataset& dataset, const std::vector<std::size_t>& indices,
                        const PerceptualExtractor& extractor, double gamma, std::size_t batch_size,
                        std::uint64_t seed);

AETrainResult train_autoencoder(const Dataset& dataset, const FoldSplit& fold, const TrainConfig& cfg,
                                const AEConfig& ae_cfg, const PerceptualExtractor& extractor,
                                const AugmentParams& augment);

/// With `frozen_ae` every image goes through encode→decode of the frozen
/// autoencoder before the ViT, in training and evaluation alike. Without it
/// this is the ViT-only baseline.
ClassifierTrainResult train_classifier(const Dataset& dataset, const FoldSplit& fold, const TrainConfig& cfg,
                                       const ViTConfig& vit_cfg, const Autoencoder* frozen_ae,
                                       const AugmentParams& augment);

/// Image the classifier sees: the input itself, or its frozen-AE reconstruction.
Tensor classifier_input(const Tensor& image, const Autoencoder* frozen_ae);

int predict_stage(const VisionTransformer& vit, const Tensor& classifier_image);

}  // namespace ordistage
