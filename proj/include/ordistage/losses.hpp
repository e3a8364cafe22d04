#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ordistage/checkpoint.hpp"
#include "ordistage/models.hpp"
#include "ordistage/random.hpp"
#include "ordistage/tensor.hpp"

namespace ordistage {

inline constexpr int kMaxStage = 9;

/// Stage-dependent triplet margin |y_a − y_n| / 9, in (0, 1].
double ordinal_margin(int anchor_stage, int negative_stage);

struct Triplet {
    LatentEmbedding anchor;
    LatentEmbedding positive;
    LatentEmbedding negative;
    std::size_t anchor_index = 0;
    std::size_t positive_index = 0;
    std::size_t negative_index = 0;

    int anchor_stage() const { return anchor.stage; }
    int negative_stage() const { return negative.stage; }
};

/// max(0, D(a,p) − D(a,n) + margin) on the normalized embeddings.
Tensor triplet_loss(const Triplet& t);

struct MiningResult {
    std::vector<Triplet> triplets;
    std::size_t degenerate_skipped = 0;  // embeddings excluded because z == 0
    std::size_t anchors_skipped = 0;     // anchors with no positive or no negative
    std::size_t semi_hard = 0;           // triplets whose negative came from the semi-hard band
    bool single_stage = false;
};

/// For every ordered same-stage (anchor, positive) pair, picks a negative with
/// D(a,p) < D(a,n) < D(a,p) + margin(y_a, y_n), uniformly among candidates;
/// falls back to the closest negative when the band is empty.
MiningResult mine_semi_hard(const std::vector<LatentEmbedding>& batch, Rng& rng);

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross-entropy with the reconstruction clamped to [eps, 1−eps].
Tensor bce_loss(const Tensor& target, const Tensor& reconstruction, double eps = kBceEps);

/// Fixed feature extractor for the perceptual loss: stride-2 3×3 conv+relu
/// layers over the image rescaled to [−1, 1], with per-channel weights w_l.
/// The default construction is a seeded surrogate; calibrated weights can be
/// loaded through the checkpoint format.
class PerceptualExtractor {
public:
    explicit PerceptualExtractor(std::uint64_t seed, std::vector<std::size_t> channels = {8, 16, 32});
    explicit PerceptualExtractor(const ParameterMap& weights);

    /// Activations of every layer, each C_l×H_l×W_l.
    std::vector<Tensor> features(const Tensor& image) const;

    std::size_t num_layers() const { return layers_.size(); }
    const Tensor& channel_weight(std::size_t layer) const { return layers_[layer].channel_weight; }

    ParameterMap parameters() const;

private:
    struct Layer {
        Tensor weight, bias, channel_weight;
    };
    std::vector<Layer> layers_;
};

inline constexpr double kChannelNormEps = 1e-10;

/// Σ_l (1/H_l W_l) Σ_{h,w} ‖w_l ⊙ (F̂^l_hw(I) − F̂^l_hw(Î))‖², with F̂ unit-normalized
/// across channels at every position.
Tensor perceptual_loss(const Tensor& target, const Tensor& reconstruction, const PerceptualExtractor& extractor);

struct AELoss {
    Tensor total;
    double triplet_term = 0.0;  // mean triplet loss (0 when none)
    double recon_term = 0.0;    // mean BCE + perceptual
    bool empty_triplets = false;
};

/// γ·mean(triplet losses) + (1 − γ)·mean(reconstruction losses).
AELoss total_ae_loss(const std::vector<Tensor>& triplet_losses, const std::vector<Tensor>& recon_losses, double gamma);

/// −log softmax(logits)[label] via log-sum-exp.
Tensor cross_entropy(const Tensor& logits, int label);

}  // namespace ordistage
