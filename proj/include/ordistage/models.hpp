#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "ordistage/checkpoint.hpp"
#include "ordistage/ops.hpp"
#include "ordistage/random.hpp"
#include "ordistage/tensor.hpp"

namespace ordistage {

struct AEConfig {
    std::size_t image_size = 32;
    std::size_t base_channels = 8;  // full-size 224 px runs use 16
    std::size_t num_blocks = 5;
    std::size_t latent_dim = 32;
    double dropout_p = 0.3;
    UpsampleMode upsample_mode = UpsampleMode::bilinear;

    void validate() const;
    /// Spatial extent after the encoder blocks.
    std::size_t bottleneck_extent() const { return image_size >> num_blocks; }
    std::size_t channels(std::size_t block) const { return base_channels << block; }
};

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t num_heads = 2;
    std::size_t num_layers = 2;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 10;
    double dropout_p = 0.3;

    void validate() const;
    std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

/// Latent code and its L2-normalized form. `degenerate` marks z == 0, where
/// z_norm is just z and the embedding must not enter the triplet loss.
struct LatentEmbedding {
    Tensor z;
    Tensor z_norm;
    int stage = -1;
    bool degenerate = false;
};

/// Attention probabilities of one forward pass, one M×(N+1)×(N+1) tensor per
/// layer, CLS token first.
struct AttentionRecord {
    std::vector<Tensor> layers;
};

/// Truncated normal (±2σ) used for linear and embedding weights.
Tensor init_trunc_normal(Shape shape, double stddev, Rng& rng);
/// He-uniform for conv kernels, bound √(6 / fan_in).
Tensor init_he_uniform(Shape shape, Rng& rng);

/// Convolutional autoencoder: stride-2 conv+relu blocks that double the
/// channel count, dropout, a linear projection to the latent code, and a
/// mirrored decoder of (upsample, conv, relu) blocks ending in a sigmoid.
class Autoencoder {
public:
    Autoencoder(AEConfig cfg, std::uint64_t seed);

    const AEConfig& config() const { return cfg_; }

    LatentEmbedding encode(const Tensor& image, bool training, Rng& rng) const;
    /// Inference-mode encode (no dropout).
    LatentEmbedding encode(const Tensor& image) const;
    Tensor decode(const Tensor& z) const;

    ParameterMap parameters() const;

private:
    struct Conv {
        Tensor weight;
        Tensor bias;
    };

    AEConfig cfg_;
    std::vector<Conv> encoder_;
    Tensor to_latent_w_, to_latent_b_;
    Tensor from_latent_w_, from_latent_b_;
    std::vector<Conv> decoder_;
    Conv output_;
};

/// Splits image[C×H×W] into non-overlapping P×P patches in row-major order;
/// result is N×(C·P²) with each patch flattened channel-major.
Tensor vit_patchify(const Tensor& image, std::size_t patch);
/// Inverse of vit_patchify.
Tensor vit_unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                      std::size_t patch);

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product attention with `heads` heads over x[T×d]. Returns the
/// projected output and the detached attention probabilities [heads×T×T].
std::pair<Tensor, Tensor> multi_head_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads);

class VisionTransformer {
public:
    struct Output {
        Tensor logits;
        AttentionRecord attention;
    };

    VisionTransformer(ViTConfig cfg, std::uint64_t seed);

    const ViTConfig& config() const { return cfg_; }

    Output forward(const Tensor& image, bool training, Rng& rng) const;
    Output forward(const Tensor& image) const;

    ParameterMap parameters() const;

private:
    struct Block {
        Tensor ln1_gain, ln1_bias;
        AttentionWeights attn;
        Tensor ln2_gain, ln2_bias;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    ViTConfig cfg_;
    Tensor patch_w_, patch_b_;
    Tensor cls_;
    Tensor pos_;
    std::vector<Block> blocks_;
    Tensor norm_gain_, norm_bias_;
    Tensor head_w_, head_b_;
};

/// Validates that an image tensor is [1×H×W] (or [H×W]) with values in [0,1];
/// returns it as [1×H×W].
Tensor as_image(const Tensor& image, std::size_t size);

}  // namespace ordistage
