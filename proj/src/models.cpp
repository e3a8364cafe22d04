#include "ordistage/models.hpp"

#include <cmath>
#include <string>

#include "ordistage/errors.hpp"

namespace ordistage {

void AEConfig::validate() const {
    if (base_channels < 1) throw ParameterError("AEConfig: base_channels must be >= 1");
    if (latent_dim < 2) throw ParameterError("AEConfig: latent_dim must be >= 2");
    if (num_blocks < 1 || num_blocks > 16) throw ParameterError("AEConfig: num_blocks out of range");
    if (image_size == 0 || image_size % (std::size_t{1} << num_blocks) != 0) {
        throw ParameterError("AEConfig: image_size " + std::to_string(image_size) + " not divisible by 2^" +
                             std::to_string(num_blocks));
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("AEConfig: dropout_p must lie in [0,1)");
}

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ParameterError("ViTConfig: image_size must be divisible by patch_size");
    }
    if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0) {
        throw ParameterError("ViTConfig: embed_dim must be divisible by num_heads");
    }
    if (num_classes < 2) throw ParameterError("ViTConfig: num_classes must be >= 2");
    if (num_layers < 1 || mlp_ratio < 1) throw ParameterError("ViTConfig: num_layers and mlp_ratio must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("ViTConfig: dropout_p must lie in [0,1)");
}

Tensor init_trunc_normal(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) {
        double draw = rng.normal();
        while (std::abs(draw) > 2.0) draw = rng.normal();
        e = stddev * draw;
    }
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor init_he_uniform(Shape shape, Rng& rng) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor as_image(const Tensor& image, std::size_t size) {
    Tensor img = image;
    if (img.rank() == 2) img = reshape(img, {1, img.dim(0), img.dim(1)});
    if (img.rank() != 3 || img.dim(0) != 1 || img.dim(1) != size || img.dim(2) != size) {
        throw DimensionError("expected a 1x" + std::to_string(size) + "x" + std::to_string(size) + " image, got " +
                             shape_str(image.shape()));
    }
    for (double v : img.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("pixel value outside [0,1]: " + std::to_string(v));
    }
    return img;
}

// ---------------------------------------------------------------- autoencoder

Autoencoder::Autoencoder(AEConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t k = cfg_.num_blocks;
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t out_ch = cfg_.channels(i);
        encoder_.push_back({init_he_uniform({out_ch, in_ch, 3, 3}, rng), Tensor::zeros({out_ch}, true)});
        in_ch = out_ch;
    }
    const std::size_t s = cfg_.bottleneck_extent();
    const std::size_t flat = cfg_.channels(k - 1) * s * s;
    to_latent_w_ = init_trunc_normal({flat, cfg_.latent_dim}, 0.02, rng);
    to_latent_b_ = Tensor::zeros({cfg_.latent_dim}, true);
    from_latent_w_ = init_trunc_normal({cfg_.latent_dim, flat}, 0.02, rng);
    from_latent_b_ = Tensor::zeros({flat}, true);
    for (std::size_t j = 0; j < k; ++j) {
        const std::size_t c_in = cfg_.channels(k - 1 - j);
        const std::size_t c_out = cfg_.channels(j + 2 <= k ? k - 2 - j : 0);
        decoder_.push_back({init_he_uniform({c_out, c_in, 3, 3}, rng), Tensor::zeros({c_out}, true)});
    }
    output_ = {init_he_uniform({1, cfg_.base_channels, 3, 3}, rng), Tensor::zeros({1}, true)};
}

LatentEmbedding Autoencoder::encode(const Tensor& image, bool training, Rng& rng) const {
    Tensor x = as_image(image, cfg_.image_size);
    for (const auto& conv : encoder_) x = relu(conv2d(x, conv.weight, conv.bias, 2, 1));
    x = dropout(x, cfg_.dropout_p, training, rng);
    x = reshape(x, {x.numel()});
    LatentEmbedding out;
    out.z = affine(x, to_latent_w_, to_latent_b_);
    double sq = 0.0;
    for (double v : out.z.data()) sq += v * v;
    out.degenerate = sq == 0.0;
    out.z_norm = l2_normalize(out.z);
    return out;
}

LatentEmbedding Autoencoder::encode(const Tensor& image) const {
    Rng unused(0);
    return encode(image, false, unused);
}

Tensor Autoencoder::decode(const Tensor& z) const {
    if (z.numel() != cfg_.latent_dim) throw DimensionError("decode: latent length mismatch");
    for (double v : z.data()) {
        if (!std::isfinite(v)) throw NumericError("decode: non-finite latent");
    }
    const std::size_t s = cfg_.bottleneck_extent();
    const std::size_t c = cfg_.channels(cfg_.num_blocks - 1);
    Tensor x = reshape(affine(reshape(z, {cfg_.latent_dim}), from_latent_w_, from_latent_b_), {c, s, s});
    for (const auto& conv : decoder_) {
        x = relu(conv2d(upsample2x(x, cfg_.upsample_mode), conv.weight, conv.bias, 1, 1));
    }
    return sigmoid(conv2d(x, output_.weight, output_.bias, 1, 1));
}

ParameterMap Autoencoder::parameters() const {
    ParameterMap p;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        p.emplace("encoder.conv" + std::to_string(i) + ".weight", encoder_[i].weight);
        p.emplace("encoder.conv" + std::to_string(i) + ".bias", encoder_[i].bias);
    }
    p.emplace("encoder.linear.weight", to_latent_w_);
    p.emplace("encoder.linear.bias", to_latent_b_);
    p.emplace("decoder.linear.weight", from_latent_w_);
    p.emplace("decoder.linear.bias", from_latent_b_);
    for (std::size_t j = 0; j < decoder_.size(); ++j) {
        p.emplace("decoder.conv" + std::to_string(j) + ".weight", decoder_[j].weight);
        p.emplace("decoder.conv" + std::to_string(j) + ".bias", decoder_[j].bias);
    }
    p.emplace("decoder.output.weight", output_.weight);
    p.emplace("decoder.output.bias", output_.bias);
    return p;
}

// ---------------------------------------------------------------- vision transformer

namespace {

std::shared_ptr<std::vector<std::size_t>> patch_indices(std::size_t channels, std::size_t height,
                                                        std::size_t width, std::size_t patch) {
    const std::size_t gh = height / patch, gw = width / patch;
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(channels * height * width);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        idx->push_back((c * height + py * patch + y) * width + px * patch + x);
    return idx;
}

}  // namespace

Tensor vit_patchify(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3) throw DimensionError("vit_patchify: expected C×H×W, got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw DimensionError("vit_patchify: " + shape_str(image.shape()) + " not divisible by patch " +
                             std::to_string(patch));
    }
    const std::size_t n = (h * w) / (patch * patch);
    return gather(image, {n, c * patch * patch}, patch_indices(c, h, w, patch));
}

Tensor vit_unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                      std::size_t patch) {
    const auto forward = patch_indices(channels, height, width, patch);
    if (patches.numel() != forward->size()) throw DimensionError("vit_unpatchify: size mismatch");
    auto inverse = std::make_shared<std::vector<std::size_t>>(forward->size());
    for (std::size_t i = 0; i < forward->size(); ++i) (*inverse)[(*forward)[i]] = i;
    return gather(patches, {channels, height, width}, inverse);
}

std::pair<Tensor, Tensor> multi_head_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads) {
    if (x.rank() != 2) throw DimensionError("multi_head_attention: expected T×d input");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (heads == 0 || d % heads != 0) throw ParameterError("multi_head_attention: d not divisible by heads");
    const std::size_t dh = d / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor q = affine(x, w.wq, w.bq);
    const Tensor k = affine(x, w.wk, w.bk);
    const Tensor v = affine(x, w.wv, w.bv);
    std::vector<Tensor> outputs;
    std::vector<double> probs;
    probs.reserve(heads * t * t);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor attn = softmax(scale(matmul(qh, transpose(kh)), scale_factor), 1);
        probs.insert(probs.end(), attn.data().begin(), attn.data().end());
        outputs.push_back(matmul(attn, vh));
    }
    const Tensor merged = heads == 1 ? outputs.front() : concat_cols(outputs);
    return {affine(merged, w.wo, w.bo), Tensor({heads, t, t}, std::move(probs))};
}

VisionTransformer::VisionTransformer(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t patch_len = cfg_.patch_size * cfg_.patch_size;
    const std::size_t tokens = cfg_.num_patches() + 1;
    const std::size_t hidden = cfg_.mlp_ratio * d;
    patch_w_ = init_trunc_normal({patch_len, d}, 0.02, rng);
    patch_b_ = Tensor::zeros({d}, true);
    cls_ = Tensor::zeros({1, d}, true);
    pos_ = init_trunc_normal({tokens, d}, 0.02, rng);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        Block b;
        b.ln1_gain = Tensor::full({d}, 1.0, true);
        b.ln1_bias = Tensor::zeros({d}, true);
        b.attn.wq = init_trunc_normal({d, d}, 0.02, rng);
        b.attn.bq = Tensor::zeros({d}, true);
        b.attn.wk = init_trunc_normal({d, d}, 0.02, rng);
        b.attn.bk = Tensor::zeros({d}, true);
        b.attn.wv = init_trunc_normal({d, d}, 0.02, rng);
        b.attn.bv = Tensor::zeros({d}, true);
        b.attn.wo = init_trunc_normal({d, d}, 0.02, rng);
        b.attn.bo = Tensor::zeros({d}, true);
        b.ln2_gain = Tensor::full({d}, 1.0, true);
        b.ln2_bias = Tensor::zeros({d}, true);
        b.mlp_w1 = init_trunc_normal({d, hidden}, 0.02, rng);
        b.mlp_b1 = Tensor::zeros({hidden}, true);
        b.mlp_w2 = init_trunc_normal({hidden, d}, 0.02, rng);
        b.mlp_b2 = Tensor::zeros({d}, true);
        blocks_.push_back(std::move(b));
    }
    norm_gain_ = Tensor::full({d}, 1.0, true);
    norm_bias_ = Tensor::zeros({d}, true);
    head_w_ = init_trunc_normal({d, cfg_.num_classes}, 0.02, rng);
    head_b_ = Tensor::zeros({cfg_.num_classes}, true);
}

VisionTransformer::Output VisionTransformer::forward(const Tensor& image, bool training, Rng& rng) const {
    const Tensor img = as_image(image, cfg_.image_size);
    const Tensor tokens = affine(vit_patchify(img, cfg_.patch_size), patch_w_, patch_b_);
    Tensor x = add(concat_rows({cls_, tokens}), pos_);
    Output out;
    for (const auto& b : blocks_) {
        auto [attended, probs] = multi_head_attention(layer_norm(x, b.ln1_gain, b.ln1_bias), b.attn, cfg_.num_heads);
        out.attention.layers.push_back(std::move(probs));
        x = add(x, attended);
        const Tensor h = layer_norm(x, b.ln2_gain, b.ln2_bias);
        x = add(x, affine(gelu(affine(h, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2));
    }
    x = layer_norm(x, norm_gain_, norm_bias_);
    Tensor cls = reshape(slice_rows(x, 0, 1), {cfg_.embed_dim});
    cls = dropout(cls, cfg_.dropout_p, training, rng);
    out.logits = affine(cls, head_w_, head_b_);
    return out;
}

VisionTransformer::Output VisionTransformer::forward(const Tensor& image) const {
    Rng unused(0);
    return forward(image, false, unused);
}

ParameterMap VisionTransformer::parameters() const {
    ParameterMap p;
    p.emplace("patch_embed.weight", patch_w_);
    p.emplace("patch_embed.bias", patch_b_);
    p.emplace("cls_token", cls_);
    p.emplace("pos_embed", pos_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        p.emplace(pre + "ln1.gain", b.ln1_gain);
        p.emplace(pre + "ln1.bias", b.ln1_bias);
        p.emplace(pre + "attn.q.weight", b.attn.wq);
        p.emplace(pre + "attn.q.bias", b.attn.bq);
        p.emplace(pre + "attn.k.weight", b.attn.wk);
        p.emplace(pre + "attn.k.bias", b.attn.bk);
        p.emplace(pre + "attn.v.weight", b.attn.wv);
        p.emplace(pre + "attn.v.bias", b.attn.bv);
        p.emplace(pre + "attn.out.weight", b.attn.wo);
        p.emplace(pre + "attn.out.bias", b.attn.bo);
        p.emplace(pre + "ln2.gain", b.ln2_gain);
        p.emplace(pre + "ln2.bias", b.ln2_bias);
        p.emplace(pre + "mlp.fc1.weight", b.mlp_w1);
        p.emplace(pre + "mlp.fc1.bias", b.mlp_b1);
        p.emplace(pre + "mlp.fc2.weight", b.mlp_w2);
        p.emplace(pre + "mlp.fc2.bias", b.mlp_b2);
    }
    p.emplace("norm.gain", norm_gain_);
    p.emplace("norm.bias", norm_bias_);
    p.emplace("head.weight", head_w_);
    p.emplace("head.bias", head_b_);
    return p;
}

}  // namespace ordistage
