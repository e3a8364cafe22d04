#include "ordistage/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include "ordistage/errors.hpp"
#include "ordistage/ops.hpp"

namespace ordistage {

using detail::grad_buffer;
using detail::make_result;
using detail::wants_grad;

namespace {

void require_stage(int stage) {
    if (stage < 0 || stage > kMaxStage) throw InputError("stage out of range: " + std::to_string(stage));
}

double distance(const Tensor& a, const Tensor& b) {
    const auto ad = a.data();
    const auto bd = b.data();
    double sq = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) sq += (ad[i] - bd[i]) * (ad[i] - bd[i]);
    return std::sqrt(sq);
}

// Unit-normalizes x[C×H×W] across channels at every spatial position.
Tensor channel_normalize(const Tensor& x) {
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const auto xd = x.data();
    auto norms = std::make_shared<std::vector<double>>(hw, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) (*norms)[i] += xd[ch * hw + i] * xd[ch * hw + i];
    for (auto& n : *norms) n = std::sqrt(n);
    std::vector<double> out(xd.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = xd[ch * hw + i] / ((*norms)[i] + kChannelNormEps);
    return make_result(x.shape(), std::move(out), {x}, [x, norms, c, hw](std::span<const double> g) {
        // y = x / (n + ε), n = ‖x‖  ⇒  dy/dx = I/(n+ε) − x xᵀ / (n (n+ε)²)
        const auto xd = x.data();
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < hw; ++i) {
            const double n = (*norms)[i];
            const double denom = n + kChannelNormEps;
            double dot = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) dot += g[ch * hw + i] * xd[ch * hw + i];
            const double radial = n > 0.0 ? dot / (n * denom * denom) : 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                gx[ch * hw + i] += g[ch * hw + i] / denom - xd[ch * hw + i] * radial;
            }
        }
    });
}

// Multiplies x[C×H×W] by a per-channel weight vector.
Tensor channel_scale(const Tensor& x, const Tensor& weights) {
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (weights.numel() != c) throw DimensionError("channel weight length mismatch");
    std::vector<double> expanded(c * hw);
    for (std::size_t ch = 0; ch < c; ++ch) std::fill_n(expanded.begin() + static_cast<long>(ch * hw), hw, weights[ch]);
    return mul(x, Tensor(x.shape(), std::move(expanded)));
}

}  // namespace

double ordinal_margin(int anchor_stage, int negative_stage) {
    require_stage(anchor_stage);
    require_stage(negative_stage);
    if (anchor_stage == negative_stage) {
        throw ContractError("ordinal_margin: negative shares the anchor stage " + std::to_string(anchor_stage));
    }
    return static_cast<double>(std::abs(anchor_stage - negative_stage)) / static_cast<double>(kMaxStage);
}

Tensor triplet_loss(const Triplet& t) {
    if (t.anchor.stage != t.positive.stage) throw ContractError("triplet: positive stage differs from anchor");
    if (t.anchor.degenerate || t.positive.degenerate || t.negative.degenerate) {
        throw ContractError("triplet: degenerate (zero) embedding");
    }
    const double margin = ordinal_margin(t.anchor.stage, t.negative.stage);
    const Tensor d_ap = euclidean_distance(t.anchor.z_norm, t.positive.z_norm);
    const Tensor d_an = euclidean_distance(t.anchor.z_norm, t.negative.z_norm);
    return relu(add_scalar(sub(d_ap, d_an), margin));
}

MiningResult mine_semi_hard(const std::vector<LatentEmbedding>& batch, Rng& rng) {
    MiningResult result;
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        require_stage(batch[i].stage);
        if (batch[i].degenerate) {
            ++result.degenerate_skipped;
        } else {
            usable.push_back(i);
        }
    }
    bool multiple = false;
    for (std::size_t i : usable) multiple = multiple || batch[i].stage != batch[usable.front()].stage;
    if (!multiple) {
        result.single_stage = true;
        return result;
    }

    const std::size_t n = usable.size();
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = distance(batch[usable[i]].z_norm, batch[usable[j]].z_norm);
            dist[i * n + j] = dist[j * n + i] = d;
        }

    std::vector<std::size_t> band;
    for (std::size_t a = 0; a < n; ++a) {
        const int ya = batch[usable[a]].stage;
        bool has_positive = false, has_negative = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            (batch[usable[j]].stage == ya ? has_positive : has_negative) = true;
        }
        if (!has_positive || !has_negative) {
            ++result.anchors_skipped;
            continue;
        }
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || batch[usable[p]].stage != ya) continue;
            const double d_ap = dist[a * n + p];
            band.clear();
            std::size_t hardest = n;
            double hardest_d = std::numeric_limits<double>::infinity();
            for (std::size_t q = 0; q < n; ++q) {
                const int yn = batch[usable[q]].stage;
                if (yn == ya) continue;
                const double d_an = dist[a * n + q];
                if (d_an > d_ap && d_an < d_ap + ordinal_margin(ya, yn)) band.push_back(q);
                if (d_an < hardest_d) {
                    hardest_d = d_an;
                    hardest = q;
                }
            }
            std::size_t chosen = hardest;
            if (!band.empty()) {
                chosen = band[band.size() == 1 ? 0 : rng.below(band.size())];
                ++result.semi_hard;
            }
            Triplet t;
            t.anchor_index = usable[a];
            t.positive_index = usable[p];
            t.negative_index = usable[chosen];
            t.anchor = batch[t.anchor_index];
            t.positive = batch[t.positive_index];
            t.negative = batch[t.negative_index];
            result.triplets.push_back(std::move(t));
        }
    }
    return result;
}

Tensor bce_loss(const Tensor& target, const Tensor& reconstruction, double eps) {
    if (target.numel() != reconstruction.numel()) {
        throw DimensionError("bce_loss: " + shape_str(target.shape()) + " vs " + shape_str(reconstruction.shape()));
    }
    const auto td = target.data();
    for (double v : td) {
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("bce_loss: target outside [0,1]");
    }
    const auto rd = reconstruction.data();
    const double n = static_cast<double>(td.size());
    double total = 0.0;
    for (std::size_t i = 0; i < td.size(); ++i) {
        const double p = std::clamp(rd[i], eps, 1.0 - eps);
        total -= td[i] * std::log(p) + (1.0 - td[i]) * std::log(1.0 - p);
    }
    return make_result({}, {total / n}, {target, reconstruction}, [target, reconstruction, eps, n](std::span<const double> g) {
        if (!wants_grad(reconstruction)) return;
        const auto td = target.data();
        const auto rd = reconstruction.data();
        auto& gr = grad_buffer(reconstruction);
        for (std::size_t i = 0; i < td.size(); ++i) {
            if (rd[i] < eps || rd[i] > 1.0 - eps) continue;  // clamped: flat
            gr[i] += g[0] * (-(td[i] / rd[i]) + (1.0 - td[i]) / (1.0 - rd[i])) / n;
        }
    });
}

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed, std::vector<std::size_t> channels) {
    if (channels.empty()) throw ParameterError("PerceptualExtractor: no layers");
    Rng rng(seed);
    std::size_t in_ch = 1;
    for (std::size_t out_ch : channels) {
        Layer layer;
        layer.weight = init_he_uniform({out_ch, in_ch, 3, 3}, rng).set_requires_grad(false);
        // Positive biases keep flat regions away from the zero-norm point of the
        // channel normalization.
        std::vector<double> bias(out_ch);
        for (auto& b : bias) b = rng.uniform(0.01, 0.1);
        layer.bias = Tensor({out_ch}, std::move(bias));
        layer.channel_weight = Tensor::full({out_ch}, 1.0);
        layers_.push_back(std::move(layer));
        in_ch = out_ch;
    }
}

PerceptualExtractor::PerceptualExtractor(const ParameterMap& weights) {
    for (std::size_t l = 0;; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const auto w = weights.find(pre + "weight");
        if (w == weights.end()) break;
        const auto b = weights.find(pre + "bias");
        const auto c = weights.find(pre + "channel_weight");
        if (b == weights.end() || c == weights.end()) throw DataError("extractor checkpoint incomplete at " + pre);
        Layer layer{w->second.detach(), b->second.detach(), c->second.detach()};
        const std::size_t in_ch = layers_.empty() ? 1 : layers_.back().weight.dim(0);
        if (layer.weight.rank() != 4 || layer.weight.dim(1) != in_ch || layer.bias.numel() != layer.weight.dim(0) ||
            layer.channel_weight.numel() != layer.weight.dim(0)) {
            throw DataError("extractor checkpoint has inconsistent shapes at " + pre);
        }
        layers_.push_back(std::move(layer));
    }
    if (layers_.empty()) throw DataError("extractor checkpoint has no layers");
}

std::vector<Tensor> PerceptualExtractor::features(const Tensor& image) const {
    Tensor x = image.rank() == 2 ? reshape(image, {1, image.dim(0), image.dim(1)}) : image;
    x = add_scalar(scale(x, 2.0), -1.0);
    std::vector<Tensor> out;
    for (const auto& layer : layers_) {
        x = relu(conv2d(x, layer.weight, layer.bias, 2, 1));
        out.push_back(x);
    }
    return out;
}

ParameterMap PerceptualExtractor::parameters() const {
    ParameterMap p;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        p.emplace(pre + "weight", layers_[l].weight);
        p.emplace(pre + "bias", layers_[l].bias);
        p.emplace(pre + "channel_weight", layers_[l].channel_weight);
    }
    return p;
}

Tensor perceptual_loss(const Tensor& target, const Tensor& reconstruction, const PerceptualExtractor& extractor) {
    if (target.shape() != reconstruction.shape()) {
        throw DimensionError("perceptual_loss: " + shape_str(target.shape()) + " vs " +
                             shape_str(reconstruction.shape()));
    }
    const auto ft = extractor.features(target);
    const auto fr = extractor.features(reconstruction);
    std::vector<Tensor> terms;
    for (std::size_t l = 0; l < ft.size(); ++l) {
        const Tensor diff = channel_scale(sub(channel_normalize(ft[l]), channel_normalize(fr[l])),
                                          extractor.channel_weight(l));
        const double spatial = static_cast<double>(ft[l].dim(1) * ft[l].dim(2));
        terms.push_back(scale(sum(mul(diff, diff)), 1.0 / spatial));
    }
    return add_n(terms);
}

AELoss total_ae_loss(const std::vector<Tensor>& triplet_losses, const std::vector<Tensor>& recon_losses, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ParameterError("total_ae_loss: gamma must lie in [0,1]");
    AELoss out;
    std::vector<Tensor> parts;
    if (!triplet_losses.empty()) {
        const Tensor t = scale(add_n(triplet_losses), 1.0 / static_cast<double>(triplet_losses.size()));
        out.triplet_term = t.item();
        parts.push_back(scale(t, gamma));
    } else {
        out.empty_triplets = true;
    }
    if (!recon_losses.empty()) {
        const Tensor r = scale(add_n(recon_losses), 1.0 / static_cast<double>(recon_losses.size()));
        out.recon_term = r.item();
        parts.push_back(scale(r, 1.0 - gamma));
    }
    out.total = parts.empty() ? Tensor::scalar(0.0) : add_n(parts);
    return out;
}

Tensor cross_entropy(const Tensor& logits, int label) {
    const std::size_t k = logits.numel();
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
        throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
    const auto z = logits.data();
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    const auto idx = static_cast<std::size_t>(label);
    return make_result({}, {lse - z[idx]}, {logits}, [logits, lse, idx](std::span<const double> g) {
        const auto z = logits.data();
        auto& gz = grad_buffer(logits);
        for (std::size_t i = 0; i < z.size(); ++i) gz[i] += g[0] * (std::exp(z[i] - lse) - (i == idx ? 1.0 : 0.0));
    });
}

}  // namespace ordistage
