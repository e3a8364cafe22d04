// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. Criteria 6-8 train real models and take minutes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ordistage/errors.hpp"
#include "ordistage/evaluation.hpp"
#include "ordistage/gradcheck.hpp"
#include "ordistage/losses.hpp"
#include "ordistage/models.hpp"
#include "ordistage/ops.hpp"
#include "ordistage/pipeline.hpp"

using namespace ordistage;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int id, const char* title, const Outcome& o) {
    std::printf("%s criterion %d: %s -- %s\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
}

template <class Fn>
void criterion(int id, const char* title, Fn&& fn) {
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    report(id, title, o);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor rand_tensor(Shape shape, Rng& rng, double lo, double hi, bool grad = true) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), grad);
}

void randomize(const ParameterMap& params, Rng& rng, double lo, double hi) {
    for (const auto& [name, p] : params) {
        Tensor t = p;
        for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    }
}

std::vector<Tensor> values_of(const ParameterMap& params) {
    std::vector<Tensor> out;
    for (const auto& [name, p] : params) out.push_back(p);
    return out;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_name;
    auto check = [&](const std::string& name, std::vector<Tensor> in, const std::function<Tensor()>& f,
                     std::size_t coords = 0, std::uint64_t seed = 0) {
        const double e = finite_diff_check(f, std::move(in), 1e-5, coords, seed);
        if (e > worst || std::isnan(e)) {
            worst = std::isnan(e) ? INFINITY : e;
            worst_name = name;
        }
    };
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor a = rand_tensor({3, 4}, rng, -1, 1), b = rand_tensor({4, 5}, rng, -1, 1);
        Tensor bias = rand_tensor({5}, rng, -1, 1), x = rand_tensor({3, 4}, rng, -2, 2);
        const Tensor p35 = rand_tensor({3, 5}, rng, -1, 1, false), p34 = rand_tensor({3, 4}, rng, -1, 1, false);
        check("linear", {a, b, bias}, [&] { return sum(mul(affine(a, b, bias), p35)); });
        check("relu", {x}, [&] { return sum(mul(relu(x), p34)); });
        check("sigmoid", {x}, [&] { return sum(mul(sigmoid(x), p34)); });
        check("gelu", {x}, [&] { return sum(mul(gelu(x), p34)); });
        check("softmax", {x}, [&] { return sum(mul(softmax(x, 1), p34)); });
        Tensor gain = rand_tensor({4}, rng, 0.5, 1.5), beta = rand_tensor({4}, rng, -1, 1);
        check("layer_norm", {x, gain, beta}, [&] { return sum(mul(layer_norm(x, gain, beta), p34)); });
        Tensor img = rand_tensor({2, 8, 8}, rng, -1, 1), k = rand_tensor({3, 2, 3, 3}, rng, -1, 1);
        Tensor kb = rand_tensor({3}, rng, -1, 1);
        const Tensor p4 = rand_tensor({3, 4, 4}, rng, -1, 1, false), p16 = rand_tensor({2, 16, 16}, rng, -1, 1, false);
        check("conv2d", {img, k, kb}, [&] { return sum(mul(conv2d(img, k, kb, 2, 1), p4)); });
        check("upsample", {img}, [&] { return sum(mul(upsample2x(img, UpsampleMode::bilinear), p16)); });
        Rng drop(seed);
        check("dropout", {x}, [&] {
            drop = Rng(seed);
            return sum(mul(dropout(x, 0.3, true, drop), p34));
        });
        Tensor v = rand_tensor({6}, rng, -1, 1), u = rand_tensor({6}, rng, -1, 1);
        const Tensor p6 = rand_tensor({6}, rng, -1, 1, false);
        check("l2_normalize", {v}, [&] { return sum(mul(l2_normalize(v), p6)); });
        check("euclidean_distance", {v, u}, [&] { return euclidean_distance(v, u); });

        // Losses.
        Tensor za = rand_tensor({4}, rng, -1, 1), zp = rand_tensor({4}, rng, -1, 1), zn = rand_tensor({4}, rng, -1, 1);
        check("triplet", {za, zp, zn}, [&] {
            auto e = [](const Tensor& z, int s) { return LatentEmbedding{z, l2_normalize(z), s, false}; };
            return triplet_loss({e(za, 1), e(zp, 1), e(zn, 9), 0, 1, 2});
        });
        const Tensor target = rand_tensor({1, 16, 16}, rng, 0, 1, false);
        Tensor recon = rand_tensor({1, 16, 16}, rng, 0.05, 0.95);
        check("bce", {recon}, [&] { return bce_loss(target, recon); });
        const PerceptualExtractor ex(6 + seed);
        check("perceptual", {recon}, [&] { return perceptual_loss(target, recon, ex); });
        Tensor logits = rand_tensor({10}, rng, -3, 3);
        check("cross_entropy", {logits}, [&] { return cross_entropy(logits, static_cast<int>(seed)); });
    }

    // End-to-end autoencoder objective: triplet + BCE + perceptual at 16×16.
    AEConfig acfg;
    acfg.image_size = 16;
    acfg.num_blocks = 2;
    acfg.base_channels = 2;
    acfg.latent_dim = 4;
    acfg.dropout_p = 0.0;
    const PerceptualExtractor ex(7, {3, 4});
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Autoencoder ae(acfg, seed);
        Rng rng(100 + seed);
        randomize(ae.parameters(), rng, -1, 1);
        const std::vector<int> stages = {0, 0, 3, 3, 7};
        std::vector<Tensor> images;
        for (std::size_t i = 0; i < stages.size(); ++i) images.push_back(rand_tensor({1, 16, 16}, rng, 0, 1, false));
        std::vector<LatentEmbedding> batch;
        for (std::size_t i = 0; i < images.size(); ++i) {
            batch.push_back(ae.encode(images[i]));
            batch.back().stage = stages[i];
        }
        Rng mining(seed);
        const MiningResult mined = mine_semi_hard(batch, mining);
        check("autoencoder_total", values_of(ae.parameters()), [&] {
            std::vector<LatentEmbedding> emb;
            std::vector<Tensor> rec;
            for (std::size_t i = 0; i < images.size(); ++i) {
                emb.push_back(ae.encode(images[i]));
                emb.back().stage = stages[i];
                const Tensor r = ae.decode(emb.back().z);
                rec.push_back(add(bce_loss(images[i], r), perceptual_loss(images[i], r, ex)));
            }
            std::vector<Tensor> trip;
            for (const Triplet& t : mined.triplets)
                trip.push_back(triplet_loss({emb[t.anchor_index], emb[t.positive_index], emb[t.negative_index],
                                             t.anchor_index, t.positive_index, t.negative_index}));
            return total_ae_loss(trip, rec, 0.7).total;
        }, 6, seed);
    }

    // End-to-end ViT cross-entropy. The attention key bias has an exactly zero
    // gradient (softmax shift invariance) and is bounded absolutely instead.
    ViTConfig vcfg;
    vcfg.image_size = 8;
    vcfg.patch_size = 4;
    vcfg.embed_dim = 4;
    vcfg.num_heads = 2;
    vcfg.num_layers = 2;
    vcfg.mlp_ratio = 2;
    vcfg.num_classes = 3;
    double kbias = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        VisionTransformer vit(vcfg, seed);
        Rng rng(50 + seed);
        randomize(vit.parameters(), rng, -0.8, 0.8);
        const Tensor img = rand_tensor({1, 8, 8}, rng, 0, 1, false);
        auto loss = [&] { return cross_entropy(vit.forward(img).logits, static_cast<int>(seed % 3)); };
        std::vector<Tensor> checked;
        for (const auto& [name, p] : vit.parameters()) {
            if (name.ends_with("attn.k.bias")) {
                Tensor t = p;
                t.zero_grad();
                loss().backward();
                for (double g : t.grad()) kbias = std::max(kbias, std::abs(g));
            } else {
                checked.push_back(p);
            }
        }
        check("vit_cross_entropy", checked, loss, 0, seed);
    }
    const double secs = seconds_since(t0);
    const bool ok = worst < 1e-4 && kbias < 1e-12 && secs < 120.0;
    return {ok, fmt("max rel err %.3g", worst) + " (" + worst_name + "), |key-bias grad| " + fmt("%.1g", kbias) +
                    fmt(", %.1f s", secs)};
}

// ---------------------------------------------------------------- 2

Outcome metric_oracles() {
    Rng rng(2024);
    std::size_t mismatches = 0, undefined = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(100);
        std::vector<int> y(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(10));
            p[i] = trial % 2 ? static_cast<int>(rng.below(10)) : std::clamp(y[i] + static_cast<int>(rng.below(3)) - 1, 0, 9);
        }
        // Per-sample oracles.
        long long hits = 0, abs_err = 0, agree = 0, chance = 0;
        for (std::size_t i = 0; i < n; ++i) {
            hits += y[i] == p[i];
            abs_err += std::abs(y[i] - p[i]);
            agree += 9 - std::abs(y[i] - p[i]);
            for (std::size_t j = 0; j < n; ++j) chance += 9 - std::abs(y[i] - p[j]);
        }
        const long long nn = static_cast<long long>(n);
        const auto cm = ConfusionMatrix::from_labels(y, p, 10);
        if (accuracy(cm) != static_cast<double>(hits) / static_cast<double>(nn)) ++mismatches;
        if (mae(y, p) != static_cast<double>(abs_err) / static_cast<double>(nn)) ++mismatches;
        const long long denom = nn * nn * 9 - chance;
        if (denom == 0) {
            ++undefined;
            continue;
        }
        if (weighted_kappa(cm) != static_cast<double>(nn * agree - chance) / static_cast<double>(denom)) ++mismatches;
    }
    double diag_min = 1.0;
    for (int t = 0; t < 20; ++t) {
        ConfusionMatrix d(10);
        for (std::size_t i = 0; i < 10; ++i) d.at(i, i) = 1 + rng.below(20);
        diag_min = std::min(diag_min, weighted_kappa(d));
    }
    double constant_max = 0.0;
    for (std::size_t c = 0; c < 10; ++c) {
        ConfusionMatrix m(10);
        for (std::size_t i = 0; i < 10; ++i) m.at(i, c) = 20;
        constant_max = std::max(constant_max, std::abs(weighted_kappa(m)));
    }
    const bool ok = mismatches == 0 && diag_min == 1.0 && constant_max < 1e-12;
    return {ok, std::to_string(mismatches) + " mismatches over 1000 vectors (" + std::to_string(undefined) +
                    " kappa-undefined), diagonal kappa " + fmt("%.17g", diag_min) +
                    fmt(", constant-predictor |kappa| %.3g", constant_max)};
}

// ---------------------------------------------------------------- 3

Outcome loss_values() {
    const double bce = bce_loss(Tensor::full({1, 1, 1}, 0.5), Tensor::full({1, 1, 1}, 0.5)).item();
    const double ce = cross_entropy(Tensor::zeros({10}), 3).item();
    const double m09 = ordinal_margin(0, 9), m34 = ordinal_margin(3, 4);
    // Linearity in gamma on random term sets.
    Rng rng(3);
    double lin = 0.0;
    for (int t = 0; t < 50; ++t) {
        std::vector<Tensor> trip, rec;
        for (int i = 0; i < 1 + static_cast<int>(rng.below(5)); ++i) trip.push_back(Tensor::scalar(rng.uniform(0, 2)));
        for (int i = 0; i < 1 + static_cast<int>(rng.below(5)); ++i) rec.push_back(Tensor::scalar(rng.uniform(0, 2)));
        const double f0 = total_ae_loss(trip, rec, 0.0).total.item();
        const double f1 = total_ae_loss(trip, rec, 1.0).total.item();
        for (double g : {0.1, 0.35, 0.7, 0.9}) {
            const double fg = total_ae_loss(trip, rec, g).total.item();
            lin = std::max(lin, std::abs(fg - ((1.0 - g) * f0 + g * f1)));
        }
    }
    const bool ok = std::abs(bce - std::log(2.0)) <= 1e-12 && std::abs(ce - std::log(10.0)) <= 1e-12 && m09 == 1.0 &&
                    m34 == 1.0 / 9.0 && lin < 1e-12;
    return {ok, fmt("BCE err %.2g, CE err %.2g, ", std::abs(bce - std::log(2.0)), std::abs(ce - std::log(10.0))) +
                    fmt("margin(0,9)=%.17g, margin(3,4)=%.17g, ", m09, m34) + fmt("linearity dev %.2g", lin)};
}

// ---------------------------------------------------------------- 4

Outcome rollout_contract() {
    Rng rng(4);
    double row_dev = 0.0, oracle_dev = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t heads = 1 + rng.below(4), grid = 2 + rng.below(3), t = grid * grid + 1;
        AttentionRecord rec;
        for (int l = 0; l < 3; ++l) {
            std::vector<double> v(heads * t * t);
            for (std::size_t r = 0; r < heads * t; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < t; ++j) s += v[r * t + j] = std::exp(3.0 * rng.normal());
                for (std::size_t j = 0; j < t; ++j) v[r * t + j] /= s;
            }
            rec.layers.push_back(Tensor({heads, t, t}, std::move(v)));
        }
        // Dense oracle with explicit matrices.
        std::vector<double> r(t * t, 0.0);
        for (std::size_t i = 0; i < t; ++i) r[i * t + i] = 1.0;
        for (const Tensor& a : rec.layers) {
            const auto hat = residual_attention(a);
            std::vector<double> m(t * t);
            for (std::size_t i = 0; i < t; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < t; ++j) {
                    double avg = 0.0;
                    for (std::size_t h = 0; h < heads; ++h) avg += a[(h * t + i) * t + j];
                    m[i * t + j] = 0.5 * avg / static_cast<double>(heads) + 0.5 * (i == j);
                    s += hat[i * t + j];
                }
                row_dev = std::max(row_dev, std::abs(s - 1.0));
                double ms = 0.0;
                for (std::size_t j = 0; j < t; ++j) ms += m[i * t + j];
                for (std::size_t j = 0; j < t; ++j) m[i * t + j] /= ms;
            }
            std::vector<double> next(t * t, 0.0);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < t; ++j)
                    for (std::size_t k = 0; k < t; ++k) next[i * t + j] += m[i * t + k] * r[k * t + j];
            r = std::move(next);
        }
        double cls = 0.0;
        for (std::size_t j = 1; j < t; ++j) cls += r[j];
        const AttentionMap map = attention_rollout(rec);
        for (std::size_t j = 1; j < t; ++j) oracle_dev = std::max(oracle_dev, std::abs(map.values[j - 1] - r[j] / cls));
    }
    return {row_dev <= 1e-9 && oracle_dev <= 1e-12,
            fmt("max row-sum deviation %.2g, max oracle deviation %.2g", row_dev, oracle_dev)};
}

// ---------------------------------------------------------------- 5

Outcome latent_diagnostics() {
    Rng rng(5);
    double inter_dev = 0.0, intra_dev = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 3 + rng.below(6);
        std::vector<LatentEmbedding> emb;
        for (int i = 0; i < 60; ++i) {
            std::vector<double> z(d);
            for (double& v : z) v = rng.normal();
            Tensor zt({d}, z);
            emb.push_back({zt, l2_normalize(zt), static_cast<int>(rng.below(10)), false});
        }
        const StageMatrix inter = latent_centroid_distances(emb);
        const auto intra = intra_class_distances(emb);
        std::vector<std::vector<double>> c(10, std::vector<double>(d, 0.0));
        std::vector<int> count(10, 0);
        for (const auto& e : emb) {
            for (std::size_t j = 0; j < d; ++j) c[e.stage][j] += e.z_norm[j];
            ++count[e.stage];
        }
        for (auto& v : c) {
            double n = 0.0;
            for (double x : v) n += x * x;
            for (double& x : v) x /= std::sqrt(n);
        }
        for (int a = 0; a < 10; ++a) {
            double pair_sum = 0.0;
            int pairs = 0;
            for (std::size_t i = 0; i < emb.size(); ++i)
                for (std::size_t j = i + 1; j < emb.size(); ++j) {
                    if (emb[i].stage != a || emb[j].stage != a) continue;
                    double dot = 0.0;
                    for (std::size_t q = 0; q < d; ++q) dot += emb[i].z_norm[q] * emb[j].z_norm[q];
                    pair_sum += 1.0 - dot;
                    ++pairs;
                }
            if ((pairs > 0) != intra[a].has_value()) return {false, "intra-class presence mismatch"};
            if (pairs > 0) intra_dev = std::max(intra_dev, std::abs(*intra[a] - pair_sum / pairs));
            for (int b = 0; b < 10; ++b) {
                if (!count[a] || !count[b]) {
                    if (inter.at(a, b)) return {false, "missing stage reported as present"};
                    continue;
                }
                double dot = 0.0;
                for (std::size_t q = 0; q < d; ++q) dot += c[a][q] * c[b][q];
                inter_dev = std::max(inter_dev, std::abs(*inter.at(a, b) - (a == b ? 0.0 : 1.0 - dot)));
            }
        }
    }
    // Planted rank-2 structure plus small isotropic noise.
    std::vector<double> u(16), w(16);
    for (auto& x : u) x = rng.normal();
    for (auto& x : w) x = rng.normal();
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 300; ++i) {
        const double s = rng.normal(0, 3), t = rng.normal(0, 2);
        std::vector<double> r(16);
        for (std::size_t j = 0; j < 16; ++j) r[j] = s * u[j] + t * w[j] + rng.normal(0, 0.05);
        rows.push_back(r);
    }
    const PCAResult pca = pca_project(rows, 3);
    const double top2 = pca.explained_fraction[0] + pca.explained_fraction[1];
    const bool ok = inter_dev <= 1e-12 && intra_dev <= 1e-12 && top2 > 0.99;
    return {ok, fmt("centroid oracle dev %.2g, pair oracle dev %.2g, planted rank-2 explained %.6f", inter_dev,
                    intra_dev, top2)};
}

// ---------------------------------------------------------------- 6-8

// Desk-scale settings shared by criteria 6 and 7.
ExperimentConfig desk_config(const fs::path& data, double variability, double noise, bool use_ae) {
    ExperimentConfig cfg;
    cfg.seed = 2025;
    cfg.use_ae = use_ae;
    cfg.folds = 4;
    cfg.dataset_dir = data.string();
    cfg.synth.image_size = 32;
    cfg.synth.num_stages = 10;
    cfg.synth.samples_per_stage = 20;
    cfg.synth.variability = variability;
    cfg.synth.noise_sigma = noise;
    cfg.ae.image_size = 32;
    cfg.ae.base_channels = 8;
    cfg.ae.latent_dim = 16;
    cfg.ae.num_blocks = 4;
    cfg.vit.image_size = 32;
    cfg.vit.patch_size = 8;
    cfg.vit.embed_dim = 64;
    cfg.vit.num_heads = 2;
    cfg.vit.num_layers = 2;
    cfg.ae_train.epochs = 60;
    cfg.ae_train.batch_size = 16;
    cfg.ae_train.lr = 2e-3;
    cfg.classifier_train.epochs = 60;
    cfg.classifier_train.batch_size = 16;
    cfg.classifier_train.lr = 1e-3;
    return cfg;
}

double mean_of(const RunReport& r, const std::function<double(const FoldReport&)>& f) {
    double s = 0.0;
    for (const auto& fold : r.folds) s += f(fold);
    return s / static_cast<double>(r.folds.size());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_runs";
    fs::create_directories(work);
    std::printf("acceptance outputs under %s\n", work.string().c_str());

    criterion(1, "gradient suite (finite differences < 1e-4, < 2 min)", gradient_suite);
    criterion(2, "metric oracles (kappa_w, accuracy, MAE)", metric_oracles);
    criterion(3, "loss unit values", loss_values);
    criterion(4, "rollout contract", rollout_contract);
    criterion(5, "latent diagnostics oracles and planted-rank PCA", latent_diagnostics);

    RunReport low, high, high_vit;
    bool runs_ok = true;
    std::string run_error;
    double run_secs = 0.0;
    try {
        const auto t0 = std::chrono::steady_clock::now();
        const SynthConfig lv = SynthConfig::lowvar(), hv = SynthConfig::highvar();
        const ExperimentConfig low_cfg = desk_config(work / "lowvar_data", lv.variability, lv.noise_sigma, true);
        const ExperimentConfig high_cfg = desk_config(work / "highvar_data", hv.variability, hv.noise_sigma, true);
        ExperimentConfig high_vit_cfg = high_cfg;
        high_vit_cfg.use_ae = false;
        cmd_generate(low_cfg, low_cfg.dataset_dir);
        cmd_generate(high_cfg, high_cfg.dataset_dir);
        low = cmd_run(low_cfg, work / "lowvar_ae_vit");
        high = cmd_run(high_cfg, work / "highvar_ae_vit");
        high_vit = cmd_run(high_vit_cfg, work / "highvar_vit_only");
        run_secs = seconds_since(t0);
    } catch (const std::exception& e) {
        runs_ok = false;
        run_error = e.what();
    }

    criterion(6, "LOWVAR vs HIGHVAR phenomenon", [&]() -> Outcome {
        if (!runs_ok) return {false, "runs failed: " + run_error};
        const double acc_low = low.accuracy.mean, acc_high = high.accuracy.mean;
        const double intra_low = mean_of(low, [](const FoldReport& f) { return *f.mean_intra_distance; });
        const double intra_high = mean_of(high, [](const FoldReport& f) { return *f.mean_intra_distance; });
        const double inter_low = mean_of(low, [](const FoldReport& f) { return *f.mean_inter_distance; });
        const double inter_high = mean_of(high, [](const FoldReport& f) { return *f.mean_inter_distance; });
        const bool ok = acc_low - acc_high >= 0.15 && intra_low < intra_high && inter_low > inter_high;
        return {ok, fmt("accuracy %.3f vs %.3f; ", acc_low, acc_high) +
                        fmt("intra %.4f vs %.4f; ", intra_low, intra_high) +
                        fmt("inter %.4f vs %.4f; ", inter_low, inter_high) +
                        fmt("all three runs %.0f s", run_secs)};
    });

    criterion(7, "AE+ViT >= ViT-only on HIGHVAR in >= 3 of 4 folds", [&]() -> Outcome {
        if (!runs_ok) return {false, "runs failed: " + run_error};
        int wins = 0;
        std::string per_fold;
        for (std::size_t f = 0; f < high.folds.size(); ++f) {
            const double a = high.folds[f].metrics.accuracy, b = high_vit.folds[f].metrics.accuracy;
            wins += a >= b;
            per_fold += fmt(" %.2f/%.2f", a, b);
        }
        return {wins >= 3, std::to_string(wins) + " of 4 folds (AE+ViT/ViT-only:" + per_fold + ")" +
                               fmt("; means %.3f vs %.3f", high.accuracy.mean, high_vit.accuracy.mean)};
    });

    criterion(8, "cmd_run determinism", [&]() -> Outcome {
        ExperimentConfig cfg = desk_config(work / "lowvar_data", 0.2, 0.02, true);
        cfg.ae_train.epochs = 4;
        cfg.classifier_train.epochs = 4;
        const fs::path a = work / "determinism_a", b = work / "determinism_b";
        fs::remove_all(a);
        fs::remove_all(b);
        cmd_run(cfg, a);
        cmd_run(cfg, b);
        std::size_t compared = 0, differing = 0;
        for (const std::string rel : {"metrics.csv", "fold_0/predictions.csv", "fold_1/predictions.csv",
                                      "fold_2/predictions.csv", "fold_3/predictions.csv"}) {
            ++compared;
            const std::string x = slurp(a / rel), y = slurp(b / rel);
            if (x.empty() || x != y) ++differing;
        }
        return {differing == 0, std::to_string(compared - differing) + " of " + std::to_string(compared) +
                                    " files byte-identical"};
    });

    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
