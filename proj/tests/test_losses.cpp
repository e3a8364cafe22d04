#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "ordistage/errors.hpp"
#include "ordistage/gradcheck.hpp"
#include "ordistage/losses.hpp"
#include "ordistage/ops.hpp"
#include "test_util.hpp"

using namespace ordistage;
using testutil::random_image;
using testutil::random_tensor;

namespace {

LatentEmbedding embedding(std::vector<double> z, int stage) {
    LatentEmbedding e;
    e.z = Tensor({z.size()}, z, true);
    e.z_norm = l2_normalize(e.z);
    double sq = 0.0;
    for (double v : z) sq += v * v;
    e.degenerate = sq == 0.0;
    e.stage = stage;
    return e;
}

// Unit vector at `angle`; two of these at angular separation Δ are 2·sin(Δ/2) apart.
LatentEmbedding on_circle(double angle, int stage) { return embedding({std::cos(angle), std::sin(angle)}, stage); }

double separation_for(double chord) { return 2.0 * std::asin(chord / 2.0); }

double dist(const LatentEmbedding& a, const LatentEmbedding& b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.z_norm.numel(); ++i) sq += std::pow(a.z_norm[i] - b.z_norm[i], 2);
    return std::sqrt(sq);
}

}  // namespace

// ---------------------------------------------------------------- margin

TEST(OrdinalMargin, Examples) {
    EXPECT_NEAR(ordinal_margin(3, 4), 1.0 / 9.0, 1e-15);
    EXPECT_EQ(ordinal_margin(0, 9), 1.0);
    EXPECT_EQ(ordinal_margin(9, 0), 1.0);
    EXPECT_THROW(ordinal_margin(5, 5), ContractError);
    EXPECT_THROW(ordinal_margin(-1, 3), InputError);
    EXPECT_THROW(ordinal_margin(2, 10), InputError);
}

TEST(OrdinalMargin, MonotoneInStageDistanceAndBounded) {
    for (int a = 0; a <= 9; ++a)
        for (int n = 0; n <= 9; ++n) {
            if (a == n) continue;
            const double m = ordinal_margin(a, n);
            EXPECT_GT(m, 0.0);
            EXPECT_LE(m, 1.0);
            EXPECT_EQ(m, ordinal_margin(n, a));
            if (n + 1 <= 9 && n > a) {
                EXPECT_LT(m, ordinal_margin(a, n + 1));
            }
        }
}

// ---------------------------------------------------------------- triplet loss

TEST(TripletLoss, Examples) {
    {
        // D(a,p) = 0.2, D(a,n) = 0.5, margin 1/9: satisfied, loss 0.
        Triplet t{on_circle(0, 3), on_circle(separation_for(0.2), 3), on_circle(-separation_for(0.5), 4)};
        EXPECT_NEAR(dist(t.anchor, t.positive), 0.2, 1e-15);
        EXPECT_NEAR(triplet_loss(t).item(), 0.0, 1e-15);
    }
    {
        // All three coincide, stages 0 and 9: loss equals the full margin.
        Triplet t{on_circle(0.3, 0), on_circle(0.3, 0), on_circle(0.3, 9)};
        EXPECT_NEAR(triplet_loss(t).item(), 1.0, 1e-15);
    }
    {
        // D(a,p) = D(a,n) = 0.5 with stages 2 and 4: loss 2/9.
        Triplet t{on_circle(0, 2), on_circle(separation_for(0.5), 2), on_circle(-separation_for(0.5), 4)};
        EXPECT_NEAR(triplet_loss(t).item(), 2.0 / 9.0, 1e-12);
        EXPECT_NEAR(triplet_loss(t).item(), 0.2222, 1e-4);
    }
}

TEST(TripletLoss, ZeroExactlyWhenMarginSatisfied) {
    Rng rng(3);
    for (int trial = 0; trial < 2000; ++trial) {
        const int ya = static_cast<int>(rng.below(10));
        int yn = static_cast<int>(rng.below(9));
        if (yn >= ya) ++yn;
        Triplet t{embedding({rng.normal(), rng.normal(), rng.normal()}, ya),
                  embedding({rng.normal(), rng.normal(), rng.normal()}, ya),
                  embedding({rng.normal(), rng.normal(), rng.normal()}, yn)};
        const double gap = dist(t.anchor, t.negative) - dist(t.anchor, t.positive);
        const double loss = triplet_loss(t).item();
        EXPECT_GE(loss, 0.0);
        if (gap >= ordinal_margin(ya, yn)) {
            EXPECT_EQ(loss, 0.0);
        } else {
            EXPECT_GT(loss, 0.0);
            EXPECT_NEAR(loss, ordinal_margin(ya, yn) - gap, 1e-12);
        }
    }
}

TEST(TripletLoss, RejectsDegenerateAndMismatchedStages) {
    Triplet t{embedding({0, 0}, 1), on_circle(0, 1), on_circle(1, 2)};
    EXPECT_THROW(triplet_loss(t), ContractError);
    Triplet u{on_circle(0, 1), on_circle(0.1, 2), on_circle(1, 3)};
    EXPECT_THROW(triplet_loss(u), ContractError);
}

TEST(TripletLoss, GradientMatchesFiniteDifferences) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({5}, rng, -1, 1, true), p = random_tensor({5}, rng, -1, 1, true),
               n = random_tensor({5}, rng, -1, 1, true);
        auto loss = [&] {
            auto make = [](const Tensor& z, int stage) {
                LatentEmbedding e;
                e.z = z;
                e.z_norm = l2_normalize(z);
                e.stage = stage;
                return e;
            };
            // Margin 1 keeps the hinge active for almost every draw.
            return triplet_loss(Triplet{make(a, 0), make(p, 0), make(n, 9)});
        };
        if (loss().item() == 0.0) continue;
        EXPECT_LT(finite_diff_check(loss, {a, p, n}), 1e-6);
    }
}

// ---------------------------------------------------------------- mining

TEST(Mining, PicksNegativeInsideSemiHardBand) {
    // D(a,p) = 0.2. Negatives: stage 4 at 0.25 (inside 0.2 + 1/9), stage 4 at 0.5
    // (outside), stage 9 at 0.1 (harder than the positive).
    std::vector<LatentEmbedding> batch = {on_circle(0, 3), on_circle(separation_for(0.2), 3),
                                          on_circle(-separation_for(0.25), 4), on_circle(-separation_for(0.5), 4),
                                          on_circle(-separation_for(0.1), 9)};
    Rng rng(1);
    const MiningResult r = mine_semi_hard(batch, rng);
    bool found = false;
    for (const Triplet& t : r.triplets) {
        if (t.anchor_index == 0 && t.positive_index == 1) {
            EXPECT_EQ(t.negative_index, 2u);
            found = true;
        }
    }
    EXPECT_TRUE(found);
}

TEST(Mining, FallsBackToClosestNegative) {
    // D(a,p) = 0.2, negatives at 0.9 and 1.2 with margin 1/9: band empty.
    std::vector<LatentEmbedding> batch = {on_circle(0, 3), on_circle(separation_for(0.2), 3),
                                          on_circle(-separation_for(1.2), 4), on_circle(-separation_for(0.9), 4)};
    Rng rng(2);
    const MiningResult r = mine_semi_hard(batch, rng);
    // Pairs (0,1), (1,0), (2,3), (3,2).
    ASSERT_EQ(r.triplets.size(), 4u);
    EXPECT_EQ(r.triplets[0].anchor_index, 0u);
    EXPECT_EQ(r.triplets[0].positive_index, 1u);
    EXPECT_EQ(r.triplets[0].negative_index, 3u);
}

TEST(Mining, SingleStageBatchGivesNoTriplets) {
    Rng rng(3);
    std::vector<LatentEmbedding> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(embedding({rng.normal(), rng.normal()}, 5));
    const MiningResult r = mine_semi_hard(batch, rng);
    EXPECT_TRUE(r.triplets.empty());
    EXPECT_TRUE(r.single_stage);
}

TEST(Mining, SkipsDegenerateEmbeddings) {
    Rng rng(4);
    std::vector<LatentEmbedding> batch = {on_circle(0, 1), on_circle(0.2, 1), embedding({0, 0}, 1),
                                          embedding({0, 0}, 2), on_circle(1.0, 2)};
    const MiningResult r = mine_semi_hard(batch, rng);
    EXPECT_EQ(r.degenerate_skipped, 2u);
    for (const Triplet& t : r.triplets) {
        EXPECT_NE(t.anchor_index, 2u);
        EXPECT_NE(t.positive_index, 2u);
        EXPECT_NE(t.negative_index, 3u);
    }
    EXPECT_EQ(r.triplets.size(), 2u);
}

TEST(Mining, ExhaustiveBandOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 3 + rng.below(12);
        std::vector<LatentEmbedding> batch;
        for (std::size_t i = 0; i < n; ++i)
            batch.push_back(embedding({rng.normal(), rng.normal(), rng.normal()}, static_cast<int>(rng.below(4))));
        Rng mining(trial);
        const MiningResult r = mine_semi_hard(batch, mining);

        std::set<std::pair<std::size_t, std::size_t>> expected_pairs, seen_pairs;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t p = 0; p < n; ++p) {
                if (a == p || batch[a].stage != batch[p].stage) continue;
                bool has_negative = false;
                for (std::size_t q = 0; q < n; ++q) has_negative = has_negative || batch[q].stage != batch[a].stage;
                if (has_negative) expected_pairs.insert({a, p});
            }
        std::size_t semi = 0;
        for (const Triplet& t : r.triplets) {
            EXPECT_TRUE(seen_pairs.insert({t.anchor_index, t.positive_index}).second);
            const auto& a = batch[t.anchor_index];
            const double d_ap = dist(a, batch[t.positive_index]);
            std::vector<std::size_t> band;
            std::size_t closest = n;
            double closest_d = std::numeric_limits<double>::infinity();
            for (std::size_t q = 0; q < n; ++q) {
                if (batch[q].stage == a.stage) continue;
                const double d = dist(a, batch[q]);
                if (d > d_ap && d < d_ap + ordinal_margin(a.stage, batch[q].stage)) band.push_back(q);
                if (d < closest_d) closest_d = d, closest = q;
            }
            if (band.empty()) {
                EXPECT_EQ(t.negative_index, closest);
            } else {
                ++semi;
                EXPECT_NE(std::find(band.begin(), band.end(), t.negative_index), band.end());
            }
            EXPECT_NE(t.negative.stage, a.stage);
        }
        EXPECT_EQ(seen_pairs, expected_pairs);
        EXPECT_EQ(semi, r.semi_hard);
    }
}

TEST(Mining, UniformAmongBandCandidates) {
    // Two negatives at the same distance inside the band.
    std::vector<LatentEmbedding> batch = {on_circle(0, 3), on_circle(separation_for(0.2), 3),
                                          on_circle(-separation_for(0.25), 5), on_circle(-separation_for(0.25), 6)};
    Rng rng(6);
    int first = 0;
    const int trials = 20000;
    for (int i = 0; i < trials; ++i) {
        const MiningResult r = mine_semi_hard(batch, rng);
        first += r.triplets.at(0).negative_index == 2u;
    }
    EXPECT_NEAR(static_cast<double>(first) / trials, 0.5, 0.02);
}

TEST(Mining, DeterministicForFixedSeed) {
    Rng data(7);
    std::vector<LatentEmbedding> batch;
    for (int i = 0; i < 12; ++i) batch.push_back(embedding({data.normal(), data.normal()}, i % 3));
    Rng a(99), b(99);
    const MiningResult ra = mine_semi_hard(batch, a), rb = mine_semi_hard(batch, b);
    ASSERT_EQ(ra.triplets.size(), rb.triplets.size());
    for (std::size_t i = 0; i < ra.triplets.size(); ++i)
        EXPECT_EQ(ra.triplets[i].negative_index, rb.triplets[i].negative_index);
}

// ---------------------------------------------------------------- BCE

TEST(BceLoss, Examples) {
    EXPECT_NEAR(bce_loss(Tensor::full({1, 4, 4}, 0.5), Tensor::full({1, 4, 4}, 0.5)).item(), std::log(2.0), 1e-15);
    Rng rng(1);
    std::vector<double> bits(64);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const Tensor binary({1, 8, 8}, bits);
    EXPECT_LT(bce_loss(binary, binary).item(), 1e-5);
    EXPECT_NEAR(bce_loss(Tensor::full({1, 2, 2}, 1.0), Tensor::full({1, 2, 2}, 0.25)).item(), 1.386294, 1e-6);
}

TEST(BceLoss, RejectsBadTargets) {
    EXPECT_THROW(bce_loss(Tensor::full({1, 2, 2}, 1.5), Tensor::full({1, 2, 2}, 0.5)), InputError);
    EXPECT_THROW(bce_loss(Tensor::full({1, 2, 2}, 0.5), Tensor::full({1, 3, 2}, 0.5)), DimensionError);
}

TEST(BceLoss, MinimizedAtTarget) {
    for (int ti = 0; ti <= 20; ++ti) {
        const double t = ti / 20.0;
        const Tensor target = Tensor::full({1, 1, 1}, t);
        double best = std::numeric_limits<double>::infinity(), arg = -1.0;
        for (int ri = 0; ri <= 1000; ++ri) {
            const double r = ri / 1000.0;
            const double l = bce_loss(target, Tensor::full({1, 1, 1}, r)).item();
            EXPECT_GE(l, 0.0 - 1e-15);
            if (l < best) best = l, arg = r;
        }
        EXPECT_NEAR(arg, t, 1e-3) << "target " << t;
    }
}

TEST(BceLoss, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor target = random_image(6, rng);
        Tensor recon = random_tensor({1, 6, 6}, rng, 0.05, 0.95, true);
        EXPECT_LT(finite_diff_check([&] { return bce_loss(target, recon); }, {recon}), 1e-6);
    }
}

// ---------------------------------------------------------------- perceptual

namespace {

// Straight-line evaluation of the perceptual objective from raw weights.
double perceptual_oracle(const Tensor& a, const Tensor& b, const ParameterMap& w, std::size_t layers) {
    auto feats = [&](const Tensor& img) {
        std::vector<std::vector<double>> out;
        std::size_t c = 1, h = img.dim(1), wd = img.dim(2);
        std::vector<double> x(img.data().begin(), img.data().end());
        for (double& v : x) v = 2.0 * v - 1.0;
        std::vector<std::size_t> dims;
        for (std::size_t l = 0; l < layers; ++l) {
            const Tensor& k = w.at("layer" + std::to_string(l) + ".weight");
            const Tensor& bias = w.at("layer" + std::to_string(l) + ".bias");
            const std::size_t co = k.dim(0), oh = (h + 2 - 3) / 2 + 1, ow = (wd + 2 - 3) / 2 + 1;
            std::vector<double> y(co * oh * ow);
            for (std::size_t o = 0; o < co; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double acc = bias[o];
                        for (std::size_t ci = 0; ci < c; ++ci)
                            for (std::size_t ky = 0; ky < 3; ++ky)
                                for (std::size_t kx = 0; kx < 3; ++kx) {
                                    const long yy = static_cast<long>(2 * i + ky) - 1;
                                    const long xx = static_cast<long>(2 * j + kx) - 1;
                                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd))
                                        continue;
                                    acc += k[((o * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + yy) * wd + xx];
                                }
                        y[(o * oh + i) * ow + j] = std::max(acc, 0.0);
                    }
            x = y;
            c = co, h = oh, wd = ow;
            out.push_back(y);
            out.back().push_back(static_cast<double>(co));
            out.back().push_back(static_cast<double>(oh * ow));
        }
        return out;
    };
    const auto fa = feats(a), fb = feats(b);
    double total = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t c = static_cast<std::size_t>(fa[l][fa[l].size() - 2]);
        const std::size_t hw = static_cast<std::size_t>(fa[l].back());
        const Tensor& cw = w.at("layer" + std::to_string(l) + ".channel_weight");
        double layer_sum = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            double na = 0.0, nb = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                na += fa[l][ch * hw + p] * fa[l][ch * hw + p];
                nb += fb[l][ch * hw + p] * fb[l][ch * hw + p];
            }
            na = std::sqrt(na) + kChannelNormEps;
            nb = std::sqrt(nb) + kChannelNormEps;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double d = cw[ch] * (fa[l][ch * hw + p] / na - fb[l][ch * hw + p] / nb);
                layer_sum += d * d;
            }
        }
        total += layer_sum / static_cast<double>(hw);
    }
    return total;
}

}  // namespace

TEST(PerceptualLoss, IdentityIsZeroAndSymmetric) {
    const PerceptualExtractor ex(1);
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor a = random_image(32, rng), b = random_image(32, rng);
        EXPECT_EQ(perceptual_loss(a, a, ex).item(), 0.0);
        const double ab = perceptual_loss(a, b, ex).item();
        EXPECT_GT(ab, 0.0);
        EXPECT_NEAR(ab, perceptual_loss(b, a, ex).item(), 1e-12);
    }
}

TEST(PerceptualLoss, MatchesStraightLineOracle) {
    Rng rng(3);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PerceptualExtractor ex(seed);
        // Non-uniform channel weights exercise the w_l term.
        ParameterMap w = snapshot_parameters(ex.parameters());
        for (auto& [name, t] : w)
            if (name.find("channel_weight") != std::string::npos)
                for (double& v : t.mutable_data()) v = rng.uniform(0.2, 2.0);
        const PerceptualExtractor weighted(w);
        const Tensor a = random_image(16, rng), b = random_image(16, rng);
        EXPECT_NEAR(perceptual_loss(a, b, weighted).item(), perceptual_oracle(a, b, w, 3), 1e-12);
    }
}

TEST(PerceptualLoss, ExtractorRoundTripsThroughCheckpoint) {
    const PerceptualExtractor ex(4);
    const PerceptualExtractor back(decode_checkpoint(encode_checkpoint(ex.parameters())));
    Rng rng(5);
    const Tensor a = random_image(16, rng), b = random_image(16, rng);
    EXPECT_EQ(perceptual_loss(a, b, ex).item(), perceptual_loss(a, b, back).item());
    ParameterMap broken = snapshot_parameters(ex.parameters());
    broken.erase("layer1.bias");
    EXPECT_THROW(PerceptualExtractor{broken}, DataError);
}

TEST(PerceptualLoss, GradientMatchesFiniteDifferences) {
    // Narrow extractors leave positions with a single active channel, where the
    // normalized feature is locally constant and the relative error measures noise.
    const PerceptualExtractor ex(6);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor target = random_image(16, rng);
        Tensor recon = random_tensor({1, 16, 16}, rng, 0.0, 1.0, true);
        EXPECT_LT(finite_diff_check([&] { return perceptual_loss(target, recon, ex); }, {recon}), 1e-4);
    }
}

// ---------------------------------------------------------------- total

TEST(TotalLoss, Examples) {
    const std::vector<Tensor> trip = {Tensor::scalar(0.2), Tensor::scalar(0.6)};
    const std::vector<Tensor> recon = {Tensor::scalar(1.5), Tensor::scalar(0.5)};
    EXPECT_NEAR(total_ae_loss(trip, recon, 1.0).total.item(), 0.4, 1e-15);
    EXPECT_NEAR(total_ae_loss(trip, recon, 0.0).total.item(), 1.0, 1e-15);
    EXPECT_NEAR(total_ae_loss(trip, recon, 0.7).total.item(), 0.58, 1e-15);
    const AELoss empty = total_ae_loss({}, recon, 0.7);
    EXPECT_TRUE(empty.empty_triplets);
    EXPECT_NEAR(empty.total.item(), 0.3, 1e-15);
    EXPECT_THROW(total_ae_loss(trip, recon, 1.2), ParameterError);
}

TEST(TotalLoss, LinearInGamma) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Tensor> trip, recon;
        for (int i = 0; i < 3; ++i) trip.push_back(Tensor::scalar(rng.uniform()));
        for (int i = 0; i < 4; ++i) recon.push_back(Tensor::scalar(rng.uniform(0, 3)));
        const double g = rng.uniform();
        const double l0 = total_ae_loss(trip, recon, 0.0).total.item();
        const double l1 = total_ae_loss(trip, recon, 1.0).total.item();
        EXPECT_NEAR(total_ae_loss(trip, recon, g).total.item(), g * l1 + (1 - g) * l0, 1e-12);
    }
}

// ---------------------------------------------------------------- cross-entropy

TEST(CrossEntropy, Examples) {
    EXPECT_NEAR(cross_entropy(Tensor::zeros({10}), 3).item(), std::log(10.0), 1e-15);
    std::vector<double> big(10, 0.0);
    big[4] = 30.0;
    EXPECT_LT(cross_entropy(Tensor({10}, big), 4).item(), 1e-12);
    EXPECT_NEAR(cross_entropy(Tensor::vector({1, 2, 3}), 2).item(), 0.407605964444380304, 1e-15);
    EXPECT_THROW(cross_entropy(Tensor::zeros({10}), 10), InputError);
    EXPECT_THROW(cross_entropy(Tensor::zeros({10}), -1), InputError);
}

TEST(CrossEntropy, StableForLargeLogits) {
    const double l = cross_entropy(Tensor::vector({1000.0, 0.0}), 1).item();
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_NEAR(l, 1000.0, 1e-9);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = random_tensor({10}, rng, -3, 3, true);
        const int label = static_cast<int>(rng.below(10));
        EXPECT_LT(finite_diff_check([&] { return cross_entropy(z, label); }, {z}), 1e-6);
    }
}
