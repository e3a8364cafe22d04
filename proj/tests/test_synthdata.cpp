#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "ordistage/errors.hpp"
#include "ordistage/synthdata.hpp"

using namespace ordistage;

namespace {

double mass(const Tensor& t) {
    double m = 0.0;
    for (double v : t.data()) m += v;
    return m;
}

// Index of the lowest row holding anything brighter than the background.
std::size_t lowest_row(const Tensor& t) {
    const std::size_t n = t.dim(2);
    std::size_t lowest = 0;
    for (std::size_t i = 0; i < t.dim(1); ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (t[i * n + j] > 0.06) lowest = i;
    return lowest;
}

double mean_intra_class_variance(const Dataset& d) {
    std::map<std::pair<int, Sex>, std::vector<const Tensor*>> groups;
    for (const auto& s : d) groups[{s.stage, s.sex}].push_back(&s.image);
    double total = 0.0;
    for (const auto& [key, imgs] : groups) {
        const std::size_t p = imgs.front()->numel();
        double var = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            double mean = 0.0;
            for (const Tensor* t : imgs) mean += (*t)[j];
            mean /= static_cast<double>(imgs.size());
            for (const Tensor* t : imgs) var += ((*t)[j] - mean) * ((*t)[j] - mean);
        }
        total += var / static_cast<double>(p * imgs.size());
    }
    return total / static_cast<double>(groups.size());
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("ordistage_synth_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST(Render, MassStrictlyIncreasesWithStage) {
    for (std::size_t size : {16u, 32u, 64u}) {
        double prev = -1.0;
        for (int s = 0; s < 10; ++s) {
            const double m = mass(render_stage_image(s, MorphParams{}, size));
            EXPECT_GT(m, prev) << "stage " << s << " size " << size;
            prev = m;
        }
    }
}

TEST(Render, CrownStagesHaveNoRootAndRootsLengthen) {
    const std::size_t crown_base = lowest_row(render_stage_image(5, MorphParams{}, 64));
    for (int s = 0; s <= 5; ++s) EXPECT_LE(lowest_row(render_stage_image(s, MorphParams{}, 64)), crown_base);
    std::size_t prev = crown_base;
    for (int s = 6; s <= 9; ++s) {
        const std::size_t r = lowest_row(render_stage_image(s, MorphParams{}, 64));
        EXPECT_GT(r, prev) << "stage " << s;
        prev = r;
    }
}

TEST(Render, DeterministicAndInRange) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const MorphParams m = MorphParams::draw(1.5, rng);
        const int stage = static_cast<int>(rng.below(10));
        const Tensor a = render_stage_image(stage, m, 32);
        const Tensor b = render_stage_image(stage, m, 32);
        EXPECT_EQ(a.shape(), (Shape{1, 32, 32}));
        for (std::size_t i = 0; i < a.numel(); ++i) {
            EXPECT_EQ(a[i], b[i]);
            EXPECT_GE(a[i], 0.0);
            EXPECT_LE(a[i], 1.0);
        }
    }
    EXPECT_THROW(render_stage_image(10, MorphParams{}, 32), ParameterError);
    EXPECT_THROW(render_stage_image(-1, MorphParams{}, 32), ParameterError);
}

TEST(Render, MorphologyChangesTheImage) {
    const Tensor base = render_stage_image(7, MorphParams{}, 32);
    MorphParams m;
    m.root_splay = 0.5;
    const Tensor splayed = render_stage_image(7, m, 32);
    double diff = 0.0;
    for (std::size_t i = 0; i < base.numel(); ++i) diff += std::abs(base[i] - splayed[i]);
    EXPECT_GT(diff, 0.5);
}

TEST(Generate, CountsBalanceAndIds) {
    const Dataset d = generate_dataset(SynthConfig::lowvar(1));
    ASSERT_EQ(d.size(), 200u);
    std::map<std::pair<int, Sex>, int> cells;
    std::set<std::string> ids;
    for (const auto& s : d) {
        ++cells[{s.stage, s.sex}];
        ids.insert(s.id);
        for (double v : s.image.data()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            EXPECT_EQ(std::round(v * 255.0) / 255.0, v);
        }
    }
    EXPECT_EQ(ids.size(), 200u);
    EXPECT_EQ(cells.size(), 20u);
    for (const auto& [key, n] : cells) EXPECT_EQ(n, 10);
}

TEST(Generate, ZeroVariabilityGivesIdenticalCells) {
    SynthConfig cfg;
    cfg.variability = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.samples_per_stage = 6;
    const Dataset d = generate_dataset(cfg);
    for (const auto& a : d)
        for (const auto& b : d) {
            if (a.stage != b.stage || a.sex != b.sex) continue;
            for (std::size_t i = 0; i < a.image.numel(); ++i) ASSERT_EQ(a.image[i], b.image[i]);
        }
    // The sexes differ deterministically.
    EXPECT_NE(mass(d[0].image), mass(d[3].image));
}

TEST(Generate, IntraClassVarianceGrowsWithVariability) {
    double prev = -1.0;
    for (double v : {0.0, 0.5, 1.0}) {
        SynthConfig cfg;
        cfg.variability = v;
        cfg.noise_sigma = 0.0;
        cfg.seed = 4;
        const double var = mean_intra_class_variance(generate_dataset(cfg));
        EXPECT_GT(var, prev) << "variability " << v;
        prev = var;
    }
}

TEST(Generate, DeterministicUnderSeed) {
    const Dataset a = generate_dataset(SynthConfig::highvar(9));
    const Dataset b = generate_dataset(SynthConfig::highvar(9));
    const Dataset c = generate_dataset(SynthConfig::highvar(10));
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].id, b[i].id);
        for (std::size_t j = 0; j < a[i].image.numel(); ++j) {
            ASSERT_EQ(a[i].image[j], b[i].image[j]);
            differs = differs || a[i].image[j] != c[i].image[j];
        }
    }
    EXPECT_TRUE(differs);
}

TEST(Generate, ConfigValidation) {
    SynthConfig odd;
    odd.samples_per_stage = 5;
    EXPECT_THROW(generate_dataset(odd), ConfigError);
    SynthConfig neg;
    neg.variability = -0.1;
    EXPECT_THROW(neg.validate(), ConfigError);
    SynthConfig noise;
    noise.noise_sigma = NAN;
    EXPECT_THROW(noise.validate(), ConfigError);
    SynthConfig stages;
    stages.num_stages = 11;
    EXPECT_THROW(stages.validate(), ConfigError);
}

TEST(DatasetIO, RoundTripIsBitExact) {
    const auto dir = scratch_dir("roundtrip");
    SynthConfig cfg = SynthConfig::highvar(2);
    cfg.samples_per_stage = 4;
    const Dataset d = generate_dataset(cfg);
    write_dataset(dir, d);
    EXPECT_TRUE(std::filesystem::exists(dir / "manifest.csv"));
    const Dataset back = load_dataset(dir);
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back[i].id, d[i].id);
        EXPECT_EQ(back[i].stage, d[i].stage);
        EXPECT_EQ(back[i].sex, d[i].sex);
        ASSERT_EQ(back[i].image.shape(), d[i].image.shape());
        for (std::size_t j = 0; j < d[i].image.numel(); ++j) ASSERT_EQ(back[i].image[j], d[i].image[j]);
    }
    std::filesystem::remove_all(dir);
}

TEST(DatasetIO, RejectsMalformedManifests) {
    const auto dir = scratch_dir("bad");
    SynthConfig cfg;
    cfg.samples_per_stage = 2;
    cfg.num_stages = 2;
    write_dataset(dir, generate_dataset(cfg));
    const auto write_manifest = [&](const std::string& text) {
        std::ofstream(dir / "manifest.csv", std::ios::binary) << text;
    };
    write_manifest("id,stage,sex\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\na,1,C,images/s0_A_000.pgm\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\na,x,A,images/s0_A_000.pgm\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\na,1,A,images/s0_A_000.pgm\na,1,A,images/s0_A_000.pgm\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\na,1,A,images/missing.pgm\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\n");
    EXPECT_THROW(load_dataset(dir), DataError);
    write_manifest("id,stage,sex,filename\na,1,A,images/s0_A_000.pgm\n");
    EXPECT_EQ(load_dataset(dir).size(), 1u);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_dataset(dir), DataError);
}
