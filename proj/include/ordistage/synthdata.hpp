#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "ordistage/dataset.hpp"
#include "ordistage/random.hpp"
#include "ordistage/tensor.hpp"

namespace ordistage {

inline constexpr int kCrownStages = 6;  // stages 0..5 form the crown, 6..9 the root

struct SynthConfig {
    std::size_t image_size = 32;
    std::size_t num_stages = 10;
    std::size_t samples_per_stage = 20;
    double variability = 0.2;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;

    void validate() const;

    static SynthConfig lowvar(std::uint64_t seed = 0);
    static SynthConfig highvar(std::uint64_t seed = 0);
};

/// Perturbations of the canonical figure. All zeros renders the template of a stage.
/// Lengths are fractions of the image side.
struct MorphParams {
    double dx = 0.0;
    double dy = 0.0;
    double rotation = 0.0;     // radians
    double scale = 0.0;        // relative: size factor 1 + scale
    double crown_width = 0.0;  // relative
    double cusp_depth = 0.0;   // relative fissure depth change
    double root_splay = 0.0;   // relative
    double growth = 0.0;       // developmental offset in stage units
    std::array<double, 18> contour{};  // (x, y) offsets of the nine crown control points

    /// Uniform draws with amplitudes proportional to `variability`.
    static MorphParams draw(double variability, Rng& rng);
    /// Fixed per-sex offsets on size and crown shape.
    MorphParams with_sex(Sex sex) const;
};

/// Renders a tooth-like figure as a [1×size×size] image in [0,1]: the crown
/// calcifies from the cusp tips downward over stages 0..5, then two roots
/// lengthen and their canals close at the apex over stages 6..9. The stage
/// must lie in [0, 9]; the result is a pure function of its arguments.
Tensor render_stage_image(int stage, const MorphParams& morph, std::size_t size);

/// num_stages × samples_per_stage samples ordered by stage; within a stage the
/// first half is sex A. Pixel values are quantized to multiples of 1/255 so a
/// PGM round trip is exact.
Dataset generate_dataset(const SynthConfig& cfg);

/// Writes `manifest.csv` (id,stage,sex,filename) and one PGM per sample under `images/`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Reads a directory in the layout above. Throws DataError on a malformed manifest
/// or image, or when images differ in size.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace ordistage
