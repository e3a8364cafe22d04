#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ordistage/losses.hpp"
#include "ordistage/models.hpp"
#include "ordistage/tensor.hpp"

namespace ordistage {

// ---------------------------------------------------------------- metrics

/// K×K counts, rows = true stage, columns = predicted stage.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t k);
    static ConfusionMatrix from_labels(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t k);

    void add(int truth, int predicted);
    std::size_t classes() const { return k_; }
    std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
    std::size_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * k_ + predicted]; }
    std::size_t total() const;

private:
    std::size_t k_;
    std::vector<std::size_t> counts_;
};

double accuracy(const ConfusionMatrix& cm);
/// Linearly weighted Cohen's kappa, w_ij = 1 − |i−j|/(K−1). Throws NumericError
/// when the chance agreement is 1 and kappa is undefined.
double weighted_kappa(const ConfusionMatrix& cm);
double mae(const std::vector<int>& truth, const std::vector<int>& predicted);

struct FoldMetrics {
    double accuracy = 0.0;
    double kappa = 0.0;
    double mae = 0.0;
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n − 1); 0 for a single fold
};

MeanStd mean_std(const std::vector<double>& values);

// ---------------------------------------------------------------- attention

/// Patch-grid attention map (grid × grid, row-major), non-negative and summing to 1.
struct AttentionMap {
    std::size_t grid = 0;
    std::vector<double> values;
    /// Set when the CLS token attends to no patch at all; values are then uniform.
    bool degenerate = false;
};

/// Â = rows-renormalized 0.5·mean_h(A_h) + 0.5·I for one heads×T×T layer (T×T, row-major).
/// Throws ContractError unless every attention row is stochastic within 1e-9.
std::vector<double> residual_attention(const Tensor& layer);

/// Head-averaged rollout with the residual 0.5·A + 0.5·I, rows renormalized,
/// multiplied from the first layer to the last; the CLS row over patches,
/// renormalized. Throws ContractError on non-stochastic input.
AttentionMap attention_rollout(const AttentionRecord& record);

/// Nearest-neighbour expansion of the map to size×size, scaled so its peak is 1.
Tensor render_attention_map(const AttentionMap& map, std::size_t size);

/// Symmetric n×n matrix (row-major) of perceptual losses between rendered maps.
std::vector<double> attention_similarity_heatmap(const std::vector<Tensor>& rendered,
                                                 const PerceptualExtractor& extractor);

/// Stable permutation that sorts samples by stage label.
std::vector<std::size_t> stage_order(const std::vector<int>& stages);

// ---------------------------------------------------------------- latent space

/// K×K matrix with explicit missing entries.
struct StageMatrix {
    std::size_t k = 0;
    std::vector<std::optional<double>> values;
    const std::optional<double>& at(std::size_t i, std::size_t j) const { return values[i * k + j]; }
};

/// Cosine distances 1 − ⟨ĉ_i, ĉ_j⟩ between renormalized means of z_norm per stage.
/// Stages without a usable embedding are missing. Degenerate embeddings are ignored.
StageMatrix latent_centroid_distances(const std::vector<LatentEmbedding>& embeddings, std::size_t k = 10);

/// Mean pairwise cosine distance within each stage; missing below two members.
std::vector<std::optional<double>> intra_class_distances(const std::vector<LatentEmbedding>& embeddings,
                                                         std::size_t k = 10);

struct PCAResult {
    std::size_t dims = 0;
    std::vector<double> projections;  // n × dims, row-major
    std::vector<double> components;   // dims × d, unit rows
    std::vector<double> eigenvalues;
    std::vector<double> explained_fraction;
};

inline constexpr double kPcaTolerance = 1e-9;
inline constexpr std::size_t kPcaMaxIterations = 10000;

/// Top `dims` principal components by power iteration with deflation. The
/// largest-magnitude coordinate of each component is made positive.
PCAResult pca_project(const std::vector<std::vector<double>>& rows, std::size_t dims = 3);

/// Pixelwise mean of the images whose label equals `stage`.
Tensor mean_stage_image(const std::vector<Tensor>& images, const std::vector<int>& stages, int stage);

// ---------------------------------------------------------------- output

/// 8-bit binary PGM after per-image min-max normalization; writes the range to
/// `<path>.txt` ("min <v>" and "max <v>" lines).
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// Stores an image already in [0,1] without normalization: byte = round(255·v).
/// Values that are multiples of 1/255 survive a read_pgm round trip exactly.
void write_unit_pgm(const std::filesystem::path& path, const Tensor& image);

/// Reads an 8-bit P5 file back as values in [0,1].
Tensor read_pgm(const std::filesystem::path& path);

/// CSV with a header row and a leading label column; missing entries are "NA".
void write_stage_matrix_csv(const std::filesystem::path& path, const StageMatrix& m);
void write_matrix_csv(const std::filesystem::path& path, const std::vector<double>& values, std::size_t n,
                      const std::vector<std::string>& labels);

std::string format_double(double v);

}  // namespace ordistage
