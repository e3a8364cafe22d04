#include "ordistage/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ordistage/errors.hpp"

namespace ordistage {

// ---------------------------------------------------------------- metrics

ConfusionMatrix::ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
    if (k == 0) throw ParameterError("ConfusionMatrix: needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_labels(const std::vector<int>& truth, const std::vector<int>& predicted,
                                             std::size_t k) {
    if (truth.size() != predicted.size()) throw InputError("confusion matrix: label vectors differ in length");
    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return cm;
}

void ConfusionMatrix::add(int truth, int predicted) {
    if (truth < 0 || predicted < 0 || static_cast<std::size_t>(truth) >= k_ ||
        static_cast<std::size_t>(predicted) >= k_)
        throw InputError("confusion matrix: label outside [0," + std::to_string(k_) + ")");
    ++counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(predicted)];
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

double accuracy(const ConfusionMatrix& cm) {
    const std::size_t total = cm.total();
    if (total == 0) throw InputError("accuracy: empty confusion matrix");
    std::size_t diag = 0;
    for (std::size_t i = 0; i < cm.classes(); ++i) diag += cm.at(i, i);
    return static_cast<double>(diag) / static_cast<double>(total);
}

double weighted_kappa(const ConfusionMatrix& cm) {
    const std::size_t k = cm.classes();
    if (k < 2) throw InputError("weighted_kappa: needs at least two classes");
    const std::size_t total = cm.total();
    if (total == 0) throw InputError("weighted_kappa: empty confusion matrix");
    // With integer weights v_ij = (K−1) − |i−j| = (K−1)·w_ij:
    //   p_o = P / (n(K−1)),  p_e = E / (n²(K−1)),  κ = (nP − E) / (n²(K−1) − E),
    // so everything up to the final division is exact integer arithmetic.
    using i128 = __int128;
    const auto km1 = static_cast<std::int64_t>(k - 1);
    std::vector<std::int64_t> rows(k, 0), cols(k, 0);
    i128 p = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const auto c = static_cast<std::int64_t>(cm.at(i, j));
            rows[i] += c;
            cols[j] += c;
            p += static_cast<i128>(km1 - std::abs(static_cast<std::int64_t>(i) - static_cast<std::int64_t>(j))) * c;
        }
    i128 e = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
            e += static_cast<i128>(km1 - std::abs(static_cast<std::int64_t>(i) - static_cast<std::int64_t>(j))) *
                 rows[i] * cols[j];
    const i128 n = static_cast<i128>(total);
    const i128 denom = n * n * km1 - e;
    if (denom == 0) throw NumericError("weighted_kappa: undefined, chance agreement is 1");
    return static_cast<double>(n * p - e) / static_cast<double>(denom);
}

double mae(const std::vector<int>& truth, const std::vector<int>& predicted) {
    if (truth.size() != predicted.size()) throw InputError("mae: label vectors differ in length");
    if (truth.empty()) throw InputError("mae: empty label vectors");
    long long sum = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) sum += std::abs(truth[i] - predicted[i]);
    return static_cast<double>(sum) / static_cast<double>(truth.size());
}

MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) throw InputError("mean_std: no values");
    MeanStd r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return r;
}

// ---------------------------------------------------------------- attention

std::vector<double> residual_attention(const Tensor& a) {
    if (a.rank() != 3 || a.dim(1) != a.dim(2) || a.dim(0) == 0)
        throw ContractError("residual_attention: expected heads×T×T attention");
    const std::size_t heads = a.dim(0), t = a.dim(1);
    const auto ad = a.data();
    for (std::size_t row = 0; row < heads * t; ++row) {
        double s = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            const double v = ad[row * t + j];
            if (!(v >= 0.0)) throw ContractError("attention_rollout: negative or non-finite attention");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ContractError("attention_rollout: attention row does not sum to 1");
    }
    std::vector<double> layer(t * t, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t * t; ++i) layer[i] += ad[h * t * t + i];
    for (std::size_t i = 0; i < t; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
            double& v = layer[i * t + j];
            v = 0.5 * v / static_cast<double>(heads) + (i == j ? 0.5 : 0.0);
            s += v;
        }
        for (std::size_t j = 0; j < t; ++j) layer[i * t + j] /= s;
    }
    return layer;
}

AttentionMap attention_rollout(const AttentionRecord& record) {
    if (record.layers.empty()) throw ContractError("attention_rollout: empty record");
    const Tensor& first = record.layers.front();
    if (first.rank() != 3 || first.dim(1) != first.dim(2) || first.dim(1) < 2)
        throw ContractError("attention_rollout: expected heads×T×T layers");
    const std::size_t t = first.dim(1);
    const std::size_t patches = t - 1;
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    if (grid * grid != patches) throw ContractError("attention_rollout: patch count is not a square");

    std::vector<double> rollout(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) rollout[i * t + i] = 1.0;
    std::vector<double> next(t * t);
    for (const Tensor& a : record.layers) {
        if (a.rank() != 3 || a.dim(1) != t || a.dim(2) != t)
            throw ContractError("attention_rollout: inconsistent layer shapes");
        const std::vector<double> layer = residual_attention(a);
        // R ← Â_l · R
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t k = 0; k < t; ++k) {
                const double lik = layer[i * t + k];
                if (lik == 0.0) continue;
                for (std::size_t j = 0; j < t; ++j) next[i * t + j] += lik * rollout[k * t + j];
            }
        rollout.swap(next);
    }

    AttentionMap map;
    map.grid = grid;
    map.values.assign(rollout.begin() + 1, rollout.begin() + static_cast<std::ptrdiff_t>(t));
    double mass = 0.0;
    for (double v : map.values) mass += v;
    if (!(mass > 0.0)) {
        map.degenerate = true;
        std::fill(map.values.begin(), map.values.end(), 1.0 / static_cast<double>(patches));
    } else {
        for (double& v : map.values) v /= mass;
    }
    return map;
}

Tensor render_attention_map(const AttentionMap& map, std::size_t size) {
    if (map.grid == 0 || map.values.size() != map.grid * map.grid) throw DimensionError("render: malformed map");
    if (size % map.grid != 0) throw DimensionError("render: image size not a multiple of the patch grid");
    const double peak = *std::max_element(map.values.begin(), map.values.end());
    if (!(peak > 0.0)) throw NumericError("render: map has no positive mass");
    const std::size_t cell = size / map.grid;
    std::vector<double> out(size * size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) out[y * size + x] = map.values[(y / cell) * map.grid + x / cell] / peak;
    return Tensor({1, size, size}, std::move(out));
}

std::vector<double> attention_similarity_heatmap(const std::vector<Tensor>& rendered,
                                                 const PerceptualExtractor& extractor) {
    const std::size_t n = rendered.size();
    for (const Tensor& r : rendered)
        if (r.shape() != rendered.front().shape())
            throw DimensionError("attention_similarity_heatmap: maps rendered at different resolutions");
    NoGradGuard no_grad;
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = m[j * n + i] = perceptual_loss(rendered[i], rendered[j], extractor).item();
    return m;
}

std::vector<std::size_t> stage_order(const std::vector<int>& stages) {
    std::vector<std::size_t> order(stages.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return stages[a] < stages[b]; });
    return order;
}

// ---------------------------------------------------------------- latent space

namespace {

void check_stage(int stage, std::size_t k) {
    if (stage < 0 || static_cast<std::size_t>(stage) >= k)
        throw InputError("latent diagnostics: stage " + std::to_string(stage) + " outside [0," + std::to_string(k) + ")");
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

StageMatrix latent_centroid_distances(const std::vector<LatentEmbedding>& embeddings, std::size_t k) {
    std::size_t dim = 0;
    for (const auto& e : embeddings) {
        check_stage(e.stage, k);
        if (dim == 0) dim = e.z_norm.numel();
        if (e.z_norm.numel() != dim) throw DimensionError("latent_centroid_distances: mixed latent sizes");
    }
    std::vector<std::vector<double>> centroid(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (const auto& e : embeddings) {
        if (e.degenerate) continue;
        auto& c = centroid[static_cast<std::size_t>(e.stage)];
        const auto z = e.z_norm.data();
        for (std::size_t i = 0; i < dim; ++i) c[i] += z[i];
        ++count[static_cast<std::size_t>(e.stage)];
    }
    std::vector<bool> present(k, false);
    for (std::size_t s = 0; s < k; ++s) {
        if (count[s] == 0) continue;
        double norm = 0.0;
        for (double& v : centroid[s]) {
            v /= static_cast<double>(count[s]);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) continue;  // members cancel out: no direction
        for (double& v : centroid[s]) v /= norm;
        present[s] = true;
    }
    StageMatrix m;
    m.k = k;
    m.values.assign(k * k, std::nullopt);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            if (!present[i] || !present[j]) continue;
            m.values[i * k + j] = i == j ? 0.0 : 1.0 - dot(centroid[i], centroid[j]);
        }
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < i; ++j) m.values[i * k + j] = m.values[j * k + i];
    return m;
}

std::vector<std::optional<double>> intra_class_distances(const std::vector<LatentEmbedding>& embeddings,
                                                         std::size_t k) {
    std::vector<std::vector<const LatentEmbedding*>> members(k);
    for (const auto& e : embeddings) {
        check_stage(e.stage, k);
        if (!e.degenerate) members[static_cast<std::size_t>(e.stage)].push_back(&e);
    }
    std::vector<std::optional<double>> out(k);
    for (std::size_t s = 0; s < k; ++s) {
        const auto& m = members[s];
        if (m.size() < 2) continue;
        double total = 0.0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = i + 1; j < m.size(); ++j) {
                total += 1.0 - dot(m[i]->z_norm.data(), m[j]->z_norm.data());
                ++pairs;
            }
        out[s] = total / static_cast<double>(pairs);
    }
    return out;
}

PCAResult pca_project(const std::vector<std::vector<double>>& rows, std::size_t dims) {
    const std::size_t n = rows.size();
    if (dims == 0) throw ParameterError("pca_project: dims must be positive");
    if (n < dims || n < 2) throw InputError("pca_project: fewer samples than components");
    const std::size_t d = rows.front().size();
    if (d < dims) throw InputError("pca_project: fewer features than components");
    std::vector<double> mean(d, 0.0);
    for (const auto& r : rows) {
        if (r.size() != d) throw DimensionError("pca_project: ragged rows");
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(r[j])) throw InputError("pca_project: non-finite value");
            mean[j] += r[j];
        }
    }
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<double> centered(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = rows[i][j] - mean[j];

    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = centered[i * d + a];
            if (xa == 0.0) continue;
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += xa * centered[i * d + b];
        }
    for (double& c : cov) c /= static_cast<double>(n - 1);
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

    PCAResult out;
    out.dims = dims;
    std::vector<double> v(d), w(d);
    for (std::size_t comp = 0; comp < dims; ++comp) {
        // Deterministic, generic start vector.
        for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * static_cast<double>((j * 7919 + comp * 104729) % 97);
        double lambda = 0.0;
        bool converged = false;
        double residual = 0.0;
        for (std::size_t iter = 0; iter < kPcaMaxIterations; ++iter) {
            double vn = std::sqrt(dot(v, v));
            for (double& x : v) x /= vn;
            for (std::size_t a = 0; a < d; ++a) w[a] = dot(std::span<const double>(cov).subspan(a * d, d), v);
            lambda = dot(v, w);
            residual = 0.0;
            for (std::size_t a = 0; a < d; ++a) residual += (w[a] - lambda * v[a]) * (w[a] - lambda * v[a]);
            residual = std::sqrt(residual);
            const double scale = std::max(std::abs(lambda), trace);
            if (residual <= kPcaTolerance * std::max(scale, 1e-300) || trace == 0.0) {
                converged = true;
                break;
            }
            const double wn = std::sqrt(dot(w, w));
            if (!(wn > 0.0)) {
                converged = true;
                break;
            }
            v = w;
        }
        if (!converged) {
            std::ostringstream msg;
            msg << "pca_project: power iteration did not converge for component " << comp << " (residual "
                << residual << ")";
            throw NumericError(msg.str());
        }
        const double vn = std::sqrt(dot(v, v));
        for (double& x : v) x /= vn;
        std::size_t big = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (std::abs(v[j]) > std::abs(v[big])) big = j;
        if (v[big] < 0.0)
            for (double& x : v) x = -x;
        lambda = std::max(lambda, 0.0);
        out.components.insert(out.components.end(), v.begin(), v.end());
        out.eigenvalues.push_back(lambda);
        out.explained_fraction.push_back(trace > 0.0 ? lambda / trace : 0.0);
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
    }
    out.projections.assign(n * dims, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dims; ++c)
            out.projections[i * dims + c] = dot(std::span<const double>(centered).subspan(i * d, d),
                                                std::span<const double>(out.components).subspan(c * d, d));
    return out;
}

Tensor mean_stage_image(const std::vector<Tensor>& images, const std::vector<int>& stages, int stage) {
    if (images.size() != stages.size()) throw InputError("mean_stage_image: images and labels differ in length");
    std::vector<double> acc;
    Shape shape;
    std::size_t count = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (stages[i] != stage) continue;
        if (count == 0) {
            shape = images[i].shape();
            acc.assign(images[i].numel(), 0.0);
        } else if (images[i].shape() != shape) {
            throw DimensionError("mean_stage_image: mixed image shapes");
        }
        const auto d = images[i].data();
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += d[j];
        ++count;
    }
    if (count == 0) throw DataError("mean_stage_image: no image with stage " + std::to_string(stage));
    for (double& v : acc) v /= static_cast<double>(count);
    return Tensor(shape, std::move(acc));
}

// ---------------------------------------------------------------- output

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest form that round-trips
    return std::string(buf, res.ptr);
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width) {
    if (values.size() != height * width || values.empty()) throw DimensionError("write_pgm: size mismatch");
    double lo = values.front(), hi = values.front();
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("write_pgm: non-finite pixel");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    std::vector<unsigned char> bytes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double t = hi > lo ? (values[i] - lo) / (hi - lo) : 0.0;
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
    std::ofstream side(path.string() + ".txt");
    side << "min " << format_double(lo) << "\nmax " << format_double(hi) << "\n";
    if (!side) throw DataError("cannot write sidecar for " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() < 2) throw DimensionError("write_pgm: expected an image");
    const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
    if (image.numel() != h * w) throw DimensionError("write_pgm: only single-channel images");
    write_pgm(path, std::vector<double>(image.data().begin(), image.data().end()), h, w);
}

void write_unit_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() < 2) throw DimensionError("write_unit_pgm: expected an image");
    const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
    if (image.numel() != h * w) throw DimensionError("write_unit_pgm: only single-channel images");
    std::vector<unsigned char> bytes(h * w);
    const auto d = image.data();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        if (!(d[i] >= 0.0 && d[i] <= 1.0)) throw InputError("write_unit_pgm: pixel outside [0,1]");
        bytes[i] = static_cast<unsigned char>(std::lround(d[i] * 255.0));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P5\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
    auto next_int = [&]() -> long {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
            in >> std::ws;
        }
        long v = -1;
        in >> v;
        if (!in) throw DataError(path.string() + ": malformed PGM header");
        return v;
    };
    const long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path.string() + ": unsupported PGM geometry or depth");
    in.get();  // single whitespace before the raster
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError(path.string() + ": truncated PGM");
    std::vector<double> v(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = static_cast<double>(bytes[i]) / 255.0;
    return Tensor({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(v));
}

void write_stage_matrix_csv(const std::filesystem::path& path, const StageMatrix& m) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "stage";
    for (std::size_t j = 0; j < m.k; ++j) out << ",stage_" << j;
    out << "\n";
    for (std::size_t i = 0; i < m.k; ++i) {
        out << "stage_" << i;
        for (std::size_t j = 0; j < m.k; ++j) {
            const auto& v = m.at(i, j);
            out << ',' << (v ? format_double(*v) : "NA");
        }
        out << "\n";
    }
    if (!out) throw DataError("write failed for " + path.string());
}

void write_matrix_csv(const std::filesystem::path& path, const std::vector<double>& values, std::size_t n,
                      const std::vector<std::string>& labels) {
    if (values.size() != n * n || labels.size() != n) throw DimensionError("write_matrix_csv: size mismatch");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "label";
    for (const auto& l : labels) out << ',' << l;
    out << "\n";
    for (std::size_t i = 0; i < n; ++i) {
        out << labels[i];
        for (std::size_t j = 0; j < n; ++j) out << ',' << format_double(values[i * n + j]);
        out << "\n";
    }
    if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace ordistage
