#include "ordistage/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <tuple>

#include "ordistage/errors.hpp"
#include "ordistage/ops.hpp"

namespace ordistage {

// ---------------------------------------------------------------- optimizer

void adamw_step(const ParameterMap& params, OptimState& state) {
    if (!(state.lr >= 0.0) || !(state.eps > 0.0) || !(state.weight_decay >= 0.0) || !(state.beta1 >= 0.0) ||
        !(state.beta1 < 1.0) || !(state.beta2 >= 0.0) || !(state.beta2 < 1.0))
        throw ParameterError("adamw_step: invalid hyperparameters");

    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        Tensor t = p;
        for (double g : t.mutable_grad())
            if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in " + name);
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);

    for (const auto& [name, param] : params) {
        Tensor p = param;
        auto values = p.mutable_data();
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.empty()) {
            m.assign(values.size(), 0.0);
            v.assign(values.size(), 0.0);
        }
        if (m.size() != values.size()) throw ContractError("adamw_step: moment size mismatch for " + name);
        const bool has_grad = p.has_grad();
        std::span<double> grad;
        if (has_grad) grad = p.mutable_grad();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = has_grad ? grad[i] : 0.0;
            values[i] -= state.lr * state.weight_decay * values[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

void zero_grad(const ParameterMap& params) {
    for (const auto& [name, p] : params) {
        Tensor t = p;
        t.zero_grad();
    }
}

// ---------------------------------------------------------------- scheduler

double plateau_scheduler_step(PlateauState& state, double validation_loss) {
    if (!std::isfinite(validation_loss)) throw NumericError("plateau scheduler: non-finite validation loss");
    if (state.patience == 0 || !(state.factor > 0.0 && state.factor < 1.0))
        throw ParameterError("plateau scheduler: patience must be positive and factor in (0,1)");
    if (validation_loss < state.best - state.min_delta) {
        state.best = validation_loss;
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if (state.bad_epochs >= state.patience) {
            state.lr *= state.factor;
            state.bad_epochs = 0;
        }
    }
    return state.lr;
}

// ---------------------------------------------------------------- augmentation

namespace {

void check_range(const Range& r, const char* what, double min_lo) {
    if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi || r.lo < min_lo)
        throw ParameterError(std::string("augment: invalid ") + what + " range");
}

double draw(const Range& r, Rng& rng) { return r.lo + (r.hi - r.lo) * rng.uniform(); }

double bilinear_zero(std::span<const double> img, std::size_t h, std::size_t w, double y, double x) {
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    const double ty = y - fy;
    const double tx = x - fx;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const double yy = fy + dy;
            const double xx = fx + dx;
            if (yy < 0.0 || xx < 0.0 || yy > static_cast<double>(h - 1) || xx > static_cast<double>(w - 1)) continue;
            const double weight = (dy ? ty : 1.0 - ty) * (dx ? tx : 1.0 - tx);
            if (weight == 0.0) continue;
            acc += weight * img[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        }
    }
    return acc;
}

}  // namespace

void AugmentParams::validate() const {
    if (!(jitter_p >= 0.0 && jitter_p <= 1.0)) throw ParameterError("augment: jitter_p must lie in [0,1]");
    check_range(brightness, "brightness", 0.0);
    check_range(contrast, "contrast", 0.0);
    check_range(rotation_deg, "rotation", -180.0);
    check_range(translate_x_px, "translate_x", -1e9);
    check_range(translate_y_px, "translate_y", -1e9);
    check_range(scale, "scale", 1e-6);
    if (!(reference_size > 0.0)) throw ParameterError("augment: reference_size must be positive");
}

AugmentParams AugmentParams::identity() {
    AugmentParams p;
    p.jitter_p = 0.0;
    p.brightness = {1.0, 1.0};
    p.contrast = {1.0, 1.0};
    p.rotation_deg = {0.0, 0.0};
    p.translate_x_px = {0.0, 0.0};
    p.translate_y_px = {0.0, 0.0};
    p.scale = {1.0, 1.0};
    return p;
}

Tensor augment_sample(const Tensor& image, const AugmentParams& params, Rng& rng) {
    params.validate();
    if (image.rank() != 3 || image.dim(0) != 1) throw DimensionError("augment_sample: expected a [1×H×W] image");
    const std::size_t h = image.dim(1);
    const std::size_t w = image.dim(2);
    if (h == 0 || w == 0) throw DimensionError("augment_sample: empty image");

    // Every draw happens unconditionally so the stream does not depend on branches.
    const bool jitter = rng.bernoulli(params.jitter_p);
    const double b = draw(params.brightness, rng);
    const double c = draw(params.contrast, rng);
    const double angle = draw(params.rotation_deg, rng) * std::numbers::pi / 180.0;
    const double size_scale = static_cast<double>(std::max(h, w)) / params.reference_size;
    const double tx = draw(params.translate_x_px, rng) * size_scale;
    const double ty = draw(params.translate_y_px, rng) * size_scale;
    const double s = draw(params.scale, rng);

    std::vector<double> src(image.data().begin(), image.data().end());
    if (jitter) {
        double mean = 0.0;
        for (double v : src) mean += v;
        mean /= static_cast<double>(src.size());
        for (double& v : src) v = std::clamp((v * b - mean * b) * c + mean * b, 0.0, 1.0);
    }

    std::vector<double> out(h * w, 0.0);
    const double cy = 0.5 * static_cast<double>(h - 1);
    const double cx = 0.5 * static_cast<double>(w - 1);
    const double cos_a = std::cos(angle);
    const double sin_a = std::sin(angle);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // Inverse map: undo translation, then rotation, then scale.
            const double px = static_cast<double>(x) - cx - tx;
            const double py = static_cast<double>(y) - cy - ty;
            const double sx = (cos_a * px + sin_a * py) / s + cx;
            const double sy = (-sin_a * px + cos_a * py) / s + cy;
            out[y * w + x] = std::clamp(bilinear_zero(src, h, w, sy, sx), 0.0, 1.0);
        }
    }
    return Tensor({1, h, w}, std::move(out));
}

// ---------------------------------------------------------------- folds

std::vector<FoldSplit> stratified_folds(const Dataset& dataset, std::size_t k, std::uint64_t seed,
                                        double val_fraction) {
    if (k < 2) throw ParameterError("stratified_folds: k must be at least 2");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0 - 1.0 / static_cast<double>(k)))
        throw ParameterError("stratified_folds: val_fraction out of range");

    std::map<std::pair<int, char>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        cells[{dataset[i].stage, sex_code(dataset[i].sex)}].push_back(i);
    for (auto& [key, members] : cells) {
        if (members.size() < k) {
            std::ostringstream msg;
            msg << "stratified_folds: cell stage=" << key.first << " sex=" << key.second << " has "
                << members.size() << " samples, fewer than k=" << k;
            throw DataError(msg.str());
        }
        std::sort(members.begin(), members.end(),
                  [&](std::size_t a, std::size_t b) { return dataset[a].id < dataset[b].id; });
        for (std::size_t j = 1; j < members.size(); ++j)
            if (dataset[members[j]].id == dataset[members[j - 1]].id)
                throw DataError("stratified_folds: duplicate sample id " + dataset[members[j]].id);
    }

    std::vector<FoldSplit> folds(k);
    for (std::size_t f = 0; f < k; ++f) folds[f].fold = f;

    // Test assignment: a round-robin that continues across cells keeps both the
    // per-cell and the per-fold counts within one of their ideal values.
    std::size_t counter = 0;
    std::map<std::pair<int, char>, std::vector<std::vector<std::size_t>>> test_of_cell;
    for (auto& [key, members] : cells) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(key.first), static_cast<std::uint64_t>(key.second)));
        std::vector<std::size_t> order = members;
        rng.shuffle(order.begin(), order.end());
        auto& per_fold = test_of_cell[key];
        per_fold.assign(k, {});
        for (std::size_t idx : order) per_fold[counter++ % k].push_back(idx);
    }

    for (std::size_t f = 0; f < k; ++f) {
        for (auto& [key, members] : cells) {
            const auto& test = test_of_cell[key][f];
            std::vector<std::size_t> rest;
            for (std::size_t idx : members)
                if (std::find(test.begin(), test.end(), idx) == test.end()) rest.push_back(idx);

            const double n = static_cast<double>(members.size());
            const double test_dev = static_cast<double>(test.size()) - n / static_cast<double>(k);
            // Splitting the test deviation between validation and training keeps both
            // within one sample of their ideal share.
            const double target = val_fraction * n - 0.5 * test_dev;
            auto n_val = static_cast<std::size_t>(std::max(0.0, std::floor(target + 0.5)));
            n_val = std::min(n_val, rest.size() > 0 ? rest.size() - 1 : 0);

            Rng rng(derive_seed(seed ^ 0x76616c6964ULL, f, static_cast<std::uint64_t>(key.first) * 2 +
                                                              (key.second == 'A' ? 0 : 1)));
            rng.shuffle(rest.begin(), rest.end());
            for (std::size_t j = 0; j < rest.size(); ++j)
                (j < n_val ? folds[f].validation : folds[f].train).push_back(rest[j]);
            folds[f].test.insert(folds[f].test.end(), test.begin(), test.end());
        }
        std::sort(folds[f].train.begin(), folds[f].train.end());
        std::sort(folds[f].validation.begin(), folds[f].validation.end());
        std::sort(folds[f].test.begin(), folds[f].test.end());
    }
    return folds;
}

// ---------------------------------------------------------------- training loops

const char* phase_name(Phase p) { return p == Phase::autoencoder ? "autoencoder" : "classifier"; }

TrainConfig TrainConfig::autoencoder_defaults() {
    TrainConfig c;
    c.phase = Phase::autoencoder;
    c.epochs = 300;
    c.batch_size = 128;
    c.lr = 5e-4;
    c.weight_decay = 1e-5;
    c.gamma = 0.7;
    return c;
}

TrainConfig TrainConfig::classifier_defaults() {
    TrainConfig c;
    c.phase = Phase::classifier;
    c.epochs = 300;
    c.batch_size = 64;
    c.lr = 1e-4;
    c.weight_decay = 1e-5;
    return c;
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("training: epochs must be positive");
    if (batch_size == 0) throw ConfigError("training: batch_size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("training: lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("training: weight_decay must be non-negative");
    if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0))
        throw ConfigError("training: scheduler_factor must lie in (0,1)");
    if (scheduler_patience == 0) throw ConfigError("training: scheduler_patience must be positive");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("training: gamma must lie in [0,1]");
    if (early_stopping && early_stopping_patience == 0)
        throw ConfigError("training: early_stopping_patience must be positive");
}

namespace {

enum SeedStream : std::uint64_t {
    kShuffle = 1,
    kAugment = 2,
    kDropout = 3,
    kMining = 4,
    kValidation = 5,
};

std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream, std::uint64_t epoch, std::uint64_t index = 0) {
    return derive_seed(derive_seed(seed, stream), epoch, index);
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                   Rng& rng) {
    rng.shuffle(indices.begin(), indices.end());
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const std::size_t end = std::min(indices.size(), start + batch_size);
        batches.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(start),
                             indices.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Tensor training_view(const StagedSample& sample, const TrainConfig& cfg, const AugmentParams& augment,
                     std::size_t epoch, std::size_t index) {
    if (!cfg.augment) return sample.image;
    Rng rng(stream_seed(cfg.seed, kAugment, epoch, index));
    return augment_sample(sample.image, augment, rng);
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite loss");
}

struct EarlyStopper {
    bool enabled;
    std::size_t patience;
    double min_delta;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad = 0;

    bool update(double loss) {
        if (loss < best - min_delta) {
            best = loss;
            bad = 0;
        } else {
            ++bad;
        }
        return enabled && bad >= patience;
    }
};

AELoss ae_batch_loss(const Autoencoder& ae, const std::vector<Tensor>& images, const std::vector<int>& stages,
                     const PerceptualExtractor& extractor, double gamma, bool training, std::uint64_t dropout_seed,
                     Rng& mining_rng, AETrainStats* stats) {
    std::vector<LatentEmbedding> embeddings;
    std::vector<Tensor> recon_losses;
    embeddings.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        Rng dropout_rng(derive_seed(dropout_seed, i));
        LatentEmbedding e = ae.encode(images[i], training, dropout_rng);
        e.stage = stages[i];
        Tensor recon = ae.decode(e.z);
        recon_losses.push_back(add(bce_loss(images[i], recon), perceptual_loss(images[i], recon, extractor)));
        embeddings.push_back(std::move(e));
    }
    std::vector<Tensor> triplet_losses;
    if (gamma > 0.0) {
        MiningResult mined = mine_semi_hard(embeddings, mining_rng);
        for (const Triplet& t : mined.triplets) triplet_losses.push_back(triplet_loss(t));
        if (stats) {
            stats->mining_calls += 1;
            stats->triplets += mined.triplets.size();
            stats->semi_hard += mined.semi_hard;
            stats->degenerate_skipped += mined.degenerate_skipped;
            if (mined.triplets.empty()) stats->empty_triplet_batches += 1;
        }
    }
    return total_ae_loss(triplet_losses, recon_losses, gamma);
}

}  // namespace

double evaluate_ae_loss(const Autoencoder& ae, const Dataset& dataset, const std::vector<std::size_t>& indices,
                        const PerceptualExtractor& extractor, double gamma, std::size_t batch_size,
                        std::uint64_t seed) {
    if (indices.empty()) throw DataError("evaluate_ae_loss: empty split");
    if (batch_size == 0) throw ConfigError("evaluate_ae_loss: batch_size must be positive");
    NoGradGuard no_grad;
    Rng mining_rng(derive_seed(seed, kValidation));
    double total = 0.0;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const std::size_t end = std::min(indices.size(), start + batch_size);
        std::vector<Tensor> images;
        std::vector<int> stages;
        for (std::size_t j = start; j < end; ++j) {
            images.push_back(dataset.at(indices[j]).image);
            stages.push_back(dataset.at(indices[j]).stage);
        }
        AELoss loss = ae_batch_loss(ae, images, stages, extractor, gamma, false, 0, mining_rng, nullptr);
        total += loss.total.item() * static_cast<double>(end - start);
    }
    const double mean = total / static_cast<double>(indices.size());
    require_finite(mean, "evaluate_ae_loss");
    return mean;
}

AETrainResult train_autoencoder(const Dataset& dataset, const FoldSplit& fold, const TrainConfig& cfg,
                                const AEConfig& ae_cfg, const PerceptualExtractor& extractor,
                                const AugmentParams& augment) {
    cfg.validate();
    ae_cfg.validate();
    augment.validate();
    if (fold.train.empty() || fold.validation.empty()) throw DataError("train_autoencoder: empty train or validation split");
    for (std::size_t idx : fold.train) as_image(dataset.at(idx).image, ae_cfg.image_size);

    AETrainResult result{Autoencoder(ae_cfg, derive_seed(cfg.seed, 0xAE)), {}, {}, 0, {}};
    const ParameterMap params = result.model.parameters();
    OptimState opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    PlateauState sched;
    sched.lr = cfg.lr;
    sched.factor = cfg.scheduler_factor;
    sched.patience = cfg.scheduler_patience;
    EarlyStopper stopper{cfg.early_stopping, cfg.early_stopping_patience, cfg.early_stopping_min_delta};
    double best_val = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(stream_seed(cfg.seed, kShuffle, epoch));
        Rng mining_rng(stream_seed(cfg.seed, kMining, epoch));
        double train_total = 0.0;
        std::size_t batch_no = 0;
        for (const auto& batch : make_batches(fold.train, cfg.batch_size, shuffle_rng)) {
            std::vector<Tensor> images;
            std::vector<int> stages;
            for (std::size_t idx : batch) {
                images.push_back(training_view(dataset[idx], cfg, augment, epoch, idx));
                stages.push_back(dataset[idx].stage);
            }
            AELoss loss = ae_batch_loss(result.model, images, stages, extractor, cfg.gamma, true,
                                        stream_seed(cfg.seed, kDropout, epoch, batch_no++), mining_rng,
                                        &result.stats);
            require_finite(loss.total.item(), "train_autoencoder");
            zero_grad(params);
            loss.total.backward();
            adamw_step(params, opt);
            train_total += loss.total.item() * static_cast<double>(batch.size());
        }
        const double train_loss = train_total / static_cast<double>(fold.train.size());
        const double val_loss =
            evaluate_ae_loss(result.model, dataset, fold.validation, extractor, cfg.gamma, cfg.batch_size, cfg.seed);
        result.curve.push_back({epoch, Phase::autoencoder, train_loss, val_loss, opt.lr});
        if (val_loss < best_val) {
            best_val = val_loss;
            result.best_epoch = epoch;
            result.checkpoint = snapshot_parameters(params);
        }
        opt.lr = plateau_scheduler_step(sched, val_loss);
        if (stopper.update(val_loss)) break;
    }
    zero_grad(params);
    assign_parameters(params, result.checkpoint);
    return result;
}

Tensor classifier_input(const Tensor& image, const Autoencoder* frozen_ae) {
    if (!frozen_ae) return image;
    NoGradGuard no_grad;
    return frozen_ae->decode(frozen_ae->encode(image).z);
}

int predict_stage(const VisionTransformer& vit, const Tensor& classifier_image) {
    NoGradGuard no_grad;
    const Tensor logits = vit.forward(classifier_image).logits;
    const auto values = logits.data();
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError("predict_stage: non-finite logits");
    return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

ClassifierTrainResult train_classifier(const Dataset& dataset, const FoldSplit& fold, const TrainConfig& cfg,
                                       const ViTConfig& vit_cfg, const Autoencoder* frozen_ae,
                                       const AugmentParams& augment) {
    cfg.validate();
    vit_cfg.validate();
    augment.validate();
    if (frozen_ae && frozen_ae->config().image_size != vit_cfg.image_size)
        throw ConfigError("train_classifier: autoencoder and ViT image sizes differ");
    if (fold.train.empty() || fold.validation.empty()) throw DataError("train_classifier: empty train or validation split");
    for (std::size_t idx : fold.train) {
        as_image(dataset.at(idx).image, vit_cfg.image_size);
        if (dataset[idx].stage < 0 || static_cast<std::size_t>(dataset[idx].stage) >= vit_cfg.num_classes)
            throw DataError("train_classifier: stage label out of range");
    }

    ClassifierTrainResult result{VisionTransformer(vit_cfg, derive_seed(cfg.seed, 0x717)), {}, {}, 0};
    const ParameterMap params = result.model.parameters();
    OptimState opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    PlateauState sched;
    sched.lr = cfg.lr;
    sched.factor = cfg.scheduler_factor;
    sched.patience = cfg.scheduler_patience;
    EarlyStopper stopper{cfg.early_stopping, cfg.early_stopping_patience, cfg.early_stopping_min_delta};
    double best_val = std::numeric_limits<double>::infinity();

    // Validation inputs never change, so their reconstructions are computed once.
    std::vector<Tensor> val_inputs;
    for (std::size_t idx : fold.validation) val_inputs.push_back(classifier_input(dataset.at(idx).image, frozen_ae));

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(stream_seed(cfg.seed, kShuffle, epoch));
        double train_total = 0.0;
        std::size_t batch_no = 0;
        for (const auto& batch : make_batches(fold.train, cfg.batch_size, shuffle_rng)) {
            std::vector<Tensor> losses;
            for (std::size_t j = 0; j < batch.size(); ++j) {
                const std::size_t idx = batch[j];
                const Tensor input = classifier_input(training_view(dataset[idx], cfg, augment, epoch, idx), frozen_ae);
                Rng dropout_rng(derive_seed(stream_seed(cfg.seed, kDropout, epoch, batch_no), j));
                losses.push_back(cross_entropy(result.model.forward(input, true, dropout_rng).logits, dataset[idx].stage));
            }
            ++batch_no;
            Tensor loss = scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
            require_finite(loss.item(), "train_classifier");
            zero_grad(params);
            loss.backward();
            adamw_step(params, opt);
            train_total += loss.item() * static_cast<double>(batch.size());
        }
        const double train_loss = train_total / static_cast<double>(fold.train.size());

        double val_total = 0.0;
        {
            NoGradGuard no_grad;
            for (std::size_t j = 0; j < val_inputs.size(); ++j)
                val_total += cross_entropy(result.model.forward(val_inputs[j]).logits,
                                           dataset[fold.validation[j]].stage).item();
        }
        const double val_loss = val_total / static_cast<double>(val_inputs.size());
        require_finite(val_loss, "train_classifier");
        result.curve.push_back({epoch, Phase::classifier, train_loss, val_loss, opt.lr});
        if (val_loss < best_val) {
            best_val = val_loss;
            result.best_epoch = epoch;
            result.checkpoint = snapshot_parameters(params);
        }
        opt.lr = plateau_scheduler_step(sched, val_loss);
        if (stopper.update(val_loss)) break;
    }
    zero_grad(params);
    assign_parameters(params, result.checkpoint);
    return result;
}

}  // namespace ordistage
