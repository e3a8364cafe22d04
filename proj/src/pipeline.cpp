#include "ordistage/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "ordistage/checkpoint.hpp"
#include "ordistage/errors.hpp"

namespace ordistage {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------- config

namespace {

// Reads one JSON object, tracking which keys were consumed so leftovers can be rejected.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    }

    void get(const char* key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) fail(key, "a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, std::size_t& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void get(const char* key, std::uint64_t& out, int) {
        if (const json* v = find(key)) {
            if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void get(const char* key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) fail(key, "a boolean");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) fail(key, "a string");
            out = v->get<std::string>();
        }
    }
    void get(const char* key, Range& out) {
        if (const json* v = find(key)) {
            if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number())
                fail(key, "a [lo, hi] pair of numbers");
            out = {(*v)[0].get<double>(), (*v)[1].get<double>()};
        }
    }
    void get(const char* key, std::vector<std::size_t>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) fail(key, "an array of positive integers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_unsigned()) fail(key, "an array of positive integers");
                out.push_back(e.get<std::size_t>());
            }
        }
    }
    void get(const char* key, UpsampleMode& out) {
        std::string s;
        if (!find(key)) return;
        get(key, s);
        if (s == "bilinear") {
            out = UpsampleMode::bilinear;
        } else if (s == "nearest") {
            out = UpsampleMode::nearest;
        } else {
            fail(key, "\"bilinear\" or \"nearest\"");
        }
    }
    const json* child(const char* key) { return find(key); }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError("config: unknown key '" + path(key.c_str()) + "'");
    }

private:
    const json* find(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }
    [[noreturn]] void fail(const char* key, const char* what) const {
        throw ConfigError("config: '" + path(key) + "' must be " + what);
    }

    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

void read_training(Section s, TrainConfig& t, bool with_gamma) {
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("lr", t.lr);
    s.get("weight_decay", t.weight_decay);
    s.get("scheduler_factor", t.scheduler_factor);
    s.get("scheduler_patience", t.scheduler_patience);
    if (with_gamma) s.get("gamma", t.gamma);
    s.get("augment", t.augment);
    s.get("early_stopping", t.early_stopping);
    s.get("early_stopping_patience", t.early_stopping_patience);
    s.get("early_stopping_min_delta", t.early_stopping_min_delta);
    s.finish();
}

json training_json(const TrainConfig& t, bool with_gamma) {
    json j;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    j["lr"] = t.lr;
    j["weight_decay"] = t.weight_decay;
    j["scheduler_factor"] = t.scheduler_factor;
    j["scheduler_patience"] = t.scheduler_patience;
    if (with_gamma) j["gamma"] = t.gamma;
    j["augment"] = t.augment;
    j["early_stopping"] = t.early_stopping;
    j["early_stopping_patience"] = t.early_stopping_patience;
    j["early_stopping_min_delta"] = t.early_stopping_min_delta;
    return j;
}

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

template <class Fn>
auto as_config_error(const char* section, Fn&& fn) {
    try {
        return fn();
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + section + ": " + e.what());
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    as_config_error("synth", [&] { synth.validate(); });
    as_config_error("autoencoder", [&] { ae.validate(); });
    as_config_error("vit", [&] { vit.validate(); });
    as_config_error("augment", [&] { augment.validate(); });
    ae_train.validate();
    classifier_train.validate();
    if (ae.image_size != vit.image_size || synth.image_size != vit.image_size)
        throw ConfigError("config: image_size must agree across synth, autoencoder and vit");
    if (synth.num_stages > vit.num_classes) throw ConfigError("config: synth.num_stages exceeds vit.num_classes");
    if (folds < 2) throw ConfigError("config: folds must be at least 2");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("config: val_fraction must lie in (0,1)");
    if (perceptual.weights.empty()) {
        if (perceptual.channels.empty()) throw ConfigError("config: perceptual.channels must not be empty");
        for (auto c : perceptual.channels)
            if (c == 0) throw ConfigError("config: perceptual.channels must be positive");
    }
    if (dataset_dir.empty() || output_dir.empty()) throw ConfigError("config: dataset_dir and output_dir must be set");
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    Section top(root, "");
    top.get("seed", cfg.seed, 0);
    top.get("use_ae", cfg.use_ae);
    top.get("folds", cfg.folds);
    top.get("val_fraction", cfg.val_fraction);
    top.get("dataset_dir", cfg.dataset_dir);
    top.get("output_dir", cfg.output_dir);
    if (const json* j = top.child("synth")) {
        Section s(*j, "synth");
        s.get("image_size", cfg.synth.image_size);
        s.get("num_stages", cfg.synth.num_stages);
        s.get("samples_per_stage", cfg.synth.samples_per_stage);
        s.get("variability", cfg.synth.variability);
        s.get("noise_sigma", cfg.synth.noise_sigma);
        s.finish();
    }
    if (const json* j = top.child("autoencoder")) {
        Section s(*j, "autoencoder");
        s.get("image_size", cfg.ae.image_size);
        s.get("base_channels", cfg.ae.base_channels);
        s.get("num_blocks", cfg.ae.num_blocks);
        s.get("latent_dim", cfg.ae.latent_dim);
        s.get("dropout_p", cfg.ae.dropout_p);
        s.get("upsample", cfg.ae.upsample_mode);
        s.finish();
    }
    if (const json* j = top.child("vit")) {
        Section s(*j, "vit");
        s.get("image_size", cfg.vit.image_size);
        s.get("patch_size", cfg.vit.patch_size);
        s.get("embed_dim", cfg.vit.embed_dim);
        s.get("num_heads", cfg.vit.num_heads);
        s.get("num_layers", cfg.vit.num_layers);
        s.get("mlp_ratio", cfg.vit.mlp_ratio);
        s.get("num_classes", cfg.vit.num_classes);
        s.get("dropout_p", cfg.vit.dropout_p);
        s.finish();
    }
    if (const json* j = top.child("ae_training")) read_training(Section(*j, "ae_training"), cfg.ae_train, true);
    if (const json* j = top.child("classifier_training"))
        read_training(Section(*j, "classifier_training"), cfg.classifier_train, false);
    if (const json* j = top.child("augment")) {
        Section s(*j, "augment");
        s.get("jitter_p", cfg.augment.jitter_p);
        s.get("brightness", cfg.augment.brightness);
        s.get("contrast", cfg.augment.contrast);
        s.get("rotation_deg", cfg.augment.rotation_deg);
        s.get("translate_x_px", cfg.augment.translate_x_px);
        s.get("translate_y_px", cfg.augment.translate_y_px);
        s.get("scale", cfg.augment.scale);
        s.get("reference_size", cfg.augment.reference_size);
        s.finish();
    }
    if (const json* j = top.child("perceptual")) {
        Section s(*j, "perceptual");
        s.get("seed", cfg.perceptual.seed, 0);
        s.get("channels", cfg.perceptual.channels);
        s.get("weights", cfg.perceptual.weights);
        s.finish();
    }
    top.finish();
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str());
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["use_ae"] = cfg.use_ae;
    j["folds"] = cfg.folds;
    j["val_fraction"] = cfg.val_fraction;
    j["dataset_dir"] = cfg.dataset_dir;
    j["output_dir"] = cfg.output_dir;
    j["synth"] = {{"image_size", cfg.synth.image_size},
                  {"num_stages", cfg.synth.num_stages},
                  {"samples_per_stage", cfg.synth.samples_per_stage},
                  {"variability", cfg.synth.variability},
                  {"noise_sigma", cfg.synth.noise_sigma}};
    j["autoencoder"] = {{"image_size", cfg.ae.image_size},
                        {"base_channels", cfg.ae.base_channels},
                        {"num_blocks", cfg.ae.num_blocks},
                        {"latent_dim", cfg.ae.latent_dim},
                        {"dropout_p", cfg.ae.dropout_p},
                        {"upsample", cfg.ae.upsample_mode == UpsampleMode::bilinear ? "bilinear" : "nearest"}};
    j["vit"] = {{"image_size", cfg.vit.image_size},   {"patch_size", cfg.vit.patch_size},
                {"embed_dim", cfg.vit.embed_dim},     {"num_heads", cfg.vit.num_heads},
                {"num_layers", cfg.vit.num_layers},   {"mlp_ratio", cfg.vit.mlp_ratio},
                {"num_classes", cfg.vit.num_classes}, {"dropout_p", cfg.vit.dropout_p}};
    j["ae_training"] = training_json(cfg.ae_train, true);
    j["classifier_training"] = training_json(cfg.classifier_train, false);
    j["augment"] = {{"jitter_p", cfg.augment.jitter_p},
                    {"brightness", range_json(cfg.augment.brightness)},
                    {"contrast", range_json(cfg.augment.contrast)},
                    {"rotation_deg", range_json(cfg.augment.rotation_deg)},
                    {"translate_x_px", range_json(cfg.augment.translate_x_px)},
                    {"translate_y_px", range_json(cfg.augment.translate_y_px)},
                    {"scale", range_json(cfg.augment.scale)},
                    {"reference_size", cfg.augment.reference_size}};
    j["perceptual"] = {{"seed", cfg.perceptual.seed},
                       {"channels", cfg.perceptual.channels},
                       {"weights", cfg.perceptual.weights}};
    return j.dump(2) + "\n";
}

std::size_t parallel_fold_limit() {
    const char* env = std::getenv("ORDISTAGE_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("ORDISTAGE_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------- commands

namespace {

constexpr std::uint64_t kFoldStream = 0xF0;
constexpr std::uint64_t kAutoencoderStream = 0xA0;
constexpr std::uint64_t kClassifierStream = 0xC0;

std::string fold_dir_name(std::size_t k) { return "fold_" + std::to_string(k); }

// Rethrows the active exception with a context prefix, keeping its type.
[[noreturn]] void rethrow_with_context(const std::string& ctx) {
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(ctx + e.what());
    } catch (const DataError& e) {
        throw DataError(ctx + e.what());
    } catch (const NumericError& e) {
        throw NumericError(ctx + e.what());
    } catch (const DimensionError& e) {
        throw DimensionError(ctx + e.what());
    } catch (const ParameterError& e) {
        throw ParameterError(ctx + e.what());
    } catch (const InputError& e) {
        throw InputError(ctx + e.what());
    } catch (const ContractError& e) {
        throw ContractError(ctx + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error(ctx + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

PerceptualExtractor make_extractor(const PerceptualConfig& p) {
    if (!p.weights.empty()) return PerceptualExtractor(load_checkpoint(p.weights));
    return PerceptualExtractor(p.seed, p.channels);
}

Dataset load_checked_dataset(const ExperimentConfig& cfg) {
    Dataset d = load_dataset(cfg.dataset_dir);
    const Shape expected{1, cfg.vit.image_size, cfg.vit.image_size};
    for (const auto& s : d) {
        if (s.image.shape() != expected)
            throw DataError("dataset image " + s.id + " does not match the configured image_size " +
                            std::to_string(cfg.vit.image_size));
        if (static_cast<std::size_t>(s.stage) >= cfg.vit.num_classes)
            throw DataError("dataset sample " + s.id + " has stage " + std::to_string(s.stage) +
                            " outside the configured classes");
    }
    return d;
}

std::string status_text(const ExperimentConfig& cfg, const std::string& state, const std::string& error) {
    std::string s = "status: " + state + "\n";
    s += "folds: " + std::to_string(cfg.folds) + "\n";
    s += cfg.use_ae ? "autoencoder: enabled\n"
                    : "autoencoder: disabled (ae.ckpt, latent, PCA, distance and reconstruction outputs absent)\n";
    if (!error.empty()) s += "error: " + error + "\n";
    return s;
}

void write_curves(const fs::path& path, const std::vector<EpochRecord>& ae, const std::vector<EpochRecord>& cls) {
    std::string s = "epoch,phase,train_loss,val_loss,lr\n";
    for (const auto* curve : {&ae, &cls})
        for (const auto& r : *curve)
            s += std::to_string(r.epoch) + "," + phase_name(r.phase) + "," + format_double(r.train_loss) + "," +
                 format_double(r.val_loss) + "," + format_double(r.lr) + "\n";
    write_text(path, s);
}

std::string metrics_csv(const RunReport& r) {
    std::string s = "fold,accuracy,kappa_w,mae\n";
    for (const auto& f : r.folds)
        s += std::to_string(f.fold) + "," + format_double(f.metrics.accuracy) + "," + format_double(f.metrics.kappa) +
             "," + format_double(f.metrics.mae) + "\n";
    auto cell = [](const MeanStd& m) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3f (%.3f)", m.mean, m.std);
        return std::string(buf);
    };
    s += "mean(std)," + cell(r.accuracy) + "," + cell(r.kappa) + "," + cell(r.mae) + "\n";
    return s;
}

void summarize(RunReport& r) {
    std::vector<double> acc, kappa, err;
    for (const auto& f : r.folds) {
        acc.push_back(f.metrics.accuracy);
        kappa.push_back(f.metrics.kappa);
        err.push_back(f.metrics.mae);
    }
    r.accuracy = mean_std(acc);
    r.kappa = mean_std(kappa);
    r.mae = mean_std(err);
}

std::optional<double> mean_of_present(const std::vector<std::optional<double>>& v, std::size_t k, bool off_diagonal) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (off_diagonal && i / k == i % k) continue;
        if (v[i]) {
            sum += *v[i];
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

// Loads the fold's checkpoints from disk and writes every evaluation and
// diagnostic output. Shared by run and diagnose so both produce the same bytes.
FoldReport evaluate_fold(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& split,
                         const fs::path& dir) {
    const fs::path vit_path = dir / "vit.ckpt";
    const fs::path ae_path = dir / "ae.ckpt";
    for (const auto& p : cfg.use_ae ? std::vector<fs::path>{vit_path, ae_path} : std::vector<fs::path>{vit_path})
        if (!fs::exists(p)) throw DataError("missing checkpoint " + p.string());

    VisionTransformer vit(cfg.vit, 0);
    assign_parameters(vit.parameters(), load_checkpoint(vit_path));
    std::optional<Autoencoder> ae;
    if (cfg.use_ae) {
        ae.emplace(cfg.ae, 0);
        assign_parameters(ae->parameters(), load_checkpoint(ae_path));
    }
    const Autoencoder* frozen = ae ? &*ae : nullptr;
    const std::size_t k = cfg.vit.num_classes;
    const std::size_t size = cfg.vit.image_size;

    FoldReport report;
    report.fold = split.fold;
    report.test_size = split.test.size();

    std::vector<int> truth, predicted, stages;
    std::vector<AttentionMap> maps;
    std::vector<Tensor> rendered, originals, inputs;
    std::string predictions = "id,true,predicted\n";
    fs::create_directories(dir / "attention");
    for (std::size_t i : split.test) {
        const StagedSample& s = data[i];
        Tensor input = classifier_input(s.image, frozen);
        const auto out = vit.forward(input);
        const auto logits = out.logits.data();
        const int pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        truth.push_back(s.stage);
        predicted.push_back(pred);
        stages.push_back(s.stage);
        predictions += s.id + "," + std::to_string(s.stage) + "," + std::to_string(pred) + "\n";
        maps.push_back(attention_rollout(out.attention));
        rendered.push_back(render_attention_map(maps.back(), size));
        write_pgm(dir / "attention" / (s.id + ".pgm"), rendered.back());
        originals.push_back(s.image);
        inputs.push_back(std::move(input));
    }
    write_text(dir / "predictions.csv", predictions);

    const auto cm = ConfusionMatrix::from_labels(truth, predicted, k);
    report.metrics = {accuracy(cm), weighted_kappa(cm), mae(truth, predicted)};
    std::vector<double> cm_values(k * k);
    std::vector<std::string> labels;
    for (std::size_t a = 0; a < k; ++a) {
        labels.push_back("stage_" + std::to_string(a));
        for (std::size_t b = 0; b < k; ++b) cm_values[a * k + b] = static_cast<double>(cm.at(a, b));
    }
    write_matrix_csv(dir / "confusion.csv", cm_values, k, labels);

    // Rollout means per stage.
    const std::size_t grid = maps.empty() ? 0 : maps.front().grid;
    std::string rollout_csv = "stage";
    for (std::size_t p = 0; p < grid * grid; ++p) rollout_csv += ",patch_" + std::to_string(p);
    rollout_csv += "\n";
    std::set<int> present(stages.begin(), stages.end());
    for (int stage : present) {
        AttentionMap mean{grid, std::vector<double>(grid * grid, 0.0), false};
        double count = 0.0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            if (stages[i] != stage) continue;
            for (std::size_t p = 0; p < grid * grid; ++p) mean.values[p] += maps[i].values[p];
            count += 1.0;
        }
        for (double& v : mean.values) v /= count;
        rollout_csv += std::to_string(stage);
        for (double v : mean.values) rollout_csv += "," + format_double(v);
        rollout_csv += "\n";
        const std::string tag = "stage_" + std::to_string(stage) + ".pgm";
        write_pgm(dir / ("rollout_mean_" + tag), render_attention_map(mean, size));
        write_unit_pgm(dir / ("mean_image_" + tag), mean_stage_image(originals, stages, stage));
        if (frozen) write_unit_pgm(dir / ("mean_recon_" + tag), mean_stage_image(inputs, stages, stage));
    }
    write_text(dir / "rollout_means.csv", rollout_csv);

    // Attention similarity over test samples grouped by stage.
    const auto order = stage_order(stages);
    std::vector<Tensor> ordered;
    std::vector<std::string> ordered_ids;
    for (std::size_t i : order) {
        ordered.push_back(rendered[i]);
        ordered_ids.push_back(data[split.test[i]].id);
    }
    const PerceptualExtractor extractor = make_extractor(cfg.perceptual);
    write_matrix_csv(dir / "similarity.csv", attention_similarity_heatmap(ordered, extractor), ordered.size(),
                     ordered_ids);

    if (frozen) {
        std::vector<LatentEmbedding> emb;
        std::vector<std::vector<double>> rows;
        std::string latent = "id,stage";
        for (std::size_t j = 0; j < cfg.ae.latent_dim; ++j) latent += ",z_" + std::to_string(j);
        latent += "\n";
        for (std::size_t i : split.test) {
            LatentEmbedding e = frozen->encode(data[i].image);
            e.stage = data[i].stage;
            latent += data[i].id + "," + std::to_string(e.stage);
            for (double v : e.z.data()) latent += "," + format_double(v);
            latent += "\n";
            const auto zn = e.z_norm.data();
            rows.emplace_back(zn.begin(), zn.end());
            emb.push_back(std::move(e));
        }
        write_text(dir / "latent.csv", latent);

        const PCAResult pca = pca_project(rows, 3);
        std::string pca_csv = "id,stage,pc1,pc2,pc3\n";
        for (std::size_t r = 0; r < rows.size(); ++r) {
            pca_csv += data[split.test[r]].id + "," + std::to_string(emb[r].stage);
            for (std::size_t c = 0; c < 3; ++c) pca_csv += "," + format_double(pca.projections[r * 3 + c]);
            pca_csv += "\n";
        }
        write_text(dir / "pca.csv", pca_csv);
        std::string var_csv = "component,eigenvalue,explained_fraction\n";
        for (std::size_t c = 0; c < pca.dims; ++c)
            var_csv += std::to_string(c + 1) + "," + format_double(pca.eigenvalues[c]) + "," +
                       format_double(pca.explained_fraction[c]) + "\n";
        write_text(dir / "pca_variance.csv", var_csv);

        const StageMatrix inter = latent_centroid_distances(emb, k);
        write_stage_matrix_csv(dir / "inter_distances.csv", inter);
        const auto intra = intra_class_distances(emb, k);
        std::string intra_csv = "stage,distance\n";
        for (std::size_t s = 0; s < k; ++s)
            intra_csv += std::to_string(s) + "," + (intra[s] ? format_double(*intra[s]) : std::string("NA")) + "\n";
        write_text(dir / "intra_distances.csv", intra_csv);
        report.mean_inter_distance = mean_of_present(inter.values, k, true);
        report.mean_intra_distance = mean_of_present(intra, k, false);
    }
    return report;
}

void train_fold(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& split, const fs::path& dir,
                const PerceptualExtractor& extractor) {
    fs::create_directories(dir);
    std::string split_csv = "id,split\n";
    std::vector<std::string> role(data.size());
    for (auto i : split.train) role[i] = "train";
    for (auto i : split.validation) role[i] = "validation";
    for (auto i : split.test) role[i] = "test";
    for (std::size_t i = 0; i < data.size(); ++i) split_csv += data[i].id + "," + role[i] + "\n";
    write_text(dir / "split.csv", split_csv);

    std::vector<EpochRecord> ae_curve;
    std::optional<Autoencoder> ae;
    if (cfg.use_ae) {
        TrainConfig t = cfg.ae_train;
        t.phase = Phase::autoencoder;
        t.seed = derive_seed(cfg.seed, kAutoencoderStream, split.fold);
        AETrainResult r = train_autoencoder(data, split, t, cfg.ae, extractor, cfg.augment);
        save_checkpoint(dir / "ae.ckpt", r.checkpoint);
        ae_curve = std::move(r.curve);
        ae.emplace(std::move(r.model));
    }
    TrainConfig t = cfg.classifier_train;
    t.phase = Phase::classifier;
    t.seed = derive_seed(cfg.seed, kClassifierStream, split.fold);
    ClassifierTrainResult c = train_classifier(data, split, t, cfg.vit, ae ? &*ae : nullptr, cfg.augment);
    save_checkpoint(dir / "vit.ckpt", c.checkpoint);
    write_curves(dir / "curves.csv", ae_curve, c.curve);
}

// Runs fn(fold) for every fold with at most `limit` folds in flight. The
// first failure (in fold order) is rethrown after all workers finish.
void for_each_fold(std::size_t folds, std::size_t limit, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(folds);
    auto guarded = [&](std::size_t f) {
        try {
            fn(f);
        } catch (...) {
            errors[f] = std::current_exception();
        }
    };
    limit = std::max<std::size_t>(1, std::min(limit, folds));
    if (limit == 1) {
        for (std::size_t f = 0; f < folds; ++f) guarded(f);
    } else {
        std::mutex m;
        std::size_t next = 0;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < limit; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t f;
                    {
                        std::lock_guard<std::mutex> lock(m);
                        if (next >= folds) return;
                        f = next++;
                    }
                    guarded(f);
                }
            });
        for (auto& t : pool) t.join();
    }
    for (std::size_t f = 0; f < folds; ++f) {
        if (!errors[f]) continue;
        try {
            std::rethrow_exception(errors[f]);
        } catch (...) {
            rethrow_with_context("fold " + std::to_string(f) + ": ");
        }
    }
}

RunReport evaluate_all(const ExperimentConfig& cfg, const Dataset& data, const std::vector<FoldSplit>& splits,
                       const fs::path& run_dir, std::size_t limit) {
    RunReport report;
    report.folds.resize(splits.size());
    for_each_fold(splits.size(), limit, [&](std::size_t f) {
        report.folds[f] = evaluate_fold(cfg, data, splits[f], run_dir / fold_dir_name(f));
    });
    summarize(report);
    write_text(run_dir / "metrics.csv", metrics_csv(report));
    return report;
}

ExperimentConfig resolved_for_run(ExperimentConfig cfg, const fs::path& run_dir) {
    cfg.dataset_dir = fs::absolute(cfg.dataset_dir).lexically_normal().string();
    cfg.output_dir = fs::absolute(run_dir).lexically_normal().string();
    return cfg;
}

}  // namespace

std::size_t cmd_generate(const ExperimentConfig& cfg, const fs::path& dir) {
    cfg.validate();
    SynthConfig synth = cfg.synth;
    synth.seed = cfg.seed;
    const Dataset d = generate_dataset(synth);
    write_dataset(dir, d);
    return d.size();
}

RunReport cmd_run(const ExperimentConfig& cfg_in, const fs::path& run_dir) {
    cfg_in.validate();
    const std::size_t limit = parallel_fold_limit();
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw DataError("cannot create run directory " + run_dir.string() + ": " + ec.message());
    const ExperimentConfig cfg = resolved_for_run(cfg_in, run_dir);
    write_text(run_dir / "config.json", experiment_config_json(cfg));
    write_text(run_dir / "MANIFEST.status", status_text(cfg, "running", ""));
    try {
        const Dataset data = load_checked_dataset(cfg);
        const auto splits = stratified_folds(data, cfg.folds, derive_seed(cfg.seed, kFoldStream), cfg.val_fraction);
        const PerceptualExtractor extractor = make_extractor(cfg.perceptual);
        for_each_fold(splits.size(), limit, [&](std::size_t f) {
            train_fold(cfg, data, splits[f], run_dir / fold_dir_name(f), extractor);
        });
        RunReport report = evaluate_all(cfg, data, splits, run_dir, limit);
        write_text(run_dir / "MANIFEST.status", status_text(cfg, "complete", ""));
        return report;
    } catch (const std::exception& e) {
        write_text(run_dir / "MANIFEST.status", status_text(cfg, "failed", e.what()));
        throw;
    }
}

RunReport cmd_diagnose(const fs::path& run_dir) {
    const fs::path config_path = run_dir / "config.json";
    if (!fs::exists(config_path)) throw DataError("not a run directory (no config.json): " + run_dir.string());
    const ExperimentConfig cfg = load_experiment_config(config_path);
    const std::size_t limit = parallel_fold_limit();
    const Dataset data = load_checked_dataset(cfg);
    const auto splits = stratified_folds(data, cfg.folds, derive_seed(cfg.seed, kFoldStream), cfg.val_fraction);
    RunReport report = evaluate_all(cfg, data, splits, run_dir, limit);
    write_text(run_dir / "MANIFEST.status", status_text(cfg, "complete", ""));
    return report;
}

}  // namespace ordistage
