#include "ordistage/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ordistage/errors.hpp"
#include "ordistage/evaluation.hpp"

namespace ordistage {

namespace {

constexpr double kBackground = 0.05;
constexpr double kEnamel = 0.9;
constexpr double kDentin = 0.7;
constexpr double kPulp = 0.4;
constexpr std::size_t kSuper = 4;  // supersamples per pixel side

struct Point {
    double x, y;
};
using Polygon = std::vector<Point>;

bool inside(const Polygon& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Point& a = poly[i];
        const Point& b = poly[j];
        if ((a.y > y) != (b.y > y)) {
            const double xc = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (x < xc) in = !in;
        }
    }
    return in;
}

// Canonical figure in template coordinates (image centre at 0.5, 0.5).
struct Figure {
    Polygon crown, pulp;
    std::vector<Polygon> roots, canals;
    double calcified_to = 0.0;  // crown rows below this template y are not formed yet
};

Figure build_figure(int stage, const MorphParams& m) {
    const double age = static_cast<double>(stage) + m.growth;
    const double crown_frac = std::clamp((age + 1.0) / kCrownStages, 0.08, 1.0);
    const double root_frac = std::clamp((age - (kCrownStages - 1)) / 4.0, 0.0, 1.0);
    const double closure = std::clamp((age - 7.0) / 2.0, 0.0, 1.0);

    constexpr double cx = 0.5;
    constexpr double top = 0.14;
    constexpr double cej = 0.46;  // crown base
    const double w = 0.22 * (1.0 + 0.5 * m.crown_width);
    const double fissure = 0.05 * (1.0 + m.cusp_depth);

    Figure f;
    const std::array<Point, 9> crown = {{{-w, cej},
                                         {-1.05 * w, top + 0.12},
                                         {-0.85 * w, top + 0.03},
                                         {-0.5 * w, top},
                                         {-0.1 * w, top + fissure},
                                         {0.5 * w, top},
                                         {0.85 * w, top + 0.03},
                                         {1.05 * w, top + 0.12},
                                         {w, cej}}};
    for (std::size_t i = 0; i < crown.size(); ++i)
        f.crown.push_back({cx + crown[i].x + m.contour[2 * i], crown[i].y + m.contour[2 * i + 1]});
    f.pulp = {{cx - 0.5 * w, cej + 0.01},  {cx - 0.55 * w, top + 0.16}, {cx - 0.4 * w, top + 0.11},
              {cx - 0.2 * w, top + 0.15}, {cx + 0.2 * w, top + 0.15},  {cx + 0.4 * w, top + 0.11},
              {cx + 0.55 * w, top + 0.16}, {cx + 0.5 * w, cej + 0.01}};
    f.calcified_to = top + crown_frac * (cej - top);

    if (root_frac > 0.0) {
        const double length = 0.42 * root_frac;
        const double splay = 0.1 * (1.0 + m.root_splay);
        for (const double side : {-1.0, 1.0}) {
            const double rx = cx + side * 0.55 * w;
            const double hw = 0.32 * w;
            const double tip = cej + length;
            const double tip_x = rx + side * splay * length;
            const double apex_hw = hw * (0.9 - 0.5 * closure);
            f.roots.push_back({{rx - hw, cej - 0.02}, {rx + hw, cej - 0.02}, {tip_x + apex_hw, tip}, {tip_x - apex_hw, tip}});
            const double canal_top = 0.35 * hw;
            const double canal_apex = 0.6 * hw * (1.0 - closure);
            f.canals.push_back({{rx - canal_top, cej - 0.02},
                                {rx + canal_top, cej - 0.02},
                                {tip_x + canal_apex, tip + 0.001},
                                {tip_x - canal_apex, tip + 0.001}});
        }
    }
    return f;
}

double shade(const Figure& f, double tx, double ty) {
    double v = kBackground;
    for (std::size_t r = 0; r < f.roots.size(); ++r) {
        if (inside(f.roots[r], tx, ty)) v = inside(f.canals[r], tx, ty) ? kPulp : kDentin;
    }
    if (ty <= f.calcified_to && inside(f.crown, tx, ty)) v = inside(f.pulp, tx, ty) ? kPulp : kEnamel;
    return v;
}

double quantize(double v) { return std::round(255.0 * std::clamp(v, 0.0, 1.0)) / 255.0; }

std::string sample_id(std::size_t stage, Sex sex, std::size_t index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "s%zu_%c_%03zu", stage, sex_code(sex), index);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void SynthConfig::validate() const {
    if (image_size < 8) throw ConfigError("synth: image_size must be at least 8");
    if (num_stages < 2 || num_stages > 10) throw ConfigError("synth: num_stages must lie in [2, 10]");
    if (samples_per_stage == 0 || samples_per_stage % 2 != 0)
        throw ConfigError("synth: samples_per_stage must be positive and even for sex balance");
    if (!(variability >= 0.0) || !std::isfinite(variability)) throw ConfigError("synth: variability must be >= 0");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth: noise_sigma must be >= 0");
}

SynthConfig SynthConfig::lowvar(std::uint64_t seed) {
    SynthConfig c;
    c.variability = 0.2;
    c.noise_sigma = 0.02;
    c.seed = seed;
    return c;
}

SynthConfig SynthConfig::highvar(std::uint64_t seed) {
    SynthConfig c;
    c.variability = 1.0;
    c.noise_sigma = 0.05;
    c.seed = seed;
    return c;
}

MorphParams MorphParams::draw(double variability, Rng& rng) {
    auto u = [&](double amplitude) { return variability * amplitude * rng.uniform(-1.0, 1.0); };
    MorphParams m;
    m.dx = u(0.06);
    m.dy = u(0.04);
    m.rotation = u(0.15);
    m.scale = u(0.12);
    m.crown_width = u(0.15);
    m.cusp_depth = u(0.6);
    m.root_splay = u(0.6);
    m.growth = u(0.6);
    for (double& c : m.contour) c = u(0.015);
    return m;
}

MorphParams MorphParams::with_sex(Sex sex) const {
    MorphParams m = *this;
    if (sex == Sex::B) {
        m.scale += 0.04;
        m.crown_width += 0.05;
        m.cusp_depth -= 0.2;
    }
    return m;
}

Tensor render_stage_image(int stage, const MorphParams& morph, std::size_t size) {
    if (stage < 0 || stage > 9) throw ParameterError("render_stage_image: stage must lie in [0, 9]");
    if (size == 0) throw ParameterError("render_stage_image: empty image");
    const Figure f = build_figure(stage, morph);
    // Map image coordinates back to template coordinates: undo the shift,
    // then rotation and scale about the image centre.
    const double s = 1.0 + morph.scale;
    const double c = std::cos(morph.rotation), sn = std::sin(morph.rotation);
    const double n = static_cast<double>(size);
    std::vector<double> px(size * size);
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
            double acc = 0.0;
            for (std::size_t a = 0; a < kSuper; ++a) {
                for (std::size_t b = 0; b < kSuper; ++b) {
                    const double y = (static_cast<double>(i) + (static_cast<double>(a) + 0.5) / kSuper) / n;
                    const double x = (static_cast<double>(j) + (static_cast<double>(b) + 0.5) / kSuper) / n;
                    const double ux = x - 0.5 - morph.dx, uy = y - 0.5 - morph.dy;
                    const double tx = 0.5 + (c * ux + sn * uy) / s;
                    const double ty = 0.5 + (-sn * ux + c * uy) / s;
                    acc += shade(f, tx, ty);
                }
            }
            px[i * size + j] = acc / static_cast<double>(kSuper * kSuper);
        }
    }
    return Tensor({1, size, size}, std::move(px));
}

Dataset generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    Dataset out;
    out.reserve(cfg.num_stages * cfg.samples_per_stage);
    for (std::size_t stage = 0; stage < cfg.num_stages; ++stage) {
        for (std::size_t j = 0; j < cfg.samples_per_stage; ++j) {
            Rng rng(derive_seed(cfg.seed, stage, j));
            const Sex sex = j < cfg.samples_per_stage / 2 ? Sex::A : Sex::B;
            const MorphParams morph = MorphParams::draw(cfg.variability, rng).with_sex(sex);
            Tensor img = render_stage_image(static_cast<int>(stage), morph, cfg.image_size);
            auto d = img.mutable_data();
            for (double& v : d) v = quantize(cfg.noise_sigma > 0.0 ? v + rng.normal(0.0, cfg.noise_sigma) : v);
            out.push_back({std::move(img), static_cast<int>(stage), sex, sample_id(stage, sex, j)});
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
    if (!manifest) throw DataError("cannot write " + (dir / "manifest.csv").string());
    manifest << "id,stage,sex,filename\n";
    for (const auto& s : dataset) {
        const std::string file = "images/" + s.id + ".pgm";
        write_unit_pgm(dir / file, s.image);
        manifest << s.id << ',' << s.stage << ',' << sex_code(s.sex) << ',' << file << '\n';
    }
    if (!manifest) throw DataError("write failed for " + (dir / "manifest.csv").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.csv";
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset manifest " + manifest_path.string());
    std::string line;
    if (!std::getline(in, line) || line != "id,stage,sex,filename")
        throw DataError(manifest_path.string() + ": expected header id,stage,sex,filename");
    Dataset out;
    std::set<std::string> ids;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
        const auto cells = split_csv(line);
        if (cells.size() != 4) throw DataError(where + ": expected 4 fields");
        StagedSample s;
        s.id = cells[0];
        if (s.id.empty() || !ids.insert(s.id).second) throw DataError(where + ": empty or duplicate id");
        std::size_t used = 0;
        try {
            s.stage = std::stoi(cells[1], &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != cells[1].size() || s.stage < 0) throw DataError(where + ": invalid stage");
        if (cells[2] == "A") {
            s.sex = Sex::A;
        } else if (cells[2] == "B") {
            s.sex = Sex::B;
        } else {
            throw DataError(where + ": sex must be A or B");
        }
        const std::filesystem::path file(cells[3]);
        if (file.empty() || file.is_absolute()) throw DataError(where + ": filename must be a relative path");
        s.image = read_pgm(dir / file);
        if (!out.empty() && s.image.shape() != out.front().image.shape())
            throw DataError(where + ": image size differs from the first sample");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError(manifest_path.string() + ": no samples");
    return out;
}

}  // namespace ordistage
