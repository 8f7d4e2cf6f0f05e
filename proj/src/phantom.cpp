#include "weakseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace weakseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Tissue intensity palette, chosen so that prostate tissue is separable from
// background in both channels and lesion ADC-like intensity falls with grade.
constexpr float kBgT2 = 0.30f, kBgAdc = 0.58f;
constexpr float kProstateT2 = 0.58f, kProstateAdc = 0.70f;
constexpr float kLesionT2 = 0.46f;
constexpr std::array<float, 4> kLesionAdcByClass = {0.48f, 0.38f, 0.28f, 0.18f};

struct Ellipsoid {
    double cd, ch, cw;  // center (slice, row, col)
    double ad, ah, aw;  // semi-axes in voxel units

    bool contains(int d, int h, int w) const {
        const double zd = (d - cd) / ad;
        const double zh = (h - ch) / ah;
        const double zw = (w - cw) / aw;
        return zd * zd + zh * zh + zw * zw <= 1.0;
    }
};

std::vector<std::array<int, 3>> rasterize(const Ellipsoid& e, const GridShape& g) {
    std::vector<std::array<int, 3>> voxels;
    const int d0 = std::max(0, static_cast<int>(std::floor(e.cd - e.ad)));
    const int d1 = std::min(g.slices - 1, static_cast<int>(std::ceil(e.cd + e.ad)));
    const int h0 = std::max(0, static_cast<int>(std::floor(e.ch - e.ah)));
    const int h1 = std::min(g.rows - 1, static_cast<int>(std::ceil(e.ch + e.ah)));
    const int w0 = std::max(0, static_cast<int>(std::floor(e.cw - e.aw)));
    const int w1 = std::min(g.cols - 1, static_cast<int>(std::ceil(e.cw + e.aw)));
    for (int d = d0; d <= d1; ++d)
        for (int h = h0; h <= h1; ++h)
            for (int w = w0; w <= w1; ++w)
                if (e.contains(d, h, w)) voxels.push_back({d, h, w});
    return voxels;
}

int sample_class_index(const std::array<double, 4>& mix, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) {
        acc += mix[i];
        if (u < acc) return i;
    }
    return 3;
}

}  // namespace

void PhantomConfig::validate() const {
    if (grid_shape.slices < 4 || grid_shape.rows < 16 || grid_shape.cols < 16)
        throw std::invalid_argument("PhantomConfig: grid too small");
    if (n_patients < 1) throw std::invalid_argument("PhantomConfig: n_patients must be >= 1");
    double mix_sum = 0.0;
    for (double p : lesion_class_mix) {
        if (p < 0.0) throw std::invalid_argument("PhantomConfig: negative class mix entry");
        mix_sum += p;
    }
    if (std::abs(mix_sum - 1.0) > 1e-9)
        throw std::invalid_argument("PhantomConfig: lesion_class_mix must sum to 1");
    for (const auto& r : lesion_radius_range_mm)
        if (r[0] <= 0.0 || r[1] < r[0])
            throw std::invalid_argument("PhantomConfig: invalid lesion radius range");
    if (noise_sigma < 0.0) throw std::invalid_argument("PhantomConfig: noise_sigma must be >= 0");
}

PhantomSample generate_sample(const PhantomConfig& cfg, int patient_index, Rng& rng) {
    cfg.validate();
    const GridShape g = cfg.grid_shape;

    PhantomSample sample;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "p%04d", patient_index);
    sample.patient_id = idbuf;

    const double thickness = 3.0;

    // prostate: ellipsoid near the grid center with jittered axes
    Ellipsoid prostate;
    prostate.cd = 0.5 * (g.slices - 1) + rng.uniform(-1.0, 1.0);
    prostate.ch = 0.5 * (g.rows - 1) + rng.uniform(-2.0, 2.0);
    prostate.cw = 0.5 * (g.cols - 1) + rng.uniform(-2.0, 2.0);
    prostate.ad = rng.uniform(0.24, 0.30) * g.slices;
    prostate.ah = rng.uniform(0.21, 0.27) * g.rows;
    prostate.aw = rng.uniform(0.22, 0.28) * g.cols;

    sample.truth = LabelMap::zeros(g.slices, g.rows, g.cols);
    for (const auto& v : rasterize(prostate, g)) sample.truth.at(v[0], v[1], v[2]) = kProstate;

    // lesions: 1-3 per patient, fully inside the prostate, pairwise disjoint
    const int n_lesions = 1 + static_cast<int>(rng.uniform_int(3));
    for (int li = 0; li < n_lesions; ++li) {
        const int class_idx = sample_class_index(cfg.lesion_class_mix, rng);
        const ClassId cls = static_cast<ClassId>(kGs6 + class_idx);
        const auto& rr = cfg.lesion_radius_range_mm[class_idx];

        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            double r_mm = rng.uniform(rr[0], rr[1]);
            // center uniform inside a shrunken prostate box
            Ellipsoid les;
            les.cd = prostate.cd + rng.uniform(-0.55, 0.55) * prostate.ad;
            les.ch = prostate.ch + rng.uniform(-0.6, 0.6) * prostate.ah;
            les.cw = prostate.cw + rng.uniform(-0.6, 0.6) * prostate.aw;
            const double wobble_h = rng.uniform(0.85, 1.15);
            const double wobble_w = rng.uniform(0.85, 1.15);
            const double wobble_d = rng.uniform(0.9, 1.2);

            std::vector<std::array<int, 3>> voxels;
            // grow until the rasterized blob clears the 26-voxel survival floor
            for (int grow = 0; grow < 8; ++grow) {
                les.ah = r_mm * wobble_h;
                les.aw = r_mm * wobble_w;
                les.ad = std::max(1.0, r_mm / thickness * wobble_d);
                voxels = rasterize(les, g);
                if (static_cast<int>(voxels.size()) >= 26) break;
                r_mm += 0.5;
            }
            if (static_cast<int>(voxels.size()) < 26) continue;

            bool ok = true;
            for (const auto& v : voxels) {
                if (sample.truth.at(v[0], v[1], v[2]) != kProstate) {
                    ok = false;  // outside the gland or colliding with another lesion
                    break;
                }
            }
            if (!ok) continue;

            for (const auto& v : voxels) sample.truth.at(v[0], v[1], v[2]) = cls;

            LesionRecord rec;
            rec.voxels = std::move(voxels);
            std::sort(rec.voxels.begin(), rec.voxels.end());
            rec.gleason_class = cls;
            rec.score = 1.0;
            rec.volume_mm3 = static_cast<double>(rec.voxels.size()) * 1.0 * 1.0 * thickness;
            rec.center = {static_cast<int>(std::lround(les.cd)),
                          static_cast<int>(std::lround(les.ch)),
                          static_cast<int>(std::lround(les.cw))};
            // posterior lesions read as peripheral zone
            rec.zone = (les.ch > prostate.ch) ? Zone::PZ : Zone::TZ;
            sample.lesions.push_back(std::move(rec));
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("generate_sample: could not place lesion for patient " +
                                     sample.patient_id);
    }

    // paint intensities then add noise
    sample.volume = Volume::zeros(2, g.slices, g.rows, g.cols);
    sample.volume.in_plane_spacing_mm = {1.0, 1.0};
    sample.volume.slice_thickness_mm = thickness;
    for (int d = 0; d < g.slices; ++d) {
        for (int h = 0; h < g.rows; ++h) {
            for (int w = 0; w < g.cols; ++w) {
                const ClassId c = sample.truth.at(d, h, w);
                float t2 = kBgT2, adc = kBgAdc;
                if (c == kProstate) {
                    t2 = kProstateT2;
                    adc = kProstateAdc;
                } else if (is_cancer_class(c)) {
                    t2 = kLesionT2;
                    adc = kLesionAdcByClass[c - kGs6];
                }
                sample.volume.at(0, d, h, w) = t2;
                sample.volume.at(1, d, h, w) = adc;
            }
        }
    }
    if (cfg.noise_sigma > 0.0) {
        for (auto& x : sample.volume.data)
            x += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
    }
    return sample;
}

Manifest generate_dataset(const PhantomConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    Manifest manifest;
    manifest.config = cfg;
    Rng master(cfg.seed);
    for (int i = 0; i < cfg.n_patients; ++i) {
        Rng stream = master.child(static_cast<std::uint64_t>(i));
        PhantomSample s = generate_sample(cfg, i, stream);

        ManifestPatient p;
        p.id = s.patient_id;
        p.volume_path = s.patient_id + "_volume";
        p.labels_path = s.patient_id + "_labels";
        write_volume(s.volume, (fs::path(out_dir) / p.volume_path).string());
        write_label_map(s.truth, (fs::path(out_dir) / p.labels_path).string());
        for (const auto& l : s.lesions)
            p.lesions.push_back({l.gleason_class, l.center,
                                 static_cast<std::int64_t>(l.voxels.size()), l.zone});
        manifest.patients.push_back(std::move(p));
    }
    write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

namespace {
json config_to_json(const PhantomConfig& cfg) {
    json j;
    j["grid_shape"] = {cfg.grid_shape.slices, cfg.grid_shape.rows, cfg.grid_shape.cols};
    j["n_patients"] = cfg.n_patients;
    j["lesion_class_mix"] = cfg.lesion_class_mix;
    json ranges = json::array();
    for (const auto& r : cfg.lesion_radius_range_mm) ranges.push_back({r[0], r[1]});
    j["lesion_radius_range_mm"] = std::move(ranges);
    j["noise_sigma"] = cfg.noise_sigma;
    j["seed"] = cfg.seed;
    return j;
}

PhantomConfig config_from_json(const json& j) {
    PhantomConfig cfg;
    const auto g = j.at("grid_shape").get<std::vector<int>>();
    cfg.grid_shape = {g.at(0), g.at(1), g.at(2)};
    cfg.n_patients = j.at("n_patients").get<int>();
    const auto mix = j.at("lesion_class_mix").get<std::vector<double>>();
    for (int i = 0; i < 4; ++i) cfg.lesion_class_mix[i] = mix.at(i);
    const auto ranges = j.at("lesion_radius_range_mm");
    for (int i = 0; i < 4; ++i) {
        cfg.lesion_radius_range_mm[i] = {ranges.at(i).at(0).get<double>(),
                                         ranges.at(i).at(1).get<double>()};
    }
    cfg.noise_sigma = j.at("noise_sigma").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}
}  // namespace

void write_manifest(const Manifest& m, const std::string& path) {
    json j;
    json patients = json::array();
    for (const auto& p : m.patients) {
        json lesions = json::array();
        for (const auto& l : p.lesions) {
            lesions.push_back({{"class", static_cast<int>(l.cls)},
                               {"center", {l.center[0], l.center[1], l.center[2]}},
                               {"n_voxels", l.n_voxels},
                               {"zone", l.zone == Zone::PZ ? "PZ" : "TZ"}});
        }
        patients.push_back({{"id", p.id},
                            {"volume", p.volume_path},
                            {"labels", p.labels_path},
                            {"lesions", std::move(lesions)}});
    }
    j["patients"] = std::move(patients);
    j["config"] = config_to_json(m.config);
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path);
}

Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError("malformed manifest " + path + ": " + e.what());
    }
    Manifest m;
    for (const auto& pj : j.at("patients")) {
        ManifestPatient p;
        p.id = pj.at("id").get<std::string>();
        p.volume_path = pj.at("volume").get<std::string>();
        p.labels_path = pj.at("labels").get<std::string>();
        for (const auto& lj : pj.at("lesions")) {
            ManifestLesion l;
            l.cls = static_cast<ClassId>(lj.at("class").get<int>());
            const auto c = lj.at("center").get<std::vector<int>>();
            l.center = {c.at(0), c.at(1), c.at(2)};
            l.n_voxels = lj.at("n_voxels").get<std::int64_t>();
            l.zone = lj.value("zone", "PZ") == "TZ" ? Zone::TZ : Zone::PZ;
            p.lesions.push_back(l);
        }
        m.patients.push_back(std::move(p));
    }
    m.config = config_from_json(j.at("config"));
    return m;
}

double mean_intensity(const Volume& v, int channel,
                      const std::vector<std::array<int, 3>>& voxels) {
    if (voxels.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& p : voxels) acc += v.at(channel, p[0], p[1], p[2]);
    return acc / static_cast<double>(voxels.size());
}

}  // namespace weakseg
