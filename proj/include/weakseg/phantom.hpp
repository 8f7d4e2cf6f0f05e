#pragma once

#include <array>
#include <string>
#include <vector>

#include "weakseg/common.hpp"
#include "weakseg/volume.hpp"

namespace weakseg {

enum class Zone { PZ, TZ };

// A ground-truth lesion: its voxels, grade, and bookkeeping for evaluation.
// `score` is a detection confidence; ground truth lesions carry 1.0.
struct LesionRecord {
    std::vector<std::array<int, 3>> voxels;  // (slice, row, col), sorted
    ClassId gleason_class = kGs6;
    double score = 1.0;
    double volume_mm3 = 0.0;
    std::array<int, 3> center = {0, 0, 0};
    Zone zone = Zone::PZ;
};

struct PhantomConfig {
    GridShape grid_shape = {24, 96, 96};
    int n_patients = 1;
    // probability of each cancer class (GS6, GS3+4, GS4+3, GS>=8); defaults
    // follow the 104/126/56/52 lesion census
    std::array<double, 4> lesion_class_mix = {104.0 / 338, 126.0 / 338, 56.0 / 338, 52.0 / 338};
    // in-plane radius interval per cancer class, mm
    std::array<std::array<double, 2>, 4> lesion_radius_range_mm = {
        {{3.0, 4.5}, {3.5, 5.5}, {4.0, 6.5}, {4.5, 7.5}}};
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PhantomSample {
    Volume volume;  // 2 channels: T2w-like, ADC-like; unnormalized intensities
    LabelMap truth;
    std::vector<LesionRecord> lesions;
    std::string patient_id;
};

struct ManifestLesion {
    ClassId cls;
    std::array<int, 3> center;
    std::int64_t n_voxels;
    Zone zone;
};

struct ManifestPatient {
    std::string id;
    std::string volume_path;  // path base, relative to the manifest directory
    std::string labels_path;
    std::vector<ManifestLesion> lesions;
};

struct Manifest {
    std::vector<ManifestPatient> patients;
    PhantomConfig config;
};

// Deterministic synthesis of one patient: ellipsoidal prostate near the grid
// center, 1-3 graded lesions inside it, ADC-like intensity decreasing with
// grade, additive Gaussian noise.
PhantomSample generate_sample(const PhantomConfig& cfg, int patient_index, Rng& rng);

// Generates all patients and writes volumes, label maps, and manifest.json
// under out_dir.
Manifest generate_dataset(const PhantomConfig& cfg, const std::string& out_dir);

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

// Mean ADC-like channel intensity over a voxel set; used by learnability checks.
double mean_intensity(const Volume& v, int channel, const std::vector<std::array<int, 3>>& voxels);

}  // namespace weakseg
