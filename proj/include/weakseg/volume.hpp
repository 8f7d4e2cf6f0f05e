#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "weakseg/common.hpp"

namespace weakseg {

// Class labels, 0-based: background, whole prostate, then the four Gleason
// grade groups in increasing aggressiveness.
using ClassId = std::uint8_t;
inline constexpr ClassId kBackground = 0;
inline constexpr ClassId kProstate = 1;
inline constexpr ClassId kGs6 = 2;
inline constexpr ClassId kGs34 = 3;
inline constexpr ClassId kGs43 = 4;
inline constexpr ClassId kGs8plus = 5;
inline constexpr int kNumClasses = 6;
inline constexpr int kNumCancerClasses = 4;

inline bool is_cancer_class(ClassId c) { return c >= kGs6 && c <= kGs8plus; }

const char* class_name(ClassId c);

struct GridShape {
    int slices = 0;
    int rows = 0;
    int cols = 0;

    bool operator==(const GridShape&) const = default;
    std::int64_t voxels() const {
        return static_cast<std::int64_t>(slices) * rows * cols;
    }
};

// Multi-channel 3D scalar grid with physical spacing. Storage order is
// (channel, slice, row, col), row-major.
struct Volume {
    int channels = 0;
    int slices = 0;
    int rows = 0;
    int cols = 0;
    std::array<double, 2> in_plane_spacing_mm = {1.0, 1.0};  // (row, col)
    double slice_thickness_mm = 1.0;
    std::vector<float> data;

    static Volume zeros(int channels, int slices, int rows, int cols);

    std::int64_t numel() const {
        return static_cast<std::int64_t>(channels) * slices * rows * cols;
    }
    GridShape grid() const { return {slices, rows, cols}; }

    float& at(int c, int d, int h, int w) {
        return data[((static_cast<std::int64_t>(c) * slices + d) * rows + h) * cols + w];
    }
    float at(int c, int d, int h, int w) const {
        return data[((static_cast<std::int64_t>(c) * slices + d) * rows + h) * cols + w];
    }
};

// Dense full ground truth over a grid; one ClassId per voxel, (slice, row, col).
struct LabelMap {
    int slices = 0;
    int rows = 0;
    int cols = 0;
    std::vector<ClassId> labels;

    static LabelMap zeros(int slices, int rows, int cols);

    GridShape grid() const { return {slices, rows, cols}; }
    std::int64_t numel() const { return static_cast<std::int64_t>(slices) * rows * cols; }

    ClassId& at(int d, int h, int w) {
        return labels[(static_cast<std::int64_t>(d) * rows + h) * cols + w];
    }
    ClassId at(int d, int h, int w) const {
        return labels[(static_cast<std::int64_t>(d) * rows + h) * cols + w];
    }
};

// Sparse scribble annotations. Entries are kept sorted by (slice, row, col)
// and unique, so serialization is deterministic.
struct AnnotationEntry {
    int slice = 0;
    int row = 0;
    int col = 0;
    ClassId cls = kBackground;

    auto operator<=>(const AnnotationEntry&) const = default;
};

struct AnnotationMask {
    GridShape domain_shape;
    std::vector<AnnotationEntry> entries;
    // Slices eligible for training. Present (non-empty) only for the
    // centroid-based procedure; empty means "train on every slice".
    std::vector<int> annotated_slices;
    bool has_annotated_slices = false;

    void sort_entries();
};

// ---- preprocessing chain -------------------------------------------------

// Bilinear in-plane resampling to the target (row, col) spacing. Slice count
// and thickness are untouched. Pixel centers sit at (i + 0.5) * spacing;
// source coordinates are clamped to the grid.
Volume resample_in_plane(const Volume& v, std::array<double, 2> target_spacing_mm);

// Central size_px x size_px in-plane crop; odd leftover margins drop the
// high-index row/column.
Volume center_crop(const Volume& v, int size_px);
LabelMap center_crop(const LabelMap& m, int size_px);

// Per-channel linear map of the full 3D extent onto [0, 1]. A constant
// channel maps to all zeros and logs a warning.
Volume normalize_intensity(const Volume& v, WarningLog* warnings = nullptr);

// Combines two single-channel volumes into channel 0 (T2w-like) and
// channel 1 (ADC-like).
Volume stack_channels(const Volume& t2w_like, const Volume& adc_like);

Volume select_channel(const Volume& v, int channel);

// ---- on-disk formats -----------------------------------------------------
//
// Volumes: <base>.bin of little-endian f32 in (C,D,H,W) order plus
// <base>.json {"shape":[C,D,H,W],"spacing_mm":[sr,sc],"slice_thickness_mm":t,
// "dtype":"f32"}. Label maps: u8 with shape [D,H,W]. Annotation masks are a
// single JSON file.

void write_volume(const Volume& v, const std::string& path_base);
Volume read_volume(const std::string& path_base);

void write_label_map(const LabelMap& m, const std::string& path_base);
LabelMap read_label_map(const std::string& path_base);

void write_annotation_mask(const AnnotationMask& m, const std::string& path);
AnnotationMask read_annotation_mask(const std::string& path);

}  // namespace weakseg
