#pragma once

#include <array>
#include <map>
#include <optional>
#include <vector>

#include "weakseg/common.hpp"
#include "weakseg/phantom.hpp"
#include "weakseg/volume.hpp"

namespace weakseg {

// Biopsy-style ground truth: a lesion center, its grade, and the prostate
// zone it sits in.
struct CentroidAnnotation {
    std::array<int, 3> lesion_center;  // (slice, row, col)
    ClassId gleason_class = kGs6;
    Zone zone = Zone::PZ;
};

// Per-class presence bounds (a_c, b_c) for foreground classes 1..5.
// Present classes carry (1, |domain|), absent classes (0, 0).
struct TagBounds {
    std::array<double, kNumClasses - 1> lower = {0, 0, 0, 0, 0};
    std::array<double, kNumClasses - 1> upper = {0, 0, 0, 0, 0};

    double a(ClassId c) const { return lower[c - 1]; }
    double b(ClassId c) const { return upper[c - 1]; }
};

// Integer-point disk {(dy,dx): dy^2+dx^2 <= r^2}; the radius-4 disk has
// 49 pixels.
std::vector<std::array<int, 2>> disk_offsets(int radius);

// Mask-based procedure: per slice, one disk inside the lesion-free prostate
// tissue plus one disk per lesion cross-section, radius shrunk until it fits.
AnnotationMask scribbles_from_masks(const LabelMap& truth, int r_max_px, Rng& rng,
                                    WarningLog* warnings = nullptr);

// Centroid-based procedure: lesion disk at each reported center, prostate disk
// offset toward the image center (x always, y only for TZ lesions), both
// replicated onto the two adjacent slices. The result records which slices
// are annotated.
AnnotationMask scribbles_from_centroids(const std::vector<CentroidAnnotation>& annotations,
                                        const GridShape& grid_shape, int r_px = 4,
                                        double offset_mm = 11.0,
                                        WarningLog* warnings = nullptr);

// Annotated-to-truth voxel ratio per class plus the total over foreground.
// Classes absent from the truth have no ratio.
struct AnnotationRatio {
    std::array<std::optional<double>, kNumClasses - 1> per_class;  // classes 1..5
    double total = 0.0;
};

AnnotationRatio annotation_ratio(const AnnotationMask& mask, const LabelMap& truth);

// Image-tag prior: class present in the annotations -> (1, domain_size),
// absent -> (0, 0). Background carries no tag.
TagBounds tags_from_annotation(const AnnotationMask& mask, std::int64_t domain_size);

// Per-slice variant used by the training loop; considers only entries on
// `slice` and sizes the domain as rows*cols.
TagBounds tags_for_slice(const AnnotationMask& mask, int slice);

}  // namespace weakseg
