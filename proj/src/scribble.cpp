#include "weakseg/scribble.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>

namespace weakseg {

std::vector<std::array<int, 2>> disk_offsets(int radius) {
    if (radius < 0) throw std::invalid_argument("disk_offsets: radius must be >= 0");
    std::vector<std::array<int, 2>> offs;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= radius * radius) offs.push_back({dy, dx});
    return offs;
}

namespace {

// Feasible disk centers inside `region` (a rows*cols boolean raster),
// in row-major order.
std::vector<std::array<int, 2>> feasible_centers(const std::vector<char>& region, int rows,
                                                 int cols,
                                                 const std::vector<std::array<int, 2>>& offs) {
    std::vector<std::array<int, 2>> centers;
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            if (!region[y * cols + x]) continue;
            bool ok = true;
            for (const auto& o : offs) {
                const int yy = y + o[0], xx = x + o[1];
                if (yy < 0 || yy >= rows || xx < 0 || xx >= cols || !region[yy * cols + xx]) {
                    ok = false;
                    break;
                }
            }
            if (ok) centers.push_back({y, x});
        }
    }
    return centers;
}

// 8-connected 2D components of a boolean raster, discovered in row-major
// order so the traversal is deterministic.
std::vector<std::vector<std::array<int, 2>>> components_2d(const std::vector<char>& region,
                                                           int rows, int cols) {
    std::vector<std::vector<std::array<int, 2>>> comps;
    std::vector<char> seen(region.size(), 0);
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            if (!region[y * cols + x] || seen[y * cols + x]) continue;
            std::vector<std::array<int, 2>> comp;
            std::queue<std::array<int, 2>> q;
            q.push({y, x});
            seen[y * cols + x] = 1;
            while (!q.empty()) {
                const auto [cy, cx] = q.front();
                q.pop();
                comp.push_back({cy, cx});
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= rows || nx < 0 || nx >= cols) continue;
                        if (!region[ny * cols + nx] || seen[ny * cols + nx]) continue;
                        seen[ny * cols + nx] = 1;
                        q.push({ny, nx});
                    }
                }
            }
            comps.push_back(std::move(comp));
        }
    }
    return comps;
}

// One disk inside `region`, radius shrunk from r_max until some center fits;
// center drawn uniformly among feasible ones.
std::optional<std::vector<std::array<int, 2>>> place_disk(const std::vector<char>& region,
                                                          int rows, int cols, int r_max,
                                                          Rng& rng) {
    for (int r = r_max; r >= 0; --r) {
        const auto offs = disk_offsets(r);
        const auto centers = feasible_centers(region, rows, cols, offs);
        if (centers.empty()) continue;
        const auto c = centers[static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(centers.size())))];
        std::vector<std::array<int, 2>> px;
        px.reserve(offs.size());
        for (const auto& o : offs) px.push_back({c[0] + o[0], c[1] + o[1]});
        return px;
    }
    return std::nullopt;
}

}  // namespace

AnnotationMask scribbles_from_masks(const LabelMap& truth, int r_max_px, Rng& rng,
                                    WarningLog* warnings) {
    if (r_max_px < 0) throw std::invalid_argument("scribbles_from_masks: negative radius");
    bool any_prostate = false;
    for (ClassId c : truth.labels)
        if (c != kBackground) {
            any_prostate = true;
            break;
        }
    if (!any_prostate)
        throw std::invalid_argument("scribbles_from_masks: truth contains no prostate region");

    AnnotationMask mask;
    mask.domain_shape = truth.grid();
    const int rows = truth.rows, cols = truth.cols;

    for (int d = 0; d < truth.slices; ++d) {
        std::vector<char> prostate_only(static_cast<std::size_t>(rows) * cols, 0);
        bool slice_has_prostate = false;
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x) {
                const ClassId c = truth.at(d, y, x);
                if (c == kProstate) {
                    prostate_only[y * cols + x] = 1;
                    slice_has_prostate = true;
                }
            }

        // lesion scribbles: one disk per 2D cross-section of each cancer class
        for (ClassId cls = kGs6; cls <= kGs8plus; ++cls) {
            std::vector<char> lesion(static_cast<std::size_t>(rows) * cols, 0);
            bool present = false;
            for (int y = 0; y < rows; ++y)
                for (int x = 0; x < cols; ++x)
                    if (truth.at(d, y, x) == cls) {
                        lesion[y * cols + x] = 1;
                        present = true;
                    }
            if (!present) continue;
            for (const auto& comp : components_2d(lesion, rows, cols)) {
                std::vector<char> comp_mask(static_cast<std::size_t>(rows) * cols, 0);
                for (const auto& p : comp) comp_mask[p[0] * cols + p[1]] = 1;
                const auto disk = place_disk(comp_mask, rows, cols, r_max_px, rng);
                if (!disk) continue;  // cannot happen: radius 0 always fits
                for (const auto& p : *disk) mask.entries.push_back({d, p[0], p[1], cls});
            }
        }

        // prostate scribble in lesion-free prostate tissue
        if (slice_has_prostate) {
            const auto disk = place_disk(prostate_only, rows, cols, r_max_px, rng);
            if (!disk) {
                warn(warnings, "scribbles_from_masks: slice " + std::to_string(d) +
                                   " has no feasible prostate scribble center, skipped");
            } else {
                for (const auto& p : *disk) mask.entries.push_back({d, p[0], p[1], kProstate});
            }
        }
    }
    mask.sort_entries();
    return mask;
}

AnnotationMask scribbles_from_centroids(const std::vector<CentroidAnnotation>& annotations,
                                        const GridShape& grid_shape, int r_px, double offset_mm,
                                        WarningLog* warnings) {
    const int rows = grid_shape.rows, cols = grid_shape.cols;
    for (const auto& a : annotations) {
        if (a.lesion_center[0] < 0 || a.lesion_center[0] >= grid_shape.slices ||
            a.lesion_center[1] < 0 || a.lesion_center[1] >= rows || a.lesion_center[2] < 0 ||
            a.lesion_center[2] >= cols)
            throw std::invalid_argument("scribbles_from_centroids: center outside grid");
    }

    const auto offs = disk_offsets(r_px);
    // 1 mm in-plane spacing after preprocessing, so mm == pixels
    const int shift = static_cast<int>(std::lround(offset_mm));
    const double center_y = 0.5 * (rows - 1);
    const double center_x = 0.5 * (cols - 1);

    // (slice,row,col) -> class; prostate disks first so lesion disks win
    // voxels claimed by both
    std::map<std::array<int, 3>, ClassId> paint;
    std::set<int> slices_touched;

    auto toward = [](int coord, double target, int step) {
        if (coord < target) return coord + step;
        if (coord > target) return coord - step;
        return coord;
    };

    for (const auto& a : annotations) {
        const int d = a.lesion_center[0];
        int py = a.lesion_center[1];
        int px = toward(a.lesion_center[2], center_x, shift);
        if (a.zone == Zone::TZ) py = toward(a.lesion_center[1], center_y, shift);

        // keep the whole prostate disk inside the grid
        const int py_clipped = std::clamp(py, r_px, rows - 1 - r_px);
        const int px_clipped = std::clamp(px, r_px, cols - 1 - r_px);
        if (py_clipped != py || px_clipped != px)
            warn(warnings, "scribbles_from_centroids: prostate scribble clipped into grid");

        for (int dd = -1; dd <= 1; ++dd) {
            const int sd = d + dd;
            if (sd < 0 || sd >= grid_shape.slices) continue;  // first/last slice
            slices_touched.insert(sd);
            for (const auto& o : offs) {
                const int y = py_clipped + o[0], x = px_clipped + o[1];
                paint[{sd, y, x}] = kProstate;
            }
        }
    }
    for (const auto& a : annotations) {
        const int d = a.lesion_center[0];
        for (int dd = -1; dd <= 1; ++dd) {
            const int sd = d + dd;
            if (sd < 0 || sd >= grid_shape.slices) continue;
            slices_touched.insert(sd);
            for (const auto& o : offs) {
                const int y = a.lesion_center[1] + o[0], x = a.lesion_center[2] + o[1];
                if (y < 0 || y >= rows || x < 0 || x >= cols) continue;
                paint[{sd, y, x}] = a.gleason_class;
            }
        }
    }

    AnnotationMask mask;
    mask.domain_shape = grid_shape;
    for (const auto& [pos, cls] : paint) mask.entries.push_back({pos[0], pos[1], pos[2], cls});
    mask.annotated_slices.assign(slices_touched.begin(), slices_touched.end());
    mask.has_annotated_slices = true;
    mask.sort_entries();
    return mask;
}

AnnotationRatio annotation_ratio(const AnnotationMask& mask, const LabelMap& truth) {
    if (mask.domain_shape != truth.grid())
        throw std::invalid_argument("annotation_ratio: grid shape mismatch");

    std::array<std::int64_t, kNumClasses> truth_count{};
    for (ClassId c : truth.labels) truth_count[c]++;
    std::array<std::int64_t, kNumClasses> mask_count{};
    for (const auto& e : mask.entries) mask_count[e.cls]++;

    AnnotationRatio r;
    std::int64_t fg_truth = 0, fg_mask = 0;
    for (int c = 1; c < kNumClasses; ++c) {
        fg_truth += truth_count[c];
        fg_mask += mask_count[c];
        if (truth_count[c] > 0)
            r.per_class[c - 1] = static_cast<double>(mask_count[c]) / truth_count[c];
    }
    r.total = fg_truth > 0 ? static_cast<double>(fg_mask) / fg_truth : 0.0;
    return r;
}

TagBounds tags_from_annotation(const AnnotationMask& mask, std::int64_t domain_size) {
    if (domain_size <= 0) throw std::invalid_argument("tags_from_annotation: empty domain");
    TagBounds tags;
    for (const auto& e : mask.entries) {
        if (e.cls == kBackground) continue;
        tags.lower[e.cls - 1] = 1.0;
        tags.upper[e.cls - 1] = static_cast<double>(domain_size);
    }
    return tags;
}

TagBounds tags_for_slice(const AnnotationMask& mask, int slice) {
    TagBounds tags;
    const double domain =
        static_cast<double>(mask.domain_shape.rows) * mask.domain_shape.cols;
    for (const auto& e : mask.entries) {
        if (e.slice != slice || e.cls == kBackground) continue;
        tags.lower[e.cls - 1] = 1.0;
        tags.upper[e.cls - 1] = domain;
    }
    return tags;
}

}  // namespace weakseg
