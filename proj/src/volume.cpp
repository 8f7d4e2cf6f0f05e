#include "weakseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace weakseg {

using nlohmann::json;

const char* class_name(ClassId c) {
    switch (c) {
        case kBackground: return "background";
        case kProstate: return "prostate";
        case kGs6: return "GS 6";
        case kGs34: return "GS 3+4";
        case kGs43: return "GS 4+3";
        case kGs8plus: return "GS >= 8";
        default: return "invalid";
    }
}

Volume Volume::zeros(int channels, int slices, int rows, int cols) {
    if (channels < 1 || slices < 1 || rows < 1 || cols < 1)
        throw std::invalid_argument("Volume::zeros: all dimensions must be >= 1");
    Volume v;
    v.channels = channels;
    v.slices = slices;
    v.rows = rows;
    v.cols = cols;
    v.data.assign(static_cast<std::size_t>(channels) * slices * rows * cols, 0.0f);
    return v;
}

LabelMap LabelMap::zeros(int slices, int rows, int cols) {
    if (slices < 1 || rows < 1 || cols < 1)
        throw std::invalid_argument("LabelMap::zeros: all dimensions must be >= 1");
    LabelMap m;
    m.slices = slices;
    m.rows = rows;
    m.cols = cols;
    m.labels.assign(static_cast<std::size_t>(slices) * rows * cols, kBackground);
    return m;
}

void AnnotationMask::sort_entries() {
    std::sort(entries.begin(), entries.end());
    entries.erase(std::unique(entries.begin(), entries.end(),
                              [](const AnnotationEntry& a, const AnnotationEntry& b) {
                                  return a.slice == b.slice && a.row == b.row && a.col == b.col;
                              }),
                  entries.end());
}

Volume resample_in_plane(const Volume& v, std::array<double, 2> target_spacing_mm) {
    if (target_spacing_mm[0] <= 0.0 || target_spacing_mm[1] <= 0.0)
        throw std::invalid_argument("resample_in_plane: target spacing must be positive");
    if (v.in_plane_spacing_mm[0] <= 0.0 || v.in_plane_spacing_mm[1] <= 0.0)
        throw std::invalid_argument("resample_in_plane: input spacing must be positive");

    if (v.in_plane_spacing_mm == target_spacing_mm) return v;

    const double sr = v.in_plane_spacing_mm[0], sc = v.in_plane_spacing_mm[1];
    const double tr = target_spacing_mm[0], tc = target_spacing_mm[1];
    const int out_rows = std::max(1, static_cast<int>(std::lround(v.rows * sr / tr)));
    const int out_cols = std::max(1, static_cast<int>(std::lround(v.cols * sc / tc)));

    Volume out = Volume::zeros(v.channels, v.slices, out_rows, out_cols);
    out.in_plane_spacing_mm = target_spacing_mm;
    out.slice_thickness_mm = v.slice_thickness_mm;

    for (int c = 0; c < v.channels; ++c) {
        for (int d = 0; d < v.slices; ++d) {
            for (int h = 0; h < out_rows; ++h) {
                // pixel-center mapping, clamped at the borders
                double y = ((h + 0.5) * tr) / sr - 0.5;
                y = std::clamp(y, 0.0, static_cast<double>(v.rows - 1));
                const int y0 = static_cast<int>(std::floor(y));
                const int y1 = std::min(y0 + 1, v.rows - 1);
                const double fy = y - y0;
                for (int w = 0; w < out_cols; ++w) {
                    double x = ((w + 0.5) * tc) / sc - 0.5;
                    x = std::clamp(x, 0.0, static_cast<double>(v.cols - 1));
                    const int x0 = static_cast<int>(std::floor(x));
                    const int x1 = std::min(x0 + 1, v.cols - 1);
                    const double fx = x - x0;
                    const double v00 = v.at(c, d, y0, x0);
                    const double v01 = v.at(c, d, y0, x1);
                    const double v10 = v.at(c, d, y1, x0);
                    const double v11 = v.at(c, d, y1, x1);
                    const double val = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                       fy * ((1.0 - fx) * v10 + fx * v11);
                    out.at(c, d, h, w) = static_cast<float>(val);
                }
            }
        }
    }
    return out;
}

namespace {
std::pair<int, int> crop_offsets(int rows, int cols, int size_px) {
    if (size_px < 1) throw std::invalid_argument("center_crop: size must be >= 1");
    if (size_px > rows || size_px > cols)
        throw std::invalid_argument("center_crop: size " + std::to_string(size_px) +
                                    " exceeds input extent " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    // floor division keeps the low-index side on odd margins
    return {(rows - size_px) / 2, (cols - size_px) / 2};
}
}  // namespace

Volume center_crop(const Volume& v, int size_px) {
    const auto [oy, ox] = crop_offsets(v.rows, v.cols, size_px);
    if (v.rows == size_px && v.cols == size_px) return v;
    Volume out = Volume::zeros(v.channels, v.slices, size_px, size_px);
    out.in_plane_spacing_mm = v.in_plane_spacing_mm;
    out.slice_thickness_mm = v.slice_thickness_mm;
    for (int c = 0; c < v.channels; ++c)
        for (int d = 0; d < v.slices; ++d)
            for (int h = 0; h < size_px; ++h)
                for (int w = 0; w < size_px; ++w)
                    out.at(c, d, h, w) = v.at(c, d, h + oy, w + ox);
    return out;
}

LabelMap center_crop(const LabelMap& m, int size_px) {
    const auto [oy, ox] = crop_offsets(m.rows, m.cols, size_px);
    if (m.rows == size_px && m.cols == size_px) return m;
    LabelMap out = LabelMap::zeros(m.slices, size_px, size_px);
    for (int d = 0; d < m.slices; ++d)
        for (int h = 0; h < size_px; ++h)
            for (int w = 0; w < size_px; ++w)
                out.at(d, h, w) = m.at(d, h + oy, w + ox);
    return out;
}

Volume normalize_intensity(const Volume& v, WarningLog* warnings) {
    Volume out = v;
    const std::int64_t per_channel = static_cast<std::int64_t>(v.slices) * v.rows * v.cols;
    for (int c = 0; c < v.channels; ++c) {
        float lo = std::numeric_limits<float>::max();
        float hi = std::numeric_limits<float>::lowest();
        const float* src = v.data.data() + c * per_channel;
        for (std::int64_t i = 0; i < per_channel; ++i) {
            lo = std::min(lo, src[i]);
            hi = std::max(hi, src[i]);
        }
        float* dst = out.data.data() + c * per_channel;
        if (hi <= lo) {
            warn(warnings, "normalize_intensity: channel " + std::to_string(c) +
                               " is constant, mapped to zeros");
            std::fill(dst, dst + per_channel, 0.0f);
            continue;
        }
        const float scale = 1.0f / (hi - lo);
        for (std::int64_t i = 0; i < per_channel; ++i) dst[i] = (src[i] - lo) * scale;
    }
    return out;
}

Volume stack_channels(const Volume& t2w_like, const Volume& adc_like) {
    if (t2w_like.channels != 1 || adc_like.channels != 1)
        throw std::invalid_argument("stack_channels: inputs must be single-channel");
    if (t2w_like.grid() != adc_like.grid() ||
        t2w_like.in_plane_spacing_mm != adc_like.in_plane_spacing_mm ||
        t2w_like.slice_thickness_mm != adc_like.slice_thickness_mm)
        throw std::invalid_argument("stack_channels: grid shape or spacing mismatch");
    Volume out = Volume::zeros(2, t2w_like.slices, t2w_like.rows, t2w_like.cols);
    out.in_plane_spacing_mm = t2w_like.in_plane_spacing_mm;
    out.slice_thickness_mm = t2w_like.slice_thickness_mm;
    std::copy(t2w_like.data.begin(), t2w_like.data.end(), out.data.begin());
    std::copy(adc_like.data.begin(), adc_like.data.end(),
              out.data.begin() + t2w_like.data.size());
    return out;
}

Volume select_channel(const Volume& v, int channel) {
    if (channel < 0 || channel >= v.channels)
        throw std::invalid_argument("select_channel: channel out of range");
    Volume out = Volume::zeros(1, v.slices, v.rows, v.cols);
    out.in_plane_spacing_mm = v.in_plane_spacing_mm;
    out.slice_thickness_mm = v.slice_thickness_mm;
    const std::int64_t per_channel = static_cast<std::int64_t>(v.slices) * v.rows * v.cols;
    std::copy(v.data.begin() + channel * per_channel,
              v.data.begin() + (channel + 1) * per_channel, out.data.begin());
    return out;
}

// ---- I/O -------------------------------------------------------------------

namespace {

void write_file_bytes(const std::string& path, const void* bytes, std::size_t n) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
    if (!f) throw IoError("write failed: " + path);
}

std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path);
    const auto n = f.tellg();
    f.seekg(0);
    std::vector<char> bytes(static_cast<std::size_t>(n));
    f.read(bytes.data(), n);
    if (!f) throw IoError("read failed: " + path);
    return bytes;
}

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace

void write_volume(const Volume& v, const std::string& path_base) {
    json header;
    header["shape"] = {v.channels, v.slices, v.rows, v.cols};
    header["spacing_mm"] = {v.in_plane_spacing_mm[0], v.in_plane_spacing_mm[1]};
    header["slice_thickness_mm"] = v.slice_thickness_mm;
    header["dtype"] = "f32";
    write_json_file(header, path_base + ".json");
    write_file_bytes(path_base + ".bin", v.data.data(), v.data.size() * sizeof(float));
}

Volume read_volume(const std::string& path_base) {
    const json header = read_json_file(path_base + ".json");
    if (header.value("dtype", "") != "f32")
        throw IoError("volume header dtype must be f32: " + path_base);
    const auto shape = header.at("shape").get<std::vector<int>>();
    if (shape.size() != 4) throw IoError("volume header shape must be [C,D,H,W]: " + path_base);
    Volume v = Volume::zeros(shape[0], shape[1], shape[2], shape[3]);
    const auto spacing = header.at("spacing_mm").get<std::vector<double>>();
    if (spacing.size() != 2) throw IoError("volume header spacing_mm must be a pair");
    v.in_plane_spacing_mm = {spacing[0], spacing[1]};
    v.slice_thickness_mm = header.at("slice_thickness_mm").get<double>();
    const auto bytes = read_file_bytes(path_base + ".bin");
    if (bytes.size() != v.data.size() * sizeof(float))
        throw IoError("volume payload size mismatch: " + path_base);
    std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(v.data.data()));
    return v;
}

void write_label_map(const LabelMap& m, const std::string& path_base) {
    json header;
    header["shape"] = {m.slices, m.rows, m.cols};
    header["dtype"] = "u8";
    write_json_file(header, path_base + ".json");
    write_file_bytes(path_base + ".bin", m.labels.data(), m.labels.size());
}

LabelMap read_label_map(const std::string& path_base) {
    const json header = read_json_file(path_base + ".json");
    if (header.value("dtype", "") != "u8")
        throw IoError("label map header dtype must be u8: " + path_base);
    const auto shape = header.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw IoError("label map header shape must be [D,H,W]: " + path_base);
    LabelMap m = LabelMap::zeros(shape[0], shape[1], shape[2]);
    const auto bytes = read_file_bytes(path_base + ".bin");
    if (bytes.size() != m.labels.size())
        throw IoError("label map payload size mismatch: " + path_base);
    std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(m.labels.data()));
    return m;
}

void write_annotation_mask(const AnnotationMask& m, const std::string& path) {
    json j;
    j["domain_shape"] = {m.domain_shape.slices, m.domain_shape.rows, m.domain_shape.cols};
    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"pos", {e.slice, e.row, e.col}}, {"class", static_cast<int>(e.cls)}});
    }
    j["entries"] = std::move(entries);
    if (m.has_annotated_slices) j["annotated_slices"] = m.annotated_slices;
    write_json_file(j, path);
}

AnnotationMask read_annotation_mask(const std::string& path) {
    const json j = read_json_file(path);
    AnnotationMask m;
    const auto shape = j.at("domain_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw IoError("annotation mask domain_shape must be [D,H,W]: " + path);
    m.domain_shape = {shape[0], shape[1], shape[2]};
    for (const auto& e : j.at("entries")) {
        const auto pos = e.at("pos").get<std::vector<int>>();
        if (pos.size() != 3) throw IoError("annotation entry pos must be [d,h,w]: " + path);
        const int cls = e.at("class").get<int>();
        if (cls < 0 || cls >= kNumClasses)
            throw IoError("annotation entry class out of range: " + path);
        m.entries.push_back({pos[0], pos[1], pos[2], static_cast<ClassId>(cls)});
    }
    if (j.contains("annotated_slices")) {
        m.annotated_slices = j.at("annotated_slices").get<std::vector<int>>();
        m.has_annotated_slices = true;
    }
    m.sort_entries();
    return m;
}

}  // namespace weakseg
