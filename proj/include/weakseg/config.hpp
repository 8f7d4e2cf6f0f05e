#pragma once

#include <string>

#include "weakseg/phantom.hpp"
#include "weakseg/trainer.hpp"
#include "weakseg/unet.hpp"

namespace weakseg {

struct ScribbleConfig {
    std::string mode = "masks";  // "masks" | "centroids"
    int r_max_px = 4;            // mask procedure: largest disk radius
    int r_px = 4;                // centroid procedure: fixed disk radius
    double offset_mm = 11.0;     // centroid procedure: prostate-disk offset

    void validate() const;
};

struct EvalConfig {
    std::string protocol = "private";  // "private" | "centroid"
    int min_lesion_voxels = 26;
    double min_overlap_frac = 0.10;
    double fp_target = 2.0;
    std::string score_mode = "mean";  // "mean" | "max" of 1 - p(background)

    void validate() const;
};

// One run configuration, mirroring the module configs section by section:
// [data] -> PhantomConfig (+ the dataset directory), [scribble], [model],
// [loss] -> the weak-loss settings inside train, [train], [eval].
struct RunConfig {
    PhantomConfig data;
    std::string data_dir = "data";
    ScribbleConfig scribble;
    std::string annotations_dir = "annotations";
    UNetConfig model;
    TrainConfig train;  // train.loss holds the [loss] section
    std::string out_dir = "runs";
    EvalConfig eval;

    void validate() const;
};

// TOML-style text: [section] headers, key = value lines, # comments.
// Unknown sections or keys and malformed values raise ConfigError naming the
// offender. Values: integers, floats, booleans (true/false), strings
// (optionally double-quoted).
RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::string& path);

// Writes the fully materialized configuration (every key, defaults included)
// with the tool version in the header comment. parse(write(cfg)) == cfg.
void write_resolved_config(const RunConfig& cfg, const std::string& path);

// WEAKSEG_SEED, when set, overrides the [data] and [train] seeds. Malformed
// values raise ConfigError.
RunConfig apply_env_seed(RunConfig cfg);

}  // namespace weakseg
