#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "weakseg/config.hpp"

using namespace weakseg;

namespace {

const char* kFullConfig = R"(# full example
[data]
n_patients = 12
slices = 16
rows = 64
cols = 64
noise_sigma = 0.07
seed = 42
dir = "my-data"

[scribble]
mode = "centroids"
r_max_px = 3
r_px = 5
offset_mm = 9.5
dir = "my-annotations"

[model]
base_width = 4

[loss]
lambda = 2e-05
w_prostate = 0.1
w_cancer = 0.25

[train]
regime = "partial-ce"   # inline comment
lr0 = 0.002
lr_decay = 0.25
plateau_patience_epochs = 10
plateau_min_delta = 0.001
l2_gamma = 0.0002
batch_size = 8
max_epochs = 7
seed = 9
folds = 3
replicates = 2
augment = false
out_dir = "my-runs"

[eval]
protocol = "centroid"
min_lesion_voxels = 10
min_overlap_frac = 0.2
fp_target = 1.5
score_mode = "max"
)";

}  // namespace

TEST_CASE("a full config file parses into every field") {
    const RunConfig cfg = parse_run_config_text(kFullConfig);
    CHECK(cfg.data.n_patients == 12);
    CHECK(cfg.data.grid_shape.slices == 16);
    CHECK(cfg.data.grid_shape.rows == 64);
    CHECK(cfg.data.grid_shape.cols == 64);
    CHECK(cfg.data.noise_sigma == 0.07);
    CHECK(cfg.data.seed == 42);
    CHECK(cfg.data_dir == "my-data");
    CHECK(cfg.scribble.mode == "centroids");
    CHECK(cfg.scribble.r_max_px == 3);
    CHECK(cfg.scribble.r_px == 5);
    CHECK(cfg.scribble.offset_mm == 9.5);
    CHECK(cfg.annotations_dir == "my-annotations");
    CHECK(cfg.model.base_width == 4);
    CHECK(cfg.train.loss.lambda == 2e-05);
    CHECK(cfg.train.loss.class_weights[0] == 0.1);
    for (int c = 1; c < kNumClasses - 1; ++c) CHECK(cfg.train.loss.class_weights[c] == 0.25);
    CHECK(cfg.train.regime == Regime::PartialCE);
    CHECK(cfg.train.lr0 == 0.002);
    CHECK(cfg.train.lr_decay == 0.25);
    CHECK(cfg.train.plateau_patience_epochs == 10);
    CHECK(cfg.train.plateau_min_delta == 0.001);
    CHECK(cfg.train.l2_gamma == 0.0002);
    CHECK(cfg.train.batch_size == 8);
    CHECK(cfg.train.max_epochs == 7);
    CHECK(cfg.train.seed == 9);
    CHECK(cfg.train.folds == 3);
    CHECK(cfg.train.replicates == 2);
    CHECK(cfg.train.augment == false);
    CHECK(cfg.out_dir == "my-runs");
    CHECK(cfg.eval.protocol == "centroid");
    CHECK(cfg.eval.min_lesion_voxels == 10);
    CHECK(cfg.eval.min_overlap_frac == 0.2);
    CHECK(cfg.eval.fp_target == 1.5);
    CHECK(cfg.eval.score_mode == "max");
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("omitted keys keep their defaults") {
    const RunConfig cfg = parse_run_config_text("[train]\nmax_epochs = 3\n");
    CHECK(cfg.train.max_epochs == 3);
    CHECK(cfg.train.lr0 == 1e-3);
    CHECK(cfg.train.regime == Regime::PartialCETags);
    CHECK(cfg.data.n_patients == 1);
    CHECK(cfg.data.grid_shape.slices == 24);
    CHECK(cfg.eval.protocol == "private");
    CHECK(cfg.train.loss.lambda == 1e-5);
    CHECK(cfg.train.loss.class_weights[0] == 0.12);
    CHECK(cfg.train.loss.class_weights[1] == 0.22);
    const RunConfig empty = parse_run_config_text("");
    CHECK_NOTHROW(empty.validate());
}

TEST_CASE("unknown sections and keys are rejected by name") {
    CHECK_THROWS_WITH_AS(parse_run_config_text("[plotting]\nx = 1\n"),
                         doctest::Contains("unknown config section [plotting]"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\nmomentum = 0.9\n"),
                         doctest::Contains("train.momentum"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[data]\npatients = 4\n"),
                         doctest::Contains("data.patients"), ConfigError);
}

TEST_CASE("malformed values and lines are rejected by key") {
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\nmax_epochs = seven\n"),
                         doctest::Contains("train.max_epochs"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\nmax_epochs = 7.5\n"),
                         doctest::Contains("an integer"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\naugment = yes\n"),
                         doctest::Contains("true or false"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\nseed = -1\n"),
                         doctest::Contains("non-negative"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[loss]\nlambda = fast\n"),
                         doctest::Contains("a number"), ConfigError);
    CHECK_THROWS_AS(parse_run_config_text("max_epochs = 3\n"), ConfigError);  // no section
    CHECK_THROWS_AS(parse_run_config_text("[train]\nmax_epochs 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config_text("[train\nmax_epochs = 3\n"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[train]\nregime = \"sgd\"\n"),
                         doctest::Contains("unknown regime"), ConfigError);
}

TEST_CASE("whitespace, comments, and quoting variants are tolerated") {
    const RunConfig cfg = parse_run_config_text(
        "  [data]  \n"
        "   n_patients=3\n"
        "dir = plain-token  # trailing comment\n"
        "\n"
        "# standalone comment with [section] and key = value inside\n"
        "seed =    7   \n");
    CHECK(cfg.data.n_patients == 3);
    CHECK(cfg.data_dir == "plain-token");
    CHECK(cfg.data.seed == 7);
    // a quoted string may contain '#'
    const RunConfig q = parse_run_config_text("[data]\ndir = \"a#b\"\n");
    CHECK(q.data_dir == "a#b");
}

TEST_CASE("validation rejects out-of-range section values") {
    RunConfig cfg;
    cfg.scribble.mode = "freehand";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = RunConfig{};
    cfg.eval.protocol = "public";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = RunConfig{};
    cfg.eval.min_overlap_frac = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = RunConfig{};
    cfg.eval.score_mode = "median";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = RunConfig{};
    cfg.scribble.r_max_px = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = RunConfig{};
    cfg.out_dir = "";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("resolved configs round-trip exactly") {
    namespace fs = std::filesystem;
    const RunConfig cfg = parse_run_config_text(kFullConfig);
    const std::string path =
        (fs::temp_directory_path() / "weakseg_test_resolved.toml").string();
    write_resolved_config(cfg, path);
    const RunConfig back = parse_run_config(path);

    CHECK(back.data.n_patients == cfg.data.n_patients);
    CHECK(back.data.noise_sigma == cfg.data.noise_sigma);
    CHECK(back.data.seed == cfg.data.seed);
    CHECK(back.data_dir == cfg.data_dir);
    CHECK(back.scribble.mode == cfg.scribble.mode);
    CHECK(back.scribble.offset_mm == cfg.scribble.offset_mm);
    CHECK(back.annotations_dir == cfg.annotations_dir);
    CHECK(back.model.base_width == cfg.model.base_width);
    CHECK(back.train.loss.lambda == cfg.train.loss.lambda);
    CHECK(back.train.loss.class_weights == cfg.train.loss.class_weights);
    CHECK(back.train.regime == cfg.train.regime);
    CHECK(back.train.lr0 == cfg.train.lr0);
    CHECK(back.train.plateau_min_delta == cfg.train.plateau_min_delta);
    CHECK(back.train.seed == cfg.train.seed);
    CHECK(back.train.augment == cfg.train.augment);
    CHECK(back.out_dir == cfg.out_dir);
    CHECK(back.eval.protocol == cfg.eval.protocol);
    CHECK(back.eval.min_overlap_frac == cfg.eval.min_overlap_frac);
    CHECK(back.eval.score_mode == cfg.eval.score_mode);

    // the file leads with the tool version
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    CHECK(first == std::string("# ") + kVersion);
    fs::remove(path);
}

TEST_CASE("WEAKSEG_SEED overrides the data and train seeds") {
    RunConfig cfg;
    cfg.data.seed = 1;
    cfg.train.seed = 2;

    unsetenv("WEAKSEG_SEED");
    RunConfig same = apply_env_seed(cfg);
    CHECK(same.data.seed == 1);
    CHECK(same.train.seed == 2);

    setenv("WEAKSEG_SEED", "777", 1);
    RunConfig over = apply_env_seed(cfg);
    CHECK(over.data.seed == 777);
    CHECK(over.train.seed == 777);

    setenv("WEAKSEG_SEED", "12x", 1);
    CHECK_THROWS_AS(apply_env_seed(cfg), ConfigError);
    unsetenv("WEAKSEG_SEED");
}
