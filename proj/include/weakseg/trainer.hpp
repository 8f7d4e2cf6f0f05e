#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "weakseg/losses.hpp"
#include "weakseg/phantom.hpp"
#include "weakseg/scribble.hpp"
#include "weakseg/unet.hpp"

namespace weakseg {

// The three training regimes of the ablation: full dense supervision,
// scribble partial CE alone, and partial CE plus the tag size constraint.
enum class Regime { FullySupervised, PartialCE, PartialCETags };

const char* regime_name(Regime r);
Regime parse_regime(const std::string& name);  // "supervised" | "partial-ce" | "partial-ce-tags"

struct TrainConfig {
    Regime regime = Regime::PartialCETags;
    double lr0 = 1e-3;
    double lr_decay = 0.5;
    int plateau_patience_epochs = 25;
    double plateau_min_delta = 1e-4;  // strict improvement threshold
    double l2_gamma = 1e-4;
    int batch_size = 32;
    int max_epochs = 60;
    std::uint64_t seed = 0;
    int folds = 5;
    int replicates = 4;
    bool augment = true;
    WeakLossConfig loss;

    void validate() const;
    // PartialCE is PartialCETags with lambda forced to 0.
    WeakLossConfig effective_loss() const;
};

struct Fold {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

struct FoldSplit {
    std::vector<Fold> folds;
};

// Greedy balanced k-fold split: patients sorted by descending total lesion
// count (ties by id) are assigned one by one to the fold that minimizes the
// per-class lesion-count variance across folds; remaining ties go to the fold
// with the fewest patients, then the lowest index. The assignment is fully
// deterministic; seed is accepted for interface stability but unused.
FoldSplit make_folds(const Manifest& manifest, int k = 5, std::uint64_t seed = 0);

// ---- slice samples and augmentation ---------------------------------------

// One 2D training sample: image channels plus both supervision forms
// (dense labels for the supervised regime, scribbles + tags for the weak
// ones). Entry coordinates are slice-local (slice field 0).
struct TrainingSlice {
    Tensor image;  // (channels, rows, cols)
    std::vector<ClassId> labels;
    std::vector<AnnotationEntry> entries;
    TagBounds tags;
};

// Horizontal flip, rotation about the slice center, then translation.
// Images are resampled bilinearly, labels nearest-neighbor, and scribble
// points mapped forward and rounded; anything leaving the frame is dropped
// (zero / background fill on the way in). Tags are recomputed afterwards.
struct SliceTransform {
    bool hflip = false;
    double angle_deg = 0.0;
    double dy_px = 0.0;
    double dx_px = 0.0;

    // flip p=0.5, angle uniform in ±10°, translation uniform in ±5 px
    static SliceTransform sample(Rng& rng);

    // forward map of a point, (row, col) -> (row, col)
    std::array<double, 2> forward(double row, double col, int rows, int cols) const;
    std::array<double, 2> inverse(double row, double col, int rows, int cols) const;
};

TrainingSlice apply_transform(const TrainingSlice& s, const SliceTransform& t);
TrainingSlice augment(const TrainingSlice& s, Rng& rng);

// ---- dataset ---------------------------------------------------------------

// In-memory patient with preprocessed (normalized) image channels.
struct PatientData {
    std::string id;
    Volume image;
    LabelMap truth;
    AnnotationMask scribbles;
};

using Dataset = std::vector<PatientData>;

// Reads volumes, label maps, and annotation masks referenced by the manifest
// (paths resolved against data_dir; scribbles looked up as
// annotations_dir/<id>.json) and normalizes intensities.
Dataset load_dataset(const Manifest& manifest, const std::string& data_dir,
                     const std::string& annotations_dir);

const PatientData& find_patient(const Dataset& data, const std::string& id);

// Slices of this patient that enter training batches: every slice when fully
// supervised, only annotated slices for the weak regimes.
std::vector<int> training_slices(const PatientData& p, Regime regime);

TrainingSlice make_training_slice(const PatientData& p, int slice);

// ---- optimization ----------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;

    static AdamState init(const UNet& model);
};

// One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) of theta in place;
// t is the 1-based step count after increment.
void adam_update(Tensor& theta, const Tensor& grad, Tensor& m, Tensor& v, std::int64_t t,
                 double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// One optimizer step on an assembled batch; returns the reported batch loss
// (regime data term plus gamma * sum(theta^2), evaluated at the pre-step
// parameters). Throws on non-finite activations.
double train_step(UNet& model, AdamState& opt, const std::vector<TrainingSlice>& batch,
                  const TrainConfig& cfg, double lr);

// Loss of a batch without any update (validation pass; running statistics).
double eval_loss(UNet& model, const std::vector<TrainingSlice>& batch, const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    UNet model;  // best-validation weights
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    bool diverged = false;
    std::string note;  // divergence diagnostic, empty otherwise
};

// Full training loop for one fold: shuffled slice batches with augmentation,
// Adam with L2 gamma * ||theta||^2 added to the loss, validation after each
// epoch, lr * lr_decay after plateau_patience_epochs epochs without val
// improvement (counter resets after each decay), best-validation checkpoint.
// A non-finite loss aborts with the last good checkpoint and a diagnostic in
// `note`.
TrainResult train(UNet model, const Dataset& data, const Fold& fold, const TrainConfig& cfg);

// epoch,train_loss,val_loss,lr
void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path);
std::vector<EpochRecord> read_history_csv(const std::string& path);

}  // namespace weakseg
