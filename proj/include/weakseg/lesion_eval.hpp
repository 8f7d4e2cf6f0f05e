#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "weakseg/phantom.hpp"
#include "weakseg/scribble.hpp"
#include "weakseg/volume.hpp"

namespace weakseg {

// 4x4 counts over the cancer grades {GS 6, GS 3+4, GS 4+3, GS >= 8};
// rows are truth, columns prediction.
struct ConfusionMatrix4 {
    std::array<std::array<std::int64_t, 4>, 4> counts{};

    std::int64_t total() const;
    void add(ClassId truth_cls, ClassId pred_cls);  // cancer ClassIds (2..5)
    ConfusionMatrix4 transposed() const;
};

// detection confidence of an extracted lesion
enum class ScoreMode { MeanForeground, MaxForeground };
// whose volume the 10%-overlap fraction refers to
enum class OverlapDenominator { Pred, Truth };
// whether missed truth lesions enter the grade confusion as GS 6 reports
enum class ConfusionMode { MatchedOnly, MissAsGS6 };

// Connected components of the cancer labels {2..5} under the 26-neighborhood,
// components below min_voxels dropped. Grade = majority vote over voxel
// labels, ties to the more aggressive class; score = mean (or max) of
// 1 - background probability over the component; volume from the probability
// volume's spacing.
std::vector<LesionRecord> extract_lesions(const LabelMap& labels, const Volume& probs,
                                          int min_voxels = 26,
                                          ScoreMode score_mode = ScoreMode::MeanForeground);

// Ground-truth lesions from a reference label map: the same connected
// components, but with no size filter, score pinned to 1.0, and volume from
// the given spacing.
std::vector<LesionRecord> truth_lesions(const LabelMap& labels,
                                        const std::array<double, 2>& in_plane_spacing_mm = {1, 1},
                                        double slice_thickness_mm = 1.0);

// A prediction is a true positive iff its overlap with some truth lesion
// reaches min_overlap_frac of the denominator lesion's volume. Each truth
// lesion is assigned at most one prediction: largest overlap, ties to the
// higher score, then to the lower prediction index. false_positives are
// predictions that qualified against no truth at all; missed_truths are
// truths with no qualifying prediction.
struct MatchResult {
    struct Pair {
        int pred_index;
        int truth_index;
        std::int64_t overlap_voxels;
    };
    std::vector<Pair> matches;
    std::vector<int> false_positives;
    std::vector<int> missed_truths;
};

MatchResult match_lesions(const std::vector<LesionRecord>& pred,
                          const std::vector<LesionRecord>& truth,
                          double min_overlap_frac = 0.10,
                          OverlapDenominator denom = OverlapDenominator::Pred);

// kappa = 1 - sum(w o) / sum(w e), w_ij = (i-j)^2 / 9; undefined (throws
// std::domain_error) when the expected disagreement is zero, i.e. all mass
// sits in one class for both raters.
double quadratic_kappa(const ConfusionMatrix4& cm);

// One count per matched (truth grade, predicted grade) pair; MissAsGS6 also
// counts every missed truth lesion as reported GS 6.
ConfusionMatrix4 grade_confusion(const MatchResult& m, const std::vector<LesionRecord>& pred,
                                 const std::vector<LesionRecord>& truth, ConfusionMode mode);

struct FrocPoint {
    double fp_per_patient;
    double sensitivity;
};

struct FrocCurve {
    std::vector<FrocPoint> points;  // one per threshold, in sweep order
};

// One evaluation scene: a patient's predicted and ground-truth lesions.
struct PatientLesions {
    std::vector<LesionRecord> pred;
    std::vector<LesionRecord> truth;
};

// Sweeps the descending thresholds: keep predictions with score >= t, match,
// record (total FPs / n_patients, matched truths / total truths).
FrocCurve froc(const std::vector<PatientLesions>& patients,
               const std::vector<double>& thresholds, double min_overlap_frac = 0.10,
               OverlapDenominator denom = OverlapDenominator::Pred);

// Linear interpolation of the curve at the given FP/patient abscissa,
// clamped to the curve's endpoints outside its range.
double sensitivity_at_fp(const FrocCurve& curve, double fp = 2.0);

// ProstateX-2-style grading: the cluster containing the lesion center decides
// the grade; centers outside every cluster are reported GS 6.
ClassId devente_assign_one(const std::array<int, 3>& center,
                           const std::vector<LesionRecord>& pred);
std::vector<ClassId> devente_assign(const std::vector<CentroidAnnotation>& centers,
                                    const std::vector<LesionRecord>& pred);

// voxels with label in [lo, hi], sorted (slice, row, col)
std::vector<std::array<int, 3>> label_voxels(const LabelMap& m, ClassId lo, ClassId hi);

// Dice overlap of two sorted voxel sets; both empty -> 1.0.
double dice(const std::vector<std::array<int, 3>>& a, const std::vector<std::array<int, 3>>& b);

// Two-sided Wilcoxon signed-rank p-value via the tie-corrected normal
// approximation; zero differences are dropped. Throws std::domain_error when
// every difference is zero.
double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

// ---- reporting -------------------------------------------------------------

// Both kappa modes and both overlap-denominator readings are carried side by
// side so the choice never hides in a single number. The centroid protocol
// reports kappa alone; the detection fields stay at their defaults and are
// omitted from the file. Undefined metrics are NaN in memory and null in JSON.
struct EvalReport {
    std::string protocol = "private";            // "private" | "centroid"
    double kappa = 0.0;                          // MissAsGS6 / De Vente assignment
    double kappa_matched_only = 0.0;
    double sensitivity_at_2fp = 0.0;             // pred-denominator matching
    double sensitivity_at_2fp_truth_denom = 0.0;
    double dice_prostate = 0.0;
    FrocCurve froc;                              // pred-denominator sweep
    ConfusionMatrix4 confusion;                  // MissAsGS6 counts
};

void write_eval_report(const EvalReport& report, const std::string& path);
EvalReport read_eval_report(const std::string& path);
void write_froc_csv(const FrocCurve& curve, const std::string& path);
void write_froc_svg(const FrocCurve& curve, const std::string& path);

}  // namespace weakseg
