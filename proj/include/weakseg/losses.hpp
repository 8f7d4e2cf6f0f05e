#pragma once

#include <array>

#include "weakseg/scribble.hpp"
#include "weakseg/tape.hpp"
#include "weakseg/volume.hpp"

namespace weakseg {

struct WeakLossConfig {
    double lambda = 1e-5;
    // classes 1..5: prostate 0.12, each cancer class 0.22
    std::array<double, kNumClasses - 1> class_weights = {0.12, 0.22, 0.22, 0.22, 0.22};

    double weight(ClassId c) const { return class_weights[c - 1]; }
    void validate() const;
};

// Supervision of one 2D training sample: its scribble voxels (slice field
// ignored) and the slice's tag bounds.
struct WeakSliceTarget {
    std::vector<AnnotationEntry> entries;
    TagBounds tags;
};

// Mean negative log-probability of class c over its annotated voxels on one
// slice; 0 when the class has no annotations. Non-differentiable reference.
template <typename T>
T partial_ce(const TensorT<T>& probs /* (6,H,W) */,
             const std::vector<AnnotationEntry>& entries, ClassId c, T clamp_floor = T(1e-7));

// (V-a)^2 below a, (V-b)^2 above b, 0 inside [a,b]
double size_penalty(double v, double a, double b);

// The weak objective for a batch of slices, averaged over the batch:
// sum_c w_c * (partial CE of class c + lambda * size penalty of class c),
// background excluded. probs is (B,6,H,W) softmax output on the tape.
template <typename T>
Var weak_loss(TapeT<T>& tape, Var probs, const std::vector<WeakSliceTarget>& targets,
              const WeakLossConfig& cfg);

// Variant treating a whole volume as the constraint domain: one tag set, one
// size value per class summed over all slices. probs is (D,6,H,W).
template <typename T>
Var weak_loss_per_volume(TapeT<T>& tape, Var probs, const AnnotationMask& mask,
                         const WeakLossConfig& cfg);

// Fully-supervised baseline: weighted cross-entropy over all voxels (the
// background reuses the prostate weight) plus mean soft Dice loss over the
// classes present in the truth, smoothing 1. truth holds row-major (H*W)
// labels per sample.
template <typename T>
Var supervised_loss(TapeT<T>& tape, Var probs,
                    const std::vector<std::vector<ClassId>>& truth,
                    const WeakLossConfig& cfg);

extern template float partial_ce<float>(const TensorT<float>&,
                                        const std::vector<AnnotationEntry>&, ClassId, float);
extern template double partial_ce<double>(const TensorT<double>&,
                                          const std::vector<AnnotationEntry>&, ClassId, double);
extern template Var weak_loss<float>(TapeT<float>&, Var, const std::vector<WeakSliceTarget>&,
                                     const WeakLossConfig&);
extern template Var weak_loss<double>(TapeT<double>&, Var, const std::vector<WeakSliceTarget>&,
                                      const WeakLossConfig&);
extern template Var weak_loss_per_volume<float>(TapeT<float>&, Var, const AnnotationMask&,
                                                const WeakLossConfig&);
extern template Var weak_loss_per_volume<double>(TapeT<double>&, Var, const AnnotationMask&,
                                                 const WeakLossConfig&);
extern template Var supervised_loss<float>(TapeT<float>&, Var,
                                           const std::vector<std::vector<ClassId>>&,
                                           const WeakLossConfig&);
extern template Var supervised_loss<double>(TapeT<double>&, Var,
                                            const std::vector<std::vector<ClassId>>&,
                                            const WeakLossConfig&);

}  // namespace weakseg
