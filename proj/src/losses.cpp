#include "weakseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace weakseg {

void WeakLossConfig::validate() const {
    // lambda = 0 is the partial-CE-only ablation; only negative values are invalid
    if (lambda < 0.0) throw std::invalid_argument("WeakLossConfig: lambda must be non-negative");
    for (double w : class_weights)
        if (w <= 0.0)
            throw std::invalid_argument("WeakLossConfig: class weights must be positive");
}

template <typename T>
T partial_ce(const TensorT<T>& probs, const std::vector<AnnotationEntry>& entries, ClassId c,
             T clamp_floor) {
    if (probs.shape.size() != 3 || probs.shape[0] != kNumClasses)
        throw std::invalid_argument("partial_ce: expected (6,H,W), got " + probs.shape_str());
    const int H = probs.shape[1], W = probs.shape[2];
    T acc = T(0);
    std::int64_t n = 0;
    for (const auto& e : entries) {
        if (e.cls != c) continue;
        if (e.row < 0 || e.row >= H || e.col < 0 || e.col >= W)
            throw std::invalid_argument("partial_ce: annotation outside the slice");
        const T p = probs.values[(static_cast<std::int64_t>(c) * H + e.row) * W + e.col];
        acc -= std::log(std::max(p, clamp_floor));
        n++;
    }
    return n == 0 ? T(0) : acc / static_cast<T>(n);
}

double size_penalty(double v, double a, double b) {
    if (a > b) throw std::invalid_argument("size_penalty: lower bound exceeds upper bound");
    if (v < a) return (v - a) * (v - a);
    if (v > b) return (v - b) * (v - b);
    return 0.0;
}

namespace {

template <typename T>
void require_probs_shape(const TensorT<T>& p, std::size_t batch, const char* op) {
    if (p.shape.size() != 4 || p.shape[1] != kNumClasses)
        throw std::invalid_argument(std::string(op) + ": expected (B,6,H,W), got " +
                                    p.shape_str());
    if (static_cast<std::size_t>(p.shape[0]) != batch)
        throw std::invalid_argument(std::string(op) + ": batch size " +
                                    std::to_string(p.shape[0]) + " does not match " +
                                    std::to_string(batch) + " targets");
}

}  // namespace

template <typename T>
Var weak_loss(TapeT<T>& tape, Var probs, const std::vector<WeakSliceTarget>& targets,
              const WeakLossConfig& cfg) {
    cfg.validate();
    const auto& P = tape.value(probs);
    require_probs_shape(P, targets.size(), "weak_loss");
    const int B = P.shape[0], H = P.shape[2], W = P.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const T inv_b = T(1) / static_cast<T>(B);

    // partial CE, Eq. (2): coefficients w_c / (B * |annotated_c|) at
    // annotated voxels fold the per-class normalizer and class weight into
    // one constant map
    TensorT<T> coeff = TensorT<T>::zeros(P.shape);
    for (int b = 0; b < B; ++b) {
        std::array<std::int64_t, kNumClasses> per_class{};
        for (const auto& e : targets[b].entries) {
            if (e.cls == kBackground)
                throw std::invalid_argument("weak_loss: background scribbles are not allowed");
            if (e.row < 0 || e.row >= H || e.col < 0 || e.col >= W)
                throw std::invalid_argument("weak_loss: annotation outside the slice");
            per_class[e.cls]++;
        }
        for (const auto& e : targets[b].entries) {
            const T w = static_cast<T>(cfg.weight(e.cls)) * inv_b /
                        static_cast<T>(per_class[e.cls]);
            coeff.values[((static_cast<std::int64_t>(b) * kNumClasses + e.cls) * H + e.row) * W +
                         e.col] = w;
        }
    }
    const Var ce = tape.mul_const(
        tape.sum(tape.mul(tape.log_clamped(probs, T(1e-7)), tape.input(std::move(coeff)))),
        T(-1));

    // size term, Eq. (3): V_c per sample vs the slice's tag bounds
    TensorT<T> lo = TensorT<T>::zeros({B, kNumClasses});
    TensorT<T> hi = TensorT<T>::zeros({B, kNumClasses});
    TensorT<T> wt = TensorT<T>::zeros({B, kNumClasses});
    for (int b = 0; b < B; ++b) {
        lo.values[b * kNumClasses] = T(0);  // background: vacuous bounds, zero weight
        hi.values[b * kNumClasses] = static_cast<T>(plane);
        for (ClassId c = kProstate; c <= kGs8plus; ++c) {
            lo.values[b * kNumClasses + c] = static_cast<T>(targets[b].tags.a(c));
            hi.values[b * kNumClasses + c] = static_cast<T>(targets[b].tags.b(c));
            wt.values[b * kNumClasses + c] =
                static_cast<T>(cfg.lambda * cfg.weight(c)) * inv_b;
        }
    }
    const Var v = tape.sum_spatial(probs);
    const Var pen = tape.size_bound_penalty(v, lo, hi);
    const Var size_term = tape.sum(tape.mul(pen, tape.input(std::move(wt))));
    return tape.add(ce, size_term);
}

template <typename T>
Var weak_loss_per_volume(TapeT<T>& tape, Var probs, const AnnotationMask& mask,
                         const WeakLossConfig& cfg) {
    cfg.validate();
    const auto& P = tape.value(probs);
    if (P.shape.size() != 4 || P.shape[1] != kNumClasses)
        throw std::invalid_argument("weak_loss_per_volume: expected (D,6,H,W), got " +
                                    P.shape_str());
    const int D = P.shape[0], H = P.shape[2], W = P.shape[3];
    if (mask.domain_shape.slices != D || mask.domain_shape.rows != H ||
        mask.domain_shape.cols != W)
        throw std::invalid_argument("weak_loss_per_volume: mask domain " +
                                    TensorT<T>::shape_str({mask.domain_shape.slices,
                                                           mask.domain_shape.rows,
                                                           mask.domain_shape.cols}) +
                                    " does not match probs " + P.shape_str());
    const std::int64_t domain = static_cast<std::int64_t>(D) * H * W;

    // volume-wide per-class CE normalizers
    std::array<std::int64_t, kNumClasses> per_class{};
    for (const auto& e : mask.entries) {
        if (e.cls == kBackground)
            throw std::invalid_argument(
                "weak_loss_per_volume: background scribbles are not allowed");
        per_class[e.cls]++;
    }
    TensorT<T> coeff = TensorT<T>::zeros(P.shape);
    for (const auto& e : mask.entries) {
        const T w = static_cast<T>(cfg.weight(e.cls)) / static_cast<T>(per_class[e.cls]);
        coeff.values[((static_cast<std::int64_t>(e.slice) * kNumClasses + e.cls) * H + e.row) *
                         W +
                     e.col] = w;
    }
    const Var ce = tape.mul_const(
        tape.sum(tape.mul(tape.log_clamped(probs, T(1e-7)), tape.input(std::move(coeff)))),
        T(-1));

    const TagBounds tags = tags_from_annotation(mask, domain);
    const Var v_per_slice = tape.sum_spatial(probs);  // (D,6)
    Var total = ce;
    for (ClassId c = kProstate; c <= kGs8plus; ++c) {
        // select class-c column and reduce over slices
        TensorT<T> sel = TensorT<T>::zeros({D, kNumClasses});
        for (int d = 0; d < D; ++d) sel.values[d * kNumClasses + c] = T(1);
        const Var v_c = tape.sum(tape.mul(v_per_slice, tape.input(std::move(sel))));
        const Var pen = tape.size_bound_penalty(v_c, TensorT<T>::scalar(static_cast<T>(tags.a(c))),
                                                TensorT<T>::scalar(static_cast<T>(tags.b(c))));
        total = tape.add(total,
                         tape.mul_const(pen, static_cast<T>(cfg.lambda * cfg.weight(c))));
    }
    return total;
}

template <typename T>
Var supervised_loss(TapeT<T>& tape, Var probs, const std::vector<std::vector<ClassId>>& truth,
                    const WeakLossConfig& cfg) {
    cfg.validate();
    const auto& P = tape.value(probs);
    require_probs_shape(P, truth.size(), "supervised_loss");
    const int B = P.shape[0], H = P.shape[2], W = P.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;

    // the background has no weight in the weak objective; the baseline
    // reuses the prostate weight for it
    std::array<T, kNumClasses> w{};
    w[kBackground] = static_cast<T>(cfg.weight(kProstate));
    for (ClassId c = kProstate; c <= kGs8plus; ++c) w[c] = static_cast<T>(cfg.weight(c));

    TensorT<T> coeff = TensorT<T>::zeros(P.shape);
    TensorT<T> onehot = TensorT<T>::zeros(P.shape);
    std::array<std::int64_t, kNumClasses> class_mass{};
    const T inv_n = T(1) / static_cast<T>(static_cast<std::int64_t>(B) * plane);
    for (int b = 0; b < B; ++b) {
        if (static_cast<std::int64_t>(truth[b].size()) != plane)
            throw std::invalid_argument("supervised_loss: truth raster size mismatch");
        for (std::int64_t p = 0; p < plane; ++p) {
            const ClassId y = truth[b][p];
            if (y >= kNumClasses)
                throw std::invalid_argument("supervised_loss: label out of range");
            const std::int64_t idx =
                (static_cast<std::int64_t>(b) * kNumClasses + y) * plane + p;
            coeff.values[idx] = w[y] * inv_n;
            onehot.values[idx] = T(1);
            class_mass[y]++;
        }
    }
    const Var ce = tape.mul_const(
        tape.sum(tape.mul(tape.log_clamped(probs, T(1e-7)), tape.input(std::move(coeff)))),
        T(-1));

    // soft Dice per class over the whole batch, smoothing 1
    const Var inter = tape.sum_spatial(tape.mul(probs, tape.input(std::move(onehot))));
    const Var pred_mass = tape.sum_spatial(probs);  // (B,6)
    Var dice_acc = -1;
    int present = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        if (class_mass[c] == 0) continue;
        TensorT<T> sel = TensorT<T>::zeros({B, kNumClasses});
        for (int b = 0; b < B; ++b) sel.values[b * kNumClasses + c] = T(1);
        const Var sel_v = tape.input(std::move(sel));
        const Var i_c = tape.sum(tape.mul(inter, sel_v));
        const Var s_c = tape.sum(tape.mul(pred_mass, sel_v));
        const Var num = tape.add_const(tape.mul_const(i_c, T(2)), T(1));
        const Var den = tape.add_const(s_c, static_cast<T>(class_mass[c]) + T(1));
        const Var dice_c = tape.div(num, den);
        dice_acc = present == 0 ? dice_c : tape.add(dice_acc, dice_c);
        present++;
    }
    const Var dice_loss =
        tape.add_const(tape.mul_const(dice_acc, T(-1) / static_cast<T>(present)), T(1));
    return tape.add(ce, dice_loss);
}

template float partial_ce<float>(const TensorT<float>&, const std::vector<AnnotationEntry>&,
                                 ClassId, float);
template double partial_ce<double>(const TensorT<double>&, const std::vector<AnnotationEntry>&,
                                   ClassId, double);
template Var weak_loss<float>(TapeT<float>&, Var, const std::vector<WeakSliceTarget>&,
                              const WeakLossConfig&);
template Var weak_loss<double>(TapeT<double>&, Var, const std::vector<WeakSliceTarget>&,
                               const WeakLossConfig&);
template Var weak_loss_per_volume<float>(TapeT<float>&, Var, const AnnotationMask&,
                                         const WeakLossConfig&);
template Var weak_loss_per_volume<double>(TapeT<double>&, Var, const AnnotationMask&,
                                          const WeakLossConfig&);
template Var supervised_loss<float>(TapeT<float>&, Var,
                                    const std::vector<std::vector<ClassId>>&,
                                    const WeakLossConfig&);
template Var supervised_loss<double>(TapeT<double>&, Var,
                                     const std::vector<std::vector<ClassId>>&,
                                     const WeakLossConfig&);

}  // namespace weakseg
