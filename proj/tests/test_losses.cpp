#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "weakseg/losses.hpp"

using namespace weakseg;

namespace {

// a direct, dense evaluation of Eq. (4) used as the oracle for the tape
// implementation
double oracle_weak_loss(const TensorT<double>& p, const std::vector<WeakSliceTarget>& targets,
                        const WeakLossConfig& cfg) {
    const int b_n = p.shape[0], h = p.shape[2], w = p.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    double total = 0.0;
    for (int b = 0; b < b_n; ++b) {
        for (ClassId c = kProstate; c <= kGs8plus; ++c) {
            double ce = 0.0;
            int n = 0;
            for (const auto& e : targets[b].entries) {
                if (e.cls != c) continue;
                const double pv =
                    p.values[((static_cast<std::int64_t>(b) * 6 + c) * h + e.row) * w + e.col];
                ce -= std::log(std::max(pv, 1e-7));
                n++;
            }
            if (n > 0) ce /= n;
            double vol = 0.0;
            const double* ptr = p.values.data() + (static_cast<std::int64_t>(b) * 6 + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) vol += ptr[i];
            const double a = targets[b].tags.a(c), bb = targets[b].tags.b(c);
            double pen = 0.0;
            if (vol < a) pen = (vol - a) * (vol - a);
            else if (vol > bb) pen = (vol - bb) * (vol - bb);
            total += cfg.weight(c) * (ce + cfg.lambda * pen);
        }
    }
    return total / b_n;
}

double oracle_supervised_loss(const TensorT<double>& p,
                              const std::vector<std::vector<ClassId>>& truth,
                              const WeakLossConfig& cfg) {
    const int b_n = p.shape[0], h = p.shape[2], w = p.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    double ce = 0.0;
    std::array<double, 6> inter{}, pred{}, mass{};
    for (int b = 0; b < b_n; ++b) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const ClassId y = truth[b][i];
            const double wy = y == kBackground ? cfg.weight(kProstate) : cfg.weight(y);
            const double py =
                p.values[(static_cast<std::int64_t>(b) * 6 + y) * plane + i];
            ce -= wy * std::log(std::max(py, 1e-7));
            mass[y] += 1.0;
            for (int c = 0; c < 6; ++c) {
                const double pc =
                    p.values[(static_cast<std::int64_t>(b) * 6 + c) * plane + i];
                pred[c] += pc;
                if (c == y) inter[c] += pc;
            }
        }
    }
    ce /= static_cast<double>(b_n) * plane;
    double dice = 0.0;
    int present = 0;
    for (int c = 0; c < 6; ++c) {
        if (mass[c] == 0.0) continue;
        dice += (2.0 * inter[c] + 1.0) / (pred[c] + mass[c] + 1.0);
        present++;
    }
    return ce + 1.0 - dice / present;
}

TensorT<double> random_softmax_field(std::vector<int> shape, Rng& rng) {
    auto logits = TensorT<double>::zeros(shape);
    for (auto& v : logits.values) v = rng.uniform(-2.0, 2.0);
    TapeT<double> t;
    return t.value(t.softmax_channels(t.input(std::move(logits))));
}

}  // namespace

TEST_CASE("size_penalty branch values") {
    CHECK(size_penalty(0.0, 1.0, 9216.0) == doctest::Approx(1.0));
    CHECK(size_penalty(5.0, 0.0, 0.0) == doctest::Approx(25.0));
    CHECK(size_penalty(100.0, 1.0, 9216.0) == 0.0);
    CHECK(size_penalty(1.0, 1.0, 9216.0) == 0.0);  // boundary included
    CHECK_THROWS_AS(size_penalty(1.0, 5.0, 2.0), std::invalid_argument);
}

TEST_CASE("partial_ce handles perfect, uniform, and empty cases") {
    TensorT<float> probs = TensorT<float>::full({6, 4, 4}, 1.0f / 6.0f);
    std::vector<AnnotationEntry> entries;
    for (int i = 0; i < 10; ++i) entries.push_back({0, i / 4, i % 4, kProstate});

    CHECK(partial_ce(probs, entries, kProstate) ==
          doctest::Approx(std::log(6.0)).epsilon(1e-5));
    CHECK(partial_ce(probs, entries, kGs6) == 0.0f);  // no annotations of that class

    TensorT<float> perfect = TensorT<float>::zeros({6, 4, 4});
    for (const auto& e : entries) perfect.values[(kProstate * 4 + e.row) * 4 + e.col] = 1.0f;
    CHECK(partial_ce(perfect, entries, kProstate) == 0.0f);
}

TEST_CASE("partial_ce on random probabilities matches a direct summation") {
    Rng rng(3);
    TensorT<double> probs = random_softmax_field({1, 6, 5, 5}, rng);
    TensorT<double> slice({6, 5, 5},
                          std::vector<double>(probs.values.begin(), probs.values.end()));
    std::vector<AnnotationEntry> entries = {
        {0, 0, 0, kGs6}, {0, 1, 3, kGs6}, {0, 2, 2, kGs6}, {0, 4, 4, kGs6}, {0, 3, 1, kGs6}};
    double direct = 0.0;
    for (const auto& e : entries)
        direct -= std::log(slice.values[(kGs6 * 5 + e.row) * 5 + e.col]);
    direct /= 5.0;
    CHECK(partial_ce(slice, entries, kGs6) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("weak_loss closed form: empty mask, uniform probabilities") {
    // all tags absent -> every class pays lambda * w_c * (|domain|/6)^2
    TapeT<double> tape;
    const int h = 12, w = 12;
    const Var probs = tape.input(TensorT<double>::full({1, 6, h, w}, 1.0 / 6.0));
    WeakLossConfig cfg;
    std::vector<WeakSliceTarget> targets(1);  // empty entries, all-absent tags
    const Var loss = weak_loss(tape, probs, targets, cfg);
    const double domain = h * w;
    double expected = 0.0;
    for (ClassId c = kProstate; c <= kGs8plus; ++c)
        expected += cfg.lambda * cfg.weight(c) * (domain / 6.0) * (domain / 6.0);
    CHECK(tape.value(loss).values[0] == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("weak_loss is zero for one-hot-correct predictions within bounds") {
    const int h = 8, w = 8;
    // truth: prostate block with one GS6 voxel
    std::vector<ClassId> truth(h * w, kBackground);
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) truth[y * w + x] = kProstate;
    truth[3 * w + 3] = kGs6;

    TensorT<double> p = TensorT<double>::zeros({1, 6, h, w});
    for (int i = 0; i < h * w; ++i) p.values[truth[i] * h * w + i] = 1.0;

    WeakSliceTarget target;
    target.entries = {{0, 2, 2, kProstate}, {0, 3, 3, kGs6}};
    target.tags.lower[kProstate - 1] = 1.0;
    target.tags.upper[kProstate - 1] = h * w;
    target.tags.lower[kGs6 - 1] = 1.0;
    target.tags.upper[kGs6 - 1] = h * w;

    TapeT<double> tape;
    const Var loss = weak_loss(tape, tape.input(std::move(p)), {target}, WeakLossConfig{});
    CHECK(tape.value(loss).values[0] == 0.0);
}

TEST_CASE("weak_loss on random data matches the direct Eq.(4) oracle") {
    Rng rng(17);
    const int b_n = 3, h = 7, w = 9;
    TensorT<double> p = random_softmax_field({b_n, 6, h, w}, rng);

    std::vector<WeakSliceTarget> targets(b_n);
    for (int b = 0; b < b_n; ++b) {
        const int n = 3 + static_cast<int>(rng.uniform_int(5));
        for (int i = 0; i < n; ++i) {
            const ClassId c = static_cast<ClassId>(1 + rng.uniform_int(5));
            targets[b].entries.push_back({0, static_cast<int>(rng.uniform_int(h)),
                                          static_cast<int>(rng.uniform_int(w)), c});
        }
        // mixed tags: some from the entries, one class deliberately absent
        for (const auto& e : targets[b].entries) {
            if (rng.bernoulli(0.7)) {
                targets[b].tags.lower[e.cls - 1] = 1.0;
                targets[b].tags.upper[e.cls - 1] = h * w;
            }
        }
    }
    const double expected = oracle_weak_loss(p, targets, WeakLossConfig{});

    TapeT<double> tape;
    const Var loss = weak_loss(tape, tape.input(p), targets, WeakLossConfig{});
    CHECK(tape.value(loss).values[0] == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("weak_loss batch mean equals the single-slice loss for duplicated slices") {
    Rng rng(23);
    TensorT<double> one = random_softmax_field({1, 6, 6, 6}, rng);
    TensorT<double> two = TensorT<double>::zeros({2, 6, 6, 6});
    std::copy(one.values.begin(), one.values.end(), two.values.begin());
    std::copy(one.values.begin(), one.values.end(), two.values.begin() + one.numel());

    WeakSliceTarget t;
    t.entries = {{0, 1, 1, kProstate}, {0, 4, 4, kGs43}};
    t.tags.lower[kProstate - 1] = 1.0;
    t.tags.upper[kProstate - 1] = 36.0;

    TapeT<double> tape1, tape2;
    const double l1 =
        tape1.value(weak_loss(tape1, tape1.input(one), {t}, WeakLossConfig{})).values[0];
    const double l2 =
        tape2.value(weak_loss(tape2, tape2.input(two), {t, t}, WeakLossConfig{})).values[0];
    CHECK(l2 == doctest::Approx(l1).epsilon(1e-12));
}

TEST_CASE("weak_loss CE term ignores unannotated voxels") {
    // perturbing an unannotated voxel moves the loss only through the size
    // term (this is the degeneracy the tag constraint fixes)
    Rng rng(29);
    TensorT<double> p = random_softmax_field({1, 6, 6, 6}, rng);
    std::vector<WeakSliceTarget> targets(1);
    targets[0].entries = {{0, 0, 0, kProstate}};
    targets[0].tags.lower[kProstate - 1] = 1.0;
    targets[0].tags.upper[kProstate - 1] = 36.0;
    WeakLossConfig cfg;

    auto size_term = [&](const TensorT<double>& field) {
        double acc = 0.0;
        for (ClassId c = kProstate; c <= kGs8plus; ++c) {
            double v = 0.0;
            for (int i = 0; i < 36; ++i) v += field.values[c * 36 + i];
            acc += cfg.weight(c) *
                   cfg.lambda * size_penalty(v, targets[0].tags.a(c), targets[0].tags.b(c));
        }
        return acc;
    };
    auto eval = [&](const TensorT<double>& field) {
        TapeT<double> tape;
        return tape.value(weak_loss(tape, tape.input(field), targets, cfg)).values[0];
    };

    TensorT<double> perturbed = p;
    // unannotated voxel (5,5): shift mass between classes 2 and 3
    perturbed.values[2 * 36 + 35] += 0.05;
    perturbed.values[3 * 36 + 35] -= 0.05;
    const double delta_loss = eval(perturbed) - eval(p);
    const double delta_size = size_term(perturbed) - size_term(p);
    CHECK(delta_loss == doctest::Approx(delta_size).epsilon(1e-9));
    CHECK(delta_loss != 0.0);  // the size term does see it
}

TEST_CASE("weak_loss gradient agrees with finite differences") {
    Rng rng(41);
    TensorT<double> logits = TensorT<double>::zeros({2, 6, 4, 4});
    for (auto& v : logits.values) v = rng.uniform(-1.5, 1.5);
    std::vector<WeakSliceTarget> targets(2);
    targets[0].entries = {{0, 1, 1, kProstate}, {0, 2, 2, kGs6}};
    targets[0].tags.lower = {1, 1, 0, 0, 0};
    targets[0].tags.upper = {16, 16, 0, 0, 0};
    targets[1].entries = {{0, 0, 3, kGs8plus}};
    targets[1].tags.lower = {0, 0, 0, 0, 1};
    targets[1].tags.upper = {0, 0, 0, 0, 16};
    // inflate lambda so the size term contributes visibly to the gradient
    WeakLossConfig cfg;
    cfg.lambda = 1e-2;
    auto f = [&](TapeT<double>& t, Var xi) {
        return weak_loss(t, t.softmax_channels(xi), targets, cfg);
    };
    const auto rep = grad_check<double>(f, logits, 1e-5);
    CHECK(rep.flagged.empty());
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("weak_loss_per_volume matches a volume-wide direct evaluation") {
    Rng rng(47);
    const int d = 3, h = 5, w = 5;
    TensorT<double> p = random_softmax_field({d, 6, h, w}, rng);

    AnnotationMask mask;
    mask.domain_shape = {d, h, w};
    mask.entries = {{0, 1, 1, kProstate}, {1, 2, 2, kProstate}, {2, 3, 3, kGs34}};
    WeakLossConfig cfg;

    // direct: CE normalized volume-wide per class, one size value per class
    double expected = 0.0;
    const std::int64_t plane = h * w;
    const TagBounds tags = tags_from_annotation(mask, d * plane);
    for (ClassId c = kProstate; c <= kGs8plus; ++c) {
        double ce = 0.0;
        int n = 0;
        for (const auto& e : mask.entries) {
            if (e.cls != c) continue;
            ce -= std::log(
                p.values[((static_cast<std::int64_t>(e.slice) * 6 + c) * h + e.row) * w + e.col]);
            n++;
        }
        if (n > 0) ce /= n;
        double vol = 0.0;
        for (int dd = 0; dd < d; ++dd)
            for (std::int64_t i = 0; i < plane; ++i)
                vol += p.values[(static_cast<std::int64_t>(dd) * 6 + c) * plane + i];
        expected += cfg.weight(c) * (ce + cfg.lambda * size_penalty(vol, tags.a(c), tags.b(c)));
    }

    TapeT<double> tape;
    const Var loss = weak_loss_per_volume(tape, tape.input(p), mask, cfg);
    CHECK(tape.value(loss).values[0] == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("softmax mass conservation bounds the size values") {
    Rng rng(53);
    TensorT<double> p = random_softmax_field({2, 6, 8, 8}, rng);
    for (int b = 0; b < 2; ++b) {
        double total = 0.0;
        for (std::int64_t i = 0; i < 6 * 64; ++i) total += p.values[b * 6 * 64 + i];
        CHECK(total == doctest::Approx(64.0).epsilon(1e-3));
    }
}

TEST_CASE("supervised_loss: one-hot predictions give (near) zero") {
    const int h = 6, w = 6;
    std::vector<ClassId> truth(h * w, kBackground);
    for (int i = 10; i < 20; ++i) truth[i] = kProstate;
    truth[15] = kGs43;
    TensorT<double> p = TensorT<double>::zeros({1, 6, h, w});
    for (int i = 0; i < h * w; ++i) p.values[truth[i] * h * w + i] = 1.0;

    TapeT<double> tape;
    const Var loss = supervised_loss(tape, tape.input(std::move(p)), {truth}, WeakLossConfig{});
    CHECK(tape.value(loss).values[0] == doctest::Approx(0.0).scale(1.0).epsilon(1e-3));
}

TEST_CASE("supervised_loss: uniform prediction on single-class truth") {
    const int h = 4, w = 4;
    std::vector<ClassId> truth(h * w, kProstate);
    TensorT<double> p = TensorT<double>::full({1, 6, h, w}, 1.0 / 6.0);
    WeakLossConfig cfg;

    TapeT<double> tape;
    const Var loss = supervised_loss(tape, tape.input(p), {truth}, cfg);
    const double n = h * w;
    const double ce = cfg.weight(kProstate) * std::log(6.0);
    const double dice = (2.0 * n / 6.0 + 1.0) / (n / 6.0 + n + 1.0);
    CHECK(tape.value(loss).values[0] == doctest::Approx(ce + 1.0 - dice).epsilon(1e-9));
}

TEST_CASE("supervised_loss on random data matches the direct oracle") {
    Rng rng(61);
    const int b_n = 2, h = 5, w = 7;
    TensorT<double> p = random_softmax_field({b_n, 6, h, w}, rng);
    std::vector<std::vector<ClassId>> truth(b_n, std::vector<ClassId>(h * w, kBackground));
    for (int b = 0; b < b_n; ++b)
        for (int i = 0; i < h * w; ++i)
            if (rng.bernoulli(0.4)) truth[b][i] = static_cast<ClassId>(1 + rng.uniform_int(5));

    const double expected = oracle_supervised_loss(p, truth, WeakLossConfig{});
    TapeT<double> tape;
    const Var loss = supervised_loss(tape, tape.input(p), truth, WeakLossConfig{});
    CHECK(tape.value(loss).values[0] == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("supervised_loss gradient agrees with finite differences") {
    Rng rng(67);
    TensorT<double> logits = TensorT<double>::zeros({1, 6, 4, 4});
    for (auto& v : logits.values) v = rng.uniform(-1.0, 1.0);
    std::vector<std::vector<ClassId>> truth(1, std::vector<ClassId>(16, kBackground));
    for (int i = 4; i < 10; ++i) truth[0][i] = kProstate;
    truth[0][7] = kGs6;
    auto f = [&](TapeT<double>& t, Var xi) {
        return supervised_loss(t, t.softmax_channels(xi), truth, WeakLossConfig{});
    };
    const auto rep = grad_check<double>(f, logits, 1e-5);
    CHECK(rep.flagged.empty());
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("config validation") {
    WeakLossConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.lambda = 0.0;  // the partial-CE-only ablation
    CHECK_NOTHROW(cfg.validate());
    cfg.lambda = -1e-5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = WeakLossConfig{};
    cfg.class_weights[2] = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
