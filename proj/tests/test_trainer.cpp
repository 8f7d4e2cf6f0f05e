#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "weakseg/trainer.hpp"

using namespace weakseg;

namespace {

Manifest uniform_manifest(int n_patients, int lesions_each, ClassId cls) {
    Manifest m;
    for (int i = 0; i < n_patients; ++i) {
        ManifestPatient p;
        char id[16];
        std::snprintf(id, sizeof(id), "p%04d", i);
        p.id = id;
        for (int l = 0; l < lesions_each; ++l)
            p.lesions.push_back({cls, {0, 0, 0}, 100, Zone::PZ});
        m.patients.push_back(std::move(p));
    }
    return m;
}

// small synthetic patient: gland disk with one lesion square, scribbles on
// the gland slices
PatientData make_test_patient(const std::string& id, std::uint64_t salt) {
    const int D = 6, H = 16, W = 16;
    PatientData p;
    p.id = id;
    p.image = Volume::zeros(2, D, H, W);
    p.truth = LabelMap::zeros(D, H, W);
    p.scribbles.domain_shape = {D, H, W};

    Rng rng(salt);
    for (int d = 1; d <= 4; ++d) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double r = std::hypot(y - 7.5, x - 7.5);
                if (r <= 5.0) p.truth.at(d, y, x) = kProstate;
            }
        if (d == 2 || d == 3)
            for (int y = 6; y <= 8; ++y)
                for (int x = 6; x <= 8; ++x) p.truth.at(d, y, x) = kGs6;
    }
    for (int c = 0; c < 2; ++c)
        for (int d = 0; d < D; ++d)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const ClassId l = p.truth.at(d, y, x);
                    const float base = l == kBackground ? 0.2f : (l == kProstate ? 0.6f : 0.9f);
                    p.image.at(c, d, y, x) =
                        base + 0.05f * static_cast<float>(rng.uniform()) + 0.01f * c;
                }
    for (int d = 1; d <= 4; ++d) {
        p.scribbles.entries.push_back({d, 11, 7, kProstate});
        if (d == 2 || d == 3) p.scribbles.entries.push_back({d, 7, 7, kGs6});
    }
    p.scribbles.sort_entries();
    return p;
}

Dataset make_test_dataset() {
    Dataset data;
    data.push_back(make_test_patient("t0", 11));
    data.push_back(make_test_patient("t1", 22));
    data.push_back(make_test_patient("t2", 33));
    data.push_back(make_test_patient("t3", 44));
    return data;
}

Fold test_fold() {
    return {{"t0", "t1", "t2"}, {"t3"}};
}

TrainConfig quick_config(Regime regime) {
    TrainConfig cfg;
    cfg.regime = regime;
    cfg.batch_size = 4;
    cfg.max_epochs = 3;
    cfg.augment = false;
    cfg.seed = 5;
    return cfg;
}

UNet tiny_model(std::uint64_t seed) {
    UNetConfig mc;
    mc.base_width = 2;
    Rng rng(seed);
    return UNet::build(mc, rng);
}

TrainingSlice sample_slice(std::uint64_t seed) {
    Dataset data;
    data.push_back(make_test_patient("s", seed));
    return make_training_slice(data[0], 2);
}

double strict_best(const std::vector<EpochRecord>& history, int* best_epoch) {
    double best = std::numeric_limits<double>::infinity();
    *best_epoch = 0;
    for (const auto& r : history)
        if (r.val_loss < best - 1e-4) {
            best = r.val_loss;
            *best_epoch = r.epoch;
        }
    return best;
}

}  // namespace

TEST_CASE("regime names round-trip and unknown names are rejected") {
    CHECK(parse_regime("supervised") == Regime::FullySupervised);
    CHECK(parse_regime("partial-ce") == Regime::PartialCE);
    CHECK(parse_regime("partial-ce-tags") == Regime::PartialCETags);
    for (Regime r : {Regime::FullySupervised, Regime::PartialCE, Regime::PartialCETags})
        CHECK(parse_regime(regime_name(r)) == r);
    CHECK_THROWS_AS(parse_regime("dense"), ConfigError);
}

TEST_CASE("config validation and the PartialCE lambda override") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.lr0 == 1e-3);
    CHECK(cfg.lr_decay == 0.5);
    CHECK(cfg.plateau_patience_epochs == 25);
    CHECK(cfg.l2_gamma == 1e-4);
    CHECK(cfg.batch_size == 32);
    CHECK(cfg.folds == 5);
    CHECK(cfg.replicates == 4);

    cfg.regime = Regime::PartialCETags;
    CHECK(cfg.effective_loss().lambda == cfg.loss.lambda);
    cfg.regime = Regime::PartialCE;
    CHECK(cfg.effective_loss().lambda == 0.0);

    TrainConfig bad = cfg;
    bad.lr_decay = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.folds = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.l2_gamma = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("make_folds: five identical patients get one fold each") {
    const Manifest m = uniform_manifest(5, 1, kGs6);
    const FoldSplit split = make_folds(m, 5);
    REQUIRE(split.folds.size() == 5);
    std::set<std::string> seen;
    for (const auto& f : split.folds) {
        CHECK(f.val_ids.size() == 1);
        CHECK(f.train_ids.size() == 4);
        seen.insert(f.val_ids[0]);
        for (const auto& id : f.train_ids) CHECK(id != f.val_ids[0]);
    }
    CHECK(seen.size() == 5);
}

TEST_CASE("make_folds: ten single-GS6 patients split 2 per fold, 2 lesions per fold") {
    const Manifest m = uniform_manifest(10, 1, kGs6);
    const FoldSplit split = make_folds(m, 5);
    for (const auto& f : split.folds) {
        CHECK(f.val_ids.size() == 2);
        int gs6 = 0;
        for (const auto& id : f.val_ids)
            for (const auto& mp : m.patients)
                if (mp.id == id) gs6 += static_cast<int>(mp.lesions.size());
        CHECK(gs6 == 2);
    }
}

TEST_CASE("make_folds: greedy assignment matches the hand-traced order") {
    // patients a(3 GS6), b(2 GS6), c(1 GS6), d(1 GS3+4), e, f with k=2:
    // sorted a,b,c,d,e,f; greedy puts a,d,e in fold 0 and b,c,f in fold 1
    Manifest m;
    const auto add = [&](const std::string& id, int gs6, int gs34) {
        ManifestPatient p;
        p.id = id;
        for (int i = 0; i < gs6; ++i) p.lesions.push_back({kGs6, {0, 0, 0}, 50, Zone::PZ});
        for (int i = 0; i < gs34; ++i) p.lesions.push_back({kGs34, {0, 0, 0}, 50, Zone::PZ});
        m.patients.push_back(std::move(p));
    };
    add("f", 0, 0);
    add("d", 0, 1);
    add("b", 2, 0);
    add("a", 3, 0);
    add("e", 0, 0);
    add("c", 1, 0);

    const FoldSplit split = make_folds(m, 2);
    CHECK(split.folds[0].val_ids == std::vector<std::string>{"a", "d", "e"});
    CHECK(split.folds[1].val_ids == std::vector<std::string>{"b", "c", "f"});
    CHECK(split.folds[0].train_ids == std::vector<std::string>{"b", "c", "f"});

    // deterministic, and independent of the seed argument
    const FoldSplit again = make_folds(m, 2, 999);
    for (int f = 0; f < 2; ++f) {
        CHECK(again.folds[f].val_ids == split.folds[f].val_ids);
        CHECK(again.folds[f].train_ids == split.folds[f].train_ids);
    }
}

TEST_CASE("make_folds: phantom manifest of 40 patients balances classes within 2") {
    PhantomConfig cfg;
    cfg.n_patients = 40;
    cfg.seed = 17;
    Manifest m;
    m.config = cfg;
    Rng master(cfg.seed);
    for (int i = 0; i < cfg.n_patients; ++i) {
        Rng stream = master.child(static_cast<std::uint64_t>(i));
        PhantomSample s = generate_sample(cfg, i, stream);
        ManifestPatient p;
        p.id = s.patient_id;
        for (const auto& l : s.lesions)
            p.lesions.push_back({l.gleason_class, l.center,
                                 static_cast<std::int64_t>(l.voxels.size()), l.zone});
        m.patients.push_back(std::move(p));
    }

    const FoldSplit split = make_folds(m, 5);

    // exhaustive per-class count over the produced split
    std::array<std::array<int, kNumCancerClasses>, 5> counts{};
    std::set<std::string> seen;
    for (int f = 0; f < 5; ++f)
        for (const auto& id : split.folds[f].val_ids) {
            seen.insert(id);
            for (const auto& mp : m.patients)
                if (mp.id == id)
                    for (const auto& l : mp.lesions) ++counts[f][l.cls - kGs6];
        }
    CHECK(seen.size() == 40);
    for (int c = 0; c < kNumCancerClasses; ++c) {
        int lo = counts[0][c], hi = counts[0][c];
        for (int f = 1; f < 5; ++f) {
            lo = std::min(lo, counts[f][c]);
            hi = std::max(hi, counts[f][c]);
        }
        INFO("class index ", c, " min ", lo, " max ", hi);
        CHECK(hi - lo <= 2);
    }
}

TEST_CASE("make_folds rejects bad fold counts") {
    const Manifest m = uniform_manifest(4, 1, kGs6);
    CHECK_THROWS_AS(make_folds(m, 5), std::invalid_argument);
    CHECK_THROWS_AS(make_folds(m, 1), std::invalid_argument);
    CHECK_NOTHROW(make_folds(m, 4));
}

TEST_CASE("identity transform leaves a sample bit-identical") {
    const TrainingSlice s = sample_slice(7);
    REQUIRE(!s.entries.empty());
    const SliceTransform id{};
    const TrainingSlice out = apply_transform(s, id);
    CHECK(out.image.values == s.image.values);
    CHECK(out.labels == s.labels);
    CHECK(out.entries == s.entries);
    CHECK(out.tags.lower == s.tags.lower);
    CHECK(out.tags.upper == s.tags.upper);
}

TEST_CASE("horizontal flip maps column 10 of a width-96 slice to column 85") {
    SliceTransform t{};
    t.hflip = true;
    const auto fwd = t.forward(7.0, 10.0, 96, 96);
    CHECK(fwd[0] == doctest::Approx(7.0));
    CHECK(fwd[1] == doctest::Approx(85.0));

    TrainingSlice s;
    s.image = Tensor::zeros({1, 96, 96});
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x)
            s.image.values[static_cast<std::size_t>(y) * 96 + x] =
                static_cast<float>(y * 96 + x);
    s.labels.assign(96 * 96, kBackground);
    s.labels[7 * 96 + 10] = kGs43;
    s.entries.push_back({0, 7, 10, kGs43});
    s.tags.lower[kGs43 - 1] = 1.0;
    s.tags.upper[kGs43 - 1] = 96.0 * 96.0;

    const TrainingSlice out = apply_transform(s, t);
    REQUIRE(out.entries.size() == 1);
    CHECK(out.entries[0].row == 7);
    CHECK(out.entries[0].col == 85);
    CHECK(out.entries[0].cls == kGs43);
    CHECK(out.labels[7 * 96 + 85] == kGs43);
    CHECK(out.image.values[7 * 96 + 85] == s.image.values[7 * 96 + 10]);
    // flipping twice restores the original
    const TrainingSlice twice = apply_transform(out, t);
    CHECK(twice.image.values == s.image.values);
    CHECK(twice.entries == s.entries);
}

TEST_CASE("forward and inverse are mutually consistent") {
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        const SliceTransform t = SliceTransform::sample(rng);
        const double row = rng.uniform(0.0, 95.0), col = rng.uniform(0.0, 95.0);
        const auto fwd = t.forward(row, col, 96, 96);
        const auto back = t.inverse(fwd[0], fwd[1], 96, 96);
        CHECK(back[0] == doctest::Approx(row).epsilon(1e-12));
        CHECK(back[1] == doctest::Approx(col).epsilon(1e-12));
    }
    // sampled parameters respect the configured ranges
    Rng rng2(32);
    for (int i = 0; i < 200; ++i) {
        const SliceTransform t = SliceTransform::sample(rng2);
        CHECK(std::abs(t.angle_deg) <= 10.0);
        CHECK(std::abs(t.dy_px) <= 5.0);
        CHECK(std::abs(t.dx_px) <= 5.0);
    }
}

TEST_CASE("pure translation of a linear ramp is exact under bilinear resampling") {
    // image v(y, x) = y: bilinear interpolation reproduces the ramp shifted
    TrainingSlice s;
    const int H = 12, W = 10;
    s.image = Tensor::zeros({1, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            s.image.values[static_cast<std::size_t>(y) * W + x] = static_cast<float>(y);
    SliceTransform t{};
    t.dy_px = 1.5;
    const TrainingSlice out = apply_transform(s, t);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double sy = y - 1.5;
            const float expect = (sy < 0.0 || sy > H - 1) ? 0.0f : static_cast<float>(sy);
            CHECK(out.image.values[static_cast<std::size_t>(y) * W + x] ==
                  doctest::Approx(expect).epsilon(1e-6));
        }
}

TEST_CASE("90-degree rotation moves points as the convention says") {
    SliceTransform t{};
    t.angle_deg = 90.0;
    const auto p = t.forward(0.0, 2.0, 5, 5);  // top-center of a 5x5 grid
    CHECK(p[0] == doctest::Approx(2.0));
    CHECK(p[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("tag set survives any in-frame augmentation") {
    // entries near the center stay in-frame under |angle|<=10, |t|<=5
    TrainingSlice s;
    s.image = Tensor::zeros({2, 96, 96});
    for (std::size_t i = 0; i < s.image.values.size(); ++i)
        s.image.values[i] = static_cast<float>(i % 17) / 17.0f;
    s.labels.assign(96 * 96, kBackground);
    for (ClassId c = kProstate; c <= kGs8plus; ++c)
        s.entries.push_back({0, 44 + c, 40 + 3 * c, c});
    std::sort(s.entries.begin(), s.entries.end());
    s.tags.lower.fill(1.0);
    s.tags.upper.fill(96.0 * 96.0);

    Rng rng(77);
    for (int i = 0; i < 20; ++i) {
        const TrainingSlice out = augment(s, rng);
        CHECK(out.tags.lower == s.tags.lower);
        CHECK(out.tags.upper == s.tags.upper);
        CHECK(out.entries.size() == s.entries.size());
        // labels never invent classes
        for (ClassId l : out.labels) CHECK(l == kBackground);
    }
}

TEST_CASE("training_slices applies the regime slice rule") {
    const PatientData p = make_test_patient("x", 3);
    const std::vector<int> all = training_slices(p, Regime::FullySupervised);
    CHECK(all == std::vector<int>{0, 1, 2, 3, 4, 5});
    const std::vector<int> weak = training_slices(p, Regime::PartialCETags);
    CHECK(weak == std::vector<int>{1, 2, 3, 4});
    CHECK(training_slices(p, Regime::PartialCE) == weak);

    PatientData q = p;
    q.scribbles.annotated_slices = {4, 2, 3};
    q.scribbles.has_annotated_slices = true;
    CHECK(training_slices(q, Regime::PartialCETags) == std::vector<int>{2, 3, 4});
    CHECK(training_slices(q, Regime::FullySupervised) ==
          std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("make_training_slice extracts image, labels, scribbles, and tags") {
    const PatientData p = make_test_patient("x", 9);
    const TrainingSlice s = make_training_slice(p, 2);
    REQUIRE(s.image.shape == std::vector<int>{2, 16, 16});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                CHECK(s.image.values[(static_cast<std::size_t>(c) * 16 + y) * 16 + x] ==
                      p.image.at(c, 2, y, x));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            CHECK(s.labels[static_cast<std::size_t>(y) * 16 + x] == p.truth.at(2, y, x));
    REQUIRE(s.entries.size() == 2);  // prostate + GS6 scribbles on slice 2
    for (const auto& e : s.entries) CHECK(e.slice == 0);
    const TagBounds tags = tags_for_slice(p.scribbles, 2);
    CHECK(s.tags.lower == tags.lower);
    CHECK(s.tags.upper == tags.upper);
    CHECK(s.tags.a(kProstate) == 1.0);
    CHECK(s.tags.a(kGs6) == 1.0);
    CHECK(s.tags.a(kGs34) == 0.0);

    CHECK_THROWS_AS(make_training_slice(p, 6), std::invalid_argument);
}

TEST_CASE("adam_update follows the frozen single-parameter trajectory") {
    // minimizing theta^2 from theta=1 at lr=0.1; reference values computed
    // independently with 64-bit step arithmetic on 32-bit state
    Tensor theta = Tensor::full({1}, 1.0f);
    Tensor m = Tensor::zeros({1});
    Tensor v = Tensor::zeros({1});
    const double expect_theta[4] = {0.8999999761581421, 0.8004121780395508,
                                    0.7015862464904785, 0.6039390563964844};
    const double expect_m[4] = {0.20000000298023224, 0.35999998450279236, 0.48408243060112,
                                0.5759914517402649};
    for (int t = 1; t <= 4; ++t) {
        Tensor g = Tensor::full({1}, 2.0f * theta.values[0]);
        adam_update(theta, g, m, v, t, 0.1);
        CHECK(theta.values[0] == doctest::Approx(expect_theta[t - 1]).epsilon(5e-7));
        CHECK(m.values[0] == doctest::Approx(expect_m[t - 1]).epsilon(5e-7));
    }
    Tensor wrong = Tensor::zeros({2});
    CHECK_THROWS_AS(adam_update(theta, wrong, m, v, 5, 0.1), std::invalid_argument);
}

TEST_CASE("one small step on a frozen batch decreases the training loss") {
    std::vector<TrainingSlice> batch;
    batch.push_back(sample_slice(41));
    batch.push_back(sample_slice(42));
    batch.push_back(sample_slice(43));

    for (Regime regime : {Regime::FullySupervised, Regime::PartialCE}) {
        CAPTURE(regime_name(regime));
        UNet model = tiny_model(501);
        AdamState opt = AdamState::init(model);
        TrainConfig cfg = quick_config(regime);
        cfg.l2_gamma = 0.0;  // descent checked on the bare data term
        const double before = train_step(model, opt, batch, cfg, 1e-5);
        const double after = train_step(model, opt, batch, cfg, 1e-5);
        CHECK(std::isfinite(before));
        CHECK(after < before);
    }
}

TEST_CASE("the reported loss carries exactly gamma * sum(theta^2)") {
    std::vector<TrainingSlice> batch;
    batch.push_back(sample_slice(51));
    batch.push_back(sample_slice(52));

    UNet a = tiny_model(502);
    UNet b = tiny_model(502);
    AdamState oa = AdamState::init(a), ob = AdamState::init(b);
    TrainConfig ca = quick_config(Regime::PartialCETags);
    TrainConfig cb = ca;
    ca.l2_gamma = 0.0;
    cb.l2_gamma = 1e-4;

    double theta_sq = 0.0;
    for (const auto& p : a.params)
        for (float w : p.tensor.values) theta_sq += static_cast<double>(w) * w;

    // lr = 0 keeps the parameters identical, isolating the penalty term
    const double la = train_step(a, oa, batch, ca, 0.0);
    const double lb = train_step(b, ob, batch, cb, 0.0);
    CHECK(lb - la == doctest::Approx(1e-4 * theta_sq).epsilon(1e-9));

    // the same difference shows up in a whole training epoch
    const Dataset data = make_test_dataset();
    const Fold fold = test_fold();
    TrainConfig ta = quick_config(Regime::PartialCETags);
    ta.max_epochs = 1;
    ta.lr0 = 0.0;
    ta.l2_gamma = 0.0;
    TrainConfig tb = ta;
    tb.l2_gamma = 1e-4;
    UNet ma = tiny_model(503);
    UNet mb = tiny_model(503);
    double theta_sq2 = 0.0;
    for (const auto& p : ma.params)
        for (float w : p.tensor.values) theta_sq2 += static_cast<double>(w) * w;
    const TrainResult ra = train(std::move(ma), data, fold, ta);
    const TrainResult rb = train(std::move(mb), data, fold, tb);
    CHECK(rb.history[0].train_loss - ra.history[0].train_loss ==
          doctest::Approx(1e-4 * theta_sq2).epsilon(1e-9));
    CHECK(rb.history[0].val_loss - ra.history[0].val_loss ==
          doctest::Approx(1e-4 * theta_sq2).epsilon(1e-9));
}

TEST_CASE("learning rate halves once after the patience runs out") {
    const Dataset data = make_test_dataset();
    TrainConfig cfg = quick_config(Regime::PartialCETags);
    cfg.max_epochs = 31;
    cfg.lr0 = 1e-3;
    // an unreachable improvement threshold makes every epoch after the first
    // stagnant, so the 25-epoch patience fires at the end of epoch 26
    cfg.plateau_min_delta = 1e9;
    const TrainResult res = train(tiny_model(504), data, test_fold(), cfg);
    REQUIRE(res.history.size() == 31);
    for (int e = 1; e <= 26; ++e) CHECK(res.history[e - 1].lr == 1e-3);
    for (int e = 27; e <= 31; ++e) CHECK(res.history[e - 1].lr == 5e-4);
    CHECK(res.best_epoch == 1);
}

TEST_CASE("identical seeds give identical histories; different seeds diverge") {
    const Dataset data = make_test_dataset();
    const Fold fold = test_fold();
    TrainConfig cfg = quick_config(Regime::PartialCETags);
    cfg.augment = true;
    cfg.max_epochs = 3;
    cfg.seed = 99;

    const TrainResult r1 = train(tiny_model(505), data, fold, cfg);
    const TrainResult r2 = train(tiny_model(505), data, fold, cfg);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
        CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
        CHECK(r1.history[i].lr == r2.history[i].lr);
    }
    for (std::size_t i = 0; i < r1.model.params.size(); ++i)
        CHECK(r1.model.params[i].tensor.values == r2.model.params[i].tensor.values);

    TrainConfig other = cfg;
    other.seed = 100;
    const TrainResult r3 = train(tiny_model(505), data, fold, other);
    bool any_diff = false;
    for (std::size_t i = 0; i < r1.history.size(); ++i)
        any_diff = any_diff || r1.history[i].train_loss != r3.history[i].train_loss;
    CHECK(any_diff);
}

TEST_CASE("training returns the best-validation checkpoint and a consistent history") {
    const Dataset data = make_test_dataset();
    const Fold fold = test_fold();
    TrainConfig cfg = quick_config(Regime::FullySupervised);
    cfg.max_epochs = 5;
    cfg.batch_size = 4;  // 18 train slices -> partial final batch

    TrainResult res = train(tiny_model(506), data, fold, cfg);
    REQUIRE(res.history.size() == 5);
    CHECK(!res.diverged);
    for (const auto& r : res.history) {
        CHECK(std::isfinite(r.train_loss));
        CHECK(std::isfinite(r.val_loss));
        CHECK(r.lr == cfg.lr0);
    }

    int best_epoch = 0;
    const double best = strict_best(res.history, &best_epoch);
    CHECK(res.best_epoch == best_epoch);
    CHECK(res.best_val_loss == best);

    // the returned model (parameters and buffers) reproduces that epoch's
    // validation loss exactly
    const PatientData& vp = find_patient(data, "t3");
    std::vector<TrainingSlice> vbatch;
    double sum = 0.0;
    std::int64_t n = 0;
    const std::vector<int> vslices = training_slices(vp, cfg.regime);
    for (std::size_t start = 0; start < vslices.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop =
            std::min(vslices.size(), start + static_cast<std::size_t>(cfg.batch_size));
        vbatch.clear();
        for (std::size_t i = start; i < stop; ++i)
            vbatch.push_back(make_training_slice(vp, vslices[i]));
        sum += eval_loss(res.model, vbatch, cfg) * static_cast<double>(stop - start);
        n += static_cast<std::int64_t>(stop - start);
    }
    CHECK(sum / static_cast<double>(n) == res.best_val_loss);
}

TEST_CASE("PartialCE steps exactly like PartialCETags with lambda zeroed") {
    std::vector<TrainingSlice> batch;
    batch.push_back(sample_slice(61));
    batch.push_back(sample_slice(62));

    UNet a = tiny_model(507);
    UNet b = tiny_model(507);
    AdamState oa = AdamState::init(a), ob = AdamState::init(b);
    TrainConfig ca = quick_config(Regime::PartialCE);
    TrainConfig cb = quick_config(Regime::PartialCETags);
    cb.loss.lambda = 0.0;

    const double la = train_step(a, oa, batch, ca, 1e-3);
    const double lb = train_step(b, ob, batch, cb, 1e-3);
    CHECK(la == lb);
    for (std::size_t i = 0; i < a.params.size(); ++i)
        CHECK(a.params[i].tensor.values == b.params[i].tensor.values);
}

TEST_CASE("a non-finite loss aborts with the last good weights and a diagnostic") {
    const Dataset data = make_test_dataset();
    const Fold fold = test_fold();

    // corrupted parameter -> the layer check trips during the forward pass
    UNet poisoned = tiny_model(508);
    poisoned.param("enc1.conv1.w").values[0] = std::numeric_limits<float>::quiet_NaN();
    const std::vector<float> initial = poisoned.param("enc1.conv1.w").values;
    TrainConfig cfg = quick_config(Regime::PartialCETags);
    TrainResult res = train(std::move(poisoned), data, fold, cfg);
    CHECK(res.diverged);
    CHECK(res.history.empty());
    CHECK(res.note.find("enc1.conv1") != std::string::npos);
    CHECK(res.note.find("initial weights") != std::string::npos);
    // bytewise: the snapshot holds the injected NaN, which never compares equal
    const std::vector<float>& restored = res.model.param("enc1.conv1.w").values;
    REQUIRE(restored.size() == initial.size());
    CHECK(std::memcmp(restored.data(), initial.data(), initial.size() * sizeof(float)) == 0);

    // an overflowing penalty produces an infinite reported loss without any
    // activation failure
    UNet clean = tiny_model(509);
    const std::vector<float> w0 = clean.param("out.w").values;
    TrainConfig huge = quick_config(Regime::PartialCETags);
    huge.l2_gamma = 1e308;
    TrainResult res2 = train(std::move(clean), data, fold, huge);
    CHECK(res2.diverged);
    CHECK(res2.note.find("non-finite training loss") != std::string::npos);
    CHECK(res2.model.param("out.w").values == w0);  // no step was taken
}

TEST_CASE("history CSV round-trips and rejects malformed files") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "weakseg_test_trainer").string();
    fs::create_directories(dir);
    const std::string path = dir + "/history.csv";

    std::vector<EpochRecord> history = {{1, 0.5, 0.75, 1e-3},
                                        {2, 0.25000001862645149, 0.6, 1e-3},
                                        {3, 0.125, 0.59, 5e-4}};
    write_history_csv(history, path);
    const std::vector<EpochRecord> back = read_history_csv(path);
    REQUIRE(back.size() == history.size());
    for (std::size_t i = 0; i < history.size(); ++i) {
        CHECK(back[i].epoch == history[i].epoch);
        CHECK(back[i].train_loss == doctest::Approx(history[i].train_loss).epsilon(1e-9));
        CHECK(back[i].val_loss == doctest::Approx(history[i].val_loss).epsilon(1e-9));
        CHECK(back[i].lr == doctest::Approx(history[i].lr).epsilon(1e-9));
    }

    CHECK_THROWS_AS(read_history_csv(dir + "/absent.csv"), IoError);
    {
        std::ofstream bad(path + ".bad");
        bad << "epoch,train_loss\n1,0.5\n";
    }
    CHECK_THROWS_AS(read_history_csv(path + ".bad"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("load_dataset reads a generated phantom set with annotations") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "weakseg_test_trainer_ds").string();
    fs::remove_all(dir);
    const std::string anno = dir + "/anno";

    PhantomConfig cfg;
    cfg.n_patients = 2;
    cfg.seed = 4;
    const Manifest manifest = generate_dataset(cfg, dir);
    fs::create_directories(anno);
    for (const auto& mp : manifest.patients) {
        const LabelMap truth = read_label_map((fs::path(dir) / mp.labels_path).string());
        Rng rng(splitmix64(mp.lesions.empty() ? 1 : mp.lesions[0].n_voxels));
        const AnnotationMask mask = scribbles_from_masks(truth, 4, rng);
        write_annotation_mask(mask, (fs::path(anno) / (mp.id + ".json")).string());
    }

    const Dataset data = load_dataset(manifest, dir, anno);
    REQUIRE(data.size() == 2);
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(data[i].id == manifest.patients[i].id);
        CHECK(data[i].image.channels == 2);
        CHECK(data[i].truth.slices == data[i].image.slices);
        CHECK(!data[i].scribbles.entries.empty());
        float lo = 1e9f, hi = -1e9f;
        for (float v : data[i].image.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo == 0.0f);  // normalized intensities
        CHECK(hi == 1.0f);
        CHECK(!training_slices(data[i], Regime::PartialCETags).empty());
    }

    CHECK_THROWS_AS(load_dataset(manifest, dir, dir + "/missing"), IoError);
    fs::remove_all(dir);
}
