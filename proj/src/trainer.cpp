#include "weakseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace weakseg {

const char* regime_name(Regime r) {
    switch (r) {
        case Regime::FullySupervised: return "supervised";
        case Regime::PartialCE: return "partial-ce";
        case Regime::PartialCETags: return "partial-ce-tags";
    }
    throw std::invalid_argument("regime_name: unknown regime");
}

Regime parse_regime(const std::string& name) {
    if (name == "supervised") return Regime::FullySupervised;
    if (name == "partial-ce") return Regime::PartialCE;
    if (name == "partial-ce-tags") return Regime::PartialCETags;
    throw ConfigError("unknown regime '" + name +
                      "' (expected supervised, partial-ce, or partial-ce-tags)");
}

void TrainConfig::validate() const {
    if (lr0 < 0.0) throw std::invalid_argument("TrainConfig: lr0 must be non-negative");
    if (lr_decay <= 0.0 || lr_decay > 1.0)
        throw std::invalid_argument("TrainConfig: lr_decay must be in (0, 1]");
    if (plateau_patience_epochs < 1)
        throw std::invalid_argument("TrainConfig: plateau_patience_epochs must be positive");
    if (plateau_min_delta < 0.0)
        throw std::invalid_argument("TrainConfig: plateau_min_delta must be non-negative");
    if (l2_gamma < 0.0) throw std::invalid_argument("TrainConfig: l2_gamma must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be positive");
    if (folds < 2) throw std::invalid_argument("TrainConfig: folds must be at least 2");
    if (replicates < 1) throw std::invalid_argument("TrainConfig: replicates must be positive");
    loss.validate();
}

WeakLossConfig TrainConfig::effective_loss() const {
    WeakLossConfig out = loss;
    if (regime == Regime::PartialCE) out.lambda = 0.0;
    return out;
}

// ---- folds -----------------------------------------------------------------

FoldSplit make_folds(const Manifest& manifest, int k, std::uint64_t seed) {
    (void)seed;  // assignment is deterministic; ties break by patient id
    const int n = static_cast<int>(manifest.patients.size());
    if (k < 2) throw std::invalid_argument("make_folds: k must be at least 2");
    if (k > n) throw std::invalid_argument("make_folds: more folds than patients");

    struct Entry {
        const ManifestPatient* p;
        std::array<std::int64_t, kNumCancerClasses> counts{};
        std::int64_t total = 0;
    };
    std::vector<Entry> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        order[i].p = &manifest.patients[i];
        for (const auto& l : manifest.patients[i].lesions) {
            if (!is_cancer_class(l.cls))
                throw std::invalid_argument("make_folds: lesion with non-cancer class in manifest");
            ++order[i].counts[l.cls - kGs6];
            ++order[i].total;
        }
    }
    std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
        if (a.total != b.total) return a.total > b.total;
        return a.p->id < b.p->id;
    });

    std::vector<std::array<std::int64_t, kNumCancerClasses>> counts(k);
    for (auto& c : counts) c.fill(0);
    std::vector<std::vector<std::string>> members(k);

    for (const Entry& e : order) {
        // Per-class totals are fixed, so minimizing the count variance across
        // folds is minimizing the sum of squared per-fold counts (exact
        // integer comparison, no floating-point ties).
        int best = -1;
        std::int64_t best_score = 0;
        for (int f = 0; f < k; ++f) {
            std::int64_t score = 0;
            for (int c = 0; c < kNumCancerClasses; ++c) {
                for (int j = 0; j < k; ++j) {
                    const std::int64_t v = counts[j][c] + (j == f ? e.counts[c] : 0);
                    score += v * v;
                }
            }
            const bool better =
                best < 0 || score < best_score ||
                (score == best_score && members[f].size() < members[best].size());
            if (better) {
                best = f;
                best_score = score;
            }
        }
        members[best].push_back(e.p->id);
        for (int c = 0; c < kNumCancerClasses; ++c) counts[best][c] += e.counts[c];
    }

    FoldSplit split;
    split.folds.resize(k);
    for (int f = 0; f < k; ++f) {
        auto& fold = split.folds[f];
        fold.val_ids = members[f];
        std::sort(fold.val_ids.begin(), fold.val_ids.end());
        for (int g = 0; g < k; ++g)
            if (g != f) fold.train_ids.insert(fold.train_ids.end(), members[g].begin(),
                                              members[g].end());
        std::sort(fold.train_ids.begin(), fold.train_ids.end());
    }
    return split;
}

// ---- augmentation ----------------------------------------------------------

SliceTransform SliceTransform::sample(Rng& rng) {
    SliceTransform t;
    // fixed draw order keeps downstream streams aligned
    t.hflip = rng.bernoulli(0.5);
    t.angle_deg = rng.uniform(-10.0, 10.0);
    t.dy_px = rng.uniform(-5.0, 5.0);
    t.dx_px = rng.uniform(-5.0, 5.0);
    return t;
}

std::array<double, 2> SliceTransform::forward(double row, double col, int rows, int cols) const {
    if (hflip) col = static_cast<double>(cols - 1) - col;
    const double cy = 0.5 * (rows - 1), cx = 0.5 * (cols - 1);
    const double rad = angle_deg * M_PI / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double dr = row - cy, dc = col - cx;
    return {cy + dr * c - dc * s + dy_px, cx + dr * s + dc * c + dx_px};
}

std::array<double, 2> SliceTransform::inverse(double row, double col, int rows, int cols) const {
    row -= dy_px;
    col -= dx_px;
    const double cy = 0.5 * (rows - 1), cx = 0.5 * (cols - 1);
    const double rad = -angle_deg * M_PI / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double dr = row - cy, dc = col - cx;
    double r2 = cy + dr * c - dc * s;
    double c2 = cx + dr * s + dc * c;
    if (hflip) c2 = static_cast<double>(cols - 1) - c2;
    return {r2, c2};
}

namespace {

float bilinear_at(const Tensor& img, int ch, int rows, int cols, double sy, double sx) {
    if (sy < 0.0 || sy > rows - 1 || sx < 0.0 || sx > cols - 1) return 0.0f;
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y1 = std::min(y0 + 1, rows - 1);
    const int x1 = std::min(x0 + 1, cols - 1);
    const float fy = static_cast<float>(sy - y0);
    const float fx = static_cast<float>(sx - x0);
    const auto at = [&](int y, int x) {
        return img.values[(static_cast<std::size_t>(ch) * rows + y) * cols + x];
    };
    const float top = (1.0f - fx) * at(y0, x0) + fx * at(y0, x1);
    const float bot = (1.0f - fx) * at(y1, x0) + fx * at(y1, x1);
    return (1.0f - fy) * top + fy * bot;
}

TagBounds tags_from_entries(const std::vector<AnnotationEntry>& entries, std::int64_t domain) {
    TagBounds tags;
    for (const auto& e : entries) {
        if (e.cls == kBackground) continue;
        tags.lower[e.cls - 1] = 1.0;
        tags.upper[e.cls - 1] = static_cast<double>(domain);
    }
    return tags;
}

}  // namespace

TrainingSlice apply_transform(const TrainingSlice& s, const SliceTransform& t) {
    if (s.image.shape.size() != 3)
        throw std::invalid_argument("apply_transform: image must be (channels, rows, cols)");
    const int channels = s.image.shape[0], rows = s.image.shape[1], cols = s.image.shape[2];

    TrainingSlice out;
    out.image = Tensor::zeros(s.image.shape);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            const auto src = t.inverse(y, x, rows, cols);
            for (int ch = 0; ch < channels; ++ch)
                out.image.values[(static_cast<std::size_t>(ch) * rows + y) * cols + x] =
                    bilinear_at(s.image, ch, rows, cols, src[0], src[1]);
        }

    if (!s.labels.empty()) {
        if (static_cast<std::int64_t>(s.labels.size()) !=
            static_cast<std::int64_t>(rows) * cols)
            throw std::invalid_argument("apply_transform: label size does not match image");
        out.labels.assign(s.labels.size(), kBackground);
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x) {
                const auto src = t.inverse(y, x, rows, cols);
                const long sy = std::lround(src[0]), sx = std::lround(src[1]);
                if (sy < 0 || sy >= rows || sx < 0 || sx >= cols) continue;
                out.labels[static_cast<std::size_t>(y) * cols + x] =
                    s.labels[static_cast<std::size_t>(sy) * cols + sx];
            }
    }

    for (const auto& e : s.entries) {
        const auto dst = t.forward(e.row, e.col, rows, cols);
        const long ry = std::lround(dst[0]), rx = std::lround(dst[1]);
        if (ry < 0 || ry >= rows || rx < 0 || rx >= cols) continue;
        out.entries.push_back({0, static_cast<int>(ry), static_cast<int>(rx), e.cls});
    }
    std::sort(out.entries.begin(), out.entries.end());
    out.entries.erase(std::unique(out.entries.begin(), out.entries.end()), out.entries.end());
    out.tags = tags_from_entries(out.entries, static_cast<std::int64_t>(rows) * cols);
    return out;
}

TrainingSlice augment(const TrainingSlice& s, Rng& rng) {
    return apply_transform(s, SliceTransform::sample(rng));
}

// ---- dataset ---------------------------------------------------------------

Dataset load_dataset(const Manifest& manifest, const std::string& data_dir,
                     const std::string& annotations_dir) {
    namespace fs = std::filesystem;
    Dataset data;
    data.reserve(manifest.patients.size());
    for (const auto& mp : manifest.patients) {
        PatientData p;
        p.id = mp.id;
        p.image = normalize_intensity(read_volume((fs::path(data_dir) / mp.volume_path).string()));
        p.truth = read_label_map((fs::path(data_dir) / mp.labels_path).string());
        p.scribbles =
            read_annotation_mask((fs::path(annotations_dir) / (mp.id + ".json")).string());
        if (p.truth.slices != p.image.slices || p.truth.rows != p.image.rows ||
            p.truth.cols != p.image.cols)
            throw IoError("load_dataset: label shape mismatch for patient " + mp.id);
        const auto& ds = p.scribbles.domain_shape;
        if (ds.slices != p.image.slices || ds.rows != p.image.rows || ds.cols != p.image.cols)
            throw IoError("load_dataset: annotation domain mismatch for patient " + mp.id);
        data.push_back(std::move(p));
    }
    return data;
}

const PatientData& find_patient(const Dataset& data, const std::string& id) {
    for (const auto& p : data)
        if (p.id == id) return p;
    throw std::invalid_argument("find_patient: unknown patient id '" + id + "'");
}

std::vector<int> training_slices(const PatientData& p, Regime regime) {
    std::vector<int> slices;
    if (regime == Regime::FullySupervised) {
        slices.resize(static_cast<std::size_t>(p.image.slices));
        for (int d = 0; d < p.image.slices; ++d) slices[d] = d;
        return slices;
    }
    if (p.scribbles.has_annotated_slices) {
        slices = p.scribbles.annotated_slices;
        std::sort(slices.begin(), slices.end());
        return slices;
    }
    for (const auto& e : p.scribbles.entries)
        if (slices.empty() || slices.back() != e.slice) slices.push_back(e.slice);
    std::sort(slices.begin(), slices.end());
    slices.erase(std::unique(slices.begin(), slices.end()), slices.end());
    return slices;
}

TrainingSlice make_training_slice(const PatientData& p, int slice) {
    if (slice < 0 || slice >= p.image.slices)
        throw std::invalid_argument("make_training_slice: slice out of range");
    const int rows = p.image.rows, cols = p.image.cols;
    TrainingSlice s;
    s.image = Tensor::zeros({p.image.channels, rows, cols});
    for (int ch = 0; ch < p.image.channels; ++ch)
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x)
                s.image.values[(static_cast<std::size_t>(ch) * rows + y) * cols + x] =
                    p.image.at(ch, slice, y, x);
    s.labels.resize(static_cast<std::size_t>(rows) * cols);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x)
            s.labels[static_cast<std::size_t>(y) * cols + x] = p.truth.at(slice, y, x);
    for (const auto& e : p.scribbles.entries)
        if (e.slice == slice) s.entries.push_back({0, e.row, e.col, e.cls});
    s.tags = tags_for_slice(p.scribbles, slice);
    return s;
}

// ---- optimization ----------------------------------------------------------

AdamState AdamState::init(const UNet& model) {
    AdamState st;
    st.m.reserve(model.params.size());
    st.v.reserve(model.params.size());
    for (const auto& p : model.params) {
        st.m.push_back(Tensor::zeros(p.tensor.shape));
        st.v.push_back(Tensor::zeros(p.tensor.shape));
    }
    return st;
}

void adam_update(Tensor& theta, const Tensor& grad, Tensor& m, Tensor& v, std::int64_t t,
                 double lr, double beta1, double beta2, double eps) {
    if (grad.shape != theta.shape || m.shape != theta.shape || v.shape != theta.shape)
        throw std::invalid_argument("adam_update: shape mismatch");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.values.size(); ++i) {
        const double g = grad.values[i];
        const double mi = beta1 * m.values[i] + (1.0 - beta1) * g;
        const double vi = beta2 * v.values[i] + (1.0 - beta2) * g * g;
        m.values[i] = static_cast<float>(mi);
        v.values[i] = static_cast<float>(vi);
        theta.values[i] -=
            static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
}

namespace {

Tensor batch_images(const std::vector<TrainingSlice>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    const auto& s0 = batch[0].image.shape;
    Tensor x = Tensor::zeros({static_cast<int>(batch.size()), s0[0], s0[1], s0[2]});
    const std::size_t plane = batch[0].image.values.size();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].image.shape != s0)
            throw std::invalid_argument("batch images disagree in shape");
        std::copy(batch[b].image.values.begin(), batch[b].image.values.end(),
                  x.values.begin() + static_cast<std::ptrdiff_t>(b * plane));
    }
    return x;
}

// data term of the regime loss on an existing tape
Var regime_loss(Tape& tape, Var probs, const std::vector<TrainingSlice>& batch,
                const TrainConfig& cfg, const WeakLossConfig& wcfg) {
    if (cfg.regime == Regime::FullySupervised) {
        std::vector<std::vector<ClassId>> truth;
        truth.reserve(batch.size());
        for (const auto& s : batch) truth.push_back(s.labels);
        return supervised_loss(tape, probs, truth, wcfg);
    }
    std::vector<WeakSliceTarget> targets;
    targets.reserve(batch.size());
    for (const auto& s : batch) targets.push_back({s.entries, s.tags});
    return weak_loss(tape, probs, targets, wcfg);
}

double l2_sum(const UNet& model) {
    double acc = 0.0;
    for (const auto& p : model.params)
        for (float w : p.tensor.values) acc += static_cast<double>(w) * w;
    return acc;
}

}  // namespace

double train_step(UNet& model, AdamState& opt, const std::vector<TrainingSlice>& batch,
                  const TrainConfig& cfg, double lr) {
    const WeakLossConfig wcfg = cfg.effective_loss();
    Tape tape;
    std::vector<Var> pvars;
    const Var x = tape.input(batch_images(batch));
    const Var probs = model.forward(tape, x, true, &pvars);
    const Var loss = regime_loss(tape, probs, batch, cfg, wcfg);
    const double reported =
        static_cast<double>(tape.value(loss).values[0]) + cfg.l2_gamma * l2_sum(model);
    if (!std::isfinite(reported)) return reported;  // caller aborts; keep last good weights

    tape.backward(loss);
    ++opt.t;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        Tensor g = tape.grad(pvars[i]);
        // d/dtheta of gamma * sum(theta^2)
        for (std::size_t j = 0; j < g.values.size(); ++j)
            g.values[j] += static_cast<float>(2.0 * cfg.l2_gamma) *
                           model.params[i].tensor.values[j];
        adam_update(model.params[i].tensor, g, opt.m[i], opt.v[i], opt.t, lr);
    }
    return reported;
}

double eval_loss(UNet& model, const std::vector<TrainingSlice>& batch, const TrainConfig& cfg) {
    const WeakLossConfig wcfg = cfg.effective_loss();
    Tape tape;
    const Var x = tape.input(batch_images(batch));
    const Var probs = model.forward(tape, x, false);
    const Var loss = regime_loss(tape, probs, batch, cfg, wcfg);
    return static_cast<double>(tape.value(loss).values[0]) + cfg.l2_gamma * l2_sum(model);
}

// ---- training loop ---------------------------------------------------------

namespace {

struct SliceRef {
    const PatientData* patient;
    int slice;
};

std::vector<SliceRef> slice_refs(const std::vector<const PatientData*>& patients,
                                 Regime regime) {
    std::vector<SliceRef> refs;
    for (const PatientData* p : patients)
        for (int d : training_slices(*p, regime)) refs.push_back({p, d});
    return refs;
}

}  // namespace

TrainResult train(UNet model, const Dataset& data, const Fold& fold, const TrainConfig& cfg) {
    cfg.validate();
    std::vector<const PatientData*> train_patients, val_patients;
    for (const auto& id : fold.train_ids) train_patients.push_back(&find_patient(data, id));
    for (const auto& id : fold.val_ids) val_patients.push_back(&find_patient(data, id));
    if (train_patients.empty()) throw std::invalid_argument("train: fold has no training patients");
    if (val_patients.empty()) throw std::invalid_argument("train: fold has no validation patients");

    std::vector<SliceRef> train_refs = slice_refs(train_patients, cfg.regime);
    const std::vector<SliceRef> val_refs = slice_refs(val_patients, cfg.regime);
    if (train_refs.empty()) throw std::invalid_argument("train: no training slices for regime");
    if (val_refs.empty()) throw std::invalid_argument("train: no validation slices for regime");

    Rng shuffle_rng = Rng(cfg.seed).child(0x5348554646ull);  // shuffle stream
    Rng aug_rng = Rng(cfg.seed).child(0x41554f47ull);        // augmentation stream

    AdamState opt = AdamState::init(model);
    double lr = cfg.lr0;
    int stagnant = 0;

    TrainResult res;
    res.best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<NamedTensor> best_params = model.params;
    std::vector<NamedTensor> best_buffers = model.buffers;

    const auto abort_with = [&](int epoch, const std::string& why) {
        res.diverged = true;
        std::ostringstream os;
        os << "training aborted in epoch " << epoch << ": " << why << "; restored ";
        if (res.best_epoch > 0)
            os << "epoch " << res.best_epoch << " checkpoint";
        else
            os << "initial weights";
        res.note = os.str();
        model.params = best_params;
        model.buffers = best_buffers;
        res.model = std::move(model);
    };

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        // Fisher-Yates with the dedicated stream
        for (std::size_t i = train_refs.size(); i > 1; --i)
            std::swap(train_refs[i - 1],
                      train_refs[static_cast<std::size_t>(
                          shuffle_rng.uniform_int(static_cast<std::int64_t>(i)))]);

        double train_sum = 0.0;
        std::int64_t train_n = 0;
        for (std::size_t start = 0; start < train_refs.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(train_refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<TrainingSlice> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                TrainingSlice s =
                    make_training_slice(*train_refs[i].patient, train_refs[i].slice);
                batch.push_back(cfg.augment ? augment(s, aug_rng) : std::move(s));
            }
            double bl = 0.0;
            try {
                bl = train_step(model, opt, batch, cfg, lr);
            } catch (const std::runtime_error& e) {
                abort_with(epoch, e.what());
                return res;
            }
            if (!std::isfinite(bl)) {
                abort_with(epoch, "non-finite training loss");
                return res;
            }
            train_sum += bl * static_cast<double>(stop - start);
            train_n += static_cast<std::int64_t>(stop - start);
        }

        double val_sum = 0.0;
        std::int64_t val_n = 0;
        for (std::size_t start = 0; start < val_refs.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(val_refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<TrainingSlice> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i)
                batch.push_back(make_training_slice(*val_refs[i].patient, val_refs[i].slice));
            double bl = 0.0;
            try {
                bl = eval_loss(model, batch, cfg);
            } catch (const std::runtime_error& e) {
                abort_with(epoch, e.what());
                return res;
            }
            if (!std::isfinite(bl)) {
                abort_with(epoch, "non-finite validation loss");
                return res;
            }
            val_sum += bl * static_cast<double>(stop - start);
            val_n += static_cast<std::int64_t>(stop - start);
        }

        const double train_loss = train_sum / static_cast<double>(train_n);
        const double val_loss = val_sum / static_cast<double>(val_n);
        res.history.push_back({epoch, train_loss, val_loss, lr});

        if (val_loss < res.best_val_loss - cfg.plateau_min_delta) {
            res.best_val_loss = val_loss;
            res.best_epoch = epoch;
            best_params = model.params;
            best_buffers = model.buffers;
            stagnant = 0;
        } else {
            ++stagnant;
        }
        if (stagnant >= cfg.plateau_patience_epochs) {
            lr *= cfg.lr_decay;
            stagnant = 0;
        }
    }

    model.params = std::move(best_params);
    model.buffers = std::move(best_buffers);
    res.model = std::move(model);
    return res;
}

// ---- history CSV -----------------------------------------------------------

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_history_csv: cannot open " + path);
    out << "epoch,train_loss,val_loss,lr\n";
    char line[160];
    for (const auto& r : history) {
        std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.10g\n", r.epoch, r.train_loss,
                      r.val_loss, r.lr);
        out << line;
    }
    if (!out) throw IoError("write_history_csv: write failed for " + path);
}

std::vector<EpochRecord> read_history_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_history_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "epoch,train_loss,val_loss,lr")
        throw IoError("read_history_csv: bad header in " + path);
    std::vector<EpochRecord> history;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochRecord r;
        std::istringstream ls(line);
        std::string field;
        try {
            std::getline(ls, field, ',');
            r.epoch = std::stoi(field);
            std::getline(ls, field, ',');
            r.train_loss = std::stod(field);
            std::getline(ls, field, ',');
            r.val_loss = std::stod(field);
            std::getline(ls, field, ',');
            r.lr = std::stod(field);
        } catch (const std::exception&) {
            throw IoError("read_history_csv: malformed row in " + path);
        }
        history.push_back(r);
    }
    return history;
}

}  // namespace weakseg
