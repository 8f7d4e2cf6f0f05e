#include "weakseg/lesion_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "json.hpp"

namespace weakseg {

using nlohmann::json;

std::int64_t ConfusionMatrix4::total() const {
    std::int64_t n = 0;
    for (const auto& row : counts)
        for (std::int64_t c : row) n += c;
    return n;
}

void ConfusionMatrix4::add(ClassId truth_cls, ClassId pred_cls) {
    if (!is_cancer_class(truth_cls) || !is_cancer_class(pred_cls))
        throw std::invalid_argument("ConfusionMatrix4::add: classes must be cancer grades");
    ++counts[truth_cls - kGs6][pred_cls - kGs6];
}

ConfusionMatrix4 ConfusionMatrix4::transposed() const {
    ConfusionMatrix4 t;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) t.counts[j][i] = counts[i][j];
    return t;
}

// ---- lesion extraction -----------------------------------------------------

std::vector<LesionRecord> extract_lesions(const LabelMap& labels, const Volume& probs,
                                          int min_voxels, ScoreMode score_mode) {
    if (probs.channels != kNumClasses)
        throw std::invalid_argument("extract_lesions: probability volume must have 6 channels");
    if (probs.slices != labels.slices || probs.rows != labels.rows || probs.cols != labels.cols)
        throw std::invalid_argument("extract_lesions: label/probability shape mismatch");
    if (min_voxels < 1) throw std::invalid_argument("extract_lesions: min_voxels must be >= 1");

    const int D = labels.slices, H = labels.rows, W = labels.cols;
    const auto index = [&](int d, int h, int w) {
        return (static_cast<std::int64_t>(d) * H + h) * W + w;
    };

    // connected components of the cancer-voxel union, 26-neighborhood
    std::vector<std::int32_t> component(static_cast<std::size_t>(labels.numel()), -1);
    std::vector<LesionRecord> lesions;
    std::vector<std::array<int, 3>> stack;

    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                if (!is_cancer_class(labels.at(d, h, w)) || component[index(d, h, w)] >= 0)
                    continue;
                const auto id = static_cast<std::int32_t>(lesions.size());
                LesionRecord rec;
                stack.assign(1, {d, h, w});
                component[index(d, h, w)] = id;
                while (!stack.empty()) {
                    const auto [cd, ch, cw] = stack.back();
                    stack.pop_back();
                    rec.voxels.push_back({cd, ch, cw});
                    for (int dd = -1; dd <= 1; ++dd)
                        for (int dh = -1; dh <= 1; ++dh)
                            for (int dw = -1; dw <= 1; ++dw) {
                                const int nd = cd + dd, nh = ch + dh, nw = cw + dw;
                                if (nd < 0 || nd >= D || nh < 0 || nh >= H || nw < 0 || nw >= W)
                                    continue;
                                if (!is_cancer_class(labels.at(nd, nh, nw)) ||
                                    component[index(nd, nh, nw)] >= 0)
                                    continue;
                                component[index(nd, nh, nw)] = id;
                                stack.push_back({nd, nh, nw});
                            }
                }
                lesions.push_back(std::move(rec));
            }

    std::vector<LesionRecord> kept;
    for (auto& rec : lesions) {
        if (static_cast<int>(rec.voxels.size()) < min_voxels) continue;
        std::sort(rec.voxels.begin(), rec.voxels.end());

        // majority grade, ties to the more aggressive class
        std::array<std::int64_t, kNumClasses> votes{};
        for (const auto& v : rec.voxels) ++votes[labels.at(v[0], v[1], v[2])];
        ClassId grade = kGs6;
        for (ClassId c = kGs6; c <= kGs8plus; ++c)
            if (votes[c] >= votes[grade]) grade = c;
        rec.gleason_class = grade;

        // detection confidence from the background channel
        double mean_fg = 0.0, max_fg = 0.0;
        std::array<double, 3> centroid = {0.0, 0.0, 0.0};
        for (const auto& v : rec.voxels) {
            const double fg = 1.0 - probs.at(kBackground, v[0], v[1], v[2]);
            mean_fg += fg;
            max_fg = std::max(max_fg, fg);
            for (int a = 0; a < 3; ++a) centroid[a] += v[a];
        }
        mean_fg /= static_cast<double>(rec.voxels.size());
        rec.score = std::clamp(score_mode == ScoreMode::MeanForeground ? mean_fg : max_fg, 0.0,
                               1.0);
        for (int a = 0; a < 3; ++a)
            rec.center[a] = static_cast<int>(
                std::lround(centroid[a] / static_cast<double>(rec.voxels.size())));
        rec.volume_mm3 = static_cast<double>(rec.voxels.size()) * probs.in_plane_spacing_mm[0] *
                         probs.in_plane_spacing_mm[1] * probs.slice_thickness_mm;
        kept.push_back(std::move(rec));
    }
    return kept;
}

std::vector<LesionRecord> truth_lesions(const LabelMap& labels,
                                        const std::array<double, 2>& in_plane_spacing_mm,
                                        double slice_thickness_mm) {
    // zero background probability everywhere pins every component's score to 1
    Volume probs = Volume::zeros(kNumClasses, labels.slices, labels.rows, labels.cols);
    probs.in_plane_spacing_mm = in_plane_spacing_mm;
    probs.slice_thickness_mm = slice_thickness_mm;
    return extract_lesions(labels, probs, 1);
}

// ---- matching ---------------------------------------------------------------

namespace {

std::int64_t overlap_voxels(const LesionRecord& a, const LesionRecord& b) {
    // both voxel lists sorted
    std::int64_t n = 0;
    auto ia = a.voxels.begin();
    auto ib = b.voxels.begin();
    while (ia != a.voxels.end() && ib != b.voxels.end()) {
        if (*ia < *ib)
            ++ia;
        else if (*ib < *ia)
            ++ib;
        else {
            ++n;
            ++ia;
            ++ib;
        }
    }
    return n;
}

}  // namespace

MatchResult match_lesions(const std::vector<LesionRecord>& pred,
                          const std::vector<LesionRecord>& truth, double min_overlap_frac,
                          OverlapDenominator denom) {
    if (min_overlap_frac <= 0.0 || min_overlap_frac > 1.0)
        throw std::invalid_argument("match_lesions: min_overlap_frac must be in (0, 1]");

    const int np = static_cast<int>(pred.size());
    const int nt = static_cast<int>(truth.size());
    std::vector<std::vector<std::int64_t>> ov(np, std::vector<std::int64_t>(nt, 0));
    std::vector<bool> pred_qualifies(np, false);

    for (int p = 0; p < np; ++p)
        for (int t = 0; t < nt; ++t) {
            ov[p][t] = overlap_voxels(pred[p], truth[t]);
            const double base = static_cast<double>(
                denom == OverlapDenominator::Pred ? pred[p].voxels.size()
                                                  : truth[t].voxels.size());
            if (static_cast<double>(ov[p][t]) >= min_overlap_frac * base)
                pred_qualifies[p] = true;
            else
                ov[p][t] = -1;  // below threshold: not a candidate pair
        }

    MatchResult res;
    for (int t = 0; t < nt; ++t) {
        int best = -1;
        for (int p = 0; p < np; ++p) {
            if (ov[p][t] < 0) continue;
            const bool better =
                best < 0 || ov[p][t] > ov[best][t] ||
                (ov[p][t] == ov[best][t] && pred[p].score > pred[best].score);
            if (better) best = p;
        }
        if (best >= 0)
            res.matches.push_back({best, t, ov[best][t]});
        else
            res.missed_truths.push_back(t);
    }
    for (int p = 0; p < np; ++p)
        if (!pred_qualifies[p]) res.false_positives.push_back(p);
    return res;
}

// ---- kappa ------------------------------------------------------------------

double quadratic_kappa(const ConfusionMatrix4& cm) {
    const double n = static_cast<double>(cm.total());
    if (n < 1.0) throw std::invalid_argument("quadratic_kappa: empty confusion matrix");

    std::array<double, 4> row{}, col{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            row[i] += static_cast<double>(cm.counts[i][j]);
            col[j] += static_cast<double>(cm.counts[i][j]);
        }

    double num = 0.0, den = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            const double w = static_cast<double>((i - j) * (i - j)) / 9.0;
            num += w * static_cast<double>(cm.counts[i][j]);
            den += w * row[i] * col[j] / n;
        }
    if (den == 0.0)
        throw std::domain_error("quadratic_kappa: zero expected disagreement (all mass in one "
                                "class for both raters)");
    return 1.0 - num / den;
}

ConfusionMatrix4 grade_confusion(const MatchResult& m, const std::vector<LesionRecord>& pred,
                                 const std::vector<LesionRecord>& truth, ConfusionMode mode) {
    ConfusionMatrix4 cm;
    for (const auto& pair : m.matches)
        cm.add(truth[pair.truth_index].gleason_class, pred[pair.pred_index].gleason_class);
    if (mode == ConfusionMode::MissAsGS6)
        for (int t : m.missed_truths) cm.add(truth[t].gleason_class, kGs6);
    return cm;
}

// ---- FROC -------------------------------------------------------------------

FrocCurve froc(const std::vector<PatientLesions>& patients,
               const std::vector<double>& thresholds, double min_overlap_frac,
               OverlapDenominator denom) {
    if (patients.empty()) throw std::invalid_argument("froc: no patients");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] >= thresholds[i - 1])
            throw std::invalid_argument("froc: thresholds must be strictly descending");

    std::int64_t total_truths = 0;
    for (const auto& p : patients) total_truths += static_cast<std::int64_t>(p.truth.size());
    if (total_truths == 0)
        throw std::domain_error("froc: no ground-truth lesions, sensitivity undefined");

    FrocCurve curve;
    for (double t : thresholds) {
        std::int64_t fps = 0, detected = 0;
        for (const auto& p : patients) {
            std::vector<LesionRecord> keep;
            for (const auto& l : p.pred)
                if (l.score >= t) keep.push_back(l);
            const MatchResult m = match_lesions(keep, p.truth, min_overlap_frac, denom);
            fps += static_cast<std::int64_t>(m.false_positives.size());
            detected += static_cast<std::int64_t>(m.matches.size());
        }
        curve.points.push_back({static_cast<double>(fps) / static_cast<double>(patients.size()),
                                static_cast<double>(detected) /
                                    static_cast<double>(total_truths)});
    }
    return curve;
}

double sensitivity_at_fp(const FrocCurve& curve, double fp) {
    if (curve.points.empty()) throw std::invalid_argument("sensitivity_at_fp: empty curve");
    // sort by abscissa; the sweep already orders points but interpolation
    // should not depend on it
    std::vector<FrocPoint> pts = curve.points;
    std::sort(pts.begin(), pts.end(), [](const FrocPoint& a, const FrocPoint& b) {
        if (a.fp_per_patient != b.fp_per_patient) return a.fp_per_patient < b.fp_per_patient;
        return a.sensitivity < b.sensitivity;
    });
    if (fp <= pts.front().fp_per_patient) return pts.front().sensitivity;
    if (fp >= pts.back().fp_per_patient) return pts.back().sensitivity;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (fp > pts[i].fp_per_patient) continue;
        const double x0 = pts[i - 1].fp_per_patient, x1 = pts[i].fp_per_patient;
        const double y0 = pts[i - 1].sensitivity, y1 = pts[i].sensitivity;
        if (x1 == x0) return std::max(y0, y1);
        return y0 + (y1 - y0) * (fp - x0) / (x1 - x0);
    }
    return pts.back().sensitivity;
}

// ---- grading by centers, Dice, Wilcoxon -------------------------------------

ClassId devente_assign_one(const std::array<int, 3>& center,
                           const std::vector<LesionRecord>& pred) {
    for (const auto& l : pred)
        if (std::binary_search(l.voxels.begin(), l.voxels.end(), center))
            return l.gleason_class;
    return kGs6;
}

std::vector<ClassId> devente_assign(const std::vector<CentroidAnnotation>& centers,
                                    const std::vector<LesionRecord>& pred) {
    std::vector<ClassId> out;
    out.reserve(centers.size());
    for (const auto& c : centers) out.push_back(devente_assign_one(c.lesion_center, pred));
    return out;
}

std::vector<std::array<int, 3>> label_voxels(const LabelMap& m, ClassId lo, ClassId hi) {
    std::vector<std::array<int, 3>> out;
    for (int d = 0; d < m.slices; ++d)
        for (int h = 0; h < m.rows; ++h)
            for (int w = 0; w < m.cols; ++w) {
                const ClassId c = m.at(d, h, w);
                if (c >= lo && c <= hi) out.push_back({d, h, w});
            }
    return out;
}

double dice(const std::vector<std::array<int, 3>>& a, const std::vector<std::array<int, 3>>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::int64_t inter = 0;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (*ia < *ib)
            ++ia;
        else if (*ib < *ia)
            ++ib;
        else {
            ++inter;
            ++ia;
            ++ib;
        }
    }
    return 2.0 * static_cast<double>(inter) /
           static_cast<double>(a.size() + b.size());
}

double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw std::invalid_argument("wilcoxon_signed_rank: length mismatch");
    if (x.size() < 5)
        throw std::invalid_argument("wilcoxon_signed_rank: need at least 5 pairs");

    std::vector<double> diffs;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = y[i] - x[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty())
        throw std::domain_error("wilcoxon_signed_rank: all differences are zero");

    const std::size_t n = diffs.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(diffs[a]) < std::abs(diffs[b]);
    });

    // average ranks over ties; collect tie sizes for the variance correction
    std::vector<double> rank(n, 0.0);
    double tie_term = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n &&
               std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]]))
            ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }

    double w_plus = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (diffs[k] > 0.0) w_plus += rank[k];

    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0)
        throw std::domain_error("wilcoxon_signed_rank: zero variance after tie correction");
    const double z = (w_plus - mean) / std::sqrt(var);
    return std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
}

// ---- reporting ---------------------------------------------------------------

namespace {

// nlohmann serializes non-finite values as null; mirror that on the way in
double number_or_nan(const json& j, const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

}  // namespace

void write_eval_report(const EvalReport& report, const std::string& path) {
    if (report.protocol != "private" && report.protocol != "centroid")
        throw std::invalid_argument("write_eval_report: unknown protocol " + report.protocol);
    json j;
    j["protocol"] = report.protocol;
    j["kappa"] = report.kappa;
    if (report.protocol == "private") {
        j["kappa_matched_only"] = report.kappa_matched_only;
        j["sensitivity_at_2fp"] = report.sensitivity_at_2fp;
        j["sensitivity_at_2fp_truth_denom"] = report.sensitivity_at_2fp_truth_denom;
        j["dice_prostate"] = report.dice_prostate;
        json froc_points = json::array();
        for (const auto& p : report.froc.points)
            froc_points.push_back(json::array({p.fp_per_patient, p.sensitivity}));
        j["froc"] = froc_points;
        json cm = json::array();
        for (const auto& row : report.confusion.counts) {
            json r = json::array();
            for (std::int64_t c : row) r.push_back(c);
            cm.push_back(r);
        }
        j["confusion"] = cm;
    }
    j["version"] = kVersion;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_eval_report: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write_eval_report: write failed for " + path);
}

EvalReport read_eval_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_eval_report: cannot open " + path);
    json j;
    try {
        in >> j;
        EvalReport r;
        r.protocol = j.at("protocol").get<std::string>();
        r.kappa = number_or_nan(j, "kappa");
        if (r.protocol == "private") {
            r.kappa_matched_only = number_or_nan(j, "kappa_matched_only");
            r.sensitivity_at_2fp = number_or_nan(j, "sensitivity_at_2fp");
            r.sensitivity_at_2fp_truth_denom = number_or_nan(j, "sensitivity_at_2fp_truth_denom");
            r.dice_prostate = number_or_nan(j, "dice_prostate");
            for (const auto& p : j.at("froc"))
                r.froc.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
            const auto& cm = j.at("confusion");
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b)
                    r.confusion.counts[a][b] = cm.at(a).at(b).get<std::int64_t>();
        }
        return r;
    } catch (const json::exception& e) {
        throw IoError("read_eval_report: malformed " + path + ": " + e.what());
    }
}

void write_froc_csv(const FrocCurve& curve, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_froc_csv: cannot open " + path);
    out << "fp_per_patient,sensitivity\n";
    char line[80];
    for (const auto& p : curve.points) {
        std::snprintf(line, sizeof(line), "%.10g,%.10g\n", p.fp_per_patient, p.sensitivity);
        out << line;
    }
    if (!out) throw IoError("write_froc_csv: write failed for " + path);
}

void write_froc_svg(const FrocCurve& curve, const std::string& path) {
    // fixed 480x360 canvas with a 40px margin; x spans [0, max fp], y [0, 1]
    const double width = 480.0, height = 360.0, margin = 40.0;
    double max_fp = 1.0;
    for (const auto& p : curve.points) max_fp = std::max(max_fp, p.fp_per_patient);

    const auto px = [&](double fp) {
        return margin + (width - 2 * margin) * (fp / max_fp);
    };
    const auto py = [&](double sens) {
        return height - margin - (height - 2 * margin) * sens;
    };

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_froc_svg: cannot open " + path);
    char buf[160];
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" "
           "viewBox=\"0 0 480 360\">\n";
    std::snprintf(buf, sizeof(buf),
                  "  <line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", margin,
                  height - margin, width - margin, height - margin);
    out << buf;
    std::snprintf(buf, sizeof(buf),
                  "  <line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", margin,
                  margin, margin, height - margin);
    out << buf;
    out << "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    std::vector<FrocPoint> pts = curve.points;
    std::sort(pts.begin(), pts.end(), [](const FrocPoint& a, const FrocPoint& b) {
        return a.fp_per_patient < b.fp_per_patient;
    });
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%s%.6g,%.6g", i ? " " : "", px(pts[i].fp_per_patient),
                      py(pts[i].sensitivity));
        out << buf;
    }
    out << "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "  <text x=\"%g\" y=\"%g\" font-size=\"12\">FP per patient</text>\n",
                  width / 2 - 40, height - 10.0);
    out << buf;
    std::snprintf(buf, sizeof(buf),
                  "  <text x=\"12\" y=\"%g\" font-size=\"12\" transform=\"rotate(-90 12 %g)\">"
                  "Sensitivity</text>\n",
                  height / 2, height / 2);
    out << buf;
    out << "</svg>\n";
    if (!out) throw IoError("write_froc_svg: write failed for " + path);
}

}  // namespace weakseg
