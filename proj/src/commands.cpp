#include "weakseg/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

namespace weakseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double guarded_kappa(const ConfusionMatrix4& cm) {
    try {
        return quadratic_kappa(cm);
    } catch (const std::exception&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

void accumulate(ConfusionMatrix4& into, const ConfusionMatrix4& part) {
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) into.counts[i][j] += part.counts[i][j];
}

}  // namespace

std::uint64_t run_seed(const TrainConfig& cfg, int fold, int replicate) {
    return cfg.seed +
           1000003ull * static_cast<std::uint64_t>(replicate * cfg.folds + fold);
}

EvalReport evaluate_patients(UNet& model, const std::vector<EvalPatient>& patients,
                             const EvalConfig& cfg) {
    cfg.validate();
    if (patients.empty()) throw std::invalid_argument("evaluate_patients: no patients");
    const ScoreMode score_mode =
        cfg.score_mode == "max" ? ScoreMode::MaxForeground : ScoreMode::MeanForeground;

    EvalReport r;
    r.protocol = cfg.protocol;

    if (cfg.protocol == "centroid") {
        ConfusionMatrix4 cm;
        for (const auto& p : patients) {
            auto [probs, labels] = model.predict_volume(p.image);
            const auto pred = extract_lesions(labels, probs, cfg.min_lesion_voxels, score_mode);
            for (const auto& lesion : p.lesions)
                cm.add(lesion.cls, devente_assign_one(lesion.center, pred));
        }
        r.confusion = cm;
        r.kappa = guarded_kappa(cm);
        return r;
    }

    std::vector<PatientLesions> scenes;
    scenes.reserve(patients.size());
    ConfusionMatrix4 miss_cm, matched_cm;
    double dice_sum = 0.0;
    for (const auto& p : patients) {
        auto [probs, labels] = model.predict_volume(p.image);
        PatientLesions scene;
        scene.pred = extract_lesions(labels, probs, cfg.min_lesion_voxels, score_mode);
        scene.truth =
            truth_lesions(p.truth, p.image.in_plane_spacing_mm, p.image.slice_thickness_mm);
        dice_sum += dice(label_voxels(labels, kProstate, kGs8plus),
                         label_voxels(p.truth, kProstate, kGs8plus));
        const MatchResult m = match_lesions(scene.pred, scene.truth, cfg.min_overlap_frac);
        accumulate(miss_cm, grade_confusion(m, scene.pred, scene.truth, ConfusionMode::MissAsGS6));
        accumulate(matched_cm,
                   grade_confusion(m, scene.pred, scene.truth, ConfusionMode::MatchedOnly));
        scenes.push_back(std::move(scene));
    }
    r.dice_prostate = dice_sum / static_cast<double>(patients.size());

    std::set<double> scores;
    for (const auto& s : scenes)
        for (const auto& l : s.pred) scores.insert(l.score);
    std::vector<double> thresholds(scores.rbegin(), scores.rend());
    if (thresholds.empty()) thresholds.push_back(1.0);

    r.froc = froc(scenes, thresholds, cfg.min_overlap_frac, OverlapDenominator::Pred);
    r.sensitivity_at_2fp = sensitivity_at_fp(r.froc, cfg.fp_target);
    const FrocCurve truth_curve =
        froc(scenes, thresholds, cfg.min_overlap_frac, OverlapDenominator::Truth);
    r.sensitivity_at_2fp_truth_denom = sensitivity_at_fp(truth_curve, cfg.fp_target);
    r.confusion = miss_cm;
    r.kappa = guarded_kappa(miss_cm);
    r.kappa_matched_only = guarded_kappa(matched_cm);
    return r;
}

// ---- commands ---------------------------------------------------------------

void cmd_phantom_gen(const std::string& config_path, const std::string& out_dir,
                     std::ostream& out) {
    RunConfig cfg = apply_env_seed(parse_run_config(config_path));
    cfg.validate();
    fs::create_directories(out_dir);
    const Manifest m = generate_dataset(cfg.data, out_dir);
    write_resolved_config(cfg, (fs::path(out_dir) / "resolved.toml").string());
    out << "phantom-gen: " << m.patients.size() << " patients -> " << out_dir << "\n";
}

namespace {

std::string ratio_table(const std::array<std::int64_t, kNumClasses>& annotated,
                        const std::array<std::int64_t, kNumClasses>& truth) {
    const char* headers[] = {"Prostate", "GS 6", "GS 3+4", "GS 4+3", "GS >= 8", "Total"};
    std::int64_t fg_ann = 0, fg_truth = 0;
    for (int c = 1; c < kNumClasses; ++c) {
        fg_ann += annotated[c];
        fg_truth += truth[c];
    }
    char buf[64];
    std::string head = "Class    ", row = "Ratio (%)";
    for (int i = 0; i < 6; ++i) {
        std::snprintf(buf, sizeof(buf), "%10s", headers[i]);
        head += buf;
        const std::int64_t num = i < 5 ? annotated[i + 1] : fg_ann;
        const std::int64_t den = i < 5 ? truth[i + 1] : fg_truth;
        if (den > 0)
            std::snprintf(buf, sizeof(buf), "%10.2f",
                          100.0 * static_cast<double>(num) / static_cast<double>(den));
        else
            std::snprintf(buf, sizeof(buf), "%10s", "-");
        row += buf;
    }
    return head + "\n" + row + "\n";
}

}  // namespace

void cmd_scribble_gen(const std::string& manifest_path, const std::string& mode,
                      const std::string& out_dir, std::ostream& out) {
    const Manifest m = read_manifest(manifest_path);
    if (m.patients.empty()) throw ConfigError("scribble-gen: empty manifest " + manifest_path);

    RunConfig cfg;
    cfg.data = m.config;
    cfg.scribble.mode = mode;
    cfg = apply_env_seed(cfg);
    cfg.scribble.validate();

    fs::create_directories(out_dir);
    const fs::path data_dir = fs::path(manifest_path).parent_path();
    Rng master = Rng(cfg.data.seed).child(0x5343524942ull);

    std::array<std::int64_t, kNumClasses> annotated{}, truth_count{};
    for (std::size_t i = 0; i < m.patients.size(); ++i) {
        const auto& mp = m.patients[i];
        const LabelMap truth = read_label_map((data_dir / mp.labels_path).string());
        AnnotationMask mask;
        Rng stream = master.child(i);
        if (cfg.scribble.mode == "masks") {
            mask = scribbles_from_masks(truth, cfg.scribble.r_max_px, stream);
        } else {
            std::vector<CentroidAnnotation> centers;
            for (const auto& lesion : mp.lesions)
                centers.push_back({lesion.center, lesion.cls, lesion.zone});
            mask = scribbles_from_centroids(centers, truth.grid(), cfg.scribble.r_px,
                                            cfg.scribble.offset_mm);
        }
        write_annotation_mask(mask, (fs::path(out_dir) / (mp.id + ".json")).string());
        for (const auto& e : mask.entries) ++annotated[e.cls];
        for (ClassId c : truth.labels) ++truth_count[c];
    }

    const std::string table = ratio_table(annotated, truth_count);
    out << table;
    std::ofstream tf((fs::path(out_dir) / "ratios.txt").string(), std::ios::binary);
    if (!tf) throw IoError("scribble-gen: cannot write ratio table");
    tf << table;
    write_resolved_config(cfg, (fs::path(out_dir) / "resolved.toml").string());
}

namespace {

void write_run_summary(const TrainResult& res, const TrainConfig& cfg, int fold, int replicate,
                       std::uint64_t seed, const std::string& path) {
    json j;
    j["regime"] = regime_name(cfg.regime);
    j["fold"] = fold;
    j["replicate"] = replicate;
    j["seed"] = seed;
    j["best_epoch"] = res.best_epoch;
    j["best_val_loss"] = res.best_val_loss;
    j["epochs_run"] = res.history.size();
    j["diverged"] = res.diverged;
    j["note"] = res.note;
    j["version"] = kVersion;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

struct TrainedRun {
    TrainResult result;
    std::string dir;
};

// Trains one fold/replicate job and writes checkpoint, history, and summary
// under <out_dir>/<regime>/fold<K>_rep<R>.
TrainedRun run_training_job(const RunConfig& cfg, const Dataset& data, const Fold& fold_split,
                            int fold, int replicate) {
    TrainConfig tc = cfg.train;
    tc.seed = run_seed(cfg.train, fold, replicate);
    Rng init_rng = Rng(tc.seed).child(0x4d4f44454cull);
    UNet model = UNet::build(cfg.model, init_rng);
    TrainedRun run;
    run.result = train(std::move(model), data, fold_split, tc);
    run.dir = (fs::path(cfg.out_dir) / regime_name(tc.regime) /
               ("fold" + std::to_string(fold) + "_rep" + std::to_string(replicate)))
                  .string();
    fs::create_directories(run.dir);
    run.result.model.save((fs::path(run.dir) / "model").string());
    write_history_csv(run.result.history, (fs::path(run.dir) / "history.csv").string());
    write_run_summary(run.result, tc, fold, replicate, tc.seed,
                      (fs::path(run.dir) / "summary.json").string());
    return run;
}

std::vector<EvalPatient> gather_eval_patients(const Dataset& data, const Manifest& m,
                                              const std::vector<std::string>& ids) {
    std::vector<EvalPatient> patients;
    for (const auto& id : ids) {
        const PatientData& p = find_patient(data, id);
        EvalPatient ep;
        ep.id = id;
        ep.image = p.image;
        ep.truth = p.truth;
        for (const auto& mp : m.patients)
            if (mp.id == id) ep.lesions = mp.lesions;
        patients.push_back(std::move(ep));
    }
    return patients;
}

}  // namespace

void cmd_train(const std::string& config_path, const std::string& regime, int fold,
               int replicate, std::ostream& out) {
    RunConfig cfg = apply_env_seed(parse_run_config(config_path));
    if (!regime.empty()) cfg.train.regime = parse_regime(regime);
    cfg.validate();
    if (fold < 0 || fold >= cfg.train.folds)
        throw ConfigError("train: --fold must be in [0, " + std::to_string(cfg.train.folds) +
                          ")");
    if (replicate < 0 || replicate >= cfg.train.replicates)
        throw ConfigError("train: --replicate must be in [0, " +
                          std::to_string(cfg.train.replicates) + ")");

    const Manifest m = read_manifest((fs::path(cfg.data_dir) / "manifest.json").string());
    const Dataset data = load_dataset(m, cfg.data_dir, cfg.annotations_dir);
    const FoldSplit split = make_folds(m, cfg.train.folds, cfg.train.seed);

    const TrainedRun run = run_training_job(cfg, data, split.folds[fold], fold, replicate);
    write_resolved_config(cfg, (fs::path(run.dir) / "resolved.toml").string());
    out << "train " << regime_name(cfg.train.regime) << " fold " << fold << " rep " << replicate
        << ": best epoch " << run.result.best_epoch << " (val " << run.result.best_val_loss
        << ") -> " << run.dir << "\n";
    if (!run.result.note.empty()) out << "  note: " << run.result.note << "\n";
}

void cmd_eval(const std::string& checkpoint_base, const std::string& manifest_path,
              const std::string& protocol, const std::string& out_dir,
              const std::string& config_path, std::ostream& out) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : parse_run_config(config_path);
    cfg = apply_env_seed(cfg);
    if (!protocol.empty()) cfg.eval.protocol = protocol;
    cfg.eval.validate();

    UNet model = UNet::load(checkpoint_base);
    const Manifest m = read_manifest(manifest_path);
    if (m.patients.empty()) throw ConfigError("eval: empty manifest " + manifest_path);
    const fs::path data_dir = fs::path(manifest_path).parent_path();

    std::vector<EvalPatient> patients;
    for (const auto& mp : m.patients) {
        EvalPatient p;
        p.id = mp.id;
        p.image = normalize_intensity(read_volume((data_dir / mp.volume_path).string()));
        p.truth = read_label_map((data_dir / mp.labels_path).string());
        p.lesions = mp.lesions;
        patients.push_back(std::move(p));
    }

    const EvalReport report = evaluate_patients(model, patients, cfg.eval);
    fs::create_directories(out_dir);
    write_eval_report(report, (fs::path(out_dir) / "report.json").string());
    if (cfg.eval.protocol == "private") {
        write_froc_csv(report.froc, (fs::path(out_dir) / "froc.csv").string());
        write_froc_svg(report.froc, (fs::path(out_dir) / "froc.svg").string());
    }
    write_resolved_config(cfg, (fs::path(out_dir) / "resolved.toml").string());
    out << "eval (" << cfg.eval.protocol << "): kappa " << report.kappa;
    if (cfg.eval.protocol == "private")
        out << ", sens@" << cfg.eval.fp_target << "fp " << report.sensitivity_at_2fp
            << ", dice " << report.dice_prostate;
    out << " -> " << out_dir << "\n";
}

namespace {

struct RunMetrics {
    int fold = 0;
    int replicate = 0;
    int best_epoch = 0;
    EvalReport report;
};

std::vector<std::string> metric_keys(const std::string& protocol) {
    if (protocol == "centroid") return {"kappa"};
    return {"kappa", "kappa_matched_only", "sensitivity_at_2fp",
            "sensitivity_at_2fp_truth_denom", "dice_prostate"};
}

double metric_value(const EvalReport& r, const std::string& key) {
    if (key == "kappa") return r.kappa;
    if (key == "kappa_matched_only") return r.kappa_matched_only;
    if (key == "sensitivity_at_2fp") return r.sensitivity_at_2fp;
    if (key == "sensitivity_at_2fp_truth_denom") return r.sensitivity_at_2fp_truth_denom;
    return r.dice_prostate;
}

}  // namespace

void cmd_xval(const std::string& config_path, int jobs, std::ostream& out) {
    RunConfig cfg = apply_env_seed(parse_run_config(config_path));
    cfg.validate();
    if (jobs < 1) throw ConfigError("xval: --jobs must be >= 1");

    const Manifest m = read_manifest((fs::path(cfg.data_dir) / "manifest.json").string());
    const Dataset data = load_dataset(m, cfg.data_dir, cfg.annotations_dir);
    const FoldSplit split = make_folds(m, cfg.train.folds, cfg.train.seed);

    struct Job {
        int fold;
        int replicate;
    };
    std::vector<Job> queue;
    for (int rep = 0; rep < cfg.train.replicates; ++rep)
        for (int fold = 0; fold < cfg.train.folds; ++fold) queue.push_back({fold, rep});

    std::vector<RunMetrics> results(queue.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::string> failures(queue.size());
    const auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < queue.size(); i = next.fetch_add(1)) {
            try {
                const Job job = queue[i];
                TrainedRun run = run_training_job(cfg, data, split.folds[job.fold], job.fold,
                                                  job.replicate);
                const auto patients =
                    gather_eval_patients(data, m, split.folds[job.fold].val_ids);
                RunMetrics rm;
                rm.fold = job.fold;
                rm.replicate = job.replicate;
                rm.best_epoch = run.result.best_epoch;
                rm.report = evaluate_patients(run.result.model, patients, cfg.eval);
                write_eval_report(rm.report, (fs::path(run.dir) / "report.json").string());
                if (cfg.eval.protocol == "private")
                    write_froc_csv(rm.report.froc, (fs::path(run.dir) / "froc.csv").string());
                results[i] = std::move(rm);
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    const int n_workers = std::min<int>(jobs, static_cast<int>(queue.size()));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < queue.size(); ++i)
        if (!failures[i].empty())
            throw IoError("xval: fold " + std::to_string(queue[i].fold) + " rep " +
                          std::to_string(queue[i].replicate) + " failed: " + failures[i]);

    const std::vector<std::string> keys = metric_keys(cfg.eval.protocol);
    json runs = json::array();
    for (const auto& rm : results) {
        json row;
        row["fold"] = rm.fold;
        row["replicate"] = rm.replicate;
        row["best_epoch"] = rm.best_epoch;
        for (const auto& k : keys) row[k] = metric_value(rm.report, k);
        runs.push_back(row);
    }
    json mean, stddev;
    for (const auto& k : keys) {
        double sum = 0.0;
        for (const auto& rm : results) sum += metric_value(rm.report, k);
        const double mu = sum / static_cast<double>(results.size());
        double ss = 0.0;
        for (const auto& rm : results) {
            const double d = metric_value(rm.report, k) - mu;
            ss += d * d;
        }
        mean[k] = mu;
        stddev[k] = results.size() > 1
                        ? std::sqrt(ss / static_cast<double>(results.size() - 1))
                        : 0.0;
    }
    json j;
    j["regime"] = regime_name(cfg.train.regime);
    j["protocol"] = cfg.eval.protocol;
    j["runs"] = runs;
    j["mean"] = mean;
    j["std"] = stddev;
    j["version"] = kVersion;

    const fs::path regime_dir = fs::path(cfg.out_dir) / regime_name(cfg.train.regime);
    fs::create_directories(regime_dir);
    std::ofstream f((regime_dir / "xval.json").string(), std::ios::binary);
    if (!f) throw IoError("xval: cannot write xval.json");
    f << j.dump(2) << "\n";
    write_resolved_config(cfg, (regime_dir / "resolved.toml").string());

    out << "xval " << regime_name(cfg.train.regime) << " (" << results.size() << " runs):";
    for (const auto& k : keys)
        out << " " << k << " " << mean[k].get<double>() << " +/- " << stddev[k].get<double>();
    out << "\n";
}

// ---- argument surface -------------------------------------------------------

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"weakly-supervised multi-class prostate segmentation laboratory"};
    app.name("weakseg");
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(0, 1);

    std::string pg_config, pg_out;
    auto* pg = app.add_subcommand("phantom-gen", "generate a synthetic dataset");
    pg->add_option("--config", pg_config, "run configuration file")->required();
    pg->add_option("--out", pg_out, "output dataset directory")->required();

    std::string sg_manifest, sg_mode = "masks", sg_out;
    auto* sg = app.add_subcommand("scribble-gen", "derive scribble annotations");
    sg->add_option("--manifest", sg_manifest, "dataset manifest.json")->required();
    sg->add_option("--mode", sg_mode, "masks | centroids")
        ->check(CLI::IsMember({"masks", "centroids"}));
    sg->add_option("--out", sg_out, "annotation output directory")->required();

    std::string tr_config, tr_regime;
    int tr_fold = 0, tr_replicate = 0;
    auto* tr = app.add_subcommand("train", "train one fold/replicate");
    tr->add_option("--config", tr_config, "run configuration file")->required();
    tr->add_option("--regime", tr_regime, "supervised | partial-ce | partial-ce-tags");
    tr->add_option("--fold", tr_fold, "fold index");
    tr->add_option("--replicate", tr_replicate, "replicate index");

    std::string ev_checkpoint, ev_manifest, ev_protocol, ev_out, ev_config;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ev_checkpoint, "checkpoint path base")->required();
    ev->add_option("--manifest", ev_manifest, "dataset manifest.json")->required();
    ev->add_option("--protocol", ev_protocol, "private | centroid")
        ->check(CLI::IsMember({"private", "centroid"}));
    ev->add_option("--out", ev_out, "report output directory")->required();
    ev->add_option("--config", ev_config, "run configuration file");

    std::string xv_config;
    int xv_jobs = 1;
    auto* xv = app.add_subcommand("xval", "cross-validate and aggregate");
    xv->add_option("--config", xv_config, "run configuration file")->required();
    xv->add_option("--jobs", xv_jobs, "parallel training jobs");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::CallForVersion& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (pg->parsed())
            cmd_phantom_gen(pg_config, pg_out, out);
        else if (sg->parsed())
            cmd_scribble_gen(sg_manifest, sg_mode, sg_out, out);
        else if (tr->parsed())
            cmd_train(tr_config, tr_regime, tr_fold, tr_replicate, out);
        else if (ev->parsed())
            cmd_eval(ev_checkpoint, ev_manifest, ev_protocol, ev_out, ev_config, out);
        else if (xv->parsed())
            cmd_xval(xv_config, xv_jobs, out);
        else {
            err << app.help();
            return 2;
        }
        return 0;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace weakseg
