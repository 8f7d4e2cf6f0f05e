#include "weakseg/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace weakseg {

void ScribbleConfig::validate() const {
    if (mode != "masks" && mode != "centroids")
        throw std::invalid_argument("ScribbleConfig: mode must be masks or centroids");
    if (r_max_px < 1) throw std::invalid_argument("ScribbleConfig: r_max_px must be >= 1");
    if (r_px < 1) throw std::invalid_argument("ScribbleConfig: r_px must be >= 1");
    if (!(offset_mm > 0.0)) throw std::invalid_argument("ScribbleConfig: offset_mm must be positive");
}

void EvalConfig::validate() const {
    if (protocol != "private" && protocol != "centroid")
        throw std::invalid_argument("EvalConfig: protocol must be private or centroid");
    if (min_lesion_voxels < 1)
        throw std::invalid_argument("EvalConfig: min_lesion_voxels must be >= 1");
    if (!(min_overlap_frac > 0.0) || min_overlap_frac > 1.0)
        throw std::invalid_argument("EvalConfig: min_overlap_frac must be in (0, 1]");
    if (!(fp_target >= 0.0)) throw std::invalid_argument("EvalConfig: fp_target must be >= 0");
    if (score_mode != "mean" && score_mode != "max")
        throw std::invalid_argument("EvalConfig: score_mode must be mean or max");
}

void RunConfig::validate() const {
    data.validate();
    scribble.validate();
    model.validate();
    train.validate();
    eval.validate();
    if (data_dir.empty() || annotations_dir.empty() || out_dir.empty())
        throw std::invalid_argument("RunConfig: directories must be non-empty");
}

namespace {

std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& raw,
                            const char* expected) {
    throw ConfigError("config key " + key + ": expected " + expected + ", got '" + raw + "'");
}

std::int64_t to_int(const std::string& key, const std::string& raw) {
    std::int64_t v = 0;
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc() || p != raw.data() + raw.size()) bad_value(key, raw, "an integer");
    return v;
}

std::uint64_t to_seed(const std::string& key, const std::string& raw) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc() || p != raw.data() + raw.size())
        bad_value(key, raw, "a non-negative integer");
    return v;
}

double to_double(const std::string& key, const std::string& raw) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc() || p != raw.data() + raw.size()) bad_value(key, raw, "a number");
    return v;
}

bool to_bool(const std::string& key, const std::string& raw) {
    if (raw == "true") return true;
    if (raw == "false") return false;
    bad_value(key, raw, "true or false");
}

std::string to_string_value(const std::string& key, const std::string& raw) {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"')
        return raw.substr(1, raw.size() - 2);
    if (raw.find('"') != std::string::npos) bad_value(key, raw, "a plain or quoted string");
    return raw;
}

void set_key(RunConfig& cfg, const std::string& section, const std::string& key,
             const std::string& raw) {
    const std::string name = section + "." + key;
    if (section == "data") {
        if (key == "n_patients")
            cfg.data.n_patients = static_cast<int>(to_int(name, raw));
        else if (key == "slices")
            cfg.data.grid_shape.slices = static_cast<int>(to_int(name, raw));
        else if (key == "rows")
            cfg.data.grid_shape.rows = static_cast<int>(to_int(name, raw));
        else if (key == "cols")
            cfg.data.grid_shape.cols = static_cast<int>(to_int(name, raw));
        else if (key == "noise_sigma")
            cfg.data.noise_sigma = to_double(name, raw);
        else if (key == "seed")
            cfg.data.seed = to_seed(name, raw);
        else if (key == "dir")
            cfg.data_dir = to_string_value(name, raw);
        else
            throw ConfigError("unknown config key " + name);
    } else if (section == "scribble") {
        if (key == "mode")
            cfg.scribble.mode = to_string_value(name, raw);
        else if (key == "r_max_px")
            cfg.scribble.r_max_px = static_cast<int>(to_int(name, raw));
        else if (key == "r_px")
            cfg.scribble.r_px = static_cast<int>(to_int(name, raw));
        else if (key == "offset_mm")
            cfg.scribble.offset_mm = to_double(name, raw);
        else if (key == "dir")
            cfg.annotations_dir = to_string_value(name, raw);
        else
            throw ConfigError("unknown config key " + name);
    } else if (section == "model") {
        if (key == "base_width")
            cfg.model.base_width = static_cast<int>(to_int(name, raw));
        else
            throw ConfigError("unknown config key " + name);
    } else if (section == "loss") {
        if (key == "lambda")
            cfg.train.loss.lambda = to_double(name, raw);
        else if (key == "w_prostate")
            cfg.train.loss.class_weights[0] = to_double(name, raw);
        else if (key == "w_cancer")
            for (int c = 1; c < kNumClasses - 1; ++c)
                cfg.train.loss.class_weights[c] = to_double(name, raw);
        else
            throw ConfigError("unknown config key " + name);
    } else if (section == "train") {
        if (key == "regime")
            cfg.train.regime = parse_regime(to_string_value(name, raw));
        else if (key == "lr0")
            cfg.train.lr0 = to_double(name, raw);
        else if (key == "lr_decay")
            cfg.train.lr_decay = to_double(name, raw);
        else if (key == "plateau_patience_epochs")
            cfg.train.plateau_patience_epochs = static_cast<int>(to_int(name, raw));
        else if (key == "plateau_min_delta")
            cfg.train.plateau_min_delta = to_double(name, raw);
        else if (key == "l2_gamma")
            cfg.train.l2_gamma = to_double(name, raw);
        else if (key == "batch_size")
            cfg.train.batch_size = static_cast<int>(to_int(name, raw));
        else if (key == "max_epochs")
            cfg.train.max_epochs = static_cast<int>(to_int(name, raw));
        else if (key == "seed")
            cfg.train.seed = to_seed(name, raw);
        else if (key == "folds")
            cfg.train.folds = static_cast<int>(to_int(name, raw));
        else if (key == "replicates")
            cfg.train.replicates = static_cast<int>(to_int(name, raw));
        else if (key == "augment")
            cfg.train.augment = to_bool(name, raw);
        else if (key == "out_dir")
            cfg.out_dir = to_string_value(name, raw);
        else
            throw ConfigError("unknown config key " + name);
    } else if (section == "eval") {
        if (key == "protocol")
            cfg.eval.protocol = to_string_value(name, raw);
        else if (key == "min_lesion_voxels")
            cfg.eval.min_lesion_voxels = static_cast<int>(to_int(name, raw));
        else if (key == "min_overlap_frac")
            cfg.eval.min_overlap_frac = to_double(name, raw);
        else if (key == "fp_target")
            cfg.eval.fp_target = to_double(name, raw);
        else if (key == "score_mode")
            cfg.eval.score_mode = to_string_value(name, raw);
        else
            throw ConfigError("unknown config key " + name);
    } else {
        throw ConfigError("unknown config section [" + section + "]");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip(strip_comment(line));
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(where + ": malformed section header '" + line + "'");
            section = strip(line.substr(1, line.size() - 2));
            if (section != "data" && section != "scribble" && section != "model" &&
                section != "loss" && section != "train" && section != "eval")
                throw ConfigError(where + ": unknown config section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected key = value, got '" + line + "'");
        const std::string key = strip(line.substr(0, eq));
        const std::string raw = strip(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside a section");
        if (key.empty()) throw ConfigError(where + ": empty key");
        set_key(cfg, section, key, raw);
    }
    return cfg;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("parse_run_config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str());
}

void write_resolved_config(const RunConfig& cfg, const std::string& path) {
    std::ostringstream out;
    out << "# " << kVersion << "\n\n";
    out << "[data]\n";
    out << "n_patients = " << cfg.data.n_patients << "\n";
    out << "slices = " << cfg.data.grid_shape.slices << "\n";
    out << "rows = " << cfg.data.grid_shape.rows << "\n";
    out << "cols = " << cfg.data.grid_shape.cols << "\n";
    out << "noise_sigma = " << fmt_double(cfg.data.noise_sigma) << "\n";
    out << "seed = " << cfg.data.seed << "\n";
    out << "dir = \"" << cfg.data_dir << "\"\n\n";
    out << "[scribble]\n";
    out << "mode = \"" << cfg.scribble.mode << "\"\n";
    out << "r_max_px = " << cfg.scribble.r_max_px << "\n";
    out << "r_px = " << cfg.scribble.r_px << "\n";
    out << "offset_mm = " << fmt_double(cfg.scribble.offset_mm) << "\n";
    out << "dir = \"" << cfg.annotations_dir << "\"\n\n";
    out << "[model]\n";
    out << "base_width = " << cfg.model.base_width << "\n\n";
    out << "[loss]\n";
    out << "lambda = " << fmt_double(cfg.train.loss.lambda) << "\n";
    out << "w_prostate = " << fmt_double(cfg.train.loss.class_weights[0]) << "\n";
    out << "w_cancer = " << fmt_double(cfg.train.loss.class_weights[1]) << "\n\n";
    out << "[train]\n";
    out << "regime = \"" << regime_name(cfg.train.regime) << "\"\n";
    out << "lr0 = " << fmt_double(cfg.train.lr0) << "\n";
    out << "lr_decay = " << fmt_double(cfg.train.lr_decay) << "\n";
    out << "plateau_patience_epochs = " << cfg.train.plateau_patience_epochs << "\n";
    out << "plateau_min_delta = " << fmt_double(cfg.train.plateau_min_delta) << "\n";
    out << "l2_gamma = " << fmt_double(cfg.train.l2_gamma) << "\n";
    out << "batch_size = " << cfg.train.batch_size << "\n";
    out << "max_epochs = " << cfg.train.max_epochs << "\n";
    out << "seed = " << cfg.train.seed << "\n";
    out << "folds = " << cfg.train.folds << "\n";
    out << "replicates = " << cfg.train.replicates << "\n";
    out << "augment = " << (cfg.train.augment ? "true" : "false") << "\n";
    out << "out_dir = \"" << cfg.out_dir << "\"\n\n";
    out << "[eval]\n";
    out << "protocol = \"" << cfg.eval.protocol << "\"\n";
    out << "min_lesion_voxels = " << cfg.eval.min_lesion_voxels << "\n";
    out << "min_overlap_frac = " << fmt_double(cfg.eval.min_overlap_frac) << "\n";
    out << "fp_target = " << fmt_double(cfg.eval.fp_target) << "\n";
    out << "score_mode = \"" << cfg.eval.score_mode << "\"\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_resolved_config: cannot open " + path);
    f << out.str();
    if (!f) throw IoError("write_resolved_config: write failed for " + path);
}

RunConfig apply_env_seed(RunConfig cfg) {
    const char* env = std::getenv("WEAKSEG_SEED");
    if (env == nullptr) return cfg;
    const std::uint64_t seed = to_seed("WEAKSEG_SEED", env);
    cfg.data.seed = seed;
    cfg.train.seed = seed;
    return cfg;
}

}  // namespace weakseg
