#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "weakseg/config.hpp"
#include "weakseg/lesion_eval.hpp"

namespace weakseg {

// One patient's evaluation inputs: the normalized image, the reference label
// map, and the manifest lesion records (centers for the centroid protocol).
struct EvalPatient {
    std::string id;
    Volume image;
    LabelMap truth;
    std::vector<ManifestLesion> lesions;
};

// Segments every patient and fills the protocol's metrics: private -> both
// kappa modes, FROC with both overlap denominators, mean prostate Dice;
// centroid -> De Vente kappa alone. Undefined kappas come back as NaN.
EvalReport evaluate_patients(UNet& model, const std::vector<EvalPatient>& patients,
                             const EvalConfig& cfg);

// The command implementations behind run_cli. Each writes its outputs plus
// the resolved config under the target directory and reports one summary
// line on `out`. Errors surface as ConfigError / IoError /
// std::invalid_argument; run_cli maps them to exit codes.
void cmd_phantom_gen(const std::string& config_path, const std::string& out_dir,
                     std::ostream& out);
void cmd_scribble_gen(const std::string& manifest_path, const std::string& mode,
                      const std::string& out_dir, std::ostream& out);
void cmd_train(const std::string& config_path, const std::string& regime, int fold,
               int replicate, std::ostream& out);
void cmd_eval(const std::string& checkpoint_base, const std::string& manifest_path,
              const std::string& protocol, const std::string& out_dir,
              const std::string& config_path, std::ostream& out);
void cmd_xval(const std::string& config_path, int jobs, std::ostream& out);

// Deterministic per-run seed for fold/replicate jobs.
std::uint64_t run_seed(const TrainConfig& cfg, int fold, int replicate);

// Full command-line surface: parsing, dispatch, and the exit-code contract
// (0 success, 2 configuration error, 3 I/O error).
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace weakseg
