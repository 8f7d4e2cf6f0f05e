#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "weakseg/checkpoint.hpp"
#include "weakseg/tape.hpp"
#include "weakseg/volume.hpp"

namespace weakseg {

struct UNetConfig {
    int base_width = 8;
    int depth = 4;  // fixed four-block layout
    int in_channels = 2;
    int out_channels = kNumClasses;

    void validate() const;
};

// Four-block 2D U-Net: encoder blocks of (conv-BN-leakyReLU x2) with 2x2
// max-pooling between them, a symmetric decoder (nearest x2 upsampling, 1x1
// projection conv, skip concatenation, conv-BN-leakyReLU x2), and a final 1x1
// conv into a 6-channel softmax. Channel widths double per block from
// base_width. All convs are 3x3 same-padding except the stated 1x1 ones.
class UNet {
public:
    UNetConfig cfg;
    std::vector<NamedTensor> params;
    std::vector<NamedTensor> buffers;  // batchnorm running statistics

    // He-uniform initialization drawn from the stream in declaration order
    static UNet build(const UNetConfig& cfg, Rng& rng);

    // Registers every parameter on the tape (requires_grad = training) and
    // runs the network; returns softmax probabilities (B,6,H,W). Training
    // mode uses batch statistics and updates the running buffers in place.
    // Activations are checked for NaN/Inf layer by layer.
    // param_vars_out, when given, receives the tape handle of each parameter
    // in params order (for optimizer gradient reads). overrides binds named
    // parameters to existing tape handles instead of the stored tensors,
    // e.g. to differentiate with respect to a probe variable.
    Var forward(Tape& tape, Var x, bool training, std::vector<Var>* param_vars_out = nullptr,
                const std::unordered_map<std::string, Var>* overrides = nullptr);

    // Same network on an arbitrary-precision tape (parameters and running
    // statistics are cast per call). Non-float instantiations do not persist
    // running-statistic updates; they exist for high-precision verification.
    template <typename U>
    Var forward_t(TapeT<U>& tape, Var x, bool training, std::vector<Var>* param_vars_out = nullptr,
                  const std::unordered_map<std::string, Var>* overrides = nullptr);

    // Inference-mode forward returning plain values.
    Tensor infer_batch(const Tensor& x);

    // Slice-by-slice inference over a preprocessed 2-channel volume: a
    // 6-channel probability volume plus its argmax labels (ties resolved
    // toward the lower class index).
    std::pair<Volume, LabelMap> predict_volume(const Volume& v);

    // One checkpoint holds parameters then buffers.
    void save(const std::string& path_base) const;
    static UNet load(const std::string& path_base);

    Tensor& param(const std::string& name);
    Tensor& buffer(const std::string& name);
    std::int64_t parameter_count() const;
};

// Per-voxel argmax over the channel axis of a class-probability volume,
// ties broken toward the lower class index.
LabelMap argmax_labels(const Volume& probs);

}  // namespace weakseg
