#include "weakseg/unet.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>

namespace weakseg {

namespace {

Tensor he_uniform(const std::vector<int>& shape, Rng& rng) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(shape);
    for (float& v : t.values) v = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace

void UNetConfig::validate() const {
    if (base_width < 1) throw std::invalid_argument("unet: base_width must be >= 1");
    if (depth != 4) throw std::invalid_argument("unet: depth must be 4");
    if (in_channels < 1) throw std::invalid_argument("unet: in_channels must be >= 1");
    if (out_channels < 2) throw std::invalid_argument("unet: out_channels must be >= 2");
}

UNet UNet::build(const UNetConfig& cfg, Rng& rng) {
    cfg.validate();
    UNet net;
    net.cfg = cfg;
    const int w1 = cfg.base_width, w2 = 2 * w1, w3 = 4 * w1, w4 = 8 * w1;

    auto add_conv = [&](const std::string& name, int cin, int cout, int k) {
        net.params.push_back({name + ".w", he_uniform({cout, cin, k, k}, rng)});
        net.params.push_back({name + ".b", Tensor::zeros({cout})});
    };
    auto add_bn = [&](const std::string& name, int c) {
        net.params.push_back({name + ".gamma", Tensor::full({c}, 1.0f)});
        net.params.push_back({name + ".beta", Tensor::zeros({c})});
        net.buffers.push_back({name + ".running_mean", Tensor::zeros({c})});
        net.buffers.push_back({name + ".running_var", Tensor::full({c}, 1.0f)});
    };
    auto add_block = [&](const std::string& blk, int cin, int cout) {
        add_conv(blk + ".conv1", cin, cout, 3);
        add_bn(blk + ".bn1", cout);
        add_conv(blk + ".conv2", cout, cout, 3);
        add_bn(blk + ".bn2", cout);
    };

    add_block("enc1", cfg.in_channels, w1);
    add_block("enc2", w1, w2);
    add_block("enc3", w2, w3);
    add_block("enc4", w3, w4);
    add_conv("dec3.proj", w4, w3, 1);
    add_block("dec3", 2 * w3, w3);
    add_conv("dec2.proj", w3, w2, 1);
    add_block("dec2", 2 * w2, w2);
    add_conv("dec1.proj", w2, w1, 1);
    add_block("dec1", 2 * w1, w1);
    add_conv("out", w1, cfg.out_channels, 1);
    return net;
}

Tensor& UNet::param(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p.tensor;
    throw std::invalid_argument("unet: unknown parameter " + name);
}

Tensor& UNet::buffer(const std::string& name) {
    for (auto& b : buffers)
        if (b.name == name) return b.tensor;
    throw std::invalid_argument("unet: unknown buffer " + name);
}

std::int64_t UNet::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

Var UNet::forward(Tape& tape, Var x, bool training, std::vector<Var>* param_vars_out,
                  const std::unordered_map<std::string, Var>* overrides) {
    return forward_t<float>(tape, x, training, param_vars_out, overrides);
}

template <typename U>
Var UNet::forward_t(TapeT<U>& tape, Var x, bool training, std::vector<Var>* param_vars_out,
                    const std::unordered_map<std::string, Var>* overrides) {
    const auto& xs = tape.value(x).shape;
    if (xs.size() != 4 || xs[1] != cfg.in_channels)
        throw std::invalid_argument("unet: input must be (B," + std::to_string(cfg.in_channels) +
                                    ",H,W), got " + tape.value(x).shape_str());
    if (xs[2] % 8 != 0 || xs[3] % 8 != 0)
        throw std::invalid_argument("unet: spatial dims must be divisible by 8, got " +
                                    tape.value(x).shape_str());

    std::unordered_map<std::string, Var> pv;
    pv.reserve(params.size());
    if (param_vars_out) param_vars_out->clear();
    for (const auto& p : params) {
        Var v;
        if (overrides && overrides->count(p.name)) {
            v = overrides->at(p.name);
            if (tape.value(v).shape != p.tensor.shape)
                throw std::invalid_argument("unet: override for " + p.name + " has shape " +
                                            tape.value(v).shape_str() + ", expected " +
                                            p.tensor.shape_str());
        } else {
            v = tape.input(p.tensor.template cast<U>(), training);
        }
        pv.emplace(p.name, v);
        if (param_vars_out) param_vars_out->push_back(v);
    }

    // float runs against the stored running statistics; other precisions get
    // per-call scratch copies (addresses stay stable: unordered_map nodes)
    std::unordered_map<std::string, TensorT<U>> scratch;
    auto buf = [&](const std::string& name) -> TensorT<U>* {
        if constexpr (std::is_same_v<U, float>) {
            return &buffer(name);
        } else {
            auto it = scratch.find(name);
            if (it == scratch.end())
                it = scratch.emplace(name, buffer(name).template cast<U>()).first;
            return &it->second;
        }
    };

    auto unit = [&](Var h, const std::string& blk, int idx) {
        const std::string conv = blk + ".conv" + std::to_string(idx);
        const std::string bn = blk + ".bn" + std::to_string(idx);
        h = tape.conv2d(h, pv.at(conv + ".w"), pv.at(conv + ".b"), "same");
        h = tape.batchnorm(h, pv.at(bn + ".gamma"), pv.at(bn + ".beta"),
                           buf(bn + ".running_mean"), buf(bn + ".running_var"), training);
        h = tape.leaky_relu(h, U(0.01));
        check_finite(tape.value(h), conv);
        return h;
    };
    auto block = [&](Var h, const std::string& blk) { return unit(unit(h, blk, 1), blk, 2); };
    auto up = [&](Var h, Var skip, const std::string& proj) {
        h = tape.upsample2_nearest(h);
        h = tape.conv2d(h, pv.at(proj + ".w"), pv.at(proj + ".b"), "same");
        check_finite(tape.value(h), proj);
        return tape.concat_channels(h, skip);
    };

    Var e1 = block(x, "enc1");
    Var e2 = block(tape.maxpool2(e1), "enc2");
    Var e3 = block(tape.maxpool2(e2), "enc3");
    Var e4 = block(tape.maxpool2(e3), "enc4");
    Var d3 = block(up(e4, e3, "dec3.proj"), "dec3");
    Var d2 = block(up(d3, e2, "dec2.proj"), "dec2");
    Var d1 = block(up(d2, e1, "dec1.proj"), "dec1");
    Var logits = tape.conv2d(d1, pv.at("out.w"), pv.at("out.b"), "same");
    check_finite(tape.value(logits), "out");
    return tape.softmax_channels(logits);
}

Tensor UNet::infer_batch(const Tensor& x) {
    Tape tape;
    Var in = tape.input(x, false);
    Var out = forward(tape, in, false);
    return tape.value(out);
}

std::pair<Volume, LabelMap> UNet::predict_volume(const Volume& v) {
    if (v.channels != cfg.in_channels)
        throw std::invalid_argument("unet: volume has " + std::to_string(v.channels) +
                                    " channels, expected " + std::to_string(cfg.in_channels));
    Volume probs = Volume::zeros(cfg.out_channels, v.slices, v.rows, v.cols);
    probs.in_plane_spacing_mm = v.in_plane_spacing_mm;
    probs.slice_thickness_mm = v.slice_thickness_mm;

    const std::int64_t plane = static_cast<std::int64_t>(v.rows) * v.cols;
    for (int d = 0; d < v.slices; ++d) {
        Tensor x = Tensor::zeros({1, cfg.in_channels, v.rows, v.cols});
        for (int c = 0; c < cfg.in_channels; ++c)
            for (std::int64_t i = 0; i < plane; ++i)
                x.values[c * plane + i] = v.data[(static_cast<std::int64_t>(c) * v.slices + d) * plane + i];
        Tensor y = infer_batch(x);
        for (int c = 0; c < cfg.out_channels; ++c)
            for (std::int64_t i = 0; i < plane; ++i)
                probs.data[(static_cast<std::int64_t>(c) * v.slices + d) * plane + i] =
                    y.values[c * plane + i];
    }
    LabelMap labels = argmax_labels(probs);
    return {std::move(probs), std::move(labels)};
}

LabelMap argmax_labels(const Volume& probs) {
    LabelMap labels = LabelMap::zeros(probs.slices, probs.rows, probs.cols);
    const std::int64_t n = labels.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        float best_p = probs.data[i];
        for (int c = 1; c < probs.channels; ++c) {
            const float p = probs.data[c * n + i];
            if (p > best_p) {  // ties keep the lower class
                best_p = p;
                best = c;
            }
        }
        labels.labels[i] = static_cast<ClassId>(best);
    }
    return labels;
}

void UNet::save(const std::string& path_base) const {
    std::vector<NamedTensor> all = params;
    all.insert(all.end(), buffers.begin(), buffers.end());
    save_checkpoint(all, path_base);
}

UNet UNet::load(const std::string& path_base) {
    const std::vector<NamedTensor> all = load_checkpoint(path_base);
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& t : all) by_name.emplace(t.name, &t.tensor);

    auto shape_of = [&](const std::string& name) -> const std::vector<int>& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + name);
        return it->second->shape;
    };
    UNetConfig cfg;
    const auto& first = shape_of("enc1.conv1.w");
    if (first.size() != 4) throw IoError("checkpoint tensor enc1.conv1.w has unexpected rank");
    cfg.base_width = first[0];
    cfg.in_channels = first[1];
    cfg.out_channels = shape_of("out.w")[0];

    Rng rng(0);
    UNet net = build(cfg, rng);
    if (all.size() != net.params.size() + net.buffers.size())
        throw IoError("checkpoint holds " + std::to_string(all.size()) + " tensors, expected " +
                      std::to_string(net.params.size() + net.buffers.size()));
    auto fill = [&](std::vector<NamedTensor>& dst) {
        for (auto& d : dst) {
            auto it = by_name.find(d.name);
            if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + d.name);
            if (it->second->shape != d.tensor.shape)
                throw IoError("checkpoint tensor " + d.name + " has shape " +
                              it->second->shape_str() + ", expected " + d.tensor.shape_str());
            d.tensor = *it->second;
        }
    };
    fill(net.params);
    fill(net.buffers);
    return net;
}

template Var UNet::forward_t<float>(TapeT<float>&, Var, bool, std::vector<Var>*,
                                    const std::unordered_map<std::string, Var>*);
template Var UNet::forward_t<double>(TapeT<double>&, Var, bool, std::vector<Var>*,
                                     const std::unordered_map<std::string, Var>*);

}  // namespace weakseg
