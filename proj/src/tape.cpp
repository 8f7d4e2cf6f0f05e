#include "weakseg/tape.hpp"

#include <algorithm>
#include <cmath>

namespace weakseg {

template <typename T>
void check_finite(const TensorT<T>& t, const std::string& context) {
    for (const T v : t.values)
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite value in " + context);
}

template <typename T>
Var TapeT<T>::push(TensorT<T> value, bool needs_grad, std::function<void(TapeT&)> back) {
    Node n;
    n.grad = TensorT<T>::zeros(value.shape);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

template <typename T>
Var TapeT<T>::input(TensorT<T> v, bool requires_grad) {
    return push(std::move(v), requires_grad, {});
}

template <typename T>
void TapeT<T>::require_same_shape(Var a, Var b, const char* op) const {
    if (nodes_[a].value.shape != nodes_[b].value.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    nodes_[a].value.shape_str() + " vs " +
                                    nodes_[b].value.shape_str());
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Var TapeT<T>::add(Var a, Var b) {
    check(a);
    check(b);
    require_same_shape(a, b, "add");
    TensorT<T> out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += bv[i];
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, b, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            if (t.nodes_[a].needs_grad) {
                auto& ga = t.nodes_[a].grad.values;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.nodes_[b].needs_grad) {
                auto& gb = t.nodes_[b].grad.values;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::sub(Var a, Var b) {
    check(a);
    check(b);
    require_same_shape(a, b, "sub");
    TensorT<T> out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= bv[i];
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, b, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            if (t.nodes_[a].needs_grad) {
                auto& ga = t.nodes_[a].grad.values;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.nodes_[b].needs_grad) {
                auto& gb = t.nodes_[b].grad.values;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::mul(Var a, Var b) {
    check(a);
    check(b);
    require_same_shape(a, b, "mul");
    TensorT<T> out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= bv[i];
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, b, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            if (t.nodes_[a].needs_grad) {
                auto& ga = t.nodes_[a].grad.values;
                const auto& bv2 = t.nodes_[b].value.values;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (t.nodes_[b].needs_grad) {
                auto& gb = t.nodes_[b].grad.values;
                const auto& av = t.nodes_[a].value.values;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::div(Var a, Var b) {
    check(a);
    check(b);
    require_same_shape(a, b, "div");
    TensorT<T> out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] /= bv[i];
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, b, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& bv2 = t.nodes_[b].value.values;
            if (t.nodes_[a].needs_grad) {
                auto& ga = t.nodes_[a].grad.values;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
            }
            if (t.nodes_[b].needs_grad) {
                auto& gb = t.nodes_[b].grad.values;
                const auto& ov = t.nodes_[o].value.values;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * ov[i] / bv2[i];
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::add_const(Var a, T c) {
    check(a);
    TensorT<T> out = nodes_[a].value;
    for (auto& v : out.values) v += c;
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    return o;
}

template <typename T>
Var TapeT<T>::mul_const(Var a, T c) {
    check(a);
    TensorT<T> out = nodes_[a].value;
    for (auto& v : out.values) v *= c;
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o, c](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        };
    return o;
}

template <typename T>
Var TapeT<T>::square(Var a) {
    check(a);
    TensorT<T> out = nodes_[a].value;
    for (auto& v : out.values) v *= v;
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& av = t.nodes_[a].value.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * av[i] * g[i];
        };
    return o;
}

template <typename T>
Var TapeT<T>::log_clamped(Var a, T floor_val) {
    check(a);
    if (floor_val <= T(0)) throw std::invalid_argument("log_clamped: floor must be positive");
    TensorT<T> out = nodes_[a].value;
    for (auto& v : out.values) v = std::log(std::max(v, floor_val));
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o, floor_val](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& av = t.nodes_[a].value.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] >= floor_val) ga[i] += g[i] / av[i];
        };
    return o;
}

template <typename T>
Var TapeT<T>::leaky_relu(Var a, T slope) {
    check(a);
    TensorT<T> out = nodes_[a].value;
    for (auto& v : out.values)
        if (v < T(0)) v *= slope;
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o, slope](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& av = t.nodes_[a].value.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += (av[i] >= T(0) ? g[i] : slope * g[i]);
        };
    return o;
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Var TapeT<T>::sum(Var a) {
    check(a);
    double acc = 0.0;  // double accumulation keeps large reductions stable
    for (const T v : nodes_[a].value.values) acc += static_cast<double>(v);
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(TensorT<T>::scalar(static_cast<T>(acc)), ng, {});
    if (ng)
        nodes_[o].back = [a, o](TapeT& t) {
            const T g = t.nodes_[o].grad.values[0];
            for (auto& v : t.nodes_[a].grad.values) v += g;
        };
    return o;
}

template <typename T>
Var TapeT<T>::mean(Var a) {
    check(a);
    double acc = 0.0;
    for (const T v : nodes_[a].value.values) acc += static_cast<double>(v);
    const T n = static_cast<T>(nodes_[a].value.numel());
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), ng, {});
    if (ng)
        nodes_[o].back = [a, o, n](TapeT& t) {
            const T g = t.nodes_[o].grad.values[0] / n;
            for (auto& v : t.nodes_[a].grad.values) v += g;
        };
    return o;
}

template <typename T>
Var TapeT<T>::sum_spatial(Var a) {
    check(a);
    const auto& X = nodes_[a].value;
    if (X.shape.size() != 4)
        throw std::invalid_argument("sum_spatial: expected (B,C,H,W), got " + X.shape_str());
    const int B = X.shape[0], C = X.shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(X.shape[2]) * X.shape[3];
    TensorT<T> out = TensorT<T>::zeros({B, C});
    for (int i = 0; i < B * C; ++i) {
        const T* p = X.values.data() + i * plane;
        double acc = 0.0;
        for (std::int64_t j = 0; j < plane; ++j) acc += static_cast<double>(p[j]);
        out.values[i] = static_cast<T>(acc);
    }
    const bool ng = nodes_[a].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, o, plane](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            auto& ga = t.nodes_[a].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i) {
                T* p = ga.data() + i * plane;
                const T gv = g[i];
                for (std::int64_t j = 0; j < plane; ++j) p[j] += gv;
            }
        };
    return o;
}

// ---- neural ops ------------------------------------------------------------

template <typename T>
Var TapeT<T>::conv2d(Var xi, Var wi, Var bi, const std::string& padding) {
    check(xi);
    check(wi);
    check(bi);
    const auto& X = nodes_[xi].value;
    const auto& W = nodes_[wi].value;
    const auto& Bias = nodes_[bi].value;
    if (X.shape.size() != 4 || W.shape.size() != 4)
        throw std::invalid_argument("conv2d: expected 4D activation and weight, got " +
                                    X.shape_str() + " and " + W.shape_str());
    const int B = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
    const int Cout = W.shape[0], kh = W.shape[2], kw = W.shape[3];
    if (W.shape[1] != Cin)
        throw std::invalid_argument("conv2d: channel mismatch " + X.shape_str() + " vs " +
                                    W.shape_str());
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel dims must be odd, got " + W.shape_str());
    if (Bias.shape != std::vector<int>{Cout})
        throw std::invalid_argument("conv2d: bias shape " + Bias.shape_str() +
                                    " does not match weight " + W.shape_str());
    int ph = 0, pw = 0, Hout = 0, Wout = 0;
    if (padding == "same") {
        ph = (kh - 1) / 2;
        pw = (kw - 1) / 2;
        Hout = H;
        Wout = Wd;
    } else if (padding == "valid") {
        Hout = H - kh + 1;
        Wout = Wd - kw + 1;
        if (Hout < 1 || Wout < 1)
            throw std::invalid_argument("conv2d: kernel " + W.shape_str() +
                                        " larger than input " + X.shape_str());
    } else {
        throw std::invalid_argument("conv2d: padding must be \"same\" or \"valid\"");
    }

    TensorT<T> out = TensorT<T>::zeros({B, Cout, Hout, Wout});
    const std::int64_t in_plane = static_cast<std::int64_t>(H) * Wd;
    const std::int64_t out_plane = static_cast<std::int64_t>(Hout) * Wout;
    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Cout; ++co) {
            T* op = out.values.data() + (static_cast<std::int64_t>(b) * Cout + co) * out_plane;
            const T bias = Bias.values[co];
            for (std::int64_t j = 0; j < out_plane; ++j) op[j] = bias;
            for (int ci = 0; ci < Cin; ++ci) {
                const T* xc =
                    X.values.data() + (static_cast<std::int64_t>(b) * Cin + ci) * in_plane;
                const T* wk = W.values.data() +
                              (static_cast<std::int64_t>(co) * Cin + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    const int oy0 = std::max(0, ph - ky);
                    const int oy1 = std::min(Hout, H + ph - ky);
                    for (int kx = 0; kx < kw; ++kx) {
                        const T wv = wk[ky * kw + kx];
                        const int ox0 = std::max(0, pw - kx);
                        const int ox1 = std::min(Wout, Wd + pw - kx);
                        const int xoff = kx - pw;
                        for (int oy = oy0; oy < oy1; ++oy) {
                            const T* xrow = xc + static_cast<std::int64_t>(oy + ky - ph) * Wd;
                            T* orow = op + static_cast<std::int64_t>(oy) * Wout;
                            for (int ox = ox0; ox < ox1; ++ox)
                                orow[ox] += wv * xrow[ox + xoff];
                        }
                    }
                }
            }
        }
    }

    const bool ng = nodes_[xi].needs_grad || nodes_[wi].needs_grad || nodes_[bi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [=](TapeT& t) {
            const auto& G = t.nodes_[o].grad;
            const auto& Xv = t.nodes_[xi].value;
            const auto& Wv = t.nodes_[wi].value;
            const bool gx = t.nodes_[xi].needs_grad;
            const bool gw = t.nodes_[wi].needs_grad;
            const bool gb = t.nodes_[bi].needs_grad;
            if (gb) {
                auto& dB = t.nodes_[bi].grad.values;
                for (int b = 0; b < B; ++b)
                    for (int co = 0; co < Cout; ++co) {
                        const T* gp = G.values.data() +
                                      (static_cast<std::int64_t>(b) * Cout + co) * out_plane;
                        T acc = T(0);
                        for (std::int64_t j = 0; j < out_plane; ++j) acc += gp[j];
                        dB[co] += acc;
                    }
            }
            if (!gx && !gw) return;
            for (int b = 0; b < B; ++b) {
                for (int co = 0; co < Cout; ++co) {
                    const T* gp = G.values.data() +
                                  (static_cast<std::int64_t>(b) * Cout + co) * out_plane;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const T* xc = Xv.values.data() +
                                      (static_cast<std::int64_t>(b) * Cin + ci) * in_plane;
                        T* dxc = gx ? t.nodes_[xi].grad.values.data() +
                                          (static_cast<std::int64_t>(b) * Cin + ci) * in_plane
                                    : nullptr;
                        const T* wk = Wv.values.data() +
                                      (static_cast<std::int64_t>(co) * Cin + ci) * kh * kw;
                        T* dwk = gw ? t.nodes_[wi].grad.values.data() +
                                          (static_cast<std::int64_t>(co) * Cin + ci) * kh * kw
                                    : nullptr;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int oy0 = std::max(0, ph - ky);
                            const int oy1 = std::min(Hout, H + ph - ky);
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ox0 = std::max(0, pw - kx);
                                const int ox1 = std::min(Wout, Wd + pw - kx);
                                const int xoff = kx - pw;
                                if (gw) {
                                    T acc = T(0);
                                    for (int oy = oy0; oy < oy1; ++oy) {
                                        const T* xrow =
                                            xc + static_cast<std::int64_t>(oy + ky - ph) * Wd;
                                        const T* grow =
                                            gp + static_cast<std::int64_t>(oy) * Wout;
                                        for (int ox = ox0; ox < ox1; ++ox)
                                            acc += grow[ox] * xrow[ox + xoff];
                                    }
                                    dwk[ky * kw + kx] += acc;
                                }
                                if (gx) {
                                    const T wv = wk[ky * kw + kx];
                                    for (int oy = oy0; oy < oy1; ++oy) {
                                        T* dxrow =
                                            dxc + static_cast<std::int64_t>(oy + ky - ph) * Wd;
                                        const T* grow =
                                            gp + static_cast<std::int64_t>(oy) * Wout;
                                        for (int ox = ox0; ox < ox1; ++ox)
                                            dxrow[ox + xoff] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::maxpool2(Var xi) {
    check(xi);
    const auto& X = nodes_[xi].value;
    if (X.shape.size() != 4)
        throw std::invalid_argument("maxpool2: expected (B,C,H,W), got " + X.shape_str());
    const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("maxpool2: spatial dims must be even, got " + X.shape_str());
    const int Ho = H / 2, Wo = W / 2;
    TensorT<T> out = TensorT<T>::zeros({B, C, Ho, Wo});
    std::vector<unsigned char> arg(out.values.size());  // 2*dy + dx of the max
    const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
    for (int i = 0; i < B * C; ++i) {
        const T* xp = X.values.data() + i * in_plane;
        T* op = out.values.data() + i * out_plane;
        unsigned char* ap = arg.data() + i * out_plane;
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                T best = xp[(2 * oy) * W + 2 * ox];
                unsigned char which = 0;
                for (unsigned char k = 1; k < 4; ++k) {
                    const T v = xp[(2 * oy + k / 2) * W + 2 * ox + k % 2];
                    if (v > best) {
                        best = v;
                        which = k;
                    }
                }
                op[oy * Wo + ox] = best;
                ap[oy * Wo + ox] = which;
            }
        }
    }
    const bool ng = nodes_[xi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [xi, o, B, C, W, Ho, Wo, in_plane, out_plane,
                          arg = std::move(arg)](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            auto& dx = t.nodes_[xi].grad.values;
            for (int i = 0; i < B * C; ++i) {
                const T* gp = g.data() + i * out_plane;
                T* dxp = dx.data() + i * in_plane;
                const unsigned char* ap = arg.data() + i * out_plane;
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const unsigned char k = ap[oy * Wo + ox];
                        dxp[(2 * oy + k / 2) * W + 2 * ox + k % 2] += gp[oy * Wo + ox];
                    }
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::upsample2_nearest(Var xi) {
    check(xi);
    const auto& X = nodes_[xi].value;
    if (X.shape.size() != 4)
        throw std::invalid_argument("upsample2_nearest: expected (B,C,H,W), got " +
                                    X.shape_str());
    const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    const int Ho = 2 * H, Wo = 2 * W;
    TensorT<T> out = TensorT<T>::zeros({B, C, Ho, Wo});
    const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
    for (int i = 0; i < B * C; ++i) {
        const T* xp = X.values.data() + i * in_plane;
        T* op = out.values.data() + i * out_plane;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const T v = xp[y * W + x];
                op[(2 * y) * Wo + 2 * x] = v;
                op[(2 * y) * Wo + 2 * x + 1] = v;
                op[(2 * y + 1) * Wo + 2 * x] = v;
                op[(2 * y + 1) * Wo + 2 * x + 1] = v;
            }
    }
    const bool ng = nodes_[xi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [xi, o, B, C, H, W, Wo, in_plane, out_plane](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            auto& dx = t.nodes_[xi].grad.values;
            for (int i = 0; i < B * C; ++i) {
                const T* gp = g.data() + i * out_plane;
                T* dxp = dx.data() + i * in_plane;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        dxp[y * W + x] += gp[(2 * y) * Wo + 2 * x] +
                                          gp[(2 * y) * Wo + 2 * x + 1] +
                                          gp[(2 * y + 1) * Wo + 2 * x] +
                                          gp[(2 * y + 1) * Wo + 2 * x + 1];
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::concat_channels(Var a, Var b) {
    check(a);
    check(b);
    const auto& A = nodes_[a].value;
    const auto& Bv = nodes_[b].value;
    if (A.shape.size() != 4 || Bv.shape.size() != 4 || A.shape[0] != Bv.shape[0] ||
        A.shape[2] != Bv.shape[2] || A.shape[3] != Bv.shape[3])
        throw std::invalid_argument("concat_channels: incompatible shapes " + A.shape_str() +
                                    " vs " + Bv.shape_str());
    const int B = A.shape[0], Ca = A.shape[1], Cb = Bv.shape[1], H = A.shape[2], W = A.shape[3];
    TensorT<T> out = TensorT<T>::zeros({B, Ca + Cb, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int bb = 0; bb < B; ++bb) {
        std::copy(A.values.begin() + bb * Ca * plane, A.values.begin() + (bb + 1) * Ca * plane,
                  out.values.begin() + bb * (Ca + Cb) * plane);
        std::copy(Bv.values.begin() + bb * Cb * plane, Bv.values.begin() + (bb + 1) * Cb * plane,
                  out.values.begin() + (bb * (Ca + Cb) + Ca) * plane);
    }
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [a, b, o, B, Ca, Cb, plane](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            for (int bb = 0; bb < B; ++bb) {
                if (t.nodes_[a].needs_grad) {
                    auto& ga = t.nodes_[a].grad.values;
                    const T* gp = g.data() + bb * (Ca + Cb) * plane;
                    T* dst = ga.data() + bb * Ca * plane;
                    for (std::int64_t i = 0; i < Ca * plane; ++i) dst[i] += gp[i];
                }
                if (t.nodes_[b].needs_grad) {
                    auto& gb = t.nodes_[b].grad.values;
                    const T* gp = g.data() + (bb * (Ca + Cb) + Ca) * plane;
                    T* dst = gb.data() + bb * Cb * plane;
                    for (std::int64_t i = 0; i < Cb * plane; ++i) dst[i] += gp[i];
                }
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::batchnorm(Var xi, Var gi, Var bi, TensorT<T>* running_mean,
                        TensorT<T>* running_var, bool training, T momentum, T eps) {
    check(xi);
    check(gi);
    check(bi);
    const auto& X = nodes_[xi].value;
    if (X.shape.size() != 4)
        throw std::invalid_argument("batchnorm: expected (B,C,H,W), got " + X.shape_str());
    const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    const std::vector<int> cshape{C};
    if (nodes_[gi].value.shape != cshape || nodes_[bi].value.shape != cshape)
        throw std::invalid_argument("batchnorm: gamma/beta must be (C) for input " +
                                    X.shape_str());
    if (!running_mean || !running_var || running_mean->shape != cshape ||
        running_var->shape != cshape)
        throw std::invalid_argument("batchnorm: running stats must be (C) tensors");

    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t n_per_c = static_cast<std::int64_t>(B) * plane;
    std::vector<T> mean_c(C), inv_std(C);
    if (training) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;  // double accumulation keeps batch statistics stable
            for (int b = 0; b < B; ++b) {
                const T* p = X.values.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t j = 0; j < plane; ++j) acc += static_cast<double>(p[j]);
            }
            mean_c[c] = static_cast<T>(acc / static_cast<double>(n_per_c));
            double vacc = 0.0;
            for (int b = 0; b < B; ++b) {
                const T* p = X.values.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    const double d = static_cast<double>(p[j]) - static_cast<double>(mean_c[c]);
                    vacc += d * d;
                }
            }
            const T var = static_cast<T>(vacc / static_cast<double>(n_per_c));
            inv_std[c] = T(1) / std::sqrt(var + eps);
            running_mean->values[c] =
                momentum * running_mean->values[c] + (T(1) - momentum) * mean_c[c];
            running_var->values[c] =
                momentum * running_var->values[c] + (T(1) - momentum) * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[c] = running_mean->values[c];
            inv_std[c] = T(1) / std::sqrt(running_var->values[c] + eps);
        }
    }

    TensorT<T> xhat = TensorT<T>::zeros(X.shape);
    TensorT<T> out = TensorT<T>::zeros(X.shape);
    const auto& gamma = nodes_[gi].value.values;
    const auto& beta = nodes_[bi].value.values;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* p = X.values.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            T* xh = xhat.values.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            T* op = out.values.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            const T mu = mean_c[c], is = inv_std[c], ga = gamma[c], be = beta[c];
            for (std::int64_t j = 0; j < plane; ++j) {
                xh[j] = (p[j] - mu) * is;
                op[j] = ga * xh[j] + be;
            }
        }

    const bool ng = nodes_[xi].needs_grad || nodes_[gi].needs_grad || nodes_[bi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [xi, gi, bi, o, B, C, plane, n_per_c, training,
                          xhat = std::move(xhat), inv_std = std::move(inv_std)](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& gamma = t.nodes_[gi].value.values;
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (int b = 0; b < B; ++b) {
                    const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                    const T* gp = g.data() + off;
                    const T* xh = xhat.values.data() + off;
                    for (std::int64_t j = 0; j < plane; ++j) {
                        sum_dy += static_cast<double>(gp[j]);
                        sum_dy_xh += static_cast<double>(gp[j]) * static_cast<double>(xh[j]);
                    }
                }
                if (t.nodes_[gi].needs_grad)
                    t.nodes_[gi].grad.values[c] += static_cast<T>(sum_dy_xh);
                if (t.nodes_[bi].needs_grad) t.nodes_[bi].grad.values[c] += static_cast<T>(sum_dy);
                if (t.nodes_[xi].needs_grad) {
                    auto& dx = t.nodes_[xi].grad.values;
                    const T ga_is = gamma[c] * inv_std[c];
                    if (training) {
                        const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(n_per_c));
                        const T mean_dy_xh =
                            static_cast<T>(sum_dy_xh / static_cast<double>(n_per_c));
                        for (int b = 0; b < B; ++b) {
                            const std::int64_t off =
                                (static_cast<std::int64_t>(b) * C + c) * plane;
                            const T* gp = g.data() + off;
                            const T* xh = xhat.values.data() + off;
                            T* dxp = dx.data() + off;
                            for (std::int64_t j = 0; j < plane; ++j)
                                dxp[j] += ga_is * (gp[j] - mean_dy - xh[j] * mean_dy_xh);
                        }
                    } else {
                        // fixed statistics: pure affine map
                        for (int b = 0; b < B; ++b) {
                            const std::int64_t off =
                                (static_cast<std::int64_t>(b) * C + c) * plane;
                            const T* gp = g.data() + off;
                            T* dxp = dx.data() + off;
                            for (std::int64_t j = 0; j < plane; ++j) dxp[j] += ga_is * gp[j];
                        }
                    }
                }
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::softmax_channels(Var xi) {
    check(xi);
    const auto& X = nodes_[xi].value;
    if (X.shape.size() != 4)
        throw std::invalid_argument("softmax_channels: expected (B,C,H,W), got " +
                                    X.shape_str());
    const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    TensorT<T> out = TensorT<T>::zeros(X.shape);
    for (int b = 0; b < B; ++b) {
        const T* xp = X.values.data() + static_cast<std::int64_t>(b) * C * plane;
        T* op = out.values.data() + static_cast<std::int64_t>(b) * C * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
            T mx = xp[j];
            for (int c = 1; c < C; ++c) mx = std::max(mx, xp[c * plane + j]);
            T z = T(0);
            for (int c = 0; c < C; ++c) {
                const T e = std::exp(xp[c * plane + j] - mx);
                op[c * plane + j] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (int c = 0; c < C; ++c) op[c * plane + j] *= inv;
        }
    }
    const bool ng = nodes_[xi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [xi, o, B, C, plane](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& y = t.nodes_[o].value.values;
            auto& dx = t.nodes_[xi].grad.values;
            for (int b = 0; b < B; ++b) {
                const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    T dot = T(0);
                    for (int c = 0; c < C; ++c)
                        dot += g[base + c * plane + j] * y[base + c * plane + j];
                    for (int c = 0; c < C; ++c)
                        dx[base + c * plane + j] +=
                            y[base + c * plane + j] * (g[base + c * plane + j] - dot);
                }
            }
        };
    return o;
}

template <typename T>
Var TapeT<T>::size_bound_penalty(Var vi, const TensorT<T>& lower, const TensorT<T>& upper) {
    check(vi);
    const auto& V = nodes_[vi].value;
    if (lower.shape != V.shape || upper.shape != V.shape)
        throw std::invalid_argument("size_bound_penalty: bounds shape " + lower.shape_str() +
                                    "/" + upper.shape_str() + " does not match " +
                                    V.shape_str());
    for (std::size_t i = 0; i < lower.values.size(); ++i)
        if (lower.values[i] > upper.values[i])
            throw std::invalid_argument("size_bound_penalty: lower bound exceeds upper bound");
    TensorT<T> out = TensorT<T>::zeros(V.shape);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const T v = V.values[i];
        if (v < lower.values[i]) {
            const T d = v - lower.values[i];
            out.values[i] = d * d;
        } else if (v > upper.values[i]) {
            const T d = v - upper.values[i];
            out.values[i] = d * d;
        }
    }
    const bool ng = nodes_[vi].needs_grad;
    const Var o = push(std::move(out), ng, {});
    if (ng)
        nodes_[o].back = [vi, o, lower, upper](TapeT& t) {
            const auto& g = t.nodes_[o].grad.values;
            const auto& v = t.nodes_[vi].value.values;
            auto& dv = t.nodes_[vi].grad.values;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (v[i] < lower.values[i])
                    dv[i] += T(2) * (v[i] - lower.values[i]) * g[i];
                else if (v[i] > upper.values[i])
                    dv[i] += T(2) * (v[i] - upper.values[i]) * g[i];
            }
        };
    return o;
}

template <typename T>
void TapeT<T>::backward(Var loss) {
    check(loss);
    if (nodes_[loss].value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    nodes_[loss].value.shape_str());
    nodes_[loss].grad.values[0] = T(1);
    for (Var i = loss; i >= 0; --i)
        if (nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(*this);
}

// ---- gradient verification -------------------------------------------------

template <typename T>
GradCheckReport grad_check(const std::function<Var(TapeT<T>&, Var)>& f, const TensorT<T>& x,
                           T eps, double discontinuity_tol, double denom_floor,
                           double kink_floor) {
    auto eval = [&f](const TensorT<T>& probe) {
        TapeT<T> tape;
        const Var xi = tape.input(probe, false);
        const Var li = f(tape, xi);
        if (tape.value(li).numel() != 1)
            throw std::invalid_argument("grad_check: f must be scalar-valued");
        return static_cast<double>(tape.value(li).values[0]);
    };

    TapeT<T> tape;
    const Var xi = tape.input(x, true);
    const Var li = f(tape, xi);
    if (tape.value(li).numel() != 1)
        throw std::invalid_argument("grad_check: f must be scalar-valued");
    tape.backward(li);
    const TensorT<T> analytic = tape.grad(xi);

    const double f0 = eval(x);
    GradCheckReport rep;
    TensorT<T> probe = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T orig = probe.values[i];
        probe.values[i] = orig + eps;
        const double fp = eval(probe);
        probe.values[i] = orig - eps;
        const double fm = eval(probe);
        probe.values[i] = orig;
        const double dplus = (fp - f0) / static_cast<double>(eps);
        const double dminus = (f0 - fm) / static_cast<double>(eps);
        // one-sided slopes that disagree mean a kink at the probe point;
        // kink_floor sets the scale below which disagreement reads as noise
        if (std::abs(dplus - dminus) >
            discontinuity_tol * std::max({kink_floor, std::abs(dplus), std::abs(dminus)})) {
            rep.flagged.push_back(i);
            continue;
        }
        const double numeric = 0.5 * (dplus + dminus);
        const double a = static_cast<double>(analytic.values[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
        rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - numeric) / denom);
        rep.checked++;
    }
    return rep;
}

template void check_finite<float>(const TensorT<float>&, const std::string&);
template void check_finite<double>(const TensorT<double>&, const std::string&);
template class TapeT<float>;
template class TapeT<double>;
template GradCheckReport grad_check<float>(const std::function<Var(TapeT<float>&, Var)>&,
                                           const TensorT<float>&, float, double, double, double);
template GradCheckReport grad_check<double>(const std::function<Var(TapeT<double>&, Var)>&,
                                            const TensorT<double>&, double, double, double,
                                            double);

}  // namespace weakseg
