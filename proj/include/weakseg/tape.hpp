#pragma once

#include <functional>
#include <vector>

#include "weakseg/tensor.hpp"

namespace weakseg {

// Node handle within one tape.
using Var = int;

// Reverse-mode differentiation tape. Each operation appends a node holding
// its output value, a zero-initialized gradient buffer, and a closure that
// pushes the node's gradient into its parents. backward() replays the
// closures in reverse creation order, which is a reverse topological order
// because nodes only reference earlier nodes.
//
// A tape is built fresh per training step; parameters enter via input(...,
// requires_grad=true) and their gradients are read back through grad().
// Single-threaded by design; distinct tapes may live on distinct threads.
template <typename T>
class TapeT {
public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    Var input(TensorT<T> v, bool requires_grad = false);

    const TensorT<T>& value(Var v) const { return nodes_[check(v)].value; }
    const TensorT<T>& grad(Var v) const { return nodes_[check(v)].grad; }
    std::size_t size() const { return nodes_.size(); }

    // elementwise, equal shapes
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var add_const(Var a, T c);
    Var mul_const(Var a, T c);
    Var square(Var a);
    // log(max(x, floor)); gradient is stopped below the clamp floor
    Var log_clamped(Var a, T floor_val);
    Var leaky_relu(Var a, T slope);

    // reductions
    Var sum(Var a);
    Var mean(Var a);
    // (B,C,H,W) -> (B,C), summing each spatial plane (the soft size V_S)
    Var sum_spatial(Var a);

    // neural ops; activations are (B,C,H,W)
    // weight (Cout,Cin,kh,kw) with odd kernel dims, bias (Cout); stride 1
    Var conv2d(Var x, Var w, Var b, const std::string& padding = "same");
    Var maxpool2(Var x);
    Var upsample2_nearest(Var x);
    Var concat_channels(Var a, Var b);
    // Running statistics live outside the tape and are updated in place in
    // training mode as running = momentum * running + (1 - momentum) * batch,
    // with biased batch variance.
    Var batchnorm(Var x, Var gamma, Var beta, TensorT<T>* running_mean,
                  TensorT<T>* running_var, bool training, T momentum = T(0.9),
                  T eps = T(1e-5));
    Var softmax_channels(Var x);
    // elementwise (v-a)^2 below a, (v-b)^2 above b, 0 inside [a,b]
    Var size_bound_penalty(Var v, const TensorT<T>& lower, const TensorT<T>& upper);

    void backward(Var loss);

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::function<void(TapeT&)> back;
        bool needs_grad = false;
    };

    Var check(Var v) const {
        if (v < 0 || v >= static_cast<Var>(nodes_.size()))
            throw std::invalid_argument("TapeT: invalid node handle");
        return v;
    }
    Var push(TensorT<T> value, bool needs_grad, std::function<void(TapeT&)> back);
    void require_same_shape(Var a, Var b, const char* op) const;

    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

extern template class TapeT<float>;
extern template class TapeT<double>;

// ---- gradient verification -------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    // coordinates where one-sided differences disagree (kink at the probe
    // point, e.g. a maxpool tie); excluded from max_rel_error
    std::vector<std::int64_t> flagged;
};

// Compares backward() against central finite differences of the scalar
// function f(tape, input_var) coordinate by coordinate. Relative error uses
// |a - n| / max(|a|, |n|, denom_floor); raise denom_floor in 32-bit checks so
// coordinates whose true gradient sits below the finite-difference noise
// floor are held to an absolute tolerance instead.
// discontinuity_tol and kink_floor shape the flag rule: a coordinate is
// flagged when |d+ - d-| > discontinuity_tol * max(kink_floor, |d+|, |d-|).
template <typename T>
GradCheckReport grad_check(const std::function<Var(TapeT<T>&, Var)>& f, const TensorT<T>& x,
                           T eps, double discontinuity_tol = 0.1, double denom_floor = 1e-8,
                           double kink_floor = 1.0);

extern template GradCheckReport grad_check<float>(
    const std::function<Var(TapeT<float>&, Var)>&, const TensorT<float>&, float, double, double,
    double);
extern template GradCheckReport grad_check<double>(
    const std::function<Var(TapeT<double>&, Var)>&, const TensorT<double>&, double, double, double,
    double);

}  // namespace weakseg
