#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace weakseg {

// Dense row-major tensor. Training uses float; a double variant exists only
// for gradient verification (check mode).
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> values;

    TensorT() = default;
    TensorT(std::vector<int> s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw std::invalid_argument("TensorT: value count does not match shape " +
                                        shape_str(shape));
    }

    static std::int64_t shape_numel(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 1) throw std::invalid_argument("TensorT: non-positive dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) {
        const auto n = shape_numel(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
    }

    static TensorT full(std::vector<int> s, T fill) {
        const auto n = shape_numel(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), fill));
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "(";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }
    std::string shape_str() const { return shape_str(shape); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.values.assign(values.begin(), values.end());
        return out;
    }
};

using Tensor = TensorT<float>;

// Throws if any value is NaN or infinite; `context` names the producing layer.
template <typename T>
void check_finite(const TensorT<T>& t, const std::string& context);

}  // namespace weakseg
