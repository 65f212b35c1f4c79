#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kuq/errors.hpp"

namespace kuq {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array of 64-bit reals. Rank 0 holds a single scalar.
struct RealArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    RealArray() = default;

    RealArray(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("RealArray: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static RealArray scalar(double v) { return RealArray({}, {v}); }

    static RealArray zeros(std::vector<std::size_t> s) {
        std::size_t n = shape_numel(s);
        return RealArray(std::move(s), std::vector<double>(n, 0.0));
    }

    static RealArray vec(std::vector<double> v) {
        std::size_t n = v.size();
        return RealArray({n}, std::move(v));
    }

    static RealArray mat(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return RealArray({rows, cols}, std::move(v));
    }

    static RealArray identity(std::size_t d) {
        RealArray a = zeros({d, d});
        for (std::size_t i = 0; i < d; ++i) a.data[i * d + i] = 1.0;
        return a;
    }

    std::size_t rank() const { return shape.size(); }
    std::size_t numel() const { return data.size(); }
    bool is_scalar() const { return shape.empty(); }

    std::size_t rows() const { return rank() >= 1 ? shape[0] : 1; }
    std::size_t cols() const { return rank() >= 2 ? shape[1] : 1; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline bool same_shape(const RealArray& a, const RealArray& b) { return a.shape == b.shape; }

/// Checked-mode construction: rejects non-finite content.
inline RealArray checked(RealArray a) {
    if (!a.all_finite()) throw NumericError("RealArray: non-finite value rejected in checked mode");
    return a;
}

}  // namespace kuq
