#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "stpil/common.hpp"

namespace stpil {

/// Dense row-major array of 64-bit floats. Rank is 1 or 2 everywhere in this
/// library; shape is kept general so identifiers read naturally.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        STPIL_REQUIRE(numel() == v.size(), "Tensor: shape/value size mismatch");
    }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }

    static Tensor vec(std::initializer_list<double> xs) {
        return Tensor({xs.size()}, std::vector<double>(xs));
    }

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    // Rank-1 tensors are treated as row vectors.
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : numel(); }

    double& at(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::string shape_str(std::size_t rows, std::size_t cols) {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

}  // namespace stpil
