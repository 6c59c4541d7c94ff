#pragma once

// Dense row-major tensor. Rank 0 (scalar), 1 or 2 is all the engine needs.

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ulab/common.hpp"

namespace ulab {

template <typename Real>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<Real> values;
    bool requires_grad{false};
    int node_id{-1};  // position on the owning tape, -1 when detached
    int tape_id{-1};

    Tensor() = default;

    Tensor(std::vector<std::size_t> s, std::vector<Real> v)
        : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel_of(shape)) {
            throw shape_error("tensor value count does not match shape");
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw shape_error("zero dimension in tensor shape");
            n *= d;
        }
        return n;
    }

    static Tensor scalar(Real v) { return Tensor({}, {v}); }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<Real>(n, Real(0)));
    }

    static Tensor full(std::vector<std::size_t> s, Real v) {
        std::size_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<Real>(n, v));
    }

    static Tensor row(std::vector<Real> v) {
        std::size_t n = v.size();
        return Tensor({1, n}, std::move(v));
    }

    std::size_t numel() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return numel() == 1 && rank() <= 1; }

    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : numel(); }

    Real& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    Real at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    Real item() const {
        if (numel() != 1) throw shape_error("item() on non-scalar tensor");
        return values[0];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            os << (i ? "," : "") << shape[i];
        }
        os << "]";
        return os.str();
    }
};

}  // namespace ulab
