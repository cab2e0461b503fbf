#pragma once

// Dense row-major matrix of doubles, rank <= 2. Everything in this library is
// small and batched, so a single concrete container beats a templated view
// zoo. Vectors are [n,1] or [1,n]; scalars are [1,1].

#include <cstddef>
#include <sstream>
#include <vector>

#include "errors.hpp"

namespace fdm {

struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Tensor(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols)
            throw ShapeError("Tensor: data length does not match rows*cols");
    }

    static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c); }
    static Tensor full(std::size_t r, std::size_t c, double v) {
        Tensor t(r, c);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return full(1, 1, v); }
    static Tensor row(const std::vector<double>& v) { return Tensor(1, v.size(), v); }
    static Tensor col(const std::vector<double>& v) { return Tensor(v.size(), 1, v); }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[" << rows << "," << cols << "]";
        return os.str();
    }
};

// Shared matmul kernel. The tape and the plain evaluators both call this so
// the two paths produce bit-identical results (same accumulation order).
inline void matmul_accum_kernel(const double* a, std::size_t ar, std::size_t ac,
                                const double* b, std::size_t bc, double* out) {
    // out[i,j] += sum_k a[i,k] b[k,j], i-k-j order for cache friendliness.
    for (std::size_t i = 0; i < ar; ++i) {
        const double* arow = a + i * ac;
        double* orow = out + i * bc;
        for (std::size_t k = 0; k < ac; ++k) {
            const double aik = arow[k];
            const double* brow = b + k * bc;
            for (std::size_t j = 0; j < bc; ++j) orow[j] += aik * brow[j];
        }
    }
}

} // namespace fdm
