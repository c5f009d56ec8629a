#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "loft/common.hpp"

namespace loft {

// Dense row-major matrix. Scalar is float in production and double in the
// oracle/finite-difference harnesses.
template <typename S>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<S> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, S(0)) {}

    S* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    S& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    S at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    void set_zero() { std::fill(data.begin(), data.end(), S(0)); }

    void fill_normal(Rng& rng, double stddev) {
        for (auto& v : data) v = static_cast<S>(rng.next_normal() * stddev);
    }

    template <typename T>
    Matrix<T> cast() const {
        Matrix<T> out(rows, cols);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

template <typename S>
inline S dot(const S* a, const S* b, int n) {
    S acc = S(0);
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// y = W x  (W: rows x cols, x: cols, y: rows)
template <typename S>
inline void matvec(const Matrix<S>& w, const S* x, S* y) {
    for (int r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x, w.cols);
}

// y += W^T x  (x: rows, y: cols)
template <typename S>
inline void matvec_transposed_acc(const Matrix<S>& w, const S* x, S* y) {
    for (int r = 0; r < w.rows; ++r) {
        const S xr = x[r];
        if (xr == S(0)) continue;
        const S* wr = w.row(r);
        for (int c = 0; c < w.cols; ++c) y[c] += wr[c] * xr;
    }
}

// dW += dy x^T  (dy: rows, x: cols)
template <typename S>
inline void outer_acc(Matrix<S>& dw, const S* dy, const S* x) {
    for (int r = 0; r < dw.rows; ++r) {
        const S g = dy[r];
        if (g == S(0)) continue;
        S* wr = dw.row(r);
        for (int c = 0; c < dw.cols; ++c) wr[c] += g * x[c];
    }
}

template <typename S>
inline void axpy(S a, std::span<const S> x, std::span<S> y) {
    assert(x.size() == y.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// C = A B  (A: m x k, B: k x n). Only used for small matrices (LoRA merge,
// oracles); nothing in the hot path materializes products.
template <typename S>
inline Matrix<S> matmul(const Matrix<S>& a, const Matrix<S>& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul shape mismatch");
    Matrix<S> c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const S* ar = a.row(i);
        S* cr = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const S av = ar[k];
            if (av == S(0)) continue;
            const S* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

}  // namespace loft
