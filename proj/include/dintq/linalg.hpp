#pragma once

// Small dense f64 helpers: matrix product with a fixed accumulation order,
// and Cholesky factor/solve/inverse for the SPD systems the calibration code
// needs. Sizes here are desk scale; clarity over blocking.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dintq/error.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

// C = A * B, accumulated in f64 in ascending k order so results are
// reproducible regardless of threading at higher levels.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw data_error("matmul: dimension mismatch");
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = Tensor::zeros(DType::f64, {m, n});
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t t = 0; t < k; ++t) acc += a.data[i * k + t] * b.data[t * n + j];
            c.data[i * n + j] = acc;
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw data_error("transpose: needs a 2-D tensor");
    Tensor t = Tensor::zeros(a.dtype, {a.cols(), a.rows()});
    for (size_t i = 0; i < a.rows(); ++i)
        for (size_t j = 0; j < a.cols(); ++j) t.data[j * a.rows() + i] = a.data[i * a.cols() + j];
    return t;
}

inline double frobenius_sq(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v * v;
    return acc;
}

// In-place lower Cholesky of a symmetric n x n matrix (row-major). Returns
// false when the matrix is not positive definite. The strict upper triangle
// is left untouched.
inline bool cholesky_lower(std::vector<double>& a, size_t n) {
    for (size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        a[j * n + j] = ljj;
        for (size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / ljj;
        }
    }
    return true;
}

// Solves L L^T x = b given the lower factor.
inline void cholesky_solve(const std::vector<double>& l, size_t n, std::vector<double>& b) {
    for (size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
        b[i] = s / l[i * n + i];
    }
    for (size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * b[k];
        b[ii] = s / l[ii * n + ii];
    }
}

// Full SPD inverse via the Cholesky factor.
inline std::vector<double> cholesky_inverse(const std::vector<double>& l, size_t n) {
    std::vector<double> inv(n * n, 0.0);
    std::vector<double> col(n);
    for (size_t j = 0; j < n; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[j] = 1.0;
        cholesky_solve(l, n, col);
        for (size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
    }
    // Symmetrize: the solve introduces ulp-level asymmetry.
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    return inv;
}

}  // namespace dintq
