#pragma once

// Hessian-based column-sequential weight calibration.
//
// After quantizing column q of a row, the remaining (not yet quantized)
// columns F of that row receive the least-squares correction
//     delta_F = -(w_q - quant(w_q)) / [H_F^-1]_qq * (H_F^-1)_{:,q}
// with H = 2 X X^T. Rather than re-inverting H_F per column, the updates are
// read off the upper-triangular factor U with U^T U = H^-1:
//     [H_F^-1]_qq = U_qq^2,   (H_F^-1)_{q:,q} = U_qq * U_{q,q:}
// which the tests pin against a naive recompute-the-inverse reference.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dintq/error.hpp"
#include "dintq/linalg.hpp"
#include "dintq/quantizer.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

struct Hessian {
    size_t dim = 0;
    std::vector<double> h;  // row-major dim x dim, symmetric
    double damping = 0.0;   // absolute value already added to the diagonal
    size_t token_count = 0;

    double at(size_t i, size_t j) const { return h[i * dim + j]; }
};

// H = 2 * sum_b X_b X_b^T, accumulated in f64.
inline Hessian accumulate_hessian(const std::vector<const Tensor*>& batches) {
    if (batches.empty()) throw data_error("hessian: no activation batches");
    Hessian hess;
    hess.dim = batches.front()->rows();
    hess.h.assign(hess.dim * hess.dim, 0.0);
    for (const Tensor* x : batches) {
        x->validate();
        if (x->rank() != 2 || x->rows() != hess.dim)
            throw data_error("hessian: C mismatch across batches");
        const size_t t_dim = x->cols();
        hess.token_count += t_dim;
        for (size_t i = 0; i < hess.dim; ++i) {
            for (size_t j = i; j < hess.dim; ++j) {
                double acc = 0.0;
                for (size_t t = 0; t < t_dim; ++t) acc += x->at(i, t) * x->at(j, t);
                hess.h[i * hess.dim + j] += 2.0 * acc;
            }
        }
    }
    for (size_t i = 0; i < hess.dim; ++i)
        for (size_t j = 0; j < i; ++j) hess.h[i * hess.dim + j] = hess.h[j * hess.dim + i];
    return hess;
}

inline Hessian accumulate_hessian(const Tensor& x) {
    return accumulate_hessian(std::vector<const Tensor*>{&x});
}

// H + lambda_rel * mean(diag(H)) * I. A Hessian with an all-zero diagonal has
// nothing to damp against and is rejected.
inline Hessian damp(const Hessian& hess, double lambda_rel) {
    if (lambda_rel < 0.0) throw data_error("damp: lambda must be non-negative");
    double mean_diag = 0.0;
    for (size_t i = 0; i < hess.dim; ++i) mean_diag += hess.at(i, i);
    mean_diag /= static_cast<double>(hess.dim);
    if (!(mean_diag > 0.0))
        throw numeric_error("damp: hessian diagonal carries no signal");
    Hessian out = hess;
    const double lambda = lambda_rel * mean_diag;
    out.damping += lambda;
    for (size_t i = 0; i < out.dim; ++i) out.h[i * out.dim + i] += lambda;
    return out;
}

// (H_F^-1)_{:,q} / [H_F^-1]_qq with F the full index set: the q-th column of
// H^-1 normalized to a unit entry at q.
inline std::vector<double> weight_update_ratio(const Hessian& hess, size_t q) {
    if (q >= hess.dim) throw data_error("weight_update_ratio: column index out of range");
    std::vector<double> chol = hess.h;
    if (!cholesky_lower(chol, hess.dim))
        throw numeric_error("weight_update_ratio: hessian is not positive definite (damp it)");
    std::vector<double> col(hess.dim, 0.0);
    col[q] = 1.0;
    cholesky_solve(chol, hess.dim, col);
    const double dq = col[q];
    if (!(dq > 0.0)) throw numeric_error("weight_update_ratio: non-positive diagonal");
    for (auto& v : col) v /= dq;
    return col;
}

namespace detail {

// Upper-triangular U with U^T U = H^-1 (zeros below the diagonal).
inline std::vector<double> optq_update_factor(const Hessian& hess) {
    std::vector<double> chol = hess.h;
    if (!cholesky_lower(chol, hess.dim))
        throw numeric_error("optq: cholesky failed; hessian needs damping");
    std::vector<double> hinv = cholesky_inverse(chol, hess.dim);
    if (!cholesky_lower(hinv, hess.dim))
        throw numeric_error("optq: inverse hessian lost positive definiteness");
    // hinv now holds the lower factor L of H^-1 = L L^T; expose it as U = L^T.
    const size_t n = hess.dim;
    std::vector<double> u(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j) u[j * n + i] = hinv[i * n + j];
    return u;
}

}  // namespace detail

// Column-sequential quantization of W (M x C) against the damped Hessian.
// Rows are independent; columns run in index order. Params are calibrated
// once from the input weights unless supplied by the caller (e.g. clipped
// ranges).
inline QuantizedTensor optq_quantize(const Tensor& w, const Hessian& hess, const QuantFormat& fmt,
                                     Granularity gran,
                                     std::vector<QuantParams> params = {}) {
    w.validate();
    if (w.rank() != 2 || w.cols() != hess.dim)
        throw data_error("optq: weight/hessian dimension mismatch");
    if (params.empty()) params = calibrate_params(w, fmt, gran);

    const size_t m_dim = w.rows(), c_dim = w.cols();
    const auto layout = detail::group_layout(w.shape, gran);
    if (params.size() != layout.count) throw data_error("optq: params/group count mismatch");
    const std::vector<double> u = detail::optq_update_factor(hess);

    QuantizedTensor q;
    q.shape = w.shape;
    q.source_dtype = w.dtype;
    q.gran = gran;
    q.params = std::move(params);
    q.codes.resize(w.data.size());

    std::vector<double> work = w.data;
    for (size_t col = 0; col < c_dim; ++col) {
        const double d = u[col * c_dim + col];
        for (size_t m = 0; m < m_dim; ++m) {
            const size_t idx = m * c_dim + col;
            const QuantParams& qp = q.params[layout.group_of(m, col)];
            const int code = encode_value(work[idx], qp);
            q.codes[idx] = code;
            const double err = (work[idx] - decode_value(code, qp)) / d;
            for (size_t j = col + 1; j < c_dim; ++j)
                work[m * c_dim + j] -= err * u[col * c_dim + j];
        }
    }
    return q;
}

}  // namespace dintq
