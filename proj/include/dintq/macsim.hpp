#pragma once

// Bit-exact integer functional model of the dINT x INT8 dot-product datapath.
//
// Weights are lifted into half-step units (for ratio r, units of r*s_w): a
// uniform code k contributes (k - z_w) / r, the reserved codes contribute
// +/-1 — turning the reserved pair into a plain add where uniform codes need
// a shifted add. Every dequantized weight is an integer multiple of r*s_w, so
// the integer path is exact; the one floating-point step is the final
// rescale by (r * s_w) * s_x.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dintq/error.hpp"
#include "dintq/formats.hpp"
#include "dintq/quantizer.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

struct MacOperandW {
    std::vector<int32_t> codes;  // dINT symbols
    double step = 1.0;           // s_w
    int zero_point = 0;          // z_w
    QuantFormat format = QuantFormat::dint(4);
};

struct MacOperandX {
    std::vector<int32_t> codes;  // INT8 codes in [0, 255]
    double step = 1.0;           // s_x
    int zero_point = 0;          // z_x
};

struct MacConfig {
    int accumulator_bits = 48;          // modeled signed accumulator width
    size_t max_length = size_t{1} << 20;  // length guard backing the width
};

inline double mac_dot(const MacOperandW& w, const MacOperandX& x, const MacConfig& cfg = {}) {
    if (w.codes.size() != x.codes.size()) throw data_error("mac_dot: length mismatch");
    if (w.codes.size() > cfg.max_length)
        throw numeric_error("mac_dot: length exceeds accumulator guard");
    if (w.format.kind != FormatKind::denorm_int) throw data_error("mac_dot: weights must be dINT");
    w.format.validate();
    if (cfg.accumulator_bits < 2 || cfg.accumulator_bits > 63)
        throw data_error("mac_dot: accumulator width must be in 2..63 bits");

    const double inv_ratio = 1.0 / w.format.special_ratio;
    const int64_t unit_per_step = static_cast<int64_t>(inv_ratio);  // power of two >= 2
    const int c1 = dint_c1(w.format);
    const int c2 = dint_c2(w.format);
    const int p = uniform_levels(w.format);
    const int64_t acc_limit = (int64_t{1} << (cfg.accumulator_bits - 1)) - 1;

    int64_t acc = 0;
    for (size_t i = 0; i < w.codes.size(); ++i) {
        const int wc = w.codes[i];
        int64_t h;
        if (wc == c1) {
            h = 1;
        } else if (wc == c2) {
            h = -1;
        } else if (wc >= 0 && wc <= p) {
            h = (static_cast<int64_t>(wc) - w.zero_point) * unit_per_step;
        } else {
            throw data_error("mac_dot: invalid dINT code");
        }
        const int xc = x.codes[i];
        if (xc < 0 || xc > 255) throw data_error("mac_dot: INT8 code out of range");
        acc += h * (static_cast<int64_t>(xc) - x.zero_point);
        if (acc > acc_limit || acc < -acc_limit - 1)
            throw numeric_error("mac_dot: accumulator overflow");
    }
    return static_cast<double>(acc) * (w.format.special_ratio * w.step) * x.step;
}

// Lifts mac_dot to a full M x T product of a per-output-channel dINT weight
// tensor against a per-token INT8 activation tensor. Constant groups carry a
// real offset the integer datapath cannot model, so they are rejected.
inline Tensor mac_matmul(const QuantizedTensor& wq, const QuantizedTensor& xq,
                         const MacConfig& cfg = {}) {
    wq.validate();
    xq.validate();
    if (wq.params.front().format.kind != FormatKind::denorm_int)
        throw data_error("mac_matmul: weights must be dINT");
    if (xq.params.front().format.kind != FormatKind::uniform_int ||
        xq.params.front().format.bits != 8)
        throw data_error("mac_matmul: activations must be INT8");
    if (wq.gran != Granularity::per_output_channel())
        throw data_error("mac_matmul: weights must be quantized per output channel");
    if (xq.gran != Granularity::per_token())
        throw data_error("mac_matmul: activations must be quantized per token");
    if (wq.cols() != xq.rows()) throw data_error("mac_matmul: inner dimension mismatch");
    for (const auto& qp : wq.params)
        if (qp.offset != 0.0) throw data_error("mac_matmul: constant-group offset unsupported");
    for (const auto& qp : xq.params)
        if (qp.offset != 0.0) throw data_error("mac_matmul: constant-group offset unsupported");

    const size_t m_dim = wq.rows(), c_dim = wq.cols(), t_dim = xq.cols();
    Tensor out = Tensor::zeros(DType::f64, {m_dim, t_dim});
    MacOperandW wop;
    MacOperandX xop;
    wop.codes.resize(c_dim);
    xop.codes.resize(c_dim);
    for (size_t m = 0; m < m_dim; ++m) {
        const QuantParams& wp = wq.params[m];
        wop.step = wp.step;
        wop.zero_point = wp.zero_point;
        wop.format = wp.format;
        for (size_t c = 0; c < c_dim; ++c) wop.codes[c] = wq.codes[m * c_dim + c];
        for (size_t t = 0; t < t_dim; ++t) {
            const QuantParams& xp = xq.params[t];
            xop.step = xp.step;
            xop.zero_point = xp.zero_point;
            for (size_t c = 0; c < c_dim; ++c) xop.codes[c] = xq.codes[c * t_dim + t];
            out.at(m, t) = mac_dot(wop, xop, cfg);
        }
    }
    return out;
}

}  // namespace dintq
