#pragma once

// Min-Max asymmetric calibration at the granularities used throughout:
// per-tensor, per output channel (weight rows), per token / per channel
// (columns), and group-wise along the input-feature axis. Quantization and
// fake quantization share one code path so that
// dequantize(quantize(t)) == fake_quant(t) holds element-exact.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dintq/error.hpp"
#include "dintq/formats.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

struct Granularity {
    enum class Kind : uint8_t { per_tensor, per_row, per_col, row_groups };

    Kind kind = Kind::per_tensor;
    size_t group_size = 0;  // row_groups only

    static Granularity per_tensor() { return {}; }
    // Weights M x C: one group per output channel (row).
    static Granularity per_output_channel() { return {Kind::per_row, 0}; }
    // Activations C x T: one group per token (column).
    static Granularity per_token() { return {Kind::per_col, 0}; }
    // Value tokens x channels: one group per channel (column), spanning the
    // accumulation axis.
    static Granularity per_channel() { return {Kind::per_col, 0}; }
    // Groups of g consecutive input features within each row; remainder group
    // allowed.
    static Granularity group_wise(size_t g) {
        if (g == 0) throw data_error("granularity: group size must be positive");
        return {Kind::row_groups, g};
    }

    bool operator==(const Granularity&) const = default;
};

namespace detail {

struct GroupLayout {
    size_t rows = 1;
    size_t cols = 1;
    size_t count = 1;
    size_t groups_per_row = 1;  // row_groups only
    Granularity gran;

    size_t group_of(size_t i, size_t j) const {
        switch (gran.kind) {
            case Granularity::Kind::per_tensor: return 0;
            case Granularity::Kind::per_row: return i;
            case Granularity::Kind::per_col: return j;
            case Granularity::Kind::row_groups:
                return i * groups_per_row + j / gran.group_size;
        }
        return 0;
    }
};

inline GroupLayout group_layout(const std::vector<size_t>& shape, Granularity gran) {
    GroupLayout layout;
    layout.gran = gran;
    if (gran.kind == Granularity::Kind::per_tensor) {
        layout.rows = 1;
        layout.cols = 1;
        for (size_t d : shape) layout.cols *= d;
        layout.count = 1;
        return layout;
    }
    if (shape.size() != 2)
        throw data_error("granularity: per-axis grouping requires a 2-D tensor");
    layout.rows = shape[0];
    layout.cols = shape[1];
    switch (gran.kind) {
        case Granularity::Kind::per_row: layout.count = layout.rows; break;
        case Granularity::Kind::per_col: layout.count = layout.cols; break;
        case Granularity::Kind::row_groups:
            layout.groups_per_row = (layout.cols + gran.group_size - 1) / gran.group_size;
            layout.count = layout.rows * layout.groups_per_row;
            break;
        default: break;
    }
    return layout;
}

}  // namespace detail

inline size_t group_count(const std::vector<size_t>& shape, Granularity gran) {
    return detail::group_layout(shape, gran).count;
}

// Min-Max asymmetric params for one group. Constant groups are represented
// exactly through the offset (step 1, zero point 0); FP4 maps the group
// absmax onto the top codebook entry.
inline QuantParams params_from_range(double mn, double mx, const QuantFormat& fmt) {
    fmt.validate();
    if (!std::isfinite(mn) || !std::isfinite(mx) || mn > mx)
        throw data_error("calibrate: invalid group range");
    QuantParams qp;
    qp.format = fmt;
    if (fmt.kind == FormatKind::float4) {
        const double absmax = std::max(std::fabs(mn), std::fabs(mx));
        if (absmax == 0.0) {
            qp.step = 1.0;
            return qp;
        }
        const auto& values = detail::fp4_codebook(fmt);
        qp.step = absmax / values.back();
        return qp;
    }
    if (mx == mn) {
        qp.step = 1.0;
        qp.zero_point = 0;
        qp.offset = mn;
        return qp;
    }
    const int p = max_uniform_code(fmt);
    qp.step = (mx - mn) / p;
    const double z = round_half_even(-mn / qp.step);
    qp.zero_point = static_cast<int>(std::clamp(z, 0.0, static_cast<double>(p)));
    return qp;
}

inline std::vector<QuantParams> calibrate_params(const Tensor& t, const QuantFormat& fmt,
                                                 Granularity gran) {
    t.validate();
    const auto layout = detail::group_layout(t.shape, gran);
    std::vector<double> mn(layout.count, std::numeric_limits<double>::infinity());
    std::vector<double> mx(layout.count, -std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < layout.rows; ++i) {
        for (size_t j = 0; j < layout.cols; ++j) {
            const double v = t.data[i * layout.cols + j];
            const size_t g = layout.group_of(i, j);
            mn[g] = std::min(mn[g], v);
            mx[g] = std::max(mx[g], v);
        }
    }
    std::vector<QuantParams> params;
    params.reserve(layout.count);
    for (size_t g = 0; g < layout.count; ++g) {
        if (!(mn[g] <= mx[g])) throw data_error("calibrate: empty group");
        params.push_back(params_from_range(mn[g], mx[g], fmt));
    }
    return params;
}

struct QuantizedTensor {
    std::vector<size_t> shape;
    DType source_dtype = DType::f32;
    Granularity gran;
    std::vector<QuantParams> params;  // one per group
    std::vector<int32_t> codes;       // row-major, same shape as source

    size_t rows() const { return shape.at(0); }
    size_t cols() const { return shape.size() > 1 ? shape.at(1) : 1; }

    void validate() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        if (n != codes.size()) throw data_error("quantized tensor: shape/code size mismatch");
        if (params.empty() || params.size() != group_count(shape, gran))
            throw data_error("quantized tensor: group count mismatch");
        for (int32_t c : codes)
            if (!code_valid(c, params.front().format))
                throw data_error("quantized tensor: invalid code");
    }
};

inline QuantizedTensor quantize_with_params(const Tensor& t, std::vector<QuantParams> params,
                                            Granularity gran) {
    const auto layout = detail::group_layout(t.shape, gran);
    if (params.size() != layout.count)
        throw data_error("quantize: params/group count mismatch");
    QuantizedTensor q;
    q.shape = t.shape;
    q.source_dtype = t.dtype;
    q.gran = gran;
    q.params = std::move(params);
    q.codes.resize(t.data.size());
    for (size_t i = 0; i < layout.rows; ++i)
        for (size_t j = 0; j < layout.cols; ++j) {
            const size_t idx = i * layout.cols + j;
            q.codes[idx] = encode_value(t.data[idx], q.params[layout.group_of(i, j)]);
        }
    return q;
}

inline QuantizedTensor quantize(const Tensor& t, const QuantFormat& fmt, Granularity gran) {
    return quantize_with_params(t, calibrate_params(t, fmt, gran), gran);
}

inline Tensor dequantize(const QuantizedTensor& q) {
    const auto layout = detail::group_layout(q.shape, q.gran);
    std::vector<double> values(q.codes.size());
    for (size_t i = 0; i < layout.rows; ++i)
        for (size_t j = 0; j < layout.cols; ++j) {
            const size_t idx = i * layout.cols + j;
            values[idx] = decode_value(q.codes[idx], q.params[layout.group_of(i, j)]);
        }
    return Tensor(q.source_dtype, q.shape, std::move(values));
}

inline Tensor fake_quant(const Tensor& t, const QuantFormat& fmt, Granularity gran) {
    return dequantize(quantize(t, fmt, gran));
}

}  // namespace dintq
