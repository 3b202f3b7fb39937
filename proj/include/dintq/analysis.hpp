#pragma once

// Underflow/rounding error decomposition, range diagnostics, and
// sequence-length-aware calibration helpers.
//
// The decomposition splits the weight quantization error Delta into the
// underflow part (entries whose quantized value is exactly zero while the
// original was not) and the rounding part (everything else), then measures
// the output-level terms
//     E[(Du X)^2], E[(Dr X)^2], E[2 Du X Dr X]
// whose sum reproduces the total output error as an algebraic identity.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dintq/capsule.hpp"
#include "dintq/error.hpp"
#include "dintq/linalg.hpp"
#include "dintq/optq.hpp"
#include "dintq/quantizer.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

struct ErrorEntry {
    double underflow_term = 0.0;
    double rounding_term = 0.0;
    double cross_term = 0.0;  // may be negative
    double total = 0.0;
    double underflow_fraction = 0.0;  // nonzero weights that quantized to zero, over all elements
};

inline ErrorEntry decompose_error(const Tensor& w, const Tensor& wq_dequant,
                                  const std::vector<const Tensor*>& batches) {
    w.validate();
    wq_dequant.validate();
    if (w.shape != wq_dequant.shape) throw data_error("decompose_error: weight shape mismatch");
    if (batches.empty()) throw data_error("decompose_error: no activation batches");

    const size_t m_dim = w.rows(), c_dim = w.cols();
    Tensor delta_u = Tensor::zeros(DType::f64, w.shape);
    Tensor delta_r = Tensor::zeros(DType::f64, w.shape);
    size_t underflowed = 0;
    for (size_t i = 0; i < w.data.size(); ++i) {
        const double d = wq_dequant.data[i] - w.data[i];
        if (wq_dequant.data[i] == 0.0 && w.data[i] != 0.0) {
            delta_u.data[i] = d;
            ++underflowed;
        } else {
            delta_r.data[i] = d;
        }
    }

    ErrorEntry entry;
    entry.underflow_fraction = static_cast<double>(underflowed) / static_cast<double>(w.data.size());

    double sum_u = 0.0, sum_r = 0.0, sum_cross = 0.0, sum_total = 0.0;
    size_t count = 0;
    for (const Tensor* x : batches) {
        x->validate();
        if (x->rank() != 2 || x->rows() != c_dim)
            throw data_error("decompose_error: activation shape mismatch");
        const size_t t_dim = x->cols();
        for (size_t m = 0; m < m_dim; ++m) {
            for (size_t t = 0; t < t_dim; ++t) {
                double du = 0.0, dr = 0.0, dt = 0.0;
                for (size_t c = 0; c < c_dim; ++c) {
                    const double xv = x->at(c, t);
                    du += delta_u.at(m, c) * xv;
                    dr += delta_r.at(m, c) * xv;
                    dt += (wq_dequant.at(m, c) - w.at(m, c)) * xv;
                }
                sum_u += du * du;
                sum_r += dr * dr;
                sum_cross += 2.0 * du * dr;
                sum_total += dt * dt;
            }
        }
        count += m_dim * t_dim;
    }
    entry.underflow_term = sum_u / static_cast<double>(count);
    entry.rounding_term = sum_r / static_cast<double>(count);
    entry.cross_term = sum_cross / static_cast<double>(count);
    entry.total = sum_total / static_cast<double>(count);
    return entry;
}

inline ErrorEntry decompose_error(const Tensor& w, const Tensor& wq_dequant, const Tensor& x) {
    return decompose_error(w, wq_dequant, std::vector<const Tensor*>{&x});
}

struct LayerRange {
    double weight_min = 0.0, weight_max = 0.0;
    double act_min = 0.0, act_max = 0.0;
    // sequence length -> per-channel max of |x|
    std::map<int64_t, std::vector<double>> per_channel_max;
};

struct RangeReport {
    std::vector<std::pair<std::string, LayerRange>> layers;  // manifest order
};

inline RangeReport range_report(const std::vector<LayerCapsule>& capsules) {
    if (capsules.empty()) throw data_error("range_report: no capsules");
    RangeReport report;
    for (const auto& capsule : capsules) {
        capsule.validate();
        LayerRange range;
        range.weight_min = range.weight_max = capsule.weight.data.front();
        for (double v : capsule.weight.data) {
            range.weight_min = std::min(range.weight_min, v);
            range.weight_max = std::max(range.weight_max, v);
        }
        bool first = true;
        for (const auto& [len, x] : capsule.activations) {
            std::vector<double> ch_max(x.rows(), 0.0);
            for (size_t c = 0; c < x.rows(); ++c)
                for (size_t t = 0; t < x.cols(); ++t) {
                    const double v = x.at(c, t);
                    if (first) {
                        range.act_min = range.act_max = v;
                        first = false;
                    } else {
                        range.act_min = std::min(range.act_min, v);
                        range.act_max = std::max(range.act_max, v);
                    }
                    ch_max[c] = std::max(ch_max[c], std::fabs(v));
                }
            range.per_channel_max[len] = std::move(ch_max);
        }
        report.layers.emplace_back(capsule.name, std::move(range));
    }
    return report;
}

// Slices every sequence of at least target_len tokens into non-overlapping
// windows of exactly target_len, front to back, dropping the tail; shorter
// sequences are dropped entirely.
inline std::vector<Tensor> slac_build(const std::vector<const Tensor*>& corpus,
                                      int64_t target_len) {
    if (target_len <= 0) throw data_error("slac: target length must be positive");
    if (corpus.empty()) throw data_error("slac: empty corpus");
    const size_t window = static_cast<size_t>(target_len);
    std::vector<Tensor> out;
    for (const Tensor* x : corpus) {
        x->validate();
        if (x->rank() != 2) throw data_error("slac: activation batches must be 2-D");
        const size_t c_dim = x->rows(), t_dim = x->cols();
        for (size_t start = 0; start + window <= t_dim; start += window) {
            Tensor w = Tensor::zeros(x->dtype, {c_dim, window});
            for (size_t c = 0; c < c_dim; ++c)
                for (size_t t = 0; t < window; ++t) w.at(c, t) = x->at(c, start + t);
            out.push_back(std::move(w));
        }
    }
    if (out.empty()) throw data_error("slac: insufficient length (no sequence >= target)");
    return out;
}

inline std::vector<Tensor> slac_build(const std::vector<Tensor>& corpus, int64_t target_len) {
    std::vector<const Tensor*> ptrs;
    ptrs.reserve(corpus.size());
    for (const auto& t : corpus) ptrs.push_back(&t);
    return slac_build(ptrs, target_len);
}

// Capsule with its activations replaced by the target-length windows
// (concatenated along the token axis, keyed by the target length).
inline LayerCapsule slac_restrict(const LayerCapsule& capsule, int64_t target_len) {
    auto windows = slac_build(capsule.activation_batches(), target_len);
    const size_t c_dim = capsule.in_features();
    const size_t window = static_cast<size_t>(target_len);
    Tensor merged = Tensor::zeros(windows.front().dtype, {c_dim, window * windows.size()});
    for (size_t w = 0; w < windows.size(); ++w)
        for (size_t c = 0; c < c_dim; ++c)
            for (size_t t = 0; t < window; ++t)
                merged.at(c, w * window + t) = windows[w].at(c, t);
    LayerCapsule out;
    out.name = capsule.name;
    out.weight = capsule.weight;
    out.activations[target_len] = std::move(merged);
    out.value = capsule.value;
    return out;
}

struct SlacRow {
    int64_t calibration_len = 0;
    double mse = 0.0;
};

struct SlacTable {
    int64_t eval_len = 0;
    std::vector<SlacRow> rows;
    double stddev = 0.0;  // population std of the per-length mse values
};

struct SlacOptions {
    bool use_optq = true;
    double damping = 0.01;
    Granularity weight_gran = Granularity::per_output_channel();
    Granularity act_gran = Granularity::per_token();
    // Quantizing the evaluation activations adds a calibration-independent
    // error floor that can drown the per-length signal; off by default so the
    // table measures what the calibration length actually changes.
    bool quantize_eval_acts = false;
};

// For each calibration length, quantize the weights against that length's
// activations and measure the output mse on the evaluation batch.
inline SlacTable slac_sensitivity(const LayerCapsule& capsule, const QuantFormat& fmt_w,
                                  const QuantFormat& fmt_x, const std::vector<int64_t>& lengths,
                                  int64_t eval_len, const SlacOptions& opts = {}) {
    capsule.validate();
    if (lengths.empty()) throw data_error("slac_sensitivity: no calibration lengths");
    const auto eval_it = capsule.activations.find(eval_len);
    if (eval_it == capsule.activations.end())
        throw data_error("slac_sensitivity: missing evaluation length " + std::to_string(eval_len));
    const Tensor& x_eval = eval_it->second;
    const Tensor x_eval_q =
        opts.quantize_eval_acts ? fake_quant(x_eval, fmt_x, opts.act_gran) : x_eval;
    const Tensor reference = matmul(capsule.weight, x_eval);

    SlacTable table;
    table.eval_len = eval_len;
    for (int64_t len : lengths) {
        const auto it = capsule.activations.find(len);
        if (it == capsule.activations.end())
            throw data_error("slac_sensitivity: missing length " + std::to_string(len));
        QuantizedTensor wq;
        if (opts.use_optq) {
            const Hessian hess = damp(accumulate_hessian(it->second), opts.damping);
            wq = optq_quantize(capsule.weight, hess, fmt_w, opts.weight_gran);
        } else {
            wq = quantize(capsule.weight, fmt_w, opts.weight_gran);
        }
        const Tensor product = matmul(dequantize(wq), x_eval_q);
        double err = 0.0;
        for (size_t i = 0; i < product.data.size(); ++i) {
            const double d = product.data[i] - reference.data[i];
            err += d * d;
        }
        table.rows.push_back({len, err / static_cast<double>(product.data.size())});
    }

    double mean = 0.0;
    for (const auto& row : table.rows) mean += row.mse;
    mean /= static_cast<double>(table.rows.size());
    double var = 0.0;
    for (const auto& row : table.rows) var += (row.mse - mean) * (row.mse - mean);
    table.stddev = std::sqrt(var / static_cast<double>(table.rows.size()));
    return table;
}

// --- JSON views -------------------------------------------------------------

inline nlohmann::json to_json(const ErrorEntry& e) {
    return {{"underflow_term", e.underflow_term},
            {"rounding_term", e.rounding_term},
            {"cross_term", e.cross_term},
            {"total", e.total},
            {"underflow_fraction", e.underflow_fraction}};
}

inline nlohmann::json to_json(const LayerRange& r) {
    nlohmann::json per_channel = nlohmann::json::object();
    for (const auto& [len, maxes] : r.per_channel_max) per_channel[std::to_string(len)] = maxes;
    return {{"weight_min", r.weight_min},
            {"weight_max", r.weight_max},
            {"act_min", r.act_min},
            {"act_max", r.act_max},
            {"per_channel_max", std::move(per_channel)}};
}

inline nlohmann::json to_json(const RangeReport& report) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [name, range] : report.layers) layers[name] = to_json(range);
    return {{"layers", std::move(layers)}};
}

inline nlohmann::json to_json(const SlacTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : table.rows)
        rows.push_back({{"calibration_len", row.calibration_len}, {"mse", row.mse}});
    return {{"eval_len", table.eval_len}, {"rows", std::move(rows)}, {"stddev", table.stddev}};
}

}  // namespace dintq
