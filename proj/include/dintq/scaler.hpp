#pragma once

// Per-channel scale search. The candidate family is
//     s_c = a_c^alpha / w_c^(1-alpha)
// where a_c / w_c are per-input-channel representative magnitudes of the
// activations and weights. alpha = 1 leans on activation stats (SQ-style),
// alpha = 0 on inverse weight stats (AWQ-style); the joint search evaluates
// the output error with BOTH operands quantized and picks the argmin.
//
// Every objective is output-preserving at full precision: the scaled weight
// W diag(s) is always paired with the descaled activation diag(s)^-1 X, and
// only the operands named by the method are quantized.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dintq/capsule.hpp"
#include "dintq/error.hpp"
#include "dintq/linalg.hpp"
#include "dintq/quantizer.hpp"

namespace dintq {

enum class Reducer : uint8_t { max_abs, mean_abs };
enum class ScaleMethod : uint8_t { none, sq, awq, aqas };

inline std::string to_string(ScaleMethod m) {
    switch (m) {
        case ScaleMethod::none: return "none";
        case ScaleMethod::sq: return "sq";
        case ScaleMethod::awq: return "awq";
        case ScaleMethod::aqas: return "aqas";
    }
    return "none";
}

struct ChannelStats {
    std::vector<double> activation;  // a_c
    std::vector<double> weight;      // w_c
};

struct ScaleResult {
    std::vector<double> scales;
    double alpha = 0.0;
    double mse = 0.0;
    ScaleMethod method = ScaleMethod::none;
    std::optional<std::vector<double>> clip_ratios;
};

// Formats/granularities the objective quantizes with, plus the optional
// post-matmul transform hook (attention-output objective); identity if empty.
struct ObjectiveConfig {
    QuantFormat weight_format = QuantFormat::dint(4);
    QuantFormat act_format = QuantFormat::uniform(8);
    Granularity weight_gran = Granularity::per_output_channel();
    Granularity act_gran = Granularity::per_token();
    std::function<void(Tensor&)> product_transform;
};

inline ChannelStats channel_stats(const LayerCapsule& capsule, Reducer reducer) {
    capsule.validate();
    if (capsule.activations.empty()) throw data_error("channel_stats: capsule has no activations");
    const size_t c_dim = capsule.in_features();
    ChannelStats stats;
    stats.activation.assign(c_dim, 0.0);
    stats.weight.assign(c_dim, 0.0);

    size_t total_tokens = 0;
    for (const auto& [len, x] : capsule.activations) {
        const size_t t_dim = x.cols();
        total_tokens += t_dim;
        for (size_t c = 0; c < c_dim; ++c) {
            for (size_t t = 0; t < t_dim; ++t) {
                const double v = std::fabs(x.at(c, t));
                if (reducer == Reducer::max_abs)
                    stats.activation[c] = std::max(stats.activation[c], v);
                else
                    stats.activation[c] += v;
            }
        }
    }
    if (reducer == Reducer::mean_abs)
        for (auto& a : stats.activation) a /= static_cast<double>(total_tokens);

    const Tensor& w = capsule.weight;
    for (size_t c = 0; c < c_dim; ++c) {
        double acc = 0.0;
        for (size_t m = 0; m < w.rows(); ++m) {
            const double v = std::fabs(w.at(m, c));
            acc = reducer == Reducer::max_abs ? std::max(acc, v) : acc + v;
        }
        stats.weight[c] = reducer == Reducer::max_abs ? acc : acc / static_cast<double>(w.rows());
    }
    return stats;
}

namespace detail {

constexpr double kStatFloor = 1e-8;

inline std::vector<double> candidate_scales(const ChannelStats& stats, double alpha) {
    std::vector<double> s(stats.activation.size());
    for (size_t c = 0; c < s.size(); ++c) {
        const double a = std::max(stats.activation[c], kStatFloor);
        const double w = std::max(stats.weight[c], kStatFloor);
        s[c] = std::pow(a, alpha) / std::pow(w, 1.0 - alpha);
    }
    return s;
}

enum class QuantSide : uint8_t { both, weight_only, act_only };

inline Tensor scale_weight(const Tensor& w, const std::vector<double>& s) {
    Tensor out = w;
    for (size_t m = 0; m < out.rows(); ++m)
        for (size_t c = 0; c < out.cols(); ++c) out.at(m, c) *= s[c];
    return out;
}

inline Tensor descale_activation(const Tensor& x, const std::vector<double>& s) {
    Tensor out = x;
    for (size_t c = 0; c < out.rows(); ++c)
        for (size_t t = 0; t < out.cols(); ++t) out.at(c, t) /= s[c];
    return out;
}

// Mean squared output error of the scaled+quantized product against the
// full-precision references, summed over every activation batch in index
// order.
inline double scaled_objective(const LayerCapsule& capsule, const std::vector<double>& s,
                               const ObjectiveConfig& cfg, QuantSide side,
                               const std::vector<Tensor>& references) {
    const Tensor w_scaled = scale_weight(capsule.weight, s);
    const Tensor w_op = side == QuantSide::act_only
                            ? w_scaled
                            : fake_quant(w_scaled, cfg.weight_format, cfg.weight_gran);
    double err = 0.0;
    size_t count = 0;
    size_t batch = 0;
    for (const Tensor* x : capsule.activation_batches()) {
        const Tensor x_scaled = descale_activation(*x, s);
        const Tensor x_op = side == QuantSide::weight_only
                                ? x_scaled
                                : fake_quant(x_scaled, cfg.act_format, cfg.act_gran);
        Tensor product = matmul(w_op, x_op);
        Tensor reference = references[batch++];
        if (cfg.product_transform) {
            cfg.product_transform(product);
            cfg.product_transform(reference);
        }
        for (size_t i = 0; i < product.data.size(); ++i) {
            const double d = product.data[i] - reference.data[i];
            err += d * d;
        }
        count += product.data.size();
    }
    return err / static_cast<double>(count);
}

inline std::vector<Tensor> full_precision_products(const LayerCapsule& capsule) {
    std::vector<Tensor> refs;
    for (const Tensor* x : capsule.activation_batches()) refs.push_back(matmul(capsule.weight, *x));
    return refs;
}

inline void check_capsule_for_search(const LayerCapsule& capsule) {
    capsule.validate();
    if (capsule.activations.empty())
        throw data_error("scale search: degenerate capsule (no activation tokens)");
}

}  // namespace detail

// Objective value for an externally chosen scale vector, with both operands
// quantized (the Eq.-1 style target). Useful for baselines and reports.
inline double scale_objective(const LayerCapsule& capsule, const std::vector<double>& s,
                              const ObjectiveConfig& cfg = {}) {
    detail::check_capsule_for_search(capsule);
    if (s.size() != capsule.in_features()) throw data_error("scale_objective: scale length mismatch");
    return detail::scaled_objective(capsule, s, cfg, detail::QuantSide::both,
                                    detail::full_precision_products(capsule));
}

// Grid search over alpha with both operands quantized. Ties keep the earliest
// grid entry, so results are independent of evaluation order.
inline ScaleResult aqas_search(const LayerCapsule& capsule, const std::vector<double>& grid,
                               Reducer reducer = Reducer::max_abs,
                               const ObjectiveConfig& cfg = {}) {
    detail::check_capsule_for_search(capsule);
    if (grid.empty()) throw data_error("aqas_search: empty alpha grid");
    const ChannelStats stats = channel_stats(capsule, reducer);
    const auto references = detail::full_precision_products(capsule);

    ScaleResult best;
    best.method = ScaleMethod::aqas;
    bool first = true;
    for (double alpha : grid) {
        auto s = detail::candidate_scales(stats, alpha);
        const double mse =
            detail::scaled_objective(capsule, s, cfg, detail::QuantSide::both, references);
        if (first || mse < best.mse) {
            first = false;
            best.scales = std::move(s);
            best.alpha = alpha;
            best.mse = mse;
        }
    }
    return best;
}

inline ScaleResult aqas_search(const LayerCapsule& capsule, const QuantFormat& fmt_w,
                               const QuantFormat& fmt_x, const std::vector<double>& grid,
                               Reducer reducer = Reducer::max_abs) {
    ObjectiveConfig cfg;
    cfg.weight_format = fmt_w;
    cfg.act_format = fmt_x;
    return aqas_search(capsule, grid, reducer, cfg);
}

// SQ-style baseline: fixed alpha, activation-quantization-only objective.
inline ScaleResult sq_scale(const LayerCapsule& capsule, double alpha,
                            Reducer reducer = Reducer::max_abs,
                            const ObjectiveConfig& cfg = {}) {
    detail::check_capsule_for_search(capsule);
    const ChannelStats stats = channel_stats(capsule, reducer);
    ScaleResult result;
    result.method = ScaleMethod::sq;
    result.alpha = alpha;
    result.scales = detail::candidate_scales(stats, alpha);
    result.mse = detail::scaled_objective(capsule, result.scales, cfg, detail::QuantSide::act_only,
                                          detail::full_precision_products(capsule));
    return result;
}

// AWQ-style baseline: grid search with weight-quantization-only objective.
inline ScaleResult awq_scale(const LayerCapsule& capsule, const std::vector<double>& grid,
                             Reducer reducer = Reducer::max_abs,
                             const ObjectiveConfig& cfg = {}) {
    detail::check_capsule_for_search(capsule);
    if (grid.empty()) throw data_error("awq_scale: empty alpha grid");
    const ChannelStats stats = channel_stats(capsule, reducer);
    const auto references = detail::full_precision_products(capsule);
    ScaleResult best;
    best.method = ScaleMethod::awq;
    bool first = true;
    for (double alpha : grid) {
        auto s = detail::candidate_scales(stats, alpha);
        const double mse =
            detail::scaled_objective(capsule, s, cfg, detail::QuantSide::weight_only, references);
        if (first || mse < best.mse) {
            first = false;
            best.scales = std::move(s);
            best.alpha = alpha;
            best.mse = mse;
        }
    }
    return best;
}

inline std::vector<double> uniform_alpha_grid(size_t points = 21) {
    if (points == 0) throw data_error("alpha grid: needs at least one point");
    std::vector<double> grid(points);
    if (points == 1) {
        grid[0] = 0.5;
        return grid;
    }
    for (size_t i = 0; i < points; ++i)
        grid[i] = static_cast<double>(i) / static_cast<double>(points - 1);
    return grid;
}

// Per output channel, pick the range-shrink ratio that minimizes that row's
// quantized output error. Rows are independent; ties keep the earliest ratio
// in the candidate list.
inline std::vector<double> clip_search(const Tensor& w_scaled, const Tensor& x_scaled,
                                       const QuantFormat& fmt_w,
                                       const std::vector<double>& ratios) {
    w_scaled.validate();
    x_scaled.validate();
    if (ratios.empty()) throw data_error("clip_search: empty ratio list");
    for (double r : ratios)
        if (!(r > 0.0) || r > 1.0) throw data_error("clip_search: ratios must lie in (0, 1]");
    if (w_scaled.rank() != 2 || x_scaled.rank() != 2 || w_scaled.cols() != x_scaled.rows())
        throw data_error("clip_search: W/X dimension mismatch");

    const size_t m_dim = w_scaled.rows(), c_dim = w_scaled.cols(), t_dim = x_scaled.cols();
    std::vector<double> chosen(m_dim, 1.0);
    std::vector<double> err_row(t_dim);
    for (size_t m = 0; m < m_dim; ++m) {
        double mn = w_scaled.at(m, 0), mx = w_scaled.at(m, 0);
        for (size_t c = 1; c < c_dim; ++c) {
            mn = std::min(mn, w_scaled.at(m, c));
            mx = std::max(mx, w_scaled.at(m, c));
        }
        double best_err = 0.0;
        bool first = true;
        for (double ratio : ratios) {
            const QuantParams qp = params_from_range(mn * ratio, mx * ratio, fmt_w);
            std::fill(err_row.begin(), err_row.end(), 0.0);
            for (size_t c = 0; c < c_dim; ++c) {
                const double wq = decode_value(encode_value(w_scaled.at(m, c), qp), qp);
                const double dw = wq - w_scaled.at(m, c);
                if (dw == 0.0) continue;
                for (size_t t = 0; t < t_dim; ++t) err_row[t] += dw * x_scaled.at(c, t);
            }
            double err = 0.0;
            for (double e : err_row) err += e * e;
            if (first || err < best_err) {
                first = false;
                best_err = err;
                chosen[m] = ratio;
            }
        }
    }
    return chosen;
}

// W' = W diag(s), X' = diag(s)^-1 X for every stored batch; value tensor
// untouched. Exact inverse of itself under 1/s.
inline LayerCapsule apply_scaling(const LayerCapsule& capsule, const std::vector<double>& s) {
    capsule.validate();
    if (s.size() != capsule.in_features()) throw data_error("apply_scaling: scale length mismatch");
    for (double v : s)
        if (!(v > 0.0) || !std::isfinite(v))
            throw data_error("apply_scaling: scales must be positive and finite");
    LayerCapsule out;
    out.name = capsule.name;
    out.weight = detail::scale_weight(capsule.weight, s);
    for (const auto& [len, x] : capsule.activations)
        out.activations[len] = detail::descale_activation(x, s);
    out.value = capsule.value;
    return out;
}

}  // namespace dintq
