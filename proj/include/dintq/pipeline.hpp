#pragma once

// Per-layer recipe: optional sequence-length restriction of the calibration
// set, optional scale search (SQ/AWQ/AQAS), optional per-channel weight
// clipping, nearest or Hessian-based weight quantization, optional Value
// path, and the diagnostic reports. Layers are independent; the layer loop
// can run on N threads with results identical to the sequential run.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dintq/analysis.hpp"
#include "dintq/capsule.hpp"
#include "dintq/error.hpp"
#include "dintq/optq.hpp"
#include "dintq/quantizer.hpp"
#include "dintq/scaler.hpp"

namespace dintq {

struct RecipeConfig {
    QuantFormat weight_format = QuantFormat::dint(4);
    QuantFormat act_format = QuantFormat::uniform(8);
    std::optional<QuantFormat> value_format;  // empty -> value path skipped
    Granularity weight_gran = Granularity::per_output_channel();
    Granularity act_gran = Granularity::per_token();
    Granularity value_gran = Granularity::per_channel();
    ScaleMethod scaling = ScaleMethod::none;
    double sq_alpha = 0.5;
    size_t grid_points = 21;
    Reducer reducer = Reducer::max_abs;
    bool use_optq = false;
    double damping = 0.01;
    int64_t slac_target_len = 0;       // 0 -> calibrate on all stored batches
    std::vector<double> clip_ratios;   // empty -> no clip search
    unsigned jobs = 1;

    void validate() const {
        weight_format.validate();
        act_format.validate();
        if (value_format) value_format->validate();
        if (!clip_ratios.empty() && weight_gran != Granularity::per_output_channel())
            throw data_error("recipe: clip search needs per-output-channel weights");
        if (grid_points == 0) throw data_error("recipe: grid must have at least one point");
        if (jobs == 0) throw data_error("recipe: jobs must be positive");
    }
};

struct LayerOutcome {
    std::string name;
    ScaleResult scale;
    QuantizedTensor weight_q;                 // of the scaled weights
    std::optional<QuantizedTensor> value_q;
    ErrorEntry error;                         // decomposition on calibration tokens
    double output_mse = 0.0;                  // quantized product vs full-precision product
    LayerRange range;                         // ranges of the original capsule
};

struct RecipeResult {
    RecipeConfig config;
    std::vector<LayerOutcome> layers;
};

namespace detail {

inline Tensor concat_token_batches(const LayerCapsule& capsule) {
    size_t total = 0;
    for (const Tensor* x : capsule.activation_batches()) total += x->cols();
    const size_t c_dim = capsule.in_features();
    Tensor out = Tensor::zeros(DType::f64, {c_dim, total});
    size_t col = 0;
    for (const Tensor* x : capsule.activation_batches()) {
        for (size_t c = 0; c < c_dim; ++c)
            for (size_t t = 0; t < x->cols(); ++t) out.at(c, col + t) = x->at(c, t);
        col += x->cols();
    }
    return out;
}

inline std::vector<QuantParams> clipped_row_params(const Tensor& w, const QuantFormat& fmt,
                                                   const std::vector<double>& ratios) {
    std::vector<QuantParams> params;
    params.reserve(w.rows());
    for (size_t m = 0; m < w.rows(); ++m) {
        double mn = w.at(m, 0), mx = w.at(m, 0);
        for (size_t c = 1; c < w.cols(); ++c) {
            mn = std::min(mn, w.at(m, c));
            mx = std::max(mx, w.at(m, c));
        }
        params.push_back(params_from_range(mn * ratios[m], mx * ratios[m], fmt));
    }
    return params;
}

inline LayerOutcome run_layer(const LayerCapsule& capsule, const RecipeConfig& cfg) {
    capsule.validate();
    LayerOutcome out;
    out.name = capsule.name;

    const LayerCapsule calib = cfg.slac_target_len > 0
                                   ? slac_restrict(capsule, cfg.slac_target_len)
                                   : capsule;

    ObjectiveConfig obj;
    obj.weight_format = cfg.weight_format;
    obj.act_format = cfg.act_format;
    obj.weight_gran = cfg.weight_gran;
    obj.act_gran = cfg.act_gran;

    switch (cfg.scaling) {
        case ScaleMethod::none:
            out.scale.method = ScaleMethod::none;
            out.scale.scales.assign(capsule.in_features(), 1.0);
            break;
        case ScaleMethod::sq:
            out.scale = sq_scale(calib, cfg.sq_alpha, cfg.reducer, obj);
            break;
        case ScaleMethod::awq:
            out.scale = awq_scale(calib, uniform_alpha_grid(cfg.grid_points), cfg.reducer, obj);
            break;
        case ScaleMethod::aqas:
            out.scale = aqas_search(calib, uniform_alpha_grid(cfg.grid_points), cfg.reducer, obj);
            break;
    }

    const LayerCapsule scaled = apply_scaling(calib, out.scale.scales);

    std::vector<QuantParams> wparams;
    if (!cfg.clip_ratios.empty()) {
        const Tensor x_all = concat_token_batches(scaled);
        const auto ratios = clip_search(scaled.weight, x_all, cfg.weight_format, cfg.clip_ratios);
        wparams = clipped_row_params(scaled.weight, cfg.weight_format, ratios);
        out.scale.clip_ratios = ratios;
    } else {
        wparams = calibrate_params(scaled.weight, cfg.weight_format, cfg.weight_gran);
    }

    if (cfg.use_optq) {
        const Hessian hess =
            damp(accumulate_hessian(scaled.activation_batches()), cfg.damping);
        out.weight_q = optq_quantize(scaled.weight, hess, cfg.weight_format, cfg.weight_gran,
                                     std::move(wparams));
    } else {
        out.weight_q = quantize_with_params(scaled.weight, std::move(wparams), cfg.weight_gran);
    }

    const Tensor w_deq = dequantize(out.weight_q);
    out.error = decompose_error(scaled.weight, w_deq, scaled.activation_batches());

    // Output error of the fully quantized product against the original
    // unscaled full-precision product, over the calibration tokens.
    double err = 0.0;
    size_t count = 0;
    auto scaled_batches = scaled.activation_batches();
    auto original_batches = calib.activation_batches();
    for (size_t b = 0; b < scaled_batches.size(); ++b) {
        const Tensor xq = fake_quant(*scaled_batches[b], cfg.act_format, cfg.act_gran);
        const Tensor product = matmul(w_deq, xq);
        const Tensor reference = matmul(calib.weight, *original_batches[b]);
        for (size_t i = 0; i < product.data.size(); ++i) {
            const double d = product.data[i] - reference.data[i];
            err += d * d;
        }
        count += product.data.size();
    }
    out.output_mse = err / static_cast<double>(count);

    if (cfg.value_format && capsule.value)
        out.value_q = quantize(*capsule.value, *cfg.value_format, cfg.value_gran);

    out.range = range_report({capsule}).layers.front().second;
    return out;
}

// Deterministic 9-significant-digit view of a double, so report bundles are
// diffable across runs and job counts.
inline double round_sig9(double v) {
    if (v == 0.0 || !std::isfinite(v)) return v;
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::strtod(buf, nullptr);
}

inline nlohmann::json rounded(const std::vector<double>& values) {
    nlohmann::json arr = nlohmann::json::array();
    for (double v : values) arr.push_back(round_sig9(v));
    return arr;
}

}  // namespace detail

inline RecipeResult run_recipe(const std::vector<LayerCapsule>& capsules,
                               const RecipeConfig& cfg) {
    cfg.validate();
    if (capsules.empty()) throw data_error("recipe: no capsules");
    RecipeResult result;
    result.config = cfg;
    result.layers.resize(capsules.size());

    const unsigned workers =
        std::min<unsigned>(cfg.jobs, static_cast<unsigned>(capsules.size()));
    if (workers <= 1) {
        for (size_t i = 0; i < capsules.size(); ++i)
            result.layers[i] = detail::run_layer(capsules[i], cfg);
        return result;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < capsules.size(); i = next.fetch_add(1)) {
                try {
                    result.layers[i] = detail::run_layer(capsules[i], cfg);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
    return result;
}

inline nlohmann::json config_json(const RecipeConfig& cfg) {
    nlohmann::json j;
    j["weight_format"] = format_name(cfg.weight_format);
    if (cfg.weight_format.kind == FormatKind::denorm_int)
        j["special_ratio"] = cfg.weight_format.special_ratio;
    j["act_format"] = format_name(cfg.act_format);
    j["value_format"] = cfg.value_format ? format_name(*cfg.value_format) : "none";
    j["scaling"] = to_string(cfg.scaling);
    j["sq_alpha"] = cfg.sq_alpha;
    j["grid_points"] = cfg.grid_points;
    j["reducer"] = cfg.reducer == Reducer::max_abs ? "max" : "mean";
    j["optq"] = cfg.use_optq;
    j["damping"] = cfg.damping;
    j["slac_target_len"] = cfg.slac_target_len;
    j["clip_ratios"] = cfg.clip_ratios;
    return j;
}

inline nlohmann::json summary_json(const RecipeResult& result) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& layer : result.layers) {
        nlohmann::json jl;
        jl["scaling"] = {{"method", to_string(layer.scale.method)},
                         {"alpha", detail::round_sig9(layer.scale.alpha)},
                         {"mse", detail::round_sig9(layer.scale.mse)},
                         {"scales", detail::rounded(layer.scale.scales)}};
        if (layer.scale.clip_ratios)
            jl["scaling"]["clip_ratios"] = detail::rounded(*layer.scale.clip_ratios);
        jl["error"] = {{"underflow_term", detail::round_sig9(layer.error.underflow_term)},
                       {"rounding_term", detail::round_sig9(layer.error.rounding_term)},
                       {"cross_term", detail::round_sig9(layer.error.cross_term)},
                       {"total", detail::round_sig9(layer.error.total)},
                       {"underflow_fraction", detail::round_sig9(layer.error.underflow_fraction)}};
        jl["output_mse"] = detail::round_sig9(layer.output_mse);
        layers[layer.name] = std::move(jl);
    }
    return {{"layers", std::move(layers)}};
}

inline nlohmann::json range_json_rounded(const RangeReport& report) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [name, range] : report.layers) {
        nlohmann::json jr;
        jr["weight_min"] = detail::round_sig9(range.weight_min);
        jr["weight_max"] = detail::round_sig9(range.weight_max);
        jr["act_min"] = detail::round_sig9(range.act_min);
        jr["act_max"] = detail::round_sig9(range.act_max);
        nlohmann::json per_channel = nlohmann::json::object();
        for (const auto& [len, maxes] : range.per_channel_max)
            per_channel[std::to_string(len)] = detail::rounded(maxes);
        jr["per_channel_max"] = std::move(per_channel);
        layers[name] = std::move(jr);
    }
    return {{"layers", std::move(layers)}};
}

// Results directory: config.json, summary.json, range_report.json, and the
// dequantized weight / value tensors per layer.
inline void write_bundle(const RecipeResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto dump = [&](const nlohmann::json& j, const std::string& name) {
        std::ofstream out(dir / name);
        if (!out) throw data_error("bundle: cannot write " + (dir / name).string());
        out << j.dump(2) << "\n";
    };
    dump(config_json(result.config), "config.json");
    dump(summary_json(result), "summary.json");

    RangeReport ranges;
    for (const auto& layer : result.layers) ranges.layers.emplace_back(layer.name, layer.range);
    dump(range_json_rounded(ranges), "range_report.json");

    for (const auto& layer : result.layers) {
        std::string safe = layer.name;
        for (auto& ch : safe)
            if (ch == '/' || ch == '\\') ch = '_';
        write_tensor(dequantize(layer.weight_q), dir / (safe + ".weight_q.qten"));
        if (layer.value_q)
            write_tensor(dequantize(*layer.value_q), dir / (safe + ".value_q.qten"));
    }
}

}  // namespace dintq
