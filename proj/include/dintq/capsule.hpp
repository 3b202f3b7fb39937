#pragma once

// Layer capsules: one weight matrix plus captured activation batches keyed by
// sequence length, optionally a Value-cache tensor. Capsules come from a JSON
// manifest referencing QTEN files, or from the synthetic generator used by
// tests and fixtures.
//
// Manifest schema (paths relative to the manifest file):
//   { "version": 1,
//     "layers": [ { "name": "...", "weight": "w.qten",
//                   "activations": { "128": "x128.qten", ... },
//                   "value": "v.qten" } ] }

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dintq/error.hpp"
#include "dintq/rng.hpp"
#include "dintq/tensor.hpp"

namespace dintq {

struct LayerCapsule {
    std::string name;
    Tensor weight;                          // M x C
    std::map<int64_t, Tensor> activations;  // sequence length -> C x T
    std::optional<Tensor> value;            // tokens x channels

    size_t out_features() const { return weight.rows(); }
    size_t in_features() const { return weight.cols(); }

    void validate() const {
        if (name.empty()) throw data_error("capsule: empty name");
        weight.validate();
        if (weight.rank() != 2) throw data_error("capsule: weight must be 2-D");
        for (const auto& [len, x] : activations) {
            if (len <= 0) throw data_error("capsule: sequence length must be positive");
            x.validate();
            if (x.rank() != 2 || x.rows() != in_features())
                throw data_error("capsule '" + name + "': C mismatch between weight and activation");
        }
        if (value) {
            value->validate();
            if (value->rank() != 2) throw data_error("capsule: value must be 2-D");
        }
    }

    // Activation batches in ascending sequence-length order.
    std::vector<const Tensor*> activation_batches() const {
        std::vector<const Tensor*> out;
        out.reserve(activations.size());
        for (const auto& [len, x] : activations) out.push_back(&x);
        return out;
    }
};

struct ManifestLayer {
    std::string name;
    std::string weight_path;
    std::map<int64_t, std::string> activation_paths;
    std::optional<std::string> value_path;
};

struct CapsuleManifest {
    int version = 1;
    std::vector<ManifestLayer> layers;
};

inline CapsuleManifest parse_manifest(const nlohmann::json& j) {
    CapsuleManifest m;
    try {
        m.version = j.at("version").get<int>();
        std::set<std::string> names;
        for (const auto& jl : j.at("layers")) {
            ManifestLayer layer;
            layer.name = jl.at("name").get<std::string>();
            if (!names.insert(layer.name).second)
                throw data_error("manifest: duplicate layer name '" + layer.name + "'");
            layer.weight_path = jl.at("weight").get<std::string>();
            for (const auto& [key, path] : jl.at("activations").items()) {
                size_t used = 0;
                const int64_t len = std::stoll(key, &used);
                if (used != key.size() || len <= 0)
                    throw data_error("manifest: bad sequence-length key '" + key + "'");
                layer.activation_paths[len] = path.get<std::string>();
            }
            if (jl.contains("value")) layer.value_path = jl.at("value").get<std::string>();
            m.layers.push_back(std::move(layer));
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("manifest: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw data_error("manifest: bad sequence-length key");
    }
    if (m.version != 1) throw data_error("manifest: unsupported version");
    return m;
}

inline std::vector<LayerCapsule> load_capsules(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw data_error("manifest: cannot open " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("manifest: ") + e.what());
    }
    const CapsuleManifest m = parse_manifest(j);
    const auto base = manifest_path.parent_path();
    std::vector<LayerCapsule> capsules;
    capsules.reserve(m.layers.size());
    for (const auto& layer : m.layers) {
        LayerCapsule c;
        c.name = layer.name;
        c.weight = read_tensor(base / layer.weight_path);
        for (const auto& [len, path] : layer.activation_paths)
            c.activations[len] = read_tensor(base / path);
        if (layer.value_path) c.value = read_tensor(base / *layer.value_path);
        c.validate();
        capsules.push_back(std::move(c));
    }
    return capsules;
}

// Writes every tensor of every capsule as QTEN next to a fresh manifest.json.
inline std::filesystem::path write_capsules(const std::vector<LayerCapsule>& capsules,
                                            const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["version"] = 1;
    j["layers"] = nlohmann::json::array();
    for (const auto& c : capsules) {
        c.validate();
        nlohmann::json jl;
        jl["name"] = c.name;
        const std::string wname = c.name + ".weight.qten";
        write_tensor(c.weight, dir / wname);
        jl["weight"] = wname;
        jl["activations"] = nlohmann::json::object();
        for (const auto& [len, x] : c.activations) {
            const std::string xname = c.name + ".x" + std::to_string(len) + ".qten";
            write_tensor(x, dir / xname);
            jl["activations"][std::to_string(len)] = xname;
        }
        if (c.value) {
            const std::string vname = c.name + ".value.qten";
            write_tensor(*c.value, dir / vname);
            jl["value"] = vname;
        }
        j["layers"].push_back(std::move(jl));
    }
    const auto manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path);
    if (!out) throw data_error("manifest: cannot write " + manifest_path.string());
    out << j.dump(2) << "\n";
    return manifest_path;
}

// ---------------------------------------------------------------------------
// Synthetic capsules.
//
// Activations follow a latent-factor model (channels share common token
// factors, so X X^T is genuinely correlated, as in transformer layers), with
// two regimes:
//   stable:    per-channel max is planted exactly and does not depend on the
//              sequence length; the factor mixing is length-independent, so
//              the dominant channels stay put
//   expanding: per-channel max grows as (L/32)^gamma_c, extra channels become
//              outliers once L passes a per-channel threshold, and the factor
//              mixing drifts with L - ranges, dominant channels, and Hessian
//              shape all depend on the sequence length
// ---------------------------------------------------------------------------

enum class ActivationProfile : uint8_t { stable, expanding };

struct SynthSpec {
    std::string name = "layer0";
    size_t rows = 16;               // M (output features)
    size_t cols = 32;               // C (input features)
    size_t tokens = 128;            // default sequence length when lengths is empty
    std::vector<int64_t> lengths;   // sequence lengths to emit
    ActivationProfile profile = ActivationProfile::stable;
    uint64_t seed = 0;
    size_t outlier_channels = 0;    // 0 -> max(1, cols/8)
    double outlier_gain = 16.0;
    bool with_value = false;
    // Minimum token count per stored batch: each length L gets
    // ceil(min_tokens / L) concatenated sequences. 0 keeps one sequence per
    // length. Comparable token mass across lengths keeps Hessian sampling
    // noise from masking the length dependence itself.
    size_t min_tokens = 0;
};

namespace detail {

inline constexpr uint64_t kStreamChannels = 1;
inline constexpr uint64_t kStreamWeight = 2;
inline constexpr uint64_t kStreamValue = 3;
inline constexpr uint64_t kStreamActivation = 4;
inline constexpr uint64_t kStreamThresholds = 5;
inline constexpr uint64_t kStreamGrowth = 6;
inline constexpr uint64_t kStreamMixing = 7;
inline constexpr uint64_t kStreamFactors = 8;

}  // namespace detail

inline LayerCapsule synth_capsule(const SynthSpec& spec) {
    if (spec.rows == 0 || spec.cols == 0 || spec.tokens == 0)
        throw data_error("synth: dimensions must be positive");
    std::vector<int64_t> lengths = spec.lengths;
    if (lengths.empty()) lengths.push_back(static_cast<int64_t>(spec.tokens));
    for (int64_t len : lengths)
        if (len <= 0) throw data_error("synth: sequence lengths must be positive");

    const size_t n_outliers =
        spec.outlier_channels ? spec.outlier_channels : std::max<size_t>(1, spec.cols / 8);

    // Per-channel base scale, with a fixed outlier set.
    auto ch_eng = rng::engine(spec.seed, detail::kStreamChannels);
    std::vector<double> sigma(spec.cols);
    for (auto& s : sigma) s = std::exp(rng::uniform(ch_eng, -1.0, 1.0));
    std::vector<size_t> base_outliers;
    for (size_t k = 0; k < n_outliers && k < spec.cols; ++k) {
        size_t c = rng::below(ch_eng, spec.cols);
        while (std::find(base_outliers.begin(), base_outliers.end(), c) != base_outliers.end())
            c = (c + 1) % spec.cols;
        base_outliers.push_back(c);
        sigma[c] *= spec.outlier_gain;
    }

    // Expanding profile: every channel grows with its own exponent (so the
    // channel-energy profile, and with it the Hessian shape, depends on the
    // length, not just a global scale), and a channel turns into an extra
    // outlier once the length passes its threshold. Both are per-channel and
    // independent of which lengths the caller requests.
    std::vector<double> expand_threshold(spec.cols, std::numeric_limits<double>::infinity());
    std::vector<double> growth_exponent(spec.cols, 0.5);
    if (spec.profile == ActivationProfile::expanding) {
        auto th_eng = rng::engine(spec.seed, detail::kStreamThresholds);
        for (size_t c = 0; c < spec.cols; ++c) {
            if (rng::uniform01(th_eng) < 0.25)
                expand_threshold[c] = std::ldexp(64.0, static_cast<int>(rng::below(th_eng, 5)));
        }
        auto gr_eng = rng::engine(spec.seed, detail::kStreamGrowth);
        for (size_t c = 0; c < spec.cols; ++c)
            growth_exponent[c] = rng::uniform(gr_eng, 0.15, 0.85);
    }

    LayerCapsule capsule;
    capsule.name = spec.name;

    // Values are snapped to f32 so the in-memory capsule and its QTEN
    // round trip are identical.
    const auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };

    auto w_eng = rng::engine(spec.seed, detail::kStreamWeight);
    capsule.weight = Tensor::zeros(DType::f32, {spec.rows, spec.cols});
    for (size_t m = 0; m < spec.rows; ++m)
        for (size_t c = 0; c < spec.cols; ++c)
            capsule.weight.at(m, c) = f32(rng::normal(w_eng) * 0.5);

    // Two unit-row mixing bases; the expanding profile slides between them
    // with length, the stable profile always uses the first.
    const size_t latent = std::max<size_t>(2, spec.cols / 2);
    auto mix_eng = rng::engine(spec.seed, detail::kStreamMixing);
    const auto draw_mixing = [&] {
        std::vector<double> m(spec.cols * latent);
        for (size_t c = 0; c < spec.cols; ++c) {
            double norm = 0.0;
            for (size_t k = 0; k < latent; ++k) {
                m[c * latent + k] = rng::normal(mix_eng);
                norm += m[c * latent + k] * m[c * latent + k];
            }
            norm = std::sqrt(norm);
            for (size_t k = 0; k < latent; ++k) m[c * latent + k] /= norm;
        }
        return m;
    };
    const std::vector<double> mixing_a = draw_mixing();
    const std::vector<double> mixing_b = draw_mixing();
    const double factor_share = 0.9;

    for (int64_t len : lengths) {
        auto x_eng = rng::engine(spec.seed, rng::mix(detail::kStreamActivation, static_cast<uint64_t>(len)));
        const size_t seq_count =
            spec.min_tokens == 0
                ? 1
                : std::max<size_t>(1, (spec.min_tokens + static_cast<size_t>(len) - 1) /
                                          static_cast<size_t>(len));
        const size_t t_total = seq_count * static_cast<size_t>(len);

        double blend = 0.0;
        if (spec.profile == ActivationProfile::expanding)
            blend = std::clamp(std::log2(static_cast<double>(len) / 32.0) / 4.0, 0.0, 1.0);
        const double ca = std::cos(blend * 1.5707963267948966);
        const double cb = std::sin(blend * 1.5707963267948966);

        // Token-major factor trajectory. The stable profile shares one
        // trajectory across lengths (shorter batches are prefixes), so its
        // cross-length differences carry no sampling excuse; the expanding
        // profile redraws per length.
        std::vector<double> factors(latent * t_total);
        if (spec.profile == ActivationProfile::stable) {
            auto f_eng = rng::engine(spec.seed, detail::kStreamFactors);
            for (auto& f : factors) f = rng::uniform(f_eng, -1.0, 1.0);
        } else {
            for (auto& f : factors) f = rng::uniform(x_eng, -1.0, 1.0);
        }

        Tensor x = Tensor::zeros(DType::f32, {spec.cols, t_total});
        // Hard bound for |shared|: rows of the blended mixing have 2-norm at
        // most ca + cb, factors sit in [-1, 1].
        const double factor_norm = 1.0 / (std::sqrt(static_cast<double>(latent)) * (ca + cb));
        for (size_t c = 0; c < spec.cols; ++c) {
            double scale = sigma[c];
            if (spec.profile == ActivationProfile::expanding) {
                scale *= std::pow(static_cast<double>(len) / 32.0, growth_exponent[c]);
                if (static_cast<double>(len) >= expand_threshold[c]) scale *= spec.outlier_gain;
            }
            for (size_t t = 0; t < t_total; ++t) {
                double shared = 0.0;
                for (size_t k = 0; k < latent; ++k)
                    shared += (ca * mixing_a[c * latent + k] + cb * mixing_b[c * latent + k]) *
                              factors[t * latent + k];
                const double e = (1.0 - factor_share) * rng::uniform(x_eng, -1.0, 1.0) +
                                 factor_share * shared * factor_norm;
                x.at(c, t) = f32(0.95 * e * scale);
            }
            // Plant the extremes so the per-channel range is exact.
            x.at(c, 0) = f32(scale);
            if (t_total > 1) x.at(c, 1) = f32(-scale);
        }
        capsule.activations[len] = std::move(x);
    }

    if (spec.with_value) {
        auto v_eng = rng::engine(spec.seed, detail::kStreamValue);
        Tensor v = Tensor::zeros(DType::f32, {spec.tokens, spec.rows});
        for (auto& e : v.data) e = f32(rng::normal(v_eng) * 0.5);
        capsule.value = std::move(v);
    }

    capsule.validate();
    return capsule;
}

}  // namespace dintq
