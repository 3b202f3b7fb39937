// dintq command-line surface: batch quantization runs, scale search, error
// and range reports, SLAC subset construction, MAC datapath checks, special
// value sweeps, and synthetic fixture generation.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dintq/analysis.hpp"
#include "dintq/capsule.hpp"
#include "dintq/macsim.hpp"
#include "dintq/pipeline.hpp"
#include "dintq/scaler.hpp"

namespace {

using namespace dintq;

QuantFormat parse_format(const std::string& name, double special_ratio) {
    if (name.rfind("dint", 0) == 0) {
        const int bits = std::stoi(name.substr(4));
        return QuantFormat::dint(bits, special_ratio);
    }
    if (name.rfind("int", 0) == 0) {
        const int bits = std::stoi(name.substr(3));
        return QuantFormat::uniform(bits);
    }
    if (name == "fp4") return QuantFormat::fp4(3, 0);
    if (name.rfind("fp4-1-", 0) == 0 && name.size() == 9) {
        const int e = name[6] - '0';
        const int m = name[8] - '0';
        return QuantFormat::fp4(e, m);
    }
    throw data_error("unknown format '" + name + "' (expected intB, dintB, fp4, fp4-1-e-m)");
}

Granularity parse_granularity(const std::string& name) {
    if (name == "tensor") return Granularity::per_tensor();
    if (name == "row" || name == "output-channel") return Granularity::per_output_channel();
    if (name == "token" || name == "channel") return Granularity::per_token();
    if (name.rfind("group:", 0) == 0)
        return Granularity::group_wise(static_cast<size_t>(std::stoul(name.substr(6))));
    throw data_error("unknown granularity '" + name + "'");
}

void emit_json(const nlohmann::json& j, const std::string& out_path) {
    const std::string text = j.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path);
        if (!out) throw data_error("cannot write " + out_path);
        out << text;
    }
}

struct QuantizeArgs {
    std::string manifest, out_dir;
    std::string wfmt = "dint4", afmt = "int8", vfmt = "none";
    std::string scaling = "none";
    std::string wgran = "row", agran = "token", vgran = "channel";
    std::string reducer = "max";
    double special_ratio = 0.5;
    double sq_alpha = 0.5;
    double damping = 0.01;
    size_t grid = 21;
    bool optq = false;
    int64_t slac_len = 0;
    std::vector<double> clip;
    unsigned jobs = 1;
};

RecipeConfig build_config(const QuantizeArgs& a) {
    RecipeConfig cfg;
    cfg.weight_format = parse_format(a.wfmt, a.special_ratio);
    cfg.act_format = parse_format(a.afmt, a.special_ratio);
    if (a.vfmt != "none") cfg.value_format = parse_format(a.vfmt, a.special_ratio);
    cfg.weight_gran = parse_granularity(a.wgran);
    cfg.act_gran = parse_granularity(a.agran);
    cfg.value_gran = parse_granularity(a.vgran);
    if (a.scaling == "none") cfg.scaling = ScaleMethod::none;
    else if (a.scaling == "sq") cfg.scaling = ScaleMethod::sq;
    else if (a.scaling == "awq") cfg.scaling = ScaleMethod::awq;
    else if (a.scaling == "aqas") cfg.scaling = ScaleMethod::aqas;
    else throw data_error("unknown scaling method '" + a.scaling + "'");
    if (a.reducer == "max") cfg.reducer = Reducer::max_abs;
    else if (a.reducer == "mean") cfg.reducer = Reducer::mean_abs;
    else throw data_error("unknown reducer '" + a.reducer + "'");
    cfg.sq_alpha = a.sq_alpha;
    cfg.damping = a.damping;
    cfg.grid_points = a.grid;
    cfg.use_optq = a.optq;
    cfg.slac_target_len = a.slac_len;
    cfg.clip_ratios = a.clip;
    cfg.jobs = a.jobs;
    return cfg;
}

int cmd_quantize(const QuantizeArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    const RecipeConfig cfg = build_config(a);
    const RecipeResult result = run_recipe(capsules, cfg);
    write_bundle(result, a.out_dir);
    for (const auto& layer : result.layers)
        std::printf("%s: output_mse=%.9g underflow_fraction=%.9g\n", layer.name.c_str(),
                    layer.output_mse, layer.error.underflow_fraction);
    std::printf("bundle: %s\n", a.out_dir.c_str());
    return 0;
}

struct ScaleSearchArgs {
    std::string manifest, method = "aqas", out_path;
    std::string wfmt = "dint4", afmt = "int8", reducer = "max";
    double special_ratio = 0.5;
    double sq_alpha = 0.5;
    size_t grid = 21;
};

int cmd_scale_search(const ScaleSearchArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    ObjectiveConfig obj;
    obj.weight_format = parse_format(a.wfmt, a.special_ratio);
    obj.act_format = parse_format(a.afmt, a.special_ratio);
    const Reducer reducer = a.reducer == "mean" ? Reducer::mean_abs : Reducer::max_abs;
    if (a.reducer != "mean" && a.reducer != "max")
        throw data_error("unknown reducer '" + a.reducer + "'");

    nlohmann::json layers = nlohmann::json::object();
    for (const auto& capsule : capsules) {
        ScaleResult r;
        if (a.method == "aqas")
            r = aqas_search(capsule, uniform_alpha_grid(a.grid), reducer, obj);
        else if (a.method == "sq")
            r = sq_scale(capsule, a.sq_alpha, reducer, obj);
        else if (a.method == "awq")
            r = awq_scale(capsule, uniform_alpha_grid(a.grid), reducer, obj);
        else
            throw data_error("unknown method '" + a.method + "'");
        layers[capsule.name] = {{"method", to_string(r.method)},
                                {"alpha", detail::round_sig9(r.alpha)},
                                {"mse", detail::round_sig9(r.mse)},
                                {"scales", detail::rounded(r.scales)}};
    }
    emit_json({{"layers", std::move(layers)}}, a.out_path);
    return 0;
}

struct AnalyzeArgs {
    std::string manifest, out_path;
    std::string wfmt = "dint4", wgran = "row";
    double special_ratio = 0.5;
};

int cmd_analyze(const AnalyzeArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    const QuantFormat fmt = parse_format(a.wfmt, a.special_ratio);
    const Granularity gran = parse_granularity(a.wgran);

    nlohmann::json error_layers = nlohmann::json::object();
    for (const auto& capsule : capsules) {
        const Tensor wq = fake_quant(capsule.weight, fmt, gran);
        const ErrorEntry e = decompose_error(capsule.weight, wq, capsule.activation_batches());
        error_layers[capsule.name] = {
            {"underflow_term", detail::round_sig9(e.underflow_term)},
            {"rounding_term", detail::round_sig9(e.rounding_term)},
            {"cross_term", detail::round_sig9(e.cross_term)},
            {"total", detail::round_sig9(e.total)},
            {"underflow_fraction", detail::round_sig9(e.underflow_fraction)}};
    }
    nlohmann::json report;
    report["error_report"] = {{"layers", std::move(error_layers)}};
    report["range_report"] = range_json_rounded(range_report(capsules));
    emit_json(report, a.out_path);
    return 0;
}

struct SlacArgs {
    std::string manifest, out_dir;
    int64_t target_len = 0;
};

int cmd_slac(const SlacArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    std::vector<LayerCapsule> restricted;
    restricted.reserve(capsules.size());
    for (const auto& capsule : capsules) restricted.push_back(slac_restrict(capsule, a.target_len));
    const auto manifest_path = write_capsules(restricted, a.out_dir);
    std::printf("%s\n", manifest_path.string().c_str());
    return 0;
}

struct MacCheckArgs {
    std::string manifest;
    double tolerance = 1e-6;
    double special_ratio = 0.5;
};

int cmd_mac_check(const MacCheckArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    const QuantFormat wfmt = QuantFormat::dint(4, a.special_ratio);
    const QuantFormat xfmt = QuantFormat::uniform(8);
    bool ok = true;
    for (const auto& capsule : capsules) {
        const QuantizedTensor wq =
            quantize(capsule.weight, wfmt, Granularity::per_output_channel());
        const Tensor w_deq = dequantize(wq);
        double worst = 0.0;
        for (const Tensor* x : capsule.activation_batches()) {
            const QuantizedTensor xq = quantize(*x, xfmt, Granularity::per_token());
            const Tensor mac = mac_matmul(wq, xq);
            const Tensor ref = matmul(w_deq, dequantize(xq));
            double scale = 1.0;
            for (double v : ref.data) scale = std::max(scale, std::fabs(v));
            for (size_t i = 0; i < ref.data.size(); ++i)
                worst = std::max(worst, std::fabs(mac.data[i] - ref.data[i]) / scale);
        }
        std::printf("%s: max_rel_err=%.9g\n", capsule.name.c_str(), worst);
        ok = ok && worst <= a.tolerance;
    }
    if (!ok) throw numeric_error("mac-check: datapath mismatch beyond tolerance");
    return 0;
}

struct SweepArgs {
    std::string manifest, out_path;
    std::vector<double> ratios{0.5, 0.25, 0.125};
};

int cmd_sweep_special(const SweepArgs& a) {
    const auto capsules = load_capsules(a.manifest);
    if (a.ratios.empty()) throw data_error("sweep-special: empty ratio list");
    nlohmann::json rows = nlohmann::json::array();
    double best_mse = 0.0;
    double selected = a.ratios.front();
    bool first = true;
    std::printf("%-12s %s\n", "ratio", "mse");
    for (double ratio : a.ratios) {
        const QuantFormat fmt = QuantFormat::dint(4, ratio);
        double err = 0.0;
        size_t count = 0;
        for (const auto& capsule : capsules) {
            const Tensor wq = fake_quant(capsule.weight, fmt, Granularity::per_output_channel());
            for (const Tensor* x : capsule.activation_batches()) {
                const Tensor product = matmul(wq, *x);
                const Tensor reference = matmul(capsule.weight, *x);
                for (size_t i = 0; i < product.data.size(); ++i) {
                    const double d = product.data[i] - reference.data[i];
                    err += d * d;
                }
                count += product.data.size();
            }
        }
        const double mse = err / static_cast<double>(count);
        std::printf("%-12.9g %.9g\n", ratio, mse);
        rows.push_back({{"ratio", ratio}, {"mse", detail::round_sig9(mse)}});
        if (first || mse < best_mse) {
            first = false;
            best_mse = mse;
            selected = ratio;
        }
    }
    std::printf("selected: %.9g\n", selected);
    if (!a.out_path.empty())
        emit_json({{"rows", std::move(rows)}, {"selected", selected}}, a.out_path);
    return 0;
}

struct SynthArgs {
    std::string profile = "stable", out_dir;
    size_t layers = 1;
    uint64_t seed = 0;
    size_t m = 16, c = 32, t = 128;
    std::vector<int64_t> lengths;
    size_t min_tokens = 0;
    bool with_value = false;
};

int cmd_synth(const SynthArgs& a) {
    if (a.profile != "stable" && a.profile != "expanding")
        throw data_error("unknown profile '" + a.profile + "'");
    std::vector<LayerCapsule> capsules;
    for (size_t k = 0; k < a.layers; ++k) {
        SynthSpec spec;
        spec.name = "layer" + std::to_string(k);
        spec.rows = a.m;
        spec.cols = a.c;
        spec.tokens = a.t;
        spec.lengths = a.lengths;
        spec.profile =
            a.profile == "stable" ? ActivationProfile::stable : ActivationProfile::expanding;
        spec.seed = rng::mix(a.seed, k);
        spec.min_tokens = a.min_tokens;
        spec.with_value = a.with_value;
        capsules.push_back(synth_capsule(spec));
    }
    const auto manifest_path = write_capsules(capsules, a.out_dir);
    std::printf("%s\n", manifest_path.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dintq: W4A8 post-training quantization toolkit"};
    app.require_subcommand(1);

    QuantizeArgs qa;
    auto* quantize_cmd = app.add_subcommand("quantize", "run the full recipe and write a bundle");
    quantize_cmd->add_option("--manifest", qa.manifest)->required();
    quantize_cmd->add_option("--out", qa.out_dir)->required();
    quantize_cmd->add_option("--wfmt", qa.wfmt);
    quantize_cmd->add_option("--afmt", qa.afmt);
    quantize_cmd->add_option("--vfmt", qa.vfmt);
    quantize_cmd->add_option("--scaling", qa.scaling);
    quantize_cmd->add_option("--wgran", qa.wgran);
    quantize_cmd->add_option("--agran", qa.agran);
    quantize_cmd->add_option("--vgran", qa.vgran);
    quantize_cmd->add_option("--reducer", qa.reducer);
    quantize_cmd->add_option("--special-ratio", qa.special_ratio);
    quantize_cmd->add_option("--sq-alpha", qa.sq_alpha);
    quantize_cmd->add_option("--damping", qa.damping);
    quantize_cmd->add_option("--grid", qa.grid);
    quantize_cmd->add_flag("--optq", qa.optq);
    quantize_cmd->add_option("--slac-len", qa.slac_len);
    quantize_cmd->add_option("--clip", qa.clip)->delimiter(',');
    quantize_cmd->add_option("--jobs", qa.jobs);

    ScaleSearchArgs sa;
    auto* scale_cmd = app.add_subcommand("scale-search", "per-layer scale search report");
    scale_cmd->add_option("--manifest", sa.manifest)->required();
    scale_cmd->add_option("--method", sa.method);
    scale_cmd->add_option("--grid", sa.grid);
    scale_cmd->add_option("--reducer", sa.reducer);
    scale_cmd->add_option("--wfmt", sa.wfmt);
    scale_cmd->add_option("--afmt", sa.afmt);
    scale_cmd->add_option("--special-ratio", sa.special_ratio);
    scale_cmd->add_option("--sq-alpha", sa.sq_alpha);
    scale_cmd->add_option("--out", sa.out_path);

    AnalyzeArgs aa;
    auto* analyze_cmd = app.add_subcommand("analyze", "error decomposition and range reports");
    analyze_cmd->add_option("--manifest", aa.manifest)->required();
    analyze_cmd->add_option("--wfmt", aa.wfmt);
    analyze_cmd->add_option("--wgran", aa.wgran);
    analyze_cmd->add_option("--special-ratio", aa.special_ratio);
    analyze_cmd->add_option("--out", aa.out_path);

    SlacArgs la;
    auto* slac_cmd = app.add_subcommand("slac", "build a length-matched calibration subset");
    slac_cmd->add_option("--manifest", la.manifest)->required();
    slac_cmd->add_option("--target-len", la.target_len)->required();
    slac_cmd->add_option("--out", la.out_dir)->required();

    MacCheckArgs ma;
    auto* mac_cmd = app.add_subcommand("mac-check", "verify the integer MAC datapath");
    mac_cmd->add_option("--manifest", ma.manifest)->required();
    mac_cmd->add_option("--tolerance", ma.tolerance);
    mac_cmd->add_option("--special-ratio", ma.special_ratio);

    SweepArgs wa;
    auto* sweep_cmd = app.add_subcommand("sweep-special", "per-ratio dINT4 mse table");
    sweep_cmd->add_option("--manifest", wa.manifest)->required();
    sweep_cmd->add_option("--ratios", wa.ratios)->delimiter(',');
    sweep_cmd->add_option("--out", wa.out_path);

    SynthArgs ya;
    auto* synth_cmd = app.add_subcommand("synth", "generate synthetic layer capsules");
    synth_cmd->add_option("--profile", ya.profile);
    synth_cmd->add_option("--layers", ya.layers);
    synth_cmd->add_option("--seed", ya.seed);
    synth_cmd->add_option("--m", ya.m);
    synth_cmd->add_option("--c", ya.c);
    synth_cmd->add_option("--t", ya.t);
    synth_cmd->add_option("--lengths", ya.lengths)->delimiter(',');
    synth_cmd->add_option("--min-tokens", ya.min_tokens);
    synth_cmd->add_flag("--with-value", ya.with_value);
    synth_cmd->add_option("--out", ya.out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 1;
    }

    try {
        if (*quantize_cmd) return cmd_quantize(qa);
        if (*scale_cmd) return cmd_scale_search(sa);
        if (*analyze_cmd) return cmd_analyze(aa);
        if (*slac_cmd) return cmd_slac(la);
        if (*mac_cmd) return cmd_mac_check(ma);
        if (*sweep_cmd) return cmd_sweep_special(wa);
        if (*synth_cmd) return cmd_synth(ya);
    } catch (const dintq::data_error& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 2;
    } catch (const dintq::numeric_error& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
