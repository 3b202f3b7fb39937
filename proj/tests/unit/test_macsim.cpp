#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dintq/linalg.hpp"
#include "dintq/macsim.hpp"
#include "dintq/rng.hpp"

using namespace dintq;

namespace {

Tensor random_matrix(rng::Engine& eng, size_t r, size_t c, double scale = 1.0) {
    Tensor t = Tensor::zeros(DType::f64, {r, c});
    for (auto& v : t.data) v = rng::normal(eng) * scale;
    return t;
}

int random_dint4_code(rng::Engine& eng) { return static_cast<int>(rng::below(eng, 16)); }

}  // namespace

TEST_CASE("worked single-lane example") {
    MacOperandW w;
    w.codes = {14};  // c1 for dINT4
    w.step = 1.0;
    w.zero_point = 7;
    MacOperandX x;
    x.codes = {130};
    x.step = 0.5;
    x.zero_point = 128;
    CHECK(mac_dot(w, x) == 0.5);  // h=1, a=2, acc=2; 2 * 0.5 * 0.5
}

TEST_CASE("activations at the zero point contribute nothing") {
    MacOperandW w;
    w.codes = {0, 5, 13, 14, 15};
    w.step = 0.3;
    w.zero_point = 6;
    MacOperandX x;
    x.codes.assign(5, 128);
    x.step = 0.25;
    x.zero_point = 128;
    CHECK(mac_dot(w, x) == 0.0);
}

TEST_CASE("every dINT4 symbol is an exact multiple of the half step") {
    QuantParams qp;
    qp.format = QuantFormat::dint(4);
    qp.step = 0.37;
    qp.zero_point = 5;
    for (int code = 0; code < 16; ++code) {
        int64_t h;
        if (code == 14) h = 1;
        else if (code == 15) h = -1;
        else h = 2 * (static_cast<int64_t>(code) - qp.zero_point);
        CHECK(decode_dint(code, qp) == static_cast<double>(h) * (0.5 * qp.step));
    }
}

TEST_CASE("mac_dot matches the integer oracle bitwise and the float reference") {
    auto eng = rng::engine(80, 0);
    for (int trial = 0; trial < 500; ++trial) {
        const size_t n = 1 + rng::below(eng, 64);
        MacOperandW w;
        w.step = std::exp(rng::uniform(eng, -3.0, 1.0));
        w.zero_point = static_cast<int>(rng::below(eng, 14));
        MacOperandX x;
        x.step = std::exp(rng::uniform(eng, -3.0, 1.0));
        x.zero_point = static_cast<int>(rng::below(eng, 256));
        for (size_t i = 0; i < n; ++i) {
            w.codes.push_back(random_dint4_code(eng));
            x.codes.push_back(static_cast<int>(rng::below(eng, 256)));
        }

        // Independent integer accumulation in half-step units.
        int64_t acc = 0;
        for (size_t i = 0; i < n; ++i) {
            int64_t h;
            if (w.codes[i] == 14) h = 1;
            else if (w.codes[i] == 15) h = -1;
            else h = 2 * (static_cast<int64_t>(w.codes[i]) - w.zero_point);
            acc += h * (static_cast<int64_t>(x.codes[i]) - x.zero_point);
        }
        const double got = mac_dot(w, x);
        CHECK(got == static_cast<double>(acc) * (0.5 * w.step) * x.step);

        // Dequantize-then-multiply reference.
        QuantParams wqp;
        wqp.format = w.format;
        wqp.step = w.step;
        wqp.zero_point = w.zero_point;
        double ref = 0.0;
        for (size_t i = 0; i < n; ++i)
            ref += decode_dint(w.codes[i], wqp) *
                   ((static_cast<double>(x.codes[i]) - x.zero_point) * x.step);
        CHECK(got == Catch::Approx(ref).epsilon(1e-10).margin(1e-300));
    }
}

TEST_CASE("scaling the weight step scales the result exactly") {
    auto eng = rng::engine(81, 0);
    MacOperandW w;
    w.step = 0.75;
    w.zero_point = 6;
    MacOperandX x;
    x.step = 0.5;
    x.zero_point = 100;
    for (int i = 0; i < 32; ++i) {
        w.codes.push_back(random_dint4_code(eng));
        x.codes.push_back(static_cast<int>(rng::below(eng, 256)));
    }
    const double base = mac_dot(w, x);
    MacOperandW doubled = w;
    doubled.step = 2.0 * w.step;
    CHECK(mac_dot(doubled, x) == 2.0 * base);
}

TEST_CASE("length guard and accumulator overflow are detected, not wrapped") {
    MacOperandW w;
    MacOperandX x;
    w.step = x.step = 1.0;
    w.zero_point = 0;
    x.zero_point = 0;

    // Worst-case magnitude per lane under the guard fits the declared width.
    const MacConfig cfg;
    const long double worst = static_cast<long double>(cfg.max_length) * 26.0L * 255.0L;
    CHECK(worst <= static_cast<long double>((int64_t{1} << (cfg.accumulator_bits - 1)) - 1));

    w.codes.assign((size_t{1} << 20) + 1, 7);
    x.codes.assign((size_t{1} << 20) + 1, 128);
    CHECK_THROWS_AS(mac_dot(w, x), numeric_error);

    MacConfig narrow;
    narrow.accumulator_bits = 16;
    MacOperandW w2;
    w2.step = 1.0;
    w2.zero_point = 0;
    w2.codes.assign(512, 13);  // h = 26 each
    MacOperandX x2;
    x2.step = 1.0;
    x2.zero_point = 0;
    x2.codes.assign(512, 255);  // a = 255 each
    CHECK_THROWS_AS(mac_dot(w2, x2, narrow), numeric_error);
}

TEST_CASE("smaller special ratios widen the unit and stay exact") {
    MacOperandW w;
    w.format = QuantFormat::dint(4, 0.25);
    w.step = 1.0;
    w.zero_point = 7;
    w.codes = {14, 15, 9};
    MacOperandX x;
    x.step = 1.0;
    x.zero_point = 0;
    x.codes = {1, 1, 1};
    // Values: +0.25, -0.25, 2.0; each activation decodes to 1.
    CHECK(mac_dot(w, x) == 2.0);
}

TEST_CASE("mac_matmul equals the dequantized reference") {
    auto eng = rng::engine(82, 0);
    const Tensor w = random_matrix(eng, 5, 12);
    const Tensor x = random_matrix(eng, 12, 9, 3.0);
    const QuantizedTensor wq = quantize(w, QuantFormat::dint(4), Granularity::per_output_channel());
    const QuantizedTensor xq = quantize(x, QuantFormat::uniform(8), Granularity::per_token());

    const Tensor got = mac_matmul(wq, xq);
    CHECK(got.shape == std::vector<size_t>{5, 9});
    const Tensor ref = matmul(dequantize(wq), dequantize(xq));
    for (size_t i = 0; i < got.data.size(); ++i)
        CHECK(got.data[i] == Catch::Approx(ref.data[i]).epsilon(1e-6).margin(1e-12));
}

TEST_CASE("mac_matmul 1x1 reduces to mac_dot") {
    Tensor w(DType::f64, {1, 3}, {0.4, -0.2, 0.9});
    Tensor x(DType::f64, {3, 1}, {1.0, 2.0, -1.5});
    const QuantizedTensor wq = quantize(w, QuantFormat::dint(4), Granularity::per_output_channel());
    const QuantizedTensor xq = quantize(x, QuantFormat::uniform(8), Granularity::per_token());
    const Tensor got = mac_matmul(wq, xq);

    MacOperandW wop{wq.codes, wq.params[0].step, wq.params[0].zero_point, wq.params[0].format};
    MacOperandX xop{xq.codes, xq.params[0].step, xq.params[0].zero_point};
    CHECK(got.at(0, 0) == mac_dot(wop, xop));
}

TEST_CASE("mac_matmul rejects offset params and wrong formats") {
    Tensor w(DType::f64, {1, 2}, {0.5, 0.5});  // constant row -> offset params
    Tensor x(DType::f64, {2, 2}, {1.0, 2.0, 3.0, 4.0});
    const QuantizedTensor wq = quantize(w, QuantFormat::dint(4), Granularity::per_output_channel());
    const QuantizedTensor xq = quantize(x, QuantFormat::uniform(8), Granularity::per_token());
    CHECK_THROWS_WITH(mac_matmul(wq, xq), Catch::Matchers::ContainsSubstring("offset"));

    Tensor w2(DType::f64, {1, 2}, {0.5, -0.5});
    const QuantizedTensor w2_int =
        quantize(w2, QuantFormat::uniform(4), Granularity::per_output_channel());
    CHECK_THROWS_WITH(mac_matmul(w2_int, xq), Catch::Matchers::ContainsSubstring("dINT"));
}
