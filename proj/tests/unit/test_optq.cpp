#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dintq/optq.hpp"
#include "dintq/rng.hpp"

using namespace dintq;

namespace {

Tensor random_matrix(rng::Engine& eng, size_t r, size_t c, double scale = 1.0) {
    Tensor t = Tensor::zeros(DType::f64, {r, c});
    for (auto& v : t.data) v = rng::normal(eng) * scale;
    return t;
}

// Gauss-Jordan inverse; the independent oracle for everything Cholesky-based.
std::vector<double> gauss_jordan_inverse(std::vector<double> a, size_t n) {
    std::vector<double> inv(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) inv[i * n + i] = 1.0;
    for (size_t col = 0; col < n; ++col) {
        size_t pivot = col;
        for (size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
        for (size_t k = 0; k < n; ++k) {
            std::swap(a[pivot * n + k], a[col * n + k]);
            std::swap(inv[pivot * n + k], inv[col * n + k]);
        }
        const double d = a[col * n + col];
        REQUIRE(d != 0.0);
        for (size_t k = 0; k < n; ++k) {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for (size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r * n + col];
            if (f == 0.0) continue;
            for (size_t k = 0; k < n; ++k) {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    return inv;
}

Hessian random_spd_hessian(rng::Engine& eng, size_t n) {
    const Tensor x = random_matrix(eng, n, 3 * n);
    return damp(accumulate_hessian(x), 0.01);
}

}  // namespace

TEST_CASE("hessian accumulation basics") {
    const Tensor identity(DType::f64, {2, 2}, {1.0, 0.0, 0.0, 1.0});
    const Hessian h = accumulate_hessian(identity);
    CHECK(h.h == std::vector<double>{2.0, 0.0, 0.0, 2.0});
    CHECK(h.token_count == 2);

    const Tensor single(DType::f64, {2, 1}, {1.0, 0.0});
    const Hessian hs = accumulate_hessian(single);
    CHECK(hs.h == std::vector<double>{2.0, 0.0, 0.0, 0.0});
    std::vector<double> chol = hs.h;
    CHECK_FALSE(cholesky_lower(chol, 2));  // singular without damping
}

TEST_CASE("hessian matches the brute-force oracle") {
    auto eng = rng::engine(61, 0);
    const size_t c_dim = 10, t_dim = 33;
    const Tensor x = random_matrix(eng, c_dim, t_dim, 2.0);
    const Hessian h = accumulate_hessian(x);
    for (size_t i = 0; i < c_dim; ++i) {
        for (size_t j = 0; j < c_dim; ++j) {
            double acc = 0.0;
            for (size_t t = 0; t < t_dim; ++t) acc += 2.0 * x.at(i, t) * x.at(j, t);
            CHECK(h.at(i, j) == Catch::Approx(acc).epsilon(1e-10));
        }
    }
}

TEST_CASE("hessian accumulates across batches and rejects C mismatch") {
    auto eng = rng::engine(62, 0);
    const Tensor a = random_matrix(eng, 4, 8);
    const Tensor b = random_matrix(eng, 4, 5);
    const Hessian h = accumulate_hessian({&a, &b});
    CHECK(h.token_count == 13);
    const Hessian ha = accumulate_hessian(a);
    const Hessian hb = accumulate_hessian(b);
    for (size_t i = 0; i < 16; ++i) CHECK(h.h[i] == Catch::Approx(ha.h[i] + hb.h[i]).epsilon(1e-12));

    const Tensor wrong = random_matrix(eng, 3, 5);
    CHECK_THROWS_AS(accumulate_hessian({&a, &wrong}), data_error);
}

TEST_CASE("damping") {
    Hessian h;
    h.dim = 2;
    h.h = {2.0, 0.0, 0.0, 2.0};
    const Hessian d = damp(h, 0.01);
    CHECK(d.h == std::vector<double>{2.02, 0.0, 0.0, 2.02});

    Hessian singular;
    singular.dim = 2;
    singular.h = {2.0, 0.0, 0.0, 0.0};
    const Hessian fixed = damp(singular, 0.01);
    std::vector<double> chol = fixed.h;
    CHECK(cholesky_lower(chol, 2));
    CHECK(fixed.at(0, 1) == fixed.at(1, 0));

    Hessian zero;
    zero.dim = 2;
    zero.h = {0.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(damp(zero, 0.0), numeric_error);
}

TEST_CASE("weight_update_ratio basics and oracle") {
    Hessian iso;
    iso.dim = 3;
    iso.h = {2, 0, 0, 0, 2, 0, 0, 0, 2};
    const auto e1 = weight_update_ratio(iso, 1);
    CHECK(e1 == std::vector<double>{0.0, 1.0, 0.0});

    auto eng = rng::engine(63, 0);
    for (int trial = 0; trial < 10; ++trial) {
        const Hessian h = random_spd_hessian(eng, 6);
        const size_t q = rng::below(eng, 6);
        const auto ratio = weight_update_ratio(h, q);
        CHECK(ratio[q] == 1.0);

        const auto inv = gauss_jordan_inverse(h.h, 6);
        for (size_t i = 0; i < 6; ++i)
            CHECK(ratio[i] == Catch::Approx(inv[i * 6 + q] / inv[q * 6 + q]).margin(1e-8));
    }
    CHECK_THROWS_AS(weight_update_ratio(iso, 7), data_error);
}

TEST_CASE("ratios depend on activations only through second moments") {
    auto eng = rng::engine(64, 0);
    const Tensor x = random_matrix(eng, 5, 40);
    Tensor negated = x;
    for (auto& v : negated.data) v = -v;
    const Hessian h1 = damp(accumulate_hessian(x), 0.01);
    const Hessian h2 = damp(accumulate_hessian(negated), 0.01);
    CHECK(h1.h == h2.h);
    CHECK(weight_update_ratio(h1, 2) == weight_update_ratio(h2, 2));
}

TEST_CASE("diagonal hessian degenerates to nearest rounding") {
    auto eng = rng::engine(65, 0);
    const Tensor w = random_matrix(eng, 6, 8);
    Hessian diag;
    diag.dim = 8;
    diag.h.assign(64, 0.0);
    for (size_t i = 0; i < 8; ++i) diag.h[i * 8 + i] = 2.0 + static_cast<double>(i);

    for (const auto& fmt : {QuantFormat::uniform(4), QuantFormat::dint(4)}) {
        const QuantizedTensor q = optq_quantize(w, diag, fmt, Granularity::per_output_channel());
        const Tensor expected = fake_quant(w, fmt, Granularity::per_output_channel());
        CHECK(dequantize(q).data == expected.data);
    }
}

TEST_CASE("single-remaining-column update matches the analytic least squares") {
    // 1 x 2 weight: after column 0 quantizes coarsely, column 1 must move by
    // -(q0 - w0) * H01 / H11 (the exact one-variable minimizer). A near-exact
    // format on column 1 exposes the adjusted value.
    auto eng = rng::engine(66, 0);
    QuantParams coarse;
    coarse.format = QuantFormat::uniform(4);
    coarse.step = 0.21;
    coarse.zero_point = 8;
    QuantParams fine;
    fine.format = QuantFormat::uniform(30);
    fine.step = 1.5e-8;
    fine.zero_point = 1 << 29;

    for (int trial = 0; trial < 100; ++trial) {
        const Tensor x = random_matrix(eng, 2, 12);
        const Hessian h = damp(accumulate_hessian(x), 0.001);
        const Tensor w = random_matrix(eng, 1, 2);

        const QuantizedTensor q = optq_quantize(w, h, QuantFormat::uniform(4),
                                                Granularity::group_wise(1), {coarse, fine});
        const Tensor got = dequantize(q);

        const double q0 = got.at(0, 0);
        const double expected_w1 = w.at(0, 1) - (q0 - w.at(0, 0)) * h.at(0, 1) / h.at(1, 1);
        CHECK(got.at(0, 1) == Catch::Approx(expected_w1).margin(1e-8));
    }
}

TEST_CASE("optq beats nearest rounding on correlated activations") {
    auto eng = rng::engine(67, 0);
    for (const auto& fmt : {QuantFormat::uniform(4), QuantFormat::dint(4)}) {
        int wins = 0;
        const int trials = 30;
        for (int trial = 0; trial < trials; ++trial) {
            const Tensor w = random_matrix(eng, 16, 32);
            const Tensor x = random_matrix(eng, 32, 64);
            const Hessian h = damp(accumulate_hessian(x), 0.01);

            const Tensor nearest = fake_quant(w, fmt, Granularity::per_output_channel());
            const Tensor tuned =
                dequantize(optq_quantize(w, h, fmt, Granularity::per_output_channel()));

            const auto out_err = [&](const Tensor& wq) {
                double err = 0.0;
                for (size_t m = 0; m < 16; ++m)
                    for (size_t t = 0; t < 64; ++t) {
                        double e = 0.0;
                        for (size_t c = 0; c < 32; ++c)
                            e += (wq.at(m, c) - w.at(m, c)) * x.at(c, t);
                        err += e * e;
                    }
                return err;
            };
            if (out_err(tuned) <= out_err(nearest)) ++wins;
        }
        CHECK(wins >= trials * 95 / 100);
    }
}

TEST_CASE("optq rows are independent") {
    auto eng = rng::engine(68, 0);
    const Tensor w = random_matrix(eng, 4, 6);
    const Tensor x = random_matrix(eng, 6, 20);
    const Hessian h = damp(accumulate_hessian(x), 0.01);

    Tensor swapped = w;
    for (size_t c = 0; c < 6; ++c) std::swap(swapped.at(0, c), swapped.at(2, c));

    const Tensor a = dequantize(optq_quantize(w, h, QuantFormat::dint(4),
                                              Granularity::per_output_channel()));
    const Tensor b = dequantize(optq_quantize(swapped, h, QuantFormat::dint(4),
                                              Granularity::per_output_channel()));
    for (size_t c = 0; c < 6; ++c) {
        CHECK(a.at(0, c) == b.at(2, c));
        CHECK(a.at(2, c) == b.at(0, c));
        CHECK(a.at(1, c) == b.at(1, c));
    }
}

TEST_CASE("optq rejects undamped singular hessians") {
    Hessian singular;
    singular.dim = 2;
    singular.h = {2.0, 0.0, 0.0, 0.0};
    const Tensor w(DType::f64, {1, 2}, {0.5, -0.5});
    CHECK_THROWS_AS(
        optq_quantize(w, singular, QuantFormat::uniform(4), Granularity::per_tensor()),
        numeric_error);
}
