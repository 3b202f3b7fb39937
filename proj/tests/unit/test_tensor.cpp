#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dintq/rng.hpp"
#include "dintq/tensor.hpp"

using namespace dintq;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "dintq_tensor_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

Tensor random_tensor(rng::Engine& eng) {
    const DType dtype = eng() % 2 ? DType::f64 : DType::f32;
    const size_t rank = 1 + eng() % 3;
    std::vector<size_t> shape(rank);
    size_t n = 1;
    for (auto& d : shape) {
        d = 1 + eng() % 5;
        n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) {
        v = rng::uniform(eng, -100.0, 100.0);
        if (dtype == DType::f32) v = static_cast<double>(static_cast<float>(v));
    }
    return Tensor(dtype, std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("qten decodes a hand-built container") {
    std::string buf = "QTEN";
    const uint32_t version = 1;
    buf.append(reinterpret_cast<const char*>(&version), 4);
    buf.push_back('\x00');  // f32
    buf.push_back('\x02');  // ndim
    const uint64_t dims[2] = {2, 2};
    buf.append(reinterpret_cast<const char*>(dims), 16);
    const float payload[4] = {1.f, 2.f, 3.f, 4.f};
    buf.append(reinterpret_cast<const char*>(payload), 16);

    const Tensor t = tensor_from_bytes(buf);
    CHECK(t.dtype == DType::f32);
    CHECK(t.shape == std::vector<size_t>{2, 2});
    CHECK(t.data == std::vector<double>{1.0, 2.0, 3.0, 4.0});
}

TEST_CASE("qten rejects malformed containers") {
    const Tensor good(DType::f32, {2}, {1.0, 2.0});
    std::string buf = tensor_to_bytes(good);

    SECTION("bad magic") {
        buf[0] = 'X';
        CHECK_THROWS_AS(tensor_from_bytes(buf), data_error);
    }
    SECTION("truncated payload") {
        buf.pop_back();
        CHECK_THROWS_AS(tensor_from_bytes(buf), data_error);
    }
    SECTION("trailing garbage") {
        buf.push_back('\x00');
        CHECK_THROWS_AS(tensor_from_bytes(buf), data_error);
    }
    SECTION("zero dimension") {
        std::string raw = "QTEN";
        const uint32_t version = 1;
        raw.append(reinterpret_cast<const char*>(&version), 4);
        raw.push_back('\x00');
        raw.push_back('\x01');
        const uint64_t dim = 0;
        raw.append(reinterpret_cast<const char*>(&dim), 8);
        CHECK_THROWS_WITH(tensor_from_bytes(raw), Catch::Matchers::ContainsSubstring("zero dimension"));
    }
    SECTION("dimension overflow") {
        std::string raw = "QTEN";
        const uint32_t version = 1;
        raw.append(reinterpret_cast<const char*>(&version), 4);
        raw.push_back('\x00');
        raw.push_back('\x02');
        const uint64_t dims[2] = {uint64_t(1) << 62, uint64_t(1) << 62};
        raw.append(reinterpret_cast<const char*>(dims), 16);
        CHECK_THROWS_WITH(tensor_from_bytes(raw), Catch::Matchers::ContainsSubstring("overflow"));
    }
    SECTION("non-finite element") {
        std::string raw = "QTEN";
        const uint32_t version = 1;
        raw.append(reinterpret_cast<const char*>(&version), 4);
        raw.push_back('\x00');
        raw.push_back('\x01');
        const uint64_t dim = 1;
        raw.append(reinterpret_cast<const char*>(&dim), 8);
        const float nan = std::numeric_limits<float>::quiet_NaN();
        raw.append(reinterpret_cast<const char*>(&nan), 4);
        CHECK_THROWS_WITH(tensor_from_bytes(raw), Catch::Matchers::ContainsSubstring("non-finite"));
    }
    SECTION("unknown dtype") {
        buf[8] = '\x07';
        CHECK_THROWS_AS(tensor_from_bytes(buf), data_error);
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor(DType::f32, {0}, {}), data_error);
    CHECK_THROWS_AS(Tensor(DType::f32, {2}, {1.0}), data_error);
    CHECK_THROWS_AS(Tensor(DType::f32, {1}, {std::numeric_limits<double>::infinity()}), data_error);
}

TEST_CASE("qten single element and header layout") {
    const Tensor one(DType::f32, {1}, {0.0});
    const std::string buf = tensor_to_bytes(one);
    CHECK(buf.size() == 4 + 4 + 1 + 1 + 8 + 4);  // payload is exactly 4 bytes

    const Tensor t32(DType::f32, {3, 2}, {1, 2, 3, 4, 5, 6});
    const std::string buf2 = tensor_to_bytes(t32);
    uint64_t d0 = 0, d1 = 0;
    std::memcpy(&d0, buf2.data() + 10, 8);
    std::memcpy(&d1, buf2.data() + 18, 8);
    CHECK(d0 == 3);
    CHECK(d1 == 2);
}

TEST_CASE("qten round trip is byte-identical over random tensors") {
    auto eng = rng::engine(2024, 1);
    for (int i = 0; i < 100; ++i) {
        const Tensor t = random_tensor(eng);
        const auto path = temp_file("roundtrip.qten");
        write_tensor(t, path);
        const Tensor back = read_tensor(path);
        CHECK(back.dtype == t.dtype);
        CHECK(back.shape == t.shape);
        CHECK(back.data == t.data);
        CHECK(tensor_to_bytes(back) == tensor_to_bytes(t));
    }
}

TEST_CASE("qten f64 payloads read back exactly") {
    auto eng = rng::engine(7, 2);
    std::vector<double> data(64);
    for (auto& v : data) v = rng::normal(eng) * 1e6;
    const Tensor t(DType::f64, {8, 8}, data);
    const auto path = temp_file("f64.qten");
    write_tensor(t, path);
    CHECK(read_tensor(path).data == data);
}
