#pragma once

// Dense row-major tensor and the QTEN binary container.
//
// QTEN layout, little-endian throughout:
//   magic "QTEN" | version u32 | dtype u8 (0 = f32, 1 = f64) | ndim u8 |
//   dims u64[ndim] | payload, row-major, 4 or 8 bytes per element
//
// Elements are held in memory as f64 regardless of the payload dtype; every
// f32 payload value is exactly representable, so round trips are byte-exact.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "dintq/error.hpp"

namespace dintq {

enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct Tensor {
    DType dtype = DType::f32;
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(DType dt, std::vector<size_t> shp, std::vector<double> values)
        : dtype(dt), shape(std::move(shp)), data(std::move(values)) {
        validate();
    }

    static Tensor zeros(DType dt, std::vector<size_t> shp) {
        size_t n = 1;
        for (size_t d : shp) {
            if (d == 0) throw data_error("tensor: zero dimension");
            n *= d;
        }
        return Tensor(dt, std::move(shp), std::vector<double>(n, 0.0));
    }

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }

    size_t rank() const { return shape.size(); }

    // 2-D accessors; rows/cols on a non-matrix is a caller bug.
    size_t rows() const { return shape.at(0); }
    size_t cols() const { return shape.size() > 1 ? shape.at(1) : 1; }
    double& at(size_t i, size_t j) { return data[i * cols() + j]; }
    double at(size_t i, size_t j) const { return data[i * cols() + j]; }

    void validate() const {
        if (shape.empty()) throw data_error("tensor: empty shape");
        size_t n = 1;
        for (size_t d : shape) {
            if (d == 0) throw data_error("tensor: zero dimension");
            if (d > std::numeric_limits<size_t>::max() / n)
                throw data_error("tensor: dimension overflow");
            n *= d;
        }
        if (n != data.size()) throw data_error("tensor: shape/data size mismatch");
        for (double v : data)
            if (!std::isfinite(v)) throw data_error("tensor: non-finite element");
    }
};

namespace detail {

constexpr uint32_t kQtenVersion = 1;

inline void put_bytes(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}

template <typename T>
inline void put_le(std::string& out, T v) {
    static_assert(std::endian::native == std::endian::little,
                  "QTEN writer assumes a little-endian host");
    put_bytes(out, &v, sizeof(T));
}

template <typename T>
inline T get_le(const std::string& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw data_error("qten: truncated payload");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace detail

// Serializes to the exact QTEN byte layout. The returned buffer is what
// write_tensor puts on disk; tests compare these buffers directly.
inline std::string tensor_to_bytes(const Tensor& t) {
    t.validate();
    std::string out;
    out.reserve(14 + 8 * t.shape.size() + t.numel() * dtype_size(t.dtype));
    detail::put_bytes(out, "QTEN", 4);
    detail::put_le<uint32_t>(out, detail::kQtenVersion);
    detail::put_le<uint8_t>(out, static_cast<uint8_t>(t.dtype));
    if (t.shape.size() > 255) throw data_error("qten: rank exceeds container limit");
    detail::put_le<uint8_t>(out, static_cast<uint8_t>(t.shape.size()));
    for (size_t d : t.shape) detail::put_le<uint64_t>(out, static_cast<uint64_t>(d));
    if (t.dtype == DType::f32) {
        for (double v : t.data) detail::put_le<float>(out, static_cast<float>(v));
    } else {
        for (double v : t.data) detail::put_le<double>(out, v);
    }
    return out;
}

inline Tensor tensor_from_bytes(const std::string& buf) {
    if (buf.size() < 4 || std::memcmp(buf.data(), "QTEN", 4) != 0)
        throw data_error("qten: bad magic");
    size_t pos = 4;
    const auto version = detail::get_le<uint32_t>(buf, pos);
    if (version != detail::kQtenVersion) throw data_error("qten: unsupported version");
    const auto dtype_code = detail::get_le<uint8_t>(buf, pos);
    if (dtype_code > 1) throw data_error("qten: unknown dtype code");
    const DType dtype = static_cast<DType>(dtype_code);
    const auto ndim = detail::get_le<uint8_t>(buf, pos);
    if (ndim == 0) throw data_error("qten: empty shape");
    std::vector<size_t> shape(ndim);
    size_t n = 1;
    for (auto& d : shape) {
        const auto dim = detail::get_le<uint64_t>(buf, pos);
        if (dim == 0) throw data_error("qten: zero dimension");
        if (dim > std::numeric_limits<size_t>::max() / n / dtype_size(dtype))
            throw data_error("qten: dimension overflow");
        d = static_cast<size_t>(dim);
        n *= d;
    }
    if (buf.size() - pos != n * dtype_size(dtype))
        throw data_error("qten: truncated payload");
    std::vector<double> values(n);
    if (dtype == DType::f32) {
        for (auto& v : values) v = detail::get_le<float>(buf, pos);
    } else {
        for (auto& v : values) v = detail::get_le<double>(buf, pos);
    }
    for (double v : values)
        if (!std::isfinite(v)) throw data_error("qten: non-finite element");
    return Tensor(dtype, std::move(shape), std::move(values));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("qten: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return tensor_from_bytes(buf);
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
    const std::string buf = tensor_to_bytes(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("qten: cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw data_error("qten: write failed for " + path.string());
}

}  // namespace dintq
