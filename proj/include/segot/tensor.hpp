// Dense tensor container and the SGT1 byte format.
//
// SGT1 layout, little-endian:
//   magic "SGT1" (4 bytes) | dtype u8 (0 = f32, 1 = u8) | ndim u8 |
//   ndim x u64 dimension sizes | row-major payload.

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "segot/common.hpp"

namespace segot {

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1 };

/// Row-major dense tensor, 1-4 dimensions. Payload lives in exactly one of
/// f32 / u8 depending on dtype.
struct DenseTensor {
    Dtype dtype = Dtype::f32;
    std::vector<std::uint64_t> shape;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    std::size_t payload_size() const { return dtype == Dtype::f32 ? f32.size() : u8.size(); }

    void validate() const {
        if (shape.empty() || shape.size() > 4)
            throw ValidationError("tensor: shape must have 1-4 dimensions, got " +
                                  std::to_string(shape.size()));
        for (auto d : shape)
            if (d == 0) throw ValidationError("tensor: zero-sized dimension");
        if (element_count() != payload_size())
            throw ValidationError("tensor: shape product " + std::to_string(element_count()) +
                                  " != data length " + std::to_string(payload_size()));
    }

    static DenseTensor make_f32(std::vector<std::uint64_t> shape, std::vector<float> data) {
        DenseTensor t;
        t.dtype = Dtype::f32;
        t.shape = std::move(shape);
        t.f32 = std::move(data);
        t.validate();
        return t;
    }

    static DenseTensor make_u8(std::vector<std::uint64_t> shape, std::vector<std::uint8_t> data) {
        DenseTensor t;
        t.dtype = Dtype::u8;
        t.shape = std::move(shape);
        t.u8 = std::move(data);
        t.validate();
        return t;
    }

    bool operator==(const DenseTensor& o) const {
        if (dtype != o.dtype || shape != o.shape) return false;
        if (dtype == Dtype::f32) {
            // Bit-exact comparison, NaN-safe.
            if (f32.size() != o.f32.size()) return false;
            return std::memcmp(f32.data(), o.f32.data(), f32.size() * sizeof(float)) == 0;
        }
        return u8 == o.u8;
    }
};

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
    std::array<unsigned char, 8> b;
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
    std::array<unsigned char, 8> b;
    is.read(reinterpret_cast<char*>(b.data()), 8);
    if (!is) throw FormatError("SGT1: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f32_le(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    std::array<unsigned char, 4> b;
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline float get_f32_le(std::istream& is) {
    std::array<unsigned char, 4> b;
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) throw FormatError("SGT1: truncated payload");
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace detail

/// Serialize to SGT1. Returns the number of bytes emitted.
inline std::uint64_t write_tensor(const DenseTensor& t, std::ostream& os) {
    t.validate();
    os.write("SGT1", 4);
    std::uint8_t dtype = static_cast<std::uint8_t>(t.dtype);
    std::uint8_t ndim = static_cast<std::uint8_t>(t.shape.size());
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(&ndim), 1);
    for (auto d : t.shape) detail::put_u64_le(os, d);
    if (t.dtype == Dtype::f32) {
        for (float f : t.f32) detail::put_f32_le(os, f);
    } else {
        if (!t.u8.empty())
            os.write(reinterpret_cast<const char*>(t.u8.data()),
                     static_cast<std::streamsize>(t.u8.size()));
    }
    if (!os) throw IoError("SGT1: write failed");
    std::uint64_t payload = t.element_count() * (t.dtype == Dtype::f32 ? 4 : 1);
    return 4 + 1 + 1 + 8 * t.shape.size() + payload;
}

/// Parse an SGT1 stream. Throws FormatError on bad magic, truncation, or
/// inconsistent header.
inline DenseTensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SGT1", 4) != 0) throw FormatError("SGT1: bad magic");
    std::uint8_t dtype_code = 0, ndim = 0;
    is.read(reinterpret_cast<char*>(&dtype_code), 1);
    is.read(reinterpret_cast<char*>(&ndim), 1);
    if (!is) throw FormatError("SGT1: truncated header");
    if (dtype_code > 1) throw FormatError("SGT1: unknown dtype code " + std::to_string(dtype_code));
    if (ndim < 1 || ndim > 4) throw FormatError("SGT1: ndim must be 1-4, got " + std::to_string(ndim));

    DenseTensor t;
    t.dtype = static_cast<Dtype>(dtype_code);
    t.shape.resize(ndim);
    std::uint64_t count = 1;
    for (int i = 0; i < ndim; ++i) {
        t.shape[i] = detail::get_u64_le(is);
        if (t.shape[i] == 0) throw FormatError("SGT1: zero-sized dimension");
        if (count > (1ULL << 40) / t.shape[i]) throw FormatError("SGT1: implausible element count");
        count *= t.shape[i];
    }
    if (t.dtype == Dtype::f32) {
        t.f32.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) t.f32.push_back(detail::get_f32_le(is));
    } else {
        t.u8.resize(count);
        is.read(reinterpret_cast<char*>(t.u8.data()), static_cast<std::streamsize>(count));
        if (!is) throw FormatError("SGT1: truncated payload");
    }
    t.validate();
    return t;
}

inline void save_tensor(const DenseTensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(t, os);
    if (!os) throw IoError("write failed: " + path);
}

inline DenseTensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tensor(is);
}

}  // namespace segot
