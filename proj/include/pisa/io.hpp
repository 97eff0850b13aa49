#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pisa/bundle.hpp"
#include "pisa/errors.hpp"

namespace pisa {

// PQKV binary format, version 1, little-endian.
//
//   offset  size  field
//   0       4     magic "PQKV"
//   4       4     version   (u32, = 1)
//   8       4     dtype     (u32, 1 = 32-bit IEEE-754, 2 = 64-bit IEEE-754)
//   12      4     num_heads (u32)
//   16      4     head_dim  (u32)
//   20      4     seq_len   (u32)
//   24      -     Q, K, V payloads consecutively, each row-major [heads][L][d]
//
// Header is exactly 24 bytes.
inline constexpr std::size_t kPqkvHeaderBytes = 24;
inline constexpr std::uint32_t kPqkvVersion = 1;

namespace detail {

inline void put_u32(unsigned char* p, std::uint32_t v) {
    p[0] = static_cast<unsigned char>(v & 0xff);
    p[1] = static_cast<unsigned char>((v >> 8) & 0xff);
    p[2] = static_cast<unsigned char>((v >> 16) & 0xff);
    p[3] = static_cast<unsigned char>((v >> 24) & 0xff);
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
           (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

template <class T>
void write_payload(std::ostream& out, const std::vector<T>& values,
                   std::size_t offset_base) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  std::streamsize(values.size() * sizeof(T)));
    } else {
        for (const T& v : values) {
            if constexpr (sizeof(T) == 4) {
                auto bits = std::bit_cast<std::uint32_t>(v);
                unsigned char buf[4];
                put_u32(buf, bits);
                out.write(reinterpret_cast<const char*>(buf), 4);
            } else {
                auto bits = std::bit_cast<std::uint64_t>(v);
                unsigned char buf[8];
                put_u32(buf, std::uint32_t(bits & 0xffffffffULL));
                put_u32(buf + 4, std::uint32_t(bits >> 32));
                out.write(reinterpret_cast<const char*>(buf), 8);
            }
        }
    }
    if (!out) {
        throw IoError("sink write failed near byte offset " +
                      std::to_string(offset_base));
    }
}

template <class T>
void byteswap_payload(std::vector<T>& values) {
    if constexpr (std::endian::native != std::endian::little) {
        for (T& v : values) {
            if constexpr (sizeof(T) == 4) {
                auto bits = std::bit_cast<std::uint32_t>(v);
                bits = __builtin_bswap32(bits);
                v = std::bit_cast<T>(bits);
            } else {
                auto bits = std::bit_cast<std::uint64_t>(v);
                bits = __builtin_bswap64(bits);
                v = std::bit_cast<T>(bits);
            }
        }
    }
}

template <class T>
void check_finite(const TensorBundle<T>& b) {
    const auto scan = [&](const std::vector<T>& a, const char* name) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!std::isfinite(double(a[i]))) {
                const std::size_t per_head = b.head_elems();
                const std::size_t head = i / per_head;
                const std::size_t rem = i % per_head;
                throw NonFiniteValue(std::string(name) + " head " +
                                     std::to_string(head) + " row " +
                                     std::to_string(rem / b.head_dim) + " col " +
                                     std::to_string(rem % b.head_dim));
            }
        }
    };
    scan(b.q, "Q");
    scan(b.k, "K");
    scan(b.v, "V");
}

}  // namespace detail

template <class T>
std::size_t write_bundle(const TensorBundle<T>& b, std::ostream& out) {
    const std::size_t n = b.total_elems();
    if (b.q.size() != n || b.k.size() != n || b.v.size() != n) {
        throw InvalidDimension("bundle payload size does not match its shape");
    }
    unsigned char header[kPqkvHeaderBytes];
    std::memcpy(header, "PQKV", 4);
    detail::put_u32(header + 4, kPqkvVersion);
    detail::put_u32(header + 8, static_cast<std::uint32_t>(dtype_of<T>()));
    detail::put_u32(header + 12, static_cast<std::uint32_t>(b.num_heads));
    detail::put_u32(header + 16, static_cast<std::uint32_t>(b.head_dim));
    detail::put_u32(header + 20, static_cast<std::uint32_t>(b.seq_len));
    out.write(reinterpret_cast<const char*>(header), kPqkvHeaderBytes);
    if (!out) throw IoError("sink write failed near byte offset 0");

    std::size_t offset = kPqkvHeaderBytes;
    detail::write_payload(out, b.q, offset);
    offset += n * sizeof(T);
    detail::write_payload(out, b.k, offset);
    offset += n * sizeof(T);
    detail::write_payload(out, b.v, offset);
    offset += n * sizeof(T);
    return offset;
}

inline std::size_t write_bundle(const AnyBundle& b, std::ostream& out) {
    return std::visit([&](const auto& t) { return write_bundle(t, out); }, b);
}

namespace detail {

template <class T>
TensorBundle<T> read_payloads(std::istream& in, std::size_t heads, std::size_t L,
                              std::size_t d) {
    TensorBundle<T> b;
    b.num_heads = heads;
    b.seq_len = L;
    b.head_dim = d;
    const std::size_t n = b.total_elems();
    const std::size_t expected = 3 * n * sizeof(T);
    std::vector<T>* arrays[3] = {&b.q, &b.k, &b.v};
    for (std::size_t idx = 0; idx < 3; ++idx) {
        std::vector<T>& arr = *arrays[idx];
        arr.resize(n);
        in.read(reinterpret_cast<char*>(arr.data()), std::streamsize(n * sizeof(T)));
        if (std::size_t(in.gcount()) != n * sizeof(T)) {
            const std::size_t got = idx * n * sizeof(T) + std::size_t(in.gcount());
            throw MalformedFile("payload truncated: expected " +
                                std::to_string(expected) + " bytes, got " +
                                std::to_string(got));
        }
        byteswap_payload(arr);
    }
    // Trailing bytes are a length mismatch too.
    if (in.peek() != std::char_traits<char>::eof()) {
        throw MalformedFile("payload longer than expected " +
                            std::to_string(expected) + " bytes");
    }
    check_finite(b);
    return b;
}

}  // namespace detail

inline AnyBundle read_bundle(std::istream& in) {
    unsigned char header[kPqkvHeaderBytes];
    in.read(reinterpret_cast<char*>(header), kPqkvHeaderBytes);
    if (std::size_t(in.gcount()) != kPqkvHeaderBytes) {
        throw MalformedFile("header truncated: expected " +
                            std::to_string(kPqkvHeaderBytes) + " bytes, got " +
                            std::to_string(in.gcount()));
    }
    if (std::memcmp(header, "PQKV", 4) != 0) {
        throw BadMagic("first 4 bytes are not \"PQKV\"");
    }
    const std::uint32_t version = detail::get_u32(header + 4);
    if (version != kPqkvVersion) {
        throw UnsupportedVersion("version " + std::to_string(version) +
                                 ", expected " + std::to_string(kPqkvVersion));
    }
    const std::uint32_t dtype = detail::get_u32(header + 8);
    const std::size_t heads = detail::get_u32(header + 12);
    const std::size_t d = detail::get_u32(header + 16);
    const std::size_t L = detail::get_u32(header + 20);
    switch (dtype) {
        case static_cast<std::uint32_t>(Dtype::F32):
            return detail::read_payloads<float>(in, heads, L, d);
        case static_cast<std::uint32_t>(Dtype::F64):
            return detail::read_payloads<double>(in, heads, L, d);
        default:
            throw UnsupportedDtype("dtype tag " + std::to_string(dtype));
    }
}

inline std::size_t write_bundle_file(const AnyBundle& b, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    const std::size_t n = write_bundle(b, out);
    out.flush();
    if (!out) throw IoError("flush failed for " + path);
    return n;
}

inline AnyBundle read_bundle_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for reading");
    return read_bundle(in);
}

}  // namespace pisa
