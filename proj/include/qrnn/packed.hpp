#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrnn/matrix.hpp"
#include "qrnn/quantize.hpp"

namespace qrnn {

// Bit-packed image of a quantized tensor.
//
// Code layouts (LSB-first within the bit stream, padded to a whole byte):
//   binary        1 bit   0 -> -1, 1 -> +1
//   ternary       2 bits  00 -> 0, 01 -> +scale, 10 -> -scale, 11 reserved
//   pow2ternary   2 bits  as ternary with scale = 2^-f
//   expquant      1 sign bit above ceil(log2(emax-emin+2)) exponent bits;
//                 exponent code c in [0, emax-emin] -> 2^(emin+c), the next
//                 code -> exact zero (sign bit 0), higher codes invalid
struct PackedTensor {
    QuantMethod method = QuantMethod::binary;
    std::uint32_t rows = 0, cols = 0;
    std::uint8_t code_width = 0; // bits per entry
    std::uint8_t flags = 0;
    float scale = 1.0f; // magnitude of the nonzero ternary level
    std::int8_t exp_min = 0, exp_max = 0;
    std::vector<std::uint8_t> codes;

    std::size_t entry_count() const { return std::size_t(rows) * cols; }
    std::size_t payload_bytes() const { return codes.size(); }
};

namespace detail {

inline void put_bits(std::vector<std::uint8_t>& buf, std::size_t bit_pos, std::uint32_t code,
                     int width) {
    for (int k = 0; k < width; ++k) {
        const std::size_t b = bit_pos + std::size_t(k);
        if (code >> k & 1u) buf[b / 8] |= std::uint8_t(1u << (b % 8));
    }
}

inline std::uint32_t get_bits(const std::vector<std::uint8_t>& buf, std::size_t bit_pos,
                              int width) {
    std::uint32_t code = 0;
    for (int k = 0; k < width; ++k) {
        const std::size_t b = bit_pos + std::size_t(k);
        code |= std::uint32_t(buf[b / 8] >> (b % 8) & 1u) << k;
    }
    return code;
}

inline int bits_for(std::uint32_t distinct) {
    int w = 0;
    while ((1u << w) < distinct) ++w;
    return w;
}

[[noreturn]] inline void pack_value_error(std::size_t index, double v, const char* method) {
    std::ostringstream os;
    os << "pack: entry " << index << " = " << v << " is not representable as " << method;
    throw std::invalid_argument(os.str());
}

} // namespace detail

template <typename T>
PackedTensor pack(const Matrix<T>& q, const QuantizerSpec& spec) {
    spec.validate();
    PackedTensor pt;
    pt.method = spec.method;
    pt.rows = std::uint32_t(q.rows());
    pt.cols = std::uint32_t(q.cols());

    int exp_codes = 0;
    switch (spec.method) {
        case QuantMethod::binary:
            pt.code_width = 1;
            break;
        case QuantMethod::ternary:
            pt.code_width = 2;
            pt.scale = 1.0f;
            break;
        case QuantMethod::pow2_ternary:
            pt.code_width = 2;
            pt.scale = float(std::ldexp(1.0, -spec.frac_bits));
            pt.flags = spec.ternary_clamp ? 1 : 0;
            break;
        case QuantMethod::exp_quant:
            exp_codes = spec.exp_max - spec.exp_min + 2; // one extra for zero
            pt.code_width = std::uint8_t(1 + detail::bits_for(std::uint32_t(exp_codes)));
            pt.exp_min = std::int8_t(spec.exp_min);
            pt.exp_max = std::int8_t(spec.exp_max);
            break;
    }

    const std::size_t n = q.size();
    pt.codes.assign((n * pt.code_width + 7) / 8, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = double(q[i]);
        std::uint32_t code = 0;
        switch (spec.method) {
            case QuantMethod::binary:
                if (v == 1.0) code = 1;
                else if (v == -1.0) code = 0;
                else detail::pack_value_error(i, v, "binary");
                break;
            case QuantMethod::ternary:
            case QuantMethod::pow2_ternary: {
                const double s = double(pt.scale);
                if (v == 0.0) code = 0;
                else if (v == s) code = 1;
                else if (v == -s) code = 2;
                else detail::pack_value_error(i, v, to_string(spec.method));
                break;
            }
            case QuantMethod::exp_quant: {
                const int sign_shift = pt.code_width - 1;
                if (v == 0.0) {
                    code = std::uint32_t(exp_codes - 1);
                } else {
                    const auto [e, frac] = detail::log2_floor_frac(std::abs(v));
                    if (frac != 0.0 || e < spec.exp_min || e > spec.exp_max)
                        detail::pack_value_error(i, v, "expquant");
                    code = std::uint32_t(e - spec.exp_min);
                    if (v < 0.0) code |= 1u << sign_shift;
                }
                break;
            }
        }
        detail::put_bits(pt.codes, i * pt.code_width, code, pt.code_width);
    }
    return pt;
}

template <typename T>
Matrix<T> unpack(const PackedTensor& pt) {
    Matrix<T> out(pt.rows, pt.cols);
    const std::size_t n = out.size();
    if (pt.codes.size() < (n * pt.code_width + 7) / 8)
        throw std::invalid_argument("unpack: payload shorter than shape requires");
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t code = detail::get_bits(pt.codes, i * pt.code_width, pt.code_width);
        switch (pt.method) {
            case QuantMethod::binary:
                out[i] = code ? T(1) : T(-1);
                break;
            case QuantMethod::ternary:
            case QuantMethod::pow2_ternary:
                if (code == 0) out[i] = T(0);
                else if (code == 1) out[i] = T(pt.scale);
                else if (code == 2) out[i] = T(-pt.scale);
                else throw std::invalid_argument("unpack: reserved ternary code 11");
                break;
            case QuantMethod::exp_quant: {
                const int sign_shift = pt.code_width - 1;
                const bool neg = code >> sign_shift & 1u;
                const std::uint32_t ec = code & ((1u << sign_shift) - 1u);
                const std::uint32_t zero_code = std::uint32_t(pt.exp_max - pt.exp_min + 1);
                if (ec == zero_code) {
                    if (neg) throw std::invalid_argument("unpack: negative zero code");
                    out[i] = T(0);
                } else if (ec < zero_code) {
                    const double m = std::ldexp(1.0, pt.exp_min + int(ec));
                    out[i] = T(neg ? -m : m);
                } else {
                    throw std::invalid_argument("unpack: exponent code out of range");
                }
                break;
            }
        }
    }
    return out;
}

// --- QPKT container ---------------------------------------------------------
//
// Little-endian layout:
//   "QPKT" u8 version u8 method u8 code_width u8 flags
//   u32 rows u32 cols f32 scale i8 exp_min i8 exp_max
//   packed codes, padded to a byte boundary

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

inline void write_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(os, v);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t v = read_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

} // namespace detail

inline constexpr std::uint8_t kPackedVersion = 1;

inline void write_packed(std::ostream& os, const PackedTensor& pt) {
    os.write("QPKT", 4);
    os.put(char(kPackedVersion));
    os.put(char(std::uint8_t(pt.method)));
    os.put(char(pt.code_width));
    os.put(char(pt.flags));
    detail::write_u32(os, pt.rows);
    detail::write_u32(os, pt.cols);
    detail::write_f32(os, pt.scale);
    os.put(char(pt.exp_min));
    os.put(char(pt.exp_max));
    os.write(reinterpret_cast<const char*>(pt.codes.data()),
             std::streamsize(pt.codes.size()));
}

inline PackedTensor read_packed(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QPKT", 4) != 0)
        throw std::runtime_error("read_packed: bad magic");
    PackedTensor pt;
    const int version = is.get();
    if (version != kPackedVersion)
        throw std::runtime_error("read_packed: unsupported version " + std::to_string(version));
    pt.method = QuantMethod(std::uint8_t(is.get()));
    pt.code_width = std::uint8_t(is.get());
    pt.flags = std::uint8_t(is.get());
    pt.rows = detail::read_u32(is);
    pt.cols = detail::read_u32(is);
    pt.scale = detail::read_f32(is);
    pt.exp_min = std::int8_t(is.get());
    pt.exp_max = std::int8_t(is.get());
    const std::size_t bytes = (pt.entry_count() * pt.code_width + 7) / 8;
    pt.codes.resize(bytes);
    is.read(reinterpret_cast<char*>(pt.codes.data()), std::streamsize(bytes));
    if (!is) throw std::runtime_error("read_packed: truncated payload");
    return pt;
}

inline void save_packed(const std::string& path, const PackedTensor& pt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_packed: cannot open " + path);
    write_packed(os, pt);
}

inline PackedTensor load_packed(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_packed: cannot open " + path);
    return read_packed(is);
}

} // namespace qrnn
