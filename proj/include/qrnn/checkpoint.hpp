#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "qrnn/cells.hpp"
#include "qrnn/packed.hpp"
#include "qrnn/train.hpp"

namespace qrnn {

namespace detail {

inline void write_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return std::uint16_t(b[0] | b[1] << 8);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) os.put(char(v >> (8 * k) & 0xff));
}

inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t(std::uint8_t(is.get())) << (8 * k);
    return v;
}

template <typename T>
void write_scalar(std::ostream& os, T v) {
    if constexpr (sizeof(T) == 4) {
        write_f32(os, float(v));
    } else {
        std::uint64_t bits;
        double d = double(v);
        std::memcpy(&bits, &d, 8);
        write_u64(os, bits);
    }
}

template <typename T>
T read_scalar(std::istream& is) {
    if constexpr (sizeof(T) == 4) {
        return T(read_f32(is));
    } else {
        const std::uint64_t bits = read_u64(is);
        double d;
        std::memcpy(&d, &bits, 8);
        return T(d);
    }
}

template <typename T>
void write_matrix(std::ostream& os, const Matrix<T>& m) {
    for (T v : m) write_scalar(os, v);
}

template <typename T>
void read_matrix(std::istream& is, Matrix<T>& m) {
    for (auto& v : m) v = read_scalar<T>(is);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u16(os, std::uint16_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is) {
    const std::uint16_t n = read_u16(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

inline void write_quantizer(std::ostream& os, const QuantizerSpec& q) {
    os.put(char(std::uint8_t(q.method)));
    os.put(char(std::uint8_t(q.variant)));
    os.put(char(std::int8_t(q.int_bits)));
    os.put(char(std::int8_t(q.frac_bits)));
    os.put(char(std::int8_t(q.exp_min)));
    os.put(char(std::int8_t(q.exp_max)));
    os.put(char(q.ternary_clamp ? 1 : 0));
}

inline QuantizerSpec read_quantizer(std::istream& is) {
    QuantizerSpec q;
    q.method = QuantMethod(std::uint8_t(is.get()));
    q.variant = QuantVariant(std::uint8_t(is.get()));
    q.int_bits = std::int8_t(is.get());
    q.frac_bits = std::int8_t(is.get());
    q.exp_min = std::int8_t(is.get());
    q.exp_max = std::int8_t(is.get());
    q.ternary_clamp = is.get() != 0;
    return q;
}

} // namespace detail

inline constexpr std::uint16_t kCheckpointVersion = 1;

// "QRNN" container. Masters are stored at the run's scalar width; the
// deterministic quantized image of each quantized group rides along as a
// packed tensor, and optimizer moments are appended when given, so training
// can resume.
template <typename T>
void save_checkpoint(const std::string& path, const CellWeights<T>& w,
                     const std::string& config_blob,
                     const TrainState<T>* state = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("QRNN", 4);
    detail::write_u16(os, kCheckpointVersion);
    os.put(char(sizeof(T)));
    detail::write_u32(os, std::uint32_t(config_blob.size()));
    os.write(config_blob.data(), std::streamsize(config_blob.size()));

    os.put(char(std::uint8_t(w.cfg.kind)));
    detail::write_u32(os, std::uint32_t(w.cfg.input_size));
    detail::write_u32(os, std::uint32_t(w.cfg.hidden_size));
    detail::write_u32(os, std::uint32_t(w.cfg.output_size));
    os.put(char(std::uint8_t(w.cfg.activation)));

    detail::write_u32(os, std::uint32_t(w.groups.size()));
    for (const auto& g : w.groups) {
        detail::write_string(os, g.name);
        os.put(char(std::uint8_t(g.role)));
        os.put(char(g.quantizer ? 1 : 0));
        if (g.quantizer) detail::write_quantizer(os, *g.quantizer);
        detail::write_u32(os, std::uint32_t(g.master.rows()));
        detail::write_u32(os, std::uint32_t(g.master.cols()));
        detail::write_matrix(os, g.master);
        if (g.quantizer) {
            const Matrix<T> image = apply_deterministic(*g.quantizer, g.master);
            std::ostringstream blob;
            write_packed(blob, pack(image, *g.quantizer));
            const std::string bytes = blob.str();
            os.put(char(1));
            detail::write_u32(os, std::uint32_t(bytes.size()));
            os.write(bytes.data(), std::streamsize(bytes.size()));
        } else {
            os.put(char(0));
        }
    }

    os.put(char(state ? 1 : 0));
    if (state) {
        detail::write_u64(os, state->step);
        for (const auto& m : state->moments) {
            detail::write_matrix(os, m.m);
            detail::write_matrix(os, m.v);
        }
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T>
struct Checkpoint {
    CellWeights<T> model;
    std::string config_blob;
    std::vector<PackedTensor> packed_images; // index-aligned with quantized groups
    std::optional<TrainState<T>> state;
};

// Scalar width recorded in a checkpoint file (4 or 8), for dispatch.
inline int checkpoint_scalar_size(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QRNN", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    detail::read_u16(is);
    return is.get();
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QRNN", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint16_t version = detail::read_u16(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const int scalar = is.get();
    if (scalar != int(sizeof(T)))
        throw std::runtime_error("checkpoint: stored scalar width " + std::to_string(scalar) +
                                 " does not match requested " + std::to_string(sizeof(T)));

    Checkpoint<T> ck;
    const std::uint32_t blob_len = detail::read_u32(is);
    ck.config_blob.resize(blob_len);
    is.read(ck.config_blob.data(), blob_len);

    CellConfig cfg;
    cfg.kind = CellKind(std::uint8_t(is.get()));
    cfg.input_size = detail::read_u32(is);
    cfg.hidden_size = detail::read_u32(is);
    cfg.output_size = detail::read_u32(is);
    cfg.activation = Activation(std::uint8_t(is.get()));

    const std::uint32_t n_groups = detail::read_u32(is);
    ck.model.groups.reserve(n_groups);
    for (std::uint32_t i = 0; i < n_groups; ++i) {
        WeightGroup<T> g;
        g.name = detail::read_string(is);
        g.role = Role(std::uint8_t(is.get()));
        if (is.get()) {
            g.quantizer = detail::read_quantizer(is);
            cfg.scope.emplace(g.role, *g.quantizer);
        }
        const std::uint32_t rows = detail::read_u32(is);
        const std::uint32_t cols = detail::read_u32(is);
        g.master = Matrix<T>(rows, cols);
        detail::read_matrix(is, g.master);
        g.quantized = g.master;
        if (is.get()) {
            const std::uint32_t len = detail::read_u32(is);
            std::string bytes(len, '\0');
            is.read(bytes.data(), len);
            std::istringstream blob(bytes);
            ck.packed_images.push_back(read_packed(blob));
            if (g.quantizer) g.quantized = unpack<T>(ck.packed_images.back());
        }
        ck.model.groups.push_back(std::move(g));
    }
    ck.model.cfg = cfg;

    if (is.get()) {
        TrainState<T> st = make_train_state(ck.model);
        st.step = detail::read_u64(is);
        for (auto& m : st.moments) {
            detail::read_matrix(is, m.m);
            detail::read_matrix(is, m.v);
        }
        ck.state = std::move(st);
    }
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    return ck;
}

} // namespace qrnn
