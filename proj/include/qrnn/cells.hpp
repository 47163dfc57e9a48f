#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qrnn/activations.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/quantize.hpp"
#include "qrnn/rng.hpp"

namespace qrnn {

enum class Role : std::uint8_t { input = 0, recurrent = 1, bias = 2, output = 3 };
enum class CellKind : std::uint8_t { vanilla = 0, gru = 1, lstm = 2 };

inline const char* to_string(Role r) {
    switch (r) {
        case Role::input: return "input";
        case Role::recurrent: return "recurrent";
        case Role::bias: return "bias";
        case Role::output: return "output";
    }
    return "?";
}

inline Role parse_role(const std::string& s) {
    if (s == "input") return Role::input;
    if (s == "recurrent") return Role::recurrent;
    if (s == "bias") return Role::bias;
    if (s == "output") return Role::output;
    throw std::invalid_argument("unknown weight role '" + s + "'");
}

inline const char* to_string(CellKind k) {
    switch (k) {
        case CellKind::vanilla: return "vanilla";
        case CellKind::gru: return "gru";
        case CellKind::lstm: return "lstm";
    }
    return "?";
}

inline CellKind parse_cell_kind(const std::string& s) {
    if (s == "vanilla") return CellKind::vanilla;
    if (s == "gru") return CellKind::gru;
    if (s == "lstm") return CellKind::lstm;
    throw std::invalid_argument("unknown cell kind '" + s + "'");
}

struct CellConfig {
    CellKind kind = CellKind::vanilla;
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
    std::size_t output_size = 0;
    Activation activation = Activation::relu; // vanilla state nonlinearity
    // Per-role quantizer assignment; roles without an entry stay full
    // precision. This covers the ablation axes: input weights only, input
    // weights + biases, recurrent weights only, or everything.
    std::map<Role, QuantizerSpec> scope;
};

// A named weight tensor: the full-precision master that accumulates updates,
// and its latest quantized image, which is what the forward pass reads.
template <typename T>
struct WeightGroup {
    std::string name;
    Role role = Role::input;
    Matrix<T> master;
    Matrix<T> quantized;
    std::optional<QuantizerSpec> quantizer;

    const Matrix<T>& image() const { return quantizer ? quantized : master; }

    void refresh(Rng& rng) {
        if (quantizer) quantized = apply_quantizer(*quantizer, master, &rng);
    }
    void refresh_deterministic() {
        if (quantizer) quantized = apply_deterministic(*quantizer, master);
    }
};

template <typename T>
struct CellWeights {
    CellConfig cfg;
    std::vector<WeightGroup<T>> groups;

    WeightGroup<T>& group(std::string_view name) {
        for (auto& g : groups)
            if (g.name == name) return g;
        throw std::invalid_argument("no weight group named '" + std::string(name) + "'");
    }
    const WeightGroup<T>& group(std::string_view name) const {
        return const_cast<CellWeights*>(this)->group(name);
    }
    std::size_t group_index(std::string_view name) const {
        for (std::size_t i = 0; i < groups.size(); ++i)
            if (groups[i].name == name) return i;
        throw std::invalid_argument("no weight group named '" + std::string(name) + "'");
    }
    const Matrix<T>& img(std::string_view name) const { return group(name).image(); }

    // Draw fresh quantized images for every quantized group, in group order.
    void refresh_all(Rng& rng) {
        for (auto& g : groups) g.refresh(rng);
    }
    void refresh_all_deterministic() {
        for (auto& g : groups) g.refresh_deterministic();
    }
    bool any_quantized() const {
        for (const auto& g : groups)
            if (g.quantizer) return true;
        return false;
    }
};

// Zero-initialized weight groups with the layout the forward passes expect.
template <typename T>
CellWeights<T> make_cell(const CellConfig& cfg) {
    if (cfg.input_size == 0 || cfg.hidden_size == 0 || cfg.output_size == 0)
        throw std::invalid_argument("make_cell: all sizes must be nonzero");
    for (const auto& [role, spec] : cfg.scope) spec.validate();

    CellWeights<T> w;
    w.cfg = cfg;
    const std::size_t I = cfg.input_size, H = cfg.hidden_size, O = cfg.output_size;

    auto add = [&](const char* name, Role role, std::size_t r, std::size_t c) {
        WeightGroup<T> g;
        g.name = name;
        g.role = role;
        g.master = Matrix<T>(r, c);
        g.quantized = Matrix<T>(r, c);
        auto it = cfg.scope.find(role);
        if (it != cfg.scope.end()) g.quantizer = it->second;
        w.groups.push_back(std::move(g));
    };

    switch (cfg.kind) {
        case CellKind::vanilla:
            add("W_xh", Role::input, H, I);
            add("W_hh", Role::recurrent, H, H);
            add("b_h", Role::bias, H, 1);
            break;
        case CellKind::gru:
            add("W_xz", Role::input, H, I);
            add("W_xr", Role::input, H, I);
            add("W_xh", Role::input, H, I);
            add("W_hz", Role::recurrent, H, H);
            add("W_hr", Role::recurrent, H, H);
            add("W_hh", Role::recurrent, H, H);
            add("b_z", Role::bias, H, 1);
            add("b_r", Role::bias, H, 1);
            add("b_h", Role::bias, H, 1);
            break;
        case CellKind::lstm:
            add("W_xi", Role::input, H, I);
            add("W_xf", Role::input, H, I);
            add("W_xg", Role::input, H, I);
            add("W_xo", Role::input, H, I);
            add("W_hi", Role::recurrent, H, H);
            add("W_hf", Role::recurrent, H, H);
            add("W_hg", Role::recurrent, H, H);
            add("W_ho", Role::recurrent, H, H);
            add("b_i", Role::bias, H, 1);
            add("b_f", Role::bias, H, 1);
            add("b_g", Role::bias, H, 1);
            add("b_o", Role::bias, H, 1);
            break;
    }
    add("W_hx", Role::output, O, H);
    add("b_x", Role::output, O, 1);
    return w;
}

// Everything the backward pass and the stability diagnostics need from one
// forward run. Row t of h (and c) is the state after step t; row 0 is the
// initial state.
template <typename T>
struct StateTrace {
    CellKind kind = CellKind::vanilla;
    Activation activation = Activation::relu;
    Matrix<T> x;                          // [steps x input]
    std::vector<std::uint8_t> step_valid; // empty = every step valid
    Matrix<T> h;                          // [steps+1 x hidden]
    Matrix<T> c;                          // lstm cell state, same layout
    Matrix<T> pre;                        // vanilla preactivations [steps x hidden]
    Matrix<T> z, r, hcand;                // gru gates / candidate [steps x hidden]
    Matrix<T> gi, gf, gg, go;             // lstm gates [steps x hidden]

    std::size_t steps() const { return x.rows(); }
    std::size_t hidden() const { return h.cols(); }
    bool valid_step(std::size_t t) const {
        return step_valid.empty() || step_valid[t] != 0;
    }
    // Last step index (1-based) whose input was not padding; 0 if none.
    std::size_t last_valid_step() const {
        for (std::size_t t = steps(); t > 0; --t)
            if (valid_step(t - 1)) return t;
        return 0;
    }
};

namespace detail {

// y += A * v
template <typename T>
void add_matvec(const Matrix<T>& A, const T* v, T* y) {
    for (std::size_t i = 0; i < A.rows(); ++i) {
        const T* arow = A.row(i);
        T acc = T(0);
        for (std::size_t j = 0; j < A.cols(); ++j) acc += arow[j] * v[j];
        y[i] += acc;
    }
}

// y += A^T * v
template <typename T>
void add_matvec_t(const Matrix<T>& A, const T* v, T* y) {
    for (std::size_t i = 0; i < A.rows(); ++i) {
        const T vi = v[i];
        const T* arow = A.row(i);
        for (std::size_t j = 0; j < A.cols(); ++j) y[j] += vi * arow[j];
    }
}

// G += u * v^T
template <typename T>
void add_outer(Matrix<T>& G, const T* u, const T* v) {
    for (std::size_t i = 0; i < G.rows(); ++i) {
        const T ui = u[i];
        T* grow = G.row(i);
        for (std::size_t j = 0; j < G.cols(); ++j) grow[j] += ui * v[j];
    }
}

template <typename T>
void add_bias(const Matrix<T>& b, T* y) {
    for (std::size_t i = 0; i < b.rows(); ++i) y[i] += b(i, 0);
}

template <typename T>
void check_forward_shapes(const CellWeights<T>& w, const Matrix<T>& x_seq,
                          const Matrix<T>& state0) {
    if (x_seq.cols() != w.cfg.input_size)
        throw std::invalid_argument("forward: input width " + std::to_string(x_seq.cols()) +
                                    " != configured input size " +
                                    std::to_string(w.cfg.input_size));
    if (state0.rows() != w.cfg.hidden_size || state0.cols() != 1)
        throw std::invalid_argument("forward: initial state must be " +
                                    std::to_string(w.cfg.hidden_size) + "x1, got " +
                                    shape_str(state0));
}

} // namespace detail

// h_t = act(W_hh h_{t-1} + W_xh x_t + b_h), with the quantized image of each
// group standing in for its master. Padded (masked) steps carry the state
// through unchanged.
template <typename T>
StateTrace<T> vanilla_state_forward(const CellWeights<T>& w, const Matrix<T>& x_seq,
                                    const Matrix<T>& h0,
                                    const std::vector<std::uint8_t>* step_mask = nullptr) {
    detail::check_forward_shapes(w, x_seq, h0);
    const std::size_t steps = x_seq.rows(), H = w.cfg.hidden_size;
    const Matrix<T>& Wxh = w.img("W_xh");
    const Matrix<T>& Whh = w.img("W_hh");
    const Matrix<T>& bh = w.img("b_h");

    StateTrace<T> tr;
    tr.kind = CellKind::vanilla;
    tr.activation = w.cfg.activation;
    tr.x = x_seq;
    if (step_mask) tr.step_valid = *step_mask;
    tr.h = Matrix<T>(steps + 1, H);
    tr.pre = Matrix<T>(steps, H);
    for (std::size_t i = 0; i < H; ++i) tr.h(0, i) = h0(i, 0);

    for (std::size_t t = 1; t <= steps; ++t) {
        const T* hprev = tr.h.row(t - 1);
        T* hrow = tr.h.row(t);
        if (!tr.valid_step(t - 1)) {
            for (std::size_t i = 0; i < H; ++i) hrow[i] = hprev[i];
            continue;
        }
        T* a = tr.pre.row(t - 1);
        detail::add_bias(bh, a);
        detail::add_matvec(Wxh, x_seq.row(t - 1), a);
        detail::add_matvec(Whh, hprev, a);
        for (std::size_t i = 0; i < H; ++i) hrow[i] = activate(a[i], w.cfg.activation);
    }
    return tr;
}

// z = sigma(W_xz x + W_hz s + b_z), r likewise, h = tanh(W_xh x + W_hh (s.r) + b_h),
// s' = (1-z).h + z.s. Gates use the logistic sigmoid.
template <typename T>
StateTrace<T> gru_forward(const CellWeights<T>& w, const Matrix<T>& x_seq, const Matrix<T>& s0,
                          const std::vector<std::uint8_t>* step_mask = nullptr) {
    detail::check_forward_shapes(w, x_seq, s0);
    const std::size_t steps = x_seq.rows(), H = w.cfg.hidden_size;
    const Matrix<T>&Wxz = w.img("W_xz"), &Wxr = w.img("W_xr"), &Wxh = w.img("W_xh");
    const Matrix<T>&Whz = w.img("W_hz"), &Whr = w.img("W_hr"), &Whh = w.img("W_hh");
    const Matrix<T>&bz = w.img("b_z"), &br = w.img("b_r"), &bh = w.img("b_h");

    StateTrace<T> tr;
    tr.kind = CellKind::gru;
    tr.x = x_seq;
    if (step_mask) tr.step_valid = *step_mask;
    tr.h = Matrix<T>(steps + 1, H);
    tr.z = Matrix<T>(steps, H);
    tr.r = Matrix<T>(steps, H);
    tr.hcand = Matrix<T>(steps, H);
    for (std::size_t i = 0; i < H; ++i) tr.h(0, i) = s0(i, 0);

    std::vector<T> gated(H);
    for (std::size_t t = 1; t <= steps; ++t) {
        const T* sprev = tr.h.row(t - 1);
        T* srow = tr.h.row(t);
        if (!tr.valid_step(t - 1)) {
            for (std::size_t i = 0; i < H; ++i) srow[i] = sprev[i];
            continue;
        }
        const T* xt = x_seq.row(t - 1);
        T* zrow = tr.z.row(t - 1);
        T* rrow = tr.r.row(t - 1);
        T* crow = tr.hcand.row(t - 1);

        detail::add_bias(bz, zrow);
        detail::add_matvec(Wxz, xt, zrow);
        detail::add_matvec(Whz, sprev, zrow);
        detail::add_bias(br, rrow);
        detail::add_matvec(Wxr, xt, rrow);
        detail::add_matvec(Whr, sprev, rrow);
        for (std::size_t i = 0; i < H; ++i) {
            zrow[i] = logistic(zrow[i]);
            rrow[i] = logistic(rrow[i]);
            gated[i] = sprev[i] * rrow[i];
        }
        detail::add_bias(bh, crow);
        detail::add_matvec(Wxh, xt, crow);
        detail::add_matvec(Whh, gated.data(), crow);
        for (std::size_t i = 0; i < H; ++i) {
            crow[i] = std::tanh(crow[i]);
            srow[i] = (T(1) - zrow[i]) * crow[i] + zrow[i] * sprev[i];
        }
    }
    return tr;
}

// Standard LSTM without peepholes: i,f,o = sigma(affine), g = tanh(affine),
// c' = f.c + i.g, h' = o.tanh(c').
template <typename T>
StateTrace<T> lstm_forward(const CellWeights<T>& w, const Matrix<T>& x_seq, const Matrix<T>& h0,
                           const Matrix<T>& c0,
                           const std::vector<std::uint8_t>* step_mask = nullptr) {
    detail::check_forward_shapes(w, x_seq, h0);
    if (c0.rows() != w.cfg.hidden_size || c0.cols() != 1)
        throw std::invalid_argument("lstm_forward: c0 must be " +
                                    std::to_string(w.cfg.hidden_size) + "x1");
    const std::size_t steps = x_seq.rows(), H = w.cfg.hidden_size;
    const Matrix<T>&Wxi = w.img("W_xi"), &Wxf = w.img("W_xf"), &Wxg = w.img("W_xg"),
                   &Wxo = w.img("W_xo");
    const Matrix<T>&Whi = w.img("W_hi"), &Whf = w.img("W_hf"), &Whg = w.img("W_hg"),
                   &Who = w.img("W_ho");
    const Matrix<T>&bi = w.img("b_i"), &bf = w.img("b_f"), &bg = w.img("b_g"),
                   &bo = w.img("b_o");

    StateTrace<T> tr;
    tr.kind = CellKind::lstm;
    tr.x = x_seq;
    if (step_mask) tr.step_valid = *step_mask;
    tr.h = Matrix<T>(steps + 1, H);
    tr.c = Matrix<T>(steps + 1, H);
    tr.gi = Matrix<T>(steps, H);
    tr.gf = Matrix<T>(steps, H);
    tr.gg = Matrix<T>(steps, H);
    tr.go = Matrix<T>(steps, H);
    for (std::size_t i = 0; i < H; ++i) {
        tr.h(0, i) = h0(i, 0);
        tr.c(0, i) = c0(i, 0);
    }

    for (std::size_t t = 1; t <= steps; ++t) {
        const T* hprev = tr.h.row(t - 1);
        const T* cprev = tr.c.row(t - 1);
        T* hrow = tr.h.row(t);
        T* crow = tr.c.row(t);
        if (!tr.valid_step(t - 1)) {
            for (std::size_t i = 0; i < H; ++i) {
                hrow[i] = hprev[i];
                crow[i] = cprev[i];
            }
            continue;
        }
        const T* xt = x_seq.row(t - 1);
        T* irow = tr.gi.row(t - 1);
        T* frow = tr.gf.row(t - 1);
        T* grow = tr.gg.row(t - 1);
        T* orow = tr.go.row(t - 1);

        detail::add_bias(bi, irow);
        detail::add_matvec(Wxi, xt, irow);
        detail::add_matvec(Whi, hprev, irow);
        detail::add_bias(bf, frow);
        detail::add_matvec(Wxf, xt, frow);
        detail::add_matvec(Whf, hprev, frow);
        detail::add_bias(bg, grow);
        detail::add_matvec(Wxg, xt, grow);
        detail::add_matvec(Whg, hprev, grow);
        detail::add_bias(bo, orow);
        detail::add_matvec(Wxo, xt, orow);
        detail::add_matvec(Who, hprev, orow);

        for (std::size_t i = 0; i < H; ++i) {
            irow[i] = logistic(irow[i]);
            frow[i] = logistic(frow[i]);
            grow[i] = std::tanh(grow[i]);
            orow[i] = logistic(orow[i]);
            crow[i] = frow[i] * cprev[i] + irow[i] * grow[i];
            hrow[i] = orow[i] * std::tanh(crow[i]);
        }
    }
    return tr;
}

// Dispatch on the configured cell kind. LSTM uses c0 = zeros when not given.
template <typename T>
StateTrace<T> cell_forward(const CellWeights<T>& w, const Matrix<T>& x_seq,
                           const Matrix<T>& state0, const Matrix<T>* cell0 = nullptr,
                           const std::vector<std::uint8_t>* step_mask = nullptr) {
    switch (w.cfg.kind) {
        case CellKind::vanilla: return vanilla_state_forward(w, x_seq, state0, step_mask);
        case CellKind::gru: return gru_forward(w, x_seq, state0, step_mask);
        case CellKind::lstm: {
            const Matrix<T> zeros(w.cfg.hidden_size, 1);
            return lstm_forward(w, x_seq, state0, cell0 ? *cell0 : zeros, step_mask);
        }
    }
    throw std::logic_error("cell_forward: bad kind");
}

// Per-group gradient buffers, parallel to CellWeights::groups.
template <typename T>
struct Gradients {
    std::vector<Matrix<T>> by_group;

    Gradients() = default;
    explicit Gradients(const CellWeights<T>& w) {
        by_group.reserve(w.groups.size());
        for (const auto& g : w.groups)
            by_group.emplace_back(g.master.rows(), g.master.cols());
    }
    Matrix<T>& of(const CellWeights<T>& w, std::string_view name) {
        return by_group[w.group_index(name)];
    }
    void add(const Gradients& o, T factor = T(1)) {
        for (std::size_t i = 0; i < by_group.size(); ++i)
            accumulate(by_group[i], o.by_group[i], factor);
    }
    void scale(T factor) {
        for (auto& g : by_group) scale_inplace(g, factor);
    }
    double global_norm() const {
        double s = 0;
        for (const auto& g : by_group)
            for (T v : g) s += double(v) * double(v);
        return std::sqrt(s);
    }
};

// Exact BPTT through the traced forward pass. d_state holds the gradient of
// the loss with respect to the post-step state at every step ([steps x hidden],
// row t-1 for step t). Gradients are taken with respect to the quantized
// images; the optimizer applies them to the masters.
template <typename T>
void cell_backward(const CellWeights<T>& w, const StateTrace<T>& tr, const Matrix<T>& d_state,
                   Gradients<T>& grads, Matrix<T>* d_state0 = nullptr) {
    const std::size_t steps = tr.steps(), H = tr.hidden();
    if (d_state.rows() != steps || d_state.cols() != H)
        throw std::invalid_argument("cell_backward: d_state must be steps x hidden");
    if (tr.kind != w.cfg.kind)
        throw std::invalid_argument("cell_backward: trace kind does not match weights");
    if (grads.by_group.size() != w.groups.size())
        throw std::invalid_argument("cell_backward: gradient buffers do not match weights");

    switch (w.cfg.kind) {
        case CellKind::vanilla: {
            const Matrix<T>& Whh = w.img("W_hh");
            Matrix<T>&gWxh = grads.of(w, "W_xh"), &gWhh = grads.of(w, "W_hh"),
                    &gbh = grads.of(w, "b_h");
            std::vector<T> dh(H, T(0)), da(H), dh_next(H);
            for (std::size_t t = steps; t >= 1; --t) {
                for (std::size_t i = 0; i < H; ++i) dh[i] += d_state(t - 1, i);
                if (!tr.valid_step(t - 1)) continue; // identity carry
                const T* a = tr.pre.row(t - 1);
                const T* hrow = tr.h.row(t);
                for (std::size_t i = 0; i < H; ++i)
                    da[i] = dh[i] * activate_grad(a[i], hrow[i], tr.activation);
                detail::add_outer(gWxh, da.data(), tr.x.row(t - 1));
                detail::add_outer(gWhh, da.data(), tr.h.row(t - 1));
                for (std::size_t i = 0; i < H; ++i) gbh(i, 0) += da[i];
                std::fill(dh_next.begin(), dh_next.end(), T(0));
                detail::add_matvec_t(Whh, da.data(), dh_next.data());
                dh.swap(dh_next);
            }
            if (d_state0)
                for (std::size_t i = 0; i < H; ++i) (*d_state0)(i, 0) = dh[i];
            break;
        }
        case CellKind::gru: {
            const Matrix<T>&Whz = w.img("W_hz"), &Whr = w.img("W_hr"), &Whh = w.img("W_hh");
            Matrix<T>&gWxz = grads.of(w, "W_xz"), &gWxr = grads.of(w, "W_xr"),
                    &gWxh = grads.of(w, "W_xh");
            Matrix<T>&gWhz = grads.of(w, "W_hz"), &gWhr = grads.of(w, "W_hr"),
                    &gWhh = grads.of(w, "W_hh");
            Matrix<T>&gbz = grads.of(w, "b_z"), &gbr = grads.of(w, "b_r"),
                    &gbh = grads.of(w, "b_h");
            std::vector<T> ds(H, T(0)), ds_next(H), dah(H), dar(H), daz(H), gated(H), tmp(H);
            for (std::size_t t = steps; t >= 1; --t) {
                for (std::size_t i = 0; i < H; ++i) ds[i] += d_state(t - 1, i);
                if (!tr.valid_step(t - 1)) continue;
                const T* xt = tr.x.row(t - 1);
                const T* sprev = tr.h.row(t - 1);
                const T* zt = tr.z.row(t - 1);
                const T* rt = tr.r.row(t - 1);
                const T* hc = tr.hcand.row(t - 1);

                for (std::size_t i = 0; i < H; ++i) {
                    const T dz = ds[i] * (sprev[i] - hc[i]);
                    const T dhc = ds[i] * (T(1) - zt[i]);
                    ds_next[i] = ds[i] * zt[i];
                    dah[i] = dhc * (T(1) - hc[i] * hc[i]);
                    daz[i] = dz * zt[i] * (T(1) - zt[i]);
                    gated[i] = sprev[i] * rt[i];
                }
                detail::add_outer(gWxh, dah.data(), xt);
                detail::add_outer(gWhh, dah.data(), gated.data());
                for (std::size_t i = 0; i < H; ++i) gbh(i, 0) += dah[i];

                std::fill(tmp.begin(), tmp.end(), T(0));
                detail::add_matvec_t(Whh, dah.data(), tmp.data()); // d(sprev . r)
                for (std::size_t i = 0; i < H; ++i) {
                    ds_next[i] += tmp[i] * rt[i];
                    const T dr = tmp[i] * sprev[i];
                    dar[i] = dr * rt[i] * (T(1) - rt[i]);
                }
                detail::add_outer(gWxr, dar.data(), xt);
                detail::add_outer(gWhr, dar.data(), sprev);
                for (std::size_t i = 0; i < H; ++i) gbr(i, 0) += dar[i];
                detail::add_matvec_t(Whr, dar.data(), ds_next.data());

                detail::add_outer(gWxz, daz.data(), xt);
                detail::add_outer(gWhz, daz.data(), sprev);
                for (std::size_t i = 0; i < H; ++i) gbz(i, 0) += daz[i];
                detail::add_matvec_t(Whz, daz.data(), ds_next.data());

                ds.swap(ds_next);
                std::fill(ds_next.begin(), ds_next.end(), T(0));
            }
            if (d_state0)
                for (std::size_t i = 0; i < H; ++i) (*d_state0)(i, 0) = ds[i];
            break;
        }
        case CellKind::lstm: {
            const Matrix<T>&Whi = w.img("W_hi"), &Whf = w.img("W_hf"), &Whg = w.img("W_hg"),
                           &Who = w.img("W_ho");
            Matrix<T>&gWxi = grads.of(w, "W_xi"), &gWxf = grads.of(w, "W_xf"),
                    &gWxg = grads.of(w, "W_xg"), &gWxo = grads.of(w, "W_xo");
            Matrix<T>&gWhi = grads.of(w, "W_hi"), &gWhf = grads.of(w, "W_hf"),
                    &gWhg = grads.of(w, "W_hg"), &gWho = grads.of(w, "W_ho");
            Matrix<T>&gbi = grads.of(w, "b_i"), &gbf = grads.of(w, "b_f"),
                    &gbg = grads.of(w, "b_g"), &gbo = grads.of(w, "b_o");
            std::vector<T> dh(H, T(0)), dc(H, T(0)), dh_next(H), dai(H), daf(H), dag(H), dao(H);
            for (std::size_t t = steps; t >= 1; --t) {
                for (std::size_t i = 0; i < H; ++i) dh[i] += d_state(t - 1, i);
                if (!tr.valid_step(t - 1)) continue; // h and c both carry
                const T* xt = tr.x.row(t - 1);
                const T* hprev = tr.h.row(t - 1);
                const T* cprev = tr.c.row(t - 1);
                const T* ct = tr.c.row(t);
                const T* it = tr.gi.row(t - 1);
                const T* ft = tr.gf.row(t - 1);
                const T* gt = tr.gg.row(t - 1);
                const T* ot = tr.go.row(t - 1);

                for (std::size_t i = 0; i < H; ++i) {
                    const T tc = std::tanh(ct[i]);
                    const T do_ = dh[i] * tc;
                    dc[i] += dh[i] * ot[i] * (T(1) - tc * tc);
                    const T df = dc[i] * cprev[i];
                    const T di = dc[i] * gt[i];
                    const T dg = dc[i] * it[i];
                    dai[i] = di * it[i] * (T(1) - it[i]);
                    daf[i] = df * ft[i] * (T(1) - ft[i]);
                    dag[i] = dg * (T(1) - gt[i] * gt[i]);
                    dao[i] = do_ * ot[i] * (T(1) - ot[i]);
                    dc[i] *= ft[i]; // becomes dc for t-1
                }
                detail::add_outer(gWxi, dai.data(), xt);
                detail::add_outer(gWxf, daf.data(), xt);
                detail::add_outer(gWxg, dag.data(), xt);
                detail::add_outer(gWxo, dao.data(), xt);
                detail::add_outer(gWhi, dai.data(), hprev);
                detail::add_outer(gWhf, daf.data(), hprev);
                detail::add_outer(gWhg, dag.data(), hprev);
                detail::add_outer(gWho, dao.data(), hprev);
                for (std::size_t i = 0; i < H; ++i) {
                    gbi(i, 0) += dai[i];
                    gbf(i, 0) += daf[i];
                    gbg(i, 0) += dag[i];
                    gbo(i, 0) += dao[i];
                }
                std::fill(dh_next.begin(), dh_next.end(), T(0));
                detail::add_matvec_t(Whi, dai.data(), dh_next.data());
                detail::add_matvec_t(Whf, daf.data(), dh_next.data());
                detail::add_matvec_t(Whg, dag.data(), dh_next.data());
                detail::add_matvec_t(Who, dao.data(), dh_next.data());
                dh.swap(dh_next);
            }
            if (d_state0)
                for (std::size_t i = 0; i < H; ++i) (*d_state0)(i, 0) = dh[i];
            break;
        }
    }
}

// --- softmax readout --------------------------------------------------------

// Logits for every traced step: row t-1 is W_hx h_t + b_x.
template <typename T>
Matrix<T> readout_logits(const CellWeights<T>& w, const StateTrace<T>& tr) {
    const Matrix<T>& Whx = w.img("W_hx");
    const Matrix<T>& bx = w.img("b_x");
    Matrix<T> logits(tr.steps(), w.cfg.output_size);
    for (std::size_t t = 1; t <= tr.steps(); ++t) {
        T* lrow = logits.row(t - 1);
        detail::add_bias(bx, lrow);
        detail::add_matvec(Whx, tr.h.row(t), lrow);
    }
    return logits;
}

// Readout gradients plus the induced per-step state gradient; feeds
// cell_backward. d_logits rows for padded steps must be zero.
template <typename T>
void readout_backward(const CellWeights<T>& w, const StateTrace<T>& tr,
                      const Matrix<T>& d_logits, Gradients<T>& grads, Matrix<T>& d_state) {
    const Matrix<T>& Whx = w.img("W_hx");
    Matrix<T>& gWhx = grads.of(w, "W_hx");
    Matrix<T>& gbx = grads.of(w, "b_x");
    if (d_logits.rows() != tr.steps() || d_logits.cols() != w.cfg.output_size)
        throw std::invalid_argument("readout_backward: d_logits must be steps x output");
    d_state = Matrix<T>(tr.steps(), tr.hidden());
    for (std::size_t t = 1; t <= tr.steps(); ++t) {
        const T* dl = d_logits.row(t - 1);
        detail::add_outer(gWhx, dl, tr.h.row(t));
        for (std::size_t i = 0; i < w.cfg.output_size; ++i) gbx(i, 0) += dl[i];
        detail::add_matvec_t(Whx, dl, d_state.row(t - 1));
    }
}

template <typename T>
struct LmForward {
    StateTrace<T> trace;
    Matrix<T> probs; // [steps x output], rows are distributions
};

// Full language-model pipeline: recurrence, per-step softmax readout.
template <typename T>
LmForward<T> lm_forward(const CellWeights<T>& w, const Matrix<T>& x_seq,
                        const Matrix<T>& state0) {
    LmForward<T> out;
    out.trace = cell_forward(w, x_seq, state0);
    out.probs = readout_logits(w, out.trace);
    softmax_rows_inplace(out.probs);
    return out;
}

// The classic form: per-step hidden states plus predictive distributions.
template <typename T>
LmForward<T> vanilla_forward(const CellWeights<T>& w, const Matrix<T>& x_seq,
                             const Matrix<T>& h0) {
    if (w.cfg.kind != CellKind::vanilla)
        throw std::invalid_argument("vanilla_forward: weights are not a vanilla cell");
    LmForward<T> out;
    out.trace = vanilla_state_forward(w, x_seq, h0);
    out.probs = readout_logits(w, out.trace);
    softmax_rows_inplace(out.probs);
    return out;
}

// BPTT for the language-model pipeline; d_logits is the gradient at the
// softmax inputs, one row per step.
template <typename T>
void lm_backward(const CellWeights<T>& w, const StateTrace<T>& tr, const Matrix<T>& d_logits,
                 Gradients<T>& grads) {
    Matrix<T> d_state;
    readout_backward(w, tr, d_logits, grads, d_state);
    cell_backward(w, tr, d_state, grads);
}

template <typename T>
struct ClassifyForward {
    StateTrace<T> trace;
    Matrix<T> probs;          // [1 x output]
    std::size_t readout_step; // 1-based step whose state feeds the readout
};

// Sequence classification: softmax readout of the last unpadded state.
template <typename T>
ClassifyForward<T> classify_forward(const CellWeights<T>& w, const Matrix<T>& x_seq,
                                    const std::vector<std::uint8_t>* step_mask = nullptr) {
    ClassifyForward<T> out;
    const Matrix<T> zeros(w.cfg.hidden_size, 1);
    out.trace = cell_forward<T>(w, x_seq, zeros, nullptr, step_mask);
    out.readout_step = out.trace.last_valid_step();
    if (out.readout_step == 0)
        throw std::invalid_argument("classify_forward: sequence has no valid steps");
    const Matrix<T>& bx = w.img("b_x");
    out.probs = Matrix<T>(1, w.cfg.output_size);
    detail::add_bias(bx, out.probs.row(0));
    detail::add_matvec(w.img("W_hx"), out.trace.h.row(out.readout_step), out.probs.row(0));
    softmax_rows_inplace(out.probs);
    return out;
}

template <typename T>
void classify_backward(const CellWeights<T>& w, const ClassifyForward<T>& fwd,
                       const Matrix<T>& d_logits_row, Gradients<T>& grads) {
    const StateTrace<T>& tr = fwd.trace;
    if (d_logits_row.rows() != 1 || d_logits_row.cols() != w.cfg.output_size)
        throw std::invalid_argument("classify_backward: d_logits must be 1 x output");
    Matrix<T>& gWhx = grads.of(w, "W_hx");
    Matrix<T>& gbx = grads.of(w, "b_x");
    const T* dl = d_logits_row.row(0);
    detail::add_outer(gWhx, dl, tr.h.row(fwd.readout_step));
    for (std::size_t i = 0; i < w.cfg.output_size; ++i) gbx(i, 0) += dl[i];
    Matrix<T> d_state(tr.steps(), tr.hidden());
    detail::add_matvec_t(w.img("W_hx"), dl, d_state.row(fwd.readout_step - 1));
    cell_backward(w, tr, d_state, grads);
}

} // namespace qrnn
