#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "qrnn/cells.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/rng.hpp"
#include "qrnn/train.hpp"

namespace qrnn {

// Exact Jacobian of the state-to-state transition, d state_t / d state_{t-1},
// assembled from the traced gate values and the quantized weight images. For
// the LSTM this is the partial with the previous cell state held fixed.
template <typename T>
Matrix<T> step_jacobian(const CellWeights<T>& w, const StateTrace<T>& tr, std::size_t t) {
    if (t < 1 || t > tr.steps())
        throw std::invalid_argument("step_jacobian: step " + std::to_string(t) +
                                    " has no predecessor state");
    const std::size_t H = tr.hidden();
    Matrix<T> J(H, H);
    if (!tr.valid_step(t - 1)) return Matrix<T>::identity(H); // carried state

    switch (tr.kind) {
        case CellKind::vanilla: {
            // diag(act'(a_t)) * W_hh
            const Matrix<T>& Whh = w.img("W_hh");
            const T* a = tr.pre.row(t - 1);
            const T* h = tr.h.row(t);
            for (std::size_t i = 0; i < H; ++i) {
                const T d = activate_grad(a[i], h[i], tr.activation);
                for (std::size_t j = 0; j < H; ++j) J(i, j) = d * Whh(i, j);
            }
            break;
        }
        case CellKind::gru: {
            // s_t = (1-z).h + z.s_prev with z, r, h all functions of s_prev:
            //   dz = diag(z(1-z)) Whz
            //   dr = diag(r(1-r)) Whr
            //   dh = diag(1-h^2) Whh (diag(r) + diag(s_prev) dr)
            //   J  = diag(z) + diag(s_prev - h) dz + diag(1-z) dh
            const Matrix<T>&Whz = w.img("W_hz"), &Whr = w.img("W_hr"), &Whh = w.img("W_hh");
            const T* sp = tr.h.row(t - 1);
            const T* z = tr.z.row(t - 1);
            const T* r = tr.r.row(t - 1);
            const T* hc = tr.hcand.row(t - 1);
            Matrix<T> inner(H, H); // diag(r) + diag(s_prev) dr
            for (std::size_t i = 0; i < H; ++i) {
                const T dri = r[i] * (T(1) - r[i]);
                for (std::size_t j = 0; j < H; ++j) inner(i, j) = sp[i] * dri * Whr(i, j);
                inner(i, i) += r[i];
            }
            const Matrix<T> dh_inner = matmul(Whh, inner);
            for (std::size_t i = 0; i < H; ++i) {
                const T dzi = z[i] * (T(1) - z[i]);
                const T dhi = T(1) - hc[i] * hc[i];
                for (std::size_t j = 0; j < H; ++j)
                    J(i, j) = (sp[i] - hc[i]) * dzi * Whz(i, j) +
                              (T(1) - z[i]) * dhi * dh_inner(i, j);
                J(i, i) += z[i];
            }
            break;
        }
        case CellKind::lstm: {
            // h_t = o.tanh(c_t), c_t = f.c_prev + i.g; i, f, o, g depend on
            // h_prev through their gate affines.
            const Matrix<T>&Whi = w.img("W_hi"), &Whf = w.img("W_hf"), &Whg = w.img("W_hg"),
                           &Who = w.img("W_ho");
            const T* cp = tr.c.row(t - 1);
            const T* ct = tr.c.row(t);
            const T* gi = tr.gi.row(t - 1);
            const T* gf = tr.gf.row(t - 1);
            const T* gg = tr.gg.row(t - 1);
            const T* go = tr.go.row(t - 1);
            for (std::size_t i = 0; i < H; ++i) {
                const T tc = std::tanh(ct[i]);
                const T dci = go[i] * (T(1) - tc * tc);
                const T di = gi[i] * (T(1) - gi[i]);
                const T df = gf[i] * (T(1) - gf[i]);
                const T dg = T(1) - gg[i] * gg[i];
                const T do_ = go[i] * (T(1) - go[i]);
                for (std::size_t j = 0; j < H; ++j) {
                    const T dc = cp[i] * df * Whf(i, j) + gg[i] * di * Whi(i, j) +
                                 gi[i] * dg * Whg(i, j);
                    J(i, j) = tc * do_ * Who(i, j) + dci * dc;
                }
            }
            break;
        }
    }
    return J;
}

// Largest singular value via power iteration on J^T J; well defined for
// non-symmetric Jacobians and an upper bound on every eigenvalue magnitude.
template <typename T>
double spectral_radius(const Matrix<T>& J, std::size_t iters, Rng& rng) {
    if (J.rows() != J.cols())
        throw std::invalid_argument("spectral_radius: matrix must be square, got " +
                                    detail::shape_str(J));
    const std::size_t n = J.rows();
    if (n == 0) return 0.0;

    std::vector<double> v(n), u(n), w(n);
    for (auto& x : v) x = rng.normal();
    double lambda = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
        // u = J v ; w = J^T u
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0;
            const T* row = J.row(i);
            for (std::size_t j = 0; j < n; ++j) acc += double(row[j]) * v[j];
            u[i] = acc;
        }
        std::fill(w.begin(), w.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double ui = u[i];
            const T* row = J.row(i);
            for (std::size_t j = 0; j < n; ++j) w[j] += double(row[j]) * ui;
        }
        double norm = 0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0; // J^T J annihilated v; J is singular on it
        const double prev = lambda;
        double vs = 0, vv = 0;
        for (std::size_t i = 0; i < n; ++i) {
            vs += v[i] * w[i];
            vv += v[i] * v[i];
        }
        lambda = vs / vv; // Rayleigh quotient for J^T J
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
        if (it > 0 && std::abs(lambda - prev) <= 1e-13 * std::abs(lambda)) break;
    }
    return std::sqrt(std::max(lambda, 0.0));
}

// Per-step spectral radius and hidden-norm trace for one quantizer choice.
struct DiagnosticsTrace {
    std::string quantizer; // label; "none" for the unquantized run
    std::vector<double> spectral_radius;
    std::vector<double> hidden_norm;
};

struct SweepConfig {
    CellConfig cell;               // sizes; kind defaults to vanilla relu
    std::size_t steps = 50;
    std::uint64_t seed = 1;
    bool resample_per_step = true; // fresh recurrent image every step
    std::size_t power_iters = 500;
    double input_scale = 1.0;      // 0 silences the input drive
};

inline SweepConfig default_sweep_config(std::uint64_t seed) {
    SweepConfig sc;
    sc.cell.kind = CellKind::vanilla;
    sc.cell.activation = Activation::relu;
    sc.cell.input_size = 64;
    sc.cell.hidden_size = 64;
    sc.cell.output_size = 2; // readout unused by the sweep
    sc.seed = seed;
    return sc;
}

// Runs the configured cell over a unit-Gaussian input sequence with the given
// quantizer on the recurrent weights, recording rho_t and ||h_t|| at every
// step. By default a fresh stochastic image is drawn per timestep, matching
// training-time behaviour; with resample_per_step off one image is held for
// the whole sequence.
template <typename T>
DiagnosticsTrace stability_trace(const SweepConfig& sc,
                                 const std::optional<QuantizerSpec>& quantizer,
                                 const std::string& label) {
    CellConfig cfg = sc.cell;
    cfg.scope.clear();
    if (quantizer) cfg.scope[Role::recurrent] = *quantizer;

    CellWeights<T> w = make_cell<T>(cfg);
    Rng master(sc.seed);
    Rng init_rng = master.stream(Rng::kInit);
    Rng data_rng = master.stream(Rng::kData);
    Rng quant_rng = master.stream(Rng::kQuantize);
    Rng power_rng = master.stream(Rng::kDiagnostics);
    init_weights(w, init_rng);

    // Nonnegative start state so the relu identity map holds it exactly.
    Matrix<T> state(cfg.hidden_size, 1);
    for (std::size_t i = 0; i < cfg.hidden_size; ++i) state(i, 0) = T(std::abs(data_rng.normal()));
    Matrix<T> cell_state(cfg.hidden_size, 1);

    Matrix<T> x(1, cfg.input_size);
    DiagnosticsTrace out;
    out.quantizer = label;
    out.spectral_radius.reserve(sc.steps);
    out.hidden_norm.reserve(sc.steps);

    w.refresh_all(quant_rng);
    for (std::size_t t = 0; t < sc.steps; ++t) {
        if (sc.resample_per_step && t > 0) w.refresh_all(quant_rng);
        for (std::size_t j = 0; j < cfg.input_size; ++j)
            x(0, j) = T(sc.input_scale * data_rng.normal());
        StateTrace<T> tr = cell_forward(w, x, state, &cell_state);
        const Matrix<T> J = step_jacobian(w, tr, 1);
        out.spectral_radius.push_back(spectral_radius(J, sc.power_iters, power_rng));
        for (std::size_t i = 0; i < cfg.hidden_size; ++i) {
            state(i, 0) = tr.h(1, i);
            if (tr.kind == CellKind::lstm) cell_state(i, 0) = tr.c(1, i);
        }
        out.hidden_norm.push_back(l2_norm(state));
    }
    return out;
}

template <typename T>
std::vector<DiagnosticsTrace> stability_sweep(
    const SweepConfig& sc,
    const std::vector<std::pair<std::string, std::optional<QuantizerSpec>>>& quantizers) {
    std::vector<DiagnosticsTrace> out;
    out.reserve(quantizers.size());
    for (const auto& [label, spec] : quantizers)
        out.push_back(stability_trace<T>(sc, spec, label));
    return out;
}

// step,quantizer,spectral_radius,hidden_norm
inline void write_stability_csv(std::ostream& os, const std::vector<DiagnosticsTrace>& traces) {
    os << "step,quantizer,spectral_radius,hidden_norm\n";
    for (const auto& tr : traces)
        for (std::size_t t = 0; t < tr.spectral_radius.size(); ++t) {
            char line[160];
            std::snprintf(line, sizeof line, "%zu,%s,%.9g,%.9g\n", t + 1,
                          tr.quantizer.c_str(), tr.spectral_radius[t], tr.hidden_norm[t]);
            os << line;
        }
}

} // namespace qrnn
