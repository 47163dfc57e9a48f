#pragma once

// Independent reference implementations used only by the tests. These stay
// deliberately naive and separate from the library code paths they check.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "qrnn/cells.hpp"
#include "qrnn/matrix.hpp"

namespace oracle {

using qrnn::Matrix;

// Plain i-j-k triple loop (different accumulation order than the library).
template <typename T>
Matrix<T> naive_matmul(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line unrolled vanilla RNN with softmax readout; returns the
// per-step states and probabilities.
template <typename T>
void unrolled_vanilla(const Matrix<T>& Wxh, const Matrix<T>& Whh, const Matrix<T>& bh,
                      const Matrix<T>& Whx, const Matrix<T>& bx, const Matrix<T>& x,
                      const std::vector<double>& h0, bool use_relu,
                      std::vector<std::vector<double>>& states,
                      std::vector<std::vector<double>>& probs) {
    const std::size_t H = Whh.rows(), V = Whx.rows(), steps = x.rows();
    std::vector<double> h = h0;
    states.clear();
    probs.clear();
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> a(H, 0.0);
        for (std::size_t i = 0; i < H; ++i) {
            a[i] = double(bh(i, 0));
            for (std::size_t j = 0; j < x.cols(); ++j) a[i] += double(Wxh(i, j)) * double(x(t, j));
            for (std::size_t j = 0; j < H; ++j) a[i] += double(Whh(i, j)) * h[j];
        }
        for (std::size_t i = 0; i < H; ++i)
            h[i] = use_relu ? (a[i] > 0 ? a[i] : 0.0) : std::tanh(a[i]);
        states.push_back(h);
        std::vector<double> logits(V, 0.0);
        for (std::size_t i = 0; i < V; ++i) {
            logits[i] = double(bx(i, 0));
            for (std::size_t j = 0; j < H; ++j) logits[i] += double(Whx(i, j)) * h[j];
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0;
        for (auto& v : logits) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (auto& v : logits) v /= sum;
        probs.push_back(logits);
    }
}

// Unrolled GRU (update/reset gates, tanh candidate).
template <typename T>
std::vector<std::vector<double>> unrolled_gru(
    const Matrix<T>& Wxz, const Matrix<T>& Wxr, const Matrix<T>& Wxh, const Matrix<T>& Whz,
    const Matrix<T>& Whr, const Matrix<T>& Whh, const Matrix<T>& bz, const Matrix<T>& br,
    const Matrix<T>& bh, const Matrix<T>& x, const std::vector<double>& s0) {
    const std::size_t H = Whh.rows(), steps = x.rows();
    std::vector<double> s = s0;
    std::vector<std::vector<double>> states;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> z(H), r(H), h(H);
        for (std::size_t i = 0; i < H; ++i) {
            double az = double(bz(i, 0)), ar = double(br(i, 0));
            for (std::size_t j = 0; j < x.cols(); ++j) {
                az += double(Wxz(i, j)) * double(x(t, j));
                ar += double(Wxr(i, j)) * double(x(t, j));
            }
            for (std::size_t j = 0; j < H; ++j) {
                az += double(Whz(i, j)) * s[j];
                ar += double(Whr(i, j)) * s[j];
            }
            z[i] = sigmoid(az);
            r[i] = sigmoid(ar);
        }
        for (std::size_t i = 0; i < H; ++i) {
            double ah = double(bh(i, 0));
            for (std::size_t j = 0; j < x.cols(); ++j) ah += double(Wxh(i, j)) * double(x(t, j));
            for (std::size_t j = 0; j < H; ++j) ah += double(Whh(i, j)) * (s[j] * r[j]);
            h[i] = std::tanh(ah);
        }
        for (std::size_t i = 0; i < H; ++i) s[i] = (1.0 - z[i]) * h[i] + z[i] * s[i];
        states.push_back(s);
    }
    return states;
}

// Unrolled LSTM (no peepholes).
template <typename T>
void unrolled_lstm(const Matrix<T>& Wxi, const Matrix<T>& Wxf, const Matrix<T>& Wxg,
                   const Matrix<T>& Wxo, const Matrix<T>& Whi, const Matrix<T>& Whf,
                   const Matrix<T>& Whg, const Matrix<T>& Who, const Matrix<T>& bi,
                   const Matrix<T>& bf, const Matrix<T>& bg, const Matrix<T>& bo,
                   const Matrix<T>& x, const std::vector<double>& h0,
                   const std::vector<double>& c0, std::vector<std::vector<double>>& hs,
                   std::vector<std::vector<double>>& cs) {
    const std::size_t H = Whi.rows(), steps = x.rows();
    std::vector<double> h = h0, c = c0;
    hs.clear();
    cs.clear();
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> nh(H), nc(H);
        for (std::size_t i = 0; i < H; ++i) {
            double ai = double(bi(i, 0)), af = double(bf(i, 0)), ag = double(bg(i, 0)),
                   ao = double(bo(i, 0));
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const double xv = double(x(t, j));
                ai += double(Wxi(i, j)) * xv;
                af += double(Wxf(i, j)) * xv;
                ag += double(Wxg(i, j)) * xv;
                ao += double(Wxo(i, j)) * xv;
            }
            for (std::size_t j = 0; j < H; ++j) {
                ai += double(Whi(i, j)) * h[j];
                af += double(Whf(i, j)) * h[j];
                ag += double(Whg(i, j)) * h[j];
                ao += double(Who(i, j)) * h[j];
            }
            const double gi = sigmoid(ai), gf = sigmoid(af), gg = std::tanh(ag),
                         go = sigmoid(ao);
            nc[i] = gf * c[i] + gi * gg;
            nh[i] = go * std::tanh(nc[i]);
        }
        h = nh;
        c = nc;
        hs.push_back(h);
        cs.push_back(c);
    }
}

// Central finite difference of a scalar function of one weight entry.
inline double central_difference(const std::function<double(double)>& f, double x0,
                                 double step) {
    return (f(x0 + step) - f(x0 - step)) / (2.0 * step);
}

// All eigenvalues of a symmetric matrix by the cyclic Jacobi method.
inline std::vector<double> jacobi_eigenvalues(Matrix<double> a, int sweeps = 64) {
    const std::size_t n = a.rows();
    for (int s = 0; s < sweeps; ++s) {
        double off = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
    return eig;
}

// Largest singular value from a dense symmetric decomposition of J^T J.
template <typename T>
double dense_largest_singular_value(const Matrix<T>& J) {
    const std::size_t n = J.rows();
    Matrix<double> jtj(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < n; ++k) acc += double(J(k, i)) * double(J(k, j));
            jtj(i, j) = acc;
        }
    double mx = 0;
    for (double e : jacobi_eigenvalues(jtj)) mx = std::max(mx, e);
    return std::sqrt(mx);
}

} // namespace oracle
