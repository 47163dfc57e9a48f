#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "qrnn/matrix.hpp"

namespace qrnn {

enum class Activation : std::uint8_t { relu = 0, tanh = 1 };

inline const char* to_string(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

template <typename T>
T relu(T x) {
    return x > T(0) ? x : T(0);
}

template <typename T>
T logistic(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// clip((x+1)/2, 0, 1); the probability map used by stochastic binarization.
template <typename T>
T hard_sigmoid(T x) {
    return std::clamp((x + T(1)) / T(2), T(0), T(1));
}

template <typename T>
T activate(T x, Activation a) {
    return a == Activation::relu ? relu(x) : std::tanh(x);
}

// Derivative evaluated from preactivation x and output y = activate(x).
template <typename T>
T activate_grad(T x, T y, Activation a) {
    if (a == Activation::relu) return x > T(0) ? T(1) : T(0);
    return T(1) - y * y;
}

template <typename T>
Matrix<T> map(const Matrix<T>& m, T (*f)(T)) {
    Matrix<T> out = m;
    for (auto& v : out) v = f(v);
    return out;
}

// Row-wise softmax with max subtraction, so inputs of any finite magnitude
// stay in range.
template <typename T>
void softmax_rows_inplace(Matrix<T>& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        T* r = m.row(i);
        T mx = r[0];
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, r[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < m.cols(); ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (std::size_t j = 0; j < m.cols(); ++j) r[j] /= sum;
    }
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
    Matrix<T> out = m;
    softmax_rows_inplace(out);
    return out;
}

} // namespace qrnn
