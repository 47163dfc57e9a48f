#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace qrnn {

// Dense row-major matrix. Column vectors are n x 1. Instances are treated as
// immutable once an operation has produced them; mutation goes through the
// owning context (weight groups, gradient buffers).
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length does not match shape");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : rows) {
            if (r.size() != m.cols())
                throw std::invalid_argument("Matrix::from_rows: ragged rows");
            std::size_t j = 0;
            for (T v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    T operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    T* row(std::size_t i) { return data_.data() + i * cols_; }
    const T* row(std::size_t i) const { return data_.data() + i * cols_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<T> data_;
};

namespace detail {

template <typename T>
std::string shape_str(const Matrix<T>& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

} // namespace detail

// Standard product with a fixed i-k-j summation order so results are
// reproducible run to run.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: shape mismatch " + detail::shape_str(a) +
                                    " * " + detail::shape_str(b));
    Matrix<T> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* arow = a.row(i);
        T* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = arow[k];
            const T* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + detail::shape_str(a) + " vs " +
                                    detail::shape_str(b));
    Matrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("hadamard: shape mismatch " + detail::shape_str(a) + " vs " +
                                    detail::shape_str(b));
    Matrix<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

template <typename T>
void accumulate(Matrix<T>& into, const Matrix<T>& g, T factor = T(1)) {
    if (!into.same_shape(g))
        throw std::invalid_argument("accumulate: shape mismatch " + detail::shape_str(into) +
                                    " vs " + detail::shape_str(g));
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += factor * g[i];
}

template <typename T>
void scale_inplace(Matrix<T>& m, T factor) {
    for (auto& v : m) v *= factor;
}

template <typename T>
double l2_norm(const Matrix<T>& m) {
    double s = 0;
    for (T v : m) s += double(v) * double(v);
    return std::sqrt(s);
}

template <typename T>
double max_abs(const Matrix<T>& m) {
    double s = 0;
    for (T v : m) s = std::max(s, std::abs(double(v)));
    return s;
}

} // namespace qrnn
