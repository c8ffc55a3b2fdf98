#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "lmtc/errors.hpp"

namespace lmtc {

/// Dense row-major matrix. The scalar type is a template parameter so the
/// same code runs in 32-bit mode for training and 64-bit mode for gradient
/// checking.
template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> v;  // row-major, size rows*cols

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, T(0)) {}
    Matrix(int r, int c, T fill) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}
    Matrix(std::initializer_list<std::initializer_list<T>> init) {
        rows = static_cast<int>(init.size());
        cols = rows ? static_cast<int>(init.begin()->size()) : 0;
        v.reserve(static_cast<size_t>(rows) * cols);
        for (const auto& row : init) {
            if (static_cast<int>(row.size()) != cols)
                throw ShapeError("ragged initializer list");
            v.insert(v.end(), row.begin(), row.end());
        }
    }

    T& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    T at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    T* row_ptr(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const T* row_ptr(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return v.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        std::ostringstream os;
        os << rows << "x" << cols;
        return os.str();
    }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

namespace detail {

inline void throw_mm_shape(const std::string& a, const std::string& b) {
    throw ShapeError("matmul shape mismatch: " + a + " * " + b);
}

}  // namespace detail

/// C = A * B. Plain ikj loop: the inner axpy over contiguous rows of B
/// vectorizes well and is fast enough at these sizes (d <= 256, n <= 6144).
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows) detail::throw_mm_shape(a.shape_str(), b.shape_str());
    Matrix<T> c(a.rows, b.cols);
    const int m = a.rows, k = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        T* crow = c.row_ptr(i);
        const T* arow = a.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const T aip = arow[p];
            if (aip == T(0)) continue;
            const T* brow = b.row_ptr(p);
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

/// C += s * A * B (same kernel, accumulating). Used by backward rules.
template <typename T>
void matmul_acc(Matrix<T>& c, const Matrix<T>& a, const Matrix<T>& b, T s = T(1)) {
    if (a.cols != b.rows) detail::throw_mm_shape(a.shape_str(), b.shape_str());
    if (c.rows != a.rows || c.cols != b.cols)
        throw ShapeError("matmul_acc output shape mismatch: " + c.shape_str());
    const int m = a.rows, k = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        T* crow = c.row_ptr(i);
        const T* arow = a.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const T aip = s * arow[p];
            if (aip == T(0)) continue;
            const T* brow = b.row_ptr(p);
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

template <typename T>
Matrix<T> transposed(const Matrix<T>& a) {
    Matrix<T> t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b, T s = T(1)) {
    if (!a.same_shape(b))
        throw ShapeError("add shape mismatch: " + a.shape_str() + " + " + b.shape_str());
    for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += s * b.v[i];
}

}  // namespace lmtc
