#pragma once

#include <cstddef>
#include <vector>

namespace pisa {

// Row-major dense matrix, the only storage type the library deals in.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{})
        : rows(r), cols(c), data(r * c, fill) {}

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const {
        return data[i * cols + j];
    }

    bool operator==(const Matrix&) const = default;
};

// Non-owning view of a row-major [rows][cols] array.
template <class T>
struct ConstView {
    const T* ptr = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    ConstView() = default;
    ConstView(const T* p, std::size_t r, std::size_t c)
        : ptr(p), rows(r), cols(c) {}
    ConstView(const Matrix<T>& m) : ptr(m.data.data()), rows(m.rows), cols(m.cols) {}

    const T* row(std::size_t i) const { return ptr + i * cols; }
    const T& operator()(std::size_t i, std::size_t j) const {
        return ptr[i * cols + j];
    }
};

// Dot product accumulated in double regardless of element type.
template <class T, class U>
inline double dot_d(const T* a, const U* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += double(a[i]) * double(b[i]);
    return s;
}

}  // namespace pisa
