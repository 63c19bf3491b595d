// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("matrix {}x{} needs {} values, got {}", rows, cols,
                                     rows * cols, data_.size()));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("ragged row list");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

void check_finite(const Matrix& m, std::string_view what) {
    for (double v : m.data()) {
        if (!std::isfinite(v)) {
            throw DataError(fmt::format("non-finite value in {}", what));
        }
    }
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{}: shape {}x{} vs {}x{}", op, a.rows(), a.cols(),
                                     b.rows(), b.cols()));
    }
}

template <typename F>
Matrix elementwise(const Matrix& a, const Matrix& b, std::string_view op, F f) {
    require_same_shape(a, b, op);
    Matrix out(a.rows(), a.cols());
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = f(x[i], y[i]);
    }
    check_finite(out, op);
    return out;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(),
                                     b.cols()));
    }
    const std::size_t n = a.rows();
    const std::size_t k = a.cols();
    const std::size_t m = b.cols();
    Matrix out(n, m);
    // i-k-j order accumulates each output entry over k in ascending order,
    // the same sequence of roundings as the textbook triple loop.
    for (std::size_t i = 0; i < n; ++i) {
        double* dst = &out(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            const double* src = &b.data()[p * m];
            for (std::size_t j = 0; j < m; ++j) {
                dst[j] += av * src[j];
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return elementwise(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix add(const Matrix& a, const Matrix& b) {
    return elementwise(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    return elementwise(a, b, "subtract", [](double x, double y) { return x - y; });
}

Matrix scaled(const Matrix& a, double factor) {
    Matrix out = a;
    for (double& v : out.data()) {
        v *= factor;
    }
    check_finite(out, "scaled");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

std::vector<double> col_l2_norms(const Matrix& x) {
    if (x.empty()) {
        throw ShapeError("col_l2_norms: empty matrix");
    }
    std::vector<double> sums(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            sums[j] += x(i, j) * x(i, j);
        }
    }
    for (double& s : sums) {
        s = std::sqrt(s);
        if (!std::isfinite(s)) {
            throw DataError("non-finite value in col_l2_norms");
        }
    }
    return sums;
}

double frobenius_sq(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v * v;
    }
    if (!std::isfinite(acc)) {
        throw DataError("non-finite value in frobenius_sq");
    }
    return acc;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

Matrix gather_cols(const Matrix& m, std::span<const std::size_t> indices) {
    Matrix out(m.rows(), indices.size());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < indices.size(); ++c) {
            if (indices[c] >= m.cols()) {
                throw ShapeError("gather_cols: index out of range");
            }
            out(r, c) = m(r, indices[c]);
        }
    }
    return out;
}

std::uint64_t Rng::next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() noexcept {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
    // Rejection on the top of the range removes modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) {
        v = next_u64();
    }
    return v % n;
}

Rng Rng::derive(std::uint64_t stream) const noexcept {
    Rng mixer(seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    return Rng(mixer.next_u64());
}

Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = stddev * rng.normal();
    }
    return m;
}

Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = rng.uniform(lo, hi);
    }
    return m;
}

}  // namespace sqft
