// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and the deterministic random stream shared by
// every other module. Activations follow the column-sample convention:
// a batch of n inputs of width d is a d x n matrix and a layer computes Y = W * X.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace sqft {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);
    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 0.0); }
    static Matrix ones(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 1.0); }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    std::span<const double> row(std::size_t r) const noexcept {
        return std::span<const double>(data_).subspan(r * cols_, cols_);
    }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Throws DataError naming `what` if any entry is NaN or infinite.
void check_finite(const Matrix& m, std::string_view what);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, double factor);
Matrix transpose(const Matrix& a);

/// Euclidean norm of every column.
std::vector<double> col_l2_norms(const Matrix& x);

/// Sum of squared entries.
double frobenius_sq(const Matrix& a);

double max_abs_diff(const Matrix& a, const Matrix& b);

/// Columns `indices` of `m`, in order.
Matrix gather_cols(const Matrix& m, std::span<const std::size_t> indices);

/// SplitMix64 stream. Every draw is derived from integer arithmetic only, so a
/// seed reproduces the same sequence on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : seed_(seed), state_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller (no cached second variate).
    double normal() noexcept;
    /// Uniform integer in [0, n); n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;

    /// Independent child stream for a named purpose; a pure function of (seed, stream).
    Rng derive(std::uint64_t stream) const noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);
Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi);

template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace sqft
