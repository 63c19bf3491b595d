// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Importance scoring and unstructured mask construction.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "sqft/tensor.hpp"

namespace sqft {

/// Nonnegative importance per weight entry; same shape as the scored weight.
struct ScoreMatrix {
    Matrix values;
};

/// Target fraction of pruned entries, 0 <= s < 1.
class SparsityLevel {
public:
    explicit SparsityLevel(double s);
    double value() const noexcept { return value_; }

private:
    double value_;
};

/// Binary keep/prune pattern over a weight matrix (1 = kept).
class SparsityMask {
public:
    SparsityMask() = default;
    SparsityMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits);

    static SparsityMask all_ones(std::size_t rows, std::size_t cols);
    static SparsityMask all_zeros(std::size_t rows, std::size_t cols);
    /// Pattern of the nonzero entries of `w`.
    static SparsityMask from_nonzeros(const Matrix& w);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool kept(std::size_t r, std::size_t c) const noexcept { return bits_[r * cols_ + c] != 0; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    std::size_t kept_count() const noexcept;
    double density() const noexcept;
    double zero_fraction() const noexcept { return 1.0 - density(); }

    /// 0/1 matrix, for use with hadamard().
    Matrix as_matrix() const;

    bool operator==(const SparsityMask&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

enum class MaskGroup { per_row, per_matrix };
enum class ScoreKind { wanda, magnitude };

MaskGroup parse_mask_group(std::string_view name);
ScoreKind parse_score_kind(std::string_view name);
std::string_view to_string(MaskGroup g);
std::string_view to_string(ScoreKind k);

/// |W|
ScoreMatrix score_magnitude(const Matrix& w);

/// |W_ij| * ||X_:,j||_2. Calibration samples are the rows of `calib_x`, so
/// column j of the calibration aligns with input feature j of W.
ScoreMatrix score_wanda(const Matrix& w, const Matrix& calib_x);

/// Prunes ceil(s * group_size) lowest-scoring entries in each group, so the
/// pruned fraction of every group is at least s. Ties go to the lowest
/// row-major index first.
SparsityMask build_mask(const ScoreMatrix& scores, SparsityLevel level,
                        MaskGroup group = MaskGroup::per_row);

/// W ⊙ M
Matrix apply_mask(const Matrix& w, const SparsityMask& m);

/// Fraction of entries exactly equal to zero.
double measure_sparsity(const Matrix& w);

}  // namespace sqft
