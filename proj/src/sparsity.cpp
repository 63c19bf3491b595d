// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

SparsityLevel::SparsityLevel(double s) : value_(s) {
    if (!(s >= 0.0 && s < 1.0)) {
        throw ConfigError(fmt::format("sparsity level must be in [0, 1), got {}", s));
    }
}

SparsityMask::SparsityMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits)
    : rows_(rows), cols_(cols), bits_(std::move(bits)) {
    if (bits_.size() != rows * cols) {
        throw ShapeError(fmt::format("mask {}x{} needs {} bits, got {}", rows, cols, rows * cols,
                                     bits_.size()));
    }
    for (auto& b : bits_) {
        if (b > 1) {
            throw DataError("mask bits must be 0 or 1");
        }
    }
}

SparsityMask SparsityMask::all_ones(std::size_t rows, std::size_t cols) {
    return SparsityMask(rows, cols, std::vector<std::uint8_t>(rows * cols, 1));
}

SparsityMask SparsityMask::all_zeros(std::size_t rows, std::size_t cols) {
    return SparsityMask(rows, cols, std::vector<std::uint8_t>(rows * cols, 0));
}

SparsityMask SparsityMask::from_nonzeros(const Matrix& w) {
    std::vector<std::uint8_t> bits(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        bits[i] = w.data()[i] != 0.0 ? 1 : 0;
    }
    return SparsityMask(w.rows(), w.cols(), std::move(bits));
}

std::size_t SparsityMask::kept_count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

double SparsityMask::density() const noexcept {
    if (bits_.empty()) {
        return 1.0;
    }
    return static_cast<double>(kept_count()) / static_cast<double>(bits_.size());
}

Matrix SparsityMask::as_matrix() const {
    Matrix m(rows_, cols_);
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        m.data()[i] = bits_[i] ? 1.0 : 0.0;
    }
    return m;
}

MaskGroup parse_mask_group(std::string_view name) {
    if (name == "row" || name == "per_row") return MaskGroup::per_row;
    if (name == "matrix" || name == "per_matrix") return MaskGroup::per_matrix;
    throw ConfigError(fmt::format("unknown mask group '{}' (expected row or matrix)", name));
}

ScoreKind parse_score_kind(std::string_view name) {
    if (name == "wanda") return ScoreKind::wanda;
    if (name == "magnitude") return ScoreKind::magnitude;
    throw ConfigError(fmt::format("unknown score '{}' (expected wanda or magnitude)", name));
}

std::string_view to_string(MaskGroup g) {
    return g == MaskGroup::per_row ? "row" : "matrix";
}

std::string_view to_string(ScoreKind k) {
    return k == ScoreKind::wanda ? "wanda" : "magnitude";
}

ScoreMatrix score_magnitude(const Matrix& w) {
    Matrix s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) {
        s.data()[i] = std::abs(w.data()[i]);
    }
    check_finite(s, "score_magnitude");
    return {std::move(s)};
}

ScoreMatrix score_wanda(const Matrix& w, const Matrix& calib_x) {
    if (calib_x.cols() != w.cols()) {
        throw ShapeError(fmt::format("score_wanda: calibration has {} features, weight has {} inputs",
                                     calib_x.cols(), w.cols()));
    }
    const std::vector<double> norms = col_l2_norms(calib_x);
    Matrix s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            s(i, j) = std::abs(w(i, j)) * norms[j];
        }
    }
    check_finite(s, "score_wanda");
    return {std::move(s)};
}

namespace {

std::size_t prune_count(double s, std::size_t group_size) {
    // Rounding up keeps measured sparsity at or above s. The epsilon absorbs
    // representation error in products like 0.3 * 10.
    return static_cast<std::size_t>(std::ceil(s * static_cast<double>(group_size) - 1e-9));
}

void prune_group(std::span<const double> scores, std::span<std::uint8_t> bits,
                 std::size_t count) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    for (std::size_t k = 0; k < count; ++k) {
        bits[order[k]] = 0;
    }
}

}  // namespace

SparsityMask build_mask(const ScoreMatrix& scores, SparsityLevel level, MaskGroup group) {
    const Matrix& s = scores.values;
    check_finite(s, "build_mask scores");
    std::vector<std::uint8_t> bits(s.size(), 1);
    if (group == MaskGroup::per_row) {
        const std::size_t count = prune_count(level.value(), s.cols());
        for (std::size_t r = 0; r < s.rows(); ++r) {
            prune_group(s.row(r), std::span<std::uint8_t>(bits).subspan(r * s.cols(), s.cols()),
                        count);
        }
    } else {
        prune_group(s.data(), bits, prune_count(level.value(), s.size()));
    }
    return SparsityMask(s.rows(), s.cols(), std::move(bits));
}

Matrix apply_mask(const Matrix& w, const SparsityMask& m) {
    if (w.rows() != m.rows() || w.cols() != m.cols()) {
        throw ShapeError(fmt::format("apply_mask: weight {}x{} vs mask {}x{}", w.rows(), w.cols(),
                                     m.rows(), m.cols()));
    }
    Matrix out(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) {
        out.data()[i] = m.bits()[i] ? w.data()[i] : 0.0;
    }
    return out;
}

double measure_sparsity(const Matrix& w) {
    if (w.empty()) {
        return 0.0;
    }
    const auto zeros = std::count(w.data().begin(), w.data().end(), 0.0);
    return static_cast<double>(zeros) / static_cast<double>(w.size());
}

}  // namespace sqft
