// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-wise asymmetric integer quantization of weight matrices.
//
//   code  = clamp(round(w / s) + z, 0, q_max)
//   w_hat = s * (code - z)
//
// `round` is half-away-from-zero. One (s, z) pair covers `group_size`
// consecutive columns of a row. In paper range mode q_max = 2^(n-1) - 1; in
// full range mode q_max = 2^n - 1.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "sqft/tensor.hpp"

namespace sqft {

enum class RangeMode { paper, full };

RangeMode parse_range_mode(std::string_view name);
std::string_view to_string(RangeMode m);

int q_max_for(int bits, RangeMode mode);

struct QuantParams {
    int bits = 4;
    RangeMode range_mode = RangeMode::paper;
    int q_max = 7;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = 0;  ///< columns per group; equals cols for whole-row groups
    std::vector<double> scales;  ///< rows * groups_per_row(), row-major
    std::vector<std::int32_t> zeros;

    std::size_t groups_per_row() const noexcept { return group_size == 0 ? 0 : cols / group_size; }
    std::size_t group_index(std::size_t r, std::size_t c) const noexcept {
        return r * groups_per_row() + c / group_size;
    }
    double scale_at(std::size_t r, std::size_t c) const noexcept { return scales[group_index(r, c)]; }
    std::int32_t zero_at(std::size_t r, std::size_t c) const noexcept { return zeros[group_index(r, c)]; }

    /// Throws ConfigError/ShapeError if the fields are inconsistent.
    void validate() const;

    bool operator==(const QuantParams&) const = default;
};

struct QuantizedTensor {
    std::vector<std::uint8_t> codes;  ///< row-major, each in [0, q_max]
    QuantParams params;

    std::size_t rows() const noexcept { return params.rows; }
    std::size_t cols() const noexcept { return params.cols; }

    bool operator==(const QuantizedTensor&) const = default;
};

/// Per (row, group) range calibration. The group range is widened to include
/// zero, so z always lands in [0, q_max] and real 0 is exactly representable.
/// `group_size == 0` selects whole-row groups. Scales are rounded to the nearest
/// float32 so that checkpointed parameters dequantize identically.
QuantParams calibrate_params(const Matrix& w, int bits, std::size_t group_size = 0,
                             RangeMode range_mode = RangeMode::paper);

/// Round-to-nearest with fixed parameters. Also the re-quantization step of a
/// quantization-aware merge, where the parameters come from the base weight.
QuantizedTensor quantize_rtn(const Matrix& w, const QuantParams& p);

Matrix dequantize(const QuantizedTensor& q);

/// The code a single value maps to under (scale, zero, q_max).
std::uint8_t quantize_value(double w, double scale, std::int32_t zero, int q_max) noexcept;

/// frobenius_sq((w - w_hat) * X^T) where the rows of `calib_x` are samples.
double recon_error(const Matrix& w, const Matrix& w_hat, const Matrix& calib_x);

struct GptqResult {
    QuantizedTensor quantized;
    double recon_error = 0.0;
    double rtn_recon_error = 0.0;
    bool used_error_feedback = true;  ///< false when plain RTN reconstructed better
};

/// Column-by-column quantization with error feedback through the damped
/// inverse Hessian H = X^T X + lambda I, lambda = 0.01 * mean(diag H).
/// Entries that are exactly zero in `w` stay at the zero point, so a pruned
/// pattern survives quantization. Parameters are calibrated once on `w`.
/// If the result reconstructs the calibration outputs worse than RTN with the
/// same parameters, the RTN codes are returned instead.
GptqResult quantize_gptq_lite(const Matrix& w, const Matrix& calib_x, int bits,
                              std::size_t group_size = 0, RangeMode range_mode = RangeMode::paper);

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
Matrix spd_inverse(const Matrix& h);

/// Upper triangular U with U^T U == a, for symmetric positive definite `a`.
Matrix cholesky_upper(const Matrix& a);

}  // namespace sqft
