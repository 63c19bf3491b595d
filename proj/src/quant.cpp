// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

RangeMode parse_range_mode(std::string_view name) {
    if (name == "paper") return RangeMode::paper;
    if (name == "full") return RangeMode::full;
    throw ConfigError(fmt::format("unknown range mode '{}' (expected paper or full)", name));
}

std::string_view to_string(RangeMode m) {
    return m == RangeMode::paper ? "paper" : "full";
}

int q_max_for(int bits, RangeMode mode) {
    if (bits < 2 || bits > 8) {
        throw ConfigError(fmt::format("bit width must be in [2, 8], got {}", bits));
    }
    return mode == RangeMode::paper ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

void QuantParams::validate() const {
    if (q_max != q_max_for(bits, range_mode)) {
        throw ConfigError(fmt::format("q_max {} does not match {}-bit {} range", q_max, bits,
                                      to_string(range_mode)));
    }
    if (group_size == 0 || cols % group_size != 0) {
        throw ShapeError(fmt::format("group size {} does not divide {} columns", group_size, cols));
    }
    const std::size_t groups = rows * groups_per_row();
    if (scales.size() != groups || zeros.size() != groups) {
        throw ShapeError(fmt::format("expected {} scale/zero pairs, got {}/{}", groups,
                                     scales.size(), zeros.size()));
    }
    for (std::size_t g = 0; g < groups; ++g) {
        if (!(scales[g] > 0.0) || !std::isfinite(scales[g])) {
            throw DataError(fmt::format("scale {} of group {} is not positive", scales[g], g));
        }
        if (zeros[g] < 0 || zeros[g] > q_max) {
            throw DataError(fmt::format("zero point {} of group {} outside [0, {}]", zeros[g], g,
                                        q_max));
        }
    }
}

QuantParams calibrate_params(const Matrix& w, int bits, std::size_t group_size,
                             RangeMode range_mode) {
    check_finite(w, "calibrate_params input");
    QuantParams p;
    p.bits = bits;
    p.range_mode = range_mode;
    p.q_max = q_max_for(bits, range_mode);
    p.rows = w.rows();
    p.cols = w.cols();
    p.group_size = group_size == 0 ? w.cols() : group_size;
    if (p.group_size == 0 || w.cols() % p.group_size != 0) {
        throw ShapeError(fmt::format("group size {} does not divide {} columns", group_size,
                                     w.cols()));
    }
    const std::size_t groups = p.groups_per_row();
    p.scales.resize(w.rows() * groups);
    p.zeros.resize(w.rows() * groups);
    const double qmax = static_cast<double>(p.q_max);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t g = 0; g < groups; ++g) {
            auto values = w.row(r).subspan(g * p.group_size, p.group_size);
            const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
            const double lo = std::min(*lo_it, 0.0);
            const double hi = std::max(*hi_it, 0.0);
            double scale = 1.0;
            double zero = 0.0;
            if (hi > lo) {
                scale = static_cast<double>(static_cast<float>((hi - lo) / qmax));
                if (!(scale > 0.0)) {
                    scale = static_cast<double>(std::numeric_limits<float>::denorm_min());
                }
                zero = std::round(-lo / scale);
            } else {
                zero = std::round(-lo);
            }
            p.scales[r * groups + g] = scale;
            p.zeros[r * groups + g] = static_cast<std::int32_t>(std::clamp(zero, 0.0, qmax));
        }
    }
    return p;
}

std::uint8_t quantize_value(double w, double scale, std::int32_t zero, int q_max) noexcept {
    const double v = std::round(w / scale) + static_cast<double>(zero);
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, static_cast<double>(q_max)));
}

QuantizedTensor quantize_rtn(const Matrix& w, const QuantParams& p) {
    if (w.rows() != p.rows || w.cols() != p.cols) {
        throw ShapeError(fmt::format("quantize: weight {}x{} vs params for {}x{}", w.rows(),
                                     w.cols(), p.rows, p.cols));
    }
    p.validate();
    check_finite(w, "quantize input");
    QuantizedTensor q{std::vector<std::uint8_t>(w.size()), p};
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            const std::size_t g = p.group_index(r, c);
            q.codes[r * w.cols() + c] = quantize_value(w(r, c), p.scales[g], p.zeros[g], p.q_max);
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    const QuantParams& p = q.params;
    if (q.codes.size() != p.rows * p.cols) {
        throw ShapeError("dequantize: code count does not match shape");
    }
    Matrix out(p.rows, p.cols);
    for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t c = 0; c < p.cols; ++c) {
            const std::size_t g = p.group_index(r, c);
            const std::int32_t code = q.codes[r * p.cols + c];
            out(r, c) = p.scales[g] * static_cast<double>(code - p.zeros[g]);
        }
    }
    return out;
}

double recon_error(const Matrix& w, const Matrix& w_hat, const Matrix& calib_x) {
    if (!w.same_shape(w_hat)) {
        throw ShapeError("recon_error: weight and reconstruction differ in shape");
    }
    if (calib_x.cols() != w.cols()) {
        throw ShapeError(fmt::format("recon_error: calibration has {} features, weight has {} inputs",
                                     calib_x.cols(), w.cols()));
    }
    return frobenius_sq(matmul(subtract(w, w_hat), transpose(calib_x)));
}

Matrix cholesky_upper(const Matrix& a) {
    const std::size_t n = a.rows();
    if (a.cols() != n) {
        throw ShapeError("cholesky: matrix is not square");
    }
    // Lower factor first (a = L L^T); U = L^T.
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = a(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                sum -= l(i, k) * l(j, k);
            }
            if (i == j) {
                if (!(sum > 0.0)) {
                    throw DataError("cholesky: matrix is not positive definite");
                }
                l(i, i) = std::sqrt(sum);
            } else {
                l(i, j) = sum / l(j, j);
            }
        }
    }
    return transpose(l);
}

Matrix spd_inverse(const Matrix& h) {
    const std::size_t n = h.rows();
    const Matrix u = cholesky_upper(h);  // h = U^T U
    // Solve U^T U x = e_k column by column.
    Matrix inv(n, n);
    std::vector<double> y(n);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            double sum = i == k ? 1.0 : 0.0;
            for (std::size_t j = 0; j < i; ++j) {
                sum -= u(j, i) * y[j];
            }
            y[i] = sum / u(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double sum = y[ii];
            for (std::size_t j = ii + 1; j < n; ++j) {
                sum -= u(ii, j) * inv(j, k);
            }
            inv(ii, k) = sum / u(ii, ii);
        }
    }
    // Symmetrize away round-off.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = m;
            inv(j, i) = m;
        }
    }
    return inv;
}

GptqResult quantize_gptq_lite(const Matrix& w, const Matrix& calib_x, int bits,
                              std::size_t group_size, RangeMode range_mode) {
    if (calib_x.cols() != w.cols()) {
        throw ShapeError(fmt::format("gptq: calibration has {} features, weight has {} inputs",
                                     calib_x.cols(), w.cols()));
    }
    const QuantParams p = calibrate_params(w, bits, group_size, range_mode);
    const std::size_t n = w.cols();

    Matrix h = matmul(transpose(calib_x), calib_x);
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_diag += h(i, i);
    }
    mean_diag /= static_cast<double>(n);
    const double damp = mean_diag > 0.0 ? 0.01 * mean_diag : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        h(i, i) += damp;
    }
    const Matrix u = cholesky_upper(spd_inverse(h));

    Matrix work = w;
    QuantizedTensor q{std::vector<std::uint8_t>(w.size()), p};
    for (std::size_t j = 0; j < n; ++j) {
        const double pivot = u(j, j);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            const std::size_t g = p.group_index(r, j);
            const double s = p.scales[g];
            const std::int32_t z = p.zeros[g];
            const double v = work(r, j);
            std::uint8_t code = static_cast<std::uint8_t>(z);
            if (w(r, j) != 0.0) {
                code = quantize_value(v, s, z, p.q_max);
            }
            q.codes[r * n + j] = code;
            const double err = (v - s * static_cast<double>(code - z)) / pivot;
            for (std::size_t k = j + 1; k < n; ++k) {
                work(r, k) -= err * u(j, k);
            }
        }
    }

    GptqResult result;
    result.recon_error = recon_error(w, dequantize(q), calib_x);
    QuantizedTensor rtn = quantize_rtn(w, p);
    result.rtn_recon_error = recon_error(w, dequantize(rtn), calib_x);
    if (result.recon_error > result.rtn_recon_error) {
        result.quantized = std::move(rtn);
        result.recon_error = result.rtn_recon_error;
        result.used_error_feedback = false;
    } else {
        result.quantized = std::move(q);
    }
    return result;
}

}  // namespace sqft
