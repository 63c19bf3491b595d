// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used only by the tests. They are written
// independently of the library, as plain loops over std::vector, so that a
// bug shared between the two is unlikely.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid naive_matmul(const Grid& a, const Grid& b) {
    const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
    Grid c(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a[i][t] * b[t][j];
            c[i][j] = acc;
        }
    return c;
}

/// |w_ij| * sqrt(sum over samples of x_sj^2); samples are rows of x.
inline Grid wanda(const Grid& w, const Grid& x) {
    Grid s = w;
    for (std::size_t j = 0; j < w[0].size(); ++j) {
        double sq = 0.0;
        for (const auto& row : x) sq += row[j] * row[j];
        const double norm = std::sqrt(sq);
        for (std::size_t i = 0; i < w.size(); ++i) s[i][j] = std::abs(w[i][j]) * norm;
    }
    return s;
}

/// Keep-mask: entry e is pruned when fewer than k entries of its group rank
/// strictly before it, ranking by (score, index).
inline std::vector<std::vector<int>> mask_per_row(const Grid& scores, double s) {
    std::vector<std::vector<int>> keep(scores.size());
    for (std::size_t r = 0; r < scores.size(); ++r) {
        const auto& row = scores[r];
        const std::size_t k = static_cast<std::size_t>(std::ceil(s * row.size() - 1e-9));
        keep[r].assign(row.size(), 1);
        for (std::size_t c = 0; c < row.size(); ++c) {
            std::size_t before = 0;
            for (std::size_t o = 0; o < row.size(); ++o) {
                if (row[o] < row[c] || (row[o] == row[c] && o < c)) ++before;
            }
            if (before < k) keep[r][c] = 0;
        }
    }
    return keep;
}

inline std::vector<std::vector<int>> mask_per_matrix(const Grid& scores, double s) {
    std::vector<std::pair<double, std::size_t>> all;
    const std::size_t cols = scores[0].size();
    for (std::size_t r = 0; r < scores.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) all.push_back({scores[r][c], r * cols + c});
    std::sort(all.begin(), all.end());
    const std::size_t k = static_cast<std::size_t>(std::ceil(s * all.size() - 1e-9));
    std::vector<std::vector<int>> keep(scores.size(), std::vector<int>(cols, 1));
    for (std::size_t i = 0; i < k; ++i) keep[all[i].second / cols][all[i].second % cols] = 0;
    return keep;
}

/// Affine quantizer for one value with given (s, z).
inline int quantize(double w, double s, int z, int q_max) {
    const double u = std::round(w / s) + z;
    return static_cast<int>(std::clamp(u, 0.0, static_cast<double>(q_max)));
}

inline double recon(const Grid& w, const Grid& w_hat, const Grid& x) {
    double total = 0.0;
    for (std::size_t s = 0; s < x.size(); ++s)
        for (std::size_t i = 0; i < w.size(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < w[i].size(); ++j) acc += (w[i][j] - w_hat[i][j]) * x[s][j];
            total += acc * acc;
        }
    return total;
}

/// Optimal-brain-quantizer form of GPTQ: keep the full inverse Hessian and
/// downdate it after every column instead of using a Cholesky factor. Exactly
/// zero weights stay at the zero point. Whole-row groups.
inline Grid gptq_full_inverse(const Grid& w, const Grid& x, const std::vector<double>& scale,
                              const std::vector<int>& zero, int q_max) {
    const std::size_t rows = w.size(), cols = w[0].size();
    Grid h(cols, std::vector<double>(cols, 0.0));
    for (const auto& s : x)
        for (std::size_t i = 0; i < cols; ++i)
            for (std::size_t j = 0; j < cols; ++j) h[i][j] += s[i] * s[j];
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < cols; ++i) mean_diag += h[i][i];
    mean_diag /= static_cast<double>(cols);
    const double damp = mean_diag > 0.0 ? 0.01 * mean_diag : 1.0;
    for (std::size_t i = 0; i < cols; ++i) h[i][i] += damp;

    // Gauss-Jordan inverse.
    Grid inv(cols, std::vector<double>(cols, 0.0));
    for (std::size_t i = 0; i < cols; ++i) inv[i][i] = 1.0;
    Grid a = h;
    for (std::size_t p = 0; p < cols; ++p) {
        std::size_t piv = p;
        for (std::size_t r = p + 1; r < cols; ++r)
            if (std::abs(a[r][p]) > std::abs(a[piv][p])) piv = r;
        std::swap(a[p], a[piv]);
        std::swap(inv[p], inv[piv]);
        const double d = a[p][p];
        for (std::size_t c = 0; c < cols; ++c) {
            a[p][c] /= d;
            inv[p][c] /= d;
        }
        for (std::size_t r = 0; r < cols; ++r) {
            if (r == p) continue;
            const double f = a[r][p];
            if (f == 0.0) continue;
            for (std::size_t c = 0; c < cols; ++c) {
                a[r][c] -= f * a[p][c];
                inv[r][c] -= f * inv[p][c];
            }
        }
    }

    Grid work = w;
    Grid out(rows, std::vector<double>(cols, 0.0));
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t r = 0; r < rows; ++r) {
            const int code = w[r][j] == 0.0 ? zero[r] : quantize(work[r][j], scale[r], zero[r], q_max);
            const double q = scale[r] * (code - zero[r]);
            out[r][j] = q;
            const double err = (work[r][j] - q) / inv[j][j];
            for (std::size_t k = j + 1; k < cols; ++k) work[r][k] -= err * inv[j][k];
        }
        // Remove column j from the inverse Hessian of the remaining columns.
        const double d = inv[j][j];
        Grid next = inv;
        for (std::size_t p = 0; p < cols; ++p)
            for (std::size_t q = 0; q < cols; ++q) next[p][q] = inv[p][q] - inv[p][j] * inv[j][q] / d;
        inv = std::move(next);
    }
    return out;
}

/// Little-endian byte builder for the checkpoint layout.
class Bytes {
public:
    template <typename T>
    Bytes& le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            std::uint64_t bits = 0;
            std::memcpy(&bits, &v, sizeof(T));
            data.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
        }
        return *this;
    }
    Bytes& str(const std::string& s) {
        data.insert(data.end(), s.begin(), s.end());
        return *this;
    }
    std::vector<std::uint8_t> data;
};

/// Every configuration of a product of index ranges, in lexicographic order.
inline std::vector<std::vector<int>> enumerate(const std::vector<std::vector<int>>& spaces) {
    std::vector<std::vector<int>> out{{}};
    for (const auto& s : spaces) {
        std::vector<std::vector<int>> next;
        for (const auto& prefix : out)
            for (int v : s) {
                auto p = prefix;
                p.push_back(v);
                next.push_back(std::move(p));
            }
        out = std::move(next);
    }
    return out;
}

inline int median_rank(std::vector<int> values) {
    std::sort(values.begin(), values.end());
    // Lower of the two middles for even sizes: element (n-1)/2 ascending is the
    // same as element n/2 descending.
    return values[(values.size() - 1) / 2];
}

}  // namespace oracle
