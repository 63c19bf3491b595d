// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Elastic low-rank adapters and the three ways a layer can combine them with
// its (possibly compressed) base weight:
//
//   vanilla_lora    W_eff = W + delta
//   sparse_peft     W_eff = W^p + delta ⊙ M
//   qa_sparse_peft  W_eff = dequant(clamp(round((W^p + delta ⊙ M) / s) + z, 0, q_max))
//
// where delta = scale * B[:, :c] * A[:c, :] for the active rank c. Every mode
// forms W_eff first and then multiplies, so the unmerged forward and the
// forward of a merged weight are the same floating-point expression.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "sqft/quant.hpp"
#include "sqft/sparsity.hpp"
#include "sqft/tensor.hpp"

namespace sqft {

/// Strictly decreasing set of admissible ranks, e.g. {48, 32, 16}.
class RankSpace {
public:
    RankSpace() = default;
    explicit RankSpace(std::vector<int> values);

    const std::vector<int>& values() const noexcept { return values_; }
    int max_rank() const noexcept { return values_.front(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool contains(int c) const noexcept;
    /// Position of `c` in values(); throws ConfigError if absent.
    std::size_t index_of(int c) const;
    int at(std::size_t i) const { return values_.at(i); }

    /// Throws ConfigError unless every rank fits an out x in weight.
    void validate_for(std::size_t in_dim, std::size_t out_dim) const;

    bool operator==(const RankSpace&) const = default;

private:
    std::vector<int> values_;
};

/// How the active sub-adapter's product is scaled.
enum class RankScaling {
    active,   ///< alpha / c
    maximum,  ///< alpha / max_rank
};

RankScaling parse_rank_scaling(std::string_view name);
std::string_view to_string(RankScaling s);

struct ElasticAdapter {
    Matrix a;  ///< max_rank x in_dim
    Matrix b;  ///< out_dim x max_rank
    RankSpace rank_space;
    int active_rank = 0;
    double alpha = 64.0;
    RankScaling scaling = RankScaling::active;

    std::size_t in_dim() const noexcept { return a.cols(); }
    std::size_t out_dim() const noexcept { return b.rows(); }
    double scale() const noexcept;

    bool operator==(const ElasticAdapter&) const = default;
};

/// A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0, active rank = max rank.
ElasticAdapter new_elastic_adapter(std::size_t in_dim, std::size_t out_dim,
                                   const RankSpace& rank_space, double alpha, Rng& rng,
                                   RankScaling scaling = RankScaling::active);

void set_active_rank(ElasticAdapter& adapter, int c);

/// scale * B[:, :c] * A[:c, :]
Matrix active_delta(const ElasticAdapter& adapter);

/// active_delta ⊙ M
Matrix sparse_delta(const ElasticAdapter& adapter, const SparsityMask& mask);

enum class AdapterMode { vanilla_lora, sparse_peft, qa_sparse_peft };

AdapterMode parse_adapter_mode(std::string_view name);
std::string_view to_string(AdapterMode m);

struct DenseBase {
    Matrix weight;
};

struct SparseBase {
    Matrix weight;  ///< W^p
    SparsityMask mask;
};

/// Quantized sparse base. The (s, z) inside `quantized.params` are the ones
/// shared with the adapter in qa_sparse_peft mode.
struct QuantizedBase {
    QuantizedTensor quantized;
    SparsityMask mask;
    Matrix dequantized;  ///< cached dequantize(quantized)
};

using LayerBase = std::variant<DenseBase, SparseBase, QuantizedBase>;

QuantizedBase make_quantized_base(QuantizedTensor q, SparsityMask mask);

struct AdapterizedLayer {
    LayerBase base;
    ElasticAdapter adapter;
    AdapterMode mode = AdapterMode::vanilla_lora;

    std::size_t in_dim() const noexcept { return base_weight().cols(); }
    std::size_t out_dim() const noexcept { return base_weight().rows(); }

    /// Full-precision view of the frozen base (dequantized for quantized bases).
    const Matrix& base_weight() const noexcept;
    const SparsityMask* mask() const noexcept;
    const QuantParams* quant_params() const noexcept;
    bool is_quantized() const noexcept { return std::holds_alternative<QuantizedBase>(base); }

    /// Throws ConfigError if the mode lacks the mask or parameters it needs.
    void validate() const;
};

/// Weight the layer applies to its input in its mode.
Matrix effective_weight(const AdapterizedLayer& layer);

/// Y = W_eff * X (X holds one sample per column).
Matrix forward(const AdapterizedLayer& layer, const Matrix& x);

/// W^p + L^p. Refuses with InvariantError when L^p is nonzero anywhere the
/// mask (or, without a mask, W^p's own nonzero pattern) is zero.
Matrix merge_sparsepeft(const Matrix& w_p, const Matrix& l_p);
Matrix merge_sparsepeft(const Matrix& w_p, const Matrix& l_p, const SparsityMask& mask);

/// clamp(round((W^p + L^p) / s) + z, 0, q_max) with the base's shared parameters.
QuantizedTensor merge_qa(const Matrix& w_p, const Matrix& l_p, const QuantParams& p);

/// Dense W + delta with no support check (what vanilla LoRA merging does).
Matrix merge_dense(const Matrix& w, const Matrix& delta);

}  // namespace sqft
