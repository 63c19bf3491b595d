// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

RankSpace::RankSpace(std::vector<int> values) : values_(std::move(values)) {
    if (values_.empty()) {
        throw ConfigError("rank space is empty");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (values_[i] <= 0) {
            throw ConfigError(fmt::format("rank {} is not positive", values_[i]));
        }
        if (i > 0 && values_[i] >= values_[i - 1]) {
            throw ConfigError(fmt::format("rank space must be strictly decreasing ({} after {})",
                                          values_[i], values_[i - 1]));
        }
    }
}

bool RankSpace::contains(int c) const noexcept {
    return std::find(values_.begin(), values_.end(), c) != values_.end();
}

std::size_t RankSpace::index_of(int c) const {
    auto it = std::find(values_.begin(), values_.end(), c);
    if (it == values_.end()) {
        throw ConfigError(fmt::format("rank {} is not in the rank space", c));
    }
    return static_cast<std::size_t>(it - values_.begin());
}

void RankSpace::validate_for(std::size_t in_dim, std::size_t out_dim) const {
    if (values_.empty()) {
        throw ConfigError("rank space is empty");
    }
    const std::size_t limit = std::min(in_dim, out_dim);
    if (static_cast<std::size_t>(max_rank()) > limit) {
        throw ConfigError(fmt::format("rank {} exceeds min(in, out) = {} for a {}x{} layer",
                                      max_rank(), limit, out_dim, in_dim));
    }
}

RankScaling parse_rank_scaling(std::string_view name) {
    if (name == "active") return RankScaling::active;
    if (name == "max" || name == "maximum") return RankScaling::maximum;
    throw ConfigError(fmt::format("unknown rank scaling '{}' (expected active or max)", name));
}

std::string_view to_string(RankScaling s) {
    return s == RankScaling::active ? "active" : "max";
}

double ElasticAdapter::scale() const noexcept {
    const int denom = scaling == RankScaling::active ? active_rank : rank_space.max_rank();
    return alpha / static_cast<double>(denom);
}

ElasticAdapter new_elastic_adapter(std::size_t in_dim, std::size_t out_dim,
                                   const RankSpace& rank_space, double alpha, Rng& rng,
                                   RankScaling scaling) {
    rank_space.validate_for(in_dim, out_dim);
    if (!(alpha > 0.0)) {
        throw ConfigError(fmt::format("adapter alpha must be positive, got {}", alpha));
    }
    const auto r = static_cast<std::size_t>(rank_space.max_rank());
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    ElasticAdapter adapter;
    adapter.a = random_uniform(r, in_dim, rng, -bound, bound);
    adapter.b = Matrix(out_dim, r);
    adapter.rank_space = rank_space;
    adapter.active_rank = rank_space.max_rank();
    adapter.alpha = alpha;
    adapter.scaling = scaling;
    return adapter;
}

void set_active_rank(ElasticAdapter& adapter, int c) {
    if (!adapter.rank_space.contains(c)) {
        throw ConfigError(fmt::format("rank {} is not in the adapter's rank space", c));
    }
    adapter.active_rank = c;
}

Matrix active_delta(const ElasticAdapter& adapter) {
    const std::size_t out = adapter.out_dim();
    const std::size_t in = adapter.in_dim();
    const auto c = static_cast<std::size_t>(adapter.active_rank);
    const double s = adapter.scale();
    Matrix delta(out, in);
    for (std::size_t i = 0; i < out; ++i) {
        double* dst = &delta(i, 0);
        for (std::size_t k = 0; k < c; ++k) {
            const double bv = adapter.b(i, k);
            const double* src = &adapter.a.data()[k * in];
            for (std::size_t j = 0; j < in; ++j) {
                dst[j] += bv * src[j];
            }
        }
        for (std::size_t j = 0; j < in; ++j) {
            dst[j] *= s;
        }
    }
    check_finite(delta, "adapter delta");
    return delta;
}

Matrix sparse_delta(const ElasticAdapter& adapter, const SparsityMask& mask) {
    if (mask.rows() != adapter.out_dim() || mask.cols() != adapter.in_dim()) {
        throw ShapeError(fmt::format("sparse_delta: mask {}x{} vs adapter {}x{}", mask.rows(),
                                     mask.cols(), adapter.out_dim(), adapter.in_dim()));
    }
    return apply_mask(active_delta(adapter), mask);
}

AdapterMode parse_adapter_mode(std::string_view name) {
    if (name == "vanilla_lora") return AdapterMode::vanilla_lora;
    if (name == "sparse_peft") return AdapterMode::sparse_peft;
    if (name == "qa_sparse_peft") return AdapterMode::qa_sparse_peft;
    throw ConfigError(fmt::format("unknown adapter mode '{}'", name));
}

std::string_view to_string(AdapterMode m) {
    switch (m) {
        case AdapterMode::vanilla_lora: return "vanilla_lora";
        case AdapterMode::sparse_peft: return "sparse_peft";
        case AdapterMode::qa_sparse_peft: return "qa_sparse_peft";
    }
    return "unknown";
}

QuantizedBase make_quantized_base(QuantizedTensor q, SparsityMask mask) {
    Matrix deq = dequantize(q);
    return QuantizedBase{std::move(q), std::move(mask), std::move(deq)};
}

const Matrix& AdapterizedLayer::base_weight() const noexcept {
    return std::visit(
        [](const auto& b) -> const Matrix& {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, QuantizedBase>) {
                return b.dequantized;
            } else {
                return b.weight;
            }
        },
        base);
}

const SparsityMask* AdapterizedLayer::mask() const noexcept {
    if (const auto* s = std::get_if<SparseBase>(&base)) return &s->mask;
    if (const auto* q = std::get_if<QuantizedBase>(&base)) return &q->mask;
    return nullptr;
}

const QuantParams* AdapterizedLayer::quant_params() const noexcept {
    if (const auto* q = std::get_if<QuantizedBase>(&base)) return &q->quantized.params;
    return nullptr;
}

void AdapterizedLayer::validate() const {
    const Matrix& w = base_weight();
    if (adapter.in_dim() != w.cols() || adapter.out_dim() != w.rows()) {
        throw ShapeError(fmt::format("adapter {}x{} does not match base {}x{}", adapter.out_dim(),
                                     adapter.in_dim(), w.rows(), w.cols()));
    }
    if (!adapter.rank_space.contains(adapter.active_rank)) {
        throw ConfigError(fmt::format("active rank {} not in rank space", adapter.active_rank));
    }
    if (const SparsityMask* m = mask(); m && (m->rows() != w.rows() || m->cols() != w.cols())) {
        throw ShapeError("mask shape does not match base weight");
    }
    if (mode != AdapterMode::vanilla_lora && mask() == nullptr) {
        throw ConfigError(fmt::format("{} mode requires a sparsity mask", to_string(mode)));
    }
    if (mode == AdapterMode::qa_sparse_peft && quant_params() == nullptr) {
        throw ConfigError("qa_sparse_peft mode requires a quantized base with shared parameters");
    }
}

Matrix effective_weight(const AdapterizedLayer& layer) {
    layer.validate();
    const Matrix& w = layer.base_weight();
    switch (layer.mode) {
        case AdapterMode::vanilla_lora:
            return add(w, active_delta(layer.adapter));
        case AdapterMode::sparse_peft:
            return add(w, sparse_delta(layer.adapter, *layer.mask()));
        case AdapterMode::qa_sparse_peft:
            return dequantize(merge_qa(w, sparse_delta(layer.adapter, *layer.mask()),
                                       *layer.quant_params()));
    }
    throw ConfigError("unknown adapter mode");
}

Matrix forward(const AdapterizedLayer& layer, const Matrix& x) {
    if (x.rows() != layer.in_dim()) {
        throw ShapeError(fmt::format("forward: input has {} features, layer expects {}", x.rows(),
                                     layer.in_dim()));
    }
    return matmul(effective_weight(layer), x);
}

namespace {

void check_support(const Matrix& l_p, const SparsityMask& support) {
    for (std::size_t r = 0; r < l_p.rows(); ++r) {
        for (std::size_t c = 0; c < l_p.cols(); ++c) {
            if (!support.kept(r, c) && l_p(r, c) != 0.0) {
                throw InvariantError(fmt::format(
                    "refusing to merge: adapter delta is nonzero at pruned position ({}, {})", r, c));
            }
        }
    }
}

}  // namespace

Matrix merge_sparsepeft(const Matrix& w_p, const Matrix& l_p) {
    if (!w_p.same_shape(l_p)) {
        throw ShapeError("merge_sparsepeft: weight and delta differ in shape");
    }
    check_support(l_p, SparsityMask::from_nonzeros(w_p));
    return add(w_p, l_p);
}

Matrix merge_sparsepeft(const Matrix& w_p, const Matrix& l_p, const SparsityMask& mask) {
    if (!w_p.same_shape(l_p) || mask.rows() != w_p.rows() || mask.cols() != w_p.cols()) {
        throw ShapeError("merge_sparsepeft: weight, delta and mask differ in shape");
    }
    check_support(l_p, mask);
    check_support(w_p, mask);
    return add(w_p, l_p);
}

QuantizedTensor merge_qa(const Matrix& w_p, const Matrix& l_p, const QuantParams& p) {
    if (!w_p.same_shape(l_p)) {
        throw ShapeError("merge_qa: weight and delta differ in shape");
    }
    if (w_p.rows() != p.rows || w_p.cols() != p.cols) {
        throw ShapeError(fmt::format("merge_qa: weight {}x{} vs params for {}x{}", w_p.rows(),
                                     w_p.cols(), p.rows, p.cols));
    }
    return quantize_rtn(add(w_p, l_p), p);
}

Matrix merge_dense(const Matrix& w, const Matrix& delta) {
    return add(w, delta);
}

}  // namespace sqft
