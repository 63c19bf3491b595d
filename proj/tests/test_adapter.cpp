// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sqft/adapter.hpp"
#include "sqft/error.hpp"
#include "sqft/quant.hpp"

using namespace sqft;

namespace {

ElasticAdapter trained_adapter(std::size_t in, std::size_t out, const RankSpace& space, Rng& rng) {
    ElasticAdapter a = new_elastic_adapter(in, out, space, 16.0, rng);
    a.b = random_normal(out, space.max_rank(), rng, 0.1);
    return a;
}

// scale * sum over k < c of B(i,k) A(k,j), by loops.
Matrix delta_reference(const ElasticAdapter& a, int c, double scale) {
    Matrix d(a.out_dim(), a.in_dim());
    for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < c; ++k) acc += a.b(i, k) * a.a(k, j);
            d(i, j) = scale * acc;
        }
    return d;
}

}  // namespace

TEST_CASE("rank spaces") {
    const RankSpace s({32, 28, 24});
    CHECK(s.max_rank() == 32);
    CHECK(s.contains(28));
    CHECK_FALSE(s.contains(20));
    CHECK(s.index_of(24) == 2);
    CHECK_THROWS_AS(s.index_of(20), ConfigError);
    CHECK_THROWS_AS(RankSpace({16, 32}), ConfigError);
    CHECK_THROWS_AS(RankSpace({16, 16}), ConfigError);
    CHECK_THROWS_AS(RankSpace({8, 0}), ConfigError);
    CHECK_THROWS_AS(RankSpace(std::vector<int>{}), ConfigError);
    CHECK_THROWS_AS(s.validate_for(16, 64), ConfigError);
    CHECK_NOTHROW(s.validate_for(32, 64));
}

TEST_CASE("fresh adapters are a no-op") {
    Rng rng(1);
    const ElasticAdapter a = new_elastic_adapter(10, 6, RankSpace({4, 2}), 8.0, rng);
    CHECK(a.active_rank == 4);
    CHECK(a.a.rows() == 4);
    CHECK(a.a.cols() == 10);
    CHECK(a.b == Matrix::zeros(6, 4));
    const double bound = 1.0 / std::sqrt(10.0);
    for (double v : a.a.data()) CHECK(std::abs(v) <= bound);
    CHECK(active_delta(a) == Matrix::zeros(6, 10));
}

TEST_CASE("sub-adapter delta uses the leading rank slice") {
    Rng rng(2);
    ElasticAdapter a = trained_adapter(9, 7, RankSpace({6, 4, 2}), rng);
    for (int c : {6, 4, 2}) {
        set_active_rank(a, c);
        CHECK(max_abs_diff(active_delta(a), delta_reference(a, c, 16.0 / c)) <= 1e-12);
    }
    a.scaling = RankScaling::maximum;
    set_active_rank(a, 2);
    CHECK(max_abs_diff(active_delta(a), delta_reference(a, 2, 16.0 / 6)) <= 1e-12);
    CHECK_THROWS_AS(set_active_rank(a, 3), ConfigError);
}

TEST_CASE("sparse delta and merge keep the pattern") {
    Rng rng(3);
    const Matrix w = random_normal(8, 8, rng);
    const SparsityMask m = build_mask(score_magnitude(w), SparsityLevel(0.5));
    const Matrix wp = apply_mask(w, m);
    const ElasticAdapter a = trained_adapter(8, 8, RankSpace({4}), rng);
    const Matrix lp = sparse_delta(a, m);
    const Matrix merged = merge_sparsepeft(wp, lp, m);
    CHECK(measure_sparsity(merged) >= 0.5);

    AdapterizedLayer layer{SparseBase{wp, m}, a, AdapterMode::sparse_peft};
    const Matrix x = random_normal(8, 5, rng);
    CHECK(matmul(merged, x) == forward(layer, x));
    CHECK(effective_weight(layer) == merged);
}

TEST_CASE("sparse merge refuses a dense delta") {
    Rng rng(4);
    const Matrix w = random_normal(6, 6, rng);
    const SparsityMask m = build_mask(score_magnitude(w), SparsityLevel(0.5));
    const Matrix wp = apply_mask(w, m);
    const ElasticAdapter a = trained_adapter(6, 6, RankSpace({3}), rng);
    CHECK_THROWS_AS(merge_sparsepeft(wp, active_delta(a)), InvariantError);
    CHECK_THROWS_AS(merge_sparsepeft(wp, active_delta(a), m), InvariantError);
    CHECK_THROWS_AS(merge_sparsepeft(wp, Matrix(6, 5)), ShapeError);
}

TEST_CASE("dense merge densifies a sparse base") {
    Rng rng(5);
    const Matrix w = random_normal(16, 16, rng);
    const Matrix wp = apply_mask(w, build_mask(score_magnitude(w), SparsityLevel(0.5)));
    const ElasticAdapter a = trained_adapter(16, 16, RankSpace({4}), rng);
    CHECK(measure_sparsity(merge_dense(wp, active_delta(a))) < 0.45);
}

TEST_CASE("quantization-aware forward equals the requantized merge") {
    Rng rng(6);
    const Matrix w = random_normal(8, 12, rng);
    const SparsityMask m = build_mask(score_magnitude(w), SparsityLevel(0.5));
    const QuantizedTensor q = quantize_rtn(apply_mask(w, m), calibrate_params(apply_mask(w, m), 4));
    AdapterizedLayer layer{make_quantized_base(q, m), trained_adapter(12, 8, RankSpace({4, 2}), rng),
                           AdapterMode::qa_sparse_peft};
    CHECK_NOTHROW(layer.validate());
    const Matrix& base = layer.base_weight();
    const QuantizedTensor merged = merge_qa(base, sparse_delta(layer.adapter, m), q.params);
    const Matrix deq = dequantize(merged);
    CHECK(deq == effective_weight(layer));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c)
            if (!m.kept(r, c)) CHECK(deq(r, c) == 0.0);
    CHECK(merged.params == q.params);
}

TEST_CASE("modes require their bases") {
    Rng rng(7);
    const ElasticAdapter a = new_elastic_adapter(4, 4, RankSpace({2}), 4.0, rng);
    AdapterizedLayer dense{DenseBase{Matrix::identity(4)}, a, AdapterMode::sparse_peft};
    CHECK_THROWS_AS(dense.validate(), ConfigError);
    AdapterizedLayer sparse{SparseBase{Matrix::identity(4), SparsityMask::all_ones(4, 4)}, a,
                            AdapterMode::qa_sparse_peft};
    CHECK_THROWS_AS(sparse.validate(), ConfigError);
    AdapterizedLayer ok{DenseBase{Matrix::identity(4)}, a, AdapterMode::vanilla_lora};
    CHECK_NOTHROW(ok.validate());
    CHECK_THROWS_AS(forward(ok, Matrix(3, 2)), ShapeError);
}

TEST_CASE("mode names round-trip") {
    for (auto m : {AdapterMode::vanilla_lora, AdapterMode::sparse_peft, AdapterMode::qa_sparse_peft}) {
        CHECK(parse_adapter_mode(to_string(m)) == m);
    }
    CHECK(parse_rank_scaling("max") == RankScaling::maximum);
    CHECK_THROWS_AS(parse_adapter_mode("dora"), ConfigError);
}
