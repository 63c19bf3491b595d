// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "sqft/error.hpp"
#include "sqft/quant.hpp"
#include "sqft/train.hpp"

using namespace sqft;

namespace {

MlpModel two_layer(AdapterMode mode, TaskKind head, Rng& rng, std::vector<std::size_t> dims = {6, 5, 3},
                   std::vector<int> ranks = {3, 2}) {
    MlpModel m;
    m.head = head;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const Matrix w = random_normal(dims[l + 1], dims[l], rng, 0.7);
        const SparsityMask mask = build_mask(score_magnitude(w), SparsityLevel(0.5));
        const Matrix wp = apply_mask(w, mask);
        AdapterizedLayer layer;
        layer.mode = mode;
        if (mode == AdapterMode::vanilla_lora) {
            layer.base = DenseBase{w};
        } else if (mode == AdapterMode::sparse_peft) {
            layer.base = SparseBase{wp, mask};
        } else {
            layer.base = make_quantized_base(quantize_rtn(wp, calibrate_params(wp, 4)), mask);
        }
        layer.adapter = new_elastic_adapter(dims[l], dims[l + 1], RankSpace(ranks), 4.0, rng);
        layer.adapter.b = random_normal(dims[l + 1], static_cast<std::size_t>(ranks[0]), rng, 0.05);
        m.layers.push_back(std::move(layer));
    }
    return m;
}

Dataset batch_for(const MlpModel& m, std::size_t n, Rng& rng) {
    Dataset d;
    d.kind = m.head;
    d.x = random_normal(m.dims().front(), n, rng);
    if (m.head == TaskKind::regression) {
        d.y = random_normal(m.dims().back(), n, rng);
    } else {
        for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(m.dims().back())));
    }
    return d;
}

}  // namespace

TEST_CASE("losses") {
    const Matrix p = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix y = Matrix::from_rows({{1, 0}, {3, 6}});
    CHECK(mse_loss(p, y) == doctest::Approx(2.0));
    const Matrix logits = Matrix::from_rows({{0.0, 2.0}, {0.0, 0.0}});
    const std::vector<int> labels{0, 1};
    const double expect = 0.5 * (std::log(2.0) + (std::log(1.0 + std::exp(2.0))));
    CHECK(cross_entropy_loss(logits, labels) == doctest::Approx(expect));
    CHECK(accuracy(Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), labels) == 1.0);
    const Matrix big = Matrix::from_rows({{1000.0}, {-1000.0}});
    CHECK(std::isfinite(cross_entropy_loss(big, std::vector<int>{1})));
}

TEST_CASE("analytic gradients match central differences") {
    for (auto mode : {AdapterMode::vanilla_lora, AdapterMode::sparse_peft}) {
        for (auto head : {TaskKind::regression, TaskKind::classification}) {
            Rng rng(10 + static_cast<int>(mode) * 3 + static_cast<int>(head));
            const MlpModel m = two_layer(mode, head, rng);
            const Dataset d = batch_for(m, 9, rng);
            const auto r = finite_diff_check(m, d, loss_kind_for(head));
            CAPTURE(to_string(mode));
            CHECK(r.checked > 0);
            CHECK(r.max_rel_error <= 1e-4);
        }
    }
}

TEST_CASE("straight-through gradients match the surrogate forward") {
    Rng rng(20);
    const MlpModel m = two_layer(AdapterMode::qa_sparse_peft, TaskKind::regression, rng);
    const Dataset d = batch_for(m, 9, rng);
    const auto r = finite_diff_check(m, d, LossKind::mse);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("masked and inactive components get no gradient") {
    Rng rng(21);
    MlpModel m = two_layer(AdapterMode::sparse_peft, TaskKind::regression, rng, {6, 5, 3}, {3, 2, 1});
    m.set_active_ranks(std::vector<int>{1, 2});
    const Gradients g = backward(m, batch_for(m, 7, rng), LossKind::mse);
    for (std::size_t j = 0; j < 6; ++j) {
        CHECK(g.layers[0].a(1, j) == 0.0);
        CHECK(g.layers[0].a(2, j) == 0.0);
    }
    for (std::size_t i = 0; i < 5; ++i) CHECK(g.layers[0].b(i, 2) == 0.0);
}

TEST_CASE("fine-tuning reduces the loss and is deterministic") {
    Rng rng(30);
    const MlpModel m = two_layer(AdapterMode::sparse_peft, TaskKind::regression, rng, {8, 8, 4}, {4, 2});
    const Dataset d = batch_for(m, 128, rng);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 32;
    cfg.learning_rate = 1e-2;
    cfg.seed = 5;
    const double before = loss(m, d, LossKind::mse);
    const FinetuneResult a = finetune(m, d, cfg);
    const FinetuneResult b = finetune(m, d, cfg);
    CHECK(loss(a.model, d, LossKind::mse) < before);
    CHECK(a.loss_history.size() == 15);
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.model.layers[0].adapter == b.model.layers[0].adapter);
    CHECK(a.model.active_ranks() == m.active_ranks());
    CHECK(a.steps == 15 * 4);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        CHECK(effective_weight(a.model.layers[l]).size() == effective_weight(m.layers[l]).size());
        CHECK(a.model.layers[l].base_weight() == m.layers[l].base_weight());
    }

    cfg.optimizer = OptimizerKind::sgd;
    CHECK(loss(finetune(m, d, cfg).model, d, LossKind::mse) < before);
}

TEST_CASE("fixed sampling on a singleton space equals uniform sampling") {
    Rng rng(31);
    const MlpModel m = two_layer(AdapterMode::vanilla_lora, TaskKind::classification, rng, {6, 6, 3}, {2});
    const Dataset d = batch_for(m, 64, rng);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 9;
    cfg.rank_sampling = RankSampling::fixed;
    const auto a = finetune(m, d, cfg);
    cfg.rank_sampling = RankSampling::uniform;
    const auto b = finetune(m, d, cfg);
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.model.layers[1].adapter == b.model.layers[1].adapter);
}

TEST_CASE("divergence raises with the loss history") {
    Rng rng(32);
    MlpModel m = two_layer(AdapterMode::vanilla_lora, TaskKind::regression, rng);
    Dataset d = batch_for(m, 32, rng);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.learning_rate = 1e6;
    try {
        finetune(m, d, cfg);
        FAIL("expected divergence");
    } catch (const TrainingError& e) {
        CHECK(e.history().size() < 50);
    }
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.learning_rate = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("models must chain") {
    Rng rng(33);
    MlpModel m = two_layer(AdapterMode::vanilla_lora, TaskKind::regression, rng);
    CHECK_NOTHROW(m.validate());
    m.layers[1].mode = AdapterMode::sparse_peft;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    CHECK_THROWS_AS(predict(two_layer(AdapterMode::vanilla_lora, TaskKind::regression, rng), Matrix(5, 2)),
                    ShapeError);
}
