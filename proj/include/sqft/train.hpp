// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adapterized MLPs and their fine-tuning loop. Reverse-mode gradients are
// derived by hand for the layer stack; only adapter matrices A and B receive
// updates and the base weights never change.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "sqft/adapter.hpp"
#include "sqft/tensor.hpp"

namespace sqft {

enum class TaskKind { regression, classification };
enum class LossKind { mse, cross_entropy };

TaskKind parse_task_kind(std::string_view name);
std::string_view to_string(TaskKind k);
LossKind loss_kind_for(TaskKind k) noexcept;

/// Adapterized layers with ReLU between them (none after the last layer).
/// Regression heads are linear; classification heads emit logits.
struct MlpModel {
    std::vector<AdapterizedLayer> layers;
    TaskKind head = TaskKind::regression;

    std::vector<std::size_t> dims() const;
    AdapterMode mode() const;
    std::vector<int> active_ranks() const;
    void set_active_ranks(std::span<const int> ranks);
    /// Dimensions chain and every layer shares one mode.
    void validate() const;
};

/// Samples are columns: x is in_dim x n, y is out_dim x n for regression,
/// labels holds one class index per sample for classification.
struct Dataset {
    TaskKind kind = TaskKind::regression;
    Matrix x;
    Matrix y;
    std::vector<int> labels;

    std::size_t size() const noexcept { return x.cols(); }
    Dataset subset(std::span<const std::size_t> indices) const;
};

/// How the quantization-aware forward treats round(): exactly, or as the
/// identity (the surrogate whose derivative the straight-through estimator uses).
enum class QuantForward { exact, straight_through };

Matrix predict(const MlpModel& model, const Matrix& x, QuantForward qf = QuantForward::exact);

/// Mean over all output entries of (pred - y)^2.
double mse_loss(const Matrix& pred, const Matrix& y);
/// Mean over samples of -log softmax(logits)[label].
double cross_entropy_loss(const Matrix& logits, std::span<const int> labels);
double accuracy(const Matrix& logits, std::span<const int> labels);

double loss(const MlpModel& model, const Dataset& batch, LossKind kind,
            QuantForward qf = QuantForward::exact);

struct AdapterGrad {
    Matrix a;
    Matrix b;
};

struct Gradients {
    double loss = 0.0;
    std::vector<AdapterGrad> layers;
};

/// Runs the forward pass on `batch` and back-propagates to every adapter.
/// Rank components beyond a layer's active rank get zero gradient. In
/// qa_sparse_peft mode round() passes gradients straight through and the clamp
/// blocks them outside [0, q_max]. Training runs the exact forward; `qf`
/// selects the surrogate forward for gradient checking.
Gradients backward(const MlpModel& model, const Dataset& batch, LossKind kind,
                   QuantForward qf = QuantForward::exact);

enum class OptimizerKind { sgd, adam };
OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind k);

/// fixed keeps each layer's current active rank; uniform draws a rank from
/// the layer's space at every step (weight-shared sub-adapter training).
enum class RankSampling { fixed, uniform };

struct TrainConfig {
    int epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    RankSampling rank_sampling = RankSampling::uniform;
    std::uint64_t seed = 0;

    void validate() const;
};

struct FinetuneResult {
    MlpModel model;
    std::vector<double> loss_history;  ///< mean training loss per epoch
    std::size_t steps = 0;
    double wall_seconds = 0.0;
};

/// Deterministic in (model, data, cfg). Active ranks are restored to their
/// values on entry. Throws TrainingError (with the history so far) on a
/// non-finite loss.
FinetuneResult finetune(MlpModel model, const Dataset& data, const TrainConfig& cfg);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// qa mode only: parameters whose +-h probe moved an exact quantized code.
    std::size_t cell_crossings = 0;
};

/// Central-difference check of backward(). For qa_sparse_peft models the
/// differences are taken on the straight-through surrogate forward, which is
/// what the estimator differentiates; the exact forward is piecewise constant.
/// Relative error is |g - fd| / max(|g|, |fd|, 1e-8).
GradCheckResult finite_diff_check(const MlpModel& model, const Dataset& batch, LossKind kind,
                                  double h = 1e-5);

}  // namespace sqft
