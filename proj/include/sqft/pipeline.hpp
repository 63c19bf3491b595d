// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline orchestration: synthetic teacher-student tasks, the compression
// stages (sparsify -> [quantize] -> fine-tune -> [merge]), model <-> SQCK
// conversion, evaluation with a computed mergeability verdict, and the
// storage cost report.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sqft/adapter.hpp"
#include "sqft/checkpoint.hpp"
#include "sqft/quant.hpp"
#include "sqft/search.hpp"
#include "sqft/sparsity.hpp"
#include "sqft/train.hpp"

namespace sqft {

enum class Method { lora, nls, sqft, sqft_sparsepeft, sqft_qa_sparsepeft };
enum class QuantMethod { off, rtn, gptq_lite };

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
QuantMethod parse_quant_method(std::string_view name);
std::string_view to_string(QuantMethod q);

AdapterMode adapter_mode_for(Method m) noexcept;
bool method_merges(Method m) noexcept;

struct TaskSpec {
    TaskKind kind = TaskKind::classification;
    std::vector<std::size_t> dims;  ///< empty: 64,64,8 (classification) or 64,64,1 (regression)
    std::size_t train = 4096;
    std::size_t validation = 512;
    std::size_t test = 1024;
    std::size_t calibration = 128;
    std::size_t latent = 16;     ///< inputs are x = F z + noise with z of this width
    double input_noise = 0.05;
    double target_noise = 0.01;  ///< regression label noise sigma
    int classes = 8;

    std::vector<std::size_t> resolved_dims() const;
};

struct PipelineSpec {
    Method method = Method::sqft_sparsepeft;
    double sparsity = 0.5;
    ScoreKind score = ScoreKind::wanda;
    MaskGroup group = MaskGroup::per_row;
    std::optional<QuantMethod> quant;  ///< unset: the method's default
    int bits = 4;
    std::size_t group_size = 0;        ///< 0: whole-row groups
    RangeMode range_mode = RangeMode::paper;
    std::vector<int> ranks{16, 12, 8};
    std::optional<int> fixed_rank;     ///< lora only; default is the median of `ranks`
    double alpha = 64.0;
    RankScaling rank_scaling = RankScaling::active;
    TrainConfig train;
    TaskSpec task;
    std::uint64_t seed = 0;

    QuantMethod resolved_quant() const;
    /// Rank space each layer of a model with these dims gets for this method.
    std::vector<RankSpace> layer_rank_spaces(const std::vector<std::size_t>& dims) const;
    void validate() const;
};

PipelineSpec default_spec();
/// JSON object with the documented keys; nested objects and dotted keys are
/// both accepted ("quant": {"bits": 4} or "quant.bits": 4). Unknown keys are
/// rejected.
PipelineSpec parse_spec(std::string_view json_text);
PipelineSpec load_spec(const std::filesystem::path& path);
std::string spec_to_json(const PipelineSpec& spec);

/// Frozen per-layer weights: the pre-trained teacher, a pruned or quantized
/// base, or a merged deliverable.
struct BaseLayer {
    Matrix weight;  ///< full-precision view (dequantized when `quantized` is set)
    std::optional<SparsityMask> mask;
    std::optional<QuantizedTensor> quantized;
};

struct BaseModel {
    std::vector<BaseLayer> layers;
    TaskKind head = TaskKind::regression;

    std::vector<std::size_t> dims() const;
};

Matrix predict(const BaseModel& model, const Matrix& x);

struct Task {
    TaskSpec spec;
    BaseModel teacher;
    Matrix input_basis;  ///< in_dim x latent
    Dataset train;
    Dataset validation;
    Dataset test;
    Matrix calibration;  ///< samples x in_dim (rows are samples)
};

/// Teacher = random dense ReLU MLP. Regression targets are teacher outputs
/// plus N(0, target_noise^2); classification labels are the argmax of the
/// teacher logits. Splits are drawn independently from the same input law.
Task make_task(const TaskSpec& spec, std::uint64_t seed);

/// Layer-wise pruning; each layer is scored on calibration activations that
/// have passed through the already-pruned layers before it.
BaseModel prune_model(const BaseModel& dense, const Matrix& calibration, SparsityLevel level,
                      ScoreKind score, MaskGroup group);

/// Layer-wise post-training quantization of a (pruned) model, keeping masks.
BaseModel quantize_model(const BaseModel& model, const Matrix& calibration, QuantMethod method,
                         int bits, std::size_t group_size, RangeMode range_mode);

/// Wraps each base layer with a fresh elastic adapter in `mode`.
MlpModel attach_adapters(const BaseModel& base, AdapterMode mode,
                         const std::vector<RankSpace>& spaces, double alpha, RankScaling scaling,
                         Rng& rng);

/// Folds the adapters into the base with the mode's merge: sparse_peft and
/// vanilla give full-precision weights, qa_sparse_peft gives integer codes.
/// Vanilla merges are performed without support checks.
BaseModel merge_model(const MlpModel& model);

struct Metrics {
    double loss = 0.0;
    std::optional<double> accuracy;        ///< classification only
    std::vector<double> layer_sparsity;
    double sparsity = 0.0;                 ///< over all layer weights
    std::size_t total_params = 0;          ///< base weights plus stored adapter entries
    std::optional<bool> mergeable;         ///< adapterized models only
    std::string merge_note;
};

Metrics evaluate(const BaseModel& model, const Dataset& data);
/// The verdict comes from executing the mode's merge and checking that the
/// pruned pattern survives, the output is unchanged bit for bit and, for
/// quantized bases, the result is still representable in the base's integer
/// codes.
Metrics evaluate(const MlpModel& model, const Dataset& data);

// SQCK conversion. Tensors are named layers.<i>.weight | .mask | .codes |
// .scales | .zeros | .lora_A | .lora_B.
CheckpointContainer base_to_container(const BaseModel& model, bool with_masks);
BaseModel base_from_container(const CheckpointContainer& c);
CheckpointContainer adapters_to_container(const MlpModel& model);
/// Rebuilds an adapterized model from a base checkpoint and an adapter checkpoint.
MlpModel model_from_containers(const CheckpointContainer& base, const CheckpointContainer& adapters);

struct Artifact {
    std::string filename;
    std::string role;  ///< "model" or "adapter"
    CheckpointContainer container;
    std::uint64_t bytes = 0;
};

struct CostRow {
    Method method = Method::lora;
    std::uint64_t model_bytes = 0;
    std::uint64_t adapter_bytes = 0;
    bool mergeable = false;
    std::string precision;
    double finetune_seconds = 0.0;
    double steps_per_second = 0.0;

    std::uint64_t total_bytes() const noexcept { return model_bytes + adapter_bytes; }
};

struct RunResult {
    PipelineSpec spec;
    Metrics dense;    ///< teacher on the test split
    Metrics no_tune;  ///< compressed base, zero adapters
    Metrics final;    ///< the deliverable on the test split
    Metrics validation;
    std::vector<double> loss_history;
    RankConfig reference;
    MlpModel trained;
    std::vector<Artifact> artifacts;
    CostRow cost;
};

RunResult run_pipeline(const PipelineSpec& spec);
void write_artifacts(const RunResult& r, const std::filesystem::path& dir);

struct CostReport {
    std::vector<CostRow> rows;
    bool ordering_holds = false;
    std::string ordering;  ///< e.g. "lora-pair 28912 > sparsepeft 18561 > ..."
};

/// Checks storage(LoRA/NLS pair) > storage(SparsePEFT merged) >
/// storage(SQFT pair) > storage(QA-SparsePEFT merged). An ordering violation
/// is flagged, not thrown.
CostReport cost_report(const std::vector<RunResult>& runs);

/// The four canonical methods (nls, sqft, sqft_sparsepeft, sqft_qa_sparsepeft)
/// on one task and seed, run concurrently.
std::vector<RunResult> compare_methods(const PipelineSpec& base_spec);

std::string precision_label(Method m, int bits);

}  // namespace sqft
