// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

TaskKind parse_task_kind(std::string_view name) {
    if (name == "regression") return TaskKind::regression;
    if (name == "classification") return TaskKind::classification;
    throw ConfigError(fmt::format("unknown task kind '{}'", name));
}

std::string_view to_string(TaskKind k) {
    return k == TaskKind::regression ? "regression" : "classification";
}

LossKind loss_kind_for(TaskKind k) noexcept {
    return k == TaskKind::regression ? LossKind::mse : LossKind::cross_entropy;
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ConfigError(fmt::format("unknown optimizer '{}'", name));
}

std::string_view to_string(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd";
}

std::vector<std::size_t> MlpModel::dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(layers.front().in_dim());
    for (const auto& l : layers) d.push_back(l.out_dim());
    return d;
}

AdapterMode MlpModel::mode() const {
    return layers.empty() ? AdapterMode::vanilla_lora : layers.front().mode;
}

std::vector<int> MlpModel::active_ranks() const {
    std::vector<int> r;
    for (const auto& l : layers) r.push_back(l.adapter.active_rank);
    return r;
}

void MlpModel::set_active_ranks(std::span<const int> ranks) {
    if (ranks.size() != layers.size()) {
        throw ConfigError(fmt::format("rank config has {} entries for {} layers", ranks.size(),
                                      layers.size()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        set_active_rank(layers[i].adapter, ranks[i]);
    }
}

void MlpModel::validate() const {
    if (layers.empty()) {
        throw ConfigError("model has no layers");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].validate();
        if (layers[i].mode != layers.front().mode) {
            throw ConfigError("all layers must share one adapter mode");
        }
        if (i > 0 && layers[i].in_dim() != layers[i - 1].out_dim()) {
            throw ShapeError(fmt::format("layer {} expects {} inputs but layer {} emits {}", i,
                                         layers[i].in_dim(), i - 1, layers[i - 1].out_dim()));
        }
    }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.kind = kind;
    out.x = gather_cols(x, indices);
    if (!y.empty()) {
        out.y = gather_cols(y, indices);
    }
    if (!labels.empty()) {
        out.labels.reserve(indices.size());
        for (std::size_t i : indices) out.labels.push_back(labels.at(i));
    }
    return out;
}

namespace {

Matrix straight_through_weight(const AdapterizedLayer& layer) {
    const Matrix& w = layer.base_weight();
    const Matrix l = sparse_delta(layer.adapter, *layer.mask());
    const QuantParams& p = *layer.quant_params();
    Matrix out(w.rows(), w.cols());
    const double qmax = static_cast<double>(p.q_max);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            const double s = p.scale_at(r, c);
            const double z = static_cast<double>(p.zero_at(r, c));
            const double u = std::clamp((w(r, c) + l(r, c)) / s + z, 0.0, qmax);
            out(r, c) = s * (u - z);
        }
    }
    return out;
}

Matrix weight_for(const AdapterizedLayer& layer, QuantForward qf) {
    if (layer.mode == AdapterMode::qa_sparse_peft && qf == QuantForward::straight_through) {
        layer.validate();
        return straight_through_weight(layer);
    }
    return effective_weight(layer);
}

void relu_inplace(Matrix& m) {
    for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

struct ForwardCache {
    std::vector<Matrix> weights;     // effective weight per layer
    std::vector<Matrix> inputs;      // input to each layer
    std::vector<Matrix> preacts;     // W * input per layer
};

ForwardCache run_forward(const MlpModel& model, const Matrix& x, QuantForward qf) {
    model.validate();
    if (x.rows() != model.layers.front().in_dim()) {
        throw ShapeError(fmt::format("input has {} features, model expects {}", x.rows(),
                                     model.layers.front().in_dim()));
    }
    ForwardCache cache;
    Matrix h = x;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        cache.weights.push_back(weight_for(model.layers[i], qf));
        Matrix z = matmul(cache.weights.back(), h);
        cache.inputs.push_back(std::move(h));
        h = z;
        if (i + 1 < model.layers.size()) relu_inplace(h);
        cache.preacts.push_back(std::move(z));
    }
    return cache;
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t c = 0; c < logits.cols(); ++c) {
        double mx = logits(0, c);
        for (std::size_t r = 1; r < logits.rows(); ++r) mx = std::max(mx, logits(r, c));
        double total = 0.0;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            p(r, c) = std::exp(logits(r, c) - mx);
            total += p(r, c);
        }
        for (std::size_t r = 0; r < logits.rows(); ++r) p(r, c) /= total;
    }
    return p;
}

void check_labels(const Matrix& logits, std::span<const int> labels) {
    if (labels.size() != logits.cols()) {
        throw ShapeError(fmt::format("{} labels for {} samples", labels.size(), logits.cols()));
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= logits.rows()) {
            throw ShapeError(fmt::format("label {} out of range for {} classes", l, logits.rows()));
        }
    }
}

double batch_loss(const Matrix& out, const Dataset& batch, LossKind kind) {
    return kind == LossKind::mse ? mse_loss(out, batch.y) : cross_entropy_loss(out, batch.labels);
}

}  // namespace

Matrix predict(const MlpModel& model, const Matrix& x, QuantForward qf) {
    ForwardCache cache = run_forward(model, x, qf);
    return std::move(cache.preacts.back());
}

double mse_loss(const Matrix& pred, const Matrix& y) {
    if (!pred.same_shape(y)) {
        throw ShapeError(fmt::format("mse: prediction {}x{} vs target {}x{}", pred.rows(),
                                     pred.cols(), y.rows(), y.cols()));
    }
    if (pred.empty()) return 0.0;
    return frobenius_sq(subtract(pred, y)) / static_cast<double>(pred.size());
}

double cross_entropy_loss(const Matrix& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    if (logits.cols() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
        double mx = logits(0, c);
        for (std::size_t r = 1; r < logits.rows(); ++r) mx = std::max(mx, logits(r, c));
        double sum = 0.0;
        for (std::size_t r = 0; r < logits.rows(); ++r) sum += std::exp(logits(r, c) - mx);
        total += mx + std::log(sum) - logits(static_cast<std::size_t>(labels[c]), c);
    }
    const double mean = total / static_cast<double>(logits.cols());
    if (!std::isfinite(mean)) throw DataError("non-finite cross-entropy");
    return mean;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
    check_labels(logits, labels);
    if (logits.cols() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
        std::size_t best = 0;
        for (std::size_t r = 1; r < logits.rows(); ++r) {
            if (logits(r, c) > logits(best, c)) best = r;
        }
        if (static_cast<int>(best) == labels[c]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

double loss(const MlpModel& model, const Dataset& batch, LossKind kind, QuantForward qf) {
    return batch_loss(predict(model, batch.x, qf), batch, kind);
}

Gradients backward(const MlpModel& model, const Dataset& batch, LossKind kind, QuantForward qf) {
    ForwardCache cache = run_forward(model, batch.x, qf);
    const Matrix& out = cache.preacts.back();
    Gradients grads;
    grads.loss = batch_loss(out, batch, kind);

    Matrix dz;
    if (kind == LossKind::mse) {
        dz = scaled(subtract(out, batch.y), 2.0 / static_cast<double>(out.size()));
    } else {
        dz = softmax_columns(out);
        for (std::size_t c = 0; c < dz.cols(); ++c) {
            dz(static_cast<std::size_t>(batch.labels[c]), c) -= 1.0;
        }
        dz = scaled(dz, 1.0 / static_cast<double>(dz.cols()));
    }

    const std::size_t n_layers = model.layers.size();
    grads.layers.resize(n_layers);
    for (std::size_t li = n_layers; li-- > 0;) {
        const AdapterizedLayer& layer = model.layers[li];
        Matrix dw = matmul(dz, transpose(cache.inputs[li]));
        if (li > 0) {
            Matrix dh = matmul(transpose(cache.weights[li]), dz);
            const Matrix& z_prev = cache.preacts[li - 1];
            for (std::size_t i = 0; i < dh.size(); ++i) {
                if (!(z_prev.data()[i] > 0.0)) dh.data()[i] = 0.0;
            }
            dz = std::move(dh);
        }

        // dW_eff -> d(delta)
        if (layer.mode != AdapterMode::vanilla_lora) {
            dw = apply_mask(dw, *layer.mask());
        }
        if (layer.mode == AdapterMode::qa_sparse_peft) {
            const Matrix& w = layer.base_weight();
            const Matrix l = sparse_delta(layer.adapter, *layer.mask());
            const QuantParams& p = *layer.quant_params();
            for (std::size_t r = 0; r < w.rows(); ++r) {
                for (std::size_t c = 0; c < w.cols(); ++c) {
                    const double u = (w(r, c) + l(r, c)) / p.scale_at(r, c) + p.zero_at(r, c);
                    if (u < 0.0 || u > static_cast<double>(p.q_max)) dw(r, c) = 0.0;
                }
            }
        }

        // d(delta) -> dB, dA over the active components.
        const ElasticAdapter& ad = layer.adapter;
        const std::size_t rank = static_cast<std::size_t>(ad.active_rank);
        const double s = ad.scale();
        AdapterGrad g{Matrix(ad.a.rows(), ad.a.cols()), Matrix(ad.b.rows(), ad.b.cols())};
        for (std::size_t i = 0; i < ad.out_dim(); ++i) {
            for (std::size_t k = 0; k < rank; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < ad.in_dim(); ++j) acc += dw(i, j) * ad.a(k, j);
                g.b(i, k) = s * acc;
            }
        }
        for (std::size_t k = 0; k < rank; ++k) {
            for (std::size_t j = 0; j < ad.in_dim(); ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < ad.out_dim(); ++i) acc += ad.b(i, k) * dw(i, j);
                g.a(k, j) = s * acc;
            }
        }
        grads.layers[li] = std::move(g);
    }
    return grads;
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning rate must be a finite nonnegative number");
    }
}

namespace {

struct AdamState {
    Matrix m;
    Matrix v;
};

void apply_update(Matrix& param, const Matrix& grad, AdamState& st, const TrainConfig& cfg,
                  std::size_t step) {
    auto p = param.data();
    auto g = grad.data();
    if (cfg.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.learning_rate * g[i];
        return;
    }
    auto m = st.m.data();
    auto v = st.v.data();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
}

}  // namespace

FinetuneResult finetune(MlpModel model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    if (data.size() == 0) {
        throw ConfigError("fine-tuning dataset is empty");
    }
    const auto started = std::chrono::steady_clock::now();
    const LossKind kind = loss_kind_for(model.head);
    const std::vector<int> initial_ranks = model.active_ranks();

    Rng root(cfg.seed);
    Rng shuffle_rng = root.derive(1);
    Rng rank_rng = root.derive(2);

    std::vector<AdamState> a_state;
    std::vector<AdamState> b_state;
    for (const auto& l : model.layers) {
        a_state.push_back({Matrix(l.adapter.a.rows(), l.adapter.a.cols()),
                           Matrix(l.adapter.a.rows(), l.adapter.a.cols())});
        b_state.push_back({Matrix(l.adapter.b.rows(), l.adapter.b.cols()),
                           Matrix(l.adapter.b.rows(), l.adapter.b.cols())});
    }

    FinetuneResult result;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(std::span<std::size_t>(order), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const Dataset batch =
                data.subset(std::span<const std::size_t>(order).subspan(start, end - start));
            if (cfg.rank_sampling == RankSampling::uniform) {
                for (auto& l : model.layers) {
                    const RankSpace& space = l.adapter.rank_space;
                    if (space.size() > 1) {
                        l.adapter.active_rank = space.at(rank_rng.below(space.size()));
                    }
                }
            }
            Gradients g;
            try {
                g = backward(model, batch, kind);
            } catch (const DataError& e) {
                result.loss_history.push_back(std::nan(""));
                throw TrainingError(fmt::format("training diverged in epoch {}: {}", epoch, e.what()),
                                    result.loss_history);
            }
            if (!std::isfinite(g.loss)) {
                result.loss_history.push_back(g.loss);
                throw TrainingError(fmt::format("training diverged in epoch {}", epoch),
                                    result.loss_history);
            }
            ++step;
            for (std::size_t li = 0; li < model.layers.size(); ++li) {
                apply_update(model.layers[li].adapter.a, g.layers[li].a, a_state[li], cfg, step);
                apply_update(model.layers[li].adapter.b, g.layers[li].b, b_state[li], cfg, step);
            }
            epoch_loss += g.loss;
            ++batches;
        }
        result.loss_history.push_back(epoch_loss / static_cast<double>(batches));
    }
    model.set_active_ranks(initial_ranks);
    result.model = std::move(model);
    result.steps = step;
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

GradCheckResult finite_diff_check(const MlpModel& model, const Dataset& batch, LossKind kind,
                                  double h) {
    const bool qa = model.mode() == AdapterMode::qa_sparse_peft;
    const QuantForward qf = qa ? QuantForward::straight_through : QuantForward::exact;
    const Gradients g = backward(model, batch, kind, qf);
    MlpModel probe = model;
    GradCheckResult result;

    auto check_param = [&](Matrix& param, const Matrix& grad) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double orig = param.data()[i];
            param.data()[i] = orig + h;
            const double lp = loss(probe, batch, kind, qf);
            const double lp_exact = qa ? loss(probe, batch, kind) : 0.0;
            param.data()[i] = orig - h;
            const double lm = loss(probe, batch, kind, qf);
            const double lm_exact = qa ? loss(probe, batch, kind) : 0.0;
            param.data()[i] = orig;
            if (qa && lp_exact != lm_exact) ++result.cell_crossings;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = grad.data()[i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
            result.max_rel_error = std::max(result.max_rel_error, std::abs(an - fd) / denom);
            ++result.checked;
        }
    };

    for (std::size_t li = 0; li < probe.layers.size(); ++li) {
        check_param(probe.layers[li].adapter.a, g.layers[li].a);
        check_param(probe.layers[li].adapter.b, g.layers[li].b);
    }
    return result;
}

}  // namespace sqft
