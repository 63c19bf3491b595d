// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "sqft/error.hpp"

namespace sqft {

using nlohmann::json;

Method parse_method(std::string_view name) {
    if (name == "lora") return Method::lora;
    if (name == "nls") return Method::nls;
    if (name == "sqft") return Method::sqft;
    if (name == "sqft_sparsepeft") return Method::sqft_sparsepeft;
    if (name == "sqft_qa_sparsepeft") return Method::sqft_qa_sparsepeft;
    throw ConfigError(fmt::format(
        "unknown method '{}' (expected lora, nls, sqft, sqft_sparsepeft, sqft_qa_sparsepeft)", name));
}

std::string_view to_string(Method m) {
    switch (m) {
        case Method::lora: return "lora";
        case Method::nls: return "nls";
        case Method::sqft: return "sqft";
        case Method::sqft_sparsepeft: return "sqft_sparsepeft";
        case Method::sqft_qa_sparsepeft: return "sqft_qa_sparsepeft";
    }
    return "unknown";
}

QuantMethod parse_quant_method(std::string_view name) {
    if (name == "off" || name == "none") return QuantMethod::off;
    if (name == "rtn") return QuantMethod::rtn;
    if (name == "gptq_lite" || name == "gptq") return QuantMethod::gptq_lite;
    throw ConfigError(fmt::format("unknown quantization '{}' (expected off, rtn, gptq_lite)", name));
}

std::string_view to_string(QuantMethod q) {
    switch (q) {
        case QuantMethod::off: return "off";
        case QuantMethod::rtn: return "rtn";
        case QuantMethod::gptq_lite: return "gptq_lite";
    }
    return "unknown";
}

AdapterMode adapter_mode_for(Method m) noexcept {
    switch (m) {
        case Method::sqft_sparsepeft: return AdapterMode::sparse_peft;
        case Method::sqft_qa_sparsepeft: return AdapterMode::qa_sparse_peft;
        default: return AdapterMode::vanilla_lora;
    }
}

bool method_merges(Method m) noexcept {
    return m == Method::sqft_sparsepeft || m == Method::sqft_qa_sparsepeft;
}

std::string precision_label(Method m, int bits) {
    switch (m) {
        case Method::lora:
        case Method::nls: return "FP32 + FP32";
        case Method::sqft: return fmt::format("INT{} + FP32", bits);
        case Method::sqft_sparsepeft: return "FP32";
        case Method::sqft_qa_sparsepeft: return fmt::format("INT{}", bits);
    }
    return "?";
}

std::vector<std::size_t> TaskSpec::resolved_dims() const {
    if (!dims.empty()) return dims;
    if (kind == TaskKind::regression) return {64, 64, 1};
    return {64, 64, static_cast<std::size_t>(classes)};
}

QuantMethod PipelineSpec::resolved_quant() const {
    if (quant) return *quant;
    return (method == Method::sqft || method == Method::sqft_qa_sparsepeft) ? QuantMethod::gptq_lite
                                                                             : QuantMethod::off;
}

std::vector<RankSpace> PipelineSpec::layer_rank_spaces(const std::vector<std::size_t>& dims) const {
    std::vector<int> values = ranks;
    if (method == Method::lora) {
        values = {fixed_rank ? *fixed_rank : heuristic_config({RankSpace(ranks)}).ranks.front()};
    }
    std::vector<RankSpace> spaces;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const int limit = static_cast<int>(std::min(dims[l], dims[l + 1]));
        std::vector<int> fitted;
        for (int v : values) {
            if (v <= limit) fitted.push_back(v);
        }
        // A layer narrower than every rank gets a single full-width adapter.
        if (fitted.empty()) fitted.push_back(limit);
        spaces.emplace_back(std::move(fitted));
    }
    return spaces;
}

void PipelineSpec::validate() const {
    SparsityLevel{sparsity};
    RankSpace{ranks};
    if (fixed_rank && *fixed_rank <= 0) throw ConfigError("rank must be positive");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    q_max_for(bits, range_mode);
    train.validate();
    const QuantMethod q = resolved_quant();
    const bool wants_quant = method == Method::sqft || method == Method::sqft_qa_sparsepeft;
    if (wants_quant && q == QuantMethod::off) {
        throw ConfigError(fmt::format("method {} needs quantization (quant != off)", to_string(method)));
    }
    if (!wants_quant && q != QuantMethod::off) {
        throw ConfigError(fmt::format("method {} runs on a full-precision base; set quant to off",
                                      to_string(method)));
    }
    const auto d = task.resolved_dims();
    if (d.size() < 2) throw ConfigError("task.dims needs at least input and output widths");
    for (auto v : d) {
        if (v == 0) throw ConfigError("task.dims entries must be positive");
    }
    if (task.kind == TaskKind::classification && d.back() < 2) {
        throw ConfigError("classification needs at least two output classes");
    }
    if (task.train == 0 || task.validation == 0 || task.test == 0 || task.calibration == 0 ||
        task.latent == 0) {
        throw ConfigError("task sizes must be positive");
    }
}

PipelineSpec default_spec() {
    return PipelineSpec{};
}

namespace {

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object()) {
            flatten(*it, key, out);
        } else {
            out[key] = *it;
        }
    }
}

template <typename T>
T take(std::map<std::string, json>& kv, const std::string& key, T fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        T v = it->second.get<T>();
        kv.erase(it);
        return v;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
    }
}

std::vector<int> take_ranks(std::map<std::string, json>& kv, const std::string& key,
                            std::vector<int> fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    std::vector<int> out;
    if (it->second.is_number_integer()) {
        out.push_back(it->second.get<int>());
    } else if (it->second.is_array()) {
        out = it->second.get<std::vector<int>>();
    } else if (it->second.is_string()) {
        std::stringstream ss(it->second.get<std::string>());
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    } else {
        throw ConfigError(fmt::format("config key '{}' must be a list of ranks", key));
    }
    kv.erase(it);
    return out;
}

}  // namespace

PipelineSpec parse_spec(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
    }
    if (!root.is_object()) throw ConfigError("config must be a JSON object");
    std::map<std::string, json> kv;
    flatten(root, "", kv);
    if (auto it = kv.find("quant"); it != kv.end()) {
        kv["quant.method"] = it->second;
        kv.erase(it);
    }

    PipelineSpec s;
    s.method = parse_method(take<std::string>(kv, "method", std::string(to_string(s.method))));
    s.sparsity = take<double>(kv, "sparsity", s.sparsity);
    s.score = parse_score_kind(take<std::string>(kv, "score", std::string(to_string(s.score))));
    s.group = parse_mask_group(take<std::string>(kv, "group", std::string(to_string(s.group))));
    if (kv.contains("quant.method")) {
        s.quant = parse_quant_method(take<std::string>(kv, "quant.method", "off"));
    }
    s.bits = take<int>(kv, "quant.bits", s.bits);
    s.group_size = take<std::size_t>(kv, "quant.group_size", s.group_size);
    s.range_mode = parse_range_mode(
        take<std::string>(kv, "quant.range_mode", std::string(to_string(s.range_mode))));
    s.ranks = take_ranks(kv, "ranks", s.ranks);
    if (kv.contains("rank")) s.fixed_rank = take<int>(kv, "rank", 0);
    s.alpha = take<double>(kv, "alpha", s.alpha);
    s.rank_scaling = parse_rank_scaling(
        take<std::string>(kv, "rank_scaling", std::string(to_string(s.rank_scaling))));
    s.seed = take<std::uint64_t>(kv, "seed", s.seed);

    s.train.epochs = take<int>(kv, "train.epochs", s.train.epochs);
    s.train.batch_size = take<std::size_t>(kv, "train.batch_size", s.train.batch_size);
    s.train.learning_rate = take<double>(kv, "train.learning_rate", s.train.learning_rate);
    s.train.optimizer = parse_optimizer(
        take<std::string>(kv, "train.optimizer", std::string(to_string(s.train.optimizer))));
    s.train.seed = take<std::uint64_t>(kv, "train.seed", s.train.seed);

    s.task.kind = parse_task_kind(take<std::string>(kv, "task.kind", std::string(to_string(s.task.kind))));
    s.task.dims = take<std::vector<std::size_t>>(kv, "task.dims", s.task.dims);
    s.task.train = take<std::size_t>(kv, "task.train", s.task.train);
    s.task.validation = take<std::size_t>(kv, "task.validation", s.task.validation);
    s.task.test = take<std::size_t>(kv, "task.test", s.task.test);
    s.task.calibration = take<std::size_t>(kv, "task.calibration", s.task.calibration);
    s.task.latent = take<std::size_t>(kv, "task.latent", s.task.latent);
    s.task.input_noise = take<double>(kv, "task.input_noise", s.task.input_noise);
    s.task.target_noise = take<double>(kv, "task.target_noise", s.task.target_noise);
    s.task.classes = take<int>(kv, "task.classes", s.task.classes);

    if (!kv.empty()) {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : kv) unknown.push_back(k);
        throw ConfigError(fmt::format("unknown config keys: {}", fmt::join(unknown, ", ")));
    }
    s.validate();
    return s;
}

PipelineSpec load_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_spec(ss.str());
}

std::string spec_to_json(const PipelineSpec& s) {
    json j;
    j["method"] = to_string(s.method);
    j["sparsity"] = s.sparsity;
    j["score"] = to_string(s.score);
    j["group"] = to_string(s.group);
    j["quant"] = {{"method", to_string(s.resolved_quant())},
                  {"bits", s.bits},
                  {"group_size", s.group_size},
                  {"range_mode", to_string(s.range_mode)}};
    j["ranks"] = s.ranks;
    if (s.fixed_rank) j["rank"] = *s.fixed_rank;
    j["alpha"] = s.alpha;
    j["rank_scaling"] = to_string(s.rank_scaling);
    j["train"] = {{"epochs", s.train.epochs},
                  {"batch_size", s.train.batch_size},
                  {"learning_rate", s.train.learning_rate},
                  {"optimizer", to_string(s.train.optimizer)},
                  {"seed", s.train.seed}};
    j["task"] = {{"kind", to_string(s.task.kind)},
                 {"dims", s.task.resolved_dims()},
                 {"train", s.task.train},
                 {"validation", s.task.validation},
                 {"test", s.task.test},
                 {"calibration", s.task.calibration},
                 {"latent", s.task.latent},
                 {"input_noise", s.task.input_noise},
                 {"target_noise", s.task.target_noise},
                 {"classes", s.task.classes}};
    j["seed"] = s.seed;
    return j.dump(2);
}

std::vector<std::size_t> BaseModel::dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(layers.front().weight.cols());
    for (const auto& l : layers) d.push_back(l.weight.rows());
    return d;
}

namespace {

void relu_inplace(Matrix& m) {
    for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

Matrix sample_inputs(const Matrix& basis, std::size_t n, double noise, Rng& rng) {
    const Matrix z = random_normal(basis.cols(), n, rng);
    Matrix x = matmul(basis, z);
    for (double& v : x.data()) v += noise * rng.normal();
    return x;
}

Dataset label(const BaseModel& teacher, Matrix x, TaskKind kind, double noise, Rng& rng) {
    Dataset d;
    d.kind = kind;
    Matrix out = predict(teacher, x);
    d.x = std::move(x);
    if (kind == TaskKind::regression) {
        for (double& v : out.data()) v += noise * rng.normal();
        d.y = std::move(out);
    } else {
        d.labels.resize(out.cols());
        for (std::size_t c = 0; c < out.cols(); ++c) {
            std::size_t best = 0;
            for (std::size_t r = 1; r < out.rows(); ++r) {
                if (out(r, c) > out(best, c)) best = r;
            }
            d.labels[c] = static_cast<int>(best);
        }
    }
    return d;
}

// Calibration activations (rows are samples) entering the layer after `w`.
Matrix next_activations(const Matrix& act, const Matrix& w) {
    Matrix h = matmul(act, transpose(w));
    relu_inplace(h);
    return h;
}

}  // namespace

Matrix predict(const BaseModel& model, const Matrix& x) {
    if (model.layers.empty()) throw ConfigError("model has no layers");
    Matrix h = x;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        h = matmul(model.layers[i].weight, h);
        if (i + 1 < model.layers.size()) relu_inplace(h);
    }
    return h;
}

Task make_task(const TaskSpec& spec, std::uint64_t seed) {
    const auto dims = spec.resolved_dims();
    if (dims.size() < 2) throw ConfigError("task needs at least two widths");
    Rng root(seed);
    Task t;
    t.spec = spec;
    t.teacher.head = spec.kind;
    Rng teacher_rng = root.derive(1);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const bool last = l + 2 == dims.size();
        // He scaling on hidden layers keeps activations O(1) through the ReLUs.
        const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(dims[l]));
        t.teacher.layers.push_back({random_normal(dims[l + 1], dims[l], teacher_rng, stddev), {}, {}});
    }
    Rng basis_rng = root.derive(2);
    t.input_basis = random_normal(dims.front(), spec.latent, basis_rng,
                                  1.0 / std::sqrt(static_cast<double>(spec.latent)));

    Rng train_rng = root.derive(3);
    Rng val_rng = root.derive(4);
    Rng test_rng = root.derive(5);
    Rng calib_rng = root.derive(6);
    Rng noise_rng = root.derive(7);
    t.train = label(t.teacher, sample_inputs(t.input_basis, spec.train, spec.input_noise, train_rng),
                    spec.kind, spec.target_noise, noise_rng);
    t.validation =
        label(t.teacher, sample_inputs(t.input_basis, spec.validation, spec.input_noise, val_rng),
              spec.kind, spec.target_noise, noise_rng);
    t.test = label(t.teacher, sample_inputs(t.input_basis, spec.test, spec.input_noise, test_rng),
                   spec.kind, spec.target_noise, noise_rng);
    t.calibration =
        transpose(sample_inputs(t.input_basis, spec.calibration, spec.input_noise, calib_rng));
    return t;
}

BaseModel prune_model(const BaseModel& dense, const Matrix& calibration, SparsityLevel level,
                      ScoreKind score, MaskGroup group) {
    BaseModel out;
    out.head = dense.head;
    Matrix act = calibration;
    for (std::size_t i = 0; i < dense.layers.size(); ++i) {
        const Matrix& w = dense.layers[i].weight;
        const ScoreMatrix scores = score == ScoreKind::wanda ? score_wanda(w, act) : score_magnitude(w);
        SparsityMask mask = build_mask(scores, level, group);
        Matrix pruned = apply_mask(w, mask);
        if (i + 1 < dense.layers.size()) act = next_activations(act, pruned);
        out.layers.push_back({std::move(pruned), std::move(mask), {}});
    }
    return out;
}

BaseModel quantize_model(const BaseModel& model, const Matrix& calibration, QuantMethod method,
                         int bits, std::size_t group_size, RangeMode range_mode) {
    if (method == QuantMethod::off) return model;
    BaseModel out;
    out.head = model.head;
    Matrix act = calibration;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const BaseLayer& src = model.layers[i];
        QuantizedTensor q;
        if (method == QuantMethod::rtn) {
            q = quantize_rtn(src.weight, calibrate_params(src.weight, bits, group_size, range_mode));
        } else {
            q = quantize_gptq_lite(src.weight, act, bits, group_size, range_mode).quantized;
        }
        BaseLayer layer;
        layer.weight = dequantize(q);
        layer.mask = src.mask ? *src.mask : SparsityMask::from_nonzeros(src.weight);
        layer.quantized = std::move(q);
        if (i + 1 < model.layers.size()) act = next_activations(act, layer.weight);
        out.layers.push_back(std::move(layer));
    }
    return out;
}

MlpModel attach_adapters(const BaseModel& base, AdapterMode mode,
                         const std::vector<RankSpace>& spaces, double alpha, RankScaling scaling,
                         Rng& rng) {
    if (spaces.size() != base.layers.size()) {
        throw ConfigError(fmt::format("{} rank spaces for {} layers", spaces.size(),
                                      base.layers.size()));
    }
    MlpModel m;
    m.head = base.head;
    for (std::size_t i = 0; i < base.layers.size(); ++i) {
        const BaseLayer& b = base.layers[i];
        AdapterizedLayer layer;
        layer.mode = mode;
        if (b.quantized) {
            layer.base = make_quantized_base(*b.quantized,
                                             b.mask ? *b.mask : SparsityMask::from_nonzeros(b.weight));
        } else if (b.mask) {
            layer.base = SparseBase{b.weight, *b.mask};
        } else if (mode != AdapterMode::vanilla_lora) {
            layer.base = SparseBase{b.weight, SparsityMask::from_nonzeros(b.weight)};
        } else {
            layer.base = DenseBase{b.weight};
        }
        layer.adapter = new_elastic_adapter(b.weight.cols(), b.weight.rows(), spaces[i], alpha, rng,
                                            scaling);
        m.layers.push_back(std::move(layer));
    }
    m.validate();
    return m;
}

BaseModel merge_model(const MlpModel& model) {
    model.validate();
    BaseModel out;
    out.head = model.head;
    for (const auto& layer : model.layers) {
        BaseLayer merged;
        const Matrix& w = layer.base_weight();
        switch (layer.mode) {
            case AdapterMode::sparse_peft:
                merged.weight = merge_sparsepeft(w, sparse_delta(layer.adapter, *layer.mask()),
                                                 *layer.mask());
                break;
            case AdapterMode::qa_sparse_peft: {
                QuantizedTensor q =
                    merge_qa(w, sparse_delta(layer.adapter, *layer.mask()), *layer.quant_params());
                merged.weight = dequantize(q);
                merged.quantized = std::move(q);
                break;
            }
            case AdapterMode::vanilla_lora:
                merged.weight = merge_dense(w, active_delta(layer.adapter));
                break;
        }
        out.layers.push_back(std::move(merged));
    }
    return out;
}

namespace {

void fill_common_metrics(Metrics& m, const Matrix& out, const Dataset& data,
                         const std::vector<const Matrix*>& weights) {
    if (data.kind == TaskKind::classification) {
        m.loss = cross_entropy_loss(out, data.labels);
        m.accuracy = accuracy(out, data.labels);
    } else {
        m.loss = mse_loss(out, data.y);
    }
    std::size_t zeros = 0;
    std::size_t total = 0;
    for (const Matrix* w : weights) {
        const double s = measure_sparsity(*w);
        m.layer_sparsity.push_back(s);
        zeros += static_cast<std::size_t>(std::llround(s * static_cast<double>(w->size())));
        total += w->size();
        m.total_params += w->size();
    }
    m.sparsity = total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

// Positions that are pruned in the base: masked out, or zero when no mask exists.
bool pattern_preserved(const AdapterizedLayer& layer, const Matrix& merged) {
    const SparsityMask* mask = layer.mask();
    const Matrix& w = layer.base_weight();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            const bool pruned = mask ? !mask->kept(r, c) : w(r, c) == 0.0;
            if (pruned && merged(r, c) != 0.0) return false;
        }
    }
    return true;
}

}  // namespace

Metrics evaluate(const BaseModel& model, const Dataset& data) {
    Metrics m;
    std::vector<const Matrix*> weights;
    for (const auto& l : model.layers) weights.push_back(&l.weight);
    fill_common_metrics(m, predict(model, data.x), data, weights);
    return m;
}

Metrics evaluate(const MlpModel& model, const Dataset& data) {
    model.validate();
    Metrics m;
    std::vector<Matrix> eff;
    std::vector<const Matrix*> weights;
    for (const auto& l : model.layers) eff.push_back(effective_weight(l));
    for (const auto& w : eff) weights.push_back(&w);
    const Matrix out = predict(model, data.x);
    fill_common_metrics(m, out, data, weights);
    for (const auto& l : model.layers) m.total_params += l.adapter.a.size() + l.adapter.b.size();

    bool ok = true;
    std::string note = "merge preserves pattern, precision and outputs";
    BaseModel merged;
    merged.head = model.head;
    for (std::size_t i = 0; i < model.layers.size() && ok; ++i) {
        const AdapterizedLayer& layer = model.layers[i];
        BaseLayer bl;
        try {
            bl = merge_model(MlpModel{{layer}, model.head}).layers.front();
        } catch (const InvariantError& e) {
            ok = false;
            note = fmt::format("layer {}: {}", i, e.what());
            break;
        }
        if (!pattern_preserved(layer, bl.weight)) {
            ok = false;
            note = fmt::format("layer {}: merge densifies pruned positions ({:.4f} -> {:.4f} sparse)",
                               i, measure_sparsity(layer.base_weight()), measure_sparsity(bl.weight));
        } else if (layer.is_quantized() && !bl.quantized) {
            const Matrix requant = dequantize(quantize_rtn(bl.weight, *layer.quant_params()));
            if (requant != bl.weight) {
                ok = false;
                note = fmt::format("layer {}: merged weight is not representable in the base's "
                                   "INT{} codes", i, layer.quant_params()->bits);
            }
        }
        if (ok && bl.weight != eff[i]) {
            ok = false;
            note = fmt::format("layer {}: merged weight differs from the unmerged forward", i);
        }
        merged.layers.push_back(std::move(bl));
    }
    if (ok && predict(merged, data.x) != out) {
        ok = false;
        note = "merged model output differs from the unmerged output";
    }
    m.mergeable = ok;
    m.merge_note = note;
    return m;
}

namespace {

std::string join_dims(const std::vector<std::size_t>& d) {
    return fmt::format("{}", fmt::join(d, ","));
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    return out;
}

std::vector<int> split_ints(const std::string& s, char sep) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, sep)) out.push_back(std::stoi(tok));
    return out;
}

std::string layer_name(std::size_t i, std::string_view what) {
    return fmt::format("layers.{}.{}", i, what);
}

}  // namespace

CheckpointContainer base_to_container(const BaseModel& model, bool with_masks) {
    CheckpointContainer c;
    c.set_meta("head", std::string(to_string(model.head)));
    c.set_meta("dims", join_dims(model.dims()));
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const BaseLayer& l = model.layers[i];
        if (l.quantized) {
            put_quantized(c, fmt::format("layers.{}", i), *l.quantized);
        } else {
            c.tensors.push_back(Tensor::from_matrix(layer_name(i, "weight"), l.weight));
        }
        if (with_masks && l.mask) {
            c.tensors.push_back(Tensor::from_mask(layer_name(i, "mask"), *l.mask));
        }
    }
    return c;
}

BaseModel base_from_container(const CheckpointContainer& c) {
    const auto dims = split_sizes(c.meta("dims").value_or(""));
    if (dims.size() < 2) throw ConfigError("checkpoint lacks model dims metadata");
    BaseModel m;
    m.head = parse_task_kind(c.meta("head").value_or("regression"));
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        BaseLayer l;
        if (c.find(layer_name(i, "codes"))) {
            l.quantized = get_quantized(c, fmt::format("layers.{}", i));
            l.weight = dequantize(*l.quantized);
        } else {
            l.weight = c.get(layer_name(i, "weight")).to_matrix();
        }
        if (const Tensor* t = c.find(layer_name(i, "mask"))) l.mask = t->to_mask();
        if (l.weight.rows() != dims[i + 1] || l.weight.cols() != dims[i]) {
            throw ShapeError(fmt::format("layer {} is {}x{}, dims metadata says {}x{}", i,
                                         l.weight.rows(), l.weight.cols(), dims[i + 1], dims[i]));
        }
        m.layers.push_back(std::move(l));
    }
    return m;
}

CheckpointContainer adapters_to_container(const MlpModel& model) {
    CheckpointContainer c;
    std::vector<std::string> spaces;
    std::vector<int> active;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const ElasticAdapter& a = model.layers[i].adapter;
        c.tensors.push_back(Tensor::from_matrix(layer_name(i, "lora_A"), a.a));
        c.tensors.push_back(Tensor::from_matrix(layer_name(i, "lora_B"), a.b));
        spaces.push_back(fmt::format("{}", fmt::join(a.rank_space.values(), ",")));
        active.push_back(a.active_rank);
    }
    c.set_meta("mode", std::string(to_string(model.mode())));
    if (!model.layers.empty()) {
        c.set_meta("alpha", fmt::format("{}", model.layers.front().adapter.alpha));
        c.set_meta("rank_scaling", std::string(to_string(model.layers.front().adapter.scaling)));
    }
    c.set_meta("rank_space", fmt::format("{}", fmt::join(spaces, ";")));
    c.set_meta("active_rank", fmt::format("{}", fmt::join(active, ";")));
    return c;
}

MlpModel model_from_containers(const CheckpointContainer& base, const CheckpointContainer& adapters) {
    const BaseModel b = base_from_container(base);
    const AdapterMode mode = parse_adapter_mode(adapters.meta("mode").value_or("vanilla_lora"));
    const double alpha = std::stod(adapters.meta("alpha").value_or("64"));
    const RankScaling scaling = parse_rank_scaling(adapters.meta("rank_scaling").value_or("active"));
    std::vector<RankSpace> spaces;
    {
        std::stringstream ss(adapters.meta("rank_space").value_or(""));
        std::string tok;
        while (std::getline(ss, tok, ';')) spaces.emplace_back(split_ints(tok, ','));
    }
    const std::vector<int> active = split_ints(adapters.meta("active_rank").value_or(""), ';');
    Rng unused(0);
    MlpModel m = attach_adapters(b, mode, spaces, alpha, scaling, unused);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        ElasticAdapter& a = m.layers[i].adapter;
        Matrix ma = adapters.get(layer_name(i, "lora_A")).to_matrix();
        Matrix mb = adapters.get(layer_name(i, "lora_B")).to_matrix();
        if (!ma.same_shape(a.a) || !mb.same_shape(a.b)) {
            throw ShapeError(fmt::format("adapter tensors of layer {} do not match the base", i));
        }
        a.a = std::move(ma);
        a.b = std::move(mb);
    }
    m.set_active_ranks(active);
    m.validate();
    return m;
}

namespace {

Artifact make_artifact(std::string filename, std::string role, CheckpointContainer c) {
    Artifact a{std::move(filename), std::move(role), std::move(c), 0};
    a.bytes = serialize(a.container).size();
    return a;
}

void stamp(CheckpointContainer& c, const PipelineSpec& spec, std::string_view stage) {
    c.set_meta("stage", std::string(stage));
    c.set_meta("method", std::string(to_string(spec.method)));
    c.set_meta("mode", std::string(to_string(adapter_mode_for(spec.method))));
    c.set_meta("sparsity", fmt::format("{}", spec.sparsity));
    c.set_meta("seed", std::to_string(spec.seed));
    if (spec.resolved_quant() != QuantMethod::off) {
        c.set_meta("bits", std::to_string(spec.bits));
        c.set_meta("quant", std::string(to_string(spec.resolved_quant())));
    }
}

}  // namespace

RunResult run_pipeline(const PipelineSpec& spec) {
    spec.validate();
    RunResult r;
    r.spec = spec;
    const Task task = make_task(spec.task, spec.seed);
    const Rng master(spec.seed);

    BaseModel base = prune_model(task.teacher, task.calibration, SparsityLevel(spec.sparsity),
                                 spec.score, spec.group);
    base = quantize_model(base, task.calibration, spec.resolved_quant(), spec.bits, spec.group_size,
                          spec.range_mode);

    const std::vector<RankSpace> spaces = spec.layer_rank_spaces(base.dims());
    Rng adapter_rng = master.derive(11);
    MlpModel model = attach_adapters(base, adapter_mode_for(spec.method), spaces, spec.alpha,
                                     spec.rank_scaling, adapter_rng);

    r.dense = evaluate(task.teacher, task.test);
    r.no_tune = evaluate(model, task.test);

    TrainConfig tc = spec.train;
    if (tc.seed == 0) tc.seed = master.derive(12).next_u64();
    tc.rank_sampling = spec.method == Method::lora ? RankSampling::fixed : RankSampling::uniform;
    FinetuneResult ft = finetune(std::move(model), task.train, tc);
    r.loss_history = ft.loss_history;

    r.reference = heuristic_config(spaces);
    ft.model.set_active_ranks(r.reference.ranks);
    r.trained = ft.model;
    const Metrics verdict = evaluate(r.trained, task.validation);
    r.validation = verdict;

    if (method_merges(spec.method)) {
        CheckpointContainer merged = base_to_container(merge_model(r.trained), false);
        stamp(merged, spec, "merged");
        const CheckpointContainer provenance = adapters_to_container(r.trained);
        for (const char* key : {"alpha", "rank_space", "active_rank"}) {
            merged.set_meta(key, *provenance.meta(key));
        }
        r.artifacts.push_back(make_artifact("merged.sqck", "model", std::move(merged)));
        const BaseModel reloaded = base_from_container(deserialize(serialize(r.artifacts[0].container)));
        r.final = evaluate(reloaded, task.test);
        r.final.mergeable = verdict.mergeable;
        r.final.merge_note = verdict.merge_note;
    } else {
        CheckpointContainer bc = base_to_container(base, false);
        stamp(bc, spec, "base");
        CheckpointContainer ac = adapters_to_container(r.trained);
        stamp(ac, spec, "adapter");
        ac.set_meta("alpha", fmt::format("{}", spec.alpha));
        r.artifacts.push_back(make_artifact("base.sqck", "model", std::move(bc)));
        r.artifacts.push_back(make_artifact("adapter.sqck", "adapter", std::move(ac)));
        const MlpModel reloaded =
            model_from_containers(deserialize(serialize(r.artifacts[0].container)),
                                  deserialize(serialize(r.artifacts[1].container)));
        r.final = evaluate(reloaded, task.test);
    }

    r.cost.method = spec.method;
    for (const auto& a : r.artifacts) {
        (a.role == "model" ? r.cost.model_bytes : r.cost.adapter_bytes) += a.bytes;
    }
    r.cost.mergeable = r.final.mergeable.value_or(false);
    r.cost.precision = precision_label(spec.method, spec.bits);
    r.cost.finetune_seconds = ft.wall_seconds;
    r.cost.steps_per_second =
        ft.wall_seconds > 0.0 ? static_cast<double>(ft.steps) / ft.wall_seconds : 0.0;
    return r;
}

void write_artifacts(const RunResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& a : r.artifacts) save_checkpoint(dir / a.filename, a.container);
}

CostReport cost_report(const std::vector<RunResult>& runs) {
    CostReport rep;
    const CostRow* pair = nullptr;
    const CostRow* sqft = nullptr;
    const CostRow* sparse = nullptr;
    const CostRow* qa = nullptr;
    for (const auto& r : runs) rep.rows.push_back(r.cost);
    for (const auto& row : rep.rows) {
        switch (row.method) {
            case Method::lora:
            case Method::nls:
                if (!pair) pair = &row;
                break;
            case Method::sqft: sqft = &row; break;
            case Method::sqft_sparsepeft: sparse = &row; break;
            case Method::sqft_qa_sparsepeft: qa = &row; break;
        }
    }
    if (!pair || !sqft || !sparse || !qa) {
        rep.ordering = "incomplete: the storage ordering needs lora/nls, sqft, sqft_sparsepeft and "
                       "sqft_qa_sparsepeft runs";
        return rep;
    }
    rep.ordering_holds = pair->total_bytes() > sparse->total_bytes() &&
                         sparse->total_bytes() > sqft->total_bytes() &&
                         sqft->total_bytes() > qa->total_bytes();
    rep.ordering = fmt::format("{}-pair {} > sparsepeft-merged {} > sqft-pair {} > qa-merged {}: {}",
                               to_string(pair->method), pair->total_bytes(), sparse->total_bytes(),
                               sqft->total_bytes(), qa->total_bytes(),
                               rep.ordering_holds ? "holds" : "VIOLATED");
    return rep;
}

std::vector<RunResult> compare_methods(const PipelineSpec& base_spec) {
    const Method methods[] = {Method::nls, Method::sqft, Method::sqft_sparsepeft,
                              Method::sqft_qa_sparsepeft};
    std::vector<std::future<RunResult>> jobs;
    for (Method m : methods) {
        PipelineSpec s = base_spec;
        s.method = m;
        s.quant.reset();
        jobs.push_back(std::async(std::launch::async, [s] { return run_pipeline(s); }));
    }
    std::vector<RunResult> out;
    for (auto& j : jobs) out.push_back(j.get());
    return out;
}

}  // namespace sqft
