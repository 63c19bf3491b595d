// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// sqft-forge: command-line driver for the compression pipeline.
//
//   sqft-forge prune     --config cfg.json --out out/
//   sqft-forge quantize  --in out/pruned.sqck --out out/
//   sqft-forge finetune  --base out/quantized.sqck --out out/
//   sqft-forge search    --base out/base.sqck --adapter out/adapter.sqck --turns 10 --neighbors 8
//   sqft-forge merge     --base out/base.sqck --adapter out/adapter.sqck --out out/
//   sqft-forge eval      --model out/merged.sqck
//   sqft-forge run       --config cfg.json --seed 3 --out out/
//   sqft-forge compare   --config cfg.json --format json-lines
//
// Every stage regenerates the synthetic task from (config, seed), so stage
// commands chained with the same config see the same teacher and data.

#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "sqft/error.hpp"
#include "sqft/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sqft;

namespace {

enum class Format { text, json_lines };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "sqft-out";
    Format format = Format::text;
    std::optional<std::string> method;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
    cmd->add_option("--format", c.format, "Report format")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Format>{{"text", Format::text}, {"json-lines", Format::json_lines}},
            CLI::ignore_case));
    cmd->add_option("--method", c.method, "lora | nls | sqft | sqft_sparsepeft | sqft_qa_sparsepeft");
    cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.epochs=5");
}

void set_dotted(json& root, const std::string& key, json value) {
    json* node = &root;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        json& child = (*node)[parts[i]];
        if (!child.is_object()) child = json::object();
        node = &child;
    }
    (*node)[parts.back()] = std::move(value);
}

PipelineSpec resolve_spec(const Common& c) {
    json root = json::object();
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        try {
            root = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(fmt::format("{}: {}", c.config, e.what()));
        }
    }
    for (const auto& o : c.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("--set expects key=value, got '{}'", o));
        const std::string key = o.substr(0, eq);
        const std::string raw = o.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        set_dotted(root, key, std::move(value));
    }
    if (c.method) root["method"] = *c.method;
    if (c.seed) root["seed"] = *c.seed;
    return parse_spec(root.dump());
}

class Reporter {
public:
    explicit Reporter(Format f) : format_(f) {}

    void emit(const std::string& kind, json fields) const {
        if (format_ == Format::json_lines) {
            json rec = {{"record", kind}};
            rec.update(fields);
            std::cout << rec.dump() << '\n';
            return;
        }
        std::string line = fmt::format("{:<10}", kind);
        for (auto it = fields.begin(); it != fields.end(); ++it) {
            line += fmt::format(" {}={}", it.key(), it->is_string() ? it->get<std::string>() : it->dump());
        }
        std::cout << line << '\n';
    }

    bool text() const noexcept { return format_ == Format::text; }

private:
    Format format_;
};

json metrics_json(const Metrics& m) {
    json j = {{"loss", m.loss}, {"sparsity", m.sparsity}, {"layer_sparsity", m.layer_sparsity},
              {"params", m.total_params}};
    if (m.accuracy) j["accuracy"] = *m.accuracy;
    if (m.mergeable) {
        j["mergeable"] = *m.mergeable;
        j["merge_note"] = m.merge_note;
    }
    return j;
}

void save(const Reporter& rep, const fs::path& dir, const std::string& name,
          const CheckpointContainer& c) {
    fs::create_directories(dir);
    const fs::path p = dir / name;
    save_checkpoint(p, c);
    rep.emit("artifact", {{"path", p.string()}, {"bytes", fs::file_size(p)}});
}

void stamp_stage(CheckpointContainer& c, const PipelineSpec& spec, std::string_view stage) {
    c.set_meta("stage", std::string(stage));
    c.set_meta("method", std::string(to_string(spec.method)));
    c.set_meta("seed", std::to_string(spec.seed));
}

BaseModel pruned_base(const PipelineSpec& spec, const Task& task) {
    return prune_model(task.teacher, task.calibration, SparsityLevel(spec.sparsity), spec.score, spec.group);
}

BaseModel quantized_base(const PipelineSpec& spec, const Task& task, const BaseModel& pruned) {
    QuantMethod q = spec.resolved_quant();
    if (q == QuantMethod::off) q = QuantMethod::gptq_lite;
    return quantize_model(pruned, task.calibration, q, spec.bits, spec.group_size, spec.range_mode);
}

BaseModel load_base_or(const std::string& path, const std::function<BaseModel()>& fallback) {
    if (path.empty()) return fallback();
    return base_from_container(load_checkpoint(path));
}

FinetuneResult train_adapters(const PipelineSpec& spec, const Task& task, const BaseModel& base) {
    const Rng master(spec.seed);
    Rng adapter_rng = master.derive(11);
    MlpModel model = attach_adapters(base, adapter_mode_for(spec.method),
                                     spec.layer_rank_spaces(base.dims()), spec.alpha,
                                     spec.rank_scaling, adapter_rng);
    TrainConfig tc = spec.train;
    if (tc.seed == 0) tc.seed = master.derive(12).next_u64();
    tc.rank_sampling = spec.method == Method::lora ? RankSampling::fixed : RankSampling::uniform;
    return finetune(std::move(model), task.train, tc);
}

int cmd_prune(const Common& c) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    const BaseModel pruned = pruned_base(spec, task);
    rep.emit("dense", metrics_json(evaluate(task.teacher, task.test)));
    rep.emit("pruned", metrics_json(evaluate(pruned, task.test)));
    CheckpointContainer out = base_to_container(pruned, true);
    stamp_stage(out, spec, "pruned");
    save(rep, c.out, "pruned.sqck", out);
    return 0;
}

int cmd_quantize(const Common& c, const std::string& in) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    const BaseModel pruned = load_base_or(in, [&] { return pruned_base(spec, task); });
    const BaseModel q = quantized_base(spec, task, pruned);
    rep.emit("input", metrics_json(evaluate(pruned, task.test)));
    rep.emit("quantized", metrics_json(evaluate(q, task.test)));
    CheckpointContainer out = base_to_container(q, true);
    stamp_stage(out, spec, "quantized");
    out.set_meta("bits", std::to_string(spec.bits));
    save(rep, c.out, "quantized.sqck", out);
    return 0;
}

int cmd_finetune(const Common& c, const std::string& base_path) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    const BaseModel base = load_base_or(base_path, [&] {
        BaseModel b = pruned_base(spec, task);
        if (spec.resolved_quant() != QuantMethod::off) b = quantized_base(spec, task, b);
        return b;
    });
    FinetuneResult ft = train_adapters(spec, task, base);
    ft.model.set_active_ranks(heuristic_config(rank_spaces_of(ft.model)).ranks);
    for (std::size_t e = 0; e < ft.loss_history.size(); ++e) {
        rep.emit("epoch", {{"epoch", e + 1}, {"loss", ft.loss_history[e]}});
    }
    rep.emit("finetuned", metrics_json(evaluate(ft.model, task.test)));
    rep.emit("timing", {{"steps", ft.steps}, {"seconds", ft.wall_seconds}});
    CheckpointContainer bc = base_to_container(base, true);
    stamp_stage(bc, spec, "base");
    CheckpointContainer ac = adapters_to_container(ft.model);
    stamp_stage(ac, spec, "adapter");
    save(rep, c.out, "base.sqck", bc);
    save(rep, c.out, "adapter.sqck", ac);
    return 0;
}

int cmd_search(const Common& c, const std::string& base_path, const std::string& adapter_path,
               SearchParams params) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    MlpModel model;
    if (!base_path.empty() && !adapter_path.empty()) {
        model = model_from_containers(load_checkpoint(base_path), load_checkpoint(adapter_path));
    } else {
        BaseModel b = pruned_base(spec, task);
        if (spec.resolved_quant() != QuantMethod::off) b = quantized_base(spec, task, b);
        model = train_adapters(spec, task, b).model;
    }
    params.seed = spec.seed;
    const SearchResult r = hill_climb(model, params, task.validation);
    rep.emit("heuristic", {{"ranks", r.heuristic.ranks}, {"score", r.heuristic_score}});
    for (std::size_t t = 0; t < r.anchor_scores.size(); ++t) {
        rep.emit("turn", {{"turn", t + 1}, {"anchor_score", r.anchor_scores[t]}});
    }
    rep.emit("best", {{"ranks", r.best.ranks},
                      {"score", r.best_score},
                      {"evaluations", r.evaluations},
                      {"budget", params.turns * params.neighbors + 1}});
    model.set_active_ranks(r.best.ranks);
    rep.emit("test", metrics_json(evaluate(model, task.test)));
    CheckpointContainer ac = adapters_to_container(model);
    stamp_stage(ac, spec, "searched");
    save(rep, c.out, "adapter.sqck", ac);
    return 0;
}

int cmd_merge(const Common& c, const std::string& base_path, const std::string& adapter_path,
              bool force) {
    const Reporter rep(c.format);
    if (base_path.empty() || adapter_path.empty()) {
        throw ConfigError("merge needs --base and --adapter");
    }
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    const MlpModel model = model_from_containers(load_checkpoint(base_path), load_checkpoint(adapter_path));
    const Metrics before = evaluate(model, task.test);
    rep.emit("unmerged", metrics_json(before));
    if (!before.mergeable.value_or(false) && !force) {
        throw InvariantError(fmt::format("merge refused: {} (pass --force to merge anyway)",
                                         before.merge_note));
    }
    const BaseModel merged = merge_model(model);
    rep.emit("merged", metrics_json(evaluate(merged, task.test)));
    CheckpointContainer out = base_to_container(merged, false);
    stamp_stage(out, spec, force && !before.mergeable.value_or(false) ? "force-merged" : "merged");
    save(rep, c.out, "merged.sqck", out);
    return 0;
}

int cmd_eval(const Common& c, const std::string& model_path, const std::string& adapter_path) {
    const Reporter rep(c.format);
    if (model_path.empty()) throw ConfigError("eval needs --model");
    const PipelineSpec spec = resolve_spec(c);
    const Task task = make_task(spec.task, spec.seed);
    const CheckpointContainer mc = load_checkpoint(model_path);
    if (!adapter_path.empty()) {
        rep.emit("eval", metrics_json(evaluate(model_from_containers(mc, load_checkpoint(adapter_path)),
                                               task.test)));
    } else {
        rep.emit("eval", metrics_json(evaluate(base_from_container(mc), task.test)));
    }
    return 0;
}

void report_run(const Reporter& rep, const RunResult& r) {
    const std::string m(to_string(r.spec.method));
    json dense = metrics_json(r.dense);
    dense["method"] = m;
    rep.emit("dense", dense);
    json nt = metrics_json(r.no_tune);
    nt["method"] = m;
    rep.emit("no_tune", nt);
    json fin = metrics_json(r.final);
    fin["method"] = m;
    fin["ranks"] = r.reference.ranks;
    rep.emit("final", fin);
}

int cmd_run(const Common& c) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const RunResult r = run_pipeline(spec);
    report_run(rep, r);
    write_artifacts(r, c.out);
    for (const auto& a : r.artifacts) {
        rep.emit("artifact", {{"path", (fs::path(c.out) / a.filename).string()},
                              {"role", a.role},
                              {"bytes", a.bytes}});
    }
    rep.emit("cost", {{"model_bytes", r.cost.model_bytes},
                      {"adapter_bytes", r.cost.adapter_bytes},
                      {"precision", r.cost.precision},
                      {"mergeable", r.cost.mergeable},
                      {"finetune_seconds", r.cost.finetune_seconds}});
    return 0;
}

int cmd_compare(const Common& c) {
    const Reporter rep(c.format);
    const PipelineSpec spec = resolve_spec(c);
    const std::vector<RunResult> runs = compare_methods(spec);
    const CostReport cost = cost_report(runs);
    if (rep.text()) {
        std::cout << fmt::format("{:<20} {:>9} {:>10} {:>9} {:>10} {:>12} {:>11} {:>9}\n", "method",
                                 "mergeable", "precision", "sparsity", "metric", "model_bytes",
                                 "adapter_B", "train_s");
        for (std::size_t i = 0; i < runs.size(); ++i) {
            const RunResult& r = runs[i];
            const double metric = r.final.accuracy ? *r.final.accuracy : r.final.loss;
            std::cout << fmt::format("{:<20} {:>9} {:>10} {:>9.4f} {:>10.4f} {:>12} {:>11} {:>9.2f}\n",
                                     to_string(r.spec.method), r.cost.mergeable ? "yes" : "no",
                                     r.cost.precision, r.final.sparsity, metric, r.cost.model_bytes,
                                     r.cost.adapter_bytes, r.cost.finetune_seconds);
        }
        std::cout << "storage: " << cost.ordering << '\n';
    } else {
        for (const auto& r : runs) {
            json j = metrics_json(r.final);
            j["method"] = to_string(r.spec.method);
            j["precision"] = r.cost.precision;
            j["model_bytes"] = r.cost.model_bytes;
            j["adapter_bytes"] = r.cost.adapter_bytes;
            j["finetune_seconds"] = r.cost.finetune_seconds;
            rep.emit("method", j);
        }
        rep.emit("storage", {{"ordering_holds", cost.ordering_holds}, {"ordering", cost.ordering}});
    }
    for (const auto& r : runs) write_artifacts(r, fs::path(c.out) / std::string(to_string(r.spec.method)));
    return cost.ordering_holds ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sqft-forge: sparse + quantized adapter fine-tuning pipeline"};
    app.require_subcommand(1);

    Common common;
    std::string in_path, base_path, adapter_path, model_path;
    bool force = false;
    SearchParams search;

    auto* prune = app.add_subcommand("prune", "Score and prune the teacher model");
    add_common(prune, common);

    auto* quantize = app.add_subcommand("quantize", "Post-training quantization of a (pruned) base");
    add_common(quantize, common);
    quantize->add_option("--in", in_path, "Pruned checkpoint (default: prune from the config)");

    auto* finetune_cmd = app.add_subcommand("finetune", "Train elastic adapters on a frozen base");
    add_common(finetune_cmd, common);
    finetune_cmd->add_option("--base", base_path, "Base checkpoint (default: build from the config)");

    auto* search_cmd = app.add_subcommand("search", "Hill-climb the adapter rank configuration");
    add_common(search_cmd, common);
    search_cmd->add_option("--base", base_path, "Base checkpoint");
    search_cmd->add_option("--adapter", adapter_path, "Adapter checkpoint");
    search_cmd->add_option("--turns", search.turns, "Search turns T")->capture_default_str();
    search_cmd->add_option("--neighbors", search.neighbors, "Neighbors per turn N")->capture_default_str();
    search_cmd->add_option("--step", search.step, "Max rank-index move per layer S")->capture_default_str();
    search_cmd->add_option("--eval-samples", search.eval_samples, "Proxy set size M")->capture_default_str();

    auto* merge = app.add_subcommand("merge", "Fold adapters into the base");
    add_common(merge, common);
    merge->add_option("--base", base_path, "Base checkpoint")->required();
    merge->add_option("--adapter", adapter_path, "Adapter checkpoint")->required();
    merge->add_flag("--force", force, "Merge even when the verdict is not mergeable");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--model", model_path, "Model or base checkpoint")->required();
    eval_cmd->add_option("--adapter", adapter_path, "Adapter checkpoint for pairs");

    auto* run = app.add_subcommand("run", "Full pipeline for one method");
    add_common(run, common);

    auto* compare = app.add_subcommand("compare", "Run the four canonical methods and report costs");
    add_common(compare, common);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*prune) return cmd_prune(common);
        if (*quantize) return cmd_quantize(common, in_path);
        if (*finetune_cmd) return cmd_finetune(common, base_path);
        if (*search_cmd) return cmd_search(common, base_path, adapter_path, search);
        if (*merge) return cmd_merge(common, base_path, adapter_path, force);
        if (*eval_cmd) return cmd_eval(common, model_path, adapter_path);
        if (*run) return cmd_run(common);
        if (*compare) return cmd_compare(common);
    } catch (const TrainingError& e) {
        std::cerr << "training failed: " << e.what() << " after " << e.history().size()
                  << " epochs\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 5;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
