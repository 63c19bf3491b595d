// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "helpers.hpp"
#include "sqft/error.hpp"
#include "sqft/pipeline.hpp"

using namespace sqft;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

ElasticAdapter random_adapter(std::size_t in, std::size_t out, int rank, Rng& rng) {
    ElasticAdapter a = new_elastic_adapter(in, out, RankSpace({rank}), 2.0 * rank, rng);
    a.b = random_normal(out, static_cast<std::size_t>(rank), rng, 0.05);
    return a;
}

struct SparseInstance {
    Matrix w_p;
    SparsityMask mask;
    Matrix calib;
};

SparseInstance sparse_instance(double s, Rng& rng) {
    const Matrix w = random_normal(64, 64, rng, 0.125);
    const Matrix calib = random_normal(32, 64, rng);
    SparsityMask mask = build_mask(score_wanda(w, calib), SparsityLevel(s));
    return {apply_mask(w, mask), std::move(mask), calib};
}

Verdict merge_equivalence_sparsepeft() {
    const auto t0 = Clock::now();
    Rng rng(101);
    const double levels[] = {0.3, 0.5, 0.7};
    double worst_diff = 0.0;
    double worst_margin = 1.0;
    int ok = 0;
    for (int i = 0; i < 100; ++i) {
        const double s = levels[i % 3];
        SparseInstance inst = sparse_instance(s, rng);
        AdapterizedLayer layer{SparseBase{inst.w_p, inst.mask}, random_adapter(64, 64, 8, rng),
                               AdapterMode::sparse_peft};
        const Matrix x = random_normal(64, 16, rng);
        const Matrix merged = merge_sparsepeft(inst.w_p, sparse_delta(layer.adapter, inst.mask), inst.mask);
        const double diff = max_abs_diff(forward(layer, x), matmul(merged, x));
        const double sparsity = measure_sparsity(merged);
        worst_diff = std::max(worst_diff, diff);
        worst_margin = std::min(worst_margin, sparsity - s);
        if (diff == 0.0 && sparsity >= s) ++ok;
    }
    const double secs = seconds_since(t0);
    return {ok == 100 && secs < 10.0,
            fmt::format("{}/100 exact, max_abs_diff={:g}, min(sparsity - s)={:.4f}, {:.2f}s", ok,
                        worst_diff, worst_margin, secs)};
}

Verdict merge_equivalence_qa() {
    const auto t0 = Clock::now();
    Rng rng(202);
    int ok = 0;
    std::size_t masked_nonzero = 0;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        SparseInstance inst = sparse_instance(0.5, rng);
        const QuantizedTensor q =
            quantize_gptq_lite(inst.w_p, inst.calib, 4, i % 2 ? 16 : 0).quantized;
        AdapterizedLayer layer{make_quantized_base(q, inst.mask), random_adapter(64, 64, 8, rng),
                               AdapterMode::qa_sparse_peft};
        const Matrix x = random_normal(64, 16, rng);
        const QuantizedTensor merged =
            merge_qa(layer.base_weight(), sparse_delta(layer.adapter, inst.mask), q.params);
        const Matrix deq = dequantize(merged);
        const double diff = max_abs_diff(forward(layer, x), matmul(deq, x));
        std::size_t bad = 0;
        for (std::size_t r = 0; r < 64; ++r)
            for (std::size_t c = 0; c < 64; ++c)
                if (!inst.mask.kept(r, c) && deq(r, c) != 0.0) ++bad;
        masked_nonzero += bad;
        worst = std::max(worst, diff);
        if (diff == 0.0 && bad == 0) ++ok;
    }
    const double secs = seconds_since(t0);
    return {ok == 100 && secs < 10.0,
            fmt::format("{}/100 exact at INT4, max_abs_diff={:g}, masked nonzeros={}, {:.2f}s", ok, worst,
                        masked_nonzero, secs)};
}

Verdict non_mergeability_witness() {
    Rng rng(303);
    int densified = 0;
    double max_sparsity = 0.0;
    for (int i = 0; i < 100; ++i) {
        SparseInstance inst = sparse_instance(0.5, rng);
        const ElasticAdapter a = random_adapter(64, 64, 8, rng);
        const double s = measure_sparsity(merge_dense(inst.w_p, active_delta(a)));
        max_sparsity = std::max(max_sparsity, s);
        if (s < 0.45) ++densified;
    }
    return {densified >= 99,
            fmt::format("{}/100 merges fell below 0.45 sparsity (max {:.4f})", densified, max_sparsity)};
}

Verdict quantization_fidelity() {
    Rng rng(404);
    std::size_t violations = 0;
    int dominated = 0;
    int strict = 0;
    for (int i = 0; i < 50; ++i) {
        const Matrix w = random_normal(32, 64, rng, 0.2);
        // Correlated calibration features, as real activations are.
        const Matrix basis = random_normal(64, 16, rng, 0.25);
        Matrix x = transpose(matmul(basis, random_normal(16, 128, rng)));
        for (double& v : x.data()) v += 0.1 * rng.normal();
        const std::size_t group = i % 2 ? 16 : 0;
        const QuantParams p = calibrate_params(w, 4, group);
        const Matrix d = dequantize(quantize_rtn(w, p));
        for (std::size_t r = 0; r < w.rows(); ++r)
            for (std::size_t c = 0; c < w.cols(); ++c)
                if (std::abs(w(r, c) - d(r, c)) > p.scale_at(r, c) / 2 + 1e-12) ++violations;
        const GptqResult g = quantize_gptq_lite(w, x, 4, group);
        if (g.recon_error <= g.rtn_recon_error + 1e-9) ++dominated;
        if (g.recon_error < g.rtn_recon_error - 1e-9) ++strict;
    }
    return {violations == 0 && dominated == 50 && strict >= 40,
            fmt::format("half-step violations={}, gptq<=rtn {}/50, strictly better {}/50", violations,
                        dominated, strict)};
}

MlpModel grad_model(AdapterMode mode, Rng& rng) {
    MlpModel m;
    m.head = TaskKind::regression;
    const std::size_t dims[] = {8, 6, 4};
    for (int l = 0; l < 2; ++l) {
        const Matrix w = random_normal(dims[l + 1], dims[l], rng, 0.6);
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
        layer.adapter = random_adapter(dims[l], dims[l + 1], 3, rng);
        m.layers.push_back(std::move(layer));
    }
    return m;
}

Verdict gradient_correctness() {
    Rng rng(505);
    std::string detail;
    bool pass = true;
    for (auto mode : {AdapterMode::vanilla_lora, AdapterMode::sparse_peft, AdapterMode::qa_sparse_peft}) {
        double worst = 0.0;
        std::size_t crossings = 0, checked = 0;
        for (int trial = 0; trial < 5; ++trial) {
            const MlpModel m = grad_model(mode, rng);
            Dataset d;
            d.kind = TaskKind::regression;
            d.x = random_normal(8, 12, rng);
            d.y = random_normal(4, 12, rng);
            const GradCheckResult r = finite_diff_check(m, d, LossKind::mse, 1e-5);
            worst = std::max(worst, r.max_rel_error);
            crossings += r.cell_crossings;
            checked += r.checked;
        }
        pass = pass && worst <= 1e-4;
        detail += fmt::format("{}{}={:.2e}", detail.empty() ? "" : ", ", to_string(mode), worst);
        if (mode == AdapterMode::qa_sparse_peft) {
            detail += fmt::format(" (surrogate forward, {} of {} probes crossed a cell)", crossings, checked);
        }
    }
    return {pass, "max relative error " + detail};
}

Verdict recovery() {
    std::string detail;
    bool pass = true;
    for (auto [method, factor] : {std::pair{Method::sqft_sparsepeft, 0.25}, std::pair{Method::sqft_qa_sparsepeft, 0.4}}) {
        PipelineSpec spec;
        spec.method = method;
        spec.task.kind = TaskKind::regression;
        spec.sparsity = 0.5;
        spec.train.epochs = 30;
        spec.seed = 7;
        const RunResult r = run_pipeline(spec);
        const double floor = r.dense.loss;
        const bool hurt = r.no_tune.loss >= 5.0 * floor;
        const bool recovered = r.final.loss <= factor * r.no_tune.loss;
        const bool fast = r.cost.finetune_seconds <= 60.0;
        pass = pass && hurt && recovered && fast;
        detail += fmt::format("{}{}: teacher={:.3g} no-tune={:.3g} ({:.0f}x) tuned={:.3g} ({:.3f}x, need <= {}) "
                              "{:.1f}s",
                              detail.empty() ? "" : "; ", to_string(method), floor, r.no_tune.loss,
                              r.no_tune.loss / floor, r.final.loss, r.final.loss / r.no_tune.loss, factor,
                              r.cost.finetune_seconds);
    }
    return {pass, detail};
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Verdict nls_vs_fixed_rank() {
    std::vector<double> nls, lora;
    int wins = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        PipelineSpec spec;
        spec.seed = seed;
        spec.method = Method::nls;
        const RunResult rn = run_pipeline(spec);
        spec.method = Method::lora;
        spec.fixed_rank.reset();
        const RunResult rl = run_pipeline(spec);
        if (rl.trained.active_ranks() != rn.reference.ranks) {
            return {false, "fixed-rank baseline does not match the NLS heuristic budget"};
        }
        nls.push_back(*rn.final.accuracy);
        lora.push_back(*rl.final.accuracy);
        if (nls.back() > lora.back()) ++wins;
    }
    const double mn = median(nls), ml = median(lora);
    return {mn >= ml - 0.005,
            fmt::format("median accuracy nls={:.4f} lora={:.4f} (diff {:+.2f} pp), nls wins {}/10 seeds",
                        mn, ml, 100.0 * (mn - ml), wins)};
}

Verdict hill_climbing() {
    // Trained three-layer model with 27 rank configurations.
    PipelineSpec spec;
    spec.method = Method::nls;
    spec.ranks = {8, 6, 4};
    spec.task.dims = {64, 32, 32, 8};
    spec.seed = 8;
    const RunResult run = run_pipeline(spec);
    const Task task = make_task(spec.task, spec.seed);
    SearchParams params;
    params.turns = 4;
    params.neighbors = 6;
    params.eval_samples = 256;
    params.seed = 8;
    const SearchResult sr = hill_climb(run.trained, params, task.validation);
    const bool proxy_ok = sr.best_score >= sr.heuristic_score &&
                          sr.evaluations <= static_cast<std::size_t>(params.turns * params.neighbors + 1);

    // Strictly unimodal synthetic landscapes over the appendix rank space.
    const std::vector<int> raw{32, 28, 24, 20, 16};
    const std::vector<RankSpace> spaces(3, RankSpace(raw));
    int exact = 0;
    bool budget_ok = true;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        double peak[3], weight[3];
        for (int l = 0; l < 3; ++l) {
            peak[l] = static_cast<double>(rng.below(5));
            weight[l] = rng.uniform(0.5, 2.0);
        }
        auto landscape = [&](const RankConfig& c) {
            double s = 0.0;
            for (int l = 0; l < 3; ++l) {
                const double d = static_cast<double>(spaces[l].index_of(c.ranks[l])) - peak[l];
                s -= weight[l] * d * d;
            }
            return s;
        };
        double best = -1e300;
        for (const auto& cfg : oracle::enumerate({raw, raw, raw})) best = std::max(best, landscape(RankConfig{cfg}));
        SearchParams p;
        p.turns = 10;
        p.neighbors = 8;
        p.seed = seed;
        const SearchResult r = hill_climb(spaces, p, landscape);
        budget_ok = budget_ok && r.evaluations <= static_cast<std::size_t>(p.turns * p.neighbors + 1);
        if (r.best_score == best) ++exact;
    }
    return {proxy_ok && exact == 20 && budget_ok,
            fmt::format("trained model: searched {:.4f} vs heuristic {:.4f} in {} evaluations; "
                        "unimodal optimum found {}/20, budget respected={}",
                        sr.best_score, sr.heuristic_score, sr.evaluations, exact, budget_ok)};
}

Verdict heuristic_rule() {
    const int a = heuristic_config({RankSpace({48, 32, 16})}).ranks[0];
    const int b = heuristic_config({RankSpace({32, 28, 24, 20, 16})}).ranks[0];
    return {a == 32 && b == 24, fmt::format("[48,32,16] -> {}, [32,28,24,20,16] -> {}", a, b)};
}

std::vector<std::size_t> payload_starts(const CheckpointContainer& c, std::vector<std::size_t>& ends) {
    std::vector<std::size_t> starts;
    std::size_t off = 12;
    for (const auto& t : c.tensors) {
        off += 2 + t.name.size() + 2 + 8 * t.dims.size();
        starts.push_back(off);
        off += t.payload.size();
        ends.push_back(off);
    }
    return starts;
}

Verdict checkpoint_roundtrip() {
    Rng rng(1010);
    const fs::path dir = testing::scratch_dir("acceptance-ckpt");
    int identical = 0, named = 0;
    for (int i = 0; i < 50; ++i) {
        BaseModel m;
        m.head = TaskKind::classification;
        std::vector<std::size_t> dims{16 + 8 * rng.below(4), 8 + 8 * rng.below(4), 4 + 4 * rng.below(2)};
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            m.layers.push_back({random_normal(dims[l + 1], dims[l], rng), {}, {}});
        }
        const Matrix calib = random_normal(32, dims[0], rng);
        m = prune_model(m, calib, SparsityLevel(0.5), ScoreKind::wanda, MaskGroup::per_row);
        m = quantize_model(m, calib, QuantMethod::gptq_lite, 2 + static_cast<int>(rng.below(7)),
                           i % 2 ? 4 : 0, i % 3 ? RangeMode::paper : RangeMode::full);
        Rng arng(i);
        MlpModel model = attach_adapters(m, AdapterMode::qa_sparse_peft,
                                         {RankSpace({4, 2}), RankSpace({4, 2})}, 16.0, RankScaling::active, arng);
        for (auto& l : model.layers) l.adapter.b = random_normal(l.adapter.b.rows(), l.adapter.b.cols(), rng);

        CheckpointContainer c = base_to_container(m, true);
        for (auto& t : adapters_to_container(model).tensors) c.tensors.push_back(t);
        c.tensors.push_back(Tensor::from_matrix("extra.f64", random_normal(3, 3, rng), DType::f64));
        c.set_meta("seed", std::to_string(i));

        const fs::path p = dir / fmt::format("m{}.sqck", i);
        save_checkpoint(p, c);
        const CheckpointContainer back = load_checkpoint(p);
        const auto bytes = serialize(c);
        std::ifstream f(p, std::ios::binary);
        const std::vector<std::uint8_t> disk((std::istreambuf_iterator<char>(f)), {});
        if (back == c && serialize(back) == bytes && disk == bytes) ++identical;

        std::vector<std::size_t> ends;
        const auto starts = payload_starts(c, ends);
        const std::size_t k = rng.below(c.tensors.size());
        const std::size_t cut = starts[k] + rng.below(std::max<std::size_t>(ends[k] - starts[k], 1));
        try {
            deserialize(std::span<const std::uint8_t>(bytes.data(), cut));
        } catch (const FormatError& e) {
            if (e.tensor() == c.tensors[k].name &&
                std::string(e.what()).find(c.tensors[k].name) != std::string::npos) {
                ++named;
            }
        }
    }
    return {identical == 50 && named == 50,
            fmt::format("{}/50 byte-identical roundtrips, {}/50 truncations named the tensor", identical, named)};
}

Verdict cost_ordering() {
    const CostReport rep = cost_report(compare_methods(PipelineSpec{}));
    return {rep.ordering_holds, rep.ordering};
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

Verdict determinism() {
    const fs::path root = testing::scratch_dir("acceptance-determinism");
    int same = 0, files = 0;
    for (Method m : {Method::lora, Method::nls, Method::sqft, Method::sqft_sparsepeft, Method::sqft_qa_sparsepeft}) {
        PipelineSpec spec;
        spec.method = m;
        spec.seed = 12;
        const std::string name(to_string(m));
        write_artifacts(run_pipeline(spec), root / name / "a");
        write_artifacts(run_pipeline(spec), root / name / "b");
        for (const auto& e : fs::directory_iterator(root / name / "a")) {
            ++files;
            if (file_bytes(e.path()) == file_bytes(root / name / "b" / e.path().filename())) ++same;
        }
    }
    return {same == files && files == 8, fmt::format("{}/{} checkpoints byte-identical across two runs", same, files)};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"merge-equivalence sparsepeft", merge_equivalence_sparsepeft},
        {"merge-equivalence qa-sparsepeft", merge_equivalence_qa},
        {"non-mergeability witness", non_mergeability_witness},
        {"quantization fidelity", quantization_fidelity},
        {"gradient correctness", gradient_correctness},
        {"recovery after pruning", recovery},
        {"nls vs fixed rank", nls_vs_fixed_rank},
        {"hill climbing", hill_climbing},
        {"heuristic rule", heuristic_rule},
        {"checkpoint roundtrip", checkpoint_roundtrip},
        {"storage ordering", cost_ordering},
        {"end-to-end determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, fmt::format("threw: {}", e.what())};
        }
        if (!v.pass) ++failed;
        std::printf("[%s] %2zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    v.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
