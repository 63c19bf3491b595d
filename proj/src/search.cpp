// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/search.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

int RankConfig::total_rank() const noexcept {
    return std::accumulate(ranks.begin(), ranks.end(), 0);
}

void SearchParams::validate() const {
    if (turns < 0 || neighbors < 0 || step < 0) {
        throw ConfigError("search turns, neighbors and step must be nonnegative");
    }
}

RankConfig heuristic_config(const std::vector<RankSpace>& spaces) {
    RankConfig c;
    for (const auto& s : spaces) {
        // Values are decreasing, so index size/2 is the middle for odd sizes
        // and the lower middle for even sizes.
        c.ranks.push_back(s.at(s.size() / 2));
    }
    return c;
}

namespace {

// Neighborhoods up to this size are enumerated exactly; larger ones are sampled.
constexpr std::size_t kEnumerationLimit = 1u << 16;

bool offset_config(const RankConfig& anchor, const std::vector<RankSpace>& spaces,
                   const std::vector<int>& offsets, RankConfig& out) {
    out.ranks.resize(spaces.size());
    for (std::size_t l = 0; l < spaces.size(); ++l) {
        const auto idx = static_cast<long>(spaces[l].index_of(anchor.ranks[l])) + offsets[l];
        if (idx < 0 || idx >= static_cast<long>(spaces[l].size())) return false;
        out.ranks[l] = spaces[l].at(static_cast<std::size_t>(idx));
    }
    return true;
}

}  // namespace

std::vector<RankConfig> neighbor_sample(const RankConfig& anchor,
                                        const std::vector<RankSpace>& spaces,
                                        const SearchParams& params,
                                        const std::set<RankConfig>& visited, Rng& rng) {
    if (anchor.ranks.size() != spaces.size()) {
        throw ConfigError("anchor does not match the number of layers");
    }
    std::vector<RankConfig> out;
    if (params.neighbors <= 0 || params.step <= 0 || spaces.empty()) {
        return out;
    }
    const auto width = static_cast<std::size_t>(2 * params.step + 1);
    std::size_t total = 1;
    bool enumerable = true;
    for (std::size_t l = 0; l < spaces.size(); ++l) {
        if (total > kEnumerationLimit / width) {
            enumerable = false;
            break;
        }
        total *= width;
    }

    const auto wanted = static_cast<std::size_t>(params.neighbors);
    std::vector<int> offsets(spaces.size());
    RankConfig candidate;
    if (enumerable) {
        std::vector<RankConfig> pool;
        for (std::size_t code = 0; code < total; ++code) {
            std::size_t rest = code;
            bool all_zero = true;
            for (std::size_t l = 0; l < spaces.size(); ++l) {
                offsets[l] = static_cast<int>(rest % width) - params.step;
                rest /= width;
                all_zero = all_zero && offsets[l] == 0;
            }
            if (all_zero) continue;
            if (offset_config(anchor, spaces, offsets, candidate) && !visited.contains(candidate)) {
                pool.push_back(candidate);
            }
        }
        shuffle(std::span<RankConfig>(pool), rng);
        if (pool.size() > wanted) pool.resize(wanted);
        return pool;
    }

    std::set<RankConfig> seen;
    const std::size_t attempts = 64 * wanted;
    for (std::size_t a = 0; a < attempts && out.size() < wanted; ++a) {
        bool all_zero = true;
        for (std::size_t l = 0; l < spaces.size(); ++l) {
            offsets[l] = static_cast<int>(rng.below(width)) - params.step;
            all_zero = all_zero && offsets[l] == 0;
        }
        if (all_zero) continue;
        if (offset_config(anchor, spaces, offsets, candidate) && !visited.contains(candidate) &&
            seen.insert(candidate).second) {
            out.push_back(candidate);
        }
    }
    return out;
}

SearchResult hill_climb(const std::vector<RankSpace>& spaces, const SearchParams& params,
                        const ConfigEvaluator& evaluate) {
    params.validate();
    Rng rng = Rng(params.seed).derive(7);
    SearchResult r;
    r.heuristic = heuristic_config(spaces);
    r.heuristic_score = evaluate(r.heuristic);
    r.evaluations = 1;
    r.visited.insert(r.heuristic);
    RankConfig anchor = r.heuristic;
    double anchor_score = r.heuristic_score;

    for (int t = 0; t < params.turns; ++t) {
        std::vector<RankConfig> candidates = neighbor_sample(anchor, spaces, params, r.visited, rng);
        if (candidates.empty()) break;
        r.visited.insert(candidates.begin(), candidates.end());

        const RankConfig* best = nullptr;
        double best_score = 0.0;
        for (const auto& c : candidates) {
            const double score = evaluate(c);
            ++r.evaluations;
            const bool better =
                best == nullptr || score > best_score ||
                (score == best_score &&
                 (c.total_rank() < best->total_rank() ||
                  (c.total_rank() == best->total_rank() && c < *best)));
            if (better) {
                best = &c;
                best_score = score;
            }
        }
        if (best_score > anchor_score) {
            anchor = *best;
            anchor_score = best_score;
        }
        r.anchor_scores.push_back(anchor_score);
    }
    r.best = anchor;
    r.best_score = anchor_score;
    return r;
}

std::vector<RankSpace> rank_spaces_of(const MlpModel& model) {
    std::vector<RankSpace> spaces;
    for (const auto& l : model.layers) spaces.push_back(l.adapter.rank_space);
    return spaces;
}

double evaluate_config(const MlpModel& model, const RankConfig& config, const Dataset& data) {
    MlpModel probe = model;
    probe.set_active_ranks(config.ranks);
    const Matrix out = predict(probe, data.x);
    if (probe.head == TaskKind::classification) {
        return accuracy(out, data.labels);
    }
    return -mse_loss(out, data.y);
}

SearchResult hill_climb(const MlpModel& model, const SearchParams& params,
                        const Dataset& validation) {
    params.validate();
    if (validation.size() == 0) {
        throw ConfigError("validation set is empty");
    }
    std::vector<std::size_t> idx(validation.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = Rng(params.seed).derive(3);
    shuffle(std::span<std::size_t>(idx), rng);
    idx.resize(std::min(idx.size(), std::max<std::size_t>(1, params.eval_samples)));
    const Dataset proxy = validation.subset(idx);
    return hill_climb(rank_spaces_of(model), params,
                      [&](const RankConfig& c) { return evaluate_config(model, c, proxy); });
}

}  // namespace sqft
