// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sub-adapter configuration selection: the median reference configuration
// and hill-climbing over per-layer rank indices.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "sqft/adapter.hpp"
#include "sqft/tensor.hpp"
#include "sqft/train.hpp"

namespace sqft {

/// One active rank per adapterized layer.
struct RankConfig {
    std::vector<int> ranks;

    int total_rank() const noexcept;
    auto operator<=>(const RankConfig&) const = default;
};

struct SearchParams {
    int turns = 10;             ///< T
    int neighbors = 8;          ///< N
    int step = 1;               ///< S, max index move per layer
    std::size_t eval_samples = 256;  ///< M, proxy set size
    std::uint64_t seed = 0;

    void validate() const;
};

/// Per layer, the median of its rank space; for an even count the lower of
/// the two middle values.
RankConfig heuristic_config(const std::vector<RankSpace>& spaces);

/// Up to N distinct configurations whose per-layer index in the rank space
/// differs from the anchor's by at most S (and not by zero everywhere),
/// excluding anything in `visited`. Fewer are returned when the
/// neighborhood runs out.
std::vector<RankConfig> neighbor_sample(const RankConfig& anchor,
                                        const std::vector<RankSpace>& spaces,
                                        const SearchParams& params,
                                        const std::set<RankConfig>& visited, Rng& rng);

/// Higher is better.
using ConfigEvaluator = std::function<double(const RankConfig&)>;

struct SearchResult {
    RankConfig best;
    double best_score = 0.0;
    RankConfig heuristic;
    double heuristic_score = 0.0;
    std::size_t evaluations = 0;
    std::vector<double> anchor_scores;  ///< anchor score after each turn
    std::set<RankConfig> visited;
};

/// Hill climbing from the heuristic configuration. Each turn evaluates fresh
/// neighbors of the anchor and moves to the best one if it strictly beats the
/// anchor. Ties among candidates go to the lowest total rank, then the
/// lexicographically smallest configuration.
SearchResult hill_climb(const std::vector<RankSpace>& spaces, const SearchParams& params,
                        const ConfigEvaluator& evaluate);

std::vector<RankSpace> rank_spaces_of(const MlpModel& model);

/// Accuracy for classification heads, negative MSE for regression heads.
/// `model` is not modified.
double evaluate_config(const MlpModel& model, const RankConfig& config, const Dataset& data);

/// Draws a proxy set of `params.eval_samples` validation samples and climbs on it.
SearchResult hill_climb(const MlpModel& model, const SearchParams& params,
                        const Dataset& validation);

}  // namespace sqft
