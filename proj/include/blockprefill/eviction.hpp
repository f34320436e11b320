// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blockprefill/tensor.hpp"

namespace blockprefill {

enum class PolicyKind {
    /// Proxy-query attention mass (SnapKV-style, no pooling).
    query_aware,
    /// Negative cosine similarity to the mean key (KeyDiff-style).
    query_agnostic,
    /// Seeded uniform scores; a harness baseline.
    random_baseline,
};

struct EvictionPolicy {
    PolicyKind kind = PolicyKind::query_aware;
    std::uint64_t rng_seed = 0;

    /// Accepts the config names "snapkv", "keydiff" and "random".
    static EvictionPolicy from_name(std::string_view name, std::uint64_t rng_seed = 0);
    std::string name() const;
};

/**
 * Query-aware importance.
 *
 * For each proxy row q, α = softmax(q·Kᵀ/√d_k) over all n keys; the score of
 * key j is the mean of α_j over the proxy rows, so scores sum to 1.
 */
std::vector<double> score_query_aware(const Matrix& proxy_queries, const Matrix& keys, std::size_t d_k);

struct AgnosticScores {
    std::vector<double> scores;
    /// Keys for which the cosine was undefined (zero-norm key or zero-norm mean) and set to 0.
    std::size_t degenerate = 0;
};

/// score_j = −cos(k_j, μ) with μ the column mean of keys. O(n·d).
AgnosticScores score_query_agnostic(const Matrix& keys);

/// Uniform scores in [0, 1) from a counter-based stream keyed by `stream`.
std::vector<double> score_random(std::size_t n, std::uint64_t seed, std::uint64_t stream);

/**
 * Indices kept under a budget: all protected indices plus the best-scoring
 * unprotected ones, min(budget, n) in total, ascending. Equal scores keep the
 * earlier index. Throws InvalidConfiguration if the protected set exceeds the budget.
 */
std::vector<std::size_t> select_retained(std::span<const double> scores,
                                         std::size_t budget,
                                         std::span<const std::size_t> protected_indices);

enum class BudgetMode { fixed, dynamic };

struct BudgetPlan {
    std::vector<std::size_t> per_layer;

    std::size_t min_budget() const;
    bool operator==(const BudgetPlan&) const = default;
};

/**
 * Per-layer retention budgets.
 *
 * fixed: M for every layer. dynamic: shares proportional to per-layer
 * attention entropy, summing to layers·M, each at least `floor`; layers
 * clamped to the floor give their excess back to the others proportionally.
 * Integer rounding uses largest remainders (ties to the lower layer index).
 * This is a generic entropy-proportional stand-in, not a specific published
 * allocation rule.
 */
BudgetPlan plan_budgets(BudgetMode mode,
                        std::size_t layers,
                        std::size_t budget,
                        std::optional<std::span<const double>> layer_entropy = std::nullopt,
                        std::size_t floor = 0);

}  // namespace blockprefill
