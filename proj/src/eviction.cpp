// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blockprefill/errors.hpp"

namespace blockprefill {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

EvictionPolicy EvictionPolicy::from_name(std::string_view name, std::uint64_t rng_seed) {
    if (name == "snapkv" || name == "query_aware") {
        return {PolicyKind::query_aware, rng_seed};
    }
    if (name == "keydiff" || name == "query_agnostic") {
        return {PolicyKind::query_agnostic, rng_seed};
    }
    if (name == "random") {
        return {PolicyKind::random_baseline, rng_seed};
    }
    throw InvalidArgument("unknown eviction policy '" + std::string(name) + "' (expected snapkv, keydiff or random)");
}

std::string EvictionPolicy::name() const {
    switch (kind) {
    case PolicyKind::query_aware:
        return "snapkv";
    case PolicyKind::query_agnostic:
        return "keydiff";
    case PolicyKind::random_baseline:
        return "random";
    }
    return "unknown";
}

std::vector<double> score_query_aware(const Matrix& proxy_queries, const Matrix& keys, std::size_t d_k) {
    if (keys.rows() == 0) {
        throw InvalidArgument("score_query_aware: empty key set");
    }
    if (proxy_queries.rows() == 0) {
        throw InvalidArgument("score_query_aware: no proxy queries");
    }
    if (proxy_queries.cols() != keys.cols()) {
        throw InvalidArgument("score_query_aware: proxy dim " + std::to_string(proxy_queries.cols()) +
                              " != key dim " + std::to_string(keys.cols()));
    }
    if (d_k == 0) {
        throw InvalidArgument("score_query_aware: d_k must be positive");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
    const std::size_t n = keys.rows();
    std::vector<double> scores(n, 0.0);
    std::vector<double> alpha(n);
    for (std::size_t r = 0; r < proxy_queries.rows(); ++r) {
        const auto q = proxy_queries.row(r);
        for (std::size_t j = 0; j < n; ++j) {
            alpha[j] = dot(q, keys.row(j)) * scale;
        }
        softmax_inplace(alpha);
        for (std::size_t j = 0; j < n; ++j) {
            scores[j] += alpha[j];
        }
    }
    const double inv_rows = 1.0 / static_cast<double>(proxy_queries.rows());
    for (double& s : scores) {
        s *= inv_rows;
    }
    return scores;
}

AgnosticScores score_query_agnostic(const Matrix& keys) {
    if (keys.rows() == 0) {
        throw InvalidArgument("score_query_agnostic: empty key set");
    }
    const std::size_t n = keys.rows();
    const std::size_t d = keys.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const auto k = keys.row(j);
        for (std::size_t c = 0; c < d; ++c) {
            mean[c] += k[c];
        }
    }
    for (double& m : mean) {
        m /= static_cast<double>(n);
    }
    const double mean_norm = norm(mean);

    AgnosticScores out;
    out.scores.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const auto k = keys.row(j);
        const double key_norm = norm(k);
        if (key_norm == 0.0 || mean_norm == 0.0) {
            out.scores[j] = 0.0;
            ++out.degenerate;
            continue;
        }
        out.scores[j] = -dot(k, mean) / (key_norm * mean_norm);
    }
    return out;
}

std::vector<double> score_random(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
    std::vector<double> scores(n);
    const std::uint64_t base = splitmix64(seed ^ splitmix64(stream));
    for (std::size_t j = 0; j < n; ++j) {
        scores[j] = static_cast<double>(splitmix64(base + j) >> 11) * 0x1.0p-53;
    }
    return scores;
}

std::vector<std::size_t> select_retained(std::span<const double> scores,
                                         std::size_t budget,
                                         std::span<const std::size_t> protected_indices) {
    const std::size_t n = scores.size();
    std::vector<char> is_protected(n, 0);
    std::size_t protected_count = 0;
    for (auto idx : protected_indices) {
        if (idx >= n) {
            throw InvalidArgument("select_retained: protected index " + std::to_string(idx) + " out of range");
        }
        if (!is_protected[idx]) {
            is_protected[idx] = 1;
            ++protected_count;
        }
    }
    if (protected_count > budget) {
        throw InvalidConfiguration("select_retained: " + std::to_string(protected_count) +
                                   " protected entries exceed budget " + std::to_string(budget));
    }
    if (budget >= n) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
    }

    std::vector<std::size_t> candidates;
    candidates.reserve(n - protected_count);
    for (std::size_t j = 0; j < n; ++j) {
        if (!is_protected[j]) {
            candidates.push_back(j);
        }
    }
    const std::size_t take = budget - protected_count;
    const auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        return a < b;
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);
    candidates.resize(take);

    std::vector<std::size_t> keep = std::move(candidates);
    for (std::size_t j = 0; j < n; ++j) {
        if (is_protected[j]) {
            keep.push_back(j);
        }
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

std::size_t BudgetPlan::min_budget() const {
    if (per_layer.empty()) {
        throw InvalidState("BudgetPlan: empty plan");
    }
    return *std::min_element(per_layer.begin(), per_layer.end());
}

BudgetPlan plan_budgets(BudgetMode mode,
                        std::size_t layers,
                        std::size_t budget,
                        std::optional<std::span<const double>> layer_entropy,
                        std::size_t floor) {
    if (layers == 0) {
        throw InvalidArgument("plan_budgets: layers must be positive");
    }
    if (budget < floor) {
        throw InvalidConfiguration("plan_budgets: budget " + std::to_string(budget) + " below floor " +
                                   std::to_string(floor));
    }
    if (mode == BudgetMode::fixed) {
        return BudgetPlan{std::vector<std::size_t>(layers, budget)};
    }
    if (!layer_entropy) {
        throw InvalidConfiguration("plan_budgets: dynamic budgets need per-layer attention statistics");
    }
    const auto stats = *layer_entropy;
    if (stats.size() != layers) {
        throw InvalidArgument("plan_budgets: expected " + std::to_string(layers) + " layer statistics, got " +
                              std::to_string(stats.size()));
    }
    for (double s : stats) {
        if (!std::isfinite(s) || s < 0.0) {
            throw InvalidArgument("plan_budgets: layer statistics must be finite and nonnegative");
        }
    }

    const std::size_t total = layers * budget;
    std::vector<char> clamped(layers, 0);
    std::vector<double> share(layers, 0.0);
    for (;;) {
        std::size_t clamped_count = 0;
        double weight = 0.0;
        for (std::size_t l = 0; l < layers; ++l) {
            if (clamped[l]) {
                ++clamped_count;
            } else {
                weight += stats[l];
            }
        }
        const double free_total = static_cast<double>(total - clamped_count * floor);
        const std::size_t free_layers = layers - clamped_count;
        bool changed = false;
        for (std::size_t l = 0; l < layers; ++l) {
            if (clamped[l]) {
                share[l] = static_cast<double>(floor);
                continue;
            }
            share[l] = weight > 0.0 ? free_total * stats[l] / weight : free_total / static_cast<double>(free_layers);
            if (share[l] < static_cast<double>(floor)) {
                clamped[l] = 1;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
    }

    BudgetPlan plan{std::vector<std::size_t>(layers)};
    std::size_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> remainders;
    for (std::size_t l = 0; l < layers; ++l) {
        const double whole = std::floor(share[l]);
        plan.per_layer[l] = static_cast<std::size_t>(whole);
        assigned += plan.per_layer[l];
        remainders.emplace_back(share[l] - whole, l);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        return a.first > b.first;
    });
    for (std::size_t i = 0; assigned < total; ++i) {
        ++plan.per_layer[remainders[i % layers].second];
        ++assigned;
    }
    return plan;
}

}  // namespace blockprefill
