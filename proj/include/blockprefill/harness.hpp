// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "blockprefill/config.hpp"
#include "blockprefill/prefill_engine.hpp"
#include "blockprefill/report.hpp"
#include "blockprefill/tensor.hpp"
#include "blockprefill/toy_model.hpp"
#include "blockprefill/vision_layout.hpp"

namespace blockprefill {

/// Synthetic retrieval instance: one visual segment carries a planted direction.
struct NeedleTask {
    TokenLayout layout;
    std::size_t needle_segment = 0;
    std::vector<std::size_t> needle_positions;
    std::uint64_t seed = 0;
    double kappa = 0.0;
    double needle_strength = 0.0;
    /// Unit embedding-space direction added to every needle token.
    std::vector<double> direction;
    /// Decode-step embedding aimed at the needle, for attention-mass probes.
    std::vector<double> query_embedding;
};

struct NeedleInstance {
    Matrix embeddings;
    NeedleTask task;
};

/**
 * Builds a needle-in-haystack input for `model`.
 *
 * Every token starts as isotropic N(0, 1) noise. Needle tokens (the visual
 * segment with structure id `needle_segment`) add needle_strength·√d along a
 * fixed unit direction u. Prompt tokens add an offset whose layer-0 query,
 * after rotary encoding, points at the needle keys; κ is the ratio of that
 * aimed query component to the expected query norm of the noise, so κ = 0
 * leaves the prompt as noise.
 */
NeedleInstance gen_needle_haystack(const ModelState& model,
                                   std::uint64_t seed,
                                   const TokenLayout& layout,
                                   std::size_t needle_segment,
                                   double kappa,
                                   double needle_strength = 8.0);

struct PremiseCheck {
    /// Every needle key outscores every evictable non-needle key for every prompt query, in every layer-0 head.
    bool holds = false;
    /// min over heads and prompt rows of (min needle logit − max competitor logit).
    double margin = 0.0;
};

PremiseCheck verify_needle_premise(const ModelState& model, const Matrix& embeddings, const NeedleTask& task);

/// Fraction of needle positions present in the final cache, averaged over (layer, head).
double eval_retention(const PrefillResult& result, const NeedleTask& task);

/// Same, counting cache positions after mapping them through `source_positions`.
double eval_retention(const PrefillResult& result,
                      const NeedleTask& task,
                      std::span<const std::size_t> source_positions);

/// Decode-step attention mass on cached needle entries, averaged over (layer, head).
double decode_attention_mass(const ModelState& model,
                             const PrefillResult& result,
                             const NeedleTask& task,
                             std::span<const std::size_t> source_positions = {});

struct ReducedInput {
    TokenLayout layout;
    Matrix embeddings;
    /// Original position of every reduced token.
    std::vector<std::size_t> source_positions;
    std::size_t stride = 1;
};

/**
 * Keeps every k-th token of each visual segment, k = ⌈vision tokens / target⌉.
 * Text segments are untouched. Because each segment keeps ⌈len / k⌉ tokens the
 * result can exceed the target by at most one token per segment.
 */
ReducedInput baseline_input_reduction(const TokenLayout& layout, const Matrix& embeddings, std::size_t target_tokens);

/// Model, input and needle for one configuration.
struct Experiment {
    RunConfig config;
    ModelState model;
    NeedleInstance needle;
};

Experiment prepare_experiment(const RunConfig& config);
BudgetPlan resolve_budget_plan(const Experiment& experiment);
PrefillSettings make_settings(const RunConfig& config);

/// Whether any forward chunk boundary falls strictly inside the needle segment.
bool splits_needle(std::span<const Block> schedule, const NeedleTask& task);

struct RunOutcome {
    PrefillResult result;
    RunReport report;
};

RunOutcome run_experiment(const Experiment& experiment, const std::string& label);
RunReport run_config(const RunConfig& config, const std::string& label = "run");

struct TrendCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SweepOutcome {
    std::vector<RunReport> rows;
    std::vector<TrendCheck> checks;

    bool all_passed() const;
};

/// Full-cache and memory-bounded runs per tile (or frame) count.
SweepOutcome sweep_input_size(const RunConfig& config, std::span<const std::size_t> counts);
/// Hybrid runs per budget.
SweepOutcome sweep_budget(const RunConfig& config, std::span<const std::size_t> budgets);
/// Unaligned runs per block size, plus structure-aligned runs where the block fits a whole tile.
SweepOutcome sweep_block_size(const RunConfig& config, std::span<const std::size_t> block_sizes);
/// One run per eviction policy on the same needle instance.
SweepOutcome compare_policies(const RunConfig& config);
/// Compression at the configured budget vs. strided input reduction to the same cache size.
SweepOutcome compare_reduction(const RunConfig& config);

}  // namespace blockprefill
