// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "blockprefill/eviction.hpp"
#include "blockprefill/kv_cache.hpp"
#include "blockprefill/toy_model.hpp"
#include "blockprefill/vision_layout.hpp"

namespace blockprefill {

enum class PrefillKind { bulk, blockwise, hybrid };

std::string_view to_string(PrefillKind kind);
PrefillKind prefill_kind_from_name(std::string_view name);

struct PrefillMode {
    PrefillKind kind = PrefillKind::hybrid;
    std::size_t block_size = 256;
    Alignment align = Alignment::none;
};

/// Where query-aware eviction takes its proxy queries from.
enum class ProxySource {
    /// Prompt query states captured while the prompt (at sequence start) is encoded.
    prompt_first,
    /// The query states of the block that triggered the eviction.
    block_local,
};

struct ProxySpec {
    ProxySource source = ProxySource::prompt_first;
    /// Token range whose query states are captured (prompt_first only).
    Span rows;
};

/// Validates the proxy source against the layout; prompt_first needs the prompt at position 0.
ProxySpec proxy_query_source(const TokenLayout& layout, ProxySource source);

enum class PrefillStage { appended, evicted };

struct PrefillEvent {
    PrefillStage stage;
    std::size_t chunk;
    Block block;
    const KvCache& cache;
    /// Proxy query rows scored against each head in this eviction round (query-aware only).
    std::size_t proxy_rows = 0;
};

struct PrefillSettings {
    PrefillMode mode;
    EvictionPolicy policy;
    ProxySource proxy_source = ProxySource::prompt_first;
    /// Entries of the block being processed survive its eviction round.
    bool protect_recent = true;
    /// Prompt entries are never evicted.
    bool protect_prompt = true;
    std::uint64_t precision_bytes = 2;
    bool measure_wall_clock = true;
    /// Called after every append and every eviction round; observes, never mutates.
    std::function<void(const PrefillEvent&)> observer;
};

struct TtftProxy {
    double wall_seconds = 0.0;
    std::uint64_t attention_flops = 0;
    std::uint64_t projection_flops = 0;
    std::size_t forward_passes = 0;

    std::uint64_t total_flops() const { return attention_flops + projection_flops; }
};

struct PrefillResult {
    KvCache cache;
    MemoryTrace trace;
    TtftProxy ttft;
    /// [layer][head] → surviving token positions, ascending.
    std::vector<std::vector<std::vector<std::size_t>>> retained_positions;
    /// Hidden states of every input token, in order.
    Matrix hidden;
    std::vector<Block> schedule;
    std::size_t eviction_rounds = 0;
    /// Query-agnostic cosines that were undefined and scored as 0.
    std::size_t degenerate_scores = 0;
};

/// Full-cache baseline: the whole sequence in one forward, no eviction.
PrefillResult prefill_bulk(const ModelState& model,
                           const TokenLayout& layout,
                           const Matrix& embeddings,
                           const PrefillSettings& settings = {});

/**
 * Block-wise prefill with online eviction.
 *
 * For each block: forward (appending its KV), then for every layer whose
 * occupancy exceeds its budget, score the entries per head and keep the
 * best `budget` of them. After each block every head holds at most its
 * layer budget; in between, at most budget + block size.
 */
PrefillResult prefill_blockwise(const ModelState& model,
                                const TokenLayout& layout,
                                const Matrix& embeddings,
                                const PrefillSettings& settings,
                                const BudgetPlan& plan);

/// First min(M, N) tokens in one forward, the remainder block-wise (M = smallest layer budget).
PrefillResult prefill_hybrid(const ModelState& model,
                             const TokenLayout& layout,
                             const Matrix& embeddings,
                             const PrefillSettings& settings,
                             const BudgetPlan& plan);

/// Dispatches on settings.mode.kind.
PrefillResult run_prefill(const ModelState& model,
                          const TokenLayout& layout,
                          const Matrix& embeddings,
                          const PrefillSettings& settings,
                          const BudgetPlan& plan);

/// Forward chunks of a hybrid run: one bulk chunk of up to `bulk_tokens`, then blocks.
std::vector<Block> hybrid_schedule(const TokenLayout& layout,
                                   std::size_t bulk_tokens,
                                   std::size_t block_size,
                                   Alignment align);

/// Per-layer mean attention entropy over the first scheduled chunk, measured on a scratch cache.
std::vector<double> measure_layer_entropy(const ModelState& model,
                                          const TokenLayout& layout,
                                          const Matrix& embeddings,
                                          const PrefillMode& mode);

}  // namespace blockprefill
