// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/prefill_engine.hpp"

#include <algorithm>
#include <chrono>
#include <string>

#include "blockprefill/errors.hpp"

namespace blockprefill {

namespace {

void check_inputs(const ModelState& model, const TokenLayout& layout, const Matrix& embeddings) {
    if (embeddings.rows() != layout.total_len()) {
        throw InvalidArgument("prefill: " + std::to_string(embeddings.rows()) + " embeddings for a layout of " +
                              std::to_string(layout.total_len()) + " tokens");
    }
    if (embeddings.cols() != model.config.d_model) {
        throw InvalidArgument("prefill: embedding width " + std::to_string(embeddings.cols()) + " != d_model " +
                              std::to_string(model.config.d_model));
    }
}

std::vector<TokenInfo> block_tokens(const TokenLayout& layout, const Block& block, bool protect_prompt) {
    std::vector<TokenInfo> tokens;
    tokens.reserve(block.size());
    const Span prompt = layout.prompt_span();
    std::size_t seg = layout.segment_index_at(block.start);
    for (std::size_t pos = block.start; pos < block.end; ++pos) {
        while (layout.segments()[seg].end() <= pos) {
            ++seg;
        }
        const Segment& s = layout.segments()[seg];
        tokens.push_back(TokenInfo{pos, TokenTag{s.kind, s.structure_id}, protect_prompt && prompt.contains(pos)});
    }
    return tokens;
}

std::uint64_t score_stream(std::size_t layer, std::size_t head, std::size_t round) {
    return (static_cast<std::uint64_t>(round) << 32) ^ (static_cast<std::uint64_t>(layer) << 16) ^ head;
}

/// Shared driver for every mode: forward each chunk, evict after it when over budget.
PrefillResult execute(const ModelState& model,
                      const TokenLayout& layout,
                      const Matrix& embeddings,
                      const PrefillSettings& settings,
                      const std::vector<Block>& schedule,
                      const BudgetPlan* plan) {
    check_inputs(model, layout, embeddings);
    const auto& cfg = model.config;
    const bool query_aware = plan != nullptr && settings.policy.kind == PolicyKind::query_aware;

    if (plan != nullptr) {
        if (plan->per_layer.size() != cfg.layers) {
            throw InvalidConfiguration("prefill: budget plan has " + std::to_string(plan->per_layer.size()) +
                                       " layers, model has " + std::to_string(cfg.layers));
        }
        if (plan->min_budget() == 0) {
            throw InvalidConfiguration("prefill: budget must be at least 1");
        }
        if (settings.protect_recent) {
            std::size_t largest_evicting_block = 0;
            for (const auto& b : schedule) {
                if (b.end > plan->min_budget()) {
                    largest_evicting_block = std::max(largest_evicting_block, b.size());
                }
            }
            if (largest_evicting_block > plan->min_budget()) {
                throw InvalidConfiguration("prefill: budget " + std::to_string(plan->min_budget()) +
                                           " is smaller than the protected recent block of " +
                                           std::to_string(largest_evicting_block) + " tokens");
            }
        }
    }

    ProxySpec proxy;
    if (query_aware) {
        proxy = proxy_query_source(layout, settings.proxy_source);
    }

    PrefillResult result;
    result.cache = make_cache(cfg);
    result.trace = MemoryTrace(settings.precision_bytes);
    result.schedule = schedule;
    result.hidden = Matrix(layout.total_len(), cfg.d_model);

    std::vector<std::vector<Matrix>> captured(cfg.layers, std::vector<Matrix>(cfg.heads));
    const auto t0 = std::chrono::steady_clock::now();

    for (std::size_t chunk = 0; chunk < schedule.size(); ++chunk) {
        const Block& block = schedule[chunk];
        result.trace.begin_block();
        const auto tokens = block_tokens(layout, block, settings.protect_prompt);
        BlockForward fwd = forward_prefill_block(model, embeddings.slice_rows(block.start, block.end), result.cache,
                                                 block.start, tokens);
        std::copy(fwd.hidden.data().begin(), fwd.hidden.data().end(),
                  result.hidden.data().begin() + static_cast<std::ptrdiff_t>(block.start * cfg.d_model));
        result.ttft.attention_flops += fwd.attention_flops;
        result.ttft.projection_flops += fwd.projection_flops;
        ++result.ttft.forward_passes;

        if (query_aware && proxy.source == ProxySource::prompt_first) {
            const std::size_t lo = std::max(block.start, proxy.rows.start);
            const std::size_t hi = std::min(block.end, proxy.rows.end());
            if (lo < hi) {
                for (std::size_t l = 0; l < cfg.layers; ++l) {
                    for (std::size_t h = 0; h < cfg.heads; ++h) {
                        captured[l][h].append_rows(fwd.queries[l][h].slice_rows(lo - block.start, hi - block.start));
                    }
                }
            }
        }

        result.trace.record("append", result.cache);
        if (settings.observer) {
            settings.observer(PrefillEvent{PrefillStage::appended, chunk, block, result.cache});
        }
        if (plan == nullptr) {
            continue;
        }

        bool evicted = false;
        std::size_t proxy_rows = 0;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::size_t budget = plan->per_layer[l];
            if (result.cache.count(l, 0) <= budget) {
                continue;
            }
            evicted = true;
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                const HeadStore& store = result.cache.head(l, h);
                std::vector<std::size_t> protected_idx;
                for (std::size_t i = 0; i < store.size(); ++i) {
                    if (store.info[i].is_protected || (settings.protect_recent && store.info[i].position >= block.start)) {
                        protected_idx.push_back(i);
                    }
                }
                std::vector<double> scores;
                switch (settings.policy.kind) {
                case PolicyKind::query_aware: {
                    const Matrix& proxies =
                        proxy.source == ProxySource::prompt_first ? captured[l][h] : fwd.queries[l][h];
                    if (proxies.rows() == 0) {
                        throw InvalidState("prefill: no proxy queries captured before the first eviction");
                    }
                    proxy_rows = proxies.rows();
                    scores = score_query_aware(proxies, store.keys, cfg.d_head());
                    break;
                }
                case PolicyKind::query_agnostic: {
                    auto agnostic = score_query_agnostic(store.keys);
                    result.degenerate_scores += agnostic.degenerate;
                    scores = std::move(agnostic.scores);
                    break;
                }
                case PolicyKind::random_baseline:
                    scores = score_random(store.size(), settings.policy.rng_seed,
                                          score_stream(l, h, result.eviction_rounds));
                    break;
                }
                const auto keep = select_retained(scores, budget, protected_idx);
                result.cache.retain(l, h, keep);
            }
        }
        if (evicted) {
            ++result.eviction_rounds;
            result.trace.record("evict", result.cache);
            if (settings.observer) {
                settings.observer(PrefillEvent{PrefillStage::evicted, chunk, block, result.cache, proxy_rows});
            }
        }
    }

    if (settings.measure_wall_clock) {
        result.ttft.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.retained_positions.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            result.retained_positions[l].push_back(result.cache.head(l, h).positions());
        }
    }
    return result;
}

}  // namespace

std::string_view to_string(PrefillKind kind) {
    switch (kind) {
    case PrefillKind::bulk:
        return "bulk";
    case PrefillKind::blockwise:
        return "blockwise";
    case PrefillKind::hybrid:
        return "hybrid";
    }
    return "unknown";
}

PrefillKind prefill_kind_from_name(std::string_view name) {
    if (name == "bulk") {
        return PrefillKind::bulk;
    }
    if (name == "blockwise") {
        return PrefillKind::blockwise;
    }
    if (name == "hybrid") {
        return PrefillKind::hybrid;
    }
    throw InvalidArgument("unknown prefill mode '" + std::string(name) + "' (expected bulk, blockwise or hybrid)");
}

ProxySpec proxy_query_source(const TokenLayout& layout, ProxySource source) {
    if (source == ProxySource::block_local) {
        return ProxySpec{source, Span{}};
    }
    const Span prompt = layout.prompt_span();
    if (prompt.start != 0) {
        throw InvalidConfiguration("proxy source prompt_first needs the prompt at the start of the sequence "
                                   "(prompt starts at token " +
                                   std::to_string(prompt.start) + "); use block_local");
    }
    return ProxySpec{source, prompt};
}

std::vector<Block> hybrid_schedule(const TokenLayout& layout,
                                   std::size_t bulk_tokens,
                                   std::size_t block_size,
                                   Alignment align) {
    std::size_t first = std::min(bulk_tokens, layout.total_len());
    if (align == Alignment::structure) {
        first = aligned_prefix_end(layout, first);
    }
    std::vector<Block> schedule;
    if (first > 0) {
        schedule.push_back(Block{0, first, !splits_visual_segment(layout, first)});
    }
    const auto rest = partition_range(layout, first, layout.total_len(), block_size, align);
    schedule.insert(schedule.end(), rest.begin(), rest.end());
    return schedule;
}

PrefillResult prefill_bulk(const ModelState& model,
                           const TokenLayout& layout,
                           const Matrix& embeddings,
                           const PrefillSettings& settings) {
    check_inputs(model, layout, embeddings);
    const std::vector<Block> schedule{Block{0, layout.total_len(), true}};
    return execute(model, layout, embeddings, settings, schedule, nullptr);
}

PrefillResult prefill_blockwise(const ModelState& model,
                                const TokenLayout& layout,
                                const Matrix& embeddings,
                                const PrefillSettings& settings,
                                const BudgetPlan& plan) {
    const auto schedule = partition_blocks(layout, settings.mode.block_size, settings.mode.align);
    return execute(model, layout, embeddings, settings, schedule, &plan);
}

PrefillResult prefill_hybrid(const ModelState& model,
                             const TokenLayout& layout,
                             const Matrix& embeddings,
                             const PrefillSettings& settings,
                             const BudgetPlan& plan) {
    if (plan.per_layer.empty()) {
        throw InvalidConfiguration("prefill_hybrid: empty budget plan");
    }
    const auto schedule = hybrid_schedule(layout, plan.min_budget(), settings.mode.block_size, settings.mode.align);
    return execute(model, layout, embeddings, settings, schedule, &plan);
}

PrefillResult run_prefill(const ModelState& model,
                          const TokenLayout& layout,
                          const Matrix& embeddings,
                          const PrefillSettings& settings,
                          const BudgetPlan& plan) {
    switch (settings.mode.kind) {
    case PrefillKind::bulk:
        return prefill_bulk(model, layout, embeddings, settings);
    case PrefillKind::blockwise:
        return prefill_blockwise(model, layout, embeddings, settings, plan);
    case PrefillKind::hybrid:
        return prefill_hybrid(model, layout, embeddings, settings, plan);
    }
    throw InvalidArgument("run_prefill: unknown mode");
}

std::vector<double> measure_layer_entropy(const ModelState& model,
                                          const TokenLayout& layout,
                                          const Matrix& embeddings,
                                          const PrefillMode& mode) {
    check_inputs(model, layout, embeddings);
    const auto blocks = partition_blocks(layout, mode.block_size, mode.align);
    const Block& first = blocks.front();
    KvCache scratch = make_cache(model.config);
    const auto fwd = forward_prefill_block(model, embeddings.slice_rows(first.start, first.end), scratch, first.start);
    return fwd.attention_entropy;
}

}  // namespace blockprefill
