// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "blockprefill/kv_cache.hpp"
#include "blockprefill/tensor.hpp"
#include "json.hpp"

namespace blockprefill {

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t d_model = 64;
    double rope_base = 10000.0;
    std::uint64_t seed = 7;
    double mlp_ratio = 2.0;

    std::size_t d_head() const { return heads == 0 ? 0 : d_model / heads; }
    std::size_t d_ff() const;
    /// Throws InvalidArgument naming the violated constraint.
    void validate() const;
};

struct LayerWeights {
    Matrix wq;
    Matrix wk;
    Matrix wv;
    Matrix wo;
    Matrix w_up;
    Matrix w_down;
    std::vector<double> attn_norm;
    std::vector<double> mlp_norm;
};

/// Pre-norm decoder weights. Immutable after init_model.
struct ModelState {
    ModelConfig config;
    std::vector<LayerWeights> layers;

    std::uint64_t checksum() const;
    /// Same container header as the cache snapshot, plus named tensors.
    nlohmann::json to_json() const;
};

ModelState init_model(const ModelConfig& config);

/// x / rms(x) ⊙ gain, row-wise.
Matrix rms_norm(const Matrix& x, std::span<const double> gain);

struct BlockForward {
    Matrix hidden;
    /// Post-rotary query states, [layer][head] of b × d_head.
    std::vector<std::vector<Matrix>> queries;
    /// Mean attention-row entropy per layer (averaged over heads and rows).
    std::vector<double> attention_entropy;
    /// Attention weights of the block's last row over the cache, [layer][head].
    std::vector<std::vector<std::vector<double>>> last_row_attention;
    /// Σ_layer Σ_head 4 · b · cache_len · d_head (QKᵀ and AV, dense).
    std::uint64_t attention_flops = 0;
    /// Q/K/V/O and feed-forward multiply-adds, ×2.
    std::uint64_t projection_flops = 0;
};

/**
 * Runs one block of b tokens through every layer.
 *
 * Per layer the block's keys/values are appended to `cache` first, then the
 * block queries attend to every surviving cached entry plus the causal
 * prefix of the block. `start_position` must equal the cache's next
 * position. `tokens` (optional) carries per-token tags/protection and must
 * use positions start_position, start_position + 1, ...
 */
BlockForward forward_prefill_block(const ModelState& model,
                                   const Matrix& block_embeddings,
                                   KvCache& cache,
                                   std::size_t start_position,
                                   std::span<const TokenInfo> tokens = {});

struct DecodeProbe {
    /// Attention weights over the cache (including the decoded token), [layer][head].
    std::vector<std::vector<std::vector<double>>> attention;
};

/// One-token forward at `position` (≥ the cache's next position); appends its own KV.
std::vector<double> decode_step(const ModelState& model,
                                std::span<const double> embedding,
                                KvCache& cache,
                                std::size_t position,
                                DecodeProbe* probe = nullptr);

KvCache make_cache(const ModelConfig& config);

}  // namespace blockprefill
