// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "blockprefill/tensor.hpp"
#include "blockprefill/vision_layout.hpp"
#include "json.hpp"

namespace blockprefill {

struct TokenTag {
    SegmentKind kind = SegmentKind::text;
    std::optional<std::size_t> structure_id;

    bool operator==(const TokenTag&) const = default;
};

/// Per-token metadata stored alongside each key/value pair.
struct TokenInfo {
    std::size_t position = 0;
    TokenTag tag;
    /// Protected entries can never be dropped by retain().
    bool is_protected = false;

    bool operator==(const TokenInfo&) const = default;
};

/// Materialized view of one cache slot.
struct CacheEntry {
    std::vector<double> key;
    std::vector<double> value;
    TokenInfo info;
};

/// Ordered entries of one (layer, head).
struct HeadStore {
    Matrix keys;
    Matrix values;
    std::vector<TokenInfo> info;

    std::size_t size() const { return info.size(); }
    std::vector<std::size_t> positions() const;
};

class KvCache {
public:
    KvCache() = default;
    KvCache(std::size_t layers, std::size_t heads, std::size_t dim_head);

    std::size_t layers() const { return m_layers; }
    std::size_t heads() const { return m_heads; }
    std::size_t dim_head() const { return m_dim; }

    /**
     * Appends one block to every head of `layer`.
     *
     * keys/values hold one b×dim_head matrix per head. Positions must be
     * strictly increasing and above the last position ever appended to the
     * layer.
     */
    void append_block(std::size_t layer,
                      std::span<const Matrix> keys,
                      std::span<const Matrix> values,
                      std::span<const TokenInfo> tokens);

    /// Keeps exactly the entries at `keep` (any order, no duplicates) in their original order.
    void retain(std::size_t layer, std::size_t head, std::span<const std::size_t> keep);

    const HeadStore& head(std::size_t layer, std::size_t head) const;
    std::size_t count(std::size_t layer, std::size_t head) const { return this->head(layer, head).size(); }
    std::size_t max_count() const;
    std::size_t total_entries() const;

    /// One past the largest position appended to `layer` so far (evicted or not).
    std::size_t next_position(std::size_t layer) const;

    std::vector<CacheEntry> entries(std::size_t layer, std::size_t head) const;

    /// 2 · Σ_{layer,head} count · dim_head · precision_bytes
    std::uint64_t footprint(std::uint64_t precision_bytes) const;

    /// Order-sensitive FNV-1a hash over keys, values and metadata.
    std::uint64_t fingerprint() const;

    /// {"layers","heads","dim","entries":[layer][head][{position,kind,structure_id,protected,key,value}]}
    nlohmann::json to_json() const;
    static KvCache from_json(const nlohmann::json& j);

    bool operator==(const KvCache& other) const;

private:
    HeadStore& mutable_head(std::size_t layer, std::size_t head);

    std::size_t m_layers = 0;
    std::size_t m_heads = 0;
    std::size_t m_dim = 0;
    std::vector<HeadStore> m_stores;
    std::vector<std::size_t> m_next_position;
};

struct TraceEvent {
    std::string label;
    std::size_t block = 0;
    /// Largest per-(layer, head) entry count at the time of the event.
    std::size_t entries_per_layer_head = 0;
    std::uint64_t modeled_bytes = 0;
};

/**
 * Time series of cache occupancy.
 *
 * Modeled bytes follow kv_memory_bytes at the current maximum per-head
 * occupancy. Events are grouped into blocks; begin_block() opens a new group
 * and record() outside of any block opens one implicitly.
 */
class MemoryTrace {
public:
    explicit MemoryTrace(std::uint64_t precision_bytes = 2) : m_precision_bytes(precision_bytes) {}

    void begin_block();
    void record(std::string label, const KvCache& cache);

    std::uint64_t global_peak() const;
    double avg_block_peak() const;
    std::size_t global_peak_entries() const;

    const std::vector<TraceEvent>& events() const { return m_events; }
    const std::vector<std::uint64_t>& block_peaks() const { return m_block_peaks; }
    std::uint64_t precision_bytes() const { return m_precision_bytes; }

private:
    std::uint64_t m_precision_bytes;
    std::vector<TraceEvent> m_events;
    std::vector<std::uint64_t> m_block_peaks;
    std::vector<std::size_t> m_block_event_counts;
    bool m_block_open = false;
};

}  // namespace blockprefill
