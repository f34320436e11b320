// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace blockprefill {

enum class SegmentKind { text, tile, frame };

std::string_view to_string(SegmentKind kind);

struct Segment {
    SegmentKind kind = SegmentKind::text;
    std::size_t start = 0;
    std::size_t len = 0;
    /// Tile or frame index; absent for text.
    std::optional<std::size_t> structure_id;

    std::size_t end() const { return start + len; }
    bool is_visual() const { return kind != SegmentKind::text; }
    bool operator==(const Segment&) const = default;
};

struct Span {
    std::size_t start = 0;
    std::size_t len = 0;

    std::size_t end() const { return start + len; }
    bool contains(std::size_t pos) const { return pos >= start && pos < start + len; }
    bool operator==(const Span&) const = default;
};

enum class PromptPosition { first, last };

/**
 * Segmented multimodal token sequence.
 *
 * Segments tile [0, total_len) contiguously; exactly one text segment is the
 * prompt. Build through TokenLayout::Builder or build_layout.
 */
class TokenLayout {
public:
    class Builder {
    public:
        Builder& text(std::size_t len);
        Builder& prompt(std::size_t len);
        Builder& tiles(std::size_t count, std::size_t tokens_per_tile);
        Builder& frames(std::size_t count, std::size_t tokens_per_frame);
        TokenLayout build() const;

    private:
        void push(SegmentKind kind, std::size_t len, std::optional<std::size_t> structure_id);

        std::vector<Segment> m_segments;
        std::optional<std::size_t> m_prompt_segment;
        std::size_t m_next_tile = 0;
        std::size_t m_next_frame = 0;
        std::size_t m_cursor = 0;
    };

    /// Empty layout with no segments; only useful as a placeholder before assignment.
    TokenLayout() = default;

    const std::vector<Segment>& segments() const { return m_segments; }
    std::size_t total_len() const { return m_total_len; }
    Span prompt_span() const { return m_prompt; }

    std::size_t vision_token_total() const;
    std::size_t max_visual_segment_len() const;
    /// Index into segments() of the segment that contains `pos`.
    std::size_t segment_index_at(std::size_t pos) const;
    /// Visual segment with the given kind and structure id, if present.
    std::optional<Segment> find_visual(SegmentKind kind, std::size_t structure_id) const;
    /// First visual segment with this structure id (tiles before frames).
    std::optional<Segment> find_structure(std::size_t structure_id) const;

    bool operator==(const TokenLayout&) const = default;

private:
    TokenLayout(std::vector<Segment> segments, Span prompt);

    std::vector<Segment> m_segments;
    std::size_t m_total_len = 0;
    Span m_prompt;
};

/// Number of patch tokens for an H×W image: floor(H/P)·floor(W/P).
std::uint64_t vision_token_count(std::uint64_t height, std::uint64_t width, std::uint64_t patch);

TokenLayout build_layout(std::size_t prompt_len,
                         std::size_t tiles,
                         std::size_t tokens_per_tile,
                         std::size_t frames,
                         std::size_t tokens_per_frame,
                         PromptPosition prompt_position = PromptPosition::first);

enum class Alignment { none, structure };

struct Block {
    std::size_t start = 0;
    std::size_t end = 0;
    /// True iff no tile/frame segment straddles `end`.
    bool aligned = true;

    std::size_t size() const { return end - start; }
    bool operator==(const Block&) const = default;
};

/**
 * Splits [0, total_len) into prefill blocks of at most `block_size` tokens.
 *
 * Alignment::none cuts every `block_size` tokens. Alignment::structure packs
 * whole tile/frame segments greedily and never splits one; text segments are
 * emitted in blocks of their own (split into block_size chunks when longer).
 * A sequence no longer than block_size is always a single block.
 * Throws InvalidConfiguration when a visual segment is longer than block_size.
 */
std::vector<Block> partition_blocks(const TokenLayout& layout, std::size_t block_size, Alignment align);

/// partition_blocks restricted to [begin, end). With structure alignment `begin` must be a segment boundary.
std::vector<Block> partition_range(const TokenLayout& layout,
                                   std::size_t begin,
                                   std::size_t end,
                                   std::size_t block_size,
                                   Alignment align);

/// Largest segment boundary b ≤ limit (text segments may be cut anywhere). Returns 0 if none.
std::size_t aligned_prefix_end(const TokenLayout& layout, std::size_t limit);

/// True iff `boundary` falls strictly inside a tile/frame segment.
bool splits_visual_segment(const TokenLayout& layout, std::size_t boundary);

/// 2 · layers · heads · dim_head · precision_bytes · seq_len
std::uint64_t kv_memory_bytes(std::uint64_t layers,
                              std::uint64_t heads,
                              std::uint64_t dim_head,
                              std::uint64_t precision_bytes,
                              std::uint64_t seq_len);

}  // namespace blockprefill
