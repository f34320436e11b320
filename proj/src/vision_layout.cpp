// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/vision_layout.hpp"

#include <algorithm>
#include <string>

#include "blockprefill/errors.hpp"

namespace blockprefill {

std::string_view to_string(SegmentKind kind) {
    switch (kind) {
    case SegmentKind::text:
        return "text";
    case SegmentKind::tile:
        return "tile";
    case SegmentKind::frame:
        return "frame";
    }
    return "unknown";
}

void TokenLayout::Builder::push(SegmentKind kind, std::size_t len, std::optional<std::size_t> structure_id) {
    if (len == 0) {
        throw InvalidArgument("TokenLayout: zero-length " + std::string(to_string(kind)) + " segment");
    }
    m_segments.push_back(Segment{kind, m_cursor, len, structure_id});
    m_cursor += len;
}

TokenLayout::Builder& TokenLayout::Builder::text(std::size_t len) {
    push(SegmentKind::text, len, std::nullopt);
    return *this;
}

TokenLayout::Builder& TokenLayout::Builder::prompt(std::size_t len) {
    if (m_prompt_segment) {
        throw InvalidArgument("TokenLayout: a layout has exactly one prompt segment");
    }
    push(SegmentKind::text, len, std::nullopt);
    m_prompt_segment = m_segments.size() - 1;
    return *this;
}

TokenLayout::Builder& TokenLayout::Builder::tiles(std::size_t count, std::size_t tokens_per_tile) {
    for (std::size_t i = 0; i < count; ++i) {
        push(SegmentKind::tile, tokens_per_tile, m_next_tile++);
    }
    return *this;
}

TokenLayout::Builder& TokenLayout::Builder::frames(std::size_t count, std::size_t tokens_per_frame) {
    for (std::size_t i = 0; i < count; ++i) {
        push(SegmentKind::frame, tokens_per_frame, m_next_frame++);
    }
    return *this;
}

TokenLayout TokenLayout::Builder::build() const {
    if (!m_prompt_segment) {
        throw InvalidArgument("TokenLayout: no prompt segment");
    }
    const Segment& p = m_segments[*m_prompt_segment];
    return TokenLayout(m_segments, Span{p.start, p.len});
}

TokenLayout::TokenLayout(std::vector<Segment> segments, Span prompt)
    : m_segments(std::move(segments)), m_prompt(prompt) {
    for (const auto& s : m_segments) {
        m_total_len += s.len;
    }
}

std::size_t TokenLayout::vision_token_total() const {
    std::size_t total = 0;
    for (const auto& s : m_segments) {
        if (s.is_visual()) {
            total += s.len;
        }
    }
    return total;
}

std::size_t TokenLayout::max_visual_segment_len() const {
    std::size_t longest = 0;
    for (const auto& s : m_segments) {
        if (s.is_visual()) {
            longest = std::max(longest, s.len);
        }
    }
    return longest;
}

std::size_t TokenLayout::segment_index_at(std::size_t pos) const {
    if (pos >= m_total_len) {
        throw InvalidArgument("TokenLayout: position " + std::to_string(pos) + " beyond sequence end");
    }
    const auto it = std::upper_bound(m_segments.begin(), m_segments.end(), pos, [](std::size_t p, const Segment& s) {
        return p < s.start;
    });
    return static_cast<std::size_t>(std::distance(m_segments.begin(), it)) - 1;
}

std::optional<Segment> TokenLayout::find_visual(SegmentKind kind, std::size_t structure_id) const {
    for (const auto& s : m_segments) {
        if (s.kind == kind && s.structure_id == structure_id) {
            return s;
        }
    }
    return std::nullopt;
}

std::optional<Segment> TokenLayout::find_structure(std::size_t structure_id) const {
    if (auto tile = find_visual(SegmentKind::tile, structure_id)) {
        return tile;
    }
    return find_visual(SegmentKind::frame, structure_id);
}

std::uint64_t vision_token_count(std::uint64_t height, std::uint64_t width, std::uint64_t patch) {
    if (patch == 0) {
        throw InvalidArgument("vision_token_count: patch size must be positive");
    }
    if (height == 0 || width == 0) {
        throw InvalidArgument("vision_token_count: image dimensions must be positive");
    }
    return (height / patch) * (width / patch);
}

TokenLayout build_layout(std::size_t prompt_len,
                         std::size_t tiles,
                         std::size_t tokens_per_tile,
                         std::size_t frames,
                         std::size_t tokens_per_frame,
                         PromptPosition prompt_position) {
    if (prompt_len == 0) {
        throw InvalidArgument("build_layout: prompt_len must be at least 1");
    }
    if (tiles > 0 && frames > 0) {
        throw InvalidArgument("build_layout: tiles and frames in one call; compose mixed layouts with TokenLayout::Builder");
    }
    if ((tiles > 0 && tokens_per_tile == 0) || (frames > 0 && tokens_per_frame == 0)) {
        throw InvalidArgument("build_layout: zero-length visual segment");
    }
    TokenLayout::Builder builder;
    if (prompt_position == PromptPosition::first) {
        builder.prompt(prompt_len);
    }
    builder.tiles(tiles, tokens_per_tile).frames(frames, tokens_per_frame);
    if (prompt_position == PromptPosition::last) {
        builder.prompt(prompt_len);
    }
    return builder.build();
}

bool splits_visual_segment(const TokenLayout& layout, std::size_t boundary) {
    if (boundary == 0 || boundary >= layout.total_len()) {
        return false;
    }
    const Segment& s = layout.segments()[layout.segment_index_at(boundary)];
    return s.is_visual() && s.start != boundary;
}

std::size_t aligned_prefix_end(const TokenLayout& layout, std::size_t limit) {
    std::size_t end = 0;
    for (const auto& s : layout.segments()) {
        if (s.end() <= limit) {
            end = s.end();
            continue;
        }
        if (!s.is_visual() && s.start < limit) {
            end = limit;
        }
        break;
    }
    return end;
}

std::vector<Block> partition_range(const TokenLayout& layout,
                                   std::size_t begin,
                                   std::size_t end,
                                   std::size_t block_size,
                                   Alignment align) {
    if (block_size == 0) {
        throw InvalidArgument("partition_blocks: block size must be at least 1");
    }
    if (begin > end || end > layout.total_len()) {
        throw InvalidArgument("partition_blocks: range out of bounds");
    }
    std::vector<Block> blocks;
    if (begin < end && end - begin <= block_size) {
        blocks.push_back(Block{begin, end, !splits_visual_segment(layout, end)});
        return blocks;
    }
    if (align == Alignment::none) {
        for (std::size_t s = begin; s < end; s += block_size) {
            const std::size_t e = std::min(end, s + block_size);
            blocks.push_back(Block{s, e, !splits_visual_segment(layout, e)});
        }
        return blocks;
    }

    const std::size_t longest = layout.max_visual_segment_len();
    if (block_size < longest) {
        throw InvalidConfiguration("partition_blocks: structure alignment needs block size >= longest tile/frame (" +
                                   std::to_string(block_size) + " < " + std::to_string(longest) + ")");
    }
    if (begin < end && splits_visual_segment(layout, begin)) {
        throw InvalidArgument("partition_blocks: aligned range must start on a segment boundary");
    }

    std::size_t open_start = begin;
    std::size_t open_end = begin;
    auto close = [&] {
        if (open_end > open_start) {
            blocks.push_back(Block{open_start, open_end, true});
        }
        open_start = open_end;
    };
    for (const auto& seg : layout.segments()) {
        const std::size_t s = std::max(seg.start, begin);
        const std::size_t e = std::min(seg.end(), end);
        if (s >= e) {
            continue;
        }
        if (!seg.is_visual()) {
            close();
            for (std::size_t c = s; c < e; c += block_size) {
                blocks.push_back(Block{c, std::min(e, c + block_size), true});
            }
            open_start = open_end = e;
            continue;
        }
        if (open_end - open_start + (e - s) > block_size) {
            close();
        }
        open_end = e;
    }
    close();
    return blocks;
}

std::vector<Block> partition_blocks(const TokenLayout& layout, std::size_t block_size, Alignment align) {
    return partition_range(layout, 0, layout.total_len(), block_size, align);
}

std::uint64_t kv_memory_bytes(std::uint64_t layers,
                              std::uint64_t heads,
                              std::uint64_t dim_head,
                              std::uint64_t precision_bytes,
                              std::uint64_t seq_len) {
    return 2 * layers * heads * dim_head * precision_bytes * seq_len;
}

}  // namespace blockprefill
