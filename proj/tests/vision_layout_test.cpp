// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/vision_layout.hpp"

#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "blockprefill/errors.hpp"

namespace blockprefill {
namespace {

TEST(VisionTokenCount, Examples) {
    EXPECT_EQ(vision_token_count(14, 14, 14), 1u);
    EXPECT_EQ(vision_token_count(28, 28, 14), 4u);
    EXPECT_EQ(vision_token_count(3840, 2160, 14), 42196u);
    EXPECT_GT(vision_token_count(3840, 2160, 14), 42000u);
    EXPECT_EQ(vision_token_count(13, 100, 14), 0u);
}

TEST(VisionTokenCount, RejectsZeroInputs) {
    EXPECT_THROW(vision_token_count(28, 28, 0), InvalidArgument);
    EXPECT_THROW(vision_token_count(0, 28, 14), InvalidArgument);
}

TEST(VisionTokenCount, MonotoneInEachArgument) {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::uint64_t h = 1 + rng() % 5000;
        const std::uint64_t w = 1 + rng() % 5000;
        const std::uint64_t p = 1 + rng() % 64;
        const std::uint64_t base = vision_token_count(h, w, p);
        EXPECT_LE(base, vision_token_count(h + 1 + rng() % 100, w, p));
        EXPECT_LE(base, vision_token_count(h, w + 1 + rng() % 100, p));
        EXPECT_GE(base, vision_token_count(h, w, p + 1 + rng() % 8));
    }
}

TEST(BuildLayout, PaperScaleConfigurations) {
    const TokenLayout tiles = build_layout(32, 36, 256, 0, 0);
    EXPECT_EQ(tiles.vision_token_total(), 9216u);
    EXPECT_EQ(tiles.total_len(), 32u + 9216u);
    EXPECT_EQ(tiles.segments().size(), 37u);

    const TokenLayout frames = build_layout(32, 0, 0, 32, 256);
    EXPECT_EQ(frames.vision_token_total(), 8192u);
    EXPECT_EQ(frames.segments().back().kind, SegmentKind::frame);
    EXPECT_EQ(frames.segments().back().structure_id, std::optional<std::size_t>(31));
}

TEST(BuildLayout, TextOnly) {
    const TokenLayout layout = build_layout(7, 0, 0, 0, 0);
    EXPECT_EQ(layout.total_len(), 7u);
    ASSERT_EQ(layout.segments().size(), 1u);
    EXPECT_EQ(layout.prompt_span(), (Span{0, 7}));
    EXPECT_EQ(layout.vision_token_total(), 0u);
}

TEST(BuildLayout, PromptLastAndStructureLookup) {
    const TokenLayout layout = build_layout(4, 3, 5, 0, 0, PromptPosition::last);
    EXPECT_EQ(layout.prompt_span(), (Span{15, 4}));
    const auto tile = layout.find_visual(SegmentKind::tile, 1);
    ASSERT_TRUE(tile);
    EXPECT_EQ(tile->start, 5u);
    EXPECT_EQ(tile->len, 5u);
    EXPECT_FALSE(layout.find_visual(SegmentKind::frame, 1));
    EXPECT_EQ(layout.segment_index_at(14), 2u);
    EXPECT_EQ(layout.segment_index_at(15), 3u);
    EXPECT_THROW(layout.segment_index_at(19), InvalidArgument);
}

TEST(BuildLayout, Errors) {
    EXPECT_THROW(build_layout(0, 2, 4, 0, 0), InvalidArgument);
    EXPECT_THROW(build_layout(4, 2, 0, 0, 0), InvalidArgument);
    EXPECT_THROW(build_layout(4, 2, 4, 2, 4), InvalidArgument);
}

TEST(Builder, MixedLayoutsCompose) {
    const TokenLayout layout = TokenLayout::Builder().prompt(3).tiles(2, 4).text(2).frames(1, 6).build();
    EXPECT_EQ(layout.total_len(), 3u + 8u + 2u + 6u);
    EXPECT_EQ(layout.max_visual_segment_len(), 6u);
    EXPECT_EQ(layout.vision_token_total(), 14u);
    EXPECT_THROW(TokenLayout::Builder().tiles(1, 4).build(), InvalidArgument);
    EXPECT_THROW(TokenLayout::Builder().prompt(1).prompt(1).build(), InvalidArgument);
}

TEST(PartitionBlocks, FixedSizeChunks) {
    const auto blocks = partition_blocks(build_layout(10, 0, 0, 0, 0), 4, Alignment::none);
    const std::vector<Block> expected{{0, 4, true}, {4, 8, true}, {8, 10, true}};
    EXPECT_EQ(blocks, expected);
}

TEST(PartitionBlocks, StructureAlignedOneTilePerBlock) {
    const TokenLayout layout = build_layout(1, 3, 3, 0, 0, PromptPosition::last);
    const auto blocks = partition_blocks(layout, 4, Alignment::structure);
    const std::vector<Block> expected{{0, 3, true}, {3, 6, true}, {6, 9, true}, {9, 10, true}};
    EXPECT_EQ(blocks, expected);
}

TEST(PartitionBlocks, UnalignedBoundariesAreFlagged) {
    const TokenLayout layout = build_layout(1, 3, 3, 0, 0, PromptPosition::last);
    const auto blocks = partition_blocks(layout, 4, Alignment::none);
    ASSERT_EQ(blocks.size(), 3u);
    EXPECT_FALSE(blocks[0].aligned);
    EXPECT_FALSE(blocks[1].aligned);
    EXPECT_TRUE(blocks[2].aligned);
}

TEST(PartitionBlocks, LargeBlockIsSingle) {
    const TokenLayout layout = build_layout(5, 4, 6, 0, 0);
    for (Alignment a : {Alignment::none, Alignment::structure}) {
        const auto blocks = partition_blocks(layout, 1000, a);
        ASSERT_EQ(blocks.size(), 1u);
        EXPECT_EQ(blocks[0], (Block{0, 29, true}));
    }
}

TEST(PartitionBlocks, PacksWholeTilesGreedily) {
    const TokenLayout layout = build_layout(2, 5, 3, 0, 0);
    const auto blocks = partition_blocks(layout, 7, Alignment::structure);
    const std::vector<Block> expected{{0, 2, true}, {2, 8, true}, {8, 14, true}, {14, 17, true}};
    EXPECT_EQ(blocks, expected);
}

TEST(PartitionBlocks, Errors) {
    const TokenLayout layout = build_layout(2, 3, 5, 0, 0);
    EXPECT_THROW(partition_blocks(layout, 4, Alignment::structure), InvalidConfiguration);
    EXPECT_THROW(partition_blocks(layout, 0, Alignment::none), InvalidArgument);
    EXPECT_THROW(partition_range(layout, 3, 10, 5, Alignment::structure), InvalidArgument);
    EXPECT_THROW(partition_range(layout, 0, 99, 5, Alignment::none), InvalidArgument);
}

TEST(AlignedPrefix, StopsAtSegmentBoundaries) {
    const TokenLayout layout = build_layout(2, 3, 5, 0, 0);
    EXPECT_EQ(aligned_prefix_end(layout, 1), 1u);
    EXPECT_EQ(aligned_prefix_end(layout, 6), 2u);
    EXPECT_EQ(aligned_prefix_end(layout, 12), 12u);
    EXPECT_EQ(aligned_prefix_end(layout, 100), 17u);
    EXPECT_TRUE(splits_visual_segment(layout, 4));
    EXPECT_FALSE(splits_visual_segment(layout, 7));
    EXPECT_FALSE(splits_visual_segment(layout, 1));
}

TokenLayout random_layout(std::mt19937_64& rng) {
    TokenLayout::Builder builder;
    const std::size_t pieces = 1 + rng() % 6;
    const std::size_t prompt_at = rng() % (pieces + 1);
    for (std::size_t i = 0; i <= pieces; ++i) {
        if (i == prompt_at) {
            builder.prompt(1 + rng() % 12);
            continue;
        }
        switch (rng() % 3) {
        case 0:
            builder.text(1 + rng() % 10);
            break;
        case 1:
            builder.tiles(1 + rng() % 4, 1 + rng() % 15);
            break;
        default:
            builder.frames(1 + rng() % 4, 1 + rng() % 15);
            break;
        }
    }
    return builder.build();
}

TEST(PartitionBlocks, RandomLayoutsAreCoveredExactlyOnce) {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 1000; ++trial) {
        const TokenLayout layout = random_layout(rng);
        const Alignment align = trial % 2 == 0 ? Alignment::none : Alignment::structure;
        const std::size_t floor = align == Alignment::structure ? layout.max_visual_segment_len() : 1;
        const std::size_t b = std::max<std::size_t>(floor, 1) + rng() % 20;
        const auto blocks = partition_blocks(layout, b, align);
        std::size_t cursor = 0;
        for (const Block& block : blocks) {
            EXPECT_EQ(block.start, cursor);
            EXPECT_GT(block.size(), 0u);
            EXPECT_LE(block.size(), b);
            EXPECT_EQ(block.aligned, !splits_visual_segment(layout, block.end));
            cursor = block.end;
        }
        EXPECT_EQ(cursor, layout.total_len());
        if (align == Alignment::none) {
            for (std::size_t i = 0; i + 1 < blocks.size(); ++i) {
                EXPECT_EQ(blocks[i].size(), b);
            }
        }
    }
}

TEST(PartitionBlocks, StructureAlignmentNeverSplitsSegments) {
    std::mt19937_64 rng(47);
    for (int trial = 0; trial < 1000; ++trial) {
        const TokenLayout layout = random_layout(rng);
        const std::size_t b = std::max<std::size_t>(layout.max_visual_segment_len(), 1) + rng() % 20;
        const auto blocks = partition_blocks(layout, b, Alignment::structure);
        for (const Segment& seg : layout.segments()) {
            if (!seg.is_visual()) {
                continue;
            }
            std::size_t owners = 0;
            for (const Block& block : blocks) {
                if (block.start <= seg.start && seg.end() <= block.end) {
                    ++owners;
                }
            }
            EXPECT_EQ(owners, 1u);
        }
    }
}

TEST(KvMemoryBytes, Examples) {
    EXPECT_EQ(kv_memory_bytes(2, 2, 4, 2, 10), 640u);
    EXPECT_EQ(kv_memory_bytes(2, 2, 4, 2, 0), 0u);
    EXPECT_EQ(kv_memory_bytes(32, 32, 128, 2, 1024), 536870912u);
}

TEST(KvMemoryBytes, LinearInSequenceLength) {
    std::mt19937_64 rng(53);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::uint64_t l = rng() % 64, h = rng() % 64, d = rng() % 256, p = 1 + rng() % 4;
        const std::uint64_t a = rng() % 100000, b = rng() % 100000;
        EXPECT_EQ(kv_memory_bytes(l, h, d, p, a + b), kv_memory_bytes(l, h, d, p, a) + kv_memory_bytes(l, h, d, p, b));
    }
}

}  // namespace
}  // namespace blockprefill
