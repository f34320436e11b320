// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/prefill_engine.hpp"

#include <algorithm>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "blockprefill/errors.hpp"
#include "blockprefill/harness.hpp"

namespace blockprefill {
namespace {

Matrix random_embeddings(std::uint64_t seed, std::size_t n, std::size_t d) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist;
    Matrix m(n, d);
    for (double& x : m.data()) {
        x = dist(rng);
    }
    return m;
}

PrefillSettings settings_for(PrefillKind kind, std::size_t b, PolicyKind policy = PolicyKind::query_aware) {
    PrefillSettings s;
    s.mode = PrefillMode{kind, b, Alignment::none};
    s.policy.kind = policy;
    s.measure_wall_clock = false;
    return s;
}

/// Attention FLOPs from the occupancy recurrence, independent of the engine.
std::uint64_t expected_attention_flops(const ModelConfig& cfg, std::span<const std::size_t> chunk_sizes, std::size_t budget) {
    std::uint64_t flops = 0;
    std::size_t occupancy = 0;
    for (std::size_t b : chunk_sizes) {
        occupancy += b;
        flops += 4ULL * cfg.layers * cfg.heads * cfg.d_head() * b * occupancy;
        occupancy = std::min(occupancy, budget);
    }
    return flops;
}

std::vector<std::size_t> chunk_sizes(const std::vector<Block>& schedule) {
    std::vector<std::size_t> sizes;
    for (const Block& b : schedule) {
        sizes.push_back(b.size());
    }
    return sizes;
}

class PrefillEngine : public ::testing::Test {
protected:
    ModelState model = init_model({2, 2, 16});
};

TEST_F(PrefillEngine, BulkPeakFollowsSequenceLength) {
    const TokenLayout small = build_layout(4, 4, 10, 0, 0);
    const TokenLayout large = build_layout(8, 8, 10, 0, 0);
    const auto a = prefill_bulk(model, small, random_embeddings(1, 44, 16));
    const auto b = prefill_bulk(model, large, random_embeddings(1, 88, 16));
    EXPECT_EQ(a.cache.count(1, 1), 44u);
    EXPECT_EQ(a.trace.global_peak(), kv_memory_bytes(2, 2, 8, 2, 44));
    EXPECT_EQ(b.trace.global_peak(), 2 * a.trace.global_peak());
    EXPECT_EQ(a.ttft.forward_passes, 1u);
    EXPECT_EQ(a.eviction_rounds, 0u);
    EXPECT_THROW(prefill_bulk(model, small, random_embeddings(1, 43, 16)), InvalidArgument);
}

TEST_F(PrefillEngine, FullBudgetReproducesBulk) {
    const TokenLayout layout = build_layout(5, 3, 9, 0, 0);
    const Matrix x = random_embeddings(2, layout.total_len(), 16);
    const auto bulk = prefill_bulk(model, layout, x);
    const BudgetPlan plan = plan_budgets(BudgetMode::fixed, 2, 64);
    for (PrefillKind kind : {PrefillKind::blockwise, PrefillKind::hybrid}) {
        for (std::size_t b : {1u, 4u, 7u, 32u}) {
            const auto r = run_prefill(model, layout, x, settings_for(kind, b), plan);
            EXPECT_EQ(r.retained_positions, bulk.retained_positions);
            EXPECT_EQ(r.eviction_rounds, 0u);
            for (std::size_t i = 0; i < x.data().size(); ++i) {
                const double e = bulk.hidden.data()[i];
                ASSERT_NEAR(r.hidden.data()[i], e, 1e-5 * std::max(1.0, std::abs(e)));
            }
        }
    }
}

TEST_F(PrefillEngine, OccupancyStepThrough) {
    const ModelState one = init_model({1, 1, 8});
    const TokenLayout layout = build_layout(8, 0, 0, 0, 0);
    PrefillSettings s = settings_for(PrefillKind::blockwise, 4, PolicyKind::query_agnostic);
    s.protect_prompt = false;
    s.protect_recent = false;
    std::vector<std::size_t> seen;
    s.observer = [&](const PrefillEvent& e) { seen.push_back(e.cache.count(0, 0)); };
    const auto r = prefill_blockwise(one, layout, random_embeddings(3, 8, 8), s, plan_budgets(BudgetMode::fixed, 1, 4));
    EXPECT_EQ(seen, (std::vector<std::size_t>{4, 8, 4}));
    EXPECT_EQ(r.trace.block_peaks(), (std::vector<std::uint64_t>{kv_memory_bytes(1, 1, 8, 2, 4), kv_memory_bytes(1, 1, 8, 2, 8)}));
    EXPECT_EQ(r.eviction_rounds, 1u);
}

TEST_F(PrefillEngine, TopScoredNeedleSurvivesEveryRound) {
    const ModelState one = init_model({1, 1, 32});
    const TokenLayout layout = build_layout(16, 12, 16, 0, 0);
    const NeedleInstance inst = gen_needle_haystack(one, 4, layout, 5, 8.0);
    ASSERT_TRUE(verify_needle_premise(one, inst.embeddings, inst.task).holds);
    const std::size_t b = 16;
    const std::size_t floor = inst.task.needle_positions.size() + layout.prompt_span().len + b;
    for (std::size_t budget : {floor, floor + 5, floor + 40}) {
        const auto r = prefill_blockwise(one, layout, inst.embeddings, settings_for(PrefillKind::blockwise, b),
                                         plan_budgets(BudgetMode::fixed, 1, budget));
        EXPECT_GT(r.eviction_rounds, 0u);
        EXPECT_DOUBLE_EQ(eval_retention(r, inst.task), 1.0) << "budget " << budget;
    }
}

TEST_F(PrefillEngine, HybridScheduleArithmetic) {
    const TokenLayout layout = build_layout(4, 6, 10, 0, 0);
    EXPECT_EQ(hybrid_schedule(layout, 100, 8, Alignment::none), (std::vector<Block>{{0, 64, true}}));
    const auto two = hybrid_schedule(layout, 48, 16, Alignment::none);
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two[0].size(), 48u);
    EXPECT_EQ(two[1].size(), 16u);
    const auto aligned = hybrid_schedule(layout, 30, 20, Alignment::structure);
    EXPECT_EQ(aligned.front(), (Block{0, 24, true}));
    for (const Block& blk : aligned) {
        EXPECT_TRUE(blk.aligned);
    }
}

TEST_F(PrefillEngine, HybridWithinBudgetIsBulk) {
    const TokenLayout layout = build_layout(4, 2, 10, 0, 0);
    const Matrix x = random_embeddings(5, 24, 16);
    const auto r = prefill_hybrid(model, layout, x, settings_for(PrefillKind::hybrid, 8), plan_budgets(BudgetMode::fixed, 2, 24));
    const auto bulk = prefill_bulk(model, layout, x);
    EXPECT_EQ(r.ttft.forward_passes, 1u);
    EXPECT_EQ(r.cache, bulk.cache);
    EXPECT_EQ(r.ttft.attention_flops, bulk.ttft.attention_flops);
}

TEST_F(PrefillEngine, HybridAtBudgetPlusBlockRunsTwoForwards) {
    const TokenLayout layout = build_layout(4, 4, 10, 0, 0);
    const auto r = prefill_hybrid(model, layout, random_embeddings(6, 44, 16), settings_for(PrefillKind::hybrid, 12),
                                  plan_budgets(BudgetMode::fixed, 2, 32));
    EXPECT_EQ(r.ttft.forward_passes, 2u);
    EXPECT_EQ(chunk_sizes(r.schedule), (std::vector<std::size_t>{32, 12}));
    EXPECT_EQ(r.eviction_rounds, 1u);
}

TEST_F(PrefillEngine, AttentionFlopsFollowOccupancyRecurrence) {
    const TokenLayout layout = build_layout(8, 10, 12, 0, 0);
    const Matrix x = random_embeddings(7, layout.total_len(), 16);
    for (PrefillKind kind : {PrefillKind::blockwise, PrefillKind::hybrid}) {
        for (std::size_t budget : {24u, 40u, 90u, 200u}) {
            for (std::size_t b : {4u, 16u}) {
                const auto r = run_prefill(model, layout, x, settings_for(kind, b, PolicyKind::random_baseline),
                                           plan_budgets(BudgetMode::fixed, 2, budget));
                EXPECT_EQ(r.ttft.attention_flops, expected_attention_flops(model.config, chunk_sizes(r.schedule), budget))
                    << to_string(kind) << " M=" << budget << " b=" << b;
            }
        }
    }
}

TEST_F(PrefillEngine, PromptFirstProxyHasPromptRows) {
    const TokenLayout layout = build_layout(16, 4, 16, 0, 0);
    PrefillSettings s = settings_for(PrefillKind::blockwise, 16);
    std::vector<std::size_t> rows;
    s.observer = [&](const PrefillEvent& e) {
        if (e.stage == PrefillStage::evicted) {
            rows.push_back(e.proxy_rows);
        }
    };
    prefill_blockwise(model, layout, random_embeddings(8, 80, 16), s, plan_budgets(BudgetMode::fixed, 2, 40));
    ASSERT_FALSE(rows.empty());
    EXPECT_TRUE(std::all_of(rows.begin(), rows.end(), [](std::size_t r) { return r == 16; }));
}

TEST_F(PrefillEngine, BlockLocalProxyHasBlockRows) {
    const TokenLayout layout = build_layout(2, 0, 0, 0, 0);
    const TokenLayout last = build_layout(2, 3, 6, 0, 0, PromptPosition::last);
    PrefillSettings s = settings_for(PrefillKind::blockwise, 4);
    s.proxy_source = ProxySource::block_local;
    std::vector<std::size_t> rows;
    s.observer = [&](const PrefillEvent& e) {
        if (e.stage == PrefillStage::evicted) {
            rows.push_back(e.proxy_rows);
        }
    };
    prefill_blockwise(model, last, random_embeddings(9, 20, 16), s, plan_budgets(BudgetMode::fixed, 2, 6));
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows.front(), 4u);
    EXPECT_EQ(proxy_query_source(layout, ProxySource::block_local).source, ProxySource::block_local);
}

TEST_F(PrefillEngine, PromptFirstNeedsLeadingPrompt) {
    const TokenLayout last = build_layout(2, 3, 6, 0, 0, PromptPosition::last);
    EXPECT_THROW(proxy_query_source(last, ProxySource::prompt_first), InvalidConfiguration);
    EXPECT_EQ(proxy_query_source(build_layout(5, 1, 3, 0, 0), ProxySource::prompt_first).rows, (Span{0, 5}));
    EXPECT_THROW(prefill_blockwise(model, last, random_embeddings(9, 20, 16), settings_for(PrefillKind::blockwise, 4),
                                   plan_budgets(BudgetMode::fixed, 2, 6)),
                 InvalidConfiguration);
}

TEST_F(PrefillEngine, AgnosticPolicyIgnoresProxySource) {
    const TokenLayout layout = build_layout(6, 6, 8, 0, 0);
    const Matrix x = random_embeddings(10, layout.total_len(), 16);
    PrefillSettings s = settings_for(PrefillKind::blockwise, 8, PolicyKind::query_agnostic);
    const auto a = prefill_blockwise(model, layout, x, s, plan_budgets(BudgetMode::fixed, 2, 20));
    s.proxy_source = ProxySource::block_local;
    const auto b = prefill_blockwise(model, layout, x, s, plan_budgets(BudgetMode::fixed, 2, 20));
    EXPECT_EQ(a.retained_positions, b.retained_positions);
    EXPECT_EQ(a.cache.fingerprint(), b.cache.fingerprint());
}

TEST_F(PrefillEngine, BudgetBelowProtectedSetIsRejected) {
    const TokenLayout layout = build_layout(4, 4, 8, 0, 0);
    const Matrix x = random_embeddings(11, 36, 16);
    EXPECT_THROW(prefill_blockwise(model, layout, x, settings_for(PrefillKind::blockwise, 8),
                                   plan_budgets(BudgetMode::fixed, 2, 6)),
                 InvalidConfiguration);
    const TokenLayout long_prompt = build_layout(20, 2, 8, 0, 0);
    EXPECT_THROW(prefill_blockwise(model, long_prompt, x, settings_for(PrefillKind::blockwise, 8),
                                   plan_budgets(BudgetMode::fixed, 2, 12)),
                 InvalidConfiguration);
}

TEST_F(PrefillEngine, RandomRunsRespectBudgetAndPeakBound) {
    std::mt19937_64 rng(97);
    for (int trial = 0; trial < 40; ++trial) {
        const ModelState m = init_model({1 + rng() % 3, 1 + rng() % 2, 8, 10000.0, rng()});
        const TokenLayout layout = build_layout(1 + rng() % 6, 1 + rng() % 6, 1 + rng() % 12, 0, 0);
        const std::size_t b = 1 + rng() % 12;
        const std::size_t budget = b + layout.prompt_span().len + rng() % 30;
        PrefillSettings s = settings_for(rng() % 2 ? PrefillKind::hybrid : PrefillKind::blockwise, b,
                                         static_cast<PolicyKind>(rng() % 3));
        s.policy.rng_seed = rng();
        s.proxy_source = static_cast<ProxySource>(rng() % 2);
        std::size_t violations = 0;
        s.observer = [&](const PrefillEvent& e) {
            for (std::size_t l = 0; l < e.cache.layers(); ++l) {
                for (std::size_t h = 0; h < e.cache.heads(); ++h) {
                    const std::size_t n = e.cache.count(l, h);
                    const std::size_t limit = e.stage == PrefillStage::evicted || e.block.end <= budget ? budget : budget + e.block.size();
                    violations += n > limit ? 1 : 0;
                }
            }
        };
        const auto r = run_prefill(m, layout, random_embeddings(rng(), layout.total_len(), 8), s,
                                   plan_budgets(BudgetMode::fixed, m.config.layers, budget));
        EXPECT_EQ(violations, 0u);
        EXPECT_LE(r.trace.global_peak_entries(), budget + b);
        EXPECT_LE(r.cache.max_count(), budget);
        for (std::size_t l = 0; l < m.config.layers; ++l) {
            for (std::size_t h = 0; h < m.config.heads; ++h) {
                const auto& pos = r.retained_positions[l][h];
                EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
                for (std::size_t p = 0; p < layout.prompt_span().len; ++p) {
                    EXPECT_TRUE(std::binary_search(pos.begin(), pos.end(), layout.prompt_span().start + p));
                }
            }
        }
    }
}

TEST_F(PrefillEngine, DynamicPlanKeepsEachLayerWithinItsBudget) {
    const TokenLayout layout = build_layout(4, 8, 8, 0, 0);
    const Matrix x = random_embeddings(12, 68, 16);
    const PrefillMode mode{PrefillKind::blockwise, 8, Alignment::none};
    const auto entropy = measure_layer_entropy(model, layout, x, mode);
    ASSERT_EQ(entropy.size(), 2u);
    const BudgetPlan plan = plan_budgets(BudgetMode::dynamic, 2, 24, entropy, 12);
    const auto r = prefill_blockwise(model, layout, x, settings_for(PrefillKind::blockwise, 8), plan);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(r.cache.count(l, 0), plan.per_layer[l]);
    }
}

TEST_F(PrefillEngine, RunsAreDeterministic) {
    const TokenLayout layout = build_layout(4, 6, 8, 0, 0);
    const Matrix x = random_embeddings(13, 52, 16);
    for (PolicyKind policy : {PolicyKind::query_aware, PolicyKind::query_agnostic, PolicyKind::random_baseline}) {
        const auto s = settings_for(PrefillKind::hybrid, 8, policy);
        const auto a = run_prefill(model, layout, x, s, plan_budgets(BudgetMode::fixed, 2, 20));
        const auto b = run_prefill(model, layout, x, s, plan_budgets(BudgetMode::fixed, 2, 20));
        EXPECT_EQ(a.cache.fingerprint(), b.cache.fingerprint());
        EXPECT_EQ(a.trace.block_peaks(), b.trace.block_peaks());
        EXPECT_EQ(a.retained_positions, b.retained_positions);
        EXPECT_EQ(a.ttft.wall_seconds, 0.0);
    }
}

TEST(PrefillKindNames, RoundTrip) {
    for (PrefillKind k : {PrefillKind::bulk, PrefillKind::blockwise, PrefillKind::hybrid}) {
        EXPECT_EQ(prefill_kind_from_name(to_string(k)), k);
    }
    EXPECT_THROW(prefill_kind_from_name("chunked"), InvalidArgument);
}

}  // namespace
}  // namespace blockprefill
