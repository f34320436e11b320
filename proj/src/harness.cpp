// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>

#include <Eigen/Dense>

#include "blockprefill/errors.hpp"
#include "blockprefill/random.hpp"

namespace blockprefill {

namespace {

using EigenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// diag(gain) · W: the map from a unit-RMS input row to its projection.
EigenMatrix effective_projection(const Matrix& w, std::span<const double> gain) {
    EigenMatrix m = Eigen::Map<const EigenMatrix>(w.data().data(), static_cast<Eigen::Index>(w.rows()),
                                                  static_cast<Eigen::Index>(w.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        m.row(r) *= gain[static_cast<std::size_t>(r)];
    }
    return m;
}

EigenMatrix checked_inverse(const EigenMatrix& m, const char* what) {
    Eigen::FullPivLU<EigenMatrix> lu(m);
    if (!lu.isInvertible()) {
        throw NumericError(std::string("needle construction: singular ") + what + " projection");
    }
    return lu.inverse();
}

/// Rotates a per-head vector by the rotary angle of a signed position offset.
std::vector<double> rotate_by(std::span<const double> v, long long offset, double base) {
    Matrix m(1, v.size(), std::vector<double>(v.begin(), v.end()));
    const std::size_t magnitude = static_cast<std::size_t>(offset < 0 ? -offset : offset);
    const std::size_t pos[1] = {magnitude};
    const Matrix r = offset < 0 ? apply_rope_inverse(m, pos, base) : apply_rope(m, pos, base);
    return {r.data().begin(), r.data().end()};
}

/// Embedding offset whose layer-0 query at `position` points at the needle keys in every head, with
/// query-space norm equal to the expected query norm of one N(0, I) embedding.
std::vector<double> aimed_offset(const std::vector<std::vector<double>>& key_dirs,
                                 std::size_t needle_center,
                                 std::size_t position,
                                 const EigenMatrix& wq_inverse,
                                 double noise_query_norm,
                                 double base) {
    const std::size_t heads = key_dirs.size();
    const std::size_t dh = key_dirs.front().size();
    Eigen::RowVectorXd target(static_cast<Eigen::Index>(heads * dh));
    const long long offset = static_cast<long long>(needle_center) - static_cast<long long>(position);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto rotated = rotate_by(key_dirs[h], offset, base);
        for (std::size_t i = 0; i < dh; ++i) {
            target(static_cast<Eigen::Index>(h * dh + i)) = rotated[i];
        }
    }
    target.normalize();
    const Eigen::RowVectorXd x = noise_query_norm * (target * wq_inverse);
    return {x.data(), x.data() + x.size()};
}

bool in_sorted(std::span<const std::size_t> sorted, std::size_t value) {
    return std::binary_search(sorted.begin(), sorted.end(), value);
}

std::size_t map_position(std::span<const std::size_t> source_positions, std::size_t pos) {
    if (source_positions.empty()) {
        return pos;
    }
    return pos < source_positions.size() ? source_positions[pos] : std::numeric_limits<std::size_t>::max();
}

std::size_t visual_count(const LayoutConfig& layout) {
    return layout.tiles > 0 ? layout.tiles : layout.frames;
}

std::size_t visual_len(const LayoutConfig& layout) {
    return layout.tiles > 0 ? layout.tokens_per_tile : layout.tokens_per_frame;
}

double layer_retention(const PrefillResult& result, const NeedleTask& task, std::size_t layer) {
    const auto& heads = result.retained_positions.at(layer);
    double total = 0.0;
    for (const auto& positions : heads) {
        std::size_t kept = 0;
        for (std::size_t p : positions) {
            kept += in_sorted(task.needle_positions, p) ? 1 : 0;
        }
        total += static_cast<double>(kept) / static_cast<double>(task.needle_positions.size());
    }
    return total / static_cast<double>(heads.size());
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

template <typename T>
std::string list(const std::vector<T>& values) {
    std::string out = "[";
    for (std::size_t i = 0; i < values.size(); ++i) {
        if constexpr (std::is_integral_v<T>) {
            out += (i == 0 ? "" : ", ") + std::to_string(values[i]);
        } else {
            out += (i == 0 ? "" : ", ") + fmt(values[i]);
        }
    }
    return out + "]";
}

Experiment with_config(const Experiment& base, const RunConfig& config) {
    config.validate();
    Experiment e = base;
    e.config = config;
    return e;
}

TrendCheck premise_check(const Experiment& e) {
    const auto premise = verify_needle_premise(e.model, e.needle.embeddings, e.needle.task);
    return {"needle_premise", premise.holds, "layer-0 score margin " + fmt(premise.margin)};
}

}  // namespace

NeedleInstance gen_needle_haystack(const ModelState& model,
                                   std::uint64_t seed,
                                   const TokenLayout& layout,
                                   std::size_t needle_segment,
                                   double kappa,
                                   double needle_strength) {
    const auto segment = layout.find_structure(needle_segment);
    if (!segment) {
        throw InvalidArgument("gen_needle_haystack: no tile or frame with id " + std::to_string(needle_segment));
    }
    if (!(kappa >= 0.0) || !(needle_strength > 0.0)) {
        throw InvalidArgument("gen_needle_haystack: kappa must be >= 0 and needle_strength > 0");
    }
    const auto& cfg = model.config;
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.d_head();
    const std::size_t n = layout.total_len();
    const double scale = std::sqrt(static_cast<double>(d));
    const LayerWeights& w0 = model.layers.front();

    GaussianStream rng(seed);
    Matrix emb(n, d);
    for (double& x : emb.data()) {
        x = rng.next();
    }

    // Query direction per head: the strongest key-projection direction inside the slowest quarter of the
    // rotary pairs. Rotation keeps it in that subspace, so no rotated copy projects more strongly.
    const EigenMatrix wk = effective_projection(w0.wk, w0.attn_norm);
    const EigenMatrix wq = effective_projection(w0.wq, w0.attn_norm);
    const EigenMatrix wq_inverse = checked_inverse(wq, "query");
    const double noise_query_norm = wq.norm();
    std::vector<std::vector<double>> key_dirs(cfg.heads, std::vector<double>(dh, 0.0));
    Eigen::RowVectorXd u = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        std::vector<std::size_t> slow;
        const std::size_t pairs = dh / 2;
        for (std::size_t i = pairs - std::max<std::size_t>(1, pairs / 4); i < pairs; ++i) {
            slow.push_back(2 * i);
            slow.push_back(2 * i + 1);
        }
        EigenMatrix sub(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(slow.size()));
        for (std::size_t i = 0; i < slow.size(); ++i) {
            sub.col(static_cast<Eigen::Index>(i)) = wk.col(static_cast<Eigen::Index>(h * dh + slow[i]));
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sub.transpose() * sub);
        const Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(slow.size()) - 1);
        for (std::size_t i = 0; i < slow.size(); ++i) {
            key_dirs[h][slow[i]] = v(static_cast<Eigen::Index>(i));
        }
        // Embedding direction that maximizes this head's needle logit.
        const Eigen::VectorXd pull_back = sub * v;
        u += pull_back.transpose().normalized();
    }
    u.normalize();

    NeedleTask task;
    task.layout = layout;
    task.needle_segment = needle_segment;
    task.seed = seed;
    task.kappa = kappa;
    task.needle_strength = needle_strength;
    task.direction.assign(u.data(), u.data() + u.size());
    for (std::size_t p = segment->start; p < segment->end(); ++p) {
        task.needle_positions.push_back(p);
        auto row = emb.row(p);
        for (std::size_t j = 0; j < d; ++j) {
            row[j] += needle_strength * scale * task.direction[j];
        }
    }

    const std::size_t center = segment->start + segment->len / 2;
    const Span prompt = layout.prompt_span();
    for (std::size_t p = prompt.start; p < prompt.end(); ++p) {
        const auto aim = aimed_offset(key_dirs, center, p, wq_inverse, noise_query_norm, cfg.rope_base);
        auto row = emb.row(p);
        for (std::size_t j = 0; j < d; ++j) {
            row[j] += kappa * aim[j];
        }
    }

    const auto aim = aimed_offset(key_dirs, center, n, wq_inverse, noise_query_norm, cfg.rope_base);
    task.query_embedding.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        task.query_embedding[j] = rng.next() + kappa * aim[j];
    }
    return NeedleInstance{std::move(emb), std::move(task)};
}

PremiseCheck verify_needle_premise(const ModelState& model, const Matrix& embeddings, const NeedleTask& task) {
    const auto& cfg = model.config;
    const std::size_t dh = cfg.d_head();
    const std::size_t n = task.layout.total_len();
    if (embeddings.rows() != n) {
        throw InvalidArgument("verify_needle_premise: embeddings do not match the task layout");
    }
    const LayerWeights& w0 = model.layers.front();
    const Span prompt = task.layout.prompt_span();
    const Matrix h = rms_norm(embeddings, w0.attn_norm);
    const Matrix k_all = matmul(h, w0.wk);
    const Matrix q_all = matmul(h.slice_rows(prompt.start, prompt.end()), w0.wq);

    std::vector<std::size_t> positions(n);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    const std::span<const std::size_t> prompt_positions(positions.data() + prompt.start, prompt.len);

    PremiseCheck out;
    out.margin = std::numeric_limits<double>::infinity();
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
        const Matrix keys = apply_rope(k_all.slice_cols(hd * dh, (hd + 1) * dh), positions, cfg.rope_base);
        const Matrix queries = apply_rope(q_all.slice_cols(hd * dh, (hd + 1) * dh), prompt_positions, cfg.rope_base);
        for (std::size_t r = 0; r < queries.rows(); ++r) {
            double needle_min = std::numeric_limits<double>::infinity();
            double other_max = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (prompt.contains(j)) {
                    continue;
                }
                const double s = dot(queries.row(r), keys.row(j));
                if (in_sorted(task.needle_positions, j)) {
                    needle_min = std::min(needle_min, s);
                } else {
                    other_max = std::max(other_max, s);
                }
            }
            out.margin = std::min(out.margin, needle_min - other_max);
        }
    }
    out.holds = out.margin > 0.0;
    return out;
}

double eval_retention(const PrefillResult& result, const NeedleTask& task) {
    return eval_retention(result, task, {});
}

double eval_retention(const PrefillResult& result,
                      const NeedleTask& task,
                      std::span<const std::size_t> source_positions) {
    if (task.needle_positions.empty()) {
        throw InvalidArgument("eval_retention: task has no needle positions");
    }
    double total = 0.0;
    std::size_t groups = 0;
    for (const auto& layer : result.retained_positions) {
        for (const auto& positions : layer) {
            std::size_t kept = 0;
            for (std::size_t p : positions) {
                kept += in_sorted(task.needle_positions, map_position(source_positions, p)) ? 1 : 0;
            }
            total += static_cast<double>(kept) / static_cast<double>(task.needle_positions.size());
            ++groups;
        }
    }
    return groups == 0 ? 0.0 : total / static_cast<double>(groups);
}

double decode_attention_mass(const ModelState& model,
                             const PrefillResult& result,
                             const NeedleTask& task,
                             std::span<const std::size_t> source_positions) {
    KvCache cache = result.cache;
    DecodeProbe probe;
    decode_step(model, task.query_embedding, cache, cache.next_position(0), &probe);
    double total = 0.0;
    std::size_t groups = 0;
    for (std::size_t l = 0; l < cache.layers(); ++l) {
        for (std::size_t h = 0; h < cache.heads(); ++h) {
            const auto& info = cache.head(l, h).info;
            const auto& weights = probe.attention[l][h];
            double mass = 0.0;
            for (std::size_t i = 0; i + 1 < info.size(); ++i) {
                if (in_sorted(task.needle_positions, map_position(source_positions, info[i].position))) {
                    mass += weights[i];
                }
            }
            total += std::clamp(mass, 0.0, 1.0);
            ++groups;
        }
    }
    return groups == 0 ? 0.0 : total / static_cast<double>(groups);
}

ReducedInput baseline_input_reduction(const TokenLayout& layout, const Matrix& embeddings, std::size_t target_tokens) {
    if (embeddings.rows() != layout.total_len()) {
        throw InvalidArgument("baseline_input_reduction: embeddings do not match the layout");
    }
    const std::size_t vision = layout.vision_token_total();
    std::size_t visual_segments = 0;
    for (const auto& s : layout.segments()) {
        visual_segments += s.is_visual() ? 1 : 0;
    }
    if (target_tokens > vision) {
        throw InvalidArgument("baseline_input_reduction: target " + std::to_string(target_tokens) +
                              " exceeds the " + std::to_string(vision) + " vision tokens");
    }
    if (target_tokens < visual_segments) {
        throw InvalidArgument("baseline_input_reduction: target " + std::to_string(target_tokens) +
                              " is below one token per tile or frame (" + std::to_string(visual_segments) + ")");
    }
    const std::size_t stride = (vision + target_tokens - 1) / target_tokens;

    TokenLayout::Builder builder;
    ReducedInput out;
    out.stride = stride;
    const Span prompt = layout.prompt_span();
    for (const auto& s : layout.segments()) {
        if (!s.is_visual()) {
            if (s.start == prompt.start) {
                builder.prompt(s.len);
            } else {
                builder.text(s.len);
            }
            for (std::size_t p = s.start; p < s.end(); ++p) {
                out.source_positions.push_back(p);
            }
            continue;
        }
        std::size_t kept = 0;
        for (std::size_t p = s.start; p < s.end(); p += stride) {
            out.source_positions.push_back(p);
            ++kept;
        }
        if (s.kind == SegmentKind::tile) {
            builder.tiles(1, kept);
        } else {
            builder.frames(1, kept);
        }
    }
    out.layout = builder.build();
    out.embeddings = embeddings.gather_rows(out.source_positions);
    return out;
}

Experiment prepare_experiment(const RunConfig& config) {
    config.validate();
    Experiment e;
    e.config = config;
    e.model = init_model(config.model);
    const TokenLayout layout = config.layout.build();
    const std::size_t needle = config.task.needle_segment.value_or(visual_count(config.layout) / 2);
    e.needle = gen_needle_haystack(e.model, config.task.seed, layout, needle, config.task.kappa,
                                   config.task.needle_strength);
    return e;
}

BudgetPlan resolve_budget_plan(const Experiment& e) {
    const auto& p = e.config.prefill;
    const std::size_t layers = e.config.model.layers;
    if (p.budget_mode == BudgetMode::fixed) {
        return plan_budgets(BudgetMode::fixed, layers, p.budget);
    }
    std::vector<double> entropy = p.layer_entropies;
    if (entropy.empty()) {
        entropy = measure_layer_entropy(e.model, e.needle.task.layout, e.needle.embeddings,
                                        PrefillMode{p.mode, p.block_size, p.align});
    }
    const std::size_t floor = std::min(p.budget, std::max(p.budget_floor, e.config.protected_size()));
    return plan_budgets(BudgetMode::dynamic, layers, p.budget, std::span<const double>(entropy), floor);
}

PrefillSettings make_settings(const RunConfig& config) {
    PrefillSettings s;
    s.mode = PrefillMode{config.prefill.mode, config.prefill.block_size, config.prefill.align};
    s.policy = EvictionPolicy{config.prefill.policy, config.prefill.random_seed};
    s.proxy_source = config.prefill.proxy_source;
    s.protect_recent = config.prefill.protect_recent;
    s.protect_prompt = config.prefill.protect_prompt;
    s.precision_bytes = config.prefill.precision_bytes;
    s.measure_wall_clock = config.output.wall_clock;
    return s;
}

bool splits_needle(std::span<const Block> schedule, const NeedleTask& task) {
    const std::size_t first = task.needle_positions.front();
    const std::size_t last = task.needle_positions.back();
    return std::any_of(schedule.begin(), schedule.end(),
                       [&](const Block& b) { return b.start > first && b.start <= last; });
}

RunOutcome run_experiment(const Experiment& e, const std::string& label) {
    const auto& task = e.needle.task;
    const BudgetPlan plan = resolve_budget_plan(e);
    PrefillResult result = run_prefill(e.model, task.layout, e.needle.embeddings, make_settings(e.config), plan);

    RunReport r;
    r.label = label;
    r.config = e.config.to_json();
    r.global_peak_bytes = result.trace.global_peak();
    r.avg_block_peak_bytes = result.trace.avg_block_peak();
    r.ttft_wall_s = result.ttft.wall_seconds;
    r.ttft_flops = result.ttft.attention_flops;
    r.needle_retention = eval_retention(result, task);
    r.decode_attention_mass_on_needle = decode_attention_mass(e.model, result, task);
    r.policy = EvictionPolicy{e.config.prefill.policy}.name();
    r.budget = e.config.prefill.budget;
    r.block_size = e.config.prefill.block_size;
    r.mode = std::string(to_string(e.config.prefill.mode));
    r.align = std::string(to_string(e.config.prefill.align));
    r.seq_len = task.layout.total_len();
    r.needle_split = splits_needle(result.schedule, task);
    r.validate();
    return RunOutcome{std::move(result), std::move(r)};
}

RunReport run_config(const RunConfig& config, const std::string& label) {
    return run_experiment(prepare_experiment(config), label).report;
}

bool SweepOutcome::all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const TrendCheck& c) { return c.passed; });
}

SweepOutcome sweep_input_size(const RunConfig& config, std::span<const std::size_t> counts) {
    SweepOutcome out;
    std::vector<std::size_t> used_counts;
    std::vector<std::uint64_t> full_peaks;
    std::vector<std::uint64_t> saturated_peaks;
    bool at_bound = true;
    bool small_inputs_match = true;
    std::string bound_detail;
    std::string small_detail;

    const auto& m = config.model;
    const std::uint64_t prompt_bytes = kv_memory_bytes(m.layers, m.heads, m.d_head(), config.prefill.precision_bytes,
                                                       config.layout.prompt_len);
    std::uint64_t bound = 0;
    for (std::size_t count : counts) {
        RunConfig c = config;
        (c.layout.tiles > 0 ? c.layout.tiles : c.layout.frames) = count;
        if (c.task.needle_segment && *c.task.needle_segment >= count) {
            c.task.needle_segment.reset();
        }
        RunConfig full = c;
        full.prefill.mode = PrefillKind::bulk;
        RunConfig bounded = c;
        if (bounded.prefill.mode == PrefillKind::bulk) {
            bounded.prefill.mode = PrefillKind::blockwise;
        }
        const Experiment base = prepare_experiment(bounded);
        const auto full_run = run_experiment(with_config(base, full), "full_cache");
        const auto bounded_run = run_experiment(base, "bounded");
        used_counts.push_back(count);
        full_peaks.push_back(full_run.report.global_peak_bytes);
        out.rows.push_back(full_run.report);
        out.rows.push_back(bounded_run.report);

        const BudgetPlan plan = resolve_budget_plan(base);
        const std::size_t max_budget = *std::max_element(plan.per_layer.begin(), plan.per_layer.end());
        const std::size_t n = base.needle.task.layout.total_len();
        const std::uint64_t peak = bounded_run.report.global_peak_bytes;
        bound = kv_memory_bytes(m.layers, m.heads, m.d_head(), c.prefill.precision_bytes,
                                max_budget + c.prefill.block_size);
        if (n >= max_budget + c.prefill.block_size) {
            saturated_peaks.push_back(peak);
            if (peak != bound) {
                at_bound = false;
                bound_detail += "; count " + std::to_string(count) + " peaked at " + std::to_string(peak);
            }
        } else if (n <= max_budget && peak != full_run.report.global_peak_bytes) {
            small_inputs_match = false;
            small_detail += "; count " + std::to_string(count) + " differs from full cache";
        }
    }

    const bool constant = std::adjacent_find(saturated_peaks.begin(), saturated_peaks.end(), std::not_equal_to<>()) ==
                          saturated_peaks.end();
    out.checks.push_back({"bounded_peak_constant", constant,
                          "bounded peaks where N >= budget + block " + list(saturated_peaks)});
    out.checks.push_back({"bounded_peak_at_bound", at_bound,
                          "kv bytes at budget + block " + std::to_string(bound) + bound_detail});
    out.checks.push_back({"small_input_matches_full_cache", small_inputs_match, "inputs with N <= budget" + small_detail});

    bool linear = !used_counts.empty();
    for (std::size_t i = 0; i < used_counts.size(); ++i) {
        const std::uint64_t lhs = (full_peaks[i] - prompt_bytes) * used_counts.front();
        const std::uint64_t rhs = (full_peaks.front() - prompt_bytes) * used_counts[i];
        linear = linear && lhs == rhs;
    }
    out.checks.push_back({"full_cache_linear", linear,
                          "full-cache peaks " + list(full_peaks) + ", prompt share " + std::to_string(prompt_bytes)});
    return out;
}

SweepOutcome sweep_budget(const RunConfig& config, std::span<const std::size_t> budgets) {
    SweepOutcome out;
    RunConfig c = config;
    c.prefill.mode = PrefillKind::hybrid;
    const Experiment base = prepare_experiment(c);
    std::vector<std::uint64_t> peaks;
    std::vector<std::uint64_t> flops;
    std::vector<std::size_t> sorted(budgets.begin(), budgets.end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t budget : sorted) {
        RunConfig point = c;
        point.prefill.budget = budget;
        const auto run = run_experiment(with_config(base, point), "budget=" + std::to_string(budget));
        peaks.push_back(run.report.global_peak_bytes);
        flops.push_back(run.report.ttft_flops);
        out.rows.push_back(run.report);
    }
    out.checks.push_back({"peak_non_decreasing", std::is_sorted(peaks.begin(), peaks.end()),
                          "peaks " + list(peaks) + " for budgets " + list(sorted)});
    out.checks.push_back({"attention_flops_non_increasing", std::is_sorted(flops.rbegin(), flops.rend()),
                          "attention flops " + list(flops) + " for budgets " + list(sorted)});
    return out;
}

SweepOutcome sweep_block_size(const RunConfig& config, std::span<const std::size_t> block_sizes) {
    SweepOutcome out;
    const std::size_t tile = visual_len(config.layout);
    RunConfig c = config;
    c.prefill.align = Alignment::none;
    const Experiment base = prepare_experiment(c);

    std::vector<std::size_t> sorted(block_sizes.begin(), block_sizes.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> unaligned_avg;
    bool aligned_ok = true;
    bool short_blocks_split = true;
    std::string aligned_detail;
    std::string split_detail;
    for (std::size_t b : sorted) {
        RunConfig point = c;
        point.prefill.block_size = b;
        const auto unaligned = run_experiment(with_config(base, point), "unaligned");
        unaligned_avg.push_back(unaligned.report.avg_block_peak_bytes);
        out.rows.push_back(unaligned.report);
        if (b < tile && !unaligned.report.needle_split) {
            short_blocks_split = false;
            split_detail += " b=" + std::to_string(b) + " kept the needle whole";
        }
        if (b >= tile) {
            point.prefill.align = Alignment::structure;
            const auto aligned = run_experiment(with_config(base, point), "aligned");
            out.rows.push_back(aligned.report);
            if (b % tile == 0 && aligned.report.needle_split) {
                aligned_ok = false;
                aligned_detail += " b=" + std::to_string(b) + " split the needle";
            }
        }
    }
    out.checks.push_back({"aligned_never_splits_needle", aligned_ok,
                          "tile " + std::to_string(tile) + " tokens" + aligned_detail});
    out.checks.push_back({"short_unaligned_blocks_split_needle", short_blocks_split,
                          "blocks shorter than a tile" + split_detail});
    out.checks.push_back({"avg_block_peak_non_decreasing", std::is_sorted(unaligned_avg.begin(), unaligned_avg.end()),
                          "unaligned avg block peaks " + list(unaligned_avg) + " for block sizes " + list(sorted)});
    return out;
}

SweepOutcome compare_policies(const RunConfig& config) {
    SweepOutcome out;
    const Experiment base = prepare_experiment(config);
    out.checks.push_back(premise_check(base));
    std::vector<double> layer0;
    for (PolicyKind kind : {PolicyKind::query_aware, PolicyKind::query_agnostic, PolicyKind::random_baseline}) {
        RunConfig point = config;
        point.prefill.policy = kind;
        const auto run = run_experiment(with_config(base, point), EvictionPolicy{kind}.name());
        layer0.push_back(layer_retention(run.result, base.needle.task, 0));
        out.rows.push_back(run.report);
    }
    out.checks.push_back({"query_aware_retains_needle", layer0[0] == 1.0,
                          "layer-0 retention snapkv/keydiff/random " + list(layer0)});
    out.checks.push_back({"query_aware_at_least_random", layer0[0] >= layer0[2],
                          "layer-0 retention snapkv " + fmt(layer0[0]) + " vs random " + fmt(layer0[2])});
    return out;
}

SweepOutcome compare_reduction(const RunConfig& config) {
    SweepOutcome out;
    const Experiment base = prepare_experiment(config);
    const auto& task = base.needle.task;
    out.checks.push_back(premise_check(base));

    const auto compression = run_experiment(base, "compression");
    out.rows.push_back(compression.report);

    if (config.prefill.budget <= config.layout.prompt_len) {
        throw ConfigError("prefill.budget: must exceed layout.prompt_len to leave room for reduced vision tokens");
    }
    const std::size_t target =
        std::min(config.prefill.budget - config.layout.prompt_len, task.layout.vision_token_total());
    const ReducedInput reduced = baseline_input_reduction(task.layout, base.needle.embeddings, target);
    RunConfig bulk = config;
    bulk.prefill.mode = PrefillKind::bulk;
    const PrefillResult result = prefill_bulk(base.model, reduced.layout, reduced.embeddings, make_settings(bulk));

    RunReport r;
    r.label = "reduction";
    r.config = config.to_json();
    r.global_peak_bytes = result.trace.global_peak();
    r.avg_block_peak_bytes = result.trace.avg_block_peak();
    r.ttft_wall_s = result.ttft.wall_seconds;
    r.ttft_flops = result.ttft.attention_flops;
    r.needle_retention = eval_retention(result, task, reduced.source_positions);
    r.decode_attention_mass_on_needle = decode_attention_mass(base.model, result, task, reduced.source_positions);
    r.policy = "stride";
    r.budget = config.prefill.budget;
    r.block_size = reduced.layout.total_len();
    r.mode = "bulk";
    r.align = std::string(to_string(Alignment::none));
    r.seq_len = reduced.layout.total_len();
    r.needle_split = false;
    r.validate();
    out.rows.push_back(r);

    const double needle = static_cast<double>(task.needle_positions.size());
    const double bound = std::ceil(needle / static_cast<double>(reduced.stride)) / needle;
    const double kept_layer0 = layer_retention(compression.result, task, 0);
    out.checks.push_back({"compression_retains_needle", kept_layer0 == 1.0,
                          "layer-0 compression retention " + fmt(kept_layer0)});
    out.checks.push_back({"reduction_within_stride_bound", r.needle_retention <= bound,
                          "reduction retention " + fmt(r.needle_retention) + " <= " + fmt(bound) + " at stride " +
                              std::to_string(reduced.stride)});
    const double gap = kept_layer0 - r.needle_retention;
    out.checks.push_back({"retention_gap", gap >= 0.5, "layer-0 compression minus reduction " + fmt(gap)});
    return out;
}

}  // namespace blockprefill
