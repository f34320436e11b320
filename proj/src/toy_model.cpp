// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/toy_model.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "blockprefill/errors.hpp"
#include "blockprefill/random.hpp"

namespace blockprefill {

namespace {

constexpr double kNormEps = 1e-6;

Matrix gaussian_matrix(GaussianStream& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& x : m.data()) {
        x = rng.next() * scale;
    }
    return m;
}

double gelu(double x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

nlohmann::json matrix_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

void check_finite(const Matrix& m, const char* where) {
    if (!all_finite(m)) {
        throw NumericError(std::string("non-finite values in ") + where);
    }
}

BlockForward run_block(const ModelState& model,
                       const Matrix& embeddings,
                       KvCache& cache,
                       std::span<const TokenInfo> tokens) {
    const auto& cfg = model.config;
    const std::size_t b = embeddings.rows();
    const std::size_t dh = cfg.d_head();

    std::vector<std::size_t> positions(b);
    for (std::size_t i = 0; i < b; ++i) {
        positions[i] = tokens[i].position;
    }

    BlockForward out;
    out.queries.resize(cfg.layers);
    out.attention_entropy.resize(cfg.layers, 0.0);
    out.last_row_attention.resize(cfg.layers);

    Matrix x = embeddings;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        const Matrix h = rms_norm(x, w.attn_norm);
        const Matrix q_all = matmul(h, w.wq);
        const Matrix k_all = matmul(h, w.wk);
        const Matrix v_all = matmul(h, w.wv);

        std::vector<Matrix> keys(cfg.heads);
        std::vector<Matrix> values(cfg.heads);
        out.queries[l].resize(cfg.heads);
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
            out.queries[l][hd] = apply_rope(q_all.slice_cols(hd * dh, (hd + 1) * dh), positions, cfg.rope_base);
            keys[hd] = apply_rope(k_all.slice_cols(hd * dh, (hd + 1) * dh), positions, cfg.rope_base);
            values[hd] = v_all.slice_cols(hd * dh, (hd + 1) * dh);
        }
        cache.append_block(l, keys, values, tokens);

        Matrix attn(b, cfg.d_model);
        out.last_row_attention[l].resize(cfg.heads);
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
            const HeadStore& store = cache.head(l, hd);
            const std::size_t cached_before = store.size() - b;
            AttentionProbe probe;
            const Matrix head_out =
                scaled_dot_attention(out.queries[l][hd], store.keys, store.values, cached_before, &probe);
            attn.set_cols(hd * dh, head_out);
            out.attention_entropy[l] += probe.mean_entropy / static_cast<double>(cfg.heads);
            out.last_row_attention[l][hd] = std::move(probe.last_row);
            out.attention_flops += 4ULL * b * store.size() * dh;
        }
        const Matrix projected = matmul(attn, w.wo);
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            x.data()[i] += projected.data()[i];
        }

        const Matrix h2 = rms_norm(x, w.mlp_norm);
        Matrix up = matmul(h2, w.w_up);
        for (double& u : up.data()) {
            u = gelu(u);
        }
        const Matrix down = matmul(up, w.w_down);
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            x.data()[i] += down.data()[i];
        }
        out.projection_flops += 2ULL * b * (4ULL * cfg.d_model * cfg.d_model + 2ULL * cfg.d_model * cfg.d_ff());
        check_finite(x, "decoder hidden state");
    }
    out.hidden = std::move(x);
    return out;
}

}  // namespace

std::size_t ModelConfig::d_ff() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(d_model)));
}

void ModelConfig::validate() const {
    if (layers == 0) {
        throw InvalidArgument("model.layers must be >= 1");
    }
    if (heads == 0) {
        throw InvalidArgument("model.heads must be >= 1");
    }
    if (d_model == 0 || d_model % heads != 0) {
        throw InvalidArgument("model.d_model must be a positive multiple of model.heads");
    }
    if (d_head() % 2 != 0) {
        throw InvalidArgument("model.d_model / model.heads must be even for rotary encoding");
    }
    if (!(rope_base > 0.0) || !std::isfinite(rope_base)) {
        throw InvalidArgument("model.rope_base must be positive");
    }
    if (!(mlp_ratio > 0.0) || d_ff() == 0) {
        throw InvalidArgument("model.mlp_ratio must give a positive feed-forward width");
    }
}

ModelState init_model(const ModelConfig& config) {
    config.validate();
    GaussianStream rng(config.seed);
    ModelState state;
    state.config = config;
    const std::size_t d = config.d_model;
    for (std::size_t l = 0; l < config.layers; ++l) {
        LayerWeights w;
        w.wq = gaussian_matrix(rng, d, d);
        w.wk = gaussian_matrix(rng, d, d);
        w.wv = gaussian_matrix(rng, d, d);
        w.wo = gaussian_matrix(rng, d, d);
        w.w_up = gaussian_matrix(rng, d, config.d_ff());
        w.w_down = gaussian_matrix(rng, config.d_ff(), d);
        w.attn_norm.assign(d, 1.0);
        w.mlp_norm.assign(d, 1.0);
        state.layers.push_back(std::move(w));
    }
    return state;
}

std::uint64_t ModelState::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](double x) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffU;
            h *= 1099511628211ULL;
        }
    };
    for (const auto& w : layers) {
        for (const Matrix* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w_up, &w.w_down}) {
            for (double x : m->data()) {
                mix(x);
            }
        }
        for (double x : w.attn_norm) {
            mix(x);
        }
        for (double x : w.mlp_norm) {
            mix(x);
        }
    }
    return h;
}

nlohmann::json ModelState::to_json() const {
    nlohmann::json tensors = nlohmann::json::object();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& w = layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        tensors[p + "wq"] = matrix_json(w.wq);
        tensors[p + "wk"] = matrix_json(w.wk);
        tensors[p + "wv"] = matrix_json(w.wv);
        tensors[p + "wo"] = matrix_json(w.wo);
        tensors[p + "w_up"] = matrix_json(w.w_up);
        tensors[p + "w_down"] = matrix_json(w.w_down);
        tensors[p + "attn_norm"] = w.attn_norm;
        tensors[p + "mlp_norm"] = w.mlp_norm;
    }
    return {{"layers", config.layers}, {"heads", config.heads}, {"dim", config.d_head()},
            {"d_model", config.d_model}, {"tensors", std::move(tensors)}};
}

Matrix rms_norm(const Matrix& x, std::span<const double> gain) {
    if (gain.size() != x.cols()) {
        throw InvalidArgument("rms_norm: gain length mismatch");
    }
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto src = x.row(r);
        const double ms = dot(src, src) / static_cast<double>(x.cols());
        const double inv = 1.0 / std::sqrt(ms + kNormEps);
        auto dst = out.row(r);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            dst[c] = src[c] * inv * gain[c];
        }
    }
    return out;
}

KvCache make_cache(const ModelConfig& config) {
    return KvCache(config.layers, config.heads, config.d_head());
}

BlockForward forward_prefill_block(const ModelState& model,
                                   const Matrix& block_embeddings,
                                   KvCache& cache,
                                   std::size_t start_position,
                                   std::span<const TokenInfo> tokens) {
    const auto& cfg = model.config;
    if (block_embeddings.rows() == 0) {
        throw InvalidArgument("forward_prefill_block: empty block");
    }
    if (block_embeddings.cols() != cfg.d_model) {
        throw InvalidArgument("forward_prefill_block: embedding width " + std::to_string(block_embeddings.cols()) +
                              " != d_model " + std::to_string(cfg.d_model));
    }
    if (cache.layers() != cfg.layers || cache.heads() != cfg.heads || cache.dim_head() != cfg.d_head()) {
        throw InvalidArgument("forward_prefill_block: cache geometry does not match model");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (cache.next_position(l) != start_position) {
            throw InvalidArgument("forward_prefill_block: start position " + std::to_string(start_position) +
                                  " but next uncached position is " + std::to_string(cache.next_position(l)));
        }
    }
    std::vector<TokenInfo> defaults;
    if (tokens.empty()) {
        defaults.resize(block_embeddings.rows());
        for (std::size_t i = 0; i < defaults.size(); ++i) {
            defaults[i].position = start_position + i;
        }
        tokens = defaults;
    }
    if (tokens.size() != block_embeddings.rows()) {
        throw InvalidArgument("forward_prefill_block: token metadata length mismatch");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].position != start_position + i) {
            throw InvalidArgument("forward_prefill_block: token positions must be contiguous from start position");
        }
    }
    if (!all_finite(block_embeddings)) {
        throw NumericError("forward_prefill_block: non-finite embeddings");
    }
    return run_block(model, block_embeddings, cache, tokens);
}

std::vector<double> decode_step(const ModelState& model,
                                std::span<const double> embedding,
                                KvCache& cache,
                                std::size_t position,
                                DecodeProbe* probe) {
    const auto& cfg = model.config;
    if (embedding.size() != cfg.d_model) {
        throw InvalidArgument("decode_step: embedding width mismatch");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (position < cache.next_position(l)) {
            throw InvalidArgument("decode_step: position " + std::to_string(position) +
                                  " is not after the last cached position");
        }
    }
    Matrix x(1, cfg.d_model, std::vector<double>(embedding.begin(), embedding.end()));
    const TokenInfo token{position, TokenTag{}, false};
    BlockForward fwd = run_block(model, x, cache, std::span<const TokenInfo>(&token, 1));
    if (probe != nullptr) {
        probe->attention = std::move(fwd.last_row_attention);
    }
    const auto row = fwd.hidden.row(0);
    return {row.begin(), row.end()};
}

}  // namespace blockprefill
