// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

namespace blockprefill {

/**
 * Dense row-major matrix of doubles.
 *
 * Storage precision is fixed at 64 bits; the byte model used for memory
 * accounting is independent of it (see kv_memory_bytes).
 */
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return m_rows; }
    std::size_t cols() const { return m_cols; }
    bool empty() const { return m_data.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return m_data[r * m_cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return m_data[r * m_cols + c]; }

    std::span<double> row(std::size_t r) { return {m_data.data() + r * m_cols, m_cols}; }
    std::span<const double> row(std::size_t r) const { return {m_data.data() + r * m_cols, m_cols}; }

    std::span<double> data() { return m_data; }
    std::span<const double> data() const { return m_data; }

    /// Appends the rows of `other`; an empty matrix adopts the column count of `other`.
    void append_rows(const Matrix& other);
    void append_row(std::span<const double> values);

    Matrix slice_rows(std::size_t begin, std::size_t end) const;
    Matrix slice_cols(std::size_t begin, std::size_t end) const;
    /// Gathers rows in the given order.
    Matrix gather_rows(std::span<const std::size_t> indices) const;
    /// Writes `block` into columns [col_begin, col_begin + block.cols()).
    void set_cols(std::size_t col_begin, const Matrix& block);

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t m_rows = 0;
    std::size_t m_cols = 0;
    std::vector<double> m_data;
};

bool all_finite(const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

/// Numerically stable in-place softmax of one row (max subtraction).
void softmax_inplace(std::span<double> row);

Matrix softmax_rows(const Matrix& m);

/// Optional side channel for callers that need attention statistics.
struct AttentionProbe {
    /// Mean Shannon entropy (nats) of the attention rows.
    double mean_entropy = 0.0;
    /// Attention weights of the last query row over all keys.
    std::vector<double> last_row;
};

/**
 * softmax(Q·Kᵀ/√d + mask)·V.
 *
 * With `causal_offset` set, query i sees keys [0, causal_offset + i]; masked
 * logits take the most negative finite double so they vanish after the max
 * subtraction in softmax. Rows are processed one at a time, so the full
 * nq×nk logit matrix is never materialized.
 */
Matrix scaled_dot_attention(const Matrix& q,
                            const Matrix& k,
                            const Matrix& v,
                            std::optional<std::size_t> causal_offset = std::nullopt,
                            AttentionProbe* probe = nullptr);

/// Rotary position encoding: pair (2i, 2i+1) of row r is rotated by positions[r] / base^(2i/d).
Matrix apply_rope(const Matrix& x, std::span<const std::size_t> positions, double base);

/// Inverse rotation of apply_rope (rotation by the negated angle).
Matrix apply_rope_inverse(const Matrix& x, std::span<const std::size_t> positions, double base);

}  // namespace blockprefill
