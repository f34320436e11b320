// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "blockprefill/errors.hpp"

namespace blockprefill {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : m_rows(rows), m_cols(cols), m_data(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : m_rows(rows), m_cols(cols), m_data(std::move(data)) {
    if (m_data.size() != rows * cols) {
        throw InvalidArgument("Matrix: data length " + std::to_string(m_data.size()) + " != " +
                              std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw InvalidArgument("Matrix::from_rows: ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

void Matrix::append_rows(const Matrix& other) {
    if (other.m_rows == 0) {
        return;
    }
    if (m_rows == 0) {
        m_cols = other.m_cols;
    } else if (other.m_cols != m_cols) {
        throw InvalidArgument("Matrix::append_rows: column mismatch");
    }
    m_data.insert(m_data.end(), other.m_data.begin(), other.m_data.end());
    m_rows += other.m_rows;
}

void Matrix::append_row(std::span<const double> values) {
    if (m_rows == 0) {
        m_cols = values.size();
    } else if (values.size() != m_cols) {
        throw InvalidArgument("Matrix::append_row: column mismatch");
    }
    m_data.insert(m_data.end(), values.begin(), values.end());
    ++m_rows;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > m_rows) {
        throw InvalidArgument("Matrix::slice_rows: range out of bounds");
    }
    return Matrix(end - begin,
                  m_cols,
                  std::vector<double>(m_data.begin() + static_cast<std::ptrdiff_t>(begin * m_cols),
                                      m_data.begin() + static_cast<std::ptrdiff_t>(end * m_cols)));
}

Matrix Matrix::slice_cols(std::size_t begin, std::size_t end) const {
    if (begin > end || end > m_cols) {
        throw InvalidArgument("Matrix::slice_cols: range out of bounds");
    }
    Matrix out(m_rows, end - begin);
    for (std::size_t r = 0; r < m_rows; ++r) {
        std::copy_n(m_data.begin() + static_cast<std::ptrdiff_t>(r * m_cols + begin),
                    end - begin,
                    out.row(r).begin());
    }
    return out;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), m_cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m_rows) {
            throw InvalidArgument("Matrix::gather_rows: index out of range");
        }
        const auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

void Matrix::set_cols(std::size_t col_begin, const Matrix& block) {
    if (block.rows() != m_rows || col_begin + block.cols() > m_cols) {
        throw InvalidArgument("Matrix::set_cols: block does not fit");
    }
    for (std::size_t r = 0; r < m_rows; ++r) {
        const auto src = block.row(r);
        std::copy(src.begin(), src.end(), row(r).begin() + static_cast<std::ptrdiff_t>(col_begin));
    }
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double x) { return std::isfinite(x); });
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double norm(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()) + ")");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                dst[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw InvalidArgument("matmul_transposed: column dimensions differ");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return out;
}

void softmax_inplace(std::span<double> row) {
    if (row.empty()) {
        throw InvalidArgument("softmax: empty row");
    }
    const double max_value = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& x : row) {
        x = std::exp(x - max_value);
        sum += x;
    }
    for (double& x : row) {
        x /= sum;
    }
}

Matrix softmax_rows(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw InvalidArgument("softmax_rows: empty matrix");
    }
    Matrix out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        softmax_inplace(out.row(r));
    }
    return out;
}

Matrix scaled_dot_attention(const Matrix& q,
                            const Matrix& k,
                            const Matrix& v,
                            std::optional<std::size_t> causal_offset,
                            AttentionProbe* probe) {
    if (q.cols() != k.cols()) {
        throw InvalidArgument("scaled_dot_attention: query dim " + std::to_string(q.cols()) + " != key dim " +
                              std::to_string(k.cols()));
    }
    if (k.rows() != v.rows()) {
        throw InvalidArgument("scaled_dot_attention: key rows " + std::to_string(k.rows()) + " != value rows " +
                              std::to_string(v.rows()));
    }
    if (k.rows() == 0 || q.cols() == 0) {
        throw InvalidArgument("scaled_dot_attention: empty key set");
    }
    constexpr double masked = std::numeric_limits<double>::lowest();
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    const std::size_t nk = k.rows();

    Matrix out(q.rows(), v.cols());
    std::vector<double> logits(nk);
    double entropy_sum = 0.0;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const std::size_t visible = causal_offset ? std::min(nk, *causal_offset + i + 1) : nk;
        const auto qi = q.row(i);
        for (std::size_t j = 0; j < visible; ++j) {
            logits[j] = dot(qi, k.row(j)) * scale;
        }
        std::fill(logits.begin() + static_cast<std::ptrdiff_t>(visible), logits.end(), masked);
        softmax_inplace(logits);

        auto dst = out.row(i);
        for (std::size_t j = 0; j < visible; ++j) {
            const double w = logits[j];
            const auto vj = v.row(j);
            for (std::size_t c = 0; c < dst.size(); ++c) {
                dst[c] += w * vj[c];
            }
        }
        for (std::size_t j = visible; j < nk; ++j) {
            if (logits[j] != 0.0) {
                throw NumericError("scaled_dot_attention: masked weight leaked through softmax");
            }
        }
        if (probe != nullptr) {
            for (std::size_t j = 0; j < visible; ++j) {
                if (logits[j] > 0.0) {
                    entropy_sum -= logits[j] * std::log(logits[j]);
                }
            }
            if (i + 1 == q.rows()) {
                probe->last_row = logits;
            }
        }
    }
    if (probe != nullptr && q.rows() > 0) {
        probe->mean_entropy = entropy_sum / static_cast<double>(q.rows());
    }
    return out;
}

namespace {

Matrix rotate(const Matrix& x, std::span<const std::size_t> positions, double base, double sign) {
    if (x.cols() % 2 != 0) {
        throw InvalidArgument("apply_rope: odd head dimension " + std::to_string(x.cols()));
    }
    if (positions.size() != x.rows()) {
        throw InvalidArgument("apply_rope: positions length " + std::to_string(positions.size()) +
                              " != rows " + std::to_string(x.rows()));
    }
    const std::size_t d = x.cols();
    std::vector<double> inv_freq(d / 2);
    for (std::size_t i = 0; i < d / 2; ++i) {
        inv_freq[i] = std::pow(base, -static_cast<double>(2 * i) / static_cast<double>(d));
    }
    Matrix out(x.rows(), d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto src = x.row(r);
        auto dst = out.row(r);
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double angle = sign * pos * inv_freq[i];
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double a = src[2 * i];
            const double b = src[2 * i + 1];
            dst[2 * i] = a * c - b * s;
            dst[2 * i + 1] = a * s + b * c;
        }
    }
    return out;
}

}  // namespace

Matrix apply_rope(const Matrix& x, std::span<const std::size_t> positions, double base) {
    return rotate(x, positions, base, 1.0);
}

Matrix apply_rope_inverse(const Matrix& x, std::span<const std::size_t> positions, double base) {
    return rotate(x, positions, base, -1.0);
}

}  // namespace blockprefill
