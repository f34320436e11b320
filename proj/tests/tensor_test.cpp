// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/tensor.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "blockprefill/errors.hpp"

namespace blockprefill {
namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = dist(rng);
    }
    return m;
}

/// Three nested loops with explicit masking; shares no code with the library kernel.
Matrix reference_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::optional<std::size_t> offset) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix out(q.rows(), v.cols());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const std::size_t visible = offset ? std::min(k.rows(), *offset + i + 1) : k.rows();
        std::vector<double> logits(visible);
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) {
                s += q(i, c) * k(j, c);
            }
            logits[j] = s * scale;
            max_logit = std::max(max_logit, logits[j]);
        }
        double z = 0.0;
        for (double& l : logits) {
            l = std::exp(l - max_logit);
            z += l;
        }
        for (std::size_t j = 0; j < visible; ++j) {
            for (std::size_t c = 0; c < v.cols(); ++c) {
                out(i, c) += logits[j] / z * v(j, c);
            }
        }
    }
    return out;
}

void expect_near_relative(const Matrix& actual, const Matrix& expected, double tol) {
    ASSERT_EQ(actual.rows(), expected.rows());
    ASSERT_EQ(actual.cols(), expected.cols());
    for (std::size_t i = 0; i < actual.data().size(); ++i) {
        const double e = expected.data()[i];
        EXPECT_NEAR(actual.data()[i], e, tol * std::max(1.0, std::abs(e)));
    }
}

TEST(Matrix, ConstructorRejectsWrongDataLength) {
    EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), InvalidArgument);
}

TEST(Matrix, SliceGatherAndAppend) {
    Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
    EXPECT_EQ(m.slice_rows(1, 3), Matrix::from_rows({{4, 5, 6}, {7, 8, 9}}));
    EXPECT_EQ(m.slice_cols(1, 2), Matrix::from_rows({{2}, {5}, {8}}));
    const std::size_t idx[] = {2, 0};
    EXPECT_EQ(m.gather_rows(idx), Matrix::from_rows({{7, 8, 9}, {1, 2, 3}}));

    Matrix grown;
    grown.append_rows(m.slice_rows(0, 1));
    grown.append_row(m.row(2));
    EXPECT_EQ(grown, Matrix::from_rows({{1, 2, 3}, {7, 8, 9}}));
}

TEST(Matmul, MatchesNaiveProduct) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng() % 7;
        const std::size_t k = 1 + rng() % 7;
        const std::size_t m = 1 + rng() % 7;
        const Matrix a = random_matrix(rng, n, k);
        const Matrix b = random_matrix(rng, k, m);
        Matrix expected(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t t = 0; t < k; ++t) {
                    expected(i, j) += a(i, t) * b(t, j);
                }
            }
        }
        expect_near_relative(matmul(a, b), expected, 1e-12);

        Matrix bt(m, k);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                bt(j, i) = b(i, j);
            }
        }
        expect_near_relative(matmul_transposed(a, bt), expected, 1e-12);
    }
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), InvalidArgument);
}

TEST(SoftmaxRows, SingleElementRowIsOne) {
    for (double x : {-1e300, -5.0, 0.0, 7.5, 1e300}) {
        EXPECT_DOUBLE_EQ(softmax_rows(Matrix(1, 1, x))(0, 0), 1.0);
    }
}

TEST(SoftmaxRows, HandComputedPair) {
    const Matrix out = softmax_rows(Matrix::from_rows({{0.0, std::log(3.0)}}));
    EXPECT_NEAR(out(0, 0), 0.25, 1e-12);
    EXPECT_NEAR(out(0, 1), 0.75, 1e-12);
}

TEST(SoftmaxRows, ConstantRowIsUniform) {
    for (double c : {-40.0, 0.0, 3.25, 900.0}) {
        const Matrix out = softmax_rows(Matrix(1, 3, c));
        for (double x : out.data()) {
            EXPECT_NEAR(x, 1.0 / 3.0, 1e-12);
        }
    }
}

TEST(SoftmaxRows, LargeLogitsDoNotOverflow) {
    const Matrix out = softmax_rows(Matrix::from_rows({{1000.0, 1001.0, 999.0}}));
    EXPECT_TRUE(all_finite(out));
    EXPECT_GT(out(0, 1), out(0, 0));
    EXPECT_GT(out(0, 0), out(0, 2));
}

TEST(SoftmaxRows, EmptyInputIsRejected) {
    EXPECT_THROW(softmax_rows(Matrix()), InvalidArgument);
    std::vector<double> none;
    EXPECT_THROW(softmax_inplace(none), InvalidArgument);
}

TEST(SoftmaxRows, RandomRowsSumToOneAndKeepOrder) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const Matrix m = random_matrix(rng, 1 + rng() % 6, 1 + rng() % 40, 50.0);
        const Matrix s = softmax_rows(m);
        for (std::size_t r = 0; r < m.rows(); ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < m.cols(); ++c) {
                EXPECT_GE(s(r, c), 0.0);
                sum += s(r, c);
                if (c > 0) {
                    EXPECT_EQ(m(r, c) < m(r, c - 1), s(r, c) < s(r, c - 1));
                }
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(Attention, SingleKeyReturnsItsValue) {
    std::mt19937_64 rng(5);
    const Matrix q = random_matrix(rng, 4, 6);
    const Matrix k = random_matrix(rng, 1, 6);
    const Matrix v = random_matrix(rng, 1, 6);
    const Matrix out = scaled_dot_attention(q, k, v);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            EXPECT_NEAR(out(r, c), v(0, c), 1e-12);
        }
    }
}

TEST(Attention, IdenticalKeysAverageValues) {
    std::mt19937_64 rng(6);
    const Matrix q = random_matrix(rng, 3, 4);
    const Matrix k(5, 4, 0.7);
    const Matrix v = random_matrix(rng, 5, 4);
    const Matrix out = scaled_dot_attention(q, k, v);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            mean += v(j, c) / 5.0;
        }
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_NEAR(out(r, c), mean, 1e-12);
        }
    }
}

TEST(Attention, HandComputedTwoKeyCase) {
    const Matrix q = Matrix::from_rows({{1, 0}});
    const Matrix kv = Matrix::from_rows({{1, 0}, {0, 1}});
    AttentionProbe probe;
    const Matrix out = scaled_dot_attention(q, kv, kv, std::nullopt, &probe);
    EXPECT_NEAR(out(0, 0), 0.6698, 1e-4);
    EXPECT_NEAR(out(0, 1), 0.3302, 1e-4);
    ASSERT_EQ(probe.last_row.size(), 2u);
    EXPECT_NEAR(probe.last_row[0], 0.6698, 1e-4);
}

TEST(Attention, ProbeEntropyOfUniformRowIsLogN) {
    const Matrix q(2, 4, 0.0);
    const Matrix k(8, 4, 1.0);
    AttentionProbe probe;
    scaled_dot_attention(q, k, k, std::nullopt, &probe);
    EXPECT_NEAR(probe.mean_entropy, std::log(8.0), 1e-12);
}

TEST(Attention, MatchesThreeLoopReference) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t nq = 1 + rng() % 32;
        const std::size_t nk = 1 + rng() % 32;
        const std::size_t d = 1 + rng() % 32;
        const Matrix q = random_matrix(rng, nq, d, 2.0);
        const Matrix k = random_matrix(rng, nk, d, 2.0);
        const Matrix v = random_matrix(rng, nk, d);
        std::optional<std::size_t> offset;
        if (trial % 2 == 1 && nk >= nq) {
            offset = nk - nq;
        }
        expect_near_relative(scaled_dot_attention(q, k, v, offset), reference_attention(q, k, v, offset), 1e-5);
    }
}

TEST(Attention, CausalRowsIgnoreFutureEntries) {
    std::mt19937_64 rng(23);
    const std::size_t nq = 6;
    const std::size_t offset = 4;
    const Matrix q = random_matrix(rng, nq, 8);
    Matrix k = random_matrix(rng, offset + nq, 8);
    Matrix v = random_matrix(rng, offset + nq, 8);
    const Matrix before = scaled_dot_attention(q, k, v, offset);
    for (std::size_t c = 0; c < 8; ++c) {
        k(offset + 3, c) += 100.0;
        v(offset + 3, c) -= 50.0;
    }
    const Matrix after = scaled_dot_attention(q, k, v, offset);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            EXPECT_EQ(before(r, c), after(r, c)) << "row " << r;
        }
    }
    EXPECT_NE(before(3, 0), after(3, 0));
}

TEST(Attention, RejectsBadShapes) {
    EXPECT_THROW(scaled_dot_attention(Matrix(2, 3), Matrix(4, 2), Matrix(4, 2)), InvalidArgument);
    EXPECT_THROW(scaled_dot_attention(Matrix(2, 3), Matrix(4, 3), Matrix(3, 3)), InvalidArgument);
    EXPECT_THROW(scaled_dot_attention(Matrix(2, 3), Matrix(0, 3), Matrix(0, 3)), InvalidArgument);
}

TEST(Rope, PositionZeroIsIdentity) {
    std::mt19937_64 rng(2);
    const Matrix x = random_matrix(rng, 1, 8);
    const std::size_t pos[] = {0};
    EXPECT_EQ(apply_rope(x, pos, 10000.0), x);
}

TEST(Rope, UnitBaseTwoDimensionalRotation) {
    const std::size_t pos[] = {1};
    const Matrix out = apply_rope(Matrix::from_rows({{1, 0}}), pos, 1.0);
    EXPECT_NEAR(out(0, 0), 0.5403, 1e-4);
    EXPECT_NEAR(out(0, 1), 0.8415, 1e-4);
}

TEST(Rope, RejectsOddWidthAndLengthMismatch) {
    const std::size_t one[] = {0};
    const std::size_t two[] = {0, 1};
    EXPECT_THROW(apply_rope(Matrix(1, 3), one, 10000.0), InvalidArgument);
    EXPECT_THROW(apply_rope(Matrix(1, 4), two, 10000.0), InvalidArgument);
}

TEST(Rope, PreservesNormsAndInvertsExactly) {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 6;
        const std::size_t d = 2 * (1 + rng() % 16);
        const Matrix x = random_matrix(rng, n, d, 3.0);
        std::vector<std::size_t> pos(n);
        for (auto& p : pos) {
            p = rng() % 100000;
        }
        const Matrix y = apply_rope(x, pos, 10000.0);
        for (std::size_t r = 0; r < n; ++r) {
            EXPECT_NEAR(norm(y.row(r)), norm(x.row(r)), 1e-5);
        }
        expect_near_relative(apply_rope_inverse(y, pos, 10000.0), x, 1e-9);
    }
}

TEST(Rope, SamePositionPreservesInnerProducts) {
    std::mt19937_64 rng(31);
    const Matrix a = random_matrix(rng, 2, 16);
    const std::size_t pos[] = {777, 777};
    const Matrix r = apply_rope(a, pos, 10000.0);
    EXPECT_NEAR(dot(r.row(0), r.row(1)), dot(a.row(0), a.row(1)), 1e-9);
}

TEST(Rope, ScoresDependOnlyOnRelativeOffset) {
    std::mt19937_64 rng(37);
    const Matrix q = random_matrix(rng, 1, 8);
    const Matrix k = random_matrix(rng, 1, 8);
    const auto score = [&](std::size_t pq, std::size_t pk) {
        const std::size_t a[] = {pq};
        const std::size_t b[] = {pk};
        return dot(apply_rope(q, a, 10000.0).row(0), apply_rope(k, b, 10000.0).row(0));
    };
    EXPECT_NEAR(score(10, 3), score(110, 103), 1e-9);
    EXPECT_NEAR(score(5000, 4990), score(20, 10), 1e-9);
}

}  // namespace
}  // namespace blockprefill
