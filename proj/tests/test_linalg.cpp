#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "viti/error.hpp"
#include "viti/linalg.hpp"

using namespace viti;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (float& v : m.data()) v = static_cast<float>(rng.normal() * scale);
    return m;
}

// Triple loop in long double.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a(i, k) * b(k, j);
            out(i, j) = static_cast<float>(s);
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

void expect_near(const Matrix& a, const Matrix& b, double tol) {
    ASSERT_EQ(a.rows(), b.rows());
    ASSERT_EQ(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], tol) << i;
}

} // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandExample) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{1}, {1}});
    EXPECT_EQ(matmul(a, b), Matrix::from_rows({{3}, {7}}));
}

TEST(Matmul, ZerosAnnihilate) {
    Rng rng(1);
    const Matrix m = random_matrix(3, 4, rng);
    EXPECT_EQ(matmul(Matrix(2, 3), m), Matrix(2, 4));
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
    EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
    EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
}

TEST(Matmul, VariantsAgreeWithNaiveProduct) {
    Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix a = random_matrix(7, 5, rng), b = random_matrix(5, 9, rng);
        expect_near(matmul(a, b), naive_matmul(a, b), 1e-5);
        const Matrix at = transpose(a);
        expect_near(matmul_tn(at, b), naive_matmul(a, b), 1e-5);
        const Matrix bt = transpose(b);
        expect_near(matmul_nt(a, bt), naive_matmul(a, b), 1e-5);

        Matrix acc = naive_matmul(a, b);
        matmul_tn_acc(at, b, acc);
        Matrix twice = naive_matmul(a, b);
        for (float& v : twice.data()) v *= 2;
        expect_near(acc, twice, 1e-4);
    }
}

TEST(Matmul, VecmatMatchesRowProduct) {
    Rng rng(3);
    const Matrix w = random_matrix(6, 4, rng);
    const Matrix x = random_matrix(1, 6, rng);
    std::vector<float> y(4), yt(6);
    vecmat(x.row(0), w, y);
    const Matrix ref = naive_matmul(x, w);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[j], ref(0, j), 1e-5);

    const Matrix z = random_matrix(1, 4, rng);
    vecmat_t(z.row(0), w, yt);
    const Matrix ref_t = naive_matmul(z, transpose(w));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(yt[j], ref_t(0, j), 1e-5);
}

TEST(Softmax, SymmetricInputIsUniform) {
    const Matrix s = softmax_rows(Matrix::from_rows({{0, 0}}));
    EXPECT_FLOAT_EQ(s(0, 0), 0.5f);
    EXPECT_FLOAT_EQ(s(0, 1), 0.5f);
}

TEST(Softmax, MatchesExpNormalizeOracle) {
    const Matrix s = softmax_rows(Matrix::from_rows({{1, 2, 3}}));
    long double e[3] = {std::exp(1.0L), std::exp(2.0L), std::exp(3.0L)};
    const long double z = e[0] + e[1] + e[2];
    for (int i = 0; i < 3; ++i) {
        const double ref = static_cast<double>(e[i] / z);
        EXPECT_NEAR(s(0, i), ref, 1e-5 * ref);
    }
    EXPECT_NEAR(s(0, 0), 0.09003, 1e-5);
    EXPECT_NEAR(s(0, 1), 0.24473, 1e-5);
    EXPECT_NEAR(s(0, 2), 0.66524, 1e-5);
}

TEST(Softmax, StableForLargeLogits) {
    const Matrix s = softmax_rows(Matrix::from_rows({{1000, 0}}));
    EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(s(0, 1), 0.0, 1e-12);
}

TEST(Softmax, NanRaisesNumericError) {
    Matrix m = Matrix::from_rows({{0, 1}});
    m(0, 1) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(softmax_rows(m), NumericError);
}

TEST(Softmax, RowsSumToOneProperty) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix m = random_matrix(4, 1 + trial % 17, rng, 10.0);
        const Matrix s = softmax_rows(m);
        for (std::size_t r = 0; r < s.rows(); ++r) {
            double sum = 0;
            for (float v : s.row(r)) {
                EXPECT_GE(v, 0.0f);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, ShiftInvarianceProperty) {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        Matrix m = random_matrix(3, 8, rng, 3.0);
        Matrix shifted = m;
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const auto shift = static_cast<float>(rng.normal() * 20.0);
            for (float& v : shifted.row(r)) v += shift;
        }
        expect_near(softmax_rows(m), softmax_rows(shifted), 1e-5);
    }
}

TEST(LayerNorm, ConstantVectorMapsToZeros) {
    const std::vector<float> x(5, 3.5f), g(5, 1.0f), b(5, 0.0f);
    for (float v : layer_norm(x, g, b, 1e-5f)) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, AlreadyStandardizedIsUnchanged) {
    const std::vector<float> x{1, -1}, g{1, 1}, b{0, 0};
    const auto y = layer_norm(x, g, b, 1e-12f);
    EXPECT_NEAR(y[0], 1.0, 1e-6);
    EXPECT_NEAR(y[1], -1.0, 1e-6);
}

TEST(LayerNorm, ZeroGainCollapsesToBias) {
    const std::vector<float> x{0.3f, 7, -2, 1}, g(4, 0.0f), b{1, 2, 3, 4};
    EXPECT_EQ(layer_norm(x, g, b, 1e-5f), b);
}

TEST(LayerNorm, OutputStatisticsProperty) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 4 + static_cast<std::size_t>(trial);
        std::vector<float> x(n), g(n, 1.0f), b(n, 0.0f);
        for (float& v : x) v = static_cast<float>(rng.normal() * 5 + 2);
        const auto y = layer_norm(x, g, b, 1e-6f);
        double mean = 0, var = 0;
        for (float v : y) mean += v;
        mean /= n;
        for (float v : y) var += (v - mean) * (v - mean);
        var /= n;
        EXPECT_LT(std::abs(mean), 1e-5);
        EXPECT_LT(std::abs(var - 1.0), 1e-3);
    }
}

TEST(LayerNorm, LengthMismatchThrows) {
    const std::vector<float> x(3), g(2), b(3);
    EXPECT_THROW(layer_norm(x, g, b, 1e-5f), ShapeError);
}

TEST(Silu, KnownValues) {
    EXPECT_EQ(silu(0.0f), 0.0f);
    EXPECT_NEAR(silu(1.0f), 0.73106, 1e-5);
    EXPECT_NEAR(silu(40.0f), 40.0, 1e-6);
    const std::vector<float> x{0, 1, -1};
    const auto y = silu(std::span<const float>(x));
    EXPECT_NEAR(y[2], -1.0 / (1.0 + std::exp(1.0)), 1e-6);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
    EXPECT_EQ(Rng::algorithm, "mt19937_64");
}

TEST(Rng, DerivedStreamsAreIndependentOfOrder) {
    Rng a = Rng::derive(9, 3);
    Rng unused = Rng::derive(9, 2);
    (void)unused.next_u64();
    Rng b = Rng::derive(9, 3);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_NE(Rng::derive(9, 3).next_u64(), Rng::derive(9, 4).next_u64());
}

TEST(Rng, NormalMomentsAndUniformIntRange) {
    Rng rng(7);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        s += v;
        s2 += v * v;
    }
    EXPECT_NEAR(s / n, 0.0, 0.03);
    EXPECT_NEAR(s2 / n, 1.0, 0.04);
    for (int i = 0; i < 1000; ++i) {
        const auto k = rng.uniform_int(-2, 3);
        EXPECT_GE(k, -2);
        EXPECT_LE(k, 3);
    }
}

TEST(Matrix, FiniteCheck) {
    Matrix m(2, 2, 1.0f);
    EXPECT_TRUE(m.all_finite());
    m(1, 1) = std::numeric_limits<float>::infinity();
    EXPECT_FALSE(m.all_finite());
}
