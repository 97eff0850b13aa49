#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

#include "oracles.hpp"
#include "pisa/block_stats.hpp"
#include "pisa/generate.hpp"
#include "pisa/rng.hpp"

using namespace pisa;

namespace {

double svd_oracle(const double* a, std::size_t d) {
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m(long(i), long(j)) = a[i * d + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

Matrix<double> random_matrix(std::uint64_t seed, std::size_t d) {
    Matrix<double> m(d, d);
    Rng rng(seed);
    for (double& x : m.data) x = rng.gaussian();
    return m;
}

}  // namespace

TEST(BlockStats, IdenticalKeysGiveExactlyZeroH) {
    // Dyadic values keep the centroid arithmetic exact, so H must be the
    // zero matrix bit-for-bit.
    const std::size_t b = 4, d = 3;
    Matrix<double> k(b, d), v(b, d);
    const double row[3] = {0.5, -1.25, 3.0};
    Rng rng(1);
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t a = 0; a < d; ++a) {
            k(r, a) = row[a];
            v(r, a) = rng.gaussian();
        }
    }
    const auto st = compute_block_stats<double>(k, v, b);
    for (const double x : st.h) EXPECT_EQ(x, 0.0);
    for (std::size_t a = 0; a < d; ++a) EXPECT_EQ(st.k_bar(0, a), row[a]);
}

TEST(BlockStats, BlockSizeOneGivesZeroH) {
    const auto bun = gen_gaussian<double>(0, 1, 8, 4, 1.0);
    const auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 1);
    EXPECT_EQ(st.num_blocks, 8u);
    for (const double x : st.h) EXPECT_EQ(x, 0.0);
    for (std::size_t j = 0; j < 8; ++j) {
        for (std::size_t a = 0; a < 4; ++a) {
            EXPECT_EQ(st.k_bar(j, a), bun.k[j * 4 + a]);
        }
    }
}

TEST(BlockStats, MatchesLoopOracle) {
    const auto bun = gen_gaussian<double>(0, 1, 8, 3, 1.0);
    const auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 2);
    const auto ref = oracle::block_stats(bun.k_head(0), bun.v_head(0), 2);
    for (std::size_t j = 0; j < st.num_blocks; ++j) {
        for (std::size_t a = 0; a < 3; ++a) {
            EXPECT_NEAR(st.k_bar(j, a), ref.k_bar(j, a), 1e-12);
            EXPECT_NEAR(st.v_hat(j, a), ref.v_hat(j, a), 1e-12);
            for (std::size_t c = 0; c < 3; ++c) {
                EXPECT_NEAR(st.h_block(j)[a * 3 + c], ref.h[j](a, c), 1e-12);
            }
        }
    }
}

TEST(BlockStats, CenteringIdentityHolds) {
    // sum_n (k_{j,n} - k_bar_j) = 0 per component; this cancellation is what
    // removes the first-order term from the piecewise denominator.
    for (const std::uint64_t seed : {0ull, 1ull, 2ull}) {
        const auto bun = gen_clustered<float>(seed, 1, 240, 12, 5, 2.0, 0.2);
        const std::size_t b = 12;
        const auto k = bun.k_head(0);
        const auto st = compute_block_stats(k, bun.v_head(0), b);
        for (std::size_t j = 0; j < st.num_blocks; ++j) {
            for (std::size_t a = 0; a < 12; ++a) {
                double s = 0.0;
                for (std::size_t r = 0; r < b; ++r) {
                    s += double(k(j * b + r, a)) - st.k_bar(j, a);
                }
                EXPECT_LE(std::abs(s), 1e-5);
            }
        }
    }
}

TEST(BlockStats, ScaledCentroidMatchesColumnSum) {
    const auto bun = gen_gaussian<double>(3, 1, 64, 8, 1.0);
    const std::size_t b = 16;
    const auto k = bun.k_head(0);
    const auto st = compute_block_stats(k, bun.v_head(0), b);
    for (std::size_t j = 0; j < st.num_blocks; ++j) {
        for (std::size_t a = 0; a < 8; ++a) {
            double col = 0.0;
            for (std::size_t r = 0; r < b; ++r) col += k(j * b + r, a);
            const double rel = std::abs(double(b) * st.k_bar(j, a) - col) /
                               std::max(1e-30, std::abs(col));
            EXPECT_LE(rel, 1e-6);
        }
    }
}

TEST(GlobalStats, SingleBlockMeansZeroDeviation) {
    const auto bun = gen_gaussian<double>(0, 1, 16, 4, 1.0);
    auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 16);
    compute_global_stats(st);
    EXPECT_EQ(st.num_blocks, 1u);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_DOUBLE_EQ(st.h_bar.data[i], st.h_block(0)[i]);
    }
    EXPECT_LE(st.m[0], 1e-12);
    EXPECT_LE(st.m_max, 1e-12);
}

TEST(GlobalStats, IdenticalBlocksMeanZeroDeviation) {
    // Tile one block's K/V across the sequence: all H_j equal, M_j ~ 0.
    const std::size_t b = 8, d = 4, n = 4;
    const auto base = gen_gaussian<double>(5, 1, b, d, 1.0);
    Matrix<double> k(n * b, d), v(n * b, d);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t a = 0; a < d; ++a) {
                k(j * b + r, a) = base.k[r * d + a];
                v(j * b + r, a) = base.v[r * d + a];
            }
        }
    }
    auto st = compute_block_stats<double>(k, v, b);
    compute_global_stats(st);
    for (std::size_t j = 0; j < n; ++j) EXPECT_LE(st.m[j], 1e-12);
}

TEST(GlobalStats, HbarIsEntrywiseMean) {
    const auto bun = gen_gaussian<double>(1, 1, 64, 8, 1.0);
    auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 16);
    compute_global_stats(st);
    for (std::size_t i = 0; i < 64; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < st.num_blocks; ++j) mean += st.h_block(j)[i];
        mean /= double(st.num_blocks);
        const double rel = std::abs(st.h_bar.data[i] - mean) /
                           std::max(1e-30, std::abs(mean));
        EXPECT_LE(rel, 1e-6);
    }
}

TEST(GlobalStats, KbarGlobalIsMeanOfAllKeyRows) {
    const auto bun = gen_gaussian<double>(2, 1, 64, 8, 1.0);
    auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 16);
    compute_global_stats(st);
    const auto k = bun.k_head(0);
    for (std::size_t a = 0; a < 8; ++a) {
        double mean = 0.0;
        for (std::size_t r = 0; r < 64; ++r) mean += k(r, a);
        mean /= 64.0;
        EXPECT_NEAR(st.k_bar_global[a], mean, 1e-12);
    }
}

TEST(GlobalStats, MmaxMatchesSvdOracle) {
    const auto bun = gen_gaussian<double>(0, 1, 64, 8, 1.0);
    auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 16);
    compute_global_stats(st);
    double expect = 0.0;
    std::vector<double> diff(64);
    for (std::size_t j = 0; j < st.num_blocks; ++j) {
        for (std::size_t i = 0; i < 64; ++i) diff[i] = st.h_block(j)[i] - st.h_bar.data[i];
        const double sv = svd_oracle(diff.data(), 8);
        EXPECT_NEAR(st.m[j], sv, 1e-8);
        expect = std::max(expect, sv);
    }
    EXPECT_NEAR(st.m_max, expect, 1e-8);
}

TEST(SpectralNorm, IdentityAndDiagonal) {
    Matrix<double> eye(4, 4);
    for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
    EXPECT_NEAR(spectral_norm(eye), 1.0, 1e-12);

    Matrix<double> diag(2, 2);
    diag(0, 0) = 3.0;
    diag(1, 1) = -5.0;
    EXPECT_NEAR(spectral_norm(diag), 5.0, 1e-12);
}

TEST(SpectralNorm, MatchesSvdOracle) {
    const auto m = random_matrix(0, 8);
    EXPECT_NEAR(spectral_norm(m), svd_oracle(m.data.data(), 8), 1e-8);
}

TEST(SpectralNorm, TransposeAndScalingInvariants) {
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const auto m = random_matrix(seed, 6);
        Matrix<double> mt(6, 6);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j) mt(j, i) = m(i, j);
        const double nm = spectral_norm(m);
        EXPECT_NEAR(spectral_norm(mt), nm, 1e-8);

        Matrix<double> ms = m;
        for (double& x : ms.data) x *= -2.5;
        EXPECT_NEAR(spectral_norm(ms), 2.5 * nm, 1e-8);
    }
}

TEST(SpectralNorm, PowerIterationAgreesWithExact) {
    for (const std::uint64_t seed : {4ull, 5ull}) {
        const auto m = random_matrix(seed, 12);
        const double exact = spectral_norm(m, SpectralMethod::Exact);
        const double power = spectral_norm(m, SpectralMethod::PowerIteration);
        EXPECT_NEAR(power, exact, 1e-6 * std::max(1.0, exact));
    }
}

TEST(SpectralNorm, ZeroMatrixAndErrors) {
    Matrix<double> z(5, 5);
    EXPECT_EQ(spectral_norm(z), 0.0);
    EXPECT_EQ(spectral_norm(z, SpectralMethod::PowerIteration), 0.0);
    Matrix<double> bad(2, 2);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(spectral_norm(bad), NonFiniteValue);
    Matrix<double> rect(2, 3);
    EXPECT_THROW(spectral_norm(rect), InvalidDimension);
}

TEST(QueryBlockMeans, ConstantAndDegenerateCases) {
    Matrix<double> q(8, 3);
    for (std::size_t r = 0; r < 8; ++r) {
        q(r, 0) = 1.5;
        q(r, 1) = -2.0;
        q(r, 2) = 0.25;
    }
    const auto means = query_block_means<double>(q, 4);
    EXPECT_EQ(means.rows, 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_DOUBLE_EQ(means(i, 0), 1.5);
        EXPECT_DOUBLE_EQ(means(i, 1), -2.0);
        EXPECT_DOUBLE_EQ(means(i, 2), 0.25);
    }
    const auto single = query_block_means<double>(q, 8);
    EXPECT_EQ(single.rows, 1u);
}

TEST(QueryBlockMeans, MatchesLoopOracle) {
    const auto bun = gen_gaussian<double>(0, 1, 8, 2, 1.0);
    const auto means = query_block_means(bun.q_head(0), 4);
    const auto q = bun.q_head(0);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t a = 0; a < 2; ++a) {
            double s = 0.0;
            for (std::size_t r = 0; r < 4; ++r) s += q(i * 4 + r, a);
            EXPECT_NEAR(means(i, a), s / 4.0, 1e-12);
        }
    }
    EXPECT_THROW(query_block_means(bun.q_head(0), 3), BlockDivisibility);
}

TEST(MeanHOver, SubsetMean) {
    const auto bun = gen_gaussian<double>(4, 1, 64, 4, 1.0);
    auto st = compute_block_stats(bun.k_head(0), bun.v_head(0), 16);
    const std::vector<std::size_t> subset{0, 2};
    const auto mean = mean_h_over(st, subset);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_NEAR(mean.data[i], 0.5 * (st.h_block(0)[i] + st.h_block(2)[i]), 1e-12);
    }
    EXPECT_EQ(mean_h_over(st, {}).data, Matrix<double>(4, 4).data);
}
