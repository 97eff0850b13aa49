#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pisa/analysis.hpp"
#include "pisa/engine.hpp"
#include "pisa/generate.hpp"

using namespace pisa;

namespace {

template <class T>
double max_rel_linf(const Matrix<T>& a, const Matrix<T>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double x = double(a.data[i]), y = double(b.data[i]);
        worst = std::max(worst,
                         std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-30}));
    }
    return worst;
}

struct Instance {
    TensorBundle<double> bundle;
    BlockStatistics stats;
    SelectionPlan plan;
    AttentionConfig cfg;
};

Instance clustered_instance(std::uint64_t seed, std::size_t L, std::size_t b,
                            std::size_t d, double sparsity) {
    Instance in;
    in.bundle = gen_clustered<double>(seed, 1, L, d, 16, 2.0, 0.15);
    in.cfg.block_size = b;
    in.stats = compute_block_stats(in.bundle.k_head(0), in.bundle.v_head(0), b);
    compute_global_stats(in.stats);
    const auto q_bar = query_block_means(in.bundle.q_head(0), b);
    const auto kres = sparsity_to_k(sparsity, in.stats.num_blocks);
    in.plan = select_topk_plain(q_bar, in.stats.k_bar, kres.k,
                                in.cfg.resolved_scale(d));
    return in;
}

const std::vector<PisaVariant> kAllVariants = {
    PisaVariant::SparseOnly, PisaVariant::Zeroth, PisaVariant::BlockFirst,
    PisaVariant::Hybrid, PisaVariant::GlobalCentroid};

}  // namespace

TEST(PisaReference, FullCoverageMatchesDenseForEveryVariant) {
    AttentionConfig cfg;
    cfg.block_size = 16;
    for (const std::uint64_t seed : {0ull, 1ull, 2ull}) {
        const auto b = gen_gaussian<double>(seed, 1, 128, 16, 1.0);
        const auto dense = dense_naive(b.q_head(0), b.k_head(0), b.v_head(0),
                                       cfg.resolved_scale(16));
        for (const auto variant : kAllVariants) {
            const auto res = pisa_multihead(b, 0.0, RouterOptions{}, variant, cfg);
            EXPECT_LE(compare_outputs(res.heads[0].output, dense).max_abs, 1e-10)
                << variant_name(variant) << " seed " << seed;
            for (const double tm : res.heads[0].tail_mass) EXPECT_EQ(tm, 0.0);
        }
    }
}

TEST(PisaReference, ConstantKeyBlocksMakeApproximationExact) {
    // Every key block constant: the zeroth-order tail term is exact and all
    // H_j vanish, so Zeroth/BlockFirst/Hybrid reproduce dense attention. This
    // dies if the B factor on the centroid exponentials is mishandled.
    AttentionConfig cfg;
    cfg.block_size = 16;
    const std::size_t L = 256, d = 16, B = 16;
    for (const std::uint64_t seed : {0ull, 1ull}) {
        auto b = gen_gaussian<double>(seed, 1, L, d, 1.0);
        Rng rng(seed + 100);
        for (std::size_t j = 0; j < L / B; ++j) {
            for (std::size_t a = 0; a < d; ++a) {
                const double val = rng.gaussian();
                for (std::size_t n = 0; n < B; ++n) b.k[(j * B + n) * d + a] = val;
            }
        }
        auto stats = compute_block_stats(b.k_head(0), b.v_head(0), B);
        compute_global_stats(stats);
        const auto q_bar = query_block_means(b.q_head(0), B);
        const auto plan = select_topk_plain(q_bar, stats.k_bar, 4,
                                            cfg.resolved_scale(d));
        const auto dense = dense_naive(b.q_head(0), b.k_head(0), b.v_head(0),
                                       cfg.resolved_scale(d));
        for (const auto variant : {PisaVariant::Zeroth, PisaVariant::BlockFirst,
                                   PisaVariant::Hybrid}) {
            const auto out = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                            plan, stats, variant, cfg);
            EXPECT_LE(compare_outputs(out.output, dense).max_abs, 1e-6)
                << variant_name(variant);
        }
    }
}

TEST(PisaReference, ErrorOrderingOnClusteredData) {
    const auto in = clustered_instance(0, 512, 16, 32, 0.875);
    const auto& b = in.bundle;
    const auto dense = dense_naive(b.q_head(0), b.k_head(0), b.v_head(0),
                                   in.cfg.resolved_scale(32));
    const auto err_of = [&](PisaVariant v) {
        const auto out = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                        in.plan, in.stats, v, in.cfg);
        return compare_outputs(out.output, dense).l1_rel;
    };
    const double e_sparse = err_of(PisaVariant::SparseOnly);
    const double e_zeroth = err_of(PisaVariant::Zeroth);
    const double e_hybrid = err_of(PisaVariant::Hybrid);
    EXPECT_LT(e_hybrid, e_zeroth);
    EXPECT_LT(e_zeroth, e_sparse);
}

TEST(PisaReference, DiagnosticsContract) {
    const auto in = clustered_instance(1, 256, 16, 16, 0.75);
    const auto& b = in.bundle;
    const auto out = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, PisaVariant::Hybrid, in.cfg);
    for (std::size_t t = 0; t < b.seq_len; ++t) {
        EXPECT_GT(out.denom[t], 0.0);
        EXPECT_GT(out.ell_tail[t], 0.0);
        EXPECT_NEAR(out.tail_mass[t], 16.0 * out.ell_tail[t],
                    1e-9 * out.tail_mass[t]);
    }
    const auto sp = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                   in.stats, PisaVariant::SparseOnly, in.cfg);
    for (std::size_t t = 0; t < b.seq_len; ++t) {
        EXPECT_EQ(sp.tail_mass[t], 0.0);
        EXPECT_GT(sp.denom[t], 0.0);
    }
}

TEST(PisaStreaming, MatchesReferenceHybrid) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto in = clustered_instance(seed, 256, 16, 16, 0.75);
        in.cfg.group_size = 4;
        const auto& b = in.bundle;
        const auto ref = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                        in.plan, in.stats, PisaVariant::Hybrid, in.cfg);
        const auto stream = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0),
                                           in.plan, in.stats, in.cfg);
        worst = std::max(worst, max_rel_linf(stream.output, ref.output));
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(PisaStreaming, GroupSizeDoesNotChangeTheMath) {
    auto in = clustered_instance(3, 256, 16, 16, 0.75);
    const auto& b = in.bundle;
    auto cfg1 = in.cfg;
    cfg1.group_size = 1;
    auto cfgN = in.cfg;
    cfgN.group_size = in.stats.num_blocks;
    const auto s1 = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                   in.stats, cfg1);
    const auto sN = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                   in.stats, cfgN);
    EXPECT_LE(max_rel_linf(s1.output, sN.output), 1e-10);
}

TEST(PisaStreaming, ExtremeScoreStaysFinite) {
    // One exponent argument around 80, f32 data with f32 accumulation.
    auto b = gen_gaussian<float>(0, 1, 64, 8, 1.0);
    const float c = 8.0f;  // scale = 1/sqrt(8), score = 64 * 0.3535 ~ 22; boost rows
    for (std::size_t a = 0; a < 8; ++a) {
        b.q[0 * 8 + a] = c;
        b.k[17 * 8 + a] = c * 4.0f;  // arg ~ 8*32*8/sqrt(8) / 8 ... large
    }
    AttentionConfig cfg;
    cfg.block_size = 16;
    cfg.accum = AccumDtype::F32;
    auto stats = compute_block_stats(b.k_head(0), b.v_head(0), 16);
    compute_global_stats(stats);
    const auto q_bar = query_block_means(b.q_head(0), 16);
    const auto plan = select_topk_plain(q_bar, stats.k_bar, 2, cfg.resolved_scale(8));
    const auto stream = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), plan,
                                       stats, cfg);
    for (const float x : stream.output.data) EXPECT_TRUE(std::isfinite(x));

    AttentionConfig cfg64 = cfg;
    cfg64.accum = AccumDtype::F64;
    const auto ref = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), plan,
                                    stats, PisaVariant::Hybrid, cfg64);
    EXPECT_LE(max_rel_linf(stream.output, ref.output), 1e-4);
}

TEST(PisaStreaming, LiteralPhase3ScalesCorrectionByB) {
    auto in = clustered_instance(4, 256, 16, 16, 0.75);
    const auto& b = in.bundle;
    const auto zeroth = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                       in.plan, in.stats, PisaVariant::Zeroth, in.cfg);
    const auto def = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, in.cfg);
    auto cfg_lit = in.cfg;
    cfg_lit.literal_phase3 = true;
    const auto lit = pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, cfg_lit);
    // (default - zeroth) == B * (literal - zeroth) entrywise.
    for (std::size_t i = 0; i < def.output.data.size(); ++i) {
        const double full = def.output.data[i] - zeroth.output.data[i];
        const double scaled = 16.0 * (lit.output.data[i] - zeroth.output.data[i]);
        EXPECT_NEAR(full, scaled, 1e-9 * std::max(1.0, std::abs(full)));
    }
}

TEST(PisaMultihead, IdenticalHeadsGiveIdenticalOutputs) {
    const auto one = gen_clustered<double>(0, 1, 128, 8, 4, 2.0, 0.15);
    TensorBundle<double> two;
    two.num_heads = 2;
    two.seq_len = 128;
    two.head_dim = 8;
    for (int rep = 0; rep < 2; ++rep) {
        two.q.insert(two.q.end(), one.q.begin(), one.q.end());
        two.k.insert(two.k.end(), one.k.begin(), one.k.end());
        two.v.insert(two.v.end(), one.v.begin(), one.v.end());
    }
    AttentionConfig cfg;
    cfg.block_size = 16;
    const auto res = pisa_multihead(two, 0.5, RouterOptions{}, PisaVariant::Hybrid, cfg);
    EXPECT_EQ(res.heads[0].output.data, res.heads[1].output.data);
    EXPECT_EQ(res.plans[0], res.plans[1]);
}

TEST(PisaMultihead, ZeroSparsityEqualsDensePerHead) {
    const auto b = gen_gaussian<double>(3, 2, 128, 16, 1.0);
    AttentionConfig cfg;
    cfg.block_size = 16;
    const auto res = pisa_multihead(b, 0.0, RouterOptions{}, PisaVariant::Hybrid, cfg);
    EXPECT_EQ(res.k, 8u);
    EXPECT_DOUBLE_EQ(res.sparsity_realized, 0.0);
    for (std::size_t h = 0; h < 2; ++h) {
        const auto dense = dense_naive(b.q_head(h), b.k_head(h), b.v_head(h),
                                       cfg.resolved_scale(16));
        EXPECT_LE(compare_outputs(res.heads[h].output, dense).max_abs, 1e-10);
    }
}

TEST(PisaMultihead, BitwiseReproducibleAcrossRunsAndThreadCounts) {
    const auto b = gen_clustered<double>(5, 2, 256, 16, 8, 2.0, 0.15);
    AttentionConfig cfg1;
    cfg1.block_size = 16;
    cfg1.num_threads = 1;
    auto cfg3 = cfg1;
    cfg3.num_threads = 3;
    const auto r1 = pisa_multihead(b, 0.875, RouterOptions{}, PisaVariant::Hybrid, cfg1);
    const auto r2 = pisa_multihead(b, 0.875, RouterOptions{}, PisaVariant::Hybrid, cfg1);
    const auto r3 = pisa_multihead(b, 0.875, RouterOptions{}, PisaVariant::Hybrid, cfg3);
    for (std::size_t h = 0; h < 2; ++h) {
        EXPECT_EQ(r1.heads[h].output.data, r2.heads[h].output.data);
        EXPECT_EQ(r1.heads[h].output.data, r3.heads[h].output.data);
    }
}

TEST(PisaMultihead, CovarianceStrategyAndStreamingRun) {
    const auto b = gen_clustered<double>(6, 1, 256, 16, 8, 2.0, 0.15);
    AttentionConfig cfg;
    cfg.block_size = 16;
    RouterOptions router;
    router.strategy = RouterStrategy::CovarianceAware;
    const auto res =
        pisa_multihead(b, 0.75, router, PisaVariant::Hybrid, cfg, true);
    EXPECT_TRUE(res.heads[0].running_max_used);
    EXPECT_EQ(res.plans[0].strategy, RouterStrategy::CovarianceAware);
}

TEST(PisaReference, ConstantValueColumnObeysTheBound) {
    // A constant V column survives the zeroth-order variant untouched; the
    // hybrid correction may perturb it by at most the per-row bound.
    auto in = clustered_instance(7, 256, 16, 16, 0.75);
    auto& b = in.bundle;
    const double cval = -1.25;
    for (std::size_t r = 0; r < b.seq_len; ++r) b.v[r * 16 + 5] = cval;
    in.stats = compute_block_stats(b.k_head(0), b.v_head(0), 16);
    compute_global_stats(in.stats);

    const auto zer = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, PisaVariant::Zeroth, in.cfg);
    for (std::size_t t = 0; t < b.seq_len; ++t) {
        EXPECT_NEAR(zer.output(t, 5), cval, 1e-6);
    }

    const auto hyb = pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, PisaVariant::Hybrid, in.cfg);
    const auto rep = theorem1_check(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                    in.stats, in.cfg);
    for (std::size_t t = 0; t < b.seq_len; ++t) {
        EXPECT_LE(std::abs(hyb.output(t, 5) - cval), rep.rows[t].bound + 1e-9);
    }
}

TEST(PisaReference, OverflowingAccumulatorIsReported) {
    auto b = gen_gaussian<float>(0, 1, 32, 8, 1.0);
    for (auto& x : b.v) x = 3.0e38f;
    AttentionConfig cfg;
    cfg.block_size = 16;
    cfg.accum = AccumDtype::F32;
    auto stats = compute_block_stats(b.k_head(0), b.v_head(0), 16);
    compute_global_stats(stats);
    const auto q_bar = query_block_means(b.q_head(0), 16);
    const auto plan = select_topk_plain(q_bar, stats.k_bar, 1, cfg.resolved_scale(8));
    EXPECT_THROW(pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0), plan, stats, cfg),
                 NumericalOverflow);
}

TEST(PisaReference, MismatchedPlanOrStatsRejected) {
    const auto in = clustered_instance(8, 128, 16, 8, 0.5);
    const auto& b = in.bundle;
    AttentionConfig wrong = in.cfg;
    wrong.block_size = 32;
    EXPECT_THROW(pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), in.plan,
                                in.stats, PisaVariant::Hybrid, wrong),
                 InvalidDimension);
    SelectionPlan empty = in.plan;
    empty.selected[2].clear();
    EXPECT_THROW(pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0), empty,
                                in.stats, PisaVariant::Hybrid, in.cfg),
                 Error);
}
