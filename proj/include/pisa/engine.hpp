#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "pisa/attention.hpp"
#include "pisa/block_stats.hpp"
#include "pisa/bundle.hpp"
#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"
#include "pisa/parallel.hpp"
#include "pisa/router.hpp"

namespace pisa {

// SparseOnly      drop unselected blocks (keep-or-drop baseline).
// Zeroth          exact term + block-wise zeroth-order tail.
// BlockFirst      adds the exact per-block first-order term (error-bound
//                 reference).
// Hybrid          zeroth-order tail + one global first-order correction.
// GlobalCentroid  diagnostic: slope from the global key centroid instead of
//                 the mean of the centroid exponentials. Jensen says this
//                 underestimates the slope; this variant makes that claim
//                 executable.
enum class PisaVariant { SparseOnly, Zeroth, BlockFirst, Hybrid, GlobalCentroid };

inline const char* variant_name(PisaVariant v) {
    switch (v) {
        case PisaVariant::SparseOnly: return "sparse_only";
        case PisaVariant::Zeroth: return "zeroth";
        case PisaVariant::BlockFirst: return "block_first";
        case PisaVariant::Hybrid: return "hybrid";
        case PisaVariant::GlobalCentroid: return "global_centroid";
    }
    return "?";
}

template <class T>
struct PisaOutput {
    Matrix<T> output;                // O, [L][d]
    std::vector<double> denom;       // D_t
    std::vector<double> tail_mass;   // sum_{j in U_i} B * alpha_{t,j}
    std::vector<double> ell_tail;    // sum_{j in U_i} alpha_{t,j}
    std::vector<double> row_max;     // exponent shift actually used per row
    bool running_max_used = false;

    // Filled by the streaming path when cfg.collect_phase_times is set.
    // Phase 3 (first-order injection + normalization) reports as normalize_ms.
    double exact_ms = 0.0;
    double approx_ms = 0.0;
    double normalize_ms = 0.0;
};

namespace detail {

inline void check_engine_inputs(std::size_t q_rows, std::size_t q_cols,
                                std::size_t k_rows, std::size_t k_cols,
                                std::size_t v_rows, std::size_t v_cols,
                                const SelectionPlan& plan,
                                const BlockStatistics& stats,
                                const AttentionConfig& cfg) {
    check_shapes(q_rows, q_cols, k_rows, k_cols, v_rows, v_cols);
    cfg.check(q_rows);
    cfg.check(k_rows);
    const std::size_t b = cfg.block_size;
    if (stats.block_size != b || stats.num_blocks != k_rows / b ||
        stats.dim != k_cols) {
        throw InvalidDimension("block statistics do not match inputs");
    }
    if (plan.num_query_blocks() != q_rows / b ||
        plan.num_key_blocks != stats.num_blocks) {
        throw InvalidDimension("selection plan does not match inputs");
    }
    plan.validate();
}

template <class T>
inline void check_output_finite(const Matrix<T>& o) {
    for (std::size_t t = 0; t < o.rows; ++t) {
        const T* row = o.row(t);
        for (std::size_t c = 0; c < o.cols; ++c) {
            if (!std::isfinite(double(row[c]))) {
                throw NumericalOverflow("non-finite output at row " +
                                        std::to_string(t));
            }
        }
    }
}

}  // namespace detail

// Reference path: two-pass per row with one global max over every exponent
// argument (exact scores and centroid scores), all accumulation in 64-bit
// reals. Implements the piecewise softmax
//   D_t = sum_{j in S_i} sum_n exp(s q k) + sum_{j in U_i} B exp(s q kbar_j)
// with the numerator tail chosen by the variant. The Taylor slope carries the
// score scale: d/dk exp(s q k^T) = s exp(.) q.
template <class T>
PisaOutput<T> pisa_reference(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                             const SelectionPlan& plan,
                             const BlockStatistics& stats, PisaVariant variant,
                             const AttentionConfig& cfg) {
    detail::check_engine_inputs(q.rows, q.cols, k.rows, k.cols, v.rows, v.cols,
                                plan, stats, cfg);
    const std::size_t b = cfg.block_size;
    const std::size_t d = q.cols, dv = v.cols;
    const std::size_t nq = q.rows / b;
    const double scale = cfg.resolved_scale(d);
    const bool sparse_only = variant == PisaVariant::SparseOnly;
    const bool needs_hbar = variant == PisaVariant::Hybrid ||
                            variant == PisaVariant::GlobalCentroid;
    if (needs_hbar && !stats.global_ready) {
        throw InvalidDimension("global statistics required for this variant");
    }

    PisaOutput<T> out;
    out.output = Matrix<T>(q.rows, dv);
    out.denom.assign(q.rows, 0.0);
    out.tail_mass.assign(q.rows, 0.0);
    out.ell_tail.assign(q.rows, 0.0);
    out.row_max.assign(q.rows, 0.0);

    parallel_for(0, nq, cfg.num_threads, [&](std::size_t i) {
        const auto& sel = plan.selected[i];
        const auto uns = plan.unselected(i);
        std::vector<double> exact_scores(sel.size() * b);
        std::vector<double> cent_scores(uns.size());
        std::vector<double> num(dv);
        std::vector<double> qh(dv);

        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t t = i * b + r;
            const T* qrow = q.row(t);

            double emax = -std::numeric_limits<double>::infinity();
            std::size_t idx = 0;
            for (const std::size_t j : sel) {
                for (std::size_t nn = 0; nn < b; ++nn) {
                    const double s = scale * dot_d(qrow, k.row(j * b + nn), d);
                    exact_scores[idx++] = s;
                    emax = std::max(emax, s);
                }
            }
            double cmax = -std::numeric_limits<double>::infinity();
            for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                const double s =
                    scale * dot_d(qrow, stats.k_bar.row(uns[ui]), d);
                cent_scores[ui] = s;
                cmax = std::max(cmax, s);
            }
            double gc_arg = 0.0;
            double m = sparse_only ? emax : std::max(emax, cmax);
            if (variant == PisaVariant::GlobalCentroid) {
                gc_arg = scale * dot_d(qrow, stats.k_bar_global.data(), d);
                m = std::max(m, gc_arg);
            }

            std::fill(num.begin(), num.end(), 0.0);
            double denom = 0.0;
            idx = 0;
            for (const std::size_t j : sel) {
                for (std::size_t nn = 0; nn < b; ++nn) {
                    const double p = std::exp(exact_scores[idx++] - m);
                    denom += p;
                    const T* vrow = v.row(j * b + nn);
                    for (std::size_t c = 0; c < dv; ++c) num[c] += p * double(vrow[c]);
                }
            }

            double alpha_sum = 0.0;
            if (!sparse_only) {
                for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                    const std::size_t u = uns[ui];
                    const double a = std::exp(cent_scores[ui] - m);
                    alpha_sum += a;
                    denom += double(b) * a;
                    const double* vh = stats.v_hat.row(u);
                    for (std::size_t c = 0; c < dv; ++c) num[c] += a * vh[c];
                    if (variant == PisaVariant::BlockFirst) {
                        const double* hj = stats.h_block(u);
                        for (std::size_t aa = 0; aa < d; ++aa) {
                            const double w = a * scale * double(qrow[aa]);
                            if (w == 0.0) continue;
                            const double* hrow = hj + aa * d;
                            for (std::size_t c = 0; c < dv; ++c) num[c] += w * hrow[c];
                        }
                    }
                }
                if (needs_hbar && !uns.empty()) {
                    for (std::size_t c = 0; c < dv; ++c) {
                        double s = 0.0;
                        for (std::size_t aa = 0; aa < d; ++aa) {
                            s += double(qrow[aa]) * stats.h_bar(aa, c);
                        }
                        qh[c] = s;
                    }
                    const double slope =
                        variant == PisaVariant::Hybrid
                            ? alpha_sum
                            : double(uns.size()) * std::exp(gc_arg - m);
                    for (std::size_t c = 0; c < dv; ++c) {
                        num[c] += slope * scale * qh[c];
                    }
                }
            }

            T* orow = out.output.row(t);
            for (std::size_t c = 0; c < dv; ++c) orow[c] = T(num[c] / denom);
            const double lift = std::exp(m);
            out.denom[t] = denom * lift;
            out.tail_mass[t] = double(b) * alpha_sum * lift;
            out.ell_tail[t] = alpha_sum * lift;
            out.row_max[t] = m;
        }
    });
    detail::check_output_finite(out.output);
    return out;
}

namespace detail {

// Phased streaming path (implicitly Hybrid). Phase 1 visits the selected
// blocks exactly; Phase 2 scans centroid/value-sum rows in groups of C with
// the selected columns masked, maintaining the running max across both phases
// and keeping ell_tail in the same shifted domain; Phase 3 injects the global
// first-order correction and normalizes.
template <class T, class A>
PisaOutput<T> pisa_streaming_impl(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                                  const SelectionPlan& plan,
                                  const BlockStatistics& stats,
                                  const AttentionConfig& cfg) {
    check_engine_inputs(q.rows, q.cols, k.rows, k.cols, v.rows, v.cols, plan,
                        stats, cfg);
    if (!stats.global_ready) {
        throw InvalidDimension("global statistics required for the streaming path");
    }
    const std::size_t b = cfg.block_size;
    const std::size_t cgrp = cfg.group_size;
    const std::size_t d = q.cols, dv = v.cols;
    const std::size_t n = stats.num_blocks;
    const std::size_t nq = q.rows / b;
    const double scale = cfg.resolved_scale(d);

    PisaOutput<T> out;
    out.output = Matrix<T>(q.rows, dv);
    out.denom.assign(q.rows, 0.0);
    out.tail_mass.assign(q.rows, 0.0);
    out.ell_tail.assign(q.rows, 0.0);
    out.row_max.assign(q.rows, 0.0);
    out.running_max_used = true;

    std::vector<double> t_exact, t_approx, t_norm;
    if (cfg.collect_phase_times) {
        t_exact.assign(nq, 0.0);
        t_approx.assign(nq, 0.0);
        t_norm.assign(nq, 0.0);
    }
    using clock = std::chrono::steady_clock;
    const auto tick = [&] { return cfg.collect_phase_times ? clock::now() : clock::time_point{}; };
    const auto record = [&](std::vector<double>& dst, std::size_t i,
                            clock::time_point t0) {
        if (cfg.collect_phase_times) {
            dst[i] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        }
    };

    parallel_for(0, nq, cfg.num_threads, [&](std::size_t i) {
        const auto& sel = plan.selected[i];
        std::vector<char> is_sel(n, 0);
        for (const std::size_t j : sel) is_sel[j] = 1;

        std::vector<double> m(b, -std::numeric_limits<double>::infinity());
        std::vector<A> ell(b, A(0)), ell_tail(b, A(0));
        std::vector<A> acc(b * dv, A(0));
        std::vector<double> score_buf(std::max(b, cgrp));
        std::vector<double> qh(dv);

        // Phase 1: exact attention over the selected blocks.
        auto phase_t0 = tick();
        for (const std::size_t j : sel) {
            for (std::size_t r = 0; r < b; ++r) {
                attend_block_row<T, A>(q.row(i * b + r), k, v, j * b, (j + 1) * b,
                                       scale, m[r], ell[r], acc.data() + r * dv,
                                       score_buf.data());
            }
        }

        record(t_exact, i, phase_t0);

        // Phase 2: grouped centroid scan with column masking.
        phase_t0 = tick();
        for (std::size_t g0 = 0; g0 < n; g0 += cgrp) {
            const std::size_t g1 = std::min(n, g0 + cgrp);
            for (std::size_t r = 0; r < b; ++r) {
                const T* qrow = q.row(i * b + r);
                double gmax = -std::numeric_limits<double>::infinity();
                bool any = false;
                for (std::size_t j = g0; j < g1; ++j) {
                    if (is_sel[j]) continue;
                    const double s = scale * dot_d(qrow, stats.k_bar.row(j), d);
                    score_buf[j - g0] = s;
                    gmax = std::max(gmax, s);
                    any = true;
                }
                if (!any) continue;
                const double m_new = std::max(m[r], gmax);
                A* arow = acc.data() + r * dv;
                if (m_new > m[r]) {
                    const A f = A(std::exp(m[r] - m_new));
                    ell[r] *= f;
                    ell_tail[r] *= f;
                    for (std::size_t c = 0; c < dv; ++c) arow[c] *= f;
                    m[r] = m_new;
                }
                for (std::size_t j = g0; j < g1; ++j) {
                    if (is_sel[j]) continue;
                    const A p = A(std::exp(score_buf[j - g0] - m[r]));
                    ell[r] += A(double(b)) * p;
                    ell_tail[r] += p;
                    const double* vh = stats.v_hat.row(j);
                    for (std::size_t c = 0; c < dv; ++c) arow[c] += p * A(vh[c]);
                }
            }
        }

        record(t_approx, i, phase_t0);

        // Phase 3: global first-order injection, then normalize.
        phase_t0 = tick();
        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t t = i * b + r;
            const T* qrow = q.row(t);
            for (std::size_t c = 0; c < dv; ++c) {
                double s = 0.0;
                for (std::size_t aa = 0; aa < d; ++aa) {
                    s += double(qrow[aa]) * stats.h_bar(aa, c);
                }
                qh[c] = s;
            }
            double corr_w = scale * double(ell_tail[r]);
            if (cfg.literal_phase3) corr_w /= double(b);
            const A* arow = acc.data() + r * dv;
            T* orow = out.output.row(t);
            const double ell_r = double(ell[r]);
            for (std::size_t c = 0; c < dv; ++c) {
                orow[c] = T((double(arow[c]) + corr_w * qh[c]) / ell_r);
            }
            const double lift = std::exp(m[r]);
            out.denom[t] = ell_r * lift;
            out.tail_mass[t] = double(b) * double(ell_tail[r]) * lift;
            out.ell_tail[t] = double(ell_tail[r]) * lift;
            out.row_max[t] = m[r];
        }
        record(t_norm, i, phase_t0);
    });
    if (cfg.collect_phase_times) {
        for (std::size_t i = 0; i < nq; ++i) {
            out.exact_ms += t_exact[i];
            out.approx_ms += t_approx[i];
            out.normalize_ms += t_norm[i];
        }
    }
    check_output_finite(out.output);
    return out;
}

}  // namespace detail

template <class T>
PisaOutput<T> pisa_streaming(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                             const SelectionPlan& plan,
                             const BlockStatistics& stats,
                             const AttentionConfig& cfg) {
    if (cfg.accum == AccumDtype::F32) {
        return detail::pisa_streaming_impl<T, float>(q, k, v, plan, stats, cfg);
    }
    return detail::pisa_streaming_impl<T, double>(q, k, v, plan, stats, cfg);
}

struct RouterOptions {
    RouterStrategy strategy = RouterStrategy::Plain;
    double epsilon = 1e-6;
    bool force_diagonal = false;
    bool row_level = false;  // row-max pooled scores instead of block means
};

template <class T>
struct MultiheadResult {
    std::vector<PisaOutput<T>> heads;
    std::vector<SelectionPlan> plans;
    std::size_t k = 0;
    std::size_t num_blocks = 0;
    double sparsity_requested = 0.0;
    double sparsity_realized = 0.0;
    double prepare_ms = 0.0;
    double select_ms = 0.0;
    double attention_ms = 0.0;
};

// Per head: prepare-phase statistics, routing, then the requested engine path.
// Heads route independently. When use_streaming is set and the variant is
// Hybrid, the phased streaming path runs instead of the reference path.
template <class T>
MultiheadResult<T> pisa_multihead(const TensorBundle<T>& bundle, double r,
                                  const RouterOptions& router, PisaVariant variant,
                                  const AttentionConfig& cfg,
                                  bool use_streaming = false) {
    using clock = std::chrono::steady_clock;
    const auto ms_since = [](clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };

    cfg.check(bundle.seq_len);
    const std::size_t n = bundle.seq_len / cfg.block_size;
    const auto res = sparsity_to_k(r, n);
    const double scale = cfg.resolved_scale(bundle.head_dim);

    MultiheadResult<T> out;
    out.k = res.k;
    out.num_blocks = n;
    out.sparsity_requested = r;
    out.sparsity_realized = res.realized;
    out.heads.reserve(bundle.num_heads);
    out.plans.reserve(bundle.num_heads);

    const bool needs_norms = router.strategy == RouterStrategy::CovarianceAware;
    for (std::size_t h = 0; h < bundle.num_heads; ++h) {
        const auto kview = bundle.k_head(h);
        const auto vview = bundle.v_head(h);
        const auto qview = bundle.q_head(h);

        auto t0 = clock::now();
        BlockStatistics stats = compute_block_stats(kview, vview, cfg.block_size);
        compute_global_stats(stats, SpectralMethod::Exact, needs_norms);
        Matrix<double> q_bar = query_block_means(qview, cfg.block_size);
        out.prepare_ms += ms_since(t0);

        t0 = clock::now();
        SelectionPlan plan;
        if (router.row_level) {
            plan = select_topk_rowmax<T>(
                qview, stats.k_bar, cfg.block_size, res.k, scale,
                needs_norms ? &stats.m : nullptr, router.epsilon);
        } else if (needs_norms) {
            plan = select_topk_covariance(q_bar, stats.k_bar, stats.m,
                                          router.epsilon, res.k, scale,
                                          router.force_diagonal);
        } else {
            plan = select_topk_plain(q_bar, stats.k_bar, res.k, scale,
                                     router.force_diagonal);
        }
        out.select_ms += ms_since(t0);

        t0 = clock::now();
        if (use_streaming && variant == PisaVariant::Hybrid) {
            out.heads.push_back(pisa_streaming(qview, kview, vview, plan, stats, cfg));
        } else {
            out.heads.push_back(
                pisa_reference(qview, kview, vview, plan, stats, variant, cfg));
        }
        out.attention_ms += ms_since(t0);
        out.plans.push_back(std::move(plan));
    }
    return out;
}

}  // namespace pisa
