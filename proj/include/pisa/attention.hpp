#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"
#include "pisa/parallel.hpp"
#include "pisa/router.hpp"

namespace pisa {

enum class AccumDtype { F32, F64 };

struct AttentionConfig {
    std::size_t block_size = 64;   // B
    std::size_t group_size = 8;    // C, centroid-scan group width
    double scale = 0.0;            // 0 means 1/sqrt(d)
    AccumDtype accum = AccumDtype::F64;
    bool deterministic = true;     // fixed-order per-row accumulation
    unsigned num_threads = 0;      // 0: PISA_THREADS env or hardware

    // Literal streaming Phase-3 scaling (divides the global correction by B);
    // kept as a diagnostic only, the derived formulation is the default.
    bool literal_phase3 = false;

    // Collect per-phase wall times in the streaming path (bench support).
    bool collect_phase_times = false;

    double resolved_scale(std::size_t d) const {
        if (scale > 0.0) return scale;
        return 1.0 / std::sqrt(double(d));
    }

    void check(std::size_t L) const {
        if (block_size == 0 || group_size == 0) {
            throw InvalidDimension("block_size and group_size must be >= 1");
        }
        if (L % block_size != 0) {
            throw BlockDivisibility("seq_len " + std::to_string(L) +
                                    " not divisible by block size " +
                                    std::to_string(block_size));
        }
    }
};

namespace detail {

inline void check_shapes(std::size_t qr, std::size_t qc, std::size_t kr,
                         std::size_t kc, std::size_t vr, std::size_t vc) {
    if (qc != kc || kr != vr || qc == 0 || qr == 0 || kr == 0 || vc == 0) {
        throw InvalidDimension("Q [" + std::to_string(qr) + "x" + std::to_string(qc) +
                               "], K [" + std::to_string(kr) + "x" + std::to_string(kc) +
                               "], V [" + std::to_string(vr) + "x" + std::to_string(vc) +
                               "] do not form an attention instance");
    }
}

// One key/value block folded into the running-max softmax state of a single
// query row. Accumulation order inside the block is fixed (row-major), so
// results do not depend on the thread partition.
template <class T, class A>
inline void attend_block_row(const T* qrow, ConstView<T> k, ConstView<T> v,
                             std::size_t k0, std::size_t k1, double scale,
                             double& m, A& ell, A* acc, double* score_buf) {
    const std::size_t d = k.cols;
    const std::size_t dv = v.cols;
    double block_max = -std::numeric_limits<double>::infinity();
    for (std::size_t r = k0; r < k1; ++r) {
        const double s = scale * dot_d(qrow, k.row(r), d);
        score_buf[r - k0] = s;
        block_max = std::max(block_max, s);
    }
    const double m_new = std::max(m, block_max);
    if (m_new > m && m != -std::numeric_limits<double>::infinity()) {
        const A f = A(std::exp(m - m_new));
        ell *= f;
        for (std::size_t c = 0; c < dv; ++c) acc[c] *= f;
    }
    m = m_new;
    for (std::size_t r = k0; r < k1; ++r) {
        const A p = A(std::exp(score_buf[r - k0] - m));
        ell += p;
        const T* vrow = v.row(r);
        for (std::size_t c = 0; c < dv; ++c) acc[c] += p * A(vrow[c]);
    }
}

template <class T, class A>
Matrix<T> dense_online_impl(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                            const AttentionConfig& cfg) {
    check_shapes(q.rows, q.cols, k.rows, k.cols, v.rows, v.cols);
    cfg.check(k.rows);
    const std::size_t L = q.rows, d = q.cols, dv = v.cols;
    const std::size_t b = cfg.block_size;
    const double scale = cfg.resolved_scale(d);
    Matrix<T> out(L, dv);
    parallel_for(0, L, cfg.num_threads, [&](std::size_t t) {
        std::vector<A> acc(dv, A(0));
        std::vector<double> score_buf(b);
        double m = -std::numeric_limits<double>::infinity();
        A ell = A(0);
        for (std::size_t j0 = 0; j0 < k.rows; j0 += b) {
            attend_block_row<T, A>(q.row(t), k, v, j0, j0 + b, scale, m, ell,
                                   acc.data(), score_buf.data());
        }
        T* o = out.row(t);
        for (std::size_t c = 0; c < dv; ++c) o[c] = T(acc[c] / ell);
    });
    return out;
}

template <class T, class A>
Matrix<T> sparse_masked_impl(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                             const SelectionPlan& plan, const AttentionConfig& cfg) {
    check_shapes(q.rows, q.cols, k.rows, k.cols, v.rows, v.cols);
    cfg.check(k.rows);
    cfg.check(q.rows);
    const std::size_t b = cfg.block_size;
    const std::size_t nq = q.rows / b;
    const std::size_t n = k.rows / b;
    if (plan.num_query_blocks() != nq || plan.num_key_blocks != n) {
        throw InvalidDimension("plan shape does not match inputs");
    }
    plan.validate();
    const std::size_t d = q.cols, dv = v.cols;
    const double scale = cfg.resolved_scale(d);
    Matrix<T> out(q.rows, dv);
    parallel_for(0, nq, cfg.num_threads, [&](std::size_t i) {
        std::vector<A> acc(dv);
        std::vector<double> score_buf(b);
        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t t = i * b + r;
            std::fill(acc.begin(), acc.end(), A(0));
            double m = -std::numeric_limits<double>::infinity();
            A ell = A(0);
            for (const std::size_t j : plan.selected[i]) {
                attend_block_row<T, A>(q.row(t), k, v, j * b, (j + 1) * b, scale,
                                       m, ell, acc.data(), score_buf.data());
            }
            T* o = out.row(t);
            for (std::size_t c = 0; c < dv; ++c) o[c] = T(acc[c] / ell);
        }
    });
    return out;
}

}  // namespace detail

// Reference attention: materializes one score row at a time, subtracts the row
// max, accumulates in 64-bit reals. The ground truth every approximation in
// this library is measured against.
template <class T>
Matrix<T> dense_naive(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                      double scale, unsigned num_threads = 0) {
    detail::check_shapes(q.rows, q.cols, k.rows, k.cols, v.rows, v.cols);
    const std::size_t L = q.rows, d = q.cols, dv = v.cols;
    Matrix<T> out(L, dv);
    parallel_for(0, L, num_threads, [&](std::size_t t) {
        std::vector<double> scores(k.rows);
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < k.rows; ++s) {
            scores[s] = scale * dot_d(q.row(t), k.row(s), d);
            m = std::max(m, scores[s]);
        }
        double ell = 0.0;
        std::vector<double> acc(dv, 0.0);
        for (std::size_t s = 0; s < k.rows; ++s) {
            const double p = std::exp(scores[s] - m);
            ell += p;
            const T* vrow = v.row(s);
            for (std::size_t c = 0; c < dv; ++c) acc[c] += p * double(vrow[c]);
        }
        T* o = out.row(t);
        for (std::size_t c = 0; c < dv; ++c) o[c] = T(acc[c] / ell);
    });
    return out;
}

// Block-streaming attention with running max and running denominator,
// mathematically identical to dense_naive.
template <class T>
Matrix<T> dense_online(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                       const AttentionConfig& cfg) {
    if (cfg.accum == AccumDtype::F32) {
        return detail::dense_online_impl<T, float>(q, k, v, cfg);
    }
    return detail::dense_online_impl<T, double>(q, k, v, cfg);
}

// Masked block-sparse attention: softmax support restricted to the blocks in
// S_i, everything else dropped. The keep-or-drop baseline.
template <class T>
Matrix<T> sparse_masked(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                        const SelectionPlan& plan, const AttentionConfig& cfg) {
    if (cfg.accum == AccumDtype::F32) {
        return detail::sparse_masked_impl<T, float>(q, k, v, plan, cfg);
    }
    return detail::sparse_masked_impl<T, double>(q, k, v, plan, cfg);
}

}  // namespace pisa
