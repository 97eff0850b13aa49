#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "pisa/attention.hpp"
#include "pisa/block_stats.hpp"
#include "pisa/engine.hpp"
#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"
#include "pisa/router.hpp"

namespace pisa {

struct ErrorReport {
    double l1_rel = 0.0;   // sum |approx - ref| / sum |ref|
    double l2_rel = 0.0;
    double max_abs = 0.0;
    std::vector<double> per_row_l2;
};

template <class T>
ErrorReport compare_outputs(const Matrix<T>& approx, const Matrix<T>& ref) {
    if (approx.rows != ref.rows || approx.cols != ref.cols) {
        throw InvalidDimension("output shapes differ: " + std::to_string(approx.rows) +
                               "x" + std::to_string(approx.cols) + " vs " +
                               std::to_string(ref.rows) + "x" + std::to_string(ref.cols));
    }
    ErrorReport rep;
    rep.per_row_l2.assign(ref.rows, 0.0);
    double num1 = 0.0, den1 = 0.0, num2 = 0.0, den2 = 0.0;
    for (std::size_t t = 0; t < ref.rows; ++t) {
        double row_sq = 0.0;
        for (std::size_t c = 0; c < ref.cols; ++c) {
            const double a = double(approx(t, c));
            const double b = double(ref(t, c));
            const double diff = a - b;
            num1 += std::abs(diff);
            den1 += std::abs(b);
            num2 += diff * diff;
            den2 += b * b;
            row_sq += diff * diff;
            rep.max_abs = std::max(rep.max_abs, std::abs(diff));
        }
        rep.per_row_l2[t] = std::sqrt(row_sq);
    }
    rep.l1_rel = den1 > 0.0 ? num1 / den1
                            : (num1 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    rep.l2_rel = den2 > 0.0 ? std::sqrt(num2) / std::sqrt(den2)
                            : (num2 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    return rep;
}

struct BoundRow {
    double actual_err = 0.0;  // ||o_hybrid - o_blockfirst||_2
    double bound = 0.0;       // C_q * M_max * rho / B
    double rho = 0.0;         // tau / D
    double alpha_sum = 0.0;   // sum_{j in U_i} alpha_{t,j}
    double jensen_rhs = 0.0;  // tau / B
};

struct BoundReport {
    std::vector<BoundRow> rows;
    double c_q = 0.0;    // scale * max_t ||q_t||_2
    double m_max = 0.0;
    std::size_t block_size = 0;
    std::size_t violations = 0;         // actual > bound + 1e-9
    std::size_t jensen_violations = 0;  // alpha_sum > tau/B within 1e-9 rel
    double max_slack_ratio = 0.0;       // max actual/bound over rows with bound > 0
};

inline constexpr double kBoundAbsSlack = 1e-9;
inline constexpr double kJensenRelSlack = 1e-9;

// Certifies the error bound of the global first-order replacement: computes
// o_t with the exact block-wise first-order tail and o~_t with the global
// correction, both over the identical piecewise denominator, and checks
//   ||o~_t - o_t||_2 <= C_q * M_max * rho_t / B
// per row, where rho_t = tau_t / D_t and C_q absorbs the score scale.
// Violations are reported, not thrown.
template <class T>
BoundReport theorem1_check(ConstView<T> q, ConstView<T> k, ConstView<T> v,
                           const SelectionPlan& plan, const BlockStatistics& stats,
                           const AttentionConfig& cfg) {
    if (!stats.global_ready || stats.m.size() != stats.num_blocks) {
        throw InvalidDimension("theorem1_check needs global statistics with norms");
    }
    const auto exact_first = pisa_reference(q, k, v, plan, stats,
                                            PisaVariant::BlockFirst, cfg);
    const auto hybrid = pisa_reference(q, k, v, plan, stats, PisaVariant::Hybrid, cfg);

    const std::size_t b = cfg.block_size;
    const std::size_t d = q.cols;
    const double scale = cfg.resolved_scale(d);

    BoundReport rep;
    rep.block_size = b;
    rep.m_max = stats.m_max;
    double max_q = 0.0;
    for (std::size_t t = 0; t < q.rows; ++t) {
        max_q = std::max(max_q, std::sqrt(dot_d(q.row(t), q.row(t), d)));
    }
    rep.c_q = scale * max_q;
    rep.rows.assign(q.rows, BoundRow{});

    const std::size_t nq = q.rows / b;
    parallel_for(0, nq, cfg.num_threads, [&](std::size_t i) {
        const auto& sel = plan.selected[i];
        const auto uns = plan.unselected(i);
        std::vector<char> in_sel(stats.num_blocks, 0);
        for (const std::size_t j : sel) in_sel[j] = 1;
        std::vector<double> scores(k.rows);
        std::vector<double> cent(uns.size());

        for (std::size_t r = 0; r < b; ++r) {
            const std::size_t t = i * b + r;
            const T* qrow = q.row(t);
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < k.rows; ++s) {
                scores[s] = scale * dot_d(qrow, k.row(s), d);
                m = std::max(m, scores[s]);
            }
            for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                cent[ui] = scale * dot_d(qrow, stats.k_bar.row(uns[ui]), d);
                m = std::max(m, cent[ui]);
            }
            double tau = 0.0, exact_sel = 0.0, alpha = 0.0;
            for (std::size_t j = 0; j < stats.num_blocks; ++j) {
                double blk = 0.0;
                for (std::size_t nn = 0; nn < b; ++nn) {
                    blk += std::exp(scores[j * b + nn] - m);
                }
                if (in_sel[j]) {
                    exact_sel += blk;
                } else {
                    tau += blk;
                }
            }
            for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                alpha += std::exp(cent[ui] - m);
            }
            const double denom = exact_sel + double(b) * alpha;
            const double rho = denom > 0.0 ? tau / denom : 0.0;

            double diff_sq = 0.0;
            for (std::size_t c = 0; c < hybrid.output.cols; ++c) {
                const double diff = double(hybrid.output(t, c)) -
                                    double(exact_first.output(t, c));
                diff_sq += diff * diff;
            }
            BoundRow& row = rep.rows[t];
            row.actual_err = std::sqrt(diff_sq);
            row.rho = rho;
            row.bound = rep.c_q * rep.m_max * rho / double(b);
            const double lift = std::exp(m);
            row.alpha_sum = alpha * lift;
            row.jensen_rhs = tau * lift / double(b);
        }
    });

    for (const BoundRow& row : rep.rows) {
        if (row.actual_err > row.bound + kBoundAbsSlack) ++rep.violations;
        if (row.alpha_sum > row.jensen_rhs * (1.0 + kJensenRelSlack)) {
            ++rep.jensen_violations;
        }
        if (row.bound > 0.0) {
            rep.max_slack_ratio = std::max(rep.max_slack_ratio,
                                           row.actual_err / row.bound);
        }
    }
    return rep;
}

// Block-wise Jensen inequality: for every row t and unselected block j,
//   exp(s q_t kbar_j) <= (1/B) sum_n exp(s q_t k_{j,n}),
// with 1e-9 relative tolerance. Returns the violation count (0 when correct).
template <class T>
std::size_t jensen_check(ConstView<T> q, ConstView<T> k, const SelectionPlan& plan,
                         std::size_t b, double scale) {
    if (k.rows % b != 0) {
        throw BlockDivisibility("seq_len not divisible by block size");
    }
    const std::size_t n = k.rows / b;
    const std::size_t d = q.cols;
    Matrix<double> kbar(n, d);
    for (std::size_t j = 0; j < n; ++j) {
        double* row = kbar.row(j);
        for (std::size_t nn = 0; nn < b; ++nn) {
            const T* krow = k.row(j * b + nn);
            for (std::size_t a = 0; a < d; ++a) row[a] += double(krow[a]);
        }
        for (std::size_t a = 0; a < d; ++a) row[a] /= double(b);
    }

    std::size_t violations = 0;
    std::vector<double> s(b);
    for (std::size_t i = 0; i < plan.num_query_blocks(); ++i) {
        const auto uns = plan.unselected(i);
        for (std::size_t r = 0; r < b && i * b + r < q.rows; ++r) {
            const T* qrow = q.row(i * b + r);
            for (const std::size_t j : uns) {
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t nn = 0; nn < b; ++nn) {
                    s[nn] = scale * dot_d(qrow, k.row(j * b + nn), d);
                    m = std::max(m, s[nn]);
                }
                const double lhs_arg = scale * dot_d(qrow, kbar.row(j), d);
                m = std::max(m, lhs_arg);
                double rhs = 0.0;
                for (std::size_t nn = 0; nn < b; ++nn) rhs += std::exp(s[nn] - m);
                rhs /= double(b);
                const double lhs = std::exp(lhs_arg - m);
                if (lhs > rhs * (1.0 + kJensenRelSlack)) ++violations;
            }
        }
    }
    return violations;
}

// Max relative change of the piecewise denominator when the analytically-zero
// first-order denominator term is injected:
//   sum_{j in U_i} exp(s q kbar_j) * s * q . (sum_n (k_{j,n} - kbar_j)).
template <class T>
double denominator_cancellation_max_rel(ConstView<T> q, ConstView<T> k,
                                        const SelectionPlan& plan,
                                        const BlockStatistics& stats,
                                        const AttentionConfig& cfg) {
    detail::check_shapes(q.rows, q.cols, k.rows, k.cols, k.rows, k.cols);
    cfg.check(q.rows);
    cfg.check(k.rows);
    const std::size_t b = cfg.block_size;
    const std::size_t d = q.cols;
    const double scale = cfg.resolved_scale(d);

    // Per-block centering residuals sum_n k_{j,n} - B * kbar_j.
    Matrix<double> resid(stats.num_blocks, d);
    for (std::size_t j = 0; j < stats.num_blocks; ++j) {
        double* rr = resid.row(j);
        for (std::size_t nn = 0; nn < b; ++nn) {
            const T* krow = k.row(j * b + nn);
            for (std::size_t a = 0; a < d; ++a) rr[a] += double(krow[a]);
        }
        const double* kb = stats.k_bar.row(j);
        for (std::size_t a = 0; a < d; ++a) rr[a] -= double(b) * kb[a];
    }

    double worst = 0.0;
    for (std::size_t i = 0; i < plan.num_query_blocks(); ++i) {
        const auto& sel = plan.selected[i];
        const auto uns = plan.unselected(i);
        std::vector<double> cent(uns.size());
        for (std::size_t r = 0; r < b; ++r) {
            const T* qrow = q.row(i * b + r);
            double m = -std::numeric_limits<double>::infinity();
            std::vector<double> ex(sel.size() * b);
            std::size_t idx = 0;
            for (const std::size_t j : sel) {
                for (std::size_t nn = 0; nn < b; ++nn) {
                    ex[idx] = scale * dot_d(qrow, k.row(j * b + nn), d);
                    m = std::max(m, ex[idx]);
                    ++idx;
                }
            }
            for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                cent[ui] = scale * dot_d(qrow, stats.k_bar.row(uns[ui]), d);
                m = std::max(m, cent[ui]);
            }
            double denom = 0.0, injected = 0.0;
            for (const double s : ex) denom += std::exp(s - m);
            for (std::size_t ui = 0; ui < uns.size(); ++ui) {
                const double a = std::exp(cent[ui] - m);
                denom += double(b) * a;
                injected += a * scale * dot_d(qrow, resid.row(uns[ui]), d);
            }
            worst = std::max(worst, std::abs(injected) / denom);
        }
    }
    return worst;
}

struct FlopPhases {
    double prepare = 0.0;
    double select = 0.0;
    double exact = 0.0;
    double zeroth = 0.0;
    double first_order = 0.0;
    double normalize = 0.0;
};

struct FlopReport {
    double dense_flops = 0.0;
    double sparse_flops = 0.0;  // exact + selection + centroid prep + normalize
    double pisa_flops = 0.0;
    double sparse_ratio = 0.0;
    double pisa_ratio = 0.0;
    double overhead_ratio = 0.0;  // (pisa - sparse) / dense
    FlopPhases phases;
};

// Analytic counts with the 2*m*n*p convention per (m x n)(n x p) product;
// exp/softmax scalar work is ignored. Centroids act as single tokens in the
// zeroth phase; the global first-order correction costs one d x d product per
// row plus the one-pass H_j build.
inline FlopReport flop_model(std::size_t L, std::size_t d, std::size_t b,
                             std::size_t k_selected, PisaVariant variant) {
    if (b == 0 || L % b != 0) {
        throw BlockDivisibility("seq_len " + std::to_string(L) +
                                " not divisible by block size " + std::to_string(b));
    }
    const double n = double(L / b);
    const double nq = n;
    const double kd = double(k_selected);
    if (k_selected == 0 || kd > n) throw InvalidSparsity("k out of range");
    const double dl = double(L), dd = double(d), db = double(b);

    FlopReport rep;
    rep.dense_flops = 4.0 * dl * dl * dd;

    const double prep_centroids = 2.0 * dl * dd;
    const double select = 2.0 * nq * n * dd;
    const double normalize = dl * dd;
    const double exact = 4.0 * dl * (kd * db) * dd;

    const bool has_tail = variant != PisaVariant::SparseOnly;
    const bool has_h = variant == PisaVariant::BlockFirst ||
                       variant == PisaVariant::Hybrid ||
                       variant == PisaVariant::GlobalCentroid;
    const double zeroth = has_tail ? 4.0 * dl * (n - kd) * dd : 0.0;
    const double h_prep = has_h ? 2.0 * dl * dd * dd : 0.0;
    double first_order = 0.0;
    if (variant == PisaVariant::BlockFirst) {
        first_order = 2.0 * dl * (n - kd) * dd * dd;
    } else if (has_h) {
        first_order = 2.0 * dl * dd * dd;
    }

    rep.phases.prepare = prep_centroids + h_prep;
    rep.phases.select = select;
    rep.phases.exact = exact;
    rep.phases.zeroth = zeroth;
    rep.phases.first_order = first_order;
    rep.phases.normalize = normalize;

    rep.sparse_flops = exact + select + prep_centroids + normalize;
    rep.pisa_flops = rep.sparse_flops + zeroth + h_prep + first_order;
    rep.sparse_ratio = rep.sparse_flops / rep.dense_flops;
    rep.pisa_ratio = rep.pisa_flops / rep.dense_flops;
    rep.overhead_ratio = (rep.pisa_flops - rep.sparse_flops) / rep.dense_flops;
    return rep;
}

struct ScoreHistogram {
    std::vector<double> bin_left, bin_right;
    std::vector<std::size_t> count_selected, count_unselected;
    std::size_t n_selected = 0, n_unselected = 0;
    double mean_selected = 0.0, mean_unselected = 0.0;
    double skew_selected = 0.0, skew_unselected = 0.0;
};

namespace detail {

inline void moments(const std::vector<double>& xs, double& mean, double& skew) {
    mean = 0.0;
    skew = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double m2 = 0.0, m3 = 0.0;
    for (double x : xs) {
        const double c = x - mean;
        m2 += c * c;
        m3 += c * c * c;
    }
    m2 /= double(xs.size());
    m3 /= double(xs.size());
    skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
}

}  // namespace detail

// Centroid-score histograms split by membership of the scored block in S_i
// versus U_i, with per-class mean and skewness.
template <class T>
ScoreHistogram score_histogram(ConstView<T> q, ConstView<T> k,
                               const SelectionPlan& plan, std::size_t b,
                               double scale, std::size_t bins) {
    if (bins == 0) throw InvalidDimension("bins must be >= 1");
    if (k.rows % b != 0 || q.rows % b != 0) {
        throw BlockDivisibility("seq_len not divisible by block size");
    }
    const std::size_t n = k.rows / b;
    const std::size_t d = q.cols;
    Matrix<double> kbar(n, d);
    for (std::size_t j = 0; j < n; ++j) {
        double* row = kbar.row(j);
        for (std::size_t nn = 0; nn < b; ++nn) {
            const T* krow = k.row(j * b + nn);
            for (std::size_t a = 0; a < d; ++a) row[a] += double(krow[a]);
        }
        for (std::size_t a = 0; a < d; ++a) row[a] /= double(b);
    }

    std::vector<double> sel_scores, uns_scores;
    for (std::size_t i = 0; i < plan.num_query_blocks(); ++i) {
        std::vector<char> in_sel(n, 0);
        for (const std::size_t j : plan.selected[i]) in_sel[j] = 1;
        for (std::size_t r = 0; r < b; ++r) {
            const T* qrow = q.row(i * b + r);
            for (std::size_t j = 0; j < n; ++j) {
                const double s = scale * dot_d(qrow, kbar.row(j), d);
                (in_sel[j] ? sel_scores : uns_scores).push_back(s);
            }
        }
    }

    ScoreHistogram hist;
    hist.n_selected = sel_scores.size();
    hist.n_unselected = uns_scores.size();
    detail::moments(sel_scores, hist.mean_selected, hist.skew_selected);
    detail::moments(uns_scores, hist.mean_unselected, hist.skew_unselected);

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double s : sel_scores) { lo = std::min(lo, s); hi = std::max(hi, s); }
    for (double s : uns_scores) { lo = std::min(lo, s); hi = std::max(hi, s); }
    if (!(lo <= hi)) { lo = 0.0; hi = 1.0; }
    if (lo == hi) hi = lo + 1.0;
    const double width = (hi - lo) / double(bins);
    hist.bin_left.resize(bins);
    hist.bin_right.resize(bins);
    hist.count_selected.assign(bins, 0);
    hist.count_unselected.assign(bins, 0);
    for (std::size_t bi = 0; bi < bins; ++bi) {
        hist.bin_left[bi] = lo + double(bi) * width;
        hist.bin_right[bi] = bi + 1 == bins ? hi : lo + double(bi + 1) * width;
    }
    const auto bin_of = [&](double s) {
        const auto bi = std::size_t((s - lo) / width);
        return std::min(bi, bins - 1);
    };
    for (double s : sel_scores) ++hist.count_selected[bin_of(s)];
    for (double s : uns_scores) ++hist.count_unselected[bin_of(s)];
    return hist;
}

}  // namespace pisa
