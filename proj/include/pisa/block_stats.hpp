#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"

namespace pisa {

enum class SpectralMethod { Exact, PowerIteration };

// Prepare-phase products: per-block key centroids, value sums, first-order
// matrices H_j, the global mean H-bar, and deviation norms M_j. All statistics
// live in 64-bit reals regardless of the input dtype because they feed the
// error bounds.
struct BlockStatistics {
    std::size_t num_blocks = 0;  // N
    std::size_t block_size = 0;  // B
    std::size_t dim = 0;         // d

    Matrix<double> k_bar;              // [N][d]
    Matrix<double> v_hat;              // [N][d], per-block value sums
    std::vector<double> h;             // [N][d][d], flattened first-order matrices
    Matrix<double> h_bar;              // [d][d]
    std::vector<double> m;             // [N], ||H_j - H_bar||_2
    double m_max = 0.0;
    std::vector<double> k_bar_global;  // [d]
    bool global_ready = false;

    const double* h_block(std::size_t j) const { return h.data() + j * dim * dim; }
    double* h_block(std::size_t j) { return h.data() + j * dim * dim; }
};

namespace detail {

// Largest singular value via cyclic Jacobi eigen-decomposition of A^T A.
inline double spectral_norm_exact(const double* a, std::size_t d) {
    std::vector<double> g(d * d, 0.0);
    for (std::size_t kk = 0; kk < d; ++kk) {
        const double* row = a + kk * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double ri = row[i];
            if (ri == 0.0) continue;
            for (std::size_t j = i; j < d; ++j) g[i * d + j] += ri * row[j];
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) g[i * d + j] = g[j * d + i];
    }

    double fro = 0.0;
    for (double x : g) fro += x * x;
    if (fro == 0.0) return 0.0;
    const double stop = 1e-28 * fro;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) off += g[p * d + q] * g[p * d + q];
        }
        if (off <= stop) break;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double gpq = g[p * d + q];
                if (gpq == 0.0) continue;
                const double theta = (g[q * d + q] - g[p * d + p]) / (2.0 * gpq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t r = 0; r < d; ++r) {
                    const double grp = g[r * d + p];
                    const double grq = g[r * d + q];
                    g[r * d + p] = c * grp - s * grq;
                    g[r * d + q] = s * grp + c * grq;
                }
                for (std::size_t r = 0; r < d; ++r) {
                    const double gpr = g[p * d + r];
                    const double gqr = g[q * d + r];
                    g[p * d + r] = c * gpr - s * gqr;
                    g[q * d + r] = s * gpr + c * gqr;
                }
            }
        }
    }
    double lam = 0.0;
    for (std::size_t i = 0; i < d; ++i) lam = std::max(lam, g[i * d + i]);
    return std::sqrt(std::max(0.0, lam));
}

// Power iteration on A^T A with the normalized all-ones start vector,
// tolerance 1e-8, at most 1000 iterations.
inline bool spectral_norm_power(const double* a, std::size_t d, double& out) {
    std::vector<double> v(d, 1.0 / std::sqrt(double(d)));
    std::vector<double> av(d), w(d);
    double sigma = 0.0;
    for (int it = 0; it < 1000; ++it) {
        for (std::size_t i = 0; i < d; ++i) {
            av[i] = dot_d(a + i * d, v.data(), d);
        }
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += a[i * d + j] * av[i];
            w[j] = s;
        }
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            out = 0.0;
            return true;
        }
        const double sigma_new = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) v[j] = w[j] / norm;
        if (it > 0 && std::abs(sigma_new - sigma) <= 1e-8 * std::max(1.0, sigma_new)) {
            out = sigma_new;
            return true;
        }
        sigma = sigma_new;
    }
    return false;
}

}  // namespace detail

// Operator (spectral) norm of a d x d matrix; never returns NaN. The power
// iteration option falls back to the exact path when it fails to converge.
inline double spectral_norm(const double* a, std::size_t d,
                            SpectralMethod method = SpectralMethod::Exact) {
    for (std::size_t i = 0; i < d * d; ++i) {
        if (!std::isfinite(a[i])) {
            throw NonFiniteValue("spectral_norm input entry " + std::to_string(i));
        }
    }
    if (method == SpectralMethod::PowerIteration) {
        double out = 0.0;
        if (detail::spectral_norm_power(a, d, out)) return out;
    }
    return detail::spectral_norm_exact(a, d);
}

inline double spectral_norm(const Matrix<double>& a,
                            SpectralMethod method = SpectralMethod::Exact) {
    if (a.rows != a.cols) throw InvalidDimension("spectral_norm needs a square matrix");
    return spectral_norm(a.data.data(), a.rows, method);
}

// Single pass over K and V: centroids k_bar_j, value sums v_hat_j, and the
// block-wise first-order matrices H_j = sum_n (k_{j,n} - k_bar_j)^T v_{j,n}.
template <class T>
BlockStatistics compute_block_stats(ConstView<T> k, ConstView<T> v, std::size_t b) {
    if (b == 0) throw InvalidDimension("block size must be >= 1");
    if (k.rows != v.rows || k.cols != v.cols) {
        throw InvalidDimension("K and V shapes differ");
    }
    if (k.rows % b != 0) {
        throw BlockDivisibility("seq_len " + std::to_string(k.rows) +
                                " not divisible by block size " + std::to_string(b));
    }
    const std::size_t n = k.rows / b;
    const std::size_t d = k.cols;
    BlockStatistics st;
    st.num_blocks = n;
    st.block_size = b;
    st.dim = d;
    st.k_bar = Matrix<double>(n, d);
    st.v_hat = Matrix<double>(n, d);
    st.h.assign(n * d * d, 0.0);

    std::vector<double> dk(d);
    for (std::size_t j = 0; j < n; ++j) {
        double* kb = st.k_bar.row(j);
        double* vh = st.v_hat.row(j);
        for (std::size_t r = 0; r < b; ++r) {
            const T* krow = k.row(j * b + r);
            const T* vrow = v.row(j * b + r);
            for (std::size_t a = 0; a < d; ++a) {
                kb[a] += double(krow[a]);
                vh[a] += double(vrow[a]);
            }
        }
        for (std::size_t a = 0; a < d; ++a) kb[a] /= double(b);
        double* hj = st.h_block(j);
        for (std::size_t r = 0; r < b; ++r) {
            const T* krow = k.row(j * b + r);
            const T* vrow = v.row(j * b + r);
            for (std::size_t a = 0; a < d; ++a) dk[a] = double(krow[a]) - kb[a];
            for (std::size_t a = 0; a < d; ++a) {
                const double w = dk[a];
                if (w == 0.0) continue;
                double* hrow = hj + a * d;
                for (std::size_t c = 0; c < d; ++c) hrow[c] += w * double(vrow[c]);
            }
        }
    }
    return st;
}

// Adds the global statistics: H_bar (mean of H_j over ALL blocks), the
// deviation norms M_j and their max, and the global key centroid. The H_bar
// reduction runs in ascending block order.
inline BlockStatistics& compute_global_stats(
    BlockStatistics& st, SpectralMethod method = SpectralMethod::Exact,
    bool compute_norms = true) {
    const std::size_t n = st.num_blocks, d = st.dim;
    if (n == 0 || st.h.size() != n * d * d) {
        throw InvalidDimension("block statistics not populated");
    }
    st.h_bar = Matrix<double>(d, d);
    for (std::size_t j = 0; j < n; ++j) {
        const double* hj = st.h_block(j);
        for (std::size_t i = 0; i < d * d; ++i) st.h_bar.data[i] += hj[i];
    }
    for (double& x : st.h_bar.data) x /= double(n);

    st.k_bar_global.assign(d, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const double* kb = st.k_bar.row(j);
        for (std::size_t a = 0; a < d; ++a) st.k_bar_global[a] += kb[a];
    }
    for (double& x : st.k_bar_global) x /= double(n);

    st.m.assign(n, 0.0);
    st.m_max = 0.0;
    if (compute_norms) {
        std::vector<double> diff(d * d);
        for (std::size_t j = 0; j < n; ++j) {
            const double* hj = st.h_block(j);
            for (std::size_t i = 0; i < d * d; ++i) diff[i] = hj[i] - st.h_bar.data[i];
            st.m[j] = spectral_norm(diff.data(), d, method);
            st.m_max = std::max(st.m_max, st.m[j]);
        }
    }
    st.global_ready = true;
    return st;
}

// Mean of H_j over an arbitrary block subset; the exact-over-U_i counterpart
// of the query-independent H_bar approximation.
inline Matrix<double> mean_h_over(const BlockStatistics& st,
                                  const std::vector<std::size_t>& blocks) {
    const std::size_t d = st.dim;
    Matrix<double> out(d, d);
    if (blocks.empty()) return out;
    for (const std::size_t j : blocks) {
        const double* hj = st.h_block(j);
        for (std::size_t i = 0; i < d * d; ++i) out.data[i] += hj[i];
    }
    for (double& x : out.data) x /= double(blocks.size());
    return out;
}

// Block-wise mean of the queries.
template <class T>
Matrix<double> query_block_means(ConstView<T> q, std::size_t b) {
    if (b == 0) throw InvalidDimension("block size must be >= 1");
    if (q.rows % b != 0) {
        throw BlockDivisibility("seq_len " + std::to_string(q.rows) +
                                " not divisible by block size " + std::to_string(b));
    }
    const std::size_t n = q.rows / b;
    const std::size_t d = q.cols;
    Matrix<double> out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.row(i);
        for (std::size_t r = 0; r < b; ++r) {
            const T* qrow = q.row(i * b + r);
            for (std::size_t a = 0; a < d; ++a) row[a] += double(qrow[a]);
        }
        for (std::size_t a = 0; a < d; ++a) row[a] /= double(b);
    }
    return out;
}

}  // namespace pisa
