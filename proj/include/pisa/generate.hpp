#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pisa/bundle.hpp"
#include "pisa/errors.hpp"
#include "pisa/rng.hpp"

namespace pisa {

namespace detail {

inline void require_dims(std::size_t heads, std::size_t L, std::size_t d) {
    if (heads == 0 || L == 0 || d == 0) {
        throw InvalidDimension("heads, seq_len and head_dim must all be >= 1 (got " +
                               std::to_string(heads) + ", " + std::to_string(L) +
                               ", " + std::to_string(d) + ")");
    }
}

}  // namespace detail

// I.i.d. zero-mean Gaussian Q/K/V. Deterministic per (seed, shape, std):
// one xoshiro256++ stream fills Q, K, V for head 0, then head 1, and so on.
template <class T>
TensorBundle<T> gen_gaussian(std::uint64_t seed, std::size_t heads, std::size_t L,
                             std::size_t d, double std_dev) {
    detail::require_dims(heads, L, d);
    if (!(std_dev > 0.0)) {
        throw DegenerateScale("std must be > 0, got " + std::to_string(std_dev));
    }
    TensorBundle<T> b;
    b.num_heads = heads;
    b.seq_len = L;
    b.head_dim = d;
    const std::size_t n = b.total_elems();
    b.q.resize(n);
    b.k.resize(n);
    b.v.resize(n);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) b.q[i] = T(std_dev * rng.gaussian());
    for (std::size_t i = 0; i < n; ++i) b.k[i] = T(std_dev * rng.gaussian());
    for (std::size_t i = 0; i < n; ++i) b.v[i] = T(std_dev * rng.gaussian());
    return b;
}

// Clustered keys: cluster centers are standard Gaussian, key rows come in
// contiguous runs sharing a center plus noise_std jitter, so block-sparse
// structure emerges once runs align with key blocks. Each query row follows
// one center from a small random subset (|subset| = max(1, n_clusters/4)),
// scaled by `concentration`, plus unit Gaussian jitter; concentration = 0
// degrades to the unstructured Gaussian case. Values are i.i.d. Gaussian.
template <class T>
TensorBundle<T> gen_clustered(std::uint64_t seed, std::size_t heads, std::size_t L,
                              std::size_t d, std::size_t n_clusters,
                              double concentration, double noise_std) {
    detail::require_dims(heads, L, d);
    if (n_clusters == 0 || n_clusters > L) {
        throw InvalidDimension("n_clusters must be in [1, L], got " +
                               std::to_string(n_clusters) + " for L = " +
                               std::to_string(L));
    }
    if (noise_std < 0.0) {
        throw DegenerateScale("noise_std must be >= 0, got " +
                              std::to_string(noise_std));
    }
    TensorBundle<T> b;
    b.num_heads = heads;
    b.seq_len = L;
    b.head_dim = d;
    const std::size_t n = b.total_elems();
    b.q.resize(n);
    b.k.resize(n);
    b.v.resize(n);
    Rng rng(seed);
    const std::size_t run_len = (L + n_clusters - 1) / n_clusters;
    const std::size_t subset_size = std::max<std::size_t>(1, n_clusters / 4);

    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> centers(n_clusters * d);
        for (double& c : centers) c = rng.gaussian();

        // Partial Fisher-Yates: the first subset_size entries become the
        // clusters queries align with.
        std::vector<std::size_t> perm(n_clusters);
        for (std::size_t i = 0; i < n_clusters; ++i) perm[i] = i;
        for (std::size_t i = 0; i < subset_size; ++i) {
            const std::size_t j = i + std::size_t(rng.below(n_clusters - i));
            std::swap(perm[i], perm[j]);
        }

        T* kh = b.k.data() + h * b.head_elems();
        T* qh = b.q.data() + h * b.head_elems();
        T* vh = b.v.data() + h * b.head_elems();
        for (std::size_t r = 0; r < L; ++r) {
            const std::size_t z = std::min(r / run_len, n_clusters - 1);
            const double* c = centers.data() + z * d;
            for (std::size_t a = 0; a < d; ++a) {
                kh[r * d + a] = T(c[a] + noise_std * rng.gaussian());
            }
        }
        for (std::size_t r = 0; r < L; ++r) {
            const std::size_t u = perm[std::size_t(rng.below(subset_size))];
            const double* c = centers.data() + u * d;
            for (std::size_t a = 0; a < d; ++a) {
                qh[r * d + a] = T(concentration * c[a] + rng.gaussian());
            }
        }
        for (std::size_t i = 0; i < b.head_elems(); ++i) vh[i] = T(rng.gaussian());
    }
    return b;
}

// Rescales every row of Q and K to Euclidean norm target_norm; V untouched.
// Idempotent up to dtype rounding. This pins the query-norm constant that the
// error-bound checker uses.
template <class T>
TensorBundle<T> qk_normalize(TensorBundle<T> b, double target_norm) {
    if (!(target_norm > 0.0)) {
        throw DegenerateScale("target_norm must be > 0, got " +
                              std::to_string(target_norm));
    }
    const std::size_t d = b.head_dim;
    const auto normalize = [&](std::vector<T>& arr, const char* name) {
        for (std::size_t h = 0; h < b.num_heads; ++h) {
            T* base = arr.data() + h * b.head_elems();
            for (std::size_t r = 0; r < b.seq_len; ++r) {
                T* row = base + r * d;
                double sq = 0.0;
                for (std::size_t a = 0; a < d; ++a) sq += double(row[a]) * double(row[a]);
                if (sq == 0.0) {
                    throw ZeroRow(std::string(name) + " head " + std::to_string(h) +
                                  " row " + std::to_string(r) + " has zero norm");
                }
                const double f = target_norm / std::sqrt(sq);
                for (std::size_t a = 0; a < d; ++a) row[a] = T(double(row[a]) * f);
            }
        }
    };
    normalize(b.q, "Q");
    normalize(b.k, "K");
    return b;
}

inline AnyBundle qk_normalize(AnyBundle b, double target_norm) {
    return std::visit([&](auto& t) -> AnyBundle {
        return qk_normalize(std::move(t), target_norm);
    }, b);
}

}  // namespace pisa
