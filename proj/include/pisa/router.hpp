#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"

namespace pisa {

enum class RouterStrategy { Plain, CovarianceAware };

inline const char* strategy_name(RouterStrategy s) {
    return s == RouterStrategy::Plain ? "plain" : "covariance_aware";
}

// Per query block i, the set S_i of key blocks computed exactly; the
// complement U_i is approximated (or dropped, for the sparse-only baseline).
struct SelectionPlan {
    std::size_t num_key_blocks = 0;  // N
    std::size_t k = 0;               // |S_i| for every i
    RouterStrategy strategy = RouterStrategy::Plain;
    double epsilon = 0.0;
    std::vector<std::vector<std::size_t>> selected;  // ascending lists

    std::size_t num_query_blocks() const { return selected.size(); }

    bool operator==(const SelectionPlan&) const = default;

    // Ascending complement U_i.
    std::vector<std::size_t> unselected(std::size_t i) const {
        std::vector<std::size_t> u;
        u.reserve(num_key_blocks - selected[i].size());
        std::size_t p = 0;
        for (std::size_t j = 0; j < num_key_blocks; ++j) {
            if (p < selected[i].size() && selected[i][p] == j) {
                ++p;
            } else {
                u.push_back(j);
            }
        }
        return u;
    }

    void validate() const {
        for (std::size_t i = 0; i < selected.size(); ++i) {
            const auto& s = selected[i];
            if (s.empty()) {
                throw EmptySelection("query block " + std::to_string(i) +
                                     " selects no key blocks");
            }
            if (s.size() != k) {
                throw InvalidSparsity("query block " + std::to_string(i) +
                                      " selects " + std::to_string(s.size()) +
                                      " blocks, expected k = " + std::to_string(k));
            }
            for (std::size_t p = 0; p < s.size(); ++p) {
                if (s[p] >= num_key_blocks || (p > 0 && s[p] <= s[p - 1])) {
                    throw InvalidSparsity(
                        "query block " + std::to_string(i) +
                        " has out-of-range or non-ascending indices");
                }
            }
        }
    }
};

struct SparsityResolution {
    std::size_t k = 0;
    double realized = 0.0;  // (N - k) / N
};

// Maps a requested sparsity ratio r (fraction of blocks approximated) onto a
// block count k = max(1, round((1-r)*N)).
inline SparsityResolution sparsity_to_k(double r, std::size_t n) {
    if (!(r >= 0.0) || r >= 1.0) {
        throw InvalidSparsity("sparsity must lie in [0, 1), got " +
                              std::to_string(r));
    }
    if (n == 0) throw InvalidDimension("block count must be >= 1");
    const double exact = (1.0 - r) * double(n);
    std::size_t k = std::size_t(std::llround(exact));
    k = std::clamp<std::size_t>(k, 1, n);
    return {k, double(n - k) / double(n)};
}

namespace detail {

// Top-k block indices by descending score, ties toward the lower index,
// returned in ascending order.
inline std::vector<std::size_t> topk_ascending(const std::vector<double>& scores,
                                               std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Swaps the worst-scoring selected block for `diag` if it is missing.
inline void force_block(std::vector<std::size_t>& sel,
                        const std::vector<double>& scores, std::size_t diag) {
    if (std::binary_search(sel.begin(), sel.end(), diag)) return;
    std::size_t worst = 0;
    for (std::size_t p = 1; p < sel.size(); ++p) {
        const std::size_t a = sel[p], b = sel[worst];
        if (scores[a] < scores[b] || (scores[a] == scores[b] && a > b)) worst = p;
    }
    sel.erase(sel.begin() + std::ptrdiff_t(worst));
    sel.insert(std::lower_bound(sel.begin(), sel.end(), diag), diag);
}

}  // namespace detail

// Plain top-k on centroid scores scale * q_bar_i . k_bar_j.
inline SelectionPlan select_topk_plain(ConstView<double> q_bar,
                                       ConstView<double> k_bar, std::size_t k,
                                       double scale, bool force_diagonal = false) {
    const std::size_t n = k_bar.rows;
    if (k == 0 || k > n) {
        throw InvalidSparsity("k must lie in [1, N], got " + std::to_string(k) +
                              " for N = " + std::to_string(n));
    }
    if (q_bar.cols != k_bar.cols) throw InvalidDimension("q_bar/k_bar dim mismatch");
    SelectionPlan plan;
    plan.num_key_blocks = n;
    plan.k = k;
    plan.strategy = RouterStrategy::Plain;
    plan.selected.resize(q_bar.rows);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < q_bar.rows; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scores[j] = scale * dot_d(q_bar.row(i), k_bar.row(j), q_bar.cols);
        }
        plan.selected[i] = detail::topk_ascending(scores, k);
        if (force_diagonal && i < n) {
            detail::force_block(plan.selected[i], scores, i);
        }
    }
    return plan;
}

// Covariance-aware top-k: the centroid score is rectified by log(M_j + eps)
// so blocks whose first-order matrices deviate most from the global mean are
// promoted into the exact set. The softmax wrapper of the selection score is
// omitted: top-k is invariant under strictly monotone transforms.
inline SelectionPlan select_topk_covariance(ConstView<double> q_bar,
                                            ConstView<double> k_bar,
                                            const std::vector<double>& m,
                                            double epsilon, std::size_t k,
                                            double scale,
                                            bool force_diagonal = false) {
    const std::size_t n = k_bar.rows;
    if (!(epsilon > 0.0)) {
        throw InvalidEpsilon("epsilon must be > 0, got " + std::to_string(epsilon));
    }
    if (m.size() != n) throw InvalidDimension("M has wrong length");
    if (k == 0 || k > n) {
        throw InvalidSparsity("k must lie in [1, N], got " + std::to_string(k) +
                              " for N = " + std::to_string(n));
    }
    if (q_bar.cols != k_bar.cols) throw InvalidDimension("q_bar/k_bar dim mismatch");
    SelectionPlan plan;
    plan.num_key_blocks = n;
    plan.k = k;
    plan.strategy = RouterStrategy::CovarianceAware;
    plan.epsilon = epsilon;
    plan.selected.resize(q_bar.rows);
    std::vector<double> rectifier(n);
    for (std::size_t j = 0; j < n; ++j) rectifier[j] = std::log(m[j] + epsilon);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < q_bar.rows; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scores[j] = scale * dot_d(q_bar.row(i), k_bar.row(j), q_bar.cols) +
                        rectifier[j];
        }
        plan.selected[i] = detail::topk_ascending(scores, k);
        if (force_diagonal && i < n) {
            detail::force_block(plan.selected[i], scores, i);
        }
    }
    return plan;
}

// Row-level routing variant: scores each key block by the max over the query
// rows of a block instead of the block-mean query. Any single row that needs a
// block pulls it into S_i. Block-mean routing is the default elsewhere.
template <class T>
SelectionPlan select_topk_rowmax(ConstView<T> q, ConstView<double> k_bar,
                                 std::size_t block_size, std::size_t k,
                                 double scale,
                                 const std::vector<double>* m = nullptr,
                                 double epsilon = 1e-6) {
    const std::size_t n = k_bar.rows;
    if (k == 0 || k > n) {
        throw InvalidSparsity("k must lie in [1, N], got " + std::to_string(k));
    }
    if (q.rows % block_size != 0) {
        throw BlockDivisibility("seq_len " + std::to_string(q.rows) +
                                " not divisible by block size " +
                                std::to_string(block_size));
    }
    SelectionPlan plan;
    plan.num_key_blocks = n;
    plan.k = k;
    plan.strategy = m ? RouterStrategy::CovarianceAware : RouterStrategy::Plain;
    plan.epsilon = m ? epsilon : 0.0;
    const std::size_t nq = q.rows / block_size;
    plan.selected.resize(nq);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < block_size; ++r) {
                best = std::max(best, scale * dot_d(q.row(i * block_size + r),
                                                    k_bar.row(j), q.cols));
            }
            scores[j] = m ? best + std::log((*m)[j] + epsilon) : best;
        }
        plan.selected[i] = detail::topk_ascending(scores, k);
    }
    return plan;
}

}  // namespace pisa
