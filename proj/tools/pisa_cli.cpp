// Command-line harness: generate PQKV tensor files, run piecewise sparse
// attention configurations against the dense oracle, sweep sparsity/length
// grids into CSV, verify the library's invariants, and benchmark wall time.
//
// Exit codes: 0 success, 1 invariant failure, 2 usage/validation error,
// 3 i/o error.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pisa/pisa.hpp"
#include "pisa/serialize.hpp"

namespace {

using nlohmann::json;

struct GenArgs {
    std::string kind = "gaussian";
    std::uint64_t seed = 0;
    std::size_t heads = 1;
    std::size_t len = 1024;
    std::size_t dim = 64;
    double std_dev = 1.0;
    std::size_t clusters = 16;
    double concentration = 2.0;
    double noise_std = 0.15;
    std::string dtype = "f32";
    double qk_norm = 0.0;  // 0 disables
};

void add_gen_options(CLI::App* cmd, GenArgs& g, bool with_seed = true) {
    cmd->add_option("--kind", g.kind, "Generator: gaussian or clustered")
        ->check(CLI::IsMember({"gaussian", "clustered"}));
    if (with_seed) cmd->add_option("--seed", g.seed, "PRNG seed");
    cmd->add_option("--heads", g.heads, "Number of heads");
    cmd->add_option("--len", g.len, "Sequence length L");
    cmd->add_option("--dim", g.dim, "Head dimension d");
    cmd->add_option("--std", g.std_dev, "Gaussian std");
    cmd->add_option("--clusters", g.clusters, "Cluster count (clustered)");
    cmd->add_option("--concentration", g.concentration,
                    "Query/center alignment strength (clustered)");
    cmd->add_option("--noise-std", g.noise_std, "Within-cluster key noise (clustered)");
    cmd->add_option("--dtype", g.dtype, "Element type: f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--qk-norm", g.qk_norm,
                    "Rescale Q/K rows to this norm (0 = off)");
}

template <class T>
pisa::AnyBundle make_bundle_t(const GenArgs& g) {
    pisa::TensorBundle<T> b;
    if (g.kind == "clustered") {
        b = pisa::gen_clustered<T>(g.seed, g.heads, g.len, g.dim, g.clusters,
                                   g.concentration, g.noise_std);
    } else {
        b = pisa::gen_gaussian<T>(g.seed, g.heads, g.len, g.dim, g.std_dev);
    }
    if (g.qk_norm > 0.0) b = pisa::qk_normalize(std::move(b), g.qk_norm);
    return b;
}

pisa::AnyBundle make_bundle(const GenArgs& g) {
    return g.dtype == "f64" ? make_bundle_t<double>(g) : make_bundle_t<float>(g);
}

pisa::PisaVariant parse_variant(const std::string& s) {
    if (s == "sparse_only") return pisa::PisaVariant::SparseOnly;
    if (s == "zeroth") return pisa::PisaVariant::Zeroth;
    if (s == "block_first") return pisa::PisaVariant::BlockFirst;
    if (s == "hybrid") return pisa::PisaVariant::Hybrid;
    if (s == "global_centroid") return pisa::PisaVariant::GlobalCentroid;
    throw pisa::InvalidDimension("unknown variant: " + s);
}

pisa::RouterStrategy parse_strategy(const std::string& s) {
    if (s == "plain") return pisa::RouterStrategy::Plain;
    if (s == "cov" || s == "covariance_aware") {
        return pisa::RouterStrategy::CovarianceAware;
    }
    throw pisa::InvalidDimension("unknown strategy: " + s);
}

struct RunConfig {
    std::string variant = "hybrid";
    std::string strategy = "plain";
    double sparsity = 0.875;
    std::size_t block = 64;
    std::size_t group = 8;
    double epsilon = 1e-6;
    std::string accum = "f64";
    bool streaming = false;
    bool deterministic = false;
    unsigned threads = 0;
};

void add_run_options(CLI::App* cmd, RunConfig& rc, bool with_sparsity = true) {
    cmd->add_option("--variant", rc.variant, "Approximation variant")
        ->check(CLI::IsMember({"sparse_only", "zeroth", "block_first", "hybrid",
                               "global_centroid"}));
    cmd->add_option("--strategy", rc.strategy, "Router strategy: plain or cov")
        ->check(CLI::IsMember({"plain", "cov", "covariance_aware"}));
    if (with_sparsity) {
        cmd->add_option("--sparsity", rc.sparsity,
                        "Fraction of key blocks approximated, in [0, 1)");
    }
    cmd->add_option("--block", rc.block, "Block size B");
    cmd->add_option("--group", rc.group, "Centroid-scan group size C");
    cmd->add_option("--epsilon", rc.epsilon, "Covariance routing stabilizer");
    cmd->add_option("--accum", rc.accum, "Accumulation dtype: f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_flag("--streaming", rc.streaming,
                  "Use the phased streaming path for the hybrid variant");
    cmd->add_flag("--deterministic", rc.deterministic,
                  "Byte-identical outputs: zero out wall-clock fields");
    cmd->add_option("--threads", rc.threads, "Worker threads (0 = auto)");
}

pisa::AttentionConfig attention_config(const RunConfig& rc) {
    pisa::AttentionConfig cfg;
    cfg.block_size = rc.block;
    cfg.group_size = rc.group;
    cfg.accum = rc.accum == "f32" ? pisa::AccumDtype::F32 : pisa::AccumDtype::F64;
    cfg.deterministic = true;
    cfg.num_threads = rc.threads;
    return cfg;
}

struct CellMetrics {
    double l1_rel = 0.0, l2_rel = 0.0, max_abs = 0.0;
    double sparsity_realized = 0.0;
    double flops_ratio = 0.0, flops_overhead = 0.0, flops_sparse_ratio = 0.0;
    double wall_prepare = 0.0, wall_select = 0.0, wall_attention = 0.0;
    std::vector<double> per_head_l1;
};

// Runs one (variant, sparsity) configuration over every head and aggregates
// the error metrics against the dense oracle across heads.
template <class T>
CellMetrics run_cell(const pisa::TensorBundle<T>& b, const RunConfig& rc,
                     const std::vector<pisa::Matrix<T>>& dense) {
    const auto cfg = attention_config(rc);
    pisa::RouterOptions router;
    router.strategy = parse_strategy(rc.strategy);
    router.epsilon = rc.epsilon;
    const auto variant = parse_variant(rc.variant);

    auto res = pisa::pisa_multihead(b, rc.sparsity, router, variant, cfg,
                                    rc.streaming);
    CellMetrics mx;
    mx.sparsity_realized = res.sparsity_realized;
    mx.wall_prepare = res.prepare_ms;
    mx.wall_select = res.select_ms;
    mx.wall_attention = res.attention_ms;

    double num1 = 0, den1 = 0, num2 = 0, den2 = 0;
    for (std::size_t h = 0; h < b.num_heads; ++h) {
        const auto rep = pisa::compare_outputs(res.heads[h].output, dense[h]);
        mx.per_head_l1.push_back(rep.l1_rel);
        mx.max_abs = std::max(mx.max_abs, rep.max_abs);
        const auto& out = res.heads[h].output;
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const double diff = double(out.data[i]) - double(dense[h].data[i]);
            num1 += std::abs(diff);
            den1 += std::abs(double(dense[h].data[i]));
            num2 += diff * diff;
            den2 += double(dense[h].data[i]) * double(dense[h].data[i]);
        }
    }
    mx.l1_rel = den1 > 0 ? num1 / den1 : 0.0;
    mx.l2_rel = den2 > 0 ? std::sqrt(num2 / den2) : 0.0;

    const auto flops = pisa::flop_model(b.seq_len, b.head_dim, rc.block, res.k,
                                        variant);
    mx.flops_ratio = flops.pisa_ratio;
    mx.flops_overhead = flops.overhead_ratio;
    mx.flops_sparse_ratio = flops.sparse_ratio;
    return mx;
}

template <class T>
std::vector<pisa::Matrix<T>> dense_per_head(const pisa::TensorBundle<T>& b,
                                            unsigned threads) {
    std::vector<pisa::Matrix<T>> dense;
    dense.reserve(b.num_heads);
    pisa::AttentionConfig cfg;
    const double scale = cfg.resolved_scale(b.head_dim);
    for (std::size_t h = 0; h < b.num_heads; ++h) {
        dense.push_back(pisa::dense_naive(b.q_head(h), b.k_head(h), b.v_head(h),
                                          scale, threads));
    }
    return dense;
}

// ---------------------------------------------------------------- gen

int cmd_gen(const GenArgs& g, std::size_t block, const std::string& out_path) {
    if (g.len % block != 0) {
        throw pisa::BlockDivisibility(
            "seq_len " + std::to_string(g.len) + " must be divisible by block size " +
            std::to_string(block));
    }
    const auto bundle = make_bundle(g);
    const std::size_t bytes = pisa::write_bundle_file(bundle, out_path);
    json j{{"path", out_path},
           {"bytes", bytes},
           {"dtype", g.dtype},
           {"kind", g.kind},
           {"seed", g.seed},
           {"num_heads", g.heads},
           {"seq_len", g.len},
           {"head_dim", g.dim}};
    std::cout << j.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------- run

int cmd_run(const std::string& in_path, const GenArgs& g, const RunConfig& rc) {
    using clock = std::chrono::steady_clock;
    pisa::AnyBundle bundle =
        in_path.empty() ? make_bundle(g) : pisa::read_bundle_file(in_path);
    if (!in_path.empty() && g.qk_norm > 0.0) {
        bundle = pisa::qk_normalize(std::move(bundle), g.qk_norm);
    }
    return std::visit([&](const auto& b) {
        const auto t0 = clock::now();
        const auto dense = dense_per_head(b, rc.threads);
        const auto mx = run_cell(b, rc, dense);
        const double wall =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        json j{{"variant", rc.variant},
               {"strategy", rc.strategy},
               {"seq_len", b.seq_len},
               {"head_dim", b.head_dim},
               {"num_heads", b.num_heads},
               {"block_size", rc.block},
               {"group_size", rc.group},
               {"sparsity_requested", rc.sparsity},
               {"sparsity_realized", mx.sparsity_realized},
               {"l1_rel", mx.l1_rel},
               {"l2_rel", mx.l2_rel},
               {"max_abs", mx.max_abs},
               {"flops_ratio", mx.flops_ratio},
               {"flops_sparse_ratio", mx.flops_sparse_ratio},
               {"flops_overhead_ratio", mx.flops_overhead},
               {"wall_ms", rc.deterministic ? 0.0 : wall},
               {"wall_ms_prepare", rc.deterministic ? 0.0 : mx.wall_prepare},
               {"wall_ms_select", rc.deterministic ? 0.0 : mx.wall_select},
               {"wall_ms_attention", rc.deterministic ? 0.0 : mx.wall_attention}};
        std::cout << j.dump() << "\n";
        return 0;
    }, bundle);
}

// ---------------------------------------------------------------- sweep

struct SweepRow {
    std::string method, strategy, status = "ok";
    std::uint64_t seed = 0;
    std::size_t head = 0, seq_len = 0, block_size = 0;
    bool has_metrics = false;
    double sparsity_requested = 0, sparsity_realized = 0;
    double l1_rel = 0, l2_rel = 0, max_abs = 0, flops_ratio = 0, wall_ms = 0;
};

void emit_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "method,strategy,seed,head,seq_len,block_size,sparsity_requested,"
           "sparsity_realized,l1_rel,l2_rel,max_abs,flops_ratio,wall_ms,status\n";
    for (const auto& r : rows) {
        out << r.method << ',' << r.strategy << ',' << r.seed << ',' << r.head
            << ',' << r.seq_len << ',' << r.block_size << ','
            << pisa::fmt_double(r.sparsity_requested) << ',';
        if (r.has_metrics) {
            out << pisa::fmt_double(r.sparsity_realized) << ','
                << pisa::fmt_double(r.l1_rel) << ',' << pisa::fmt_double(r.l2_rel)
                << ',' << pisa::fmt_double(r.max_abs) << ','
                << pisa::fmt_double(r.flops_ratio) << ','
                << pisa::fmt_double(r.wall_ms);
        } else {
            out << ",,,,,";
        }
        out << ',' << r.status << '\n';
    }
}

// Grid cells run in a work pool; rows are buffered and emitted in fixed
// (seed, length, sparsity, variant, head) order, never completion order.
int cmd_sweep(GenArgs g, RunConfig rc, const std::vector<std::size_t>& lengths,
              const std::vector<double>& sparsities,
              const std::vector<std::string>& variants,
              const std::vector<std::uint64_t>& seeds, const std::string& in_path,
              const std::string& out_path) {
    struct Cell {
        std::uint64_t seed;
        std::size_t len;
        double sparsity;
        std::string variant;
    };
    std::vector<Cell> cells;
    std::vector<std::uint64_t> eff_seeds = seeds;
    std::vector<std::size_t> eff_lengths = lengths;
    if (!in_path.empty()) {
        eff_seeds = {0};
        eff_lengths = {0};  // resolved from the file
    }
    for (const auto seed : eff_seeds) {
        for (const auto len : eff_lengths) {
            for (const double sp : sparsities) {
                for (const auto& var : variants) {
                    cells.push_back({seed, len, sp, var});
                }
            }
        }
    }

    std::vector<std::vector<SweepRow>> buffers(cells.size());
    // One bundle + dense oracle per (seed, length); cells sharing them are
    // grouped so the pool does not recompute the oracle per variant.
    struct Group {
        std::uint64_t seed;
        std::size_t len;
        std::vector<std::size_t> cell_idx;
    };
    std::vector<Group> groups;
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        if (groups.empty() || groups.back().seed != cells[ci].seed ||
            groups.back().len != cells[ci].len) {
            groups.push_back({cells[ci].seed, cells[ci].len, {}});
        }
        groups.back().cell_idx.push_back(ci);
    }

    const unsigned pool = pisa::resolve_threads(rc.threads);
    pisa::parallel_for(0, groups.size(), pool, [&](std::size_t gi) {
        const Group& grp = groups[gi];
        GenArgs cg = g;
        cg.seed = grp.seed;
        cg.len = grp.len;
        RunConfig cell_rc = rc;
        cell_rc.threads = 1;  // pool parallelism, not nested
        pisa::AnyBundle bundle;
        try {
            bundle = in_path.empty() ? make_bundle(cg)
                                     : pisa::read_bundle_file(in_path);
            if (!in_path.empty() && cg.qk_norm > 0.0) {
                bundle = pisa::qk_normalize(std::move(bundle), cg.qk_norm);
            }
        } catch (const pisa::Error& e) {
            const std::string name = std::string(e.what()).substr(
                0, std::string(e.what()).find(':'));
            for (const std::size_t ci : grp.cell_idx) {
                SweepRow row;
                row.method = cells[ci].variant;
                row.strategy = cell_rc.strategy;
                row.seed = grp.seed;
                row.seq_len = grp.len;
                row.block_size = cell_rc.block;
                row.sparsity_requested = cells[ci].sparsity;
                row.status = name;
                buffers[ci].push_back(row);
            }
            return;
        }
        std::visit([&](const auto& b) {
            using clock = std::chrono::steady_clock;
            const auto dense = dense_per_head(b, 1);
            for (const std::size_t ci : grp.cell_idx) {
                const Cell& cell = cells[ci];
                RunConfig vrc = cell_rc;
                vrc.variant = cell.variant;
                vrc.sparsity = cell.sparsity;
                try {
                    const auto t0 = clock::now();
                    const auto mx = run_cell(b, vrc, dense);
                    const double wall =
                        std::chrono::duration<double, std::milli>(clock::now() - t0)
                            .count();
                    const auto flops = mx.flops_ratio;
                    for (std::size_t h = 0; h < b.num_heads; ++h) {
                        SweepRow row;
                        row.method = cell.variant;
                        row.strategy = vrc.strategy;
                        row.seed = cell.seed;
                        row.head = h;
                        row.seq_len = b.seq_len;
                        row.block_size = vrc.block;
                        row.sparsity_requested = cell.sparsity;
                        row.has_metrics = true;
                        row.sparsity_realized = mx.sparsity_realized;
                        row.l1_rel = mx.per_head_l1[h];
                        row.l2_rel = mx.l2_rel;
                        row.max_abs = mx.max_abs;
                        row.flops_ratio = flops;
                        row.wall_ms = vrc.deterministic ? 0.0 : wall;
                        buffers[ci].push_back(row);
                    }
                } catch (const pisa::Error& e) {
                    const std::string name = std::string(e.what()).substr(
                        0, std::string(e.what()).find(':'));
                    for (std::size_t h = 0; h < b.num_heads; ++h) {
                        SweepRow row;
                        row.method = cell.variant;
                        row.strategy = vrc.strategy;
                        row.seed = cell.seed;
                        row.head = h;
                        row.seq_len = b.seq_len;
                        row.block_size = vrc.block;
                        row.sparsity_requested = cell.sparsity;
                        row.status = name;
                        buffers[ci].push_back(row);
                    }
                }
            }
        }, bundle);
    });

    std::vector<SweepRow> rows;
    for (auto& buf : buffers) {
        for (auto& r : buf) rows.push_back(std::move(r));
    }
    if (out_path.empty() || out_path == "-") {
        emit_csv(std::cout, rows);
    } else {
        std::ofstream out(out_path);
        if (!out) throw pisa::IoError("cannot open " + out_path + " for writing");
        emit_csv(out, rows);
        if (!out.flush()) throw pisa::IoError("write failed for " + out_path);
    }
    return 0;
}

// ---------------------------------------------------------------- verify

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

template <class T>
double max_rel_linf(const pisa::Matrix<T>& a, const pisa::Matrix<T>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double x = double(a.data[i]), y = double(b.data[i]);
        const double denom = std::max({std::abs(x), std::abs(y), 1e-30});
        worst = std::max(worst, std::abs(x - y) / denom);
    }
    return worst;
}

CheckResult check_oracle_equivalence(std::size_t seeds) {
    double worst32 = 0, worst64 = 0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        for (const std::size_t len : {64u, 256u}) {
            pisa::AttentionConfig cfg;
            cfg.block_size = 16;
            {
                auto b = pisa::gen_gaussian<float>(s, 1, len, 32, 1.0);
                const double sc = cfg.resolved_scale(32);
                auto naive = pisa::dense_naive(b.q_head(0), b.k_head(0), b.v_head(0), sc);
                auto online = pisa::dense_online(b.q_head(0), b.k_head(0), b.v_head(0), cfg);
                worst32 = std::max(worst32, max_rel_linf(online, naive));
            }
            {
                auto b = pisa::gen_gaussian<double>(s, 1, len, 32, 1.0);
                const double sc = cfg.resolved_scale(32);
                auto naive = pisa::dense_naive(b.q_head(0), b.k_head(0), b.v_head(0), sc);
                auto online = pisa::dense_online(b.q_head(0), b.k_head(0), b.v_head(0), cfg);
                worst64 = std::max(worst64, max_rel_linf(online, naive));
            }
        }
    }
    std::ostringstream os;
    os << "rel_linf f32=" << worst32 << " f64=" << worst64;
    return {"oracle_equivalence", worst32 <= 1e-5 && worst64 <= 1e-12, os.str()};
}

CheckResult check_cancellation(std::size_t seeds) {
    double worst = 0;
    pisa::AttentionConfig cfg;
    cfg.block_size = 16;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::gen_clustered<double>(s, 1, 256, 32, 8, 2.0, 0.15);
        auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), 16);
        auto q_bar = pisa::query_block_means(b.q_head(0), 16);
        auto plan = pisa::select_topk_plain(q_bar, stats.k_bar, 4,
                                            cfg.resolved_scale(32));
        worst = std::max(worst, pisa::denominator_cancellation_max_rel(
                                    b.q_head(0), b.k_head(0), plan, stats, cfg));
    }
    return {"cancellation", worst <= 1e-5, "max_rel_change=" + pisa::fmt_double(worst)};
}

// All key blocks constant: the zeroth-order tail is exact and every H_j
// vanishes, so each variant must reproduce dense attention.
CheckResult check_constant_key(std::size_t seeds) {
    double worst = 0;
    pisa::AttentionConfig cfg;
    cfg.block_size = 16;
    const std::size_t L = 256, d = 16, B = 16;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::gen_gaussian<double>(s, 1, L, d, 1.0);
        pisa::Rng rng(s + 7777);
        for (std::size_t j = 0; j < L / B; ++j) {
            for (std::size_t a = 0; a < d; ++a) {
                const double val = rng.gaussian();
                for (std::size_t n = 0; n < B; ++n) b.k[(j * B + n) * d + a] = val;
            }
        }
        auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), B);
        pisa::compute_global_stats(stats);
        auto q_bar = pisa::query_block_means(b.q_head(0), B);
        auto plan = pisa::select_topk_plain(q_bar, stats.k_bar, 4, cfg.resolved_scale(d));
        auto dense = pisa::dense_naive(b.q_head(0), b.k_head(0), b.v_head(0),
                                       cfg.resolved_scale(d));
        for (const auto variant : {pisa::PisaVariant::Zeroth, pisa::PisaVariant::BlockFirst,
                                   pisa::PisaVariant::Hybrid}) {
            auto out = pisa::pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                            plan, stats, variant, cfg);
            worst = std::max(worst,
                             pisa::compare_outputs(out.output, dense).max_abs);
        }
    }
    return {"constant_key_exactness", worst <= 1e-6,
            "max_abs=" + pisa::fmt_double(worst)};
}

CheckResult check_theorem1(std::size_t seeds) {
    std::size_t violations = 0;
    double max_slack = 0;
    pisa::AttentionConfig cfg;
    cfg.block_size = 16;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::qk_normalize(
            pisa::gen_clustered<double>(s, 1, 512, 32, 16, 2.0, 0.15), 1.0);
        auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), 16);
        pisa::compute_global_stats(stats);
        auto q_bar = pisa::query_block_means(b.q_head(0), 16);
        auto kres = pisa::sparsity_to_k(0.875, stats.num_blocks);
        auto plan = pisa::select_topk_plain(q_bar, stats.k_bar, kres.k,
                                            cfg.resolved_scale(32));
        auto rep = pisa::theorem1_check(b.q_head(0), b.k_head(0), b.v_head(0),
                                        plan, stats, cfg);
        violations += rep.violations;
        max_slack = std::max(max_slack, rep.max_slack_ratio);
    }
    std::ostringstream os;
    os << "violations=" << violations << " max_slack_ratio=" << max_slack
       << " seeds=" << seeds;
    return {"theorem1", violations == 0, os.str()};
}

CheckResult check_jensen(std::size_t seeds) {
    std::size_t violations = 0;
    pisa::AttentionConfig cfg;
    cfg.block_size = 16;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::qk_normalize(
            pisa::gen_clustered<double>(s, 1, 512, 32, 16, 2.0, 0.15), 1.0);
        auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), 16);
        auto q_bar = pisa::query_block_means(b.q_head(0), 16);
        auto kres = pisa::sparsity_to_k(0.875, stats.num_blocks);
        auto plan = pisa::select_topk_plain(q_bar, stats.k_bar, kres.k,
                                            cfg.resolved_scale(32));
        violations += pisa::jensen_check(b.q_head(0), b.k_head(0), plan, 16,
                                         cfg.resolved_scale(32));
    }
    return {"jensen", violations == 0,
            "violations=" + std::to_string(violations) + " seeds=" +
                std::to_string(seeds)};
}

CheckResult check_streaming(std::size_t seeds) {
    double worst = 0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::gen_clustered<double>(s, 1, 256, 16, 8, 2.0, 0.15);
        for (const std::size_t c : {std::size_t(1), std::size_t(4), std::size_t(16)}) {
            pisa::AttentionConfig cfg;
            cfg.block_size = 16;
            cfg.group_size = c;
            auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), 16);
            pisa::compute_global_stats(stats, pisa::SpectralMethod::Exact, false);
            auto q_bar = pisa::query_block_means(b.q_head(0), 16);
            auto plan = pisa::select_topk_plain(q_bar, stats.k_bar, 4,
                                                cfg.resolved_scale(16));
            auto ref = pisa::pisa_reference(b.q_head(0), b.k_head(0), b.v_head(0),
                                            plan, stats, pisa::PisaVariant::Hybrid, cfg);
            auto stream = pisa::pisa_streaming(b.q_head(0), b.k_head(0), b.v_head(0),
                                               plan, stats, cfg);
            worst = std::max(worst, max_rel_linf(stream.output, ref.output));
        }
    }
    return {"streaming_equivalence", worst <= 1e-10,
            "max_rel_linf=" + pisa::fmt_double(worst)};
}

CheckResult check_full_coverage(std::size_t seeds) {
    double worst = 0;
    pisa::AttentionConfig cfg;
    cfg.block_size = 16;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        auto b = pisa::gen_gaussian<double>(s, 1, 128, 16, 1.0);
        auto dense = pisa::dense_naive(b.q_head(0), b.k_head(0), b.v_head(0),
                                       cfg.resolved_scale(16));
        for (const auto variant :
             {pisa::PisaVariant::SparseOnly, pisa::PisaVariant::Zeroth,
              pisa::PisaVariant::BlockFirst, pisa::PisaVariant::Hybrid,
              pisa::PisaVariant::GlobalCentroid}) {
            auto res = pisa::pisa_multihead(b, 0.0, pisa::RouterOptions{}, variant, cfg);
            worst = std::max(worst,
                             pisa::compare_outputs(res.heads[0].output, dense).max_abs);
        }
    }
    return {"full_coverage", worst <= 1e-10, "max_abs=" + pisa::fmt_double(worst)};
}

CheckResult check_router_properties() {
    bool ok = true;
    std::ostringstream os;
    auto b = pisa::gen_clustered<double>(3, 1, 256, 16, 8, 2.0, 0.15);
    auto stats = pisa::compute_block_stats(b.k_head(0), b.v_head(0), 16);
    pisa::compute_global_stats(stats);
    auto q_bar = pisa::query_block_means(b.q_head(0), 16);
    const double scale = 0.25;

    auto base = pisa::select_topk_covariance(q_bar, stats.k_bar, stats.m, 1e-6, 4, scale);
    // Joint (M, eps) scaling leaves the plan unchanged.
    auto m_scaled = stats.m;
    for (double& v : m_scaled) v *= 37.5;
    auto scaled = pisa::select_topk_covariance(q_bar, stats.k_bar, m_scaled,
                                               37.5e-6, 4, scale);
    if (!(scaled.selected == base.selected)) {
        ok = false;
        os << "joint-(M,eps)-scaling changed the plan; ";
    }
    // Tie-break toward the lower block index on all-equal scores.
    pisa::Matrix<double> zq(2, 4), zk(8, 4);
    auto tie = pisa::select_topk_plain(zq, zk, 3, scale);
    for (const auto& sel : tie.selected) {
        if (!(sel == std::vector<std::size_t>{0, 1, 2})) {
            ok = false;
            os << "tie-break mismatch; ";
        }
    }
    // Plain == covariance plan when all M_j are equal.
    std::vector<double> m_const(stats.num_blocks, 2.0);
    auto plain = pisa::select_topk_plain(q_bar, stats.k_bar, 4, scale);
    auto cov_const = pisa::select_topk_covariance(q_bar, stats.k_bar, m_const,
                                                  1e-6, 4, scale);
    if (!(plain.selected == cov_const.selected)) {
        ok = false;
        os << "constant-M covariance plan differs from plain; ";
    }
    if (ok) os << "all router invariants hold";
    return {"router_properties", ok, os.str()};
}

int cmd_verify(const std::string& only, std::size_t seeds) {
    std::vector<CheckResult> results;
    const auto want = [&](const char* name) {
        return only.empty() || only == name;
    };
    if (want("oracle_equivalence")) results.push_back(check_oracle_equivalence(10));
    if (want("full_coverage")) results.push_back(check_full_coverage(5));
    if (want("cancellation")) results.push_back(check_cancellation(20));
    if (want("constant_key_exactness")) results.push_back(check_constant_key(20));
    if (want("theorem1")) results.push_back(check_theorem1(seeds));
    if (want("jensen")) results.push_back(check_jensen(std::min<std::size_t>(seeds, 20)));
    if (want("streaming_equivalence")) results.push_back(check_streaming(10));
    if (want("router_properties")) results.push_back(check_router_properties());
    if (results.empty()) {
        std::cerr << "unknown check: " << only << "\n";
        return 2;
    }
    bool all = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "pass  " : "FAIL  ") << r.name << "  (" << r.detail
                  << ")\n";
        all = all && r.pass;
    }
    std::cout << (all ? "verify: all checks passed\n" : "verify: FAILURES\n");
    return all ? 0 : 1;
}

// ---------------------------------------------------------------- bench

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

int cmd_bench(const GenArgs& g, const RunConfig& rc, std::size_t reps) {
    using clock = std::chrono::steady_clock;
    if (g.len % rc.block != 0) {
        throw pisa::BlockDivisibility("seq_len must be divisible by block size");
    }
    const auto bundle = make_bundle(g);
    return std::visit([&](const auto& b) {
        auto cfg = attention_config(rc);
        cfg.collect_phase_times = true;
        pisa::RouterOptions router;
        router.strategy = parse_strategy(rc.strategy);
        router.epsilon = rc.epsilon;

        std::vector<double> dense_ms, hybrid_ms;
        double prep = 0, sel = 0, exact = 0, approx = 0, norm = 0;
        for (std::size_t rep = 0; rep < reps + 1; ++rep) {
            auto t0 = clock::now();
            for (std::size_t h = 0; h < b.num_heads; ++h) {
                auto o = pisa::dense_online(b.q_head(h), b.k_head(h), b.v_head(h), cfg);
                (void)o;
            }
            const double dms =
                std::chrono::duration<double, std::milli>(clock::now() - t0).count();

            t0 = clock::now();
            auto res = pisa::pisa_multihead(b, rc.sparsity, router,
                                            pisa::PisaVariant::Hybrid, cfg, true);
            const double hms =
                std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            if (rep == 0) continue;  // warmup
            dense_ms.push_back(dms);
            hybrid_ms.push_back(hms);
            prep += res.prepare_ms;
            sel += res.select_ms;
            for (const auto& head : res.heads) {
                exact += head.exact_ms;
                approx += head.approx_ms;
                norm += head.normalize_ms;
            }
        }
        const double dm = median(dense_ms), hm = median(hybrid_ms);
        const double total_phase = prep + sel + exact + approx + norm;
        json j{{"seq_len", g.len},
               {"head_dim", g.dim},
               {"num_heads", g.heads},
               {"block_size", rc.block},
               {"group_size", rc.group},
               {"sparsity", rc.sparsity},
               {"dtype", g.dtype},
               {"accum", rc.accum},
               {"reps", reps},
               {"dense_online_ms", dm},
               {"hybrid_ms", hm},
               {"speedup", dm / hm},
               {"phase_prepare_ms", prep / double(reps)},
               {"phase_select_ms", sel / double(reps)},
               {"phase_exact_ms", exact / double(reps)},
               {"phase_approx_ms", approx / double(reps)},
               {"phase_normalize_ms", norm / double(reps)},
               {"approx_share_pct",
                total_phase > 0 ? 100.0 * approx / total_phase : 0.0}};
        std::cout << j.dump() << "\n";
        return 0;
    }, bundle);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Piecewise sparse attention workbench"};
    app.require_subcommand(1);

    GenArgs gen_args;
    std::size_t gen_block = 64;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "Generate a PQKV tensor file");
    add_gen_options(gen, gen_args);
    gen->add_option("--block", gen_block, "Block size the data must tile");
    gen->add_option("--out", gen_out, "Output path")->required();
    bool gen_det = false;
    gen->add_flag("--deterministic", gen_det, "No-op; generation is deterministic");

    GenArgs run_gen;
    RunConfig run_rc;
    std::string run_in;
    auto* run = app.add_subcommand("run", "Run one configuration, print JSON metrics");
    run->add_option("--in", run_in, "Input PQKV file (else data is generated)");
    add_gen_options(run, run_gen);
    add_run_options(run, run_rc);

    GenArgs sweep_gen;
    RunConfig sweep_rc;
    std::vector<std::size_t> sweep_lengths{1024};
    std::vector<double> sweep_sparsities{0.875};
    std::vector<std::string> sweep_variants{"sparse_only", "zeroth", "hybrid"};
    std::vector<std::uint64_t> sweep_seeds{0};
    std::string sweep_in, sweep_out = "-";
    auto* sweep = app.add_subcommand("sweep", "Sweep a grid, emit CSV");
    add_gen_options(sweep, sweep_gen, false);
    add_run_options(sweep, sweep_rc, false);
    sweep->add_option("--lengths", sweep_lengths, "Sequence lengths")->delimiter(',');
    sweep->add_option("--sparsities", sweep_sparsities, "Sparsity ratios")->delimiter(',');
    sweep->add_option("--variants", sweep_variants, "Variants")->delimiter(',');
    sweep->add_option("--seeds", sweep_seeds, "Seeds")->delimiter(',');
    sweep->add_option("--in", sweep_in, "Pin one input file instead of generating");
    sweep->add_option("--out", sweep_out, "CSV path ('-' = stdout)");

    std::string verify_only;
    std::size_t verify_seeds = 100;
    auto* verify = app.add_subcommand("verify", "Run the invariant suite");
    verify->add_option("--only", verify_only, "Run a single named check");
    verify->add_option("--seeds", verify_seeds, "Seed count for theorem1/jensen");
    bool verify_det = false;
    verify->add_flag("--deterministic", verify_det, "No-op; checks are deterministic");

    GenArgs bench_gen;
    bench_gen.len = 16384;
    bench_gen.dim = 64;
    RunConfig bench_rc;
    bench_rc.accum = "f32";
    std::size_t bench_reps = 5;
    auto* bench = app.add_subcommand("bench", "Wall-clock phase benchmark");
    add_gen_options(bench, bench_gen);
    add_run_options(bench, bench_rc);
    bench->add_option("--reps", bench_reps, "Timed repetitions (>= 5 recommended)")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen(gen_args, gen_block, gen_out);
        if (run->parsed()) return cmd_run(run_in, run_gen, run_rc);
        if (sweep->parsed()) {
            return cmd_sweep(sweep_gen, sweep_rc, sweep_lengths, sweep_sparsities,
                             sweep_variants, sweep_seeds, sweep_in, sweep_out);
        }
        if (verify->parsed()) return cmd_verify(verify_only, verify_seeds);
        if (bench->parsed()) return cmd_bench(bench_gen, bench_rc, bench_reps);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const pisa::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case pisa::ErrorKind::Validation: return 2;
            case pisa::ErrorKind::Io: return 3;
            case pisa::ErrorKind::Invariant: return 1;
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
