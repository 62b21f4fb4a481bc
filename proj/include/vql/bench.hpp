#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "vql/attention.hpp"
#include "vql/dataset.hpp"
#include "vql/pipeline.hpp"
#include "vql/serialize.hpp"
#include "vql/trainer.hpp"

// Latency benchmarking: monotonic-clock timings around the scoring call
// only, two discarded warm-ups, mean/stddev/median over the configured
// repetitions. Cache construction is never inside the timed region.
namespace vql::bench {

struct LatencyStats {
    double mean_us = 0.0;
    double stddev_us = 0.0;
    double median_us = 0.0;
    std::size_t reps = 0;
};

inline LatencyStats summarize(std::vector<double> samples_us) {
    LatencyStats s;
    s.reps = samples_us.size();
    if (samples_us.empty()) return s;
    double sum = 0.0;
    for (double v : samples_us) sum += v;
    s.mean_us = sum / static_cast<double>(samples_us.size());
    double var = 0.0;
    for (double v : samples_us) var += (v - s.mean_us) * (v - s.mean_us);
    s.stddev_us = samples_us.size() > 1
                      ? std::sqrt(var / static_cast<double>(samples_us.size() - 1))
                      : 0.0;
    std::sort(samples_us.begin(), samples_us.end());
    s.median_us = samples_us[samples_us.size() / 2];
    return s;
}

template <class F>
inline double time_once_us(F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::micro>(t1 - t0).count();
}

template <class F>
inline LatencyStats measure_latency(F&& fn, std::size_t reps, std::size_t warmups = 2) {
    for (std::size_t i = 0; i < warmups; ++i) fn();
    std::vector<double> samples(reps);
    for (std::size_t i = 0; i < reps; ++i) samples[i] = time_once_us(fn);
    return summarize(std::move(samples));
}

struct BenchRow {
    std::string strategy;  // oracle | vql
    std::string tier;      // -, light, medium, heavy
    std::size_t l = 0;
    std::size_t b = 0;
    std::size_t threads = 1;
    LatencyStats stats;
    double per_candidate_us = 0.0;
    std::size_t cache_bytes = 0;
    double max_output_err = 0.0;
    double bound = 0.0;
};

struct TopkRow {
    std::size_t l = 0;
    std::size_t k = 0;
    std::size_t queries = 0;
    double mean_discarded_mass = 0.0;
};

struct BenchConfig {
    std::vector<std::size_t> lengths = {1000, 10000, 100000};
    std::vector<std::size_t> candidates = {50, 100, 200, 500, 1000};  // Fig.-6 grid
    std::vector<CacheTier> tiers = {CacheTier::heavy};
    bool include_oracle = true;
    std::size_t reps = 5;
    std::size_t threads = 1;
    std::size_t d = 64;
    std::size_t d_in = 64;
    std::size_t codebook_size = 100;
    std::size_t topk_k = 100;
    std::vector<std::size_t> topk_lengths = {100, 200, 500, 1000, 2000, 5000};
    std::size_t topk_queries = 200;
    std::uint64_t seed = 1;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<TopkRow> topk;
};

/// Random event history with item-determined keys, suitable for all tiers.
inline EventSequence make_bench_sequence(std::size_t l, std::size_t d_in, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    EventSequence seq;
    seq.item_ids.resize(l);
    seq.key_feats = Matrix(l, d_in);
    seq.value_feats = Matrix(l, d_in);
    seq.timestamps.resize(l);
    std::int64_t t = 1600000000;
    for (std::size_t i = 0; i < l; ++i) {
        seq.item_ids[i] = i;
        for (std::size_t c = 0; c < d_in; ++c) {
            seq.key_feats(i, c) = g(rng);
            seq.value_feats(i, c) = g(rng);
        }
        t += 60;
        seq.timestamps[i] = t;
    }
    return seq;
}

/// Mean softmax mass a top-k truncation throws away, over random queries.
inline double topk_discarded_mass(std::size_t l, std::size_t k, std::size_t queries, std::size_t d,
                                  std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix keys(l, d);
    for (std::size_t i = 0; i < keys.size(); ++i) keys.data()[i] = g(rng);
    std::vector<double> logits(l), w(l), q(d);
    double total_discarded = 0.0;
    for (std::size_t qi = 0; qi < queries; ++qi) {
        for (double& x : q) x = g(rng) * scale;
        double shift = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < l; ++i) {
            logits[i] = dot(std::span<const double>(q), keys.row(i));
            shift = std::max(shift, logits[i]);
        }
        double den = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            w[i] = std::exp(logits[i] - shift);
            den += w[i];
        }
        if (k >= l) continue;  // nothing discarded
        std::nth_element(w.begin(), w.begin() + (l - k), w.end());
        double kept = 0.0;
        for (std::size_t i = l - k; i < l; ++i) kept += w[i];
        total_discarded += 1.0 - kept / den;
    }
    return total_discarded / static_cast<double>(queries);
}

inline std::size_t serialized_cache_bytes(const ModelParams& model, CacheTier tier,
                                          const EventSequence& seq,
                                          const std::vector<CacheBundle>& heavy,
                                          const std::vector<AssignmentCsc>& cscs,
                                          const std::vector<LightCache>& light) {
    io::ByteWriter w;
    io::write_file_header(w);
    switch (tier) {
        case CacheTier::heavy:
            for (const CacheBundle& b : heavy) io::append_record(w, b, 0);
            break;
        case CacheTier::medium:
            for (std::size_t g = 0; g < cscs.size(); ++g) {
                io::append_record(w, cscs[g], 0, g, codebook_checksum(model.codebooks[g]));
            }
            break;
        case CacheTier::light:
            for (std::size_t g = 0; g < light.size(); ++g) {
                io::append_record(w, light[g], g, codebook_checksum(model.codebooks[g]));
            }
            break;
    }
    (void)seq;
    return w.buf.size();
}

/// Worst-case measured output error and Eq.-style bound for a probe of the
/// candidate batch (first few queries; the full batch would swamp the
/// benchmark at L = 100k without changing the verdict).
inline std::pair<double, double> probe_error(const ModelParams& model, double bound_c,
                                             const EventSequence& seq, const Matrix& cands) {
    const std::size_t probe = std::min<std::size_t>(cands.rows(), 8);
    const ProjectedSequence ps = project_sequence(model, bound_c, seq);
    const std::size_t dg = model.gvq.group_dim();
    const double qscale = 1.0 / std::sqrt(static_cast<double>(dg));
    const Matrix q_raw = matmul(cands, model.w_q);
    double worst_err = 0.0, worst_bound = 0.0;
    for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
        // Use head 0 of each group's span for the probe.
        std::size_t head = 0;
        for (std::size_t h = 0; h < model.gvq.num_heads; ++h) {
            if (model.gvq.group_of(h) == g) {
                head = h;
                break;
            }
        }
        Matrix q(probe, dg);
        for (std::size_t b = 0; b < probe; ++b) {
            for (std::size_t c = 0; c < dg; ++c) q(b, c) = q_raw(b, head * dg + c) * qscale;
        }
        AttentionInputs in;
        in.queries = std::move(q);
        in.keys = group_slice(ps.keys, g, dg);
        in.values = group_slice(ps.values, g, dg);
        in.value_norm_bound = bound_c;
        const ErrorBoundReport rep = error_bound_report(in, model.codebooks[g]);
        worst_err = std::max(worst_err, rep.measured_output_err);
        worst_bound = std::max(worst_bound, rep.bound);
    }
    return {worst_err, worst_bound};
}

inline BenchReport run_bench(const BenchConfig& cfg) {
    if (cfg.reps == 0) throw param_error("bench: need at least one repetition");
    if (cfg.d == 0 || cfg.d_in == 0 || cfg.codebook_size == 0) {
        throw param_error("bench: dims and codebook size must be positive");
    }
    BenchReport report;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> g(0.0, 1.0);

    TrainConfig tcfg;
    tcfg.gvq = GvqConfig::make(1, 1, cfg.d);
    tcfg.codebook_size = cfg.codebook_size;
    tcfg.seed = cfg.seed;
    ModelParams model = ModelParams::init(cfg.d_in, tcfg);
    for (std::size_t c = 0; c < model.head_w.size(); ++c) model.head_w[c] = 0.05 * g(rng);

    // Seed codebooks from a key sample so quantization is meaningful.
    {
        const EventSequence warm = make_bench_sequence(
            std::max<std::size_t>(4 * cfg.codebook_size, 512), cfg.d_in, cfg.seed + 99);
        const Matrix keys = matmul(warm.key_feats, model.w_k);
        model.codebooks[0] = Codebook::kmeanspp(keys, cfg.codebook_size, cfg.seed);
        model.codebooks_ready = true;
    }

    const std::size_t max_b =
        *std::max_element(cfg.candidates.begin(), cfg.candidates.end());
    Matrix all_cands(max_b, cfg.d_in);
    for (std::size_t i = 0; i < all_cands.size(); ++i) all_cands.data()[i] = g(rng);

    for (std::size_t l : cfg.lengths) {
        const EventSequence seq = make_bench_sequence(l, cfg.d_in, cfg.seed + l);
        const auto heavy = build_group_bundles(model, tcfg.value_norm_bound, seq, false);
        const ProjectedSequence ps = project_sequence(model, tcfg.value_norm_bound, seq);
        const auto asg = assign_groups(model, ps.keys);
        std::vector<AssignmentCsc> cscs;
        for (std::size_t gi = 0; gi < model.gvq.num_groups; ++gi) {
            cscs.push_back(build_assignment_csc(asg[gi], model.codebooks[gi].size()));
        }
        std::vector<LightCache> light;
        for (std::size_t gi = 0; gi < model.gvq.num_groups; ++gi) {
            light.push_back(build_light_cache(
                seq.item_ids, group_slice(matmul(seq.key_feats, model.w_k), gi, cfg.d),
                model.codebooks[gi]));
        }

        for (std::size_t b : cfg.candidates) {
            Matrix cands(b, cfg.d_in);
            std::copy(all_cands.data(), all_cands.data() + b * cfg.d_in, cands.data());
            const auto [err, bound] = probe_error(model, tcfg.value_norm_bound, seq, cands);

            if (cfg.include_oracle) {
                BenchRow row;
                row.strategy = "oracle";
                row.tier = "-";
                row.l = l;
                row.b = b;
                row.threads = 1;
                row.stats = measure_latency(
                    [&] { (void)score_oracle(model, tcfg.value_norm_bound, seq, cands); },
                    cfg.reps);
                row.per_candidate_us = row.stats.mean_us / static_cast<double>(b);
                report.rows.push_back(row);
            }
            for (CacheTier tier : cfg.tiers) {
                BenchRow row;
                row.strategy = "vql";
                row.tier = tier_name(tier);
                row.l = l;
                row.b = b;
                row.threads = cfg.threads;
                row.cache_bytes =
                    serialized_cache_bytes(model, tier, seq, heavy, cscs, light);
                row.max_output_err = err;
                row.bound = bound;
                // Heavy scores straight off the prebuilt bundles; the other
                // tiers pay their per-request aggregation inside the timer.
                auto score_once = [&] {
                    if (tier == CacheTier::heavy) {
                        (void)score_with_bundles(model, heavy, cands);
                    } else {
                        const auto bundles = bundles_for_tier(model, tcfg.value_norm_bound, tier,
                                                              seq, &heavy, &cscs, &light);
                        (void)score_with_bundles(model, bundles, cands);
                    }
                };
                if (cfg.threads <= 1) {
                    row.stats = measure_latency(score_once, cfg.reps);
                } else {
                    // Throughput mode: independent requests across threads over
                    // immutable caches; per-call latency = wall / calls.
                    score_once();
                    score_once();
                    const auto t0 = std::chrono::steady_clock::now();
                    std::vector<std::thread> pool;
                    const std::size_t per_thread =
                        (cfg.reps + cfg.threads - 1) / cfg.threads;
                    for (std::size_t tid = 0; tid < cfg.threads; ++tid) {
                        pool.emplace_back([&, tid] {
                            for (std::size_t i = 0; i < per_thread; ++i) score_once();
                        });
                    }
                    for (auto& th : pool) th.join();
                    const auto t1 = std::chrono::steady_clock::now();
                    const double total_us =
                        std::chrono::duration<double, std::micro>(t1 - t0).count();
                    row.stats.reps = per_thread * cfg.threads;
                    row.stats.mean_us = total_us / static_cast<double>(row.stats.reps);
                    row.stats.median_us = row.stats.mean_us;
                }
                row.per_candidate_us = row.stats.mean_us / static_cast<double>(b);
                report.rows.push_back(row);
            }
        }
    }

    for (std::size_t l : cfg.topk_lengths) {
        TopkRow row;
        row.l = l;
        row.k = cfg.topk_k;
        row.queries = cfg.topk_queries;
        row.mean_discarded_mass =
            topk_discarded_mass(l, cfg.topk_k, cfg.topk_queries, cfg.d, cfg.seed + 7 * l);
        report.topk.push_back(row);
    }
    return report;
}

/// Fixed column order; latency in microseconds, cache sizes in bytes.
inline void write_bench_csv(const BenchReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error(io_code::malformed, "cannot open " + path);
    f << "strategy,tier,L,B,threads,reps,mean_us,stddev_us,median_us,per_candidate_us,"
         "cache_bytes,max_output_err,bound\n";
    for (const BenchRow& r : report.rows) {
        f << r.strategy << ',' << r.tier << ',' << r.l << ',' << r.b << ',' << r.threads << ','
          << r.stats.reps << ',' << r.stats.mean_us << ',' << r.stats.stddev_us << ','
          << r.stats.median_us << ',' << r.per_candidate_us << ',' << r.cache_bytes << ','
          << r.max_output_err << ',' << r.bound << '\n';
    }
}

inline void write_topk_csv(const BenchReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error(io_code::malformed, "cannot open " + path);
    f << "L,k,queries,mean_discarded_mass\n";
    for (const TopkRow& r : report.topk) {
        f << r.l << ',' << r.k << ',' << r.queries << ',' << r.mean_discarded_mass << '\n';
    }
}

}  // namespace vql::bench
