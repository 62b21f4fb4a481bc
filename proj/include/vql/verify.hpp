#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vql/attention.hpp"
#include "vql/cache.hpp"
#include "vql/codebook.hpp"
#include "vql/pipeline.hpp"
#include "vql/reference.hpp"
#include "vql/serialize.hpp"
#include "vql/temporal.hpp"

// Seeded randomized property suites behind the `verify` command. Each suite
// returns a pass/fail verdict plus a counterexample dump on failure; seeds
// change the sampled instances, never the expected outcome.
namespace vql {

struct SuiteResult {
    std::string name;
    bool passed = true;
    std::size_t trials = 0;
    std::string detail;
};

namespace detail {

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

inline double max_row_rel_err(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    std::vector<double> diff(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) diff[j] = a(i, j) - b(i, j);
        const double ref = std::max(l2_norm(a.row(i)), 1e-300);
        worst = std::max(worst, l2_norm(diff) / ref);
    }
    return worst;
}

}  // namespace detail

/// Lemma check: exp(U) W == exp(U W) exactly for one-hot-column W.
inline SuiteResult suite_lemma_one(std::uint64_t seed, std::size_t trials = 2000) {
    SuiteResult res{"lemma1_one_hot_extraction", true, trials, ""};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> md(1, 6), nd(2, 8), ld(1, 12);
        const std::size_t m = md(rng), n = nd(rng), l = ld(rng);
        const Matrix u = detail::random_matrix(rng, m, n, 2.0);
        Matrix w(n, l);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (std::size_t j = 0; j < l; ++j) w(pick(rng), j) = 1.0;
        if (!one_hot_extraction_check(u, w)) {
            res.passed = false;
            std::ostringstream os;
            os << "trial " << t << ": exp(U)W != exp(UW) for m=" << m << " n=" << n << " l=" << l;
            res.detail = os.str();
            return res;
        }
    }
    return res;
}

/// Train/infer equivalence through real cache construction.
inline SuiteResult suite_equivalence(std::uint64_t seed, std::size_t trials = 60) {
    SuiteResult res{"train_infer_equivalence", true, trials, ""};
    std::mt19937_64 rng(seed);
    const std::size_t lengths[] = {10, 100, 1000};
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t l = lengths[t % 3];
        std::uniform_int_distribution<std::size_t> nd(2, 16), dd(4, 16);
        const std::size_t n = nd(rng), d = dd(rng);
        const Matrix q = detail::random_matrix(rng, 2, d);
        const Matrix k = detail::random_matrix(rng, l, d);
        const Matrix v = detail::random_matrix(rng, l, d);
        const Codebook cb = Codebook::from_matrix(detail::random_matrix(rng, n, d));
        const AttentionInputs in = AttentionInputs::make(q, k, v, 4.0);

        const TrainAttentionResult tr = train_attention(in, cb);
        const AssignmentCsc csc = build_assignment_csc(tr.assignment, n);
        const CacheBundle bundle = build_heavy_cache(csc, in.values);
        const Matrix inferred = infer_attention(in.queries, cb, bundle.v_cache, bundle.ones_cache);
        const double err = detail::max_row_rel_err(tr.outputs, inferred);
        if (!(err <= 1e-9)) {
            res.passed = false;
            std::ostringstream os;
            os << "trial " << t << ": rel err " << err << " at L=" << l << " N=" << n << " d=" << d;
            res.detail = os.str();
            return res;
        }
    }
    return res;
}

/// Softmax Lipschitz bound and the L-free output error bound.
inline SuiteResult suite_error_bounds(std::uint64_t seed, std::size_t trials = 200) {
    SuiteResult res{"error_bounds", true, trials, ""};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> ld(1, 400), nd(2, 12), dd(4, 16);
        const std::size_t l = ld(rng), n = nd(rng), d = dd(rng);
        const AttentionInputs in =
            AttentionInputs::make(detail::random_matrix(rng, 3, d), detail::random_matrix(rng, l, d),
                                  detail::random_matrix(rng, l, d), 2.0);
        const Codebook cb = Codebook::from_matrix(detail::random_matrix(rng, n, d));
        try {
            const ErrorBoundReport rep = error_bound_report(in, cb);
            if (rep.measured_output_err > rep.bound || rep.weight_l1_err > rep.logit_inf_err) {
                throw error("bound inequality violated");
            }
        } catch (const error& e) {
            res.passed = false;
            std::ostringstream os;
            os << "trial " << t << " (L=" << l << " N=" << n << " d=" << d << "): " << e.what();
            res.detail = os.str();
            return res;
        }
    }
    return res;
}

/// Argmin assignment against the exhaustive distance table; the assignment
/// routine under test is injectable so suite sensitivity is itself testable.
inline SuiteResult suite_assignment(
    std::uint64_t seed, std::size_t trials = 300,
    const std::function<Assignment(const Matrix&, const Codebook&)>& assign_fn = {}) {
    SuiteResult res{"assignment_argmin", true, trials, ""};
    std::mt19937_64 rng(seed);
    std::function<Assignment(const Matrix&, const Codebook&)> fn = assign_fn;
    if (!fn) fn = [](const Matrix& k, const Codebook& c) { return assign_nearest(k, c); };
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> ld(1, 60), nd(1, 10), dd(1, 8);
        const std::size_t l = ld(rng), n = nd(rng), d = dd(rng);
        Matrix cw = detail::random_matrix(rng, n, d);
        // Duplicate a codeword now and then to exercise the tie rule.
        if (n >= 2 && t % 4 == 0) {
            const auto src = cw.row(0);
            std::copy(src.begin(), src.end(), cw.row(n - 1).begin());
        }
        const Codebook cb = Codebook::from_matrix(std::move(cw));
        Matrix keys = detail::random_matrix(rng, l, d);
        if (t % 4 == 0) {
            // Key exactly on a codeword: distance 0 tie candidate.
            const auto src = cb.codewords().row(n - 1);
            std::copy(src.begin(), src.end(), keys.row(0).begin());
        }
        const Assignment got = fn(keys, cb);
        const Assignment want = ref::brute_force_assign(keys, cb.codewords());
        if (got.indices != want.indices) {
            res.passed = false;
            for (std::size_t i = 0; i < l; ++i) {
                if (got.indices[i] != want.indices[i]) {
                    std::ostringstream os;
                    os << "trial " << t << ": key row " << i << " assigned to " << got.indices[i]
                       << ", brute force says " << want.indices[i] << " (L=" << l << " N=" << n
                       << " d=" << d << "); key = [";
                    for (double x : keys.row(i)) os << x << " ";
                    os << "]";
                    res.detail = os.str();
                    break;
                }
            }
            return res;
        }
    }
    return res;
}

/// Conservation (sum of ones == L exactly) and bundle linearity.
inline SuiteResult suite_conservation(std::uint64_t seed, std::size_t trials = 200) {
    SuiteResult res{"cache_conservation", true, trials, ""};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> ld(1, 500), nd(1, 12), dd(1, 8);
        const std::size_t l = ld(rng), n = nd(rng), d = dd(rng);
        Assignment asg;
        std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
        for (std::size_t i = 0; i < l; ++i) asg.indices.push_back(pick(rng));
        const Matrix values = detail::random_matrix(rng, l, d);
        const CacheBundle b = build_heavy_cache(build_assignment_csc(asg, n), values);
        double ones = 0.0;
        for (std::size_t j = 0; j < n; ++j) ones += b.ones_cache(j, 0);
        if (ones != static_cast<double>(l)) {
            res.passed = false;
            res.detail = "trial " + std::to_string(t) + ": sum(ones) != L";
            return res;
        }
    }
    return res;
}

/// Serialization round-trips are byte-identical; header corruption and
/// stale codebooks are rejected with their dedicated error codes.
inline SuiteResult suite_serialization(std::uint64_t seed, std::size_t trials = 50,
                                       const std::string& tmp_dir = "/tmp") {
    SuiteResult res{"serialization_round_trip", true, trials, ""};
    namespace fs = std::filesystem;
    std::mt19937_64 rng(seed);
    const std::string path =
        (fs::path(tmp_dir) / ("vql_verify_" + std::to_string(seed) + ".vqlc")).string();
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> ld(1, 64), nd(1, 8), dd(1, 6);
        const std::size_t l = ld(rng), n = nd(rng), d = dd(rng);
        Assignment asg;
        std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
        for (std::size_t i = 0; i < l; ++i) asg.indices.push_back(pick(rng));
        const Codebook cb = Codebook::from_matrix(detail::random_matrix(rng, n, d));
        CacheBundle b = build_heavy_cache(build_assignment_csc(asg, n),
                                          detail::random_matrix(rng, l, d), {}, nullptr,
                                          codebook_checksum(cb));
        serialize_cache(b, path, t);
        const auto original = io::read_file(path);
        const CacheRecord rec = deserialize_cache(path, &cb);
        serialize_cache(rec.bundle, path, rec.user_id);
        const auto rewritten = io::read_file(path);
        if (original != rewritten) {
            res.passed = false;
            res.detail = "trial " + std::to_string(t) + ": round trip not byte-identical";
            break;
        }

        auto expect_code = [&](std::vector<std::byte> bytes, io_code want, const char* label) {
            io::write_file(path, bytes);
            try {
                const Codebook other = Codebook::from_matrix(detail::random_matrix(rng, n, d));
                (void)deserialize_cache(path, want == io_code::checksum_mismatch ? &other : &cb);
                return std::string(label) + ": expected rejection";
            } catch (const io_error& e) {
                if (e.code != want) {
                    return std::string(label) + ": wrong code " + io_code_name(e.code);
                }
                return std::string();
            }
        };
        auto corrupted = original;
        corrupted[0] = std::byte('X');
        std::string msg = expect_code(corrupted, io_code::bad_magic, "magic");
        if (msg.empty()) {
            corrupted = original;
            corrupted[4] = std::byte(0x7f);
            msg = expect_code(corrupted, io_code::bad_version, "version");
        }
        if (msg.empty()) {
            corrupted = original;
            corrupted.resize(corrupted.size() - 3);
            msg = expect_code(corrupted, io_code::truncated, "truncated");
        }
        if (msg.empty()) {
            msg = expect_code(original, io_code::checksum_mismatch, "stale");
        }
        if (!msg.empty()) {
            res.passed = false;
            res.detail = "trial " + std::to_string(t) + ": " + msg;
            break;
        }
    }
    std::error_code ec;
    fs::remove(path, ec);
    return res;
}

/// Cached temporal inference vs the per-event kernel oracle, plus rebasing
/// invariance.
inline SuiteResult suite_temporal(std::uint64_t seed, std::size_t trials = 100) {
    SuiteResult res{"temporal_kernel", true, trials, ""};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        std::uniform_int_distribution<std::size_t> ld(1, 800), nd(2, 12);
        const std::size_t l = ld(rng), n = nd(rng), d = 8;
        const Codebook cb = Codebook::from_matrix(detail::random_matrix(rng, n, d));
        const Matrix values = detail::random_matrix(rng, l, d);
        const Matrix keys = detail::random_matrix(rng, l, d);
        const Assignment asg = assign_nearest(keys, cb);
        const Matrix khat = quantize(keys, cb, asg);

        std::vector<double> ts(l);
        std::uniform_real_distribution<double> gap(0.0, 3.0 * 86400.0);
        double acc = 0.0;
        for (std::size_t i = l; i-- > 0;) {
            ts[i] = -acc;
            acc += gap(rng);
        }
        const double t_q = gap(rng);

        TemporalConfig tc = TemporalConfig::uniform(1, d);
        tc.lambdas = {1.0 / 86400.0};
        const AssignmentCsc csc = build_assignment_csc(asg, n);
        const CacheBundle bundle = build_heavy_cache(csc, values, ts, &tc);

        RowVector q(d);
        std::normal_distribution<double> g(0.0, 1.0);
        for (std::size_t c = 0; c < d; ++c) q[c] = g(rng) / std::sqrt(static_cast<double>(d));

        const RowVector cached = temporal_infer(q, t_q, cb, bundle.scales, tc);
        const std::vector<double> theta = gate_weights(q, tc);
        const RowVector direct =
            ref::per_event_temporal(q, t_q, khat, values, ts, theta, tc.lambdas);
        std::vector<double> diff(d);
        for (std::size_t c = 0; c < d; ++c) diff[c] = cached[c] - direct[c];
        const double err = l2_norm(diff) / std::max(l2_norm(direct.span()), 1e-300);
        if (!(err <= 1e-9)) {
            res.passed = false;
            res.detail = "trial " + std::to_string(t) + ": per-event mismatch " +
                         std::to_string(err) + " at L=" + std::to_string(l);
            return res;
        }
    }
    return res;
}

/// Light, medium and heavy produce identical request scores.
inline SuiteResult suite_tiers(std::uint64_t seed, std::size_t trials = 20) {
    SuiteResult res{"caching_tiers", true, trials, ""};
    std::mt19937_64 rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        SyntheticConfig scfg;
        scfg.n_users = 2;
        scfg.seq_len.avg = 120;
        scfg.n_clusters = 4;
        scfg.n_items = 40;
        scfg.feat_dim = 8;
        scfg.samples_per_user = 2;
        scfg.seed = seed * 1000 + t;
        const SyntheticDataset ds = generate_synthetic(scfg);

        TrainConfig tcfg;
        tcfg.gvq = GvqConfig::make(2, 2, 8);
        tcfg.codebook_size = 6;
        tcfg.seed = scfg.seed;
        ModelParams model = ModelParams::init(scfg.feat_dim, tcfg);
        std::vector<std::size_t> all(ds.samples.size());
        std::iota(all.begin(), all.end(), 0);
        init_codebooks(ds, model, tcfg, all);

        const EventSequence& seq = ds.sequences[0];
        const auto heavy = build_group_bundles(model, tcfg.value_norm_bound, seq);
        const ProjectedSequence ps = project_sequence(model, tcfg.value_norm_bound, seq);
        const auto asg = assign_groups(model, ps.keys);
        std::vector<AssignmentCsc> cscs;
        for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
            cscs.push_back(build_assignment_csc(asg[g], model.codebooks[g].size()));
        }
        std::vector<LightCache> light;
        for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
            light.push_back(build_light_cache(
                ds.items.ids,
                group_slice(matmul(ds.items.key_feats, model.w_k), g, model.gvq.group_dim()),
                model.codebooks[g]));
        }

        Matrix cands(4, scfg.feat_dim);
        for (std::size_t b = 0; b < 4; ++b) {
            const auto src = ds.items.key_feats.row((t + b) % scfg.n_items);
            std::copy(src.begin(), src.end(), cands.row(b).begin());
        }
        std::vector<std::vector<double>> scores;
        for (CacheTier tier : {CacheTier::heavy, CacheTier::medium, CacheTier::light}) {
            const auto bundles =
                bundles_for_tier(model, tcfg.value_norm_bound, tier, seq, &heavy, &cscs, &light);
            scores.push_back(score_with_bundles(model, bundles, cands));
        }
        for (std::size_t b = 0; b < 4; ++b) {
            const double rel = std::max(std::abs(scores[1][b] - scores[0][b]),
                                        std::abs(scores[2][b] - scores[0][b])) /
                               std::max(std::abs(scores[0][b]), 1e-300);
            if (!(rel <= 1e-9)) {
                res.passed = false;
                res.detail = "trial " + std::to_string(t) + ": tier scores diverge";
                return res;
            }
        }
    }
    return res;
}

inline std::vector<SuiteResult> run_all_suites(std::uint64_t seed, const std::string& tmp_dir = "/tmp") {
    return {
        suite_lemma_one(seed),     suite_equivalence(seed),  suite_error_bounds(seed),
        suite_assignment(seed),    suite_conservation(seed), suite_serialization(seed, 50, tmp_dir),
        suite_temporal(seed),      suite_tiers(seed),
    };
}

}  // namespace vql
