// vql: data generation, training, cache building, inference, verification
// and latency benchmarking for key-only vector-quantized attention.
//
// Exit codes: 0 ok, 1 unexpected error, 2 missing input / usage error,
// 3 malformed or corrupt file, 4 stale cache checksum, 5 verification
// failure, 6 training divergence.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vql/bench.hpp"
#include "vql/dataset_io.hpp"
#include "vql/model_io.hpp"
#include "vql/pipeline.hpp"
#include "vql/serialize.hpp"
#include "vql/trainer.hpp"
#include "vql/verify.hpp"

namespace fs = std::filesystem;
using namespace vql;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitMissingInput = 2;
constexpr int kExitFormat = 3;
constexpr int kExitStaleCache = 4;
constexpr int kExitVerifyFailed = 5;
constexpr int kExitDiverged = 6;

void require_exists(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw std::invalid_argument(std::string("missing ") + what + ": " + path);
    }
}

template <class T>
void print_kv(const char* key, const T& value) {
    std::cout << "  " << key << " = " << value << "\n";
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

SyntheticDataset load_dataset_checked(const std::string& dir) {
    require_exists(dir, "dataset directory");
    require_exists(dir + "/meta.json", "dataset meta");
    return load_dataset(dir);
}

// Validates each record against the codebook of its own group.
void check_record_freshness(const CacheRecord& rec, const ModelParams& model) {
    if (rec.group_id >= model.codebooks.size()) {
        throw io_error(io_code::bad_record_type, "record group id out of range");
    }
    if (rec.stored_checksum != codebook_checksum(model.codebooks[rec.group_id])) {
        throw io_error(io_code::checksum_mismatch,
                       "cache was built against a different codebook (rebuild with build-cache)");
    }
}

struct GenOptions {
    std::string out;
    SyntheticConfig cfg;
    bool binary = false;
};

int cmd_gen(const GenOptions& opt) {
    std::cout << "gen config:\n";
    print_kv("out", opt.out);
    print_kv("seed", opt.cfg.seed);
    print_kv("users", opt.cfg.n_users);
    print_kv("avg_len", opt.cfg.seq_len.avg);
    print_kv("clusters", opt.cfg.n_clusters);
    print_kv("items", opt.cfg.n_items);
    print_kv("noise", opt.cfg.noise);
    print_kv("samples_per_user", opt.cfg.samples_per_user);
    print_kv("d_in", opt.cfg.feat_dim);
    print_kv("binary_events", opt.binary);
    const SyntheticDataset ds = generate_synthetic(opt.cfg);
    write_dataset(ds, opt.out, opt.binary);
    std::size_t events = 0;
    for (const auto& s : ds.sequences) events += s.length();
    std::cout << "wrote " << ds.sequences.size() << " users, " << events << " events, "
              << ds.samples.size() << " samples to " << opt.out << "\n";
    return kExitOk;
}

struct TrainOptions {
    std::string dataset, out, metrics_out;
    TrainConfig cfg;
    std::size_t d = 16;
    std::size_t groups = 1, heads = 1;
};

int cmd_train(const TrainOptions& opt) {
    const SyntheticDataset ds = load_dataset_checked(opt.dataset);
    TrainConfig cfg = opt.cfg;
    cfg.gvq = GvqConfig::make(opt.heads, opt.groups, opt.d);
    cfg.validate();

    std::cout << "train config:\n";
    print_kv("dataset", opt.dataset);
    print_kv("seed", cfg.seed);
    print_kv("d", opt.d);
    print_kv("codebook_size", cfg.codebook_size);
    print_kv("groups", opt.groups);
    print_kv("heads", opt.heads);
    print_kv("scales", cfg.temporal_scales);
    print_kv("alpha", cfg.alpha);
    print_kv("beta", cfg.beta);
    print_kv("lr", cfg.lr);
    print_kv("codebook_lr", cfg.codebook_lr);
    print_kv("epochs", cfg.epochs);
    print_kv("batch_size", cfg.batch_size);
    print_kv("value_norm_bound", cfg.value_norm_bound);

    ModelParams model = ModelParams::init(ds.feat_dim, cfg);
    std::ofstream metrics;
    if (!opt.metrics_out.empty()) {
        metrics.open(opt.metrics_out, std::ios::trunc);
        metrics << "epoch,rec_loss,joint_loss,vq_loss,max_key_err,auc\n";
    }
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const EpochMetrics m = train_epoch(ds, model, cfg, e);
        double vq_total = 0.0;
        for (const auto& t : m.vq) vq_total += t.total();
        std::cout << "epoch " << e << ": rec=" << m.rec << " joint=" << m.joint
                  << " vq=" << vq_total << " max_key_err=" << m.max_key_err << " auc=" << m.auc
                  << "\n";
        if (metrics.is_open()) {
            metrics << e << ',' << m.rec << ',' << m.joint << ',' << vq_total << ','
                    << m.max_key_err << ',' << m.auc << "\n";
        }
    }
    save_model(model, cfg.value_norm_bound, opt.out);
    std::cout << "model saved to " << opt.out << "\n";
    return kExitOk;
}

struct BuildCacheOptions {
    std::string dataset, model, out, tier = "heavy";
};

int cmd_build_cache(const BuildCacheOptions& opt) {
    const SyntheticDataset ds = load_dataset_checked(opt.dataset);
    require_exists(opt.model, "model file");
    const LoadedModel lm = load_model(opt.model);
    const CacheTier tier = tier_from_name(opt.tier);
    const ModelParams& model = lm.params;

    std::cout << "build-cache config:\n";
    print_kv("dataset", opt.dataset);
    print_kv("model", opt.model);
    print_kv("tier", opt.tier);
    print_kv("out", opt.out);

    const auto t0 = std::chrono::steady_clock::now();
    io::ByteWriter w;
    io::write_file_header(w);
    const std::size_t dg = model.gvq.group_dim();
    switch (tier) {
        case CacheTier::heavy: {
            for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
                const auto bundles =
                    build_group_bundles(model, lm.value_norm_bound, ds.sequences[u]);
                for (const CacheBundle& b : bundles) io::append_record(w, b, u);
            }
            break;
        }
        case CacheTier::medium: {
            for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
                const ProjectedSequence ps =
                    project_sequence(model, lm.value_norm_bound, ds.sequences[u]);
                const auto asg = assign_groups(model, ps.keys);
                for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
                    const AssignmentCsc csc =
                        build_assignment_csc(asg[g], model.codebooks[g].size());
                    io::append_record(w, csc, u, g, codebook_checksum(model.codebooks[g]));
                }
            }
            break;
        }
        case CacheTier::light: {
            const Matrix item_keys = matmul(ds.items.key_feats, model.w_k);
            for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
                const LightCache lc = build_light_cache(
                    ds.items.ids, group_slice(item_keys, g, dg), model.codebooks[g]);
                io::append_record(w, lc, g, codebook_checksum(model.codebooks[g]));
            }
            break;
        }
    }
    io::write_file(opt.out, w.buf);
    const auto t1 = std::chrono::steady_clock::now();
    std::cout << "cache built offline in "
              << std::chrono::duration<double, std::milli>(t1 - t0).count() << " ms, "
              << w.buf.size() << " bytes, tier " << opt.tier << "\n";
    return kExitOk;
}

struct InferOptions {
    std::string dataset, model, cache, out, tier = "heavy";
    std::size_t user = 0;
    std::size_t candidates = 50;
    std::size_t reps = 1;
};

int cmd_infer(const InferOptions& opt) {
    const SyntheticDataset ds = load_dataset_checked(opt.dataset);
    require_exists(opt.model, "model file");
    require_exists(opt.cache, "cache file");
    const LoadedModel lm = load_model(opt.model);
    const ModelParams& model = lm.params;
    const CacheTier tier = tier_from_name(opt.tier);
    if (opt.user >= ds.sequences.size()) {
        throw std::invalid_argument("user index out of range");
    }
    const EventSequence& seq = ds.sequences[opt.user];

    std::cout << "infer config:\n";
    print_kv("tier", opt.tier);
    print_kv("user", opt.user);
    print_kv("candidates", opt.candidates);
    print_kv("reps", opt.reps);

    // Candidate items: the most recent B items of the user's own history
    // (mirrors the offline-evaluation convention for candidate scoring).
    const std::size_t b_count = std::min(opt.candidates, seq.length());
    Matrix cands(b_count, ds.feat_dim);
    std::vector<std::uint64_t> cand_ids(b_count);
    for (std::size_t b = 0; b < b_count; ++b) {
        const std::uint64_t id = seq.item_ids[seq.length() - b_count + b];
        cand_ids[b] = id;
        const auto feats = ds.items.key_feats.row(ds.items.row_of(id));
        std::copy(feats.begin(), feats.end(), cands.row(b).begin());
    }

    // Load the tier's records for this user and check freshness per group.
    std::vector<CacheBundle> heavy(model.gvq.num_groups);
    std::vector<AssignmentCsc> cscs(model.gvq.num_groups);
    std::vector<LightCache> light(model.gvq.num_groups);
    std::size_t found = 0;
    for (CacheRecord& rec : read_cache_records(opt.cache)) {
        check_record_freshness(rec, model);
        if (rec.kind == record_kind::heavy_bundle && tier == CacheTier::heavy &&
            rec.user_id == opt.user) {
            heavy[rec.group_id] = std::move(rec.bundle);
            ++found;
        } else if (rec.kind == record_kind::csc && tier == CacheTier::medium &&
                   rec.user_id == opt.user) {
            cscs[rec.group_id] = std::move(rec.csc);
            ++found;
        } else if (rec.kind == record_kind::light && tier == CacheTier::light) {
            light[rec.group_id] = std::move(rec.light);
            ++found;
        }
    }
    if (found < model.gvq.num_groups) {
        throw io_error(io_code::malformed,
                       "cache file holds no " + std::string(tier_name(tier)) +
                           " records for user " + std::to_string(opt.user));
    }

    double origin = 0.0;
    if (!model.lambdas.empty()) (void)rebase_timestamps(seq, &origin);
    const double t_q = static_cast<double>(seq.timestamps.back());

    std::vector<double> scores;
    auto score_once = [&] {
        const auto bundles =
            bundles_for_tier(model, lm.value_norm_bound, tier, seq, &heavy, &cscs, &light);
        scores = score_with_bundles(model, bundles, cands, t_q, origin);
    };
    score_once();  // warm
    double total_us = 0.0;
    for (std::size_t r = 0; r < opt.reps; ++r) total_us += bench::time_once_us(score_once);

    std::ofstream f(opt.out, std::ios::trunc);
    f << "item_id,score\n";
    char buf[64];
    for (std::size_t b = 0; b < b_count; ++b) {
        std::snprintf(buf, sizeof(buf), "%.17g", scores[b]);
        f << cand_ids[b] << ',' << buf << '\n';
    }
    std::cout << "scored " << b_count << " candidates in " << total_us / double(opt.reps)
              << " us/call (" << total_us / double(opt.reps) / double(b_count)
              << " us/candidate), scores written to " << opt.out << "\n";
    return kExitOk;
}

struct VerifyOptions {
    std::uint64_t seed = 1;
    std::string tmp = "/tmp";
};

int cmd_verify(const VerifyOptions& opt) {
    std::cout << "verify config:\n";
    print_kv("seed", opt.seed);
    bool all_ok = true;
    for (const SuiteResult& r : run_all_suites(opt.seed, opt.tmp)) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << " (" << r.trials
                  << " trials)";
        if (!r.passed) std::cout << "\n       counterexample: " << r.detail;
        std::cout << "\n";
        all_ok = all_ok && r.passed;
    }
    return all_ok ? kExitOk : kExitVerifyFailed;
}

struct BenchOptions {
    std::string out = "bench.csv";
    bench::BenchConfig cfg;
    std::vector<std::string> tiers = {"heavy"};
    bool no_oracle = false;
};

int cmd_bench(const BenchOptions& opt) {
    bench::BenchConfig cfg = opt.cfg;
    cfg.tiers.clear();
    for (const std::string& t : opt.tiers) cfg.tiers.push_back(tier_from_name(t));
    cfg.include_oracle = !opt.no_oracle;

    std::cout << "bench config:\n";
    print_kv("out", opt.out);
    print_kv("lengths", join_sizes(cfg.lengths));
    print_kv("candidates", join_sizes(cfg.candidates));
    print_kv("reps", cfg.reps);
    print_kv("threads", cfg.threads);
    print_kv("d", cfg.d);
    print_kv("codebook_size", cfg.codebook_size);
    print_kv("seed", cfg.seed);
    print_kv("warmups", 2);

    const bench::BenchReport report = bench::run_bench(cfg);
    bench::write_bench_csv(report, opt.out);
    std::string topk_out = opt.out;
    const std::size_t dot = topk_out.rfind('.');
    topk_out.insert(dot == std::string::npos ? topk_out.size() : dot, "_topk");
    bench::write_topk_csv(report, topk_out);
    std::cout << "wrote " << report.rows.size() << " bench rows to " << opt.out << " and "
              << report.topk.size() << " top-k rows to " << topk_out << "\n";
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"key-only vector-quantized attention toolkit"};
    app.require_subcommand(1);
    app.set_config("--config");

    GenOptions gen;
    auto* g = app.add_subcommand("gen", "generate a synthetic event-log dataset");
    g->add_option("--out", gen.out, "output dataset directory")->required();
    g->add_option("--seed", gen.cfg.seed, "rng seed");
    g->add_option("--users", gen.cfg.n_users, "number of users");
    g->add_option("--avg-len", gen.cfg.seq_len.avg, "average sequence length");
    g->add_option("--clusters", gen.cfg.n_clusters, "planted key clusters");
    g->add_option("--items", gen.cfg.n_items, "catalog size");
    g->add_option("--noise", gen.cfg.noise, "cluster noise");
    g->add_option("--samples-per-user", gen.cfg.samples_per_user, "impressions per user");
    g->add_option("--d-in", gen.cfg.feat_dim, "raw feature dim");
    g->add_flag("--binary", gen.binary, "write events in the binary variant");

    TrainOptions tr;
    auto* t = app.add_subcommand("train", "train projections, codebooks and head");
    t->add_option("--dataset", tr.dataset, "dataset directory")->required();
    t->add_option("--out", tr.out, "model output path")->required();
    t->add_option("--seed", tr.cfg.seed, "rng seed");
    t->add_option("--d", tr.d, "attention dim");
    t->add_option("--codebook-size", tr.cfg.codebook_size, "codewords per group");
    t->add_option("--groups", tr.groups, "GVQ groups");
    t->add_option("--heads", tr.heads, "query heads");
    t->add_option("--scales", tr.cfg.temporal_scales, "temporal kernel scales (0 = off)");
    t->add_option("--alpha", tr.cfg.alpha, "VQ loss weight");
    t->add_option("--beta", tr.cfg.beta, "commitment weight");
    t->add_option("--lr", tr.cfg.lr, "SGD learning rate");
    t->add_option("--codebook-lr", tr.cfg.codebook_lr, "codeword pull rate");
    t->add_option("--epochs", tr.cfg.epochs, "epochs");
    t->add_option("--batch", tr.cfg.batch_size, "batch size");
    t->add_option("--value-bound", tr.cfg.value_norm_bound, "value norm bound c");
    t->add_option("--metrics-out", tr.metrics_out, "per-epoch metrics CSV");

    BuildCacheOptions bc;
    auto* b = app.add_subcommand("build-cache", "precompute per-user caches offline");
    b->add_option("--dataset", bc.dataset, "dataset directory")->required();
    b->add_option("--model", bc.model, "trained model file")->required();
    b->add_option("--tier", bc.tier, "light|medium|heavy");
    b->add_option("--out", bc.out, "cache file")->required();

    InferOptions inf;
    auto* i = app.add_subcommand("infer", "score candidates for one user via a cache tier");
    i->add_option("--dataset", inf.dataset, "dataset directory")->required();
    i->add_option("--model", inf.model, "trained model file")->required();
    i->add_option("--cache", inf.cache, "cache file")->required();
    i->add_option("--tier", inf.tier, "light|medium|heavy");
    i->add_option("--user", inf.user, "user index");
    i->add_option("--candidates", inf.candidates, "candidate count B");
    i->add_option("--reps", inf.reps, "timing repetitions");
    i->add_option("--out", inf.out, "scores CSV")->required();

    VerifyOptions ver;
    auto* v = app.add_subcommand("verify", "run the randomized property suites");
    v->add_option("--seed", ver.seed, "suite seed");
    v->add_option("--tmp", ver.tmp, "scratch directory");

    BenchOptions be;
    if (const char* env = std::getenv("VQL_THREADS")) {
        be.cfg.threads = static_cast<std::size_t>(std::strtoull(env, nullptr, 10));
        if (be.cfg.threads == 0) be.cfg.threads = 1;
    }
    auto* e = app.add_subcommand("bench", "latency sweeps and the top-k mass diagnostic");
    e->add_option("--out", be.out, "bench CSV path");
    e->add_option("--lengths", be.cfg.lengths, "history lengths")->delimiter(',');
    e->add_option("--candidates", be.cfg.candidates, "candidate counts")->delimiter(',');
    e->add_option("--tier", be.tiers, "tiers to bench")->delimiter(',');
    e->add_option("--reps", be.cfg.reps, "repetitions after 2 warmups");
    e->add_option("--threads", be.cfg.threads, "threads for throughput mode");
    e->add_option("--d", be.cfg.d, "attention dim");
    e->add_option("--d-in", be.cfg.d_in, "raw feature dim");
    e->add_option("--codebook-size", be.cfg.codebook_size, "codebook size");
    e->add_option("--seed", be.cfg.seed, "rng seed");
    e->add_flag("--no-oracle", be.no_oracle, "skip the exact-attention baseline");
    e->add_option("--topk-lengths", be.cfg.topk_lengths, "top-k diagnostic lengths")
        ->delimiter(',');
    e->add_option("--topk-k", be.cfg.topk_k, "k for the discarded-mass diagnostic");
    e->add_option("--topk-queries", be.cfg.topk_queries, "queries per length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& h) {
        return app.exit(h);
    } catch (const CLI::ParseError& pe) {
        (void)app.exit(pe);
        return kExitMissingInput;
    }

    if (g->parsed()) return cmd_gen(gen);
    if (t->parsed()) return cmd_train(tr);
    if (b->parsed()) return cmd_build_cache(bc);
    if (i->parsed()) return cmd_infer(inf);
    if (v->parsed()) return cmd_verify(ver);
    if (e->parsed()) return cmd_bench(be);
    return kExitMissingInput;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code == io_code::checksum_mismatch ? kExitStaleCache : kExitFormat;
    } catch (const divergence_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingInput;
    } catch (const vql::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitError;
    }
}
