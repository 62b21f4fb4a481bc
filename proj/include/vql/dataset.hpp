#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "vql/error.hpp"
#include "vql/matrix.hpp"

namespace vql {

/// One user's history: per-event raw features, item ids and timestamps.
/// Timestamps are raw seconds; callers rebase at use.
struct EventSequence {
    std::vector<std::uint64_t> item_ids;
    Matrix key_feats;    // L x d_in
    Matrix value_feats;  // L x d_in
    std::vector<std::int64_t> timestamps;

    std::size_t length() const { return item_ids.size(); }

    void validate() const {
        const std::size_t l = item_ids.size();
        if (l == 0) throw param_error("event sequence must hold at least one event");
        if (key_feats.rows() != l || value_feats.rows() != l || timestamps.size() != l) {
            throw shape_error("event sequence arrays disagree on length");
        }
        for (std::size_t i = 1; i < l; ++i) {
            if (timestamps[i] < timestamps[i - 1]) {
                throw param_error("event timestamps must be non-decreasing");
            }
        }
    }
};

struct ItemTable {
    std::vector<std::uint64_t> ids;
    std::vector<std::uint32_t> cluster;
    Matrix key_feats;    // I x d_in
    Matrix value_feats;  // I x d_in
    std::map<std::uint64_t, std::size_t> index;

    std::size_t row_of(std::uint64_t id) const {
        auto it = index.find(id);
        if (it == index.end()) throw param_error("unknown item id");
        return it->second;
    }

    void rebuild_index() {
        index.clear();
        for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
    }
};

/// One scored impression: user index, candidate item, query time, label.
struct DatasetSample {
    std::size_t user = 0;
    std::uint64_t item_id = 0;
    std::int64_t query_time = 0;
    int label = 0;
};

struct SyntheticDataset {
    ItemTable items;
    std::vector<EventSequence> sequences;  // index == user id
    std::vector<DatasetSample> samples;
    std::size_t feat_dim = 0;
    std::size_t n_clusters = 0;
    std::uint64_t seed = 0;
};

/// Sequence lengths are sampled uniformly from [max(1, avg/2), 3*avg/2],
/// so the configured value is the mean. The default mirrors the ~4.4k
/// average history length of large short-video logs.
struct SeqLenDist {
    std::size_t avg = 4407;
};

struct SyntheticConfig {
    std::size_t n_users = 100;
    SeqLenDist seq_len{};
    std::size_t n_clusters = 8;
    std::size_t n_items = 400;
    double noise = 0.1;
    std::size_t samples_per_user = 6;
    std::size_t feat_dim = 16;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_users == 0 || n_clusters == 0 || n_items == 0 || samples_per_user == 0 ||
            feat_dim == 0 || seq_len.avg == 0) {
            throw param_error("synthetic config values must be positive");
        }
        if (noise < 0.0) throw param_error("noise must be >= 0");
        if (n_items < n_clusters) throw param_error("need at least one item per cluster");
    }
};

/// Gaussian-mixture keys with a planted attention labeling rule. Items get
/// fixed cluster-mean features (+noise); every event copies its item's key
/// features verbatim, so an item -> code lookup reproduces the per-event
/// assignment exactly. Labels come from softmax attention over true cluster
/// affinities applied to a hidden value direction, so sharp cluster-aware
/// attention is sufficient to fit them.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    SyntheticDataset ds;
    ds.feat_dim = cfg.feat_dim;
    ds.n_clusters = cfg.n_clusters;
    ds.seed = cfg.seed;

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Cluster means, norm 2 so noise=0.1 keeps clusters well separated.
    Matrix means(cfg.n_clusters, cfg.feat_dim);
    for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
        auto r = means.row(c);
        for (double& v : r) v = gauss(rng);
        const double n = l2_norm(r);
        for (double& v : r) v = 2.0 * v / n;
    }
    std::vector<double> hidden_dir(cfg.feat_dim);
    for (double& v : hidden_dir) v = gauss(rng);
    {
        const double n = l2_norm(hidden_dir);
        for (double& v : hidden_dir) v /= n;
    }

    // Items.
    ds.items.ids.resize(cfg.n_items);
    ds.items.cluster.resize(cfg.n_items);
    ds.items.key_feats = Matrix(cfg.n_items, cfg.feat_dim);
    ds.items.value_feats = Matrix(cfg.n_items, cfg.feat_dim);
    std::vector<std::vector<std::size_t>> cluster_items(cfg.n_clusters);
    for (std::size_t i = 0; i < cfg.n_items; ++i) {
        const std::uint32_t c = static_cast<std::uint32_t>(i % cfg.n_clusters);
        ds.items.ids[i] = i;
        ds.items.cluster[i] = c;
        cluster_items[c].push_back(i);
        for (std::size_t k = 0; k < cfg.feat_dim; ++k) {
            ds.items.key_feats(i, k) = means(c, k) + cfg.noise * gauss(rng);
            ds.items.value_feats(i, k) = means(c, k) + cfg.noise * gauss(rng);
        }
    }
    ds.items.rebuild_index();

    // User histories.
    const std::size_t lo = std::max<std::size_t>(1, cfg.seq_len.avg / 2);
    const std::size_t hi = cfg.seq_len.avg + cfg.seq_len.avg / 2;
    std::uniform_int_distribution<std::size_t> len_dist(lo, hi);
    std::exponential_distribution<double> gap_dist(1.0 / 21600.0);  // ~6h mean
    ds.sequences.resize(cfg.n_users);
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        // Log-normal cluster preferences concentrate each user on a few clusters.
        std::vector<double> pref(cfg.n_clusters);
        double pref_total = 0.0;
        for (double& p : pref) {
            p = std::exp(1.2 * gauss(rng));
            pref_total += p;
        }
        std::uniform_real_distribution<double> upref(0.0, pref_total);

        EventSequence& seq = ds.sequences[u];
        const std::size_t l = len_dist(rng);
        seq.item_ids.resize(l);
        seq.key_feats = Matrix(l, cfg.feat_dim);
        seq.value_feats = Matrix(l, cfg.feat_dim);
        seq.timestamps.resize(l);
        std::int64_t t = 1600000000;
        for (std::size_t i = 0; i < l; ++i) {
            double pick = upref(rng);
            std::size_t c = 0;
            while (c + 1 < cfg.n_clusters && pick > pref[c]) {
                pick -= pref[c];
                ++c;
            }
            std::uniform_int_distribution<std::size_t> item_pick(0, cluster_items[c].size() - 1);
            const std::size_t item = cluster_items[c][item_pick(rng)];
            seq.item_ids[i] = ds.items.ids[item];
            // Event keys are the item keys verbatim; values carry a small
            // per-event jitter on top of the item features.
            const auto ik = ds.items.key_feats.row(item);
            const auto iv = ds.items.value_feats.row(item);
            auto ek = seq.key_feats.row(i);
            auto ev = seq.value_feats.row(i);
            for (std::size_t k = 0; k < cfg.feat_dim; ++k) {
                ek[k] = ik[k];
                ev[k] = iv[k] + 0.3 * cfg.noise * gauss(rng);
            }
            t += 1 + static_cast<std::int64_t>(gap_dist(rng));
            seq.timestamps[i] = t;
        }
    }

    // Impressions with the planted attention rule on true cluster means.
    constexpr double kPlantedSharpness = 1.5;
    std::vector<double> planted(cfg.n_users * cfg.samples_per_user);
    ds.samples.resize(planted.size());
    std::uniform_int_distribution<std::size_t> any_item(0, cfg.n_items - 1);
    std::size_t s = 0;
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        const EventSequence& seq = ds.sequences[u];
        for (std::size_t j = 0; j < cfg.samples_per_user; ++j, ++s) {
            const std::size_t cand = any_item(rng);
            DatasetSample& sample = ds.samples[s];
            sample.user = u;
            sample.item_id = ds.items.ids[cand];
            sample.query_time = seq.timestamps.back() + 1 + static_cast<std::int64_t>(gap_dist(rng));

            const auto q_mean = means.row(ds.items.cluster[cand]);
            double shift = -std::numeric_limits<double>::infinity();
            std::vector<double> logit(seq.length());
            for (std::size_t i = 0; i < seq.length(); ++i) {
                const std::uint32_t ec = ds.items.cluster[ds.items.row_of(seq.item_ids[i])];
                logit[i] = kPlantedSharpness * dot(q_mean, means.row(ec));
                shift = std::max(shift, logit[i]);
            }
            double den = 0.0, num = 0.0;
            for (std::size_t i = 0; i < seq.length(); ++i) {
                const double w = std::exp(logit[i] - shift);
                den += w;
                num += w * dot(seq.value_feats.row(i), std::span<const double>(hidden_dir));
            }
            planted[s] = num / den;
        }
    }
    // Center the planted scores, then draw labels through a sigmoid.
    std::vector<double> sorted = planted;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    constexpr double kLabelGain = 6.0;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::size_t i = 0; i < planted.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-kLabelGain * (planted[i] - median)));
        ds.samples[i].label = u01(rng) < p ? 1 : 0;
    }
    return ds;
}

}  // namespace vql
