#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vql/cache.hpp"
#include "vql/codebook.hpp"
#include "vql/dataset.hpp"
#include "vql/serialize.hpp"
#include "vql/temporal.hpp"
#include "vql/trainer.hpp"

// Offline cache construction and online candidate scoring for the three
// caching tiers. All tiers converge on per-group CacheBundles; they differ
// in what is stored offline and how much work the request pays.
namespace vql {

enum class CacheTier { light, medium, heavy };

inline const char* tier_name(CacheTier t) {
    switch (t) {
        case CacheTier::light: return "light";
        case CacheTier::medium: return "medium";
        case CacheTier::heavy: return "heavy";
    }
    return "?";
}

inline CacheTier tier_from_name(const std::string& s) {
    if (s == "light") return CacheTier::light;
    if (s == "medium") return CacheTier::medium;
    if (s == "heavy") return CacheTier::heavy;
    throw param_error("unknown cache tier: " + s);
}

struct ProjectedSequence {
    Matrix keys;    // L x d
    Matrix values;  // L x d, clipped
};

inline ProjectedSequence project_sequence(const ModelParams& model, double value_norm_bound,
                                          const EventSequence& seq) {
    ProjectedSequence ps;
    ps.keys = matmul(seq.key_feats, model.w_k);
    ps.values = clip_row_norms(matmul(seq.value_feats, model.w_v), value_norm_bound);
    return ps;
}

inline Matrix group_slice(const Matrix& m, std::size_t group, std::size_t group_dim) {
    Matrix out(m.rows(), group_dim);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto src = m.row(i);
        std::copy(src.begin() + group * group_dim, src.begin() + (group + 1) * group_dim,
                  out.row(i).begin());
    }
    return out;
}

/// Rebased timestamps (origin = max history timestamp, so all <= 0).
inline std::vector<double> rebase_timestamps(const EventSequence& seq, double* origin_out) {
    const double origin = static_cast<double>(seq.timestamps.back());
    std::vector<double> t(seq.length());
    for (std::size_t i = 0; i < seq.length(); ++i) {
        t[i] = static_cast<double>(seq.timestamps[i]) - origin;
    }
    if (origin_out) *origin_out = origin;
    return t;
}

/// Per-group nearest-codeword assignments from projected event keys.
inline std::vector<Assignment> assign_groups(const ModelParams& model, const Matrix& keys) {
    const std::size_t dg = model.gvq.group_dim();
    std::vector<Assignment> out;
    for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
        out.push_back(assign_nearest(group_slice(keys, g, dg), model.codebooks[g]));
    }
    return out;
}

/// Per-group assignments via the item -> code lookup (VQL_L path).
inline std::vector<Assignment> assign_groups_light(const std::vector<LightCache>& light,
                                                   const EventSequence& seq) {
    std::vector<Assignment> out(light.size());
    for (std::size_t g = 0; g < light.size(); ++g) {
        out[g].indices.reserve(seq.length());
        for (std::uint64_t id : seq.item_ids) {
            auto it = light[g].item_to_code.find(id);
            if (it == light[g].item_to_code.end()) {
                throw param_error("light cache misses item " + std::to_string(id));
            }
            out[g].indices.push_back(it->second);
        }
    }
    return out;
}

/// Full per-group heavy bundles for one user (plain, or with per-scale
/// caches when the model carries temporal kernels).
inline std::vector<CacheBundle> build_group_bundles(const ModelParams& model,
                                                    double value_norm_bound,
                                                    const EventSequence& seq,
                                                    bool with_temporal = true) {
    const ProjectedSequence ps = project_sequence(model, value_norm_bound, seq);
    const std::vector<Assignment> asg = assign_groups(model, ps.keys);
    const std::size_t dg = model.gvq.group_dim();

    std::vector<double> rebased;
    TemporalConfig tc;
    const bool temporal = with_temporal && !model.lambdas.empty();
    if (temporal) {
        double origin = 0.0;
        rebased = rebase_timestamps(seq, &origin);
        tc = model.temporal_config(0, origin);
    }

    std::vector<CacheBundle> out;
    for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
        const AssignmentCsc csc = build_assignment_csc(asg[g], model.codebooks[g].size());
        const Matrix values_g = group_slice(ps.values, g, dg);
        CacheBundle b = build_heavy_cache(csc, values_g, rebased,
                                          temporal ? &tc : nullptr,
                                          codebook_checksum(model.codebooks[g]));
        b.group_id = static_cast<std::uint32_t>(g);
        out.push_back(std::move(b));
    }
    return out;
}

/// Scores B candidates for one user against per-group bundles. Queries are
/// derived from candidate features; output is the predicted probability per
/// candidate. With temporal bundles the query time modulates the per-scale
/// caches through the model's gate.
inline std::vector<double> score_with_bundles(const ModelParams& model,
                                              const std::vector<CacheBundle>& bundles,
                                              const Matrix& candidate_feats,
                                              double query_time = 0.0,
                                              double time_origin = 0.0) {
    if (bundles.size() != model.gvq.num_groups) throw config_error("score: bundle count != groups");
    const std::size_t b_count = candidate_feats.rows();
    const std::size_t heads = model.gvq.num_heads;
    const std::size_t dg = model.gvq.group_dim();
    const double qscale = 1.0 / std::sqrt(static_cast<double>(dg));
    const bool temporal = !model.lambdas.empty() && !bundles.front().scales.empty();

    const Matrix q_raw = matmul(candidate_feats, model.w_q);  // B x H*dg
    std::vector<double> probs(b_count);
    std::vector<double> head_input(heads * dg + model.d_in);
    for (std::size_t b = 0; b < b_count; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t g = model.gvq.group_of(h);
            RowVector q(dg);
            for (std::size_t c = 0; c < dg; ++c) q[c] = q_raw(b, h * dg + c) * qscale;
            if (temporal) {
                const TemporalConfig tc = model.temporal_config(g, time_origin);
                const RowVector oh = temporal_infer(q, query_time, model.codebooks[g],
                                                    bundles[g].scales, tc);
                std::copy(oh.values().begin(), oh.values().end(), head_input.begin() + h * dg);
            } else {
                Matrix qm(1, dg, std::vector<double>(q.values()));
                const Matrix oh = infer_attention(qm, model.codebooks[g], bundles[g].v_cache,
                                                  bundles[g].ones_cache);
                const auto src = oh.row(0);
                std::copy(src.begin(), src.end(), head_input.begin() + h * dg);
            }
        }
        const auto cand = candidate_feats.row(b);
        std::copy(cand.begin(), cand.end(), head_input.begin() + heads * dg);
        double z = model.head_b;
        for (std::size_t c = 0; c < head_input.size(); ++c) z += model.head_w[c] * head_input[c];
        probs[b] = 1.0 / (1.0 + std::exp(-z));
    }
    return probs;
}

/// Exact-attention scorer over the raw projected history; the O(BLd)
/// baseline the benchmarks compare against.
inline std::vector<double> score_oracle(const ModelParams& model, double value_norm_bound,
                                        const EventSequence& seq, const Matrix& candidate_feats) {
    const ProjectedSequence ps = project_sequence(model, value_norm_bound, seq);
    const std::size_t heads = model.gvq.num_heads;
    const std::size_t dg = model.gvq.group_dim();
    const double qscale = 1.0 / std::sqrt(static_cast<double>(dg));
    const Matrix q_raw = matmul(candidate_feats, model.w_q);

    std::vector<double> probs(candidate_feats.rows());
    std::vector<double> head_input(heads * dg + model.d_in);
    std::vector<double> logits(seq.length());
    for (std::size_t b = 0; b < candidate_feats.rows(); ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t g = model.gvq.group_of(h);
            double shift = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < seq.length(); ++i) {
                double s = 0.0;
                for (std::size_t c = 0; c < dg; ++c) {
                    s += q_raw(b, h * dg + c) * qscale * ps.keys(i, g * dg + c);
                }
                logits[i] = s;
                shift = std::max(shift, s);
            }
            double den = 0.0;
            std::fill(head_input.begin() + h * dg, head_input.begin() + (h + 1) * dg, 0.0);
            for (std::size_t i = 0; i < seq.length(); ++i) {
                const double w = std::exp(logits[i] - shift);
                den += w;
                for (std::size_t c = 0; c < dg; ++c) {
                    head_input[h * dg + c] += w * ps.values(i, g * dg + c);
                }
            }
            for (std::size_t c = 0; c < dg; ++c) head_input[h * dg + c] /= den;
        }
        const auto cand = candidate_feats.row(b);
        std::copy(cand.begin(), cand.end(), head_input.begin() + heads * dg);
        double z = model.head_b;
        for (std::size_t c = 0; c < head_input.size(); ++c) z += model.head_w[c] * head_input[c];
        probs[b] = 1.0 / (1.0 + std::exp(-z));
    }
    return probs;
}

/// Rebuilds the per-group bundles a request needs from what the selected
/// tier stores: heavy loads them, medium aggregates from the stored CSC,
/// light looks codes up per item and aggregates.
inline std::vector<CacheBundle> bundles_for_tier(const ModelParams& model, double value_norm_bound,
                                                 CacheTier tier, const EventSequence& seq,
                                                 const std::vector<CacheBundle>* heavy,
                                                 const std::vector<AssignmentCsc>* medium,
                                                 const std::vector<LightCache>* light) {
    const std::size_t dg = model.gvq.group_dim();
    switch (tier) {
        case CacheTier::heavy: {
            if (!heavy) throw config_error("heavy tier needs prebuilt bundles");
            return *heavy;
        }
        case CacheTier::medium: {
            if (!medium) throw config_error("medium tier needs stored assignments");
            const ProjectedSequence ps = project_sequence(model, value_norm_bound, seq);
            const bool temporal = !model.lambdas.empty();
            std::vector<double> rebased;
            TemporalConfig tc;
            if (temporal) {
                double origin = 0.0;
                rebased = rebase_timestamps(seq, &origin);
                tc = model.temporal_config(0, origin);
            }
            std::vector<CacheBundle> out;
            for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
                CacheBundle b = build_heavy_cache((*medium)[g], group_slice(ps.values, g, dg),
                                                  rebased, temporal ? &tc : nullptr,
                                                  codebook_checksum(model.codebooks[g]));
                b.group_id = static_cast<std::uint32_t>(g);
                out.push_back(std::move(b));
            }
            return out;
        }
        case CacheTier::light: {
            if (!light) throw config_error("light tier needs the item code map");
            if (!model.lambdas.empty()) {
                throw config_error("light tier cannot serve temporal models");
            }
            const ProjectedSequence ps = project_sequence(model, value_norm_bound, seq);
            const std::vector<Assignment> asg = assign_groups_light(*light, seq);
            std::vector<CacheBundle> out;
            for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
                const AssignmentCsc csc = build_assignment_csc(asg[g], model.codebooks[g].size());
                CacheBundle b = build_heavy_cache(csc, group_slice(ps.values, g, dg), {}, nullptr,
                                                  codebook_checksum(model.codebooks[g]));
                b.group_id = static_cast<std::uint32_t>(g);
                out.push_back(std::move(b));
            }
            return out;
        }
    }
    throw config_error("unknown tier");
}

}  // namespace vql
