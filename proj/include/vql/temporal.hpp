#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "vql/attention.hpp"
#include "vql/codebook.hpp"
#include "vql/error.hpp"
#include "vql/matrix.hpp"

namespace vql {

/// Multi-scale exponential kernels over rebased timestamps plus the gate
/// producing per-scale mixture weights from a query. Histories are rebased
/// so every t_k <= 0 <= t_q: the history-side factor exp(lambda * t_k) then
/// never exceeds 1 and the separable factorization cannot overflow.
struct TemporalConfig {
    std::vector<double> lambdas;     // decay rates, 1/second in rebased time
    double time_origin = 0.0;        // subtracted from raw timestamps
    Matrix gate_w;                   // M x query_dim
    std::vector<double> gate_b;      // M

    std::size_t scales() const { return lambdas.size(); }

    void validate(std::size_t query_dim) const {
        if (lambdas.empty()) throw config_error("temporal: need at least one scale");
        for (double l : lambdas) {
            // lambda = 0 is the plain-attention limit and is allowed.
            if (!(l >= 0.0)) throw config_error("temporal: decay rates must be >= 0");
        }
        if (gate_w.rows() != lambdas.size() || gate_b.size() != lambdas.size()) {
            throw config_error("temporal: gate output dim != scale count");
        }
        if (gate_w.cols() != query_dim) throw config_error("temporal: gate input dim != query dim");
    }

    /// 1/day, 1/week, 1/month(30d) for the first three scales, then a
    /// geometric 1/4 continuation.
    static std::vector<double> default_lambdas(std::size_t m) {
        std::vector<double> out;
        const double named[] = {1.0 / 86400.0, 1.0 / 604800.0, 1.0 / 2592000.0};
        for (std::size_t i = 0; i < m; ++i) {
            if (i < 3) {
                out.push_back(named[i]);
            } else {
                out.push_back(out.back() * 0.25);
            }
        }
        return out;
    }

    static TemporalConfig uniform(std::size_t m, std::size_t query_dim, double time_origin = 0.0) {
        TemporalConfig cfg;
        cfg.lambdas = default_lambdas(m);
        cfg.time_origin = time_origin;
        cfg.gate_w = Matrix(m, query_dim);
        cfg.gate_b.assign(m, 0.0);
        return cfg;
    }
};

/// One per-scale pair of codeword aggregates: Δ^T D_λ V and Δ^T D_λ 1.
struct ScaleCache {
    Matrix v_cache;     // N x d_g
    Matrix ones_cache;  // N x 1
};

/// θ = softmax(gate_w · q + gate_b); strictly positive, sums to 1.
inline std::vector<double> gate_weights(const RowVector& query, const TemporalConfig& config) {
    config.validate(query.dim());
    const std::size_t m = config.scales();
    Matrix logits(1, m);
    for (std::size_t i = 0; i < m; ++i) {
        logits(0, i) = dot(config.gate_w.row(i), query.span()) + config.gate_b[i];
    }
    const Matrix sm = row_softmax(logits);
    return {sm.data(), sm.data() + m};
}

/// Cached temporal inference for one query at time t_q: the per-scale
/// caches are mixed with θ_m exp(-λ_m t_q) and scored like plain cached
/// attention. Equals per-event attention with weights
/// exp(q k̂^T) · Σ_m θ_m exp(-λ_m (t_q - t_k)).
inline RowVector temporal_infer(const RowVector& query, double t_q, const Codebook& codebook,
                                std::span<const ScaleCache> scale_caches,
                                const TemporalConfig& config) {
    config.validate(query.dim());
    if (scale_caches.size() != config.scales()) {
        throw config_error("temporal_infer: scale cache count != scale count");
    }
    if (query.dim() != codebook.dim()) throw shape_error("temporal_infer: query dim != codebook dim");
    const double tq_rebased = t_q - config.time_origin;
    if (tq_rebased < 0.0) throw causality_error("temporal_infer: query time precedes cached history");

    const std::size_t n = codebook.size();
    const std::size_t d = scale_caches.front().v_cache.cols();
    const std::vector<double> theta = gate_weights(query, config);

    Matrix mixed_v(n, d);
    Matrix mixed_ones(n, 1);
    for (std::size_t m = 0; m < config.scales(); ++m) {
        const ScaleCache& sc = scale_caches[m];
        if (sc.v_cache.rows() != n || sc.ones_cache.rows() != n || sc.v_cache.cols() != d) {
            throw shape_error("temporal_infer: scale cache shape mismatch");
        }
        const double w = theta[m] * std::exp(-config.lambdas[m] * tq_rebased);
        for (std::size_t j = 0; j < n; ++j) {
            const auto src = sc.v_cache.row(j);
            auto dst = mixed_v.row(j);
            for (std::size_t k = 0; k < d; ++k) dst[k] += w * src[k];
            mixed_ones(j, 0) += w * sc.ones_cache(j, 0);
        }
    }

    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) logits[j] = dot(query.span(), codebook.codewords().row(j));
    const double shift = *std::max_element(logits.begin(), logits.end());

    RowVector out(d);
    double den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(logits[j] - shift);
        den += e * mixed_ones(j, 0);
        const auto vc = mixed_v.row(j);
        for (std::size_t k = 0; k < d; ++k) out[k] += e * vc[k];
    }
    if (!(den > 0.0)) throw degenerate_cache_error("temporal_infer: no kernel mass in caches");
    for (std::size_t k = 0; k < d; ++k) out[k] /= den;
    return out;
}

}  // namespace vql
