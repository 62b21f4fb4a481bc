#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "vql/attention.hpp"
#include "vql/codebook.hpp"
#include "vql/dataset.hpp"
#include "vql/error.hpp"
#include "vql/matrix.hpp"
#include "vql/temporal.hpp"

namespace vql {

struct TrainConfig {
    double alpha = 1.0;         // VQ loss weight in the joint objective
    double beta = 0.25;         // commitment weight
    double lr = 1e-3;           // SGD step for projections, head and gate
    double codebook_lr = 0.05;  // codeword pull step per batch
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    std::size_t codebook_size = 100;
    GvqConfig gvq = GvqConfig{1, 1, 16, {}};
    std::size_t temporal_scales = 0;  // 0 disables the temporal kernel path
    std::vector<double> lambdas;      // defaulted from scale count when empty
    double value_norm_bound = 4.0;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0) throw param_error("train: alpha/beta must be >= 0");
        // lr = 0 is a legal no-op step.
        if (lr < 0.0 || codebook_lr < 0.0) throw param_error("train: lr must be >= 0");
        if (batch_size == 0 || codebook_size == 0) throw param_error("train: zero batch or codebook");
        gvq.validate();
    }

    std::vector<double> effective_lambdas() const {
        if (temporal_scales == 0) return {};
        if (!lambdas.empty()) {
            if (lambdas.size() != temporal_scales) throw config_error("train: lambda count != scales");
            return lambdas;
        }
        return TemporalConfig::default_lambdas(temporal_scales);
    }
};

/// Everything the trainer updates: projections, per-group codebooks, the
/// per-group temporal gates and the linear prediction head over
/// [attention output ‖ candidate features].
struct ModelParams {
    std::size_t d_in = 0;
    GvqConfig gvq;
    Matrix w_q;  // d_in x (H * d_g)
    Matrix w_k;  // d_in x d
    Matrix w_v;  // d_in x d
    std::vector<Codebook> codebooks;  // per group, N x d_g
    bool codebooks_ready = false;
    std::vector<Matrix> gate_w;               // per group, M x d_g
    std::vector<std::vector<double>> gate_b;  // per group, M
    std::vector<double> lambdas;              // empty -> plain attention
    std::vector<double> head_w;               // H*d_g + d_in
    double head_b = 0.0;

    std::size_t attn_out_dim() const { return gvq.num_heads * gvq.group_dim(); }

    static ModelParams init(std::size_t d_in, const TrainConfig& cfg) {
        cfg.validate();
        ModelParams m;
        m.d_in = d_in;
        m.gvq = cfg.gvq;
        m.lambdas = cfg.effective_lambdas();
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
        auto fill = [&](Matrix& w, std::size_t r, std::size_t c) {
            w = Matrix(r, c);
            for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = scale * gauss(rng);
        };
        const std::size_t dg = cfg.gvq.group_dim();
        fill(m.w_q, d_in, cfg.gvq.num_heads * dg);
        fill(m.w_k, d_in, cfg.gvq.model_dim);
        fill(m.w_v, d_in, cfg.gvq.model_dim);
        for (std::size_t g = 0; g < cfg.gvq.num_groups; ++g) {
            m.codebooks.emplace_back(cfg.codebook_size, dg);
            m.gate_w.emplace_back(m.lambdas.size(), dg);  // zero gate -> uniform mixture
            m.gate_b.emplace_back(m.lambdas.size(), 0.0);
        }
        m.head_w.assign(cfg.gvq.num_heads * dg + d_in, 0.0);
        m.head_b = 0.0;
        return m;
    }

    TemporalConfig temporal_config(std::size_t group, double time_origin) const {
        TemporalConfig tc;
        tc.lambdas = lambdas;
        tc.time_origin = time_origin;
        tc.gate_w = gate_w[group];
        tc.gate_b = gate_b[group];
        return tc;
    }
};

inline double rec_loss(std::span<const double> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw shape_error("rec_loss: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double p = std::clamp(preds[i], 1e-12, 1.0 - 1e-12);
        acc += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return preds.empty() ? 0.0 : acc / static_cast<double>(preds.size());
}

inline double joint_loss(double rec, std::span<const VqLossTerms> per_group, double alpha) {
    if (alpha < 0.0) throw param_error("joint_loss: alpha must be >= 0");
    double vq = 0.0;
    for (const VqLossTerms& t : per_group) vq += t.total();
    return rec + alpha * vq;
}

/// Exact rank-sum AUC with average ranks on ties. Returns 0.5 when one
/// class is absent.
inline double auc_rank_sum(std::span<const double> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw shape_error("auc: length mismatch");
    const std::size_t n = preds.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && preds[order[j + 1]] == preds[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[k]) {
            rank_pos += rank[k];
            ++n_pos;
        }
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return 0.5;
    const double u = rank_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace detail {

struct HeadScratch {
    std::vector<double> q;          // scaled head query, d_g
    std::vector<double> weights;    // L
    std::vector<double> exp_shift;  // exp(l_i - m), L
    double inv_den = 0.0;
    std::vector<double> theta;      // M
    Matrix phi;                     // M x L kernel factors exp(-lambda (t_q - t_i))
    std::vector<double> attn;       // d_g
};

struct SampleScratch {
    Matrix keys;    // L x d
    Matrix v_raw;   // L x d
    Matrix values;  // L x d (clipped)
    std::vector<double> v_scale;         // per-row c/n, 1.0 if untouched
    std::vector<Assignment> assignment;  // per group
    std::vector<Matrix> khat;            // per group, L x d_g
    std::vector<double> q_raw;           // H * d_g, unscaled
    std::vector<HeadScratch> heads;      // per head
    std::vector<double> head_input;      // H*d_g + d_in
    double logit = 0.0;
    double prob = 0.5;
};

/// Straight-through override: attention runs on khat_base + (K - K_base)
/// and the codebook term is frozen, so finite differences of this loss
/// reproduce the STE backward exactly.
struct ForwardOverride {
    const std::vector<Assignment>* assignments = nullptr;  // pin Δ per group
    const Matrix* ste_base_keys = nullptr;                 // L x d
};

inline void project_rows(const Matrix& feats, const Matrix& w, Matrix& out) {
    out = matmul(feats, w);
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double forward_sample(const EventSequence& seq, std::span<const double> cand,
                             std::int64_t query_time, const ModelParams& model,
                             const TrainConfig& cfg, SampleScratch& sc,
                             const ForwardOverride& ov = {}) {
    seq.validate();
    if (cand.size() != model.d_in || seq.key_feats.cols() != model.d_in) {
        throw shape_error("forward: feature dim mismatch");
    }
    const std::size_t l = seq.length();
    const std::size_t d = model.gvq.model_dim;
    const std::size_t dg = model.gvq.group_dim();
    const std::size_t heads = model.gvq.num_heads;
    const std::size_t groups = model.gvq.num_groups;
    const std::size_t m_scales = model.lambdas.size();

    project_rows(seq.key_feats, model.w_k, sc.keys);
    project_rows(seq.value_feats, model.w_v, sc.v_raw);

    // Norm clip with recorded per-row scales for the backward pass.
    sc.values = sc.v_raw;
    sc.v_scale.assign(l, 1.0);
    for (std::size_t i = 0; i < l; ++i) {
        auto r = sc.values.row(i);
        const double n = l2_norm(r);
        if (n > cfg.value_norm_bound) {
            const double s = cfg.value_norm_bound / n;
            for (double& x : r) x *= s;
            sc.v_scale[i] = s;
        }
    }

    // Per-group quantization (or the STE surrogate around a frozen base).
    sc.assignment.resize(groups);
    sc.khat.resize(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        Matrix keys_g(l, dg);
        for (std::size_t i = 0; i < l; ++i) {
            const auto src = sc.keys.row(i);
            std::copy(src.begin() + g * dg, src.begin() + (g + 1) * dg, keys_g.row(i).begin());
        }
        if (ov.assignments != nullptr) {
            sc.assignment[g] = (*ov.assignments)[g];
        } else {
            sc.assignment[g] = assign_nearest(keys_g, model.codebooks[g]);
        }
        sc.khat[g] = quantize(keys_g, model.codebooks[g], sc.assignment[g]);
        if (ov.ste_base_keys != nullptr) {
            for (std::size_t i = 0; i < l; ++i) {
                auto kh = sc.khat[g].row(i);
                for (std::size_t c = 0; c < dg; ++c) {
                    const std::size_t col = g * dg + c;
                    kh[c] += sc.keys(i, col) - (*ov.ste_base_keys)(i, col);
                }
            }
        }
    }

    // Query heads, pre-scaled by 1/sqrt(d_g).
    sc.q_raw.assign(heads * dg, 0.0);
    for (std::size_t a = 0; a < model.d_in; ++a) {
        const double xa = cand[a];
        const auto wrow = model.w_q.row(a);
        for (std::size_t c = 0; c < heads * dg; ++c) sc.q_raw[c] += xa * wrow[c];
    }
    const double qscale = 1.0 / std::sqrt(static_cast<double>(dg));

    sc.head_input.assign(heads * dg + model.d_in, 0.0);
    if (sc.heads.size() != heads) sc.heads.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        HeadScratch& hs = sc.heads[h];
        const std::size_t g = model.gvq.group_of(h);
        hs.q.assign(dg, 0.0);
        for (std::size_t c = 0; c < dg; ++c) hs.q[c] = sc.q_raw[h * dg + c] * qscale;

        hs.weights.assign(l, 0.0);
        hs.exp_shift.assign(l, 0.0);
        if (m_scales > 0) {
            // theta = softmax(gate_w q + gate_b), shared parameters per group.
            hs.theta.assign(m_scales, 0.0);
            Matrix glog(1, m_scales);
            for (std::size_t m = 0; m < m_scales; ++m) {
                glog(0, m) = dot(model.gate_w[g].row(m), std::span<const double>(hs.q)) +
                             model.gate_b[g][m];
            }
            const Matrix sm = row_softmax(glog);
            for (std::size_t m = 0; m < m_scales; ++m) hs.theta[m] = sm(0, m);
            hs.phi = Matrix(m_scales, l);
            for (std::size_t m = 0; m < m_scales; ++m) {
                for (std::size_t i = 0; i < l; ++i) {
                    const double gap =
                        static_cast<double>(query_time) - static_cast<double>(seq.timestamps[i]);
                    hs.phi(m, i) = std::exp(-model.lambdas[m] * gap);
                }
            }
        }

        double shift = -std::numeric_limits<double>::infinity();
        std::vector<double> logits(l);
        for (std::size_t i = 0; i < l; ++i) {
            logits[i] = dot(std::span<const double>(hs.q), sc.khat[g].row(i));
            shift = std::max(shift, logits[i]);
        }
        double den = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            const double e = std::exp(logits[i] - shift);
            hs.exp_shift[i] = e;
            double kernel = 1.0;
            if (m_scales > 0) {
                kernel = 0.0;
                for (std::size_t m = 0; m < m_scales; ++m) kernel += hs.theta[m] * hs.phi(m, i);
            }
            hs.weights[i] = e * kernel;
            den += hs.weights[i];
        }
        if (!(den > 0.0)) throw degenerate_cache_error("forward: attention mass underflow");
        hs.inv_den = 1.0 / den;
        hs.attn.assign(dg, 0.0);
        for (std::size_t i = 0; i < l; ++i) {
            hs.weights[i] *= hs.inv_den;
            const auto v = sc.values.row(i);
            for (std::size_t c = 0; c < dg; ++c) hs.attn[c] += hs.weights[i] * v[g * dg + c];
        }
        std::copy(hs.attn.begin(), hs.attn.end(), sc.head_input.begin() + h * dg);
    }
    std::copy(cand.begin(), cand.end(), sc.head_input.begin() + heads * dg);

    double z = model.head_b;
    for (std::size_t c = 0; c < sc.head_input.size(); ++c) z += model.head_w[c] * sc.head_input[c];
    sc.logit = z;
    sc.prob = sigmoid(z);
    return sc.prob;
}

struct Grads {
    Matrix w_q, w_k, w_v;
    std::vector<Matrix> gate_w;
    std::vector<std::vector<double>> gate_b;
    std::vector<double> head_w;
    double head_b = 0.0;

    static Grads like(const ModelParams& m) {
        Grads g;
        g.w_q = Matrix(m.w_q.rows(), m.w_q.cols());
        g.w_k = Matrix(m.w_k.rows(), m.w_k.cols());
        g.w_v = Matrix(m.w_v.rows(), m.w_v.cols());
        for (std::size_t i = 0; i < m.gate_w.size(); ++i) {
            g.gate_w.emplace_back(m.gate_w[i].rows(), m.gate_w[i].cols());
            g.gate_b.emplace_back(m.gate_b[i].size(), 0.0);
        }
        g.head_w.assign(m.head_w.size(), 0.0);
        return g;
    }
};

/// Backprop for one sample. `dz` carries the batch-mean BCE factor
/// (p - y)/batch; `commit_coeff` = alpha*beta*2/total_batch_rows adds the
/// commitment pull, and the attention gradient reaches W_k by the
/// straight-through copy at the quantizer.
inline void backward_sample(const EventSequence& seq, std::span<const double> cand,
                            const ModelParams& model, const SampleScratch& sc, double dz,
                            double commit_coeff, Grads& grads) {
    const std::size_t l = seq.length();
    const std::size_t dg = model.gvq.group_dim();
    const std::size_t heads = model.gvq.num_heads;
    const std::size_t groups = model.gvq.num_groups;
    const std::size_t m_scales = model.lambdas.size();
    const double qscale = 1.0 / std::sqrt(static_cast<double>(dg));

    for (std::size_t c = 0; c < sc.head_input.size(); ++c) {
        grads.head_w[c] += dz * sc.head_input[c];
    }
    grads.head_b += dz;

    Matrix d_values(l, model.gvq.model_dim);
    Matrix d_khat(l, model.gvq.model_dim);  // concatenated per-group slices
    std::vector<double> d_q_raw(heads * dg, 0.0);

    std::vector<double> dw(l), dkappa;
    for (std::size_t h = 0; h < heads; ++h) {
        const HeadScratch& hs = sc.heads[h];
        const std::size_t g = model.gvq.group_of(h);
        std::vector<double> dattn(dg);
        for (std::size_t c = 0; c < dg; ++c) dattn[c] = dz * model.head_w[h * dg + c];

        double dw_dot_w = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            const auto v = sc.values.row(i);
            double s = 0.0;
            for (std::size_t c = 0; c < dg; ++c) s += dattn[c] * v[g * dg + c];
            dw[i] = s;
            dw_dot_w += s * hs.weights[i];
            auto dv = d_values.row(i);
            for (std::size_t c = 0; c < dg; ++c) dv[g * dg + c] += hs.weights[i] * dattn[c];
        }

        std::vector<double> dq(dg, 0.0);
        if (m_scales > 0) dkappa.assign(l, 0.0);
        for (std::size_t i = 0; i < l; ++i) {
            const double t = dw[i] - dw_dot_w;
            const double dl = hs.weights[i] * t;
            const auto kh = sc.khat[g].row(i);
            auto dkh = d_khat.row(i);
            for (std::size_t c = 0; c < dg; ++c) {
                dq[c] += dl * kh[c];
                dkh[g * dg + c] += dl * hs.q[c];
            }
            if (m_scales > 0) dkappa[i] = t * hs.exp_shift[i] * hs.inv_den;
        }

        if (m_scales > 0) {
            std::vector<double> dtheta(m_scales, 0.0);
            for (std::size_t m = 0; m < m_scales; ++m) {
                double acc = 0.0;
                for (std::size_t i = 0; i < l; ++i) acc += dkappa[i] * hs.phi(m, i);
                dtheta[m] = acc;
            }
            double mix = 0.0;
            for (std::size_t m = 0; m < m_scales; ++m) mix += dtheta[m] * hs.theta[m];
            for (std::size_t m = 0; m < m_scales; ++m) {
                const double dglog = hs.theta[m] * (dtheta[m] - mix);
                auto gw = grads.gate_w[g].row(m);
                const auto mw = model.gate_w[g].row(m);
                for (std::size_t c = 0; c < dg; ++c) {
                    gw[c] += dglog * hs.q[c];
                    dq[c] += dglog * mw[c];
                }
                grads.gate_b[g][m] += dglog;
            }
        }

        for (std::size_t c = 0; c < dg; ++c) d_q_raw[h * dg + c] += dq[c] * qscale;
    }

    // W_q through the candidate projection.
    for (std::size_t a = 0; a < model.d_in; ++a) {
        const double xa = cand[a];
        auto gq = grads.w_q.row(a);
        for (std::size_t c = 0; c < d_q_raw.size(); ++c) gq[c] += xa * d_q_raw[c];
    }

    // Keys: straight-through copy of the quantized-key gradient plus the
    // commitment pull toward the assigned codewords.
    Matrix d_keys = std::move(d_khat);
    if (commit_coeff != 0.0) {
        for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t i = 0; i < l; ++i) {
                const auto kh = sc.khat[g].row(i);
                auto dk = d_keys.row(i);
                const auto k = sc.keys.row(i);
                for (std::size_t c = 0; c < dg; ++c) {
                    dk[g * dg + c] += commit_coeff * (k[g * dg + c] - kh[c]);
                }
            }
        }
    }
    for (std::size_t i = 0; i < l; ++i) {
        const auto fk = seq.key_feats.row(i);
        const auto dk = d_keys.row(i);
        for (std::size_t a = 0; a < model.d_in; ++a) {
            auto gk = grads.w_k.row(a);
            const double fa = fk[a];
            for (std::size_t c = 0; c < model.gvq.model_dim; ++c) gk[c] += fa * dk[c];
        }
    }

    // Values back through the norm clip: J = s (I - r̂ r̂ᵀ) on clipped rows.
    for (std::size_t i = 0; i < l; ++i) {
        auto dv = d_values.row(i);
        std::vector<double> dv_raw(dv.begin(), dv.end());
        if (sc.v_scale[i] < 1.0) {
            const auto raw = sc.v_raw.row(i);
            const double n = l2_norm(raw);
            double proj = 0.0;
            for (std::size_t c = 0; c < dv_raw.size(); ++c) proj += dv_raw[c] * raw[c] / n;
            for (std::size_t c = 0; c < dv_raw.size(); ++c) {
                dv_raw[c] = sc.v_scale[i] * (dv_raw[c] - proj * raw[c] / n);
            }
        }
        const auto fv = seq.value_feats.row(i);
        for (std::size_t a = 0; a < model.d_in; ++a) {
            auto gv = grads.w_v.row(a);
            const double fa = fv[a];
            for (std::size_t c = 0; c < dv_raw.size(); ++c) gv[c] += fa * dv_raw[c];
        }
    }
}

}  // namespace detail

/// p = sigmoid(head · [attention output ‖ candidate]) for one impression.
inline double forward_predict(const EventSequence& seq, std::span<const double> candidate,
                              const ModelParams& model, const TrainConfig& cfg,
                              std::int64_t query_time = 0) {
    if (!model.codebooks_ready) throw config_error("forward_predict: codebooks not initialized");
    detail::SampleScratch sc;
    const std::int64_t tq = query_time ? query_time : seq.timestamps.back();
    return detail::forward_sample(seq, candidate, tq, model, cfg, sc);
}

struct EpochMetrics {
    double rec = 0.0;
    double joint = 0.0;
    std::vector<VqLossTerms> vq;  // per group
    double max_key_err = 0.0;
    double auc = 0.5;
};

/// Seeds every group codebook with k-means++ over the given samples' keys.
inline void init_codebooks(const SyntheticDataset& ds, ModelParams& model, const TrainConfig& cfg,
                           std::span<const std::size_t> sample_indices) {
    const std::size_t dg = model.gvq.group_dim();
    for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
        std::vector<double> pool;
        for (std::size_t s : sample_indices) {
            const EventSequence& seq = ds.sequences[ds.samples[s].user];
            const Matrix keys = matmul(seq.key_feats, model.w_k);
            for (std::size_t i = 0; i < keys.rows(); ++i) {
                const auto r = keys.row(i);
                pool.insert(pool.end(), r.begin() + g * dg, r.begin() + (g + 1) * dg);
            }
        }
        const std::size_t pool_rows = pool.size() / dg;
        Matrix keypool(pool_rows, dg, std::move(pool));
        model.codebooks[g] = Codebook::kmeanspp(keypool, cfg.codebook_size, cfg.seed + g);
    }
    model.codebooks_ready = true;
}

/// Forward-only pass over the whole sample set; no parameter updates.
inline EpochMetrics evaluate(const SyntheticDataset& ds, const ModelParams& model,
                             const TrainConfig& cfg) {
    if (!model.codebooks_ready) throw config_error("evaluate: codebooks not initialized");
    EpochMetrics m;
    m.vq.assign(model.gvq.num_groups, VqLossTerms{0.0, 0.0, cfg.beta});
    std::vector<double> preds;
    std::vector<int> labels;
    detail::SampleScratch sc;
    const std::size_t dg = model.gvq.group_dim();
    std::size_t total_rows = 0;
    std::vector<double> sq_acc(model.gvq.num_groups, 0.0);
    for (const DatasetSample& s : ds.samples) {
        const EventSequence& seq = ds.sequences[s.user];
        const auto cand = ds.items.key_feats.row(ds.items.row_of(s.item_id));
        preds.push_back(detail::forward_sample(seq, cand, s.query_time, model, cfg, sc));
        labels.push_back(s.label);
        total_rows += seq.length();
        for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
            for (std::size_t i = 0; i < seq.length(); ++i) {
                double d2 = 0.0;
                for (std::size_t c = 0; c < dg; ++c) {
                    const double e = sc.keys(i, g * dg + c) - sc.khat[g](i, c);
                    d2 += e * e;
                }
                sq_acc[g] += d2;
            }
        }
        // Max over full-width key rows.
        for (std::size_t i = 0; i < seq.length(); ++i) {
            double d2 = 0.0;
            for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
                for (std::size_t c = 0; c < dg; ++c) {
                    const double e = sc.keys(i, g * dg + c) - sc.khat[g](i, c);
                    d2 += e * e;
                }
            }
            m.max_key_err = std::max(m.max_key_err, std::sqrt(d2));
        }
    }
    for (std::size_t g = 0; g < model.gvq.num_groups; ++g) {
        const double mean = sq_acc[g] / static_cast<double>(total_rows);
        m.vq[g] = VqLossTerms{mean, mean, cfg.beta};
    }
    m.rec = rec_loss(preds, labels);
    m.joint = joint_loss(m.rec, m.vq, cfg.alpha);
    m.auc = auc_rank_sum(preds, labels);
    return m;
}

/// One epoch of minibatch SGD with straight-through key gradients;
/// codebooks move by the spec'd pull rule once per batch and dead codes are
/// re-seeded at epoch end.
inline EpochMetrics train_epoch(const SyntheticDataset& ds, ModelParams& model,
                                const TrainConfig& cfg, std::size_t epoch = 0) {
    cfg.validate();
    if (ds.samples.empty()) throw param_error("train_epoch: empty dataset");
    std::vector<std::size_t> order(ds.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    if (!model.codebooks_ready) {
        const std::size_t first = std::min(cfg.batch_size, order.size());
        init_codebooks(ds, model, cfg, std::span<const std::size_t>(order).first(first));
    }

    const std::size_t groups = model.gvq.num_groups;
    const std::size_t dg = model.gvq.group_dim();
    EpochMetrics metrics;
    metrics.vq.assign(groups, VqLossTerms{0.0, 0.0, cfg.beta});
    std::vector<double> preds_all;
    std::vector<int> labels_all;
    std::vector<double> sq_acc(groups, 0.0);
    std::size_t rows_all = 0;

    detail::SampleScratch sc;
    std::vector<Matrix> last_batch_keys(groups);  // per-group pools for dead-code reinit
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const std::size_t batch = end - start;

        std::size_t batch_rows = 0;
        for (std::size_t idx = start; idx < end; ++idx) {
            batch_rows += ds.sequences[ds.samples[order[idx]].user].length();
        }

        detail::Grads grads = detail::Grads::like(model);
        std::vector<Matrix> batch_keys(groups, Matrix(batch_rows, dg));
        std::vector<Assignment> batch_asg(groups);
        for (auto& a : batch_asg) a.indices.reserve(batch_rows);

        double batch_bce = 0.0;
        std::vector<double> batch_sq(groups, 0.0);
        std::size_t row_cursor = 0;
        const double commit_coeff =
            cfg.alpha * cfg.beta * 2.0 / static_cast<double>(batch_rows);
        for (std::size_t idx = start; idx < end; ++idx) {
            const DatasetSample& s = ds.samples[order[idx]];
            const EventSequence& seq = ds.sequences[s.user];
            const auto cand = ds.items.key_feats.row(ds.items.row_of(s.item_id));
            const double p = detail::forward_sample(seq, cand, s.query_time, model, cfg, sc);
            preds_all.push_back(p);
            labels_all.push_back(s.label);

            const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
            batch_bce += s.label ? -std::log(pc) : -std::log(1.0 - pc);

            for (std::size_t g = 0; g < groups; ++g) {
                for (std::size_t i = 0; i < seq.length(); ++i) {
                    const auto src = sc.keys.row(i);
                    std::copy(src.begin() + g * dg, src.begin() + (g + 1) * dg,
                              batch_keys[g].row(row_cursor + i).begin());
                    batch_asg[g].indices.push_back(sc.assignment[g].indices[i]);
                }
                for (std::size_t i = 0; i < seq.length(); ++i) {
                    batch_sq[g] += Codebook::sq_dist(
                        std::span<const double>(batch_keys[g].row(row_cursor + i)),
                        sc.khat[g].row(i));
                }
            }
            for (std::size_t i = 0; i < seq.length(); ++i) {
                double d2 = 0.0;
                for (std::size_t g = 0; g < groups; ++g) {
                    for (std::size_t c = 0; c < dg; ++c) {
                        const double e = sc.keys(i, g * dg + c) - sc.khat[g](i, c);
                        d2 += e * e;
                    }
                }
                metrics.max_key_err = std::max(metrics.max_key_err, std::sqrt(d2));
            }
            row_cursor += seq.length();

            const double dz = (p - static_cast<double>(s.label)) / static_cast<double>(batch);
            detail::backward_sample(seq, cand, model, sc, dz, commit_coeff, grads);
        }

        double batch_vq = 0.0;
        for (std::size_t g = 0; g < groups; ++g) {
            const double mean = batch_sq[g] / static_cast<double>(batch_rows);
            batch_vq += mean * (1.0 + cfg.beta);
            sq_acc[g] += batch_sq[g];
        }
        const double batch_loss = batch_bce / static_cast<double>(batch) + cfg.alpha * batch_vq;
        if (!std::isfinite(batch_loss)) {
            std::ostringstream dump;
            dump << "train_epoch: non-finite loss at epoch " << epoch << " batch "
                 << start / cfg.batch_size << " (bce=" << batch_bce << ", vq=" << batch_vq
                 << ", |w_k|=" << l2_norm({model.w_k.data(), model.w_k.size()}) << ")";
            throw divergence_error(dump.str());
        }

        if (cfg.lr > 0.0) {
            auto step = [&](Matrix& w, const Matrix& g) {
                for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= cfg.lr * g.data()[i];
            };
            step(model.w_q, grads.w_q);
            step(model.w_k, grads.w_k);
            step(model.w_v, grads.w_v);
            for (std::size_t g = 0; g < groups; ++g) {
                step(model.gate_w[g], grads.gate_w[g]);
                for (std::size_t m = 0; m < model.gate_b[g].size(); ++m) {
                    model.gate_b[g][m] -= cfg.lr * grads.gate_b[g][m];
                }
            }
            for (std::size_t c = 0; c < model.head_w.size(); ++c) {
                model.head_w[c] -= cfg.lr * grads.head_w[c];
            }
            model.head_b -= cfg.lr * grads.head_b;
        }
        for (std::size_t g = 0; g < groups; ++g) {
            model.codebooks[g] =
                update_codebook(std::move(model.codebooks[g]), batch_keys[g], batch_asg[g],
                                cfg.codebook_lr);
        }
        if (end == order.size()) last_batch_keys = std::move(batch_keys);
    }

    // Dead-code refresh once per epoch, seeded from the last batch's keys.
    for (std::size_t g = 0; g < groups; ++g) {
        model.codebooks[g] = reinit_dead_codes(std::move(model.codebooks[g]), last_batch_keys[g],
                                               1, cfg.seed + 17 * (epoch + 1) + g);
    }

    for (const DatasetSample& s : ds.samples) rows_all += ds.sequences[s.user].length();
    for (std::size_t g = 0; g < groups; ++g) {
        const double mean = sq_acc[g] / static_cast<double>(rows_all);
        metrics.vq[g] = VqLossTerms{mean, mean, cfg.beta};
    }
    metrics.rec = rec_loss(preds_all, labels_all);
    metrics.joint = joint_loss(metrics.rec, metrics.vq, cfg.alpha);
    metrics.auc = auc_rank_sum(preds_all, labels_all);
    return metrics;
}

/// Full training driver: epochs of train_epoch with shared config.
inline std::vector<EpochMetrics> train(const SyntheticDataset& ds, ModelParams& model,
                                       const TrainConfig& cfg) {
    std::vector<EpochMetrics> out;
    for (std::size_t e = 0; e < cfg.epochs; ++e) out.push_back(train_epoch(ds, model, cfg, e));
    return out;
}

struct FdReport {
    double w_q = 0.0;
    double w_v = 0.0;
    double head = 0.0;
    double gate = 0.0;
    double w_k_ste = 0.0;  // straight-through convention: FD on the frozen-quantizer loss
    std::size_t skipped = 0;

    double max_nonquantized() const { return std::max({w_q, w_v, head, gate}); }
};

/// Central-difference audit of the backward pass on a dataset slice.
/// Assignments are pinned at the base point during every evaluation;
/// coordinates whose perturbation would flip an assignment or a value-clip
/// active set are detected and skipped. W_k is compared against the
/// straight-through surrogate (attention keys move with K around the frozen
/// quantization, codebook term frozen), whose exact gradient is the STE
/// backward.
inline FdReport finite_diff_check(ModelParams model, const SyntheticDataset& ds,
                                  std::span<const std::size_t> sample_indices, double eps,
                                  const TrainConfig& cfg) {
    if (!(eps >= 1e-7 && eps <= 1e-4)) throw param_error("finite_diff_check: eps out of range");
    if (!model.codebooks_ready) throw config_error("finite_diff_check: codebooks not initialized");
    if (sample_indices.empty()) throw param_error("finite_diff_check: empty slice");

    const std::size_t n_samples = sample_indices.size();
    const std::size_t groups = model.gvq.num_groups;

    // Base structures: assignments, keys, clip active sets.
    std::vector<std::vector<Assignment>> base_asg(n_samples);
    std::vector<Matrix> base_keys(n_samples);
    std::vector<std::vector<bool>> base_clipped(n_samples);
    std::size_t total_rows = 0;
    {
        detail::SampleScratch sc;
        for (std::size_t k = 0; k < n_samples; ++k) {
            const DatasetSample& s = ds.samples[sample_indices[k]];
            const EventSequence& seq = ds.sequences[s.user];
            const auto cand = ds.items.key_feats.row(ds.items.row_of(s.item_id));
            detail::forward_sample(seq, cand, s.query_time, model, cfg, sc);
            base_asg[k] = sc.assignment;
            base_keys[k] = sc.keys;
            base_clipped[k].resize(seq.length());
            for (std::size_t i = 0; i < seq.length(); ++i) {
                base_clipped[k][i] = sc.v_scale[i] < 1.0;
            }
            total_rows += seq.length();
        }
    }

    // Analytic gradients at the base point.
    detail::Grads grads = detail::Grads::like(model);
    double grads_head_b = 0.0;
    {
        detail::SampleScratch sc;
        const double commit_coeff = cfg.alpha * cfg.beta * 2.0 / static_cast<double>(total_rows);
        for (std::size_t k = 0; k < n_samples; ++k) {
            const DatasetSample& s = ds.samples[sample_indices[k]];
            const EventSequence& seq = ds.sequences[s.user];
            const auto cand = ds.items.key_feats.row(ds.items.row_of(s.item_id));
            detail::ForwardOverride ov;
            ov.assignments = &base_asg[k];
            const double p = detail::forward_sample(seq, cand, s.query_time, model, cfg, sc, ov);
            const double dz =
                (p - static_cast<double>(s.label)) / static_cast<double>(n_samples);
            detail::backward_sample(seq, cand, model, sc, dz, commit_coeff, grads);
        }
        grads_head_b = grads.head_b;
    }

    // Loss under pinned assignments; in STE mode the attention keys ride
    // along with K and only the commitment term of the VQ loss survives.
    auto loss_at = [&](bool ste_mode) {
        detail::SampleScratch sc;
        double bce = 0.0;
        double commit_sq = 0.0;
        const std::size_t dg = model.gvq.group_dim();
        for (std::size_t k = 0; k < n_samples; ++k) {
            const DatasetSample& s = ds.samples[sample_indices[k]];
            const EventSequence& seq = ds.sequences[s.user];
            const auto cand = ds.items.key_feats.row(ds.items.row_of(s.item_id));
            detail::ForwardOverride ov;
            ov.assignments = &base_asg[k];
            if (ste_mode) ov.ste_base_keys = &base_keys[k];
            const double p = detail::forward_sample(seq, cand, s.query_time, model, cfg, sc, ov);
            const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
            bce += s.label ? -std::log(pc) : -std::log(1.0 - pc);
            if (ste_mode) {
                for (std::size_t g = 0; g < groups; ++g) {
                    const Matrix frozen = quantize(Matrix(seq.length(), dg), model.codebooks[g],
                                                   base_asg[k][g]);
                    for (std::size_t i = 0; i < seq.length(); ++i) {
                        for (std::size_t c = 0; c < dg; ++c) {
                            const double e = sc.keys(i, g * dg + c) - frozen(i, c);
                            commit_sq += e * e;
                        }
                    }
                }
            }
        }
        double loss = bce / static_cast<double>(n_samples);
        if (ste_mode) {
            loss += cfg.alpha * cfg.beta * commit_sq / static_cast<double>(total_rows);
        }
        return loss;
    };

    // Structure probes for skip detection.
    auto assignments_match = [&]() {
        for (std::size_t k = 0; k < n_samples; ++k) {
            const DatasetSample& s = ds.samples[sample_indices[k]];
            const EventSequence& seq = ds.sequences[s.user];
            const Matrix keys = matmul(seq.key_feats, model.w_k);
            const std::size_t dg = model.gvq.group_dim();
            for (std::size_t g = 0; g < groups; ++g) {
                Matrix keys_g(seq.length(), dg);
                for (std::size_t i = 0; i < seq.length(); ++i) {
                    const auto src = keys.row(i);
                    std::copy(src.begin() + g * dg, src.begin() + (g + 1) * dg,
                              keys_g.row(i).begin());
                }
                const Assignment a = assign_nearest(keys_g, model.codebooks[g]);
                if (a.indices != base_asg[k][g].indices) return false;
            }
        }
        return true;
    };
    auto clip_sets_match = [&]() {
        for (std::size_t k = 0; k < n_samples; ++k) {
            const DatasetSample& s = ds.samples[sample_indices[k]];
            const EventSequence& seq = ds.sequences[s.user];
            const Matrix v = matmul(seq.value_feats, model.w_v);
            for (std::size_t i = 0; i < seq.length(); ++i) {
                if ((l2_norm(v.row(i)) > cfg.value_norm_bound) != base_clipped[k][i]) return false;
            }
        }
        return true;
    };

    std::mt19937_64 coord_rng(0x5eedULL ^ sample_indices[0]);
    FdReport rep;
    auto check_tensor = [&](double* data, const double* grad, std::size_t count, bool ste,
                            int structure, double& out_max) {
        std::vector<std::size_t> coords(count);
        std::iota(coords.begin(), coords.end(), 0);
        std::shuffle(coords.begin(), coords.end(), coord_rng);
        const std::size_t n_check = std::min<std::size_t>(count, 24);
        for (std::size_t t = 0; t < n_check; ++t) {
            const std::size_t c = coords[t];
            const double save = data[c];
            bool ok = true;
            data[c] = save + eps;
            if (structure == 1) ok = assignments_match();
            if (structure == 2) ok = clip_sets_match();
            const double fp = ok ? loss_at(ste) : 0.0;
            if (ok) {
                data[c] = save - eps;
                if (structure == 1) ok = assignments_match();
                if (structure == 2) ok = clip_sets_match();
            }
            const double fm = ok ? loss_at(ste) : 0.0;
            data[c] = save;
            if (!ok) {
                ++rep.skipped;
                continue;
            }
            const double fd = (fp - fm) / (2.0 * eps);
            const double g = grad[c];
            // The 1e-6 floor keeps dead coordinates from comparing central-
            // difference noise (~1e-12 at eps=1e-5) against a zero gradient.
            const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6});
            out_max = std::max(out_max, rel);
        }
    };

    check_tensor(model.w_q.data(), grads.w_q.data(), model.w_q.size(), false, 0, rep.w_q);
    check_tensor(model.w_v.data(), grads.w_v.data(), model.w_v.size(), false, 2, rep.w_v);
    check_tensor(model.head_w.data(), grads.head_w.data(), model.head_w.size(), false, 0,
                 rep.head);
    check_tensor(&model.head_b, &grads_head_b, 1, false, 0, rep.head);
    for (std::size_t g = 0; g < groups && !model.lambdas.empty(); ++g) {
        check_tensor(model.gate_w[g].data(), grads.gate_w[g].data(), model.gate_w[g].size(), false,
                     0, rep.gate);
        check_tensor(model.gate_b[g].data(), grads.gate_b[g].data(), model.gate_b[g].size(), false,
                     0, rep.gate);
    }
    check_tensor(model.w_k.data(), grads.w_k.data(), model.w_k.size(), true, 1, rep.w_k_ste);
    return rep;
}

}  // namespace vql
