#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vql/codebook.hpp"
#include "vql/error.hpp"
#include "vql/matrix.hpp"

namespace vql {

/// Inputs for one attention evaluation. Queries carry the 1/sqrt(d) scaling
/// exactly once (applied by make()); value rows are norm-clipped so the
/// output error bound is directly assertable.
struct AttentionInputs {
    Matrix queries;  // B x d, pre-scaled
    Matrix keys;     // L x d
    Matrix values;   // L x d, row norms <= value_norm_bound
    double value_norm_bound = 4.0;

    static AttentionInputs make(const Matrix& raw_queries, Matrix keys, Matrix values,
                                double value_norm_bound = 4.0) {
        if (raw_queries.cols() != keys.cols()) throw shape_error("attention: query dim != key dim");
        if (keys.rows() != values.rows()) throw shape_error("attention: keys/values row mismatch");
        if (keys.cols() != values.cols()) throw shape_error("attention: key dim != value dim");
        if (keys.cols() == 0) throw shape_error("attention: zero feature dim");
        AttentionInputs in;
        const double scale = 1.0 / std::sqrt(static_cast<double>(raw_queries.cols()));
        in.queries = raw_queries;
        for (std::size_t i = 0; i < in.queries.size(); ++i) in.queries.data()[i] *= scale;
        in.keys = std::move(keys);
        in.values = clip_row_norms(values, value_norm_bound);
        in.value_norm_bound = value_norm_bound;
        return in;
    }
};

/// Head/group wiring for grouped vector quantization. Heads map onto
/// channel groups GQA-style; the default mapping is contiguous blocks.
struct GvqConfig {
    std::size_t num_heads = 1;
    std::size_t num_groups = 1;
    std::size_t model_dim = 0;
    std::vector<std::size_t> head_to_group;  // empty -> contiguous blocks

    static GvqConfig make(std::size_t heads, std::size_t groups, std::size_t dim) {
        GvqConfig cfg;
        cfg.num_heads = heads;
        cfg.num_groups = groups;
        cfg.model_dim = dim;
        cfg.validate();
        return cfg;
    }

    std::size_t group_dim() const { return model_dim / num_groups; }

    std::size_t group_of(std::size_t head) const {
        if (!head_to_group.empty()) return head_to_group[head];
        return head * num_groups / num_heads;
    }

    void validate() const {
        if (num_groups == 0 || num_heads == 0) throw config_error("gvq: zero heads or groups");
        if (model_dim == 0 || model_dim % num_groups != 0) {
            throw config_error("gvq: group count must divide model dim");
        }
        if (num_heads < num_groups) throw config_error("gvq: need heads >= groups");
        if (!head_to_group.empty()) {
            if (head_to_group.size() != num_heads) throw config_error("gvq: bad head map length");
            for (std::size_t g : head_to_group) {
                if (g >= num_groups) throw config_error("gvq: head mapped to invalid group");
            }
        }
    }
};

struct TrainAttentionResult {
    Matrix outputs;  // B x d
    VqLossTerms loss_terms;
    Assignment assignment;
};

/// Worst case over the query batch of every component of the quantization
/// error bound chain: ||o - ô|| <= c ||α - α̂||_1 <= c ||δ||_inf
/// <= c ||Q|| max_i ||e_i||.
struct ErrorBoundReport {
    double measured_output_err = 0.0;  // max_b ||o_b - ô_b||_2
    double weight_l1_err = 0.0;        // max_b ||α_b - α̂_b||_1
    double logit_inf_err = 0.0;        // max_b max_i |Q_b e_i^T|
    double max_key_err = 0.0;          // max_i ||e_i||_2
    double bound = 0.0;                // c * max_b ||Q_b||_2 * max_key_err
};

namespace detail {

inline Matrix exp_elementwise(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = std::exp(m.data()[i]);
    return out;
}

inline void check_attention_shapes(const AttentionInputs& in) {
    if (in.keys.rows() == 0) throw empty_sequence_error("attention over empty sequence");
    if (in.queries.cols() != in.keys.cols() || in.keys.cols() != in.values.cols() ||
        in.keys.rows() != in.values.rows()) {
        throw shape_error("attention: inconsistent shapes");
    }
}

}  // namespace detail

/// Exact reference attention: o = softmax(Q K^T) V, O(BLd).
inline Matrix oracle_attention(const AttentionInputs& in) {
    detail::check_attention_shapes(in);
    const Matrix scores = matmul_nt(in.queries, in.keys);
    return matmul(row_softmax(scores), in.values);
}

/// Training-path attention: keys are replaced by their nearest codewords
/// (K̂ = ΔC), values stay raw. Returns the VQ loss terms and the assignment
/// so the caller can route straight-through gradients and update caches.
inline TrainAttentionResult train_attention(const AttentionInputs& in, const Codebook& codebook,
                                            double beta = 0.25) {
    detail::check_attention_shapes(in);
    if (codebook.dim() != in.keys.cols()) throw shape_error("train_attention: codebook dim != key dim");
    TrainAttentionResult r;
    r.assignment = assign_nearest(in.keys, codebook);
    const Matrix quantized = quantize(in.keys, codebook, r.assignment);
    const Matrix scores = matmul_nt(in.queries, quantized);
    r.outputs = matmul(row_softmax(scores), in.values);
    r.loss_terms = vq_loss(in.keys, quantized, beta);
    return r;
}

/// Cached inference: ô = [exp(QC^T) v_cache] / [exp(QC^T) ones_cache], with
/// the per-query max over the N codeword logits subtracted from numerator
/// and denominator scores alike (the ratio is shift-invariant). Runtime is
/// O(BNd) — independent of the original sequence length.
inline Matrix infer_attention(const Matrix& queries, const Codebook& codebook,
                              const Matrix& v_cache, const Matrix& ones_cache) {
    const std::size_t n = codebook.size();
    const std::size_t d = v_cache.cols();
    if (queries.cols() != codebook.dim()) throw shape_error("infer_attention: query dim != codebook dim");
    if (v_cache.rows() != n || ones_cache.rows() != n || ones_cache.cols() != 1) {
        throw shape_error("infer_attention: cache shape mismatch");
    }
    bool any_mass = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (ones_cache(j, 0) < 0.0) throw param_error("infer_attention: negative ones cache entry");
        if (ones_cache(j, 0) > 0.0) any_mass = true;
    }
    if (!any_mass) throw degenerate_cache_error("infer_attention: cache holds no events");

    const Matrix logits = matmul_nt(queries, codebook.codewords());  // B x N
    Matrix out(queries.rows(), d);
    std::vector<double> e(n);
    for (std::size_t b = 0; b < queries.rows(); ++b) {
        const auto lr = logits.row(b);
        const double m = *std::max_element(lr.begin(), lr.end());
        for (std::size_t j = 0; j < n; ++j) e[j] = std::exp(lr[j] - m);
        double den = 0.0;
        auto o = out.row(b);
        for (std::size_t j = 0; j < n; ++j) {
            den += e[j] * ones_cache(j, 0);
            const auto vc = v_cache.row(j);
            for (std::size_t k = 0; k < d; ++k) o[k] += e[j] * vc[k];
        }
        if (den == 0.0) throw degenerate_cache_error("infer_attention: zero denominator");
        for (std::size_t k = 0; k < d; ++k) o[k] /= den;
    }
    return out;
}

/// Property check for the one-hot extraction identity exp(U) W = exp(U W)
/// with W one-hot per column. Equality is exact (bitwise), so this returns
/// the elementwise comparison with no tolerance.
inline bool one_hot_extraction_check(const Matrix& u, const Matrix& w_onehot) {
    if (u.cols() != w_onehot.rows()) throw shape_error("one_hot_extraction_check: dim mismatch");
    for (std::size_t j = 0; j < w_onehot.cols(); ++j) {
        std::size_t ones = 0;
        for (std::size_t i = 0; i < w_onehot.rows(); ++i) {
            const double v = w_onehot(i, j);
            if (v == 1.0) {
                ++ones;
            } else if (v != 0.0) {
                throw param_error("one_hot_extraction_check: entries must be 0 or 1");
            }
        }
        if (ones != 1) throw param_error("one_hot_extraction_check: column is not one-hot");
    }
    const Matrix lhs = matmul(detail::exp_elementwise(u), w_onehot);
    const Matrix rhs = detail::exp_elementwise(matmul(u, w_onehot));
    return lhs == rhs;
}

/// Per-head cached attention in the group subspaces, heads concatenated.
/// Output width is num_heads * group_dim (= model_dim when H == G); the
/// value-cache budget is sum_g N*d_g = N*d for every G.
inline Matrix gvq_attention(const std::vector<Matrix>& query_heads,
                            const std::vector<Codebook>& codebooks,
                            const std::vector<Matrix>& v_caches,
                            const std::vector<Matrix>& ones_caches, const GvqConfig& config) {
    config.validate();
    if (query_heads.size() != config.num_heads) throw config_error("gvq_attention: head count mismatch");
    if (codebooks.size() != config.num_groups || v_caches.size() != config.num_groups ||
        ones_caches.size() != config.num_groups) {
        throw config_error("gvq_attention: per-group container size mismatch");
    }
    const std::size_t dg = config.group_dim();
    const std::size_t batch = query_heads.front().rows();
    Matrix out(batch, config.num_heads * dg);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
        if (query_heads[h].cols() != dg || query_heads[h].rows() != batch) {
            throw shape_error("gvq_attention: bad query head shape");
        }
        const std::size_t g = config.group_of(h);
        const Matrix oh = infer_attention(query_heads[h], codebooks[g], v_caches[g], ones_caches[g]);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto src = oh.row(b);
            std::copy(src.begin(), src.end(), out.row(b).begin() + h * dg);
        }
    }
    return out;
}

/// Evaluates the full bound chain on the oracle path and asserts the two
/// inequalities the chain promises before returning the report.
inline ErrorBoundReport error_bound_report(const AttentionInputs& in, const Codebook& codebook) {
    detail::check_attention_shapes(in);
    const Assignment asg = assign_nearest(in.keys, codebook);
    const Matrix quantized = quantize(in.keys, codebook, asg);

    const std::size_t rows = in.keys.rows(), d = in.keys.cols();
    Matrix key_err(rows, d);
    for (std::size_t i = 0; i < rows * d; ++i) {
        key_err.data()[i] = in.keys.data()[i] - quantized.data()[i];
    }

    ErrorBoundReport rep;
    for (std::size_t i = 0; i < rows; ++i) {
        rep.max_key_err = std::max(rep.max_key_err, l2_norm(key_err.row(i)));
    }

    const Matrix alpha = row_softmax(matmul_nt(in.queries, in.keys));
    const Matrix alpha_hat = row_softmax(matmul_nt(in.queries, quantized));
    const Matrix o = matmul(alpha, in.values);
    const Matrix o_hat = matmul(alpha_hat, in.values);

    double max_q_norm = 0.0;
    std::vector<double> diff(d);
    for (std::size_t b = 0; b < in.queries.rows(); ++b) {
        double l1 = 0.0;
        for (std::size_t i = 0; i < rows; ++i) l1 += std::abs(alpha(b, i) - alpha_hat(b, i));
        rep.weight_l1_err = std::max(rep.weight_l1_err, l1);

        double dinf = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
            dinf = std::max(dinf, std::abs(dot(in.queries.row(b), key_err.row(i))));
        }
        rep.logit_inf_err = std::max(rep.logit_inf_err, dinf);

        for (std::size_t k = 0; k < d; ++k) diff[k] = o(b, k) - o_hat(b, k);
        rep.measured_output_err = std::max(rep.measured_output_err, l2_norm(diff));

        max_q_norm = std::max(max_q_norm, l2_norm(in.queries.row(b)));
    }
    rep.bound = in.value_norm_bound * max_q_norm * rep.max_key_err;

    if (rep.measured_output_err > rep.bound + 1e-12) {
        throw error("error_bound_report: output error exceeds bound");
    }
    if (rep.weight_l1_err > rep.logit_inf_err + 1e-12) {
        throw error("error_bound_report: weight l1 error exceeds logit error");
    }
    return rep;
}

}  // namespace vql
