#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "vql/attention.hpp"
#include "vql/codebook.hpp"
#include "vql/matrix.hpp"
#include "vql/temporal.hpp"

// Slow, direct evaluators kept deliberately independent of the cached code
// paths; the verify command and the property suites diff against these.
namespace vql::ref {

/// Dense one-hot assignment matrix Δ (L x N).
inline Matrix dense_one_hot(const Assignment& assignment, std::size_t num_codes) {
    Matrix delta(assignment.size(), num_codes);
    for (std::size_t i = 0; i < assignment.size(); ++i) delta(i, assignment.indices[i]) = 1.0;
    return delta;
}

/// Exhaustive nearest-codeword search over the full distance table.
inline Assignment brute_force_assign(const Matrix& keys, const Matrix& codewords) {
    Assignment a;
    a.indices.resize(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t arg = 0;
        for (std::size_t j = 0; j < codewords.rows(); ++j) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < keys.cols(); ++c) {
                const double d = keys(i, c) - codewords(j, c);
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                arg = static_cast<std::uint32_t>(j);
            }
        }
        a.indices[i] = arg;
    }
    return a;
}

/// Scalar-loop softmax-weighted sum; no matrix helpers involved.
inline Matrix per_element_attention(const Matrix& queries, const Matrix& keys,
                                    const Matrix& values) {
    Matrix out(queries.rows(), values.cols());
    std::vector<double> logits(keys.rows());
    for (std::size_t b = 0; b < queries.rows(); ++b) {
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < keys.cols(); ++c) s += queries(b, c) * keys(i, c);
            logits[i] = s;
        }
        double m = logits[0];
        for (double l : logits) m = std::max(m, l);
        double den = 0.0;
        for (double l : logits) den += std::exp(l - m);
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            const double w = std::exp(logits[i] - m) / den;
            for (std::size_t c = 0; c < values.cols(); ++c) out(b, c) += w * values(i, c);
        }
    }
    return out;
}

/// Per-event temporal attention: weights proportional to
/// exp(q k̂_i^T) * sum_m theta_m exp(-lambda_m (t_q - t_i)).
inline RowVector per_event_temporal(const RowVector& query, double t_q, const Matrix& quantized_keys,
                                    const Matrix& values, std::span<const double> timestamps,
                                    std::span<const double> theta, std::span<const double> lambdas) {
    const std::size_t l = quantized_keys.rows();
    std::vector<double> logits(l);
    for (std::size_t i = 0; i < l; ++i) logits[i] = dot(query.span(), quantized_keys.row(i));
    double shift = logits[0];
    for (double v : logits) shift = std::max(shift, v);

    RowVector out(values.cols());
    double den = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
        double kernel = 0.0;
        for (std::size_t m = 0; m < lambdas.size(); ++m) {
            kernel += theta[m] * std::exp(-lambdas[m] * (t_q - timestamps[i]));
        }
        const double w = std::exp(logits[i] - shift) * kernel;
        den += w;
        for (std::size_t c = 0; c < values.cols(); ++c) out[c] += w * values(i, c);
    }
    for (std::size_t c = 0; c < values.cols(); ++c) out[c] /= den;
    return out;
}

}  // namespace vql::ref
