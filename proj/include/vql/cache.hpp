#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "vql/codebook.hpp"
#include "vql/error.hpp"
#include "vql/matrix.hpp"
#include "vql/temporal.hpp"

namespace vql {

/// The one-hot assignment matrix Δ^T in compressed-sparse-column layout:
/// column j lists the events bucketed under codeword j, ascending.
struct AssignmentCsc {
    std::size_t num_codes = 0;   // N
    std::size_t num_events = 0;  // L
    std::vector<std::uint64_t> col_ptr;  // N+1
    std::vector<std::uint64_t> row_idx;  // L

    void validate() const {
        if (col_ptr.size() != num_codes + 1 || row_idx.size() != num_events) {
            throw corruption_error("csc: array lengths inconsistent with dims");
        }
        if (col_ptr.front() != 0 || col_ptr.back() != num_events) {
            throw corruption_error("csc: col_ptr endpoints invalid");
        }
        std::vector<bool> seen(num_events, false);
        for (std::size_t j = 0; j < num_codes; ++j) {
            if (col_ptr[j] > col_ptr[j + 1]) throw corruption_error("csc: col_ptr not monotone");
            for (std::uint64_t p = col_ptr[j]; p < col_ptr[j + 1]; ++p) {
                const std::uint64_t r = row_idx[p];
                if (r >= num_events) throw corruption_error("csc: row index out of range");
                if (seen[r]) throw corruption_error("csc: event appears twice");
                seen[r] = true;
            }
        }
    }
};

/// VQL_L: item id -> code index, O(I) storage, no per-user state.
struct LightCache {
    std::map<std::uint64_t, std::uint32_t> item_to_code;
};

/// VQL_H: per-group codeword aggregates Δ^T V and Δ^T 1, plus per-scale
/// kernel-weighted variants when built with a temporal config.
struct CacheBundle {
    std::uint32_t group_id = 0;
    Matrix v_cache;     // N x d_g
    Matrix ones_cache;  // N x 1
    std::vector<double> lambdas;      // empty -> plain bundle
    std::vector<ScaleCache> scales;   // parallel to lambdas
    std::uint64_t event_count = 0;
    std::uint64_t codebook_checksum = 0;
};

inline AssignmentCsc build_assignment_csc(const Assignment& assignment, std::size_t num_codes) {
    AssignmentCsc csc;
    csc.num_codes = num_codes;
    csc.num_events = assignment.size();
    csc.col_ptr.assign(num_codes + 1, 0);
    for (std::uint32_t j : assignment.indices) {
        if (j >= num_codes) throw corruption_error("build_assignment_csc: code index out of range");
        ++csc.col_ptr[j + 1];
    }
    for (std::size_t j = 0; j < num_codes; ++j) csc.col_ptr[j + 1] += csc.col_ptr[j];
    csc.row_idx.resize(assignment.size());
    std::vector<std::uint64_t> cursor(csc.col_ptr.begin(), csc.col_ptr.end() - 1);
    // Ascending event order within each bucket falls out of the forward scan.
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        csc.row_idx[cursor[assignment.indices[i]]++] = i;
    }
    return csc;
}

inline LightCache build_light_cache(std::span<const std::uint64_t> item_ids,
                                    const Matrix& item_keys, const Codebook& codebook) {
    if (item_ids.size() != item_keys.rows()) throw shape_error("build_light_cache: id/key count mismatch");
    const Assignment asg = assign_nearest(item_keys, codebook);
    LightCache lc;
    for (std::size_t i = 0; i < item_ids.size(); ++i) lc.item_to_code[item_ids[i]] = asg.indices[i];
    return lc;
}

namespace detail {

// Within-bucket sums run in ascending event order; buckets larger than
// this switch to pairwise (tree) summation to control drift at L ~ 100k.
inline constexpr std::size_t kPairwiseBucketThreshold = 1024;

template <class Weight>
inline void bucket_sum(std::span<const std::uint64_t> rows, const Matrix& values, Weight&& weight,
                       std::span<double> out_v, double& out_ones) {
    const std::size_t d = values.cols();
    if (rows.size() <= kPairwiseBucketThreshold) {
        for (std::uint64_t r : rows) {
            const double w = weight(r);
            const auto v = values.row(r);
            for (std::size_t k = 0; k < d; ++k) out_v[k] += w * v[k];
            out_ones += w;
        }
        return;
    }
    const std::size_t h = rows.size() / 2;
    std::vector<double> left_v(d, 0.0), right_v(d, 0.0);
    double left_ones = 0.0, right_ones = 0.0;
    bucket_sum(rows.first(h), values, weight, left_v, left_ones);
    bucket_sum(rows.subspan(h), values, weight, right_v, right_ones);
    for (std::size_t k = 0; k < d; ++k) out_v[k] += left_v[k] + right_v[k];
    out_ones += left_ones + right_ones;
}

}  // namespace detail

/// Aggregates values into codeword buckets. Plain weights are 1; with a
/// temporal config every scale m uses exp(lambda_m * t_i) over rebased
/// timestamps (all <= 0).
inline CacheBundle build_heavy_cache(const AssignmentCsc& csc, const Matrix& values,
                                     std::span<const double> timestamps = {},
                                     const TemporalConfig* temporal = nullptr,
                                     std::uint64_t codebook_checksum = 0) {
    csc.validate();
    if (values.rows() != csc.num_events) throw shape_error("build_heavy_cache: value rows != events");
    if (temporal != nullptr) {
        if (timestamps.size() != csc.num_events) {
            throw config_error("build_heavy_cache: temporal config requires timestamps");
        }
        for (double t : timestamps) {
            if (t > 0.0) throw config_error("build_heavy_cache: timestamps must be rebased (<= 0)");
        }
    }

    CacheBundle b;
    b.v_cache = Matrix(csc.num_codes, values.cols());
    b.ones_cache = Matrix(csc.num_codes, 1);
    b.event_count = csc.num_events;
    b.codebook_checksum = codebook_checksum;

    for (std::size_t j = 0; j < csc.num_codes; ++j) {
        const std::span<const std::uint64_t> rows{csc.row_idx.data() + csc.col_ptr[j],
                                                  csc.col_ptr[j + 1] - csc.col_ptr[j]};
        double ones = 0.0;
        detail::bucket_sum(rows, values, [](std::uint64_t) { return 1.0; }, b.v_cache.row(j), ones);
        b.ones_cache(j, 0) = ones;
    }

    if (temporal != nullptr) {
        b.lambdas = temporal->lambdas;
        b.scales.resize(b.lambdas.size());
        for (std::size_t m = 0; m < b.lambdas.size(); ++m) {
            const double lambda = b.lambdas[m];
            ScaleCache& sc = b.scales[m];
            sc.v_cache = Matrix(csc.num_codes, values.cols());
            sc.ones_cache = Matrix(csc.num_codes, 1);
            for (std::size_t j = 0; j < csc.num_codes; ++j) {
                const std::span<const std::uint64_t> rows{csc.row_idx.data() + csc.col_ptr[j],
                                                          csc.col_ptr[j + 1] - csc.col_ptr[j]};
                double ones = 0.0;
                detail::bucket_sum(
                    rows, values,
                    [&](std::uint64_t r) { return std::exp(lambda * timestamps[r]); },
                    sc.v_cache.row(j), ones);
                sc.ones_cache(j, 0) = ones;
            }
        }
    }
    return b;
}

/// Streaming append of one event. scale_weights must carry one kernel
/// weight per scale when the bundle has per-scale caches.
inline void update_heavy_cache_incremental(CacheBundle& bundle, std::size_t code,
                                           std::span<const double> value, double weight = 1.0,
                                           std::span<const double> scale_weights = {}) {
    if (code >= bundle.v_cache.rows()) {
        throw corruption_error("update_heavy_cache_incremental: code out of range");
    }
    if (value.size() != bundle.v_cache.cols()) {
        throw shape_error("update_heavy_cache_incremental: value dim mismatch");
    }
    if (weight < 0.0) throw param_error("update_heavy_cache_incremental: negative weight");
    if (scale_weights.size() != bundle.scales.size()) {
        throw config_error("update_heavy_cache_incremental: need one weight per scale");
    }
    auto vrow = bundle.v_cache.row(code);
    for (std::size_t k = 0; k < value.size(); ++k) vrow[k] += weight * value[k];
    bundle.ones_cache(code, 0) += weight;
    for (std::size_t m = 0; m < bundle.scales.size(); ++m) {
        auto srow = bundle.scales[m].v_cache.row(code);
        for (std::size_t k = 0; k < value.size(); ++k) srow[k] += scale_weights[m] * value[k];
        bundle.scales[m].ones_cache(code, 0) += scale_weights[m];
    }
    ++bundle.event_count;
}

/// Exact float counts backing the storage-accounting claims.
inline std::size_t heavy_cache_float_count(const CacheBundle& b) {
    std::size_t n = b.v_cache.size() + b.ones_cache.size();
    for (const ScaleCache& sc : b.scales) n += sc.v_cache.size() + sc.ones_cache.size();
    return n;
}

inline std::size_t csc_entry_count(const AssignmentCsc& csc) {
    return csc.col_ptr.size() + csc.row_idx.size();
}

}  // namespace vql
