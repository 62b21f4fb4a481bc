#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "vql/error.hpp"
#include "vql/matrix.hpp"

namespace vql {

/// One code index per event row; the sparse view of the one-hot assignment
/// matrix (exactly one 1 per row).
struct Assignment {
    std::vector<std::uint32_t> indices;

    std::size_t size() const { return indices.size(); }
};

struct VqLossTerms {
    double codebook_loss = 0.0;    // mean_i ||sg[k_i] - k̂_i||^2
    double commitment_loss = 0.0;  // mean_i ||k_i - sg[k̂_i]||^2
    double beta = 0.0;

    double total() const { return codebook_loss + beta * commitment_loss; }
};

/// Learnable N x d_g codeword matrix plus per-codeword usage counters for
/// the current epoch.
class Codebook {
  public:
    Codebook(std::size_t size, std::size_t dim)
        : codewords_(size, dim), usage_(size, 0) {
        if (size == 0) throw param_error("codebook size must be >= 1");
        if (dim == 0) throw param_error("codebook dim must be >= 1");
    }

    static Codebook from_matrix(Matrix codewords) {
        Codebook cb(codewords.rows(), codewords.cols());
        cb.codewords_ = std::move(codewords);
        return cb;
    }

    /// k-means++-style seeding: first codeword uniform over keys, the rest
    /// sampled proportional to squared distance from the nearest chosen
    /// seed. Falls back to uniform resampling once all residuals are zero
    /// (fewer distinct keys than codewords).
    static Codebook kmeanspp(const Matrix& keys, std::size_t size, std::uint64_t seed) {
        if (keys.rows() == 0) throw param_error("kmeanspp: empty key set");
        Codebook cb(size, keys.cols());
        std::mt19937_64 rng(seed);
        const std::size_t n = keys.rows();
        std::uniform_int_distribution<std::size_t> uni(0, n - 1);

        std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
        std::size_t first = uni(rng);
        copy_row(keys, first, cb.codewords_, 0);
        for (std::size_t j = 1; j < size; ++j) {
            const auto prev = cb.codewords_.row(j - 1);
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                dist2[i] = std::min(dist2[i], sq_dist(keys.row(i), prev));
                total += dist2[i];
            }
            std::size_t pick;
            if (total > 0.0) {
                std::uniform_real_distribution<double> u(0.0, total);
                double target = u(rng), acc = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += dist2[i];
                    if (acc >= target) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = uni(rng);
            }
            copy_row(keys, pick, cb.codewords_, j);
        }
        return cb;
    }

    std::size_t size() const { return codewords_.rows(); }
    std::size_t dim() const { return codewords_.cols(); }

    const Matrix& codewords() const { return codewords_; }
    Matrix& codewords() { return codewords_; }

    const std::vector<std::uint64_t>& usage() const { return usage_; }
    std::vector<std::uint64_t>& usage() { return usage_; }

    static double sq_dist(std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            s += d * d;
        }
        return s;
    }

  private:
    static void copy_row(const Matrix& src, std::size_t si, Matrix& dst, std::size_t di) {
        const auto r = src.row(si);
        std::copy(r.begin(), r.end(), dst.row(di).begin());
    }

    Matrix codewords_;
    std::vector<std::uint64_t> usage_;
};

/// indices[i] = argmin_j ||k_i - c_j||_2, ties broken toward the lowest
/// index. Distances are evaluated directly as sum of squared differences so
/// results match a brute-force distance table bit for bit.
inline Assignment assign_nearest(const Matrix& keys, const Codebook& codebook) {
    if (keys.cols() != codebook.dim()) throw shape_error("assign_nearest: key dim != codebook dim");
    Assignment a;
    a.indices.resize(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        const auto k = keys.row(i);
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t best_j = 0;
        for (std::size_t j = 0; j < codebook.size(); ++j) {
            const double d = Codebook::sq_dist(k, codebook.codewords().row(j));
            if (d < best) {
                best = d;
                best_j = static_cast<std::uint32_t>(j);
            }
        }
        a.indices[i] = best_j;
    }
    return a;
}

/// K̂ = ΔC: row i is a verbatim copy of codeword indices[i].
inline Matrix quantize(const Matrix& keys, const Codebook& codebook, const Assignment& assignment) {
    if (assignment.size() != keys.rows()) throw shape_error("quantize: assignment length != rows");
    Matrix out(keys.rows(), codebook.dim());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        const std::uint32_t j = assignment.indices[i];
        if (j >= codebook.size()) throw corruption_error("quantize: code index out of range");
        const auto c = codebook.codewords().row(j);
        std::copy(c.begin(), c.end(), out.row(i).begin());
    }
    return out;
}

/// Codebook and commitment losses of the VQ objective. The two scalars are
/// the same squared distance (they differ only in gradient routing), so one
/// evaluation feeds both fields.
inline VqLossTerms vq_loss(const Matrix& keys, const Matrix& quantized, double beta) {
    if (!keys.same_shape(quantized)) throw shape_error("vq_loss: shape mismatch");
    if (beta < 0.0) throw param_error("vq_loss: beta must be >= 0");
    double acc = 0.0;
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        acc += Codebook::sq_dist(keys.row(i), quantized.row(i));
    }
    const double mean = keys.rows() ? acc / static_cast<double>(keys.rows()) : 0.0;
    return {mean, mean, beta};
}

/// One gradient step on the codebook loss: every used codeword moves by
/// lr * 2 * mean over its assigned keys of (k_i - c_j); unused codewords are
/// untouched. Usage counters are incremented by this batch's counts.
inline Codebook update_codebook(Codebook codebook, const Matrix& keys, const Assignment& assignment,
                                double lr) {
    if (lr < 0.0) throw param_error("update_codebook: lr must be >= 0");
    if (assignment.size() != keys.rows()) throw shape_error("update_codebook: assignment length != rows");
    if (keys.cols() != codebook.dim()) throw shape_error("update_codebook: key dim != codebook dim");

    const std::size_t n = codebook.size(), d = codebook.dim();
    Matrix sums(n, d);
    std::vector<std::uint64_t> counts(n, 0);
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        const std::uint32_t j = assignment.indices[i];
        if (j >= n) throw corruption_error("update_codebook: code index out of range");
        auto s = sums.row(j);
        const auto k = keys.row(i);
        for (std::size_t c = 0; c < d; ++c) s[c] += k[c];
        ++counts[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
        codebook.usage()[j] += counts[j];
        if (counts[j] == 0 || lr == 0.0) continue;
        auto cw = codebook.codewords().row(j);
        const auto s = sums.row(j);
        const double inv = 1.0 / static_cast<double>(counts[j]);
        for (std::size_t c = 0; c < d; ++c) {
            cw[c] += lr * 2.0 * (s[c] * inv - cw[c]);
        }
    }
    return codebook;
}

/// Replaces every codeword whose epoch usage fell below min_usage with a
/// uniformly sampled key row (seeded), then resets all usage counters.
inline Codebook reinit_dead_codes(Codebook codebook, const Matrix& keys, std::uint64_t min_usage,
                                  std::uint64_t rng_seed) {
    if (keys.rows() == 0) throw param_error("reinit_dead_codes: empty key pool");
    if (keys.cols() != codebook.dim()) throw shape_error("reinit_dead_codes: key dim != codebook dim");
    std::mt19937_64 rng(rng_seed);
    std::uniform_int_distribution<std::size_t> uni(0, keys.rows() - 1);
    for (std::size_t j = 0; j < codebook.size(); ++j) {
        if (codebook.usage()[j] >= min_usage) continue;
        const auto k = keys.row(uni(rng));
        std::copy(k.begin(), k.end(), codebook.codewords().row(j).begin());
    }
    std::fill(codebook.usage().begin(), codebook.usage().end(), 0);
    return codebook;
}

}  // namespace vql
