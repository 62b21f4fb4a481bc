#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "vql/error.hpp"

namespace vql {

/// Dense row-major matrix of 64-bit floats. All reference-path math runs in
/// double; data adopted from outside the library is validated finite.
class Matrix {
  public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw shape_error("matrix data length != rows*cols");
        }
        ensure_finite();
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Matrix m;
        m.rows_ = rows.size();
        m.cols_ = rows.size() ? rows.begin()->size() : 0;
        m.data_.reserve(m.rows_ * m.cols_);
        for (const auto& r : rows) {
            if (r.size() != m.cols_) throw shape_error("ragged row list");
            m.data_.insert(m.data_.end(), r.begin(), r.end());
        }
        m.ensure_finite();
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    void ensure_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) throw param_error("non-finite matrix entry");
        }
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// One attention-weight / query / key row.
class RowVector {
  public:
    RowVector() = default;
    explicit RowVector(std::size_t dim) : data_(dim, 0.0) {}
    explicit RowVector(std::vector<double> values) : data_(std::move(values)) {
        ensure_finite();
    }
    RowVector(std::initializer_list<double> values) : data_(values) { ensure_finite(); }

    std::size_t dim() const { return data_.size(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    void ensure_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) throw param_error("non-finite vector entry");
        }
    }

  private:
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Tree summation; keeps rounding drift ~eps*log(n) on the long reductions
/// (softmax denominators, big codeword buckets).
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 32) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t h = v.size() / 2;
    return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw shape_error("matmul: a.cols != b.rows");
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* out_row = out.data() + i * n;
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const double* b_row = b.data() + k * n;
            for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

/// a * b^T without materializing the transpose (rows dot rows).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw shape_error("matmul_nt: inner dims differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    }
    return out;
}

/// Row-wise softmax with per-row max subtraction. The shift makes exp safe
/// for any finite logits and cancels in the normalized row, so outputs are
/// invariant to per-row shifts; the cached attention ratio relies on the
/// same cancellation.
inline Matrix row_softmax(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    if (x.cols() == 0) return out;
    std::vector<double> exps(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        const double m = *std::max_element(r.begin(), r.end());
        for (std::size_t j = 0; j < x.cols(); ++j) exps[j] = std::exp(r[j] - m);
        const double s = pairwise_sum(exps);
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = exps[j] / s;
    }
    return out;
}

/// Rescales every row with l2 norm above `bound` down to the bound; rows
/// already inside are untouched, which also makes the operation idempotent
/// bitwise (the re-check loop absorbs the one-ulp overshoot a single
/// rescale can leave).
inline Matrix clip_row_norms(const Matrix& v, double bound) {
    if (!(bound > 0.0)) throw param_error("norm bound must be positive");
    Matrix out = v;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (int pass = 0; pass < 8; ++pass) {
            const double n = l2_norm(r);
            if (n <= bound) break;
            for (double& x : r) x = (x * bound) / n;
        }
    }
    return out;
}

}  // namespace vql
