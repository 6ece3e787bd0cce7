#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "templaudit/errors.hpp"

namespace templaudit {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string());
        }
    }

    /// Builds from nested rows; all rows must have equal length.
    static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return {};
        const std::size_t cols = rows.front().size();
        std::vector<double> data;
        data.reserve(rows.size() * cols);
        for (const auto& row : rows) {
            if (row.size() != cols) throw ShapeError("ragged rows in Matrix::from_rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(rows.size(), cols, std::move(data));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    std::string shape_string() const {
        return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const EigenRowMajor> view(const Matrix& m) {
    return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
            static_cast<Eigen::Index>(m.cols())};
}

inline Eigen::Map<EigenRowMajor> view(Matrix& m) {
    return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
            static_cast<Eigen::Index>(m.cols())};
}

// Products up to this many multiply-adds use a plain loop that sums every
// output cell in ascending inner index, so transpose(a·b) == bᵀ·aᵀ bitwise.
// Larger products go to Eigen's blocked kernel.
inline constexpr std::size_t kExactProductLimit = std::size_t{1} << 18;

inline bool use_exact(std::size_t n, std::size_t k, std::size_t m) { return n * k * m <= kExactProductLimit; }

inline void ordered_product(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                            std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
}

}  // namespace detail

/// a · b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + a.shape_string() + " * " + b.shape_string());
    }
    Matrix out(a.rows(), b.cols());
    if (a.cols() == 0) return out;
    if (detail::use_exact(a.rows(), a.cols(), b.cols())) {
        detail::ordered_product(a.values().data(), b.values().data(), out.values().data(), a.rows(), a.cols(),
                                b.cols());
        return out;
    }
    detail::view(out).noalias() = detail::view(a) * detail::view(b);
    return out;
}

/// aᵀ · b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn shape mismatch: " + a.shape_string() + "^T * " +
                         b.shape_string());
    }
    Matrix out(a.cols(), b.cols());
    if (a.rows() == 0) return out;
    detail::view(out).noalias() = detail::view(a).transpose() * detail::view(b);
    return out;
}

/// a · bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt shape mismatch: " + a.shape_string() + " * " +
                         b.shape_string() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    if (a.cols() == 0) return out;
    detail::view(out).noalias() = detail::view(a) * detail::view(b).transpose();
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
    return out;
}

/// Column index of the largest entry in each row, lowest index on ties.
inline std::vector<std::size_t> argmax_rows(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw ShapeError("argmax_rows on empty matrix " + m.shape_string());
    }
    std::vector<std::size_t> out(m.rows(), 0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c)
            if (row[c] > row[best]) best = c;
        out[r] = best;
    }
    return out;
}

/// Rows `indices` of `m`, in that order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
    Matrix out(indices.size(), m.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = m.row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

inline bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// Counter-based generator. Sample i of a stream with key k is
// splitmix64_mix(k + (i + 1) * 0x9E3779B97F4A7C15), i.e. the SplitMix64 output
// sequence seeded with k. Child streams get key splitmix64_mix(k ^ splitmix64_mix(label_hash)),
// where label_hash is FNV-1a 64 of the label bytes (string labels) or the index
// itself (integer labels). Uniform doubles take the top 53 bits. Nothing here
// depends on the standard library's distributions, so sequences are identical
// on every platform.

inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const char ch : bytes) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : key_(seed) {}

    std::uint64_t seed() const noexcept { return key_; }
    std::uint64_t position() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return splitmix64_mix(key_ + counter_ * kGamma);
    }

    /// Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw RangeError("Rng::below(0)");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Standard normal via Box-Muller (one sample per two uniforms).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    Rng split(std::string_view label) const noexcept {
        return Rng(splitmix64_mix(key_ ^ splitmix64_mix(fnv1a64(label))));
    }

    Rng split(std::uint64_t index) const noexcept {
        return Rng(splitmix64_mix(key_ ^ splitmix64_mix(index + kGamma)));
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace templaudit
