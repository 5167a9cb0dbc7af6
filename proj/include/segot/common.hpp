// Shared primitives: error types, deterministic RNG, small dense matrix,
// 3D vector/rotation helpers.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace segot {

// ---------------------------------------------------------------------------
// Error hierarchy. The CLI maps ValidationError/FormatError to exit code 1
// and IoError to exit code 2.
// ---------------------------------------------------------------------------

/// Input violates a structural or numeric precondition.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Byte stream does not conform to an on-disk format.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Underlying file or stream operation failed.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite value produced where the algorithm guarantees finiteness.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core so that sequences are identical across
// platforms and standard libraries; std::uniform_* would not guarantee that.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n >= 1.
    std::uint64_t uniform_index(std::uint64_t n) {
        // Modulo bias is < 2^-53 for any n we use; acceptable for test data.
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller, cached pair for determinism.
    double gaussian() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Derive an independent stream (for per-pair / per-frame substreams).
    Rng fork(std::uint64_t salt) {
        return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL));
    }

private:
    std::uint64_t state_;
    double cache_ = 0.0;
    bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Row-major dense matrix of doubles. Just the operations this pipeline needs.
// ---------------------------------------------------------------------------

class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ValidationError("Mat: negative dimension");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool empty() const { return v_.empty(); }

    double& operator()(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }

    double* row_ptr(int r) { return v_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row_ptr(int r) const { return v_.data() + static_cast<std::size_t>(r) * cols_; }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

    Mat transposed() const {
        Mat t(cols_, rows_);
        for (int r = 0; r < rows_; ++r)
            for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> v_;
};

// ---------------------------------------------------------------------------
// Tiny 3D types for poses and point clouds.
// ---------------------------------------------------------------------------

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
};

/// 3x3 matrix, row-major.
struct Mat3 {
    double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }

    double operator()(int r, int c) const { return m[r * 3 + c]; }
    double& operator()(int r, int c) { return m[r * 3 + c]; }

    Vec3 apply(const Vec3& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z,
                m[3] * p.x + m[4] * p.y + m[5] * p.z,
                m[6] * p.x + m[7] * p.y + m[8] * p.z};
    }

    Mat3 mul(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    double trace() const { return m[0] + m[4] + m[8]; }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    /// Rotation about a unit axis by angle (radians), Rodrigues form.
    static Mat3 axis_angle(const Vec3& axis, double angle) {
        double n = axis.norm();
        if (n < 1e-12) throw ValidationError("axis_angle: zero axis");
        Vec3 a{axis.x / n, axis.y / n, axis.z / n};
        double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
        Mat3 r;
        r(0, 0) = t * a.x * a.x + c;
        r(0, 1) = t * a.x * a.y - s * a.z;
        r(0, 2) = t * a.x * a.z + s * a.y;
        r(1, 0) = t * a.x * a.y + s * a.z;
        r(1, 1) = t * a.y * a.y + c;
        r(1, 2) = t * a.y * a.z - s * a.x;
        r(2, 0) = t * a.x * a.z - s * a.y;
        r(2, 1) = t * a.y * a.z + s * a.x;
        r(2, 2) = t * a.z * a.z + c;
        return r;
    }
};

inline bool is_rotation(const Mat3& r, double tol = 1e-6) {
    Mat3 rtr = r.transposed().mul(r);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double expect = (i == j) ? 1.0 : 0.0;
            if (std::abs(rtr(i, j) - expect) > tol) return false;
        }
    return std::abs(r.det() - 1.0) <= tol;
}

// ---------------------------------------------------------------------------
// Numeric helpers.
// ---------------------------------------------------------------------------

inline double log_sum_exp(const double* x, int n) {
    double m = x[0];
    for (int i = 1; i < n; ++i)
        if (x[i] > m) m = x[i];
    double s = 0;
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace segot
