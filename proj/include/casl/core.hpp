#pragma once

// Dense f64 array core shared by every module: shapes, element access,
// finiteness checks, hashing and a few scalar helpers.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

namespace casl {

// ----------------------------- errors -----------------------------

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct dim_error : error { using error::error; };          // shape mismatch
struct contract_error : error { using error::error; };     // precondition violated
struct numeric_error : error { using error::error; };      // NaN/Inf where finite required
struct train_error : error { using error::error; };        // diverged or missed quality bar
struct data_error : error { using error::error; };         // bad dataset (imbalance etc.)
struct config_error : error { using error::error; };       // inconsistent components/config
struct io_error : error { using error::error; };           // filesystem / parse failures
struct stale_error : error { using error::error; };        // artifact built from other config

// ----------------------------- shapes -----------------------------

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw dim_error("negative extent in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ----------------------------- Array -----------------------------

/// Row-major dense array of 64-bit floats.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}
    Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw dim_error("data length does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool same_shape(const Array& o) const { return shape == o.shape; }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    // 2-D access, row-major
    double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 0 : shape[1]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0); }

    static Array zeros(Shape s) { return Array(std::move(s)); }
    static Array full(Shape s, double v) {
        Array a(std::move(s));
        a.fill(v);
        return a;
    }
};

inline void require_shape(const Array& a, const Shape& s, const char* what) {
    if (a.shape != s)
        throw dim_error(std::string(what) + ": expected shape " + shape_str(s) + ", got " + shape_str(a.shape));
}

inline bool all_finite(const Array& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline void require_finite(const Array& a, const char* what) {
    if (!all_finite(a)) throw numeric_error(std::string(what) + ": non-finite values");
}

// ----------------------------- elementwise helpers -----------------------------

inline Array& add_inplace(Array& a, const Array& b) {
    if (!a.same_shape(b)) throw dim_error("add: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    return a;
}

inline Array add(const Array& a, const Array& b) {
    Array r = a;
    add_inplace(r, b);
    return r;
}

inline Array sub(const Array& a, const Array& b) {
    if (!a.same_shape(b)) throw dim_error("sub: shape mismatch");
    Array r = a;
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] -= b.data[i];
    return r;
}

inline Array scaled(const Array& a, double s) {
    Array r = a;
    for (double& v : r.data) v *= s;
    return r;
}

inline void axpy(Array& y, double a, const Array& x) {
    if (!y.same_shape(x)) throw dim_error("axpy: shape mismatch");
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

inline double dot(const Array& a, const Array& b) {
    if (a.numel() != b.numel()) throw dim_error("dot: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double norm2(const Array& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Array& a, const Array& b) {
    if (!a.same_shape(b)) throw dim_error("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

inline double mean_sq(const Array& a) {
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return s / static_cast<double>(a.numel());
}

inline double mean_abs(const Array& a) {
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (double v : a.data) s += std::fabs(v);
    return s / static_cast<double>(a.numel());
}

// ----------------------------- hashing -----------------------------

// 64-bit FNV-1a, used for artifact identity and staleness checks.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 14695981039346656037ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t hash_array(const Array& a, uint64_t h = 14695981039346656037ull) {
    return fnv1a64(a.data.data(), a.data.size() * sizeof(double), h);
}

} // namespace casl
