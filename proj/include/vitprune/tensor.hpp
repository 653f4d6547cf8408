#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vitprune/errors.hpp"

namespace vitprune {

// Dense row-major tensor of doubles. Rank is dynamic; all numerics in this
// library run in double precision.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(count(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == count(shape), ErrorKind::contract,
                "tensor data length does not match shape");
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor vector1d(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t dim(std::size_t i) const {
        require(i < shape.size(), ErrorKind::contract, "tensor dim index out of range");
        return shape[i];
    }

    // rows()/cols() view the tensor as 2-D, folding leading dims into rows.
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return shape.empty() ? 1 : size() / cols(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    double* row(std::size_t r) { return data.data() + r * cols(); }
    const double* row(std::size_t r) const { return data.data() + r * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<std::size_t> s) const {
        require(count(s) == size(), ErrorKind::contract, "reshape changes element count");
        return Tensor(std::move(s), data);
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::fabs(v));
        return m;
    }

    double norm2() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s);
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "{";
        for (std::size_t i = 0; i < shape.size(); ++i)
            os << (i ? "," : "") << shape[i];
        os << "}";
        return os.str();
    }
};

inline double dot(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), ErrorKind::contract, "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double rel_err(double got, double want) {
    double denom = std::max(std::fabs(want), 1e-300);
    return std::fabs(got - want) / denom;
}

inline double rel_err(const Tensor& got, const Tensor& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        double d = got.data[i] - want.data[i];
        num += d * d;
        den += want.data[i] * want.data[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// Deterministic xoshiro256** generator seeded through splitmix64. The
// standard-library distributions are not bit-stable across implementations,
// so all sampling lives here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    // Derive an independent stream for a named purpose. Keeps per-epoch and
    // per-component randomness reproducible regardless of call order.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t x = s_[0] ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        Rng r(0);
        for (auto& si : r.s_) si = splitmix64(x);
        return r;
    }

    std::uint64_t next_u64() {
        std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t uniform_int(std::size_t n) {
        require(n > 0, ErrorKind::contract, "uniform_int: empty range");
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Box-Muller; the pair's second value is discarded so draws are
    // independent of surrounding call patterns.
    double normal() {
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Normal(0, std) with rejection outside +-2 std.
    double trunc_normal(double std) {
        for (;;) {
            double v = normal();
            if (std::fabs(v) <= 2.0) return v * std;
        }
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t s_[4];
};

} // namespace vitprune
