#ifndef BLOCKCACHE_TENSOR_HPP
#define BLOCKCACHE_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bc {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// Dense row-major f32 array with explicit shape. No broadcasting.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }
    Tensor(std::vector<int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        check(static_cast<int64_t>(data.size()) == numel_of(shape), "tensor: data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at(std::initializer_list<int64_t> idx) {
        return data[static_cast<size_t>(offset(idx))];
    }
    float at(std::initializer_list<int64_t> idx) const {
        return data[static_cast<size_t>(offset(idx))];
    }

    int64_t offset(std::initializer_list<int64_t> idx) const {
        check(idx.size() == shape.size(), "tensor: index rank mismatch");
        int64_t off = 0;
        size_t i = 0;
        for (int64_t v : idx) {
            off = off * shape[i] + v;
            ++i;
        }
        return off;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int64_t> s) const {
        check(numel_of(s) == numel(), "reshape: element count mismatch " + shape_str());
        return Tensor(std::move(s), data);
    }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

inline Tensor full(std::vector<int64_t> s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.same_shape(b), std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline float l1_norm(const Tensor& t) {
    float s = 0.0f;
    for (float v : t.data) s += std::fabs(v);
    return s;
}

inline float l1_distance(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "l1_distance");
    float s = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) s += std::fabs(a.data[i] - b.data[i]);
    return s;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

// Counter-based generator: every draw is a pure function of (seed, counter),
// so streams are identical on every platform for the same call sequence.
struct Rng {
    uint64_t seed = 0;
    uint64_t counter = 0;
    bool has_spare = false;
    float spare = 0.0f;

    explicit Rng(uint64_t s = 0) : seed(s) {}

    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t next_u64() { return mix(seed ^ 0x5851f42d4c957f2dULL) + mix(counter++ * 0x2545f4914f6cdd1dULL + seed); }

    // uniform in (0, 1]
    double next_uniform() {
        uint64_t u = next_u64() >> 11;  // 53 bits
        return (static_cast<double>(u) + 1.0) * (1.0 / 9007199254740992.0);
    }

    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    float normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = static_cast<float>(r * std::sin(a));
        has_spare = true;
        return static_cast<float>(r * std::cos(a));
    }

    Tensor normal_tensor(std::vector<int64_t> s) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = normal();
        return t;
    }

    Tensor uniform_tensor(std::vector<int64_t> s, float lo, float hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = lo + (hi - lo) * static_cast<float>(next_uniform());
        return t;
    }
};

// FNV-1a, used for config fingerprints and content checksums.
inline uint64_t fnv1a(const void* p, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

inline uint64_t tensor_checksum(const Tensor& t) {
    uint64_t h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int64_t));
    return fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
}

}  // namespace bc

#endif
