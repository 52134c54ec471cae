#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmcn/linalg.hpp"

namespace gmcn {

// Component layout inside every parameter buffer:
//   [weight, position (k), packed lower-triangle covariance (k(k+1)/2)]
inline constexpr int gaussian_stride(int k) { return 1 + k + la::packed_size(k); }

struct covariance_degenerate_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct degenerate_domain_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-owning view of n consecutive Gaussians.
struct GaussSpan {
    int dims = 2;
    double* p = nullptr;
    int n = 0;

    int stride() const { return gaussian_stride(dims); }
    double* g(int i) { return p + static_cast<size_t>(i) * stride(); }
    const double* g(int i) const { return p + static_cast<size_t>(i) * stride(); }
    double& weight(int i) { return g(i)[0]; }
    double weight(int i) const { return g(i)[0]; }
    double* pos(int i) { return g(i) + 1; }
    const double* pos(int i) const { return g(i) + 1; }
    double* cov(int i) { return g(i) + 1 + dims; }
    const double* cov(int i) const { return g(i) + 1 + dims; }
};

struct ConstGaussSpan {
    int dims = 2;
    const double* p = nullptr;
    int n = 0;

    ConstGaussSpan() = default;
    ConstGaussSpan(int k, const double* ptr, int count) : dims(k), p(ptr), n(count) {}
    ConstGaussSpan(const GaussSpan& s) : dims(s.dims), p(s.p), n(s.n) {}

    int stride() const { return gaussian_stride(dims); }
    const double* g(int i) const { return p + static_cast<size_t>(i) * stride(); }
    double weight(int i) const { return g(i)[0]; }
    const double* pos(int i) const { return g(i) + 1; }
    const double* cov(int i) const { return g(i) + 1 + dims; }
};

// One mixture (a single feature channel).
struct Mixture {
    int dims = 2;
    std::vector<double> data;

    Mixture() = default;
    Mixture(int k, int n) : dims(k), data(static_cast<size_t>(n) * gaussian_stride(k), 0.0) {}

    int size() const { return static_cast<int>(data.size() / gaussian_stride(dims)); }
    GaussSpan span() { return {dims, data.data(), size()}; }
    ConstGaussSpan span() const { return {dims, data.data(), size()}; }
    double* g(int i) { return data.data() + static_cast<size_t>(i) * gaussian_stride(dims); }
    const double* g(int i) const {
        return data.data() + static_cast<size_t>(i) * gaussian_stride(dims);
    }
};

// Dense [batch, channel, component] tensor of Gaussians, the inter-layer
// currency. Every batch element and channel holds exactly `comps` components.
struct MixtureBatch {
    int dims = 2;
    int batch = 0;
    int channels = 0;
    int comps = 0;
    std::vector<double> data;

    MixtureBatch() = default;
    MixtureBatch(int k, int b, int f, int n)
        : dims(k), batch(b), channels(f), comps(n),
          data(static_cast<size_t>(b) * f * n * gaussian_stride(k), 0.0) {}

    int stride() const { return gaussian_stride(dims); }
    size_t channel_offset(int b, int f) const {
        return (static_cast<size_t>(b) * channels + f) * comps * stride();
    }
    GaussSpan channel(int b, int f) {
        check_index(b, f);
        return {dims, data.data() + channel_offset(b, f), comps};
    }
    ConstGaussSpan channel(int b, int f) const {
        check_index(b, f);
        return {dims, data.data() + channel_offset(b, f), comps};
    }
    double* g(int b, int f, int n) {
        return data.data() + channel_offset(b, f) + static_cast<size_t>(n) * stride();
    }
    const double* g(int b, int f, int n) const {
        return data.data() + channel_offset(b, f) + static_cast<size_t>(n) * stride();
    }

    void check_index(int b, int f) const {
        if (b < 0 || b >= batch || f < 0 || f >= channels)
            throw std::out_of_range("MixtureBatch index (" + std::to_string(b) + "," +
                                    std::to_string(f) + ") out of range");
    }
};

// Per batch element scale factor produced by domain rescaling.
struct DomainScale {
    std::vector<double> sigma;
};

}  // namespace gmcn
