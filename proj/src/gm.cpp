#include "gmcn/gm.hpp"

#include <cmath>
#include <cstring>

namespace gmcn::gm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)
}

GaussPrep prep(int k, const double* g) {
    GaussPrep gp;
    gp.weight = g[0];
    gp.pos = g + 1;
    if (!la::chol_packed(k, g + 1 + k, gp.lf))
        throw covariance_degenerate_error("covariance is not positive-definite");
    gp.logconst = -0.5 * (k * kLog2Pi + la::chol_logdet(k, gp.lf));
    return gp;
}

void prep_span(ConstGaussSpan m, std::vector<GaussPrep>& out) {
    out.resize(m.n);
    for (int i = 0; i < m.n; ++i) out[i] = prep(m.dims, m.g(i));
}

double eval_prepped_unit(int k, const GaussPrep& gp, const double* x) {
    double d[3] = {0, 0, 0}, y[3] = {0, 0, 0};
    for (int i = 0; i < k; ++i) d[i] = x[i] - gp.pos[i];
    la::chol_solve(k, gp.lf, d, y);
    double q = 0;
    for (int i = 0; i < k; ++i) q += d[i] * y[i];
    return std::exp(gp.logconst - 0.5 * q);
}

double eval_gaussian(int k, const double* g, const double* x) {
    const GaussPrep gp = prep(k, g);
    return gp.weight * eval_prepped_unit(k, gp, x);
}

double eval_mixture(ConstGaussSpan m, const double* x) {
    double s = 0;
    for (int i = 0; i < m.n; ++i) s += eval_gaussian(m.dims, m.g(i), x);
    return s;
}

double eval_mixture(const MixtureBatch& m, int b, int f, const double* x) {
    return eval_mixture(m.channel(b, f), x);
}

EvalDerivs eval_gaussian_derivs(int k, const double* g, const double* x) {
    const GaussPrep gp = prep(k, g);
    double cinv[6];
    la::chol_inverse(k, gp.lf, cinv);

    double d[3], y[3];
    for (int i = 0; i < k; ++i) d[i] = x[i] - gp.pos[i];
    la::chol_solve(k, gp.lf, d, y);
    double q = 0;
    for (int i = 0; i < k; ++i) q += d[i] * y[i];

    EvalDerivs out;
    out.unit = std::exp(gp.logconst - 0.5 * q);
    out.value = gp.weight * out.unit;
    out.wrt_weight = out.unit;
    for (int i = 0; i < k; ++i) {
        out.wrt_x[i] = -out.value * y[i];
        out.wrt_pos[i] = out.value * y[i];
    }
    // d log g / d C = (y y^T - C^-1) / 2, then packed: diagonal as is,
    // off-diagonal doubled because the entry appears twice in the matrix.
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j <= i; ++j) {
            const double m = 0.5 * (y[i] * y[j] - cinv[la::packed_index(i, j)]);
            out.wrt_cov[la::packed_index(i, j)] = out.value * (i == j ? m : 2.0 * m);
        }
    }
    return out;
}

void convolve_spans(ConstGaussSpan a, ConstGaussSpan b, GaussSpan out) {
    if (a.dims != b.dims || a.dims != out.dims)
        throw std::invalid_argument("convolve: dimension mismatch");
    if (out.n != a.n * b.n) throw std::invalid_argument("convolve: bad output size");
    const int k = a.dims;
    const int ps = la::packed_size(k);
    for (int i = 0; i < a.n; ++i) {
        const double* ga = a.g(i);
        for (int j = 0; j < b.n; ++j) {
            const double* gb = b.g(j);
            double* go = out.g(i * b.n + j);
            go[0] = ga[0] * gb[0];
            for (int m = 0; m < k; ++m) go[1 + m] = ga[1 + m] + gb[1 + m];
            for (int m = 0; m < ps; ++m) go[1 + k + m] = ga[1 + k + m] + gb[1 + k + m];
        }
    }
}

Mixture convolve_mixtures(const Mixture& a, const Mixture& b) {
    if (a.dims != b.dims) throw std::invalid_argument("convolve: dimension mismatch");
    Mixture out(a.dims, a.size() * b.size());
    convolve_spans(a.span(), b.span(), out.span());
    return out;
}

MixtureBatch convolution_layer(const MixtureBatch& input, const MixtureBatch& kernels) {
    if (input.dims != kernels.dims)
        throw std::invalid_argument("convolution_layer: dimension mismatch");
    if (input.channels != kernels.channels)
        throw std::invalid_argument("convolution_layer: input channels != kernel channels");
    const int fo = kernels.batch, fi = input.channels;
    const int ni = input.comps, nk = kernels.comps;
    MixtureBatch out(input.dims, input.batch, fo, fi * ni * nk);
    for (int b = 0; b < input.batch; ++b) {
        for (int o = 0; o < fo; ++o) {
            GaussSpan oc = out.channel(b, o);
            for (int c = 0; c < fi; ++c) {
                GaussSpan block{out.dims, oc.g(c * ni * nk), ni * nk};
                convolve_spans(input.channel(b, c), kernels.channel(o, c), block);
            }
        }
    }
    return out;
}

double span_integral(ConstGaussSpan m) {
    double s = 0;
    for (int i = 0; i < m.n; ++i) s += m.weight(i);
    return s;
}

std::vector<double> mixture_integral(const MixtureBatch& m) {
    std::vector<double> out(static_cast<size_t>(m.batch) * m.channels);
    for (int b = 0; b < m.batch; ++b)
        for (int f = 0; f < m.channels; ++f)
            out[static_cast<size_t>(b) * m.channels + f] = span_integral(m.channel(b, f));
    return out;
}

double mean_cov_trace(const ConstGaussSpan* spans, int count) {
    double t = 0;
    long n = 0;
    for (int s = 0; s < count; ++s) {
        for (int i = 0; i < spans[s].n; ++i) t += la::trace_packed(spans[s].dims, spans[s].cov(i));
        n += spans[s].n;
    }
    if (n == 0) throw degenerate_domain_error("rescale: empty mixture");
    return t / static_cast<double>(n);
}

void rescale_apply(GaussSpan m, double sigma) {
    const double s2 = sigma * sigma;
    const int ps = la::packed_size(m.dims);
    for (int i = 0; i < m.n; ++i) {
        double* g = m.g(i);
        for (int d = 0; d < m.dims; ++d) g[1 + d] *= sigma;
        for (int d = 0; d < ps; ++d) g[1 + m.dims + d] *= s2;
    }
}

std::pair<MixtureBatch, DomainScale> rescale_domain(const MixtureBatch& m) {
    MixtureBatch out = m;
    DomainScale scale;
    scale.sigma.resize(m.batch);
    for (int b = 0; b < m.batch; ++b) {
        std::vector<ConstGaussSpan> spans;
        spans.reserve(m.channels);
        for (int f = 0; f < m.channels; ++f) spans.push_back(m.channel(b, f));
        const double tbar = mean_cov_trace(spans.data(), static_cast<int>(spans.size()));
        if (!(tbar > 0)) throw degenerate_domain_error("rescale: non-positive mean trace");
        const double sigma = std::sqrt(m.dims / tbar);
        for (int f = 0; f < m.channels; ++f) rescale_apply(out.channel(b, f), sigma);
        scale.sigma[b] = sigma;
    }
    return {std::move(out), std::move(scale)};
}

std::vector<double> eval_grid(ConstGaussSpan m, const BBox& box, const int* resolution) {
    const int k = m.dims;
    size_t total = 1;
    for (int d = 0; d < k; ++d) {
        if (resolution[d] < 2) throw std::invalid_argument("eval_grid: resolution must be >= 2");
        if (!(box.hi[d] > box.lo[d])) throw std::invalid_argument("eval_grid: zero-volume bbox");
        total *= static_cast<size_t>(resolution[d]);
    }
    std::vector<GaussPrep> gp;
    prep_span(m, gp);
    std::vector<double> field(total);
    double x[3];
    for (size_t idx = 0; idx < total; ++idx) {
        size_t rem = idx;
        for (int d = 0; d < k; ++d) {
            const size_t i = rem % resolution[d];
            rem /= resolution[d];
            x[d] = box.lo[d] + (i + 0.5) * (box.hi[d] - box.lo[d]) / resolution[d];
        }
        double s = 0;
        for (int i = 0; i < m.n; ++i) s += gp[i].weight * eval_prepped_unit(k, gp[i], x);
        field[idx] = s;
    }
    return field;
}

BBox support_bbox(ConstGaussSpan m, double nsigma) {
    BBox box;
    const int k = m.dims;
    for (int d = 0; d < k; ++d) {
        box.lo[d] = 1e300;
        box.hi[d] = -1e300;
    }
    bool any_weighted = false;
    for (int i = 0; i < m.n; ++i) any_weighted |= m.weight(i) != 0.0;
    for (int i = 0; i < m.n; ++i) {
        if (any_weighted && m.weight(i) == 0.0) continue;
        const double* c = m.cov(i);
        double vmax = 0;
        for (int d = 0; d < k; ++d) vmax = std::max(vmax, c[la::packed_index(d, d)]);
        const double r = nsigma * std::sqrt(vmax);
        for (int d = 0; d < k; ++d) {
            box.lo[d] = std::min(box.lo[d], m.pos(i)[d] - r);
            box.hi[d] = std::max(box.hi[d], m.pos(i)[d] + r);
        }
    }
    return box;
}

}  // namespace gmcn::gm
