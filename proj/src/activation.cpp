#include "gmcn/activation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "gmcn/counters.hpp"
#include "gmcn/gm.hpp"

namespace gmcn::act {

namespace {

// unit-weight value and y = C^-1 (x - b) in one pass
inline double eval_unit_y(int k, const gm::GaussPrep& gp, const double* x, double* y) {
    double d[3];
    for (int i = 0; i < k; ++i) d[i] = x[i] - gp.pos[i];
    la::chol_solve(k, gp.lf, d, y);
    double q = 0;
    for (int i = 0; i < k; ++i) q += d[i] * y[i];
    return std::exp(gp.logconst - 0.5 * q);
}

// epsilon scales with the largest weight magnitude (floored at one); the
// owning index is reported so its gradient path can be followed
double resolve_epsilon(ConstGaussSpan in, const DenseFitConfig& cfg, int* source) {
    double amax = 1.0;
    int src = -1;
    for (int i = 0; i < in.n; ++i)
        if (std::fabs(in.weight(i)) > amax) {
            amax = std::fabs(in.weight(i));
            src = i;
        }
    if (source) *source = src;
    return cfg.epsilon_floor * amax;
}

}  // namespace

void relu_dense_fit(ConstGaussSpan in, GaussSpan out, const DenseFitConfig& cfg,
                    DenseFitScratch* scratch) {
    if (in.n != out.n || in.dims != out.dims)
        throw std::invalid_argument("relu_dense_fit: shape mismatch");
    const int k = in.dims;
    const int n = in.n;
    int eps_source = -1;
    const double eps = resolve_epsilon(in, cfg, &eps_source);

    std::vector<gm::GaussPrep> gp;
    gm::prep_span(in, gp);
    std::vector<double> aprime(n);
    for (int i = 0; i < n; ++i) aprime[i] = in.weight(i) > 0 ? in.weight(i) : eps;

    DenseFitScratch local;
    DenseFitScratch& sc = scratch ? *scratch : local;
    sc.epsilon = eps;
    sc.eps_source = eps_source;
    sc.u.assign(n, 0.0);
    sc.v.assign(n, 0.0);
    sc.zeroed.assign(n, 0);

    counters::pair_evals += static_cast<uint64_t>(n) * n;
    for (int i = 0; i < n; ++i) {
        const double* bi = in.pos(i);
        double u = 0, v = 0, y[3];
        for (int j = 0; j < n; ++j) {
            const double unit = eval_unit_y(k, gp[j], bi, y);
            u += in.weight(j) * unit;
            v += aprime[j] * unit;
        }
        sc.u[i] = u;
        sc.v[i] = v;
        // positions and covariances pass through untouched
        std::memcpy(out.g(i), in.g(i), sizeof(double) * gaussian_stride(k));
        if (v < cfg.eval_clamp) {
            sc.zeroed[i] = 1;
            out.weight(i) = 0.0;
        } else {
            // ratio first: an all-positive mixture gives u == v bitwise and
            // the weights pass through exactly
            out.weight(i) = aprime[i] * (std::max(0.0, u) / v);
        }
    }
}

Mixture relu_dense_fit(const Mixture& m, const DenseFitConfig& cfg) {
    Mixture out(m.dims, m.size());
    relu_dense_fit(m.span(), out.span(), cfg, nullptr);
    return out;
}

void relu_dense_fit_backward(ConstGaussSpan in, const double* grad_out, double* grad_in,
                             const DenseFitConfig& cfg, const DenseFitScratch& sc) {
    const int k = in.dims;
    const int n = in.n;
    const int stride = gaussian_stride(k);
    const int ps = la::packed_size(k);
    const double eps = sc.epsilon;

    std::vector<gm::GaussPrep> gp;
    gm::prep_span(in, gp);
    std::vector<double> cinv(static_cast<size_t>(n) * ps);
    for (int j = 0; j < n; ++j) la::chol_inverse(k, gp[j].lf, cinv.data() + j * ps);
    std::vector<double> aprime(n);
    for (int i = 0; i < n; ++i) aprime[i] = in.weight(i) > 0 ? in.weight(i) : eps;

    // pass-through of positions and covariances
    for (int i = 0; i < n; ++i)
        for (int d = 1; d < stride; ++d) grad_in[i * stride + d] += grad_out[i * stride + d];

    // epsilon is a function of the largest weight; collect its cotangent
    double epsbar = 0;
    for (int i = 0; i < n; ++i) {
        const double wbar = grad_out[i * stride];
        if (wbar == 0.0 || sc.zeroed[i]) continue;
        const double u = sc.u[i], v = sc.v[i];
        const double phi = std::max(0.0, u);
        const double dphi = u > 0 ? 1.0 : 0.0;
        if (in.weight(i) > 0)
            grad_in[i * stride] += wbar * phi / v;
        else
            epsbar += wbar * phi / v;  // a'_i = eps branch
        const double ubar = wbar * aprime[i] * dphi / v;
        const double vbar = -wbar * aprime[i] * phi / (v * v);
        if (ubar == 0.0 && vbar == 0.0) continue;

        const double* bi = in.pos(i);
        double y[3];
        for (int j = 0; j < n; ++j) {
            const double unit = eval_unit_y(k, gp[j], bi, y);
            grad_in[j * stride] += ubar * unit;  // d u / d a_j
            if (in.weight(j) > 0)
                grad_in[j * stride] += vbar * unit;  // a'_j = a_j branch
            else
                epsbar += vbar * unit;  // d v_i / d eps
            const double cbar = ubar * in.weight(j) + vbar * aprime[j];
            if (cbar == 0.0) continue;
            const double gv = cbar * unit;
            const double* ci = cinv.data() + j * ps;
            double* gj = grad_in + j * stride;
            double* gi = grad_in + i * stride;
            for (int d = 0; d < k; ++d) {
                gj[1 + d] += gv * y[d];   // component position
                gi[1 + d] -= gv * y[d];   // evaluation point is B_i
            }
            for (int r = 0; r < k; ++r)
                for (int c = 0; c <= r; ++c) {
                    const double m = 0.5 * (y[r] * y[c] - ci[la::packed_index(r, c)]);
                    gj[1 + k + la::packed_index(r, c)] += gv * (r == c ? m : 2.0 * m);
                }
        }
    }
    if (sc.eps_source >= 0)
        grad_in[sc.eps_source * stride] +=
            epsbar * cfg.epsilon_floor * (in.weight(sc.eps_source) > 0 ? 1.0 : -1.0);
}

void parameter_space_relu(ConstGaussSpan in, GaussSpan out) {
    if (in.n != out.n || in.dims != out.dims)
        throw std::invalid_argument("parameter_space_relu: shape mismatch");
    const int stride = gaussian_stride(in.dims);
    for (int i = 0; i < in.n; ++i) {
        std::memcpy(out.g(i), in.g(i), sizeof(double) * stride);
        out.weight(i) = std::max(0.0, in.weight(i));
    }
}

Mixture parameter_space_relu(const Mixture& m) {
    Mixture out(m.dims, m.size());
    parameter_space_relu(m.span(), out.span());
    return out;
}

std::vector<double> build_sample_set(ConstGaussSpan m, SampleSet kind, int random_count,
                                     Rng& rng) {
    const int k = m.dims;
    std::vector<double> pts;
    if (kind == SampleSet::Centers || kind == SampleSet::CentersPlusRandom) {
        for (int i = 0; i < m.n; ++i)
            for (int d = 0; d < k; ++d) pts.push_back(m.pos(i)[d]);
    }
    if (kind == SampleSet::Random || kind == SampleSet::CentersPlusRandom) {
        const gm::BBox box = gm::support_bbox(m, 3.0);
        for (int i = 0; i < random_count; ++i)
            for (int d = 0; d < k; ++d) pts.push_back(rng.uniform(box.lo[d], box.hi[d]));
    }
    return pts;
}

std::vector<double> least_squares_relu_fit(ConstGaussSpan m, const std::vector<double>& points) {
    const int k = m.dims;
    const int n = m.n;
    const int rows = static_cast<int>(points.size()) / k;
    if (rows < n) throw std::invalid_argument("least_squares_relu_fit: needs |D| >= N");

    std::vector<gm::GaussPrep> gp;
    gm::prep_span(m, gp);
    std::vector<double> A(static_cast<size_t>(rows) * n);
    std::vector<double> t(rows);
    for (int r = 0; r < rows; ++r) {
        const double* x = points.data() + static_cast<size_t>(r) * k;
        double val = 0;
        for (int j = 0; j < n; ++j) {
            const double unit = gm::eval_prepped_unit(k, gp[j], x);
            A[static_cast<size_t>(r) * n + j] = unit;
            val += m.weight(j) * unit;
        }
        t[r] = std::max(0.0, val);
    }

    // normal equations with ridge; the ridge gives pseudo-inverse behavior
    // when rank(A) < N
    std::vector<double> M(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> rhs(n, 0.0);
    for (int r = 0; r < rows; ++r) {
        const double* arow = A.data() + static_cast<size_t>(r) * n;
        for (int i = 0; i < n; ++i) {
            rhs[i] += arow[i] * t[r];
            for (int j = 0; j <= i; ++j) M[static_cast<size_t>(i) * n + j] += arow[i] * arow[j];
        }
    }
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) M[static_cast<size_t>(i) * n + j] = M[static_cast<size_t>(j) * n + i];
    const double ridge = 1e-10;
    for (int i = 0; i < n; ++i) M[static_cast<size_t>(i) * n + i] += ridge;

    std::vector<double> y(n);
    if (!la::chol_dense(n, M.data()))
        throw std::runtime_error("least_squares_relu_fit: normal equations not solvable");
    la::chol_dense_solve(n, M.data(), rhs.data(), y.data());
    return y;
}

namespace {
struct OwnedEval {
    int dims;
    std::vector<double> data;
    std::vector<gm::GaussPrep> gp;
};

std::shared_ptr<OwnedEval> own_mixture(ConstGaussSpan m) {
    auto e = std::make_shared<OwnedEval>();
    e->dims = m.dims;
    e->data.assign(m.p, m.p + static_cast<size_t>(m.n) * m.stride());
    gm::prep_span({m.dims, e->data.data(), m.n}, e->gp);
    return e;
}

double eval_owned(const OwnedEval& e, const double* x) {
    double s = 0;
    for (const auto& gp : e.gp) s += gp.weight * gm::eval_prepped_unit(e.dims, gp, x);
    return s;
}
}  // namespace

EvalFn mixture_eval_fn(ConstGaussSpan m) {
    auto e = own_mixture(m);
    return [e](const double* x) { return eval_owned(*e, x); };
}

EvalFn relu_mixture_eval_fn(ConstGaussSpan m) {
    auto e = own_mixture(m);
    return [e](const double* x) { return std::max(0.0, eval_owned(*e, x)); };
}

double fitting_rmse(ConstGaussSpan sample_mixture, const EvalFn& fitted, const EvalFn& reference,
                    int n_samples, uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("fitting_rmse: n_samples must be >= 1");
    const int k = sample_mixture.dims;
    const int n = sample_mixture.n;

    double wtot = 0;
    for (int i = 0; i < n; ++i) wtot += std::fabs(sample_mixture.weight(i));

    // stratified allocation, largest-remainder style via cumulative sums
    std::vector<int> counts(n, 0);
    if (wtot > 0) {
        double cum = 0;
        int assigned = 0;
        for (int i = 0; i < n; ++i) {
            cum += std::fabs(sample_mixture.weight(i));
            const int upto = static_cast<int>(std::llround(cum / wtot * n_samples));
            counts[i] = upto - assigned;
            assigned = upto;
        }
    } else {
        for (int i = 0; i < n; ++i) counts[i] = n_samples / n + (i < n_samples % n ? 1 : 0);
    }

    Rng rng(seed);
    double sq = 0;
    long used = 0;
    double lf[6], z[3], x[3];
    for (int i = 0; i < n; ++i) {
        if (counts[i] == 0) continue;
        if (!la::chol_packed(k, sample_mixture.cov(i), lf))
            throw covariance_degenerate_error("fitting_rmse: bad covariance");
        for (int s = 0; s < counts[i]; ++s) {
            double q;
            do {  // 3 sigma truncation
                q = 0;
                for (int d = 0; d < k; ++d) {
                    z[d] = rng.normal();
                    q += z[d] * z[d];
                }
            } while (q > 9.0);
            for (int d = 0; d < k; ++d) {
                x[d] = sample_mixture.pos(i)[d];
                for (int c = 0; c <= d; ++c) x[d] += lf[la::packed_index(d, c)] * z[c];
            }
            const double diff = fitted(x) - reference(x);
            sq += diff * diff;
            ++used;
        }
    }
    return std::sqrt(sq / static_cast<double>(used));
}

}  // namespace gmcn::act
