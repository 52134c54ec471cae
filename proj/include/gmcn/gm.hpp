#pragma once

#include <utility>
#include <vector>

#include "gmcn/types.hpp"

namespace gmcn::gm {

// Cholesky-prepared component for repeated evaluation.
struct GaussPrep {
    double lf[6];       // packed factor of the covariance
    double logconst;    // -(k/2) log(2pi) - 1/2 logdet
    double weight;
    const double* pos;
};

GaussPrep prep(int k, const double* g);
void prep_span(ConstGaussSpan m, std::vector<GaussPrep>& out);

// exp(logconst - q/2) for the prepared component at x, without the weight.
double eval_prepped_unit(int k, const GaussPrep& gp, const double* x);
inline double eval_prepped(int k, const GaussPrep& gp, const double* x) {
    return gp.weight * eval_prepped_unit(k, gp, x);
}

// a * (2pi)^(-k/2) det(C)^(-1/2) exp(-(x-b)^T C^-1 (x-b) / 2)
double eval_gaussian(int k, const double* g, const double* x);
double eval_mixture(ConstGaussSpan m, const double* x);
double eval_mixture(const MixtureBatch& m, int b, int f, const double* x);

// Derivatives of a single evaluation, for the differentiable ops and tests.
struct EvalDerivs {
    double value = 0;          // weighted value
    double unit = 0;           // value / weight
    double wrt_weight = 0;
    double wrt_pos[3] = {0, 0, 0};
    double wrt_cov[6] = {0, 0, 0, 0, 0, 0};  // packed, d/d(packed entry)
    double wrt_x[3] = {0, 0, 0};
};
EvalDerivs eval_gaussian_derivs(int k, const double* g, const double* x);

// Closed-form convolution of two channel mixtures: every pair (n, m) yields
// weight a_n a_m, position b_n + beta_m, covariance C_n + Gamma_m.
// out must hold a.n * b.n components; pair (n, m) lands at n * b.n + m.
void convolve_spans(ConstGaussSpan a, ConstGaussSpan b, GaussSpan out);
Mixture convolve_mixtures(const Mixture& a, const Mixture& b);

// One layer of analytic convolution: kernels indexed [out-channel (batch),
// in-channel, component]. Output channel f_o concatenates the F_i per-input
// convolutions, so it has exactly F_i * N_i * N_k components.
MixtureBatch convolution_layer(const MixtureBatch& input, const MixtureBatch& kernels);

// Normalized Gaussians integrate to one, so the integral is the weight sum.
double span_integral(ConstGaussSpan m);
std::vector<double> mixture_integral(const MixtureBatch& m);  // [b * F + f]

// Mean covariance trace over a set of spans (one batch element).
double mean_cov_trace(const ConstGaussSpan* spans, int count);
// Scale positions by sigma and covariances by sigma^2, in place.
void rescale_apply(GaussSpan m, double sigma);

// Per batch element: sigma = sqrt(k / mean trace), applied across all
// channels jointly so channels of one sample stay aligned.
std::pair<MixtureBatch, DomainScale> rescale_domain(const MixtureBatch& m);

struct BBox {
    double lo[3] = {0, 0, 0};
    double hi[3] = {0, 0, 0};
};

// Mixture evaluated at cell centers; x varies fastest, then y, then z.
std::vector<double> eval_grid(ConstGaussSpan m, const BBox& box, const int* resolution);

// Axis-aligned box covering mean +- nsigma * sqrt(largest variance) of
// every component (ignores zero-weight components unless all are zero).
BBox support_bbox(ConstGaussSpan m, double nsigma);

}  // namespace gmcn::gm
