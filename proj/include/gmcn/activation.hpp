#pragma once

#include <functional>
#include <vector>

#include "gmcn/rng.hpp"
#include "gmcn/types.hpp"

namespace gmcn::act {

struct DenseFitConfig {
    double epsilon_floor = 1e-6;  // scaled by max(|a|, 1) of the mixture
    double eval_clamp = 1e-12;    // denominator floor; below it the weight is zeroed
};

// Intermediates kept for the backward pass and for diagnostics.
struct DenseFitScratch {
    double epsilon = 0;            // resolved absolute epsilon
    int eps_source = -1;           // weight owning max|a| when max|a| > 1, else -1
    std::vector<double> u;         // gm(B_i; a)
    std::vector<double> v;         // gm(B_i; a')
    std::vector<uint8_t> zeroed;   // denominator fell below the clamp
};

// Fit the ReLU of a mixture by re-weighting: a'_i = a_i if positive else
// epsilon, then a''_i = a'_i * relu(gm(B_i; a)) / gm(B_i; a'). Positions and
// covariances are copied unchanged. O(N^2) pairwise evaluations.
void relu_dense_fit(ConstGaussSpan in, GaussSpan out, const DenseFitConfig& cfg,
                    DenseFitScratch* scratch = nullptr);
Mixture relu_dense_fit(const Mixture& m, const DenseFitConfig& cfg = {});

// Vector-Jacobian product of relu_dense_fit. grad_out holds cotangents for
// the full output span (weights, positions, covariances); contributions are
// accumulated into grad_in. Requires the scratch captured by the forward.
void relu_dense_fit_backward(ConstGaussSpan in, const double* grad_out, double* grad_in,
                             const DenseFitConfig& cfg, const DenseFitScratch& scratch);

// Ablation activation: clamp weights at zero in parameter space.
void parameter_space_relu(ConstGaussSpan in, GaussSpan out);
Mixture parameter_space_relu(const Mixture& m);

// Least-squares reference for the ReLU fit (excluded from the
// differentiable path). Solves min ||A y - t||_2 by normal equations with a
// small ridge; A_ij is the unit-weight evaluation of Gaussian j at D_i and
// t_i = relu(gm(D_i)).
enum class SampleSet { Centers, Random, CentersPlusRandom };
std::vector<double> build_sample_set(ConstGaussSpan m, SampleSet kind, int random_count,
                                     Rng& rng);  // flat k-vectors
std::vector<double> least_squares_relu_fit(ConstGaussSpan m, const std::vector<double>& points);

// Root-mean-square difference of two evaluation functions at positions
// stratified over `samples`: components chosen |weight|-proportionally,
// draws truncated at 3 sigma.
using EvalFn = std::function<double(const double*)>;
double fitting_rmse(ConstGaussSpan sample_mixture, const EvalFn& fitted, const EvalFn& reference,
                    int n_samples, uint64_t seed);

// Evaluation handle for a mixture, and for relu(mixture).
EvalFn mixture_eval_fn(ConstGaussSpan m);
EvalFn relu_mixture_eval_fn(ConstGaussSpan m);

}  // namespace gmcn::act
