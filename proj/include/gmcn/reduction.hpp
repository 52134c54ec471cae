#pragma once

#include <cstdint>
#include <vector>

#include "gmcn/types.hpp"

namespace gmcn::red {

// ---- Morton ordering and the radix tree ----

struct MortonCode {
    uint64_t code = 0;
    int source = 0;  // component index in the unsorted mixture
};

// Positions are normalized to the bounding box and quantized to 31 bits per
// axis in 2D (21 in 3D), bits interleaved with x in the lowest slot.
// Returned sorted ascending, ties broken by source index.
std::vector<MortonCode> morton_codes(ConstGaussSpan m);

uint64_t interleave2(uint32_t x, uint32_t y);
uint64_t interleave3(uint32_t x, uint32_t y, uint32_t z);

struct TreeNode {
    int parent = -1, left = -1, right = -1;
    int first = 0, count = 0;   // range in the sorted order
    int leaf = -1;              // sorted position for leaves, -1 for inner
    int split_level = -1;       // code splits at 64 + bit, duplicate ranges split by index bit
};

// Binary radix tree over Morton-sorted components. Inner nodes split at the
// highest differing bit of their code range; ranges of duplicate codes are
// extended by (sorted) index bits.
struct GaussianTree {
    std::vector<TreeNode> nodes;
    int root = -1;
    std::vector<MortonCode> order;

    int leaf_count() const { return static_cast<int>(order.size()); }
};

GaussianTree build_tree(std::vector<MortonCode> sorted);

// ---- Selection helpers ----

// Indices of the np largest weights (integral == weight for normalized
// Gaussians), ties broken by lower index; np >= n selects everything.
// Result is sorted ascending.
std::vector<int> select_top_integral(const double* weights, int n, int np);
std::vector<int> select_top_integral(ConstGaussSpan m, int np);

// Split up to 2T Gaussians into T clusters of centroids (farthest-point
// seeding, at most 10 Lloyd iterations) and pick the heaviest member of
// each. positions is m x k row major. |collected| <= T is the identity.
std::vector<int> cluster_init(int k, const double* positions, const double* weights, int m,
                              int T);

// ---- Mixture-to-mixture EM (one step) ----

struct VirtualSampleConfig {
    double n_virtual = 100.0;
};

struct EmFitConfig {
    double n_virtual = 100.0;
    double cov_floor = 1e-6;     // added to the diagonal when triggered
    double pivot_min = 1e-9;     // smallest acceptable Cholesky pivot
    double ws_floor_rel = 1e-12; // fitted mass below this fraction of the
                                 // target mass keeps the initialization
};

struct EmFitFlags {
    std::vector<uint8_t> row_uniform;  // responsibility row fell back to 1/S
    std::vector<uint8_t> wzero;        // fitted weight was zero, kept initialization
    std::vector<uint8_t> cov_floored;
};

// Fused E+M step: targets gathered by pointer, initial fit components are
// the targets selected by sel. Writes S fitted Gaussians to out (contiguous,
// gaussian_stride(k) apart). resp, if given, receives the m x S matrix.
void em_fit_forward(int k, const double* const* targets, int m, const int* sel, int S,
                    const EmFitConfig& cfg, double* out, EmFitFlags* flags = nullptr,
                    double* resp = nullptr);

// Hand-derived adjoint of em_fit_forward; recomputes the forward internals.
// grad_targets[i] points at the cotangent record of target i.
void em_fit_backward(int k, const double* const* targets, int m, const int* sel, int S,
                     const EmFitConfig& cfg, const double* out, const double* grad_out,
                     double* const* grad_targets);

// Spec-level operations on single channel mixtures (thin wrappers over the
// kernel above, used directly by tests and the bench).
std::vector<double> em_responsibilities(const Mixture& targets, const Mixture& fits,
                                        const VirtualSampleConfig& cfg,
                                        std::vector<uint8_t>* row_uniform = nullptr);
Mixture em_m_step(const Mixture& targets, const std::vector<double>& resp, const Mixture& init,
                  EmFitFlags* flags = nullptr);

// ---- Reductions (implemented on the autodiff tape; see tape.cpp) ----

struct ReduceResult {
    Mixture mixture;     // exactly np components, zero-weight padded if needed
    int real_count = 0;  // components that came from the fit
    bool padded = false;
};

ReduceResult modified_em_reduce(const Mixture& m, int np, const EmFitConfig& cfg = {});

struct TreeHemStats {
    uint64_t cache_gaussians = 0;  // allocated across all node caches
    uint64_t node_fits = 0;
};

ReduceResult treehem_reduce(const Mixture& m, int np, int T, const EmFitConfig& cfg = {},
                            TreeHemStats* stats = nullptr, int threads = 1);

}  // namespace gmcn::red
