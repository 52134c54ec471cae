#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace gmcn::ad {

struct FdResult {
    double max_rel_err = 0;
    int checked = 0;
    int skipped = 0;      // parameters sitting on a discrete-decision boundary
    int worst_index = -1;
};

// Forward evaluation at a parameter vector; *sig must be filled with the
// hash of all discrete decisions taken during the pass.
using FdFn = std::function<double(const double* params, uint64_t* sig)>;

// Central differences per parameter against the provided analytic gradient.
// Relative error is |fd - analytic| / max(|fd|, |analytic|, 1e-8).
// Parameters whose perturbation (by the step or by boundary_window) changes
// the discrete signature are skipped. Throws if two evaluations at the base
// point disagree (non-deterministic forward).
FdResult finite_difference_check(const FdFn& f, std::vector<double> params, double step,
                                 const std::vector<double>& analytic_grad,
                                 double boundary_window = 1e-4);

}  // namespace gmcn::ad
