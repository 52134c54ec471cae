#include "gmcn/fdcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace gmcn::ad {

FdResult finite_difference_check(const FdFn& f, std::vector<double> params, double step,
                                 const std::vector<double>& analytic_grad,
                                 double boundary_window) {
    uint64_t sig0 = 0, sig1 = 0;
    const double l0 = f(params.data(), &sig0);
    const double l1 = f(params.data(), &sig1);
    if (l0 != l1 || sig0 != sig1)
        throw std::runtime_error("finite_difference_check: forward is not deterministic");

    FdResult res;
    const size_t n = params.size();
    for (size_t i = 0; i < n; ++i) {
        const double saved = params[i];
        uint64_t sp = 0, sm = 0;
        params[i] = saved + step;
        const double lp = f(params.data(), &sp);
        params[i] = saved - step;
        const double lm = f(params.data(), &sm);
        bool boundary = sp != sig0 || sm != sig0;
        if (!boundary && boundary_window > step) {
            uint64_t swp = 0, swm = 0;
            params[i] = saved + boundary_window;
            f(params.data(), &swp);
            params[i] = saved - boundary_window;
            f(params.data(), &swm);
            boundary = swp != sig0 || swm != sig0;
        }
        params[i] = saved;
        if (boundary) {
            ++res.skipped;
            continue;
        }
        const double fd = (lp - lm) / (2.0 * step);
        const double an = analytic_grad[i];
        const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-8});
        ++res.checked;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = static_cast<int>(i);
        }
    }
    return res;
}

}  // namespace gmcn::ad
