#pragma once

#include <cstdint>
#include <string>

#include "gmcn/types.hpp"

namespace gmcn::harness {

struct BenchConfig {
    int dims = 2;
    int n = 256;           // components per mixture
    int mixtures = 8;
    int np = 32;           // reduction target
    int rmse_samples = 20000;
    uint64_t seed = 7;
    int threads = 1;
};

// Wall time and the three fitting-RMSE measurements (all / ReLU /
// reduction) per method: the dense heuristic, the least-squares reference
// with its sample-set choices, and the three reduction variants.
std::string bench_fitting(const BenchConfig& cfg);

// random mixed-sign mixture used by the bench and the complexity tests
Mixture random_mixture(int dims, int n, uint64_t seed, bool nonnegative = false);

}  // namespace gmcn::harness
