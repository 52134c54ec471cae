#pragma once

#include <cstdint>
#include <vector>

#include "gmcn/types.hpp"

namespace gmcn::harness {

struct Dataset {
    MixtureBatch mixtures;  // [samples, 1 channel, N]
    std::vector<int> labels;
};

// Synthetic 2D three-class set (ring, bar, two-blob), 16 Gaussians per
// sample with jittered positions, weights and covariances. Already
// normalized (unit mean integral, mean covariance trace = dims).
Dataset make_toy_dataset(int count, uint64_t seed);

inline constexpr int kToyClasses = 3;
inline constexpr int kToyComps = 16;

}  // namespace gmcn::harness
