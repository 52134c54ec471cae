#pragma once

#include <atomic>
#include <cstdint>

namespace gmcn::counters {

// Rough work meters used by complexity tests and the fitting bench.
inline std::atomic<uint64_t> pair_evals{0};        // dense-fit pairwise evaluations
inline std::atomic<uint64_t> em_pair_terms{0};     // responsibility matrix entries
inline std::atomic<uint64_t> tree_cache_slots{0};  // Gaussians allocated in tree caches

inline void reset() {
    pair_evals = 0;
    em_pair_terms = 0;
    tree_cache_slots = 0;
}

}  // namespace gmcn::counters
