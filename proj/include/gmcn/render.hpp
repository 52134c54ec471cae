#pragma once

#include <string>

#include "gmcn/gm.hpp"
#include "gmcn/types.hpp"

namespace gmcn::harness {

// Symmetric diverging color map over [-v, v] with v = max |value|;
// writes a binary PPM (P6). 3D mixtures are rendered as an axis-aligned
// slice (slice_axis fixed at slice_coord).
void render_mixture(ConstGaussSpan m, const std::string& path, const gm::BBox& box, int res_x,
                    int res_y, int slice_axis = 2, double slice_coord = 0.0);

}  // namespace gmcn::harness
