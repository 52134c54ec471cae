#pragma once

#include <string>
#include <vector>

namespace gmcn::harness {

struct FootprintRow {
    long batch = 0, fi = 0, fo = 0, ni = 0, no = 0, np = 0, nk = 0;
};

struct FootprintResult {
    long kernels = 0;    // K = Fi Fo Nk
    long data = 0;       // D = B (Fo No + Fo Np)
    long gaussians = 0;  // G = 2 (K + D)
    double mb_2d = 0;    // 6 floats per 2D Gaussian, binary megabytes
    double mb_3d = 0;    // 10 floats per 3D Gaussian
};

FootprintResult memcalc_row(const FootprintRow& row);
std::string memcalc_table(const std::vector<FootprintRow>& rows);

}  // namespace gmcn::harness
