#include "gmcn/memcalc.hpp"

#include <cstdio>

namespace gmcn::harness {

FootprintResult memcalc_row(const FootprintRow& r) {
    FootprintResult out;
    out.kernels = r.fi * r.fo * r.nk;
    out.data = r.batch * (r.fo * r.no + r.fo * r.np);
    out.gaussians = 2 * (out.kernels + out.data);
    out.mb_2d = 6.0 * 4.0 * out.gaussians / (1024.0 * 1024.0);
    out.mb_3d = 10.0 * 4.0 * out.gaussians / (1024.0 * 1024.0);
    return out;
}

std::string memcalc_table(const std::vector<FootprintRow>& rows) {
    std::string s;
    char line[256];
    std::snprintf(line, sizeof(line), "%6s %4s %4s %6s %8s %6s %4s %10s %12s %12s %9s %9s\n",
                  "B", "Fi", "Fo", "Ni", "No", "Np", "Nk", "K", "D", "G", "M2D", "M3D");
    s += line;
    FootprintResult tot;
    for (const FootprintRow& r : rows) {
        const FootprintResult c = memcalc_row(r);
        std::snprintf(line, sizeof(line),
                      "%6ld %4ld %4ld %6ld %8ld %6ld %4ld %10ld %12ld %12ld %9.2f %9.2f\n",
                      r.batch, r.fi, r.fo, r.ni, r.no, r.np, r.nk, c.kernels, c.data,
                      c.gaussians, c.mb_2d, c.mb_3d);
        s += line;
        tot.kernels += c.kernels;
        tot.data += c.data;
        tot.gaussians += c.gaussians;
        tot.mb_2d += c.mb_2d;
        tot.mb_3d += c.mb_3d;
    }
    std::snprintf(line, sizeof(line),
                  "%6s %4s %4s %6s %8s %6s %4s %10ld %12ld %12ld %9.2f %9.2f\n", "total", "",
                  "", "", "", "", "", tot.kernels, tot.data, tot.gaussians, tot.mb_2d,
                  tot.mb_3d);
    s += line;
    return s;
}

}  // namespace gmcn::harness
