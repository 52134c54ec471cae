#include "gmcn/render.hpp"

#include <cmath>
#include <fstream>
#include <vector>

namespace gmcn::harness {

void render_mixture(ConstGaussSpan m, const std::string& path, const gm::BBox& box, int res_x,
                    int res_y, int slice_axis, double slice_coord) {
    if (res_x < 2 || res_y < 2) throw std::invalid_argument("render: resolution must be >= 2");
    int ax0 = 0, ax1 = 1;
    if (m.dims == 3) {
        if (slice_axis < 0 || slice_axis > 2) throw std::invalid_argument("render: bad axis");
        ax0 = slice_axis == 0 ? 1 : 0;
        ax1 = slice_axis == 2 ? 1 : 2;
    }
    if (!(box.hi[ax0] > box.lo[ax0]) || !(box.hi[ax1] > box.lo[ax1]))
        throw std::invalid_argument("render: zero-volume bbox");

    std::vector<gm::GaussPrep> gp;
    gm::prep_span(m, gp);
    std::vector<double> field(static_cast<size_t>(res_x) * res_y);
    double x[3] = {0, 0, 0};
    if (m.dims == 3) x[slice_axis] = slice_coord;
    double vmax = 0;
    for (int iy = 0; iy < res_y; ++iy) {
        x[ax1] = box.lo[ax1] + (iy + 0.5) * (box.hi[ax1] - box.lo[ax1]) / res_y;
        for (int ix = 0; ix < res_x; ++ix) {
            x[ax0] = box.lo[ax0] + (ix + 0.5) * (box.hi[ax0] - box.lo[ax0]) / res_x;
            double s = 0;
            for (int i = 0; i < m.n; ++i)
                s += gp[i].weight * gm::eval_prepped_unit(m.dims, gp[i], x);
            field[static_cast<size_t>(iy) * res_x + ix] = s;
            vmax = std::max(vmax, std::fabs(s));
        }
    }

    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("render: cannot open for writing: " + path);
    os << "P6\n" << res_x << " " << res_y << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(res_x) * 3);
    for (int iy = res_y - 1; iy >= 0; --iy) {  // +y up in the image
        for (int ix = 0; ix < res_x; ++ix) {
            const double t =
                vmax > 0 ? std::clamp(field[static_cast<size_t>(iy) * res_x + ix] / vmax, -1.0, 1.0)
                         : 0.0;
            unsigned char r, g, b;
            if (t >= 0) {  // white -> red
                r = 255;
                g = b = static_cast<unsigned char>(std::lround(255.0 * (1.0 - t)));
            } else {  // white -> blue
                b = 255;
                r = g = static_cast<unsigned char>(std::lround(255.0 * (1.0 + t)));
            }
            row[static_cast<size_t>(ix) * 3] = r;
            row[static_cast<size_t>(ix) * 3 + 1] = g;
            row[static_cast<size_t>(ix) * 3 + 2] = b;
        }
        os.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!os) throw io_error("render: write failed: " + path);
}

}  // namespace gmcn::harness
