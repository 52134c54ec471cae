#include "gmcn/toydata.hpp"

#include <cmath>

#include "gmcn/inputfit.hpp"
#include "gmcn/rng.hpp"

namespace gmcn::harness {

namespace {

void emit_gaussian(double* g, double x, double y, double var, double w) {
    g[0] = w;
    g[1] = x;
    g[2] = y;
    g[3] = var;
    g[4] = 0;
    g[5] = var;
}

}  // namespace

Dataset make_toy_dataset(int count, uint64_t seed) {
    Dataset ds;
    ds.mixtures = MixtureBatch(2, count, 1, kToyComps);
    ds.labels.resize(count);
    Rng rng(seed);
    for (int s = 0; s < count; ++s) {
        const int cls = s % kToyClasses;
        ds.labels[s] = cls;
        const double rot = rng.uniform(-0.3, 0.3);
        const double ox = rng.uniform(-0.3, 0.3), oy = rng.uniform(-0.3, 0.3);
        const double cr = std::cos(rot), sr = std::sin(rot);
        for (int i = 0; i < kToyComps; ++i) {
            double x = 0, y = 0, var = 0.08;
            if (cls == 0) {  // ring
                const double ang = 2.0 * M_PI * i / kToyComps;
                const double rad = 2.0 + rng.normal(0.0, 0.06);
                x = rad * std::cos(ang);
                y = rad * std::sin(ang);
            } else if (cls == 1) {  // bar
                x = -2.5 + 5.0 * i / (kToyComps - 1);
                y = rng.normal(0.0, 0.08);
            } else {  // two blobs
                const double cx = i < kToyComps / 2 ? -1.8 : 1.8;
                x = cx + rng.normal(0.0, 0.35);
                y = rng.normal(0.0, 0.35);
                var = 0.15;
            }
            x += rng.normal(0.0, 0.05);
            y += rng.normal(0.0, 0.05);
            var *= rng.uniform(0.8, 1.25);
            const double w = std::max(0.2, rng.normal(1.0, 0.15)) / kToyComps;
            const double rx = cr * x - sr * y + ox;
            const double ry = sr * x + cr * y + oy;
            emit_gaussian(ds.mixtures.g(s, 0, i), rx, ry, var, w);
        }
    }
    // same normalization path as fitted input data
    std::vector<Mixture> mixes(count);
    for (int s = 0; s < count; ++s) {
        mixes[s] = Mixture(2, kToyComps);
        for (int i = 0; i < kToyComps * gaussian_stride(2); ++i)
            mixes[s].data[i] = ds.mixtures.data[ds.mixtures.channel_offset(s, 0) + i];
    }
    infit::normalize_dataset(mixes);
    for (int s = 0; s < count; ++s)
        for (int i = 0; i < kToyComps * gaussian_stride(2); ++i)
            ds.mixtures.data[ds.mixtures.channel_offset(s, 0) + i] = mixes[s].data[i];
    return ds;
}

}  // namespace gmcn::harness
