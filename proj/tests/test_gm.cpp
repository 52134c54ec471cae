#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gmcn/bench.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/serialize.hpp"
#include "oracles.hpp"

using namespace gmcn;

namespace {

Mixture single(double a, double x, double y, double c00, double c10, double c11) {
    Mixture m(2, 1);
    double* g = m.g(0);
    g[0] = a;
    g[1] = x;
    g[2] = y;
    g[3] = c00;
    g[4] = c10;
    g[5] = c11;
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("gm-core");

TEST_CASE("eval_gaussian peak and shift") {
    const Mixture m = single(1, 0, 0, 1, 0, 1);
    const double x0[2] = {0, 0};
    CHECK(gm::eval_gaussian(2, m.g(0), x0) == doctest::Approx(1.0 / (2.0 * M_PI)).epsilon(1e-12));

    const Mixture s = single(3, 1, 2, 1, 0, 1);
    const double x1[2] = {1, 2};
    CHECK(gm::eval_gaussian(2, s.g(0), x1) ==
          doctest::Approx(3.0 / (2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("eval_gaussian against explicit-inverse evaluation") {
    const Mixture m = single(1, 0, 0, 4, 0, 1);
    const double x[2] = {2, 0};
    CHECK(gm::eval_gaussian(2, m.g(0), x) ==
          doctest::Approx(oracle::eval_gaussian_explicit(2, m.g(0), x)).epsilon(1e-12));

    for (int t = 0; t < 20; ++t) {
        const Mixture r2 = harness::random_mixture(2, 1, 100 + t);
        const Mixture r3 = harness::random_mixture(3, 1, 200 + t);
        Rng rng(300 + t);
        double p2[2] = {rng.uniform(-5, 5), rng.uniform(-5, 5)};
        double p3[3] = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
        CHECK(gm::eval_gaussian(2, r2.g(0), p2) ==
              doctest::Approx(oracle::eval_gaussian_explicit(2, r2.g(0), p2)).epsilon(1e-10));
        CHECK(gm::eval_gaussian(3, r3.g(0), p3) ==
              doctest::Approx(oracle::eval_gaussian_explicit(3, r3.g(0), p3)).epsilon(1e-10));
    }
}

TEST_CASE("eval_gaussian rejects degenerate covariance") {
    const Mixture m = single(1, 0, 0, 1, 2, 1);  // indefinite
    const double x[2] = {0, 0};
    CHECK_THROWS_AS(gm::eval_gaussian(2, m.g(0), x), covariance_degenerate_error);
}

TEST_CASE("eval_mixture basics") {
    MixtureBatch mb(2, 1, 1, 3);
    for (int i = 0; i < 3; ++i) {
        double* g = mb.g(0, 0, i);
        g[0] = 0;
        g[1] = i;
        g[3] = 1;
        g[5] = 1;
    }
    const double x[2] = {0.3, -0.2};
    CHECK(gm::eval_mixture(mb, 0, 0, x) == 0.0);

    // single component equals eval_gaussian
    mb.g(0, 0, 1)[0] = 2.5;
    CHECK(gm::eval_mixture(mb, 0, 0, x) ==
          doctest::Approx(gm::eval_gaussian(2, mb.g(0, 0, 1), x)).epsilon(1e-15));

    // symmetric pair at +-1
    Mixture pair(2, 2);
    double* g0 = pair.g(0);
    g0[0] = 1; g0[1] = 1; g0[3] = 1; g0[5] = 1;
    double* g1 = pair.g(1);
    g1[0] = 1; g1[1] = -1; g1[3] = 1; g1[5] = 1;
    const double origin[2] = {0, 0};
    const Mixture std1 = single(1, 0, 0, 1, 0, 1);
    const double at1[2] = {1, 0};
    CHECK(gm::eval_mixture(pair.span(), origin) ==
          doctest::Approx(2 * gm::eval_gaussian(2, std1.g(0), at1)).epsilon(1e-14));

    CHECK_THROWS_AS(mb.channel(0, 5), std::out_of_range);
    CHECK_THROWS_AS(mb.channel(2, 0), std::out_of_range);
}

TEST_CASE("convolution closed form is exact") {
    const Mixture a = single(1, 1, 0, 1, 0, 1);
    const Mixture b = single(1, 0, 2, 2, 0, 2);
    const Mixture c = gm::convolve_mixtures(a, b);
    REQUIRE(c.size() == 1);
    const double* g = c.g(0);
    CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(g[2] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(g[3] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(g[4] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(g[5] == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("convolution component count is N*M") {
    const Mixture a = harness::random_mixture(2, 16, 1);
    const Mixture b = harness::random_mixture(2, 5, 2);
    CHECK(gm::convolve_mixtures(a, b).size() == 80);
    for (int n = 1; n <= 4; ++n)
        for (int mm = 1; mm <= 4; ++mm)
            CHECK(gm::convolve_mixtures(harness::random_mixture(2, n, n),
                                        harness::random_mixture(2, mm, mm))
                      .size() == n * mm);
}

TEST_CASE("convolution against quadrature at sample points") {
    const Mixture a = harness::random_mixture(2, 2, 11);
    const Mixture b = harness::random_mixture(2, 2, 12);
    const Mixture c = gm::convolve_mixtures(a, b);
    Rng rng(13);
    for (int t = 0; t < 3; ++t) {
        const double x[2] = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const double quad = oracle::quadrature_convolution_at(a, b, x, 600, 9.0);
        const double ana = gm::eval_mixture(c.span(), x);
        CHECK(ana == doctest::Approx(quad).epsilon(1e-9));
    }
}

TEST_CASE("convolution commutes and integral factorizes") {
    const Mixture a = harness::random_mixture(2, 3, 21);
    const Mixture b = harness::random_mixture(2, 4, 22);
    const Mixture ab = gm::convolve_mixtures(a, b);
    const Mixture ba = gm::convolve_mixtures(b, a);
    Rng rng(23);
    for (int t = 0; t < 10; ++t) {
        const double x[2] = {rng.uniform(-6, 6), rng.uniform(-6, 6)};
        const double va = gm::eval_mixture(ab.span(), x);
        const double vb = gm::eval_mixture(ba.span(), x);
        CHECK(va == doctest::Approx(vb).epsilon(1e-12));
    }
    CHECK(gm::span_integral(ab.span()) ==
          doctest::Approx(gm::span_integral(a.span()) * gm::span_integral(b.span()))
              .epsilon(1e-12));
}

TEST_CASE("convolution dimension mismatch") {
    const Mixture a = harness::random_mixture(2, 2, 1);
    const Mixture b = harness::random_mixture(3, 2, 2);
    CHECK_THROWS_AS(gm::convolve_mixtures(a, b), std::invalid_argument);
}

TEST_CASE("convolution_layer counts and structure") {
    // Fi=8, Ni=16, Nk=5 -> 640 components per output channel
    MixtureBatch input(2, 2, 8, 16);
    MixtureBatch kernels(2, 3, 8, 5);  // Fo=3
    Rng rng(31);
    for (double& v : input.data) v = 0;
    for (int b = 0; b < 2; ++b)
        for (int f = 0; f < 8; ++f)
            for (int i = 0; i < 16; ++i) {
                const Mixture r = harness::random_mixture(2, 1, rng.next_u64());
                std::copy(r.data.begin(), r.data.end(), input.g(b, f, i));
            }
    for (int o = 0; o < 3; ++o)
        for (int f = 0; f < 8; ++f)
            for (int i = 0; i < 5; ++i) {
                const Mixture r = harness::random_mixture(2, 1, rng.next_u64());
                std::copy(r.data.begin(), r.data.end(), kernels.g(o, f, i));
            }
    const MixtureBatch out = gm::convolution_layer(input, kernels);
    CHECK(out.batch == 2);
    CHECK(out.channels == 3);
    CHECK(out.comps == 8 * 16 * 5);

    // output channel evaluation equals the sum of per-input-channel
    // convolutions evaluated independently
    const double x[2] = {0.4, -1.1};
    double expect = 0;
    for (int f = 0; f < 8; ++f) {
        Mixture mi(2, 16), mk(2, 5);
        for (int i = 0; i < 16; ++i)
            std::copy(input.g(0, f, i), input.g(0, f, i) + 6, mi.g(i));
        for (int i = 0; i < 5; ++i)
            std::copy(kernels.g(1, f, i), kernels.g(1, f, i) + 6, mk.g(i));
        expect += gm::eval_mixture(gm::convolve_mixtures(mi, mk).span(), x);
    }
    CHECK(gm::eval_mixture(out, 0, 1, x) == doctest::Approx(expect).epsilon(1e-12));

    MixtureBatch bad(2, 2, 7, 16);
    CHECK_THROWS_AS(gm::convolution_layer(bad, kernels), std::invalid_argument);
}

TEST_CASE("single-kernel convolution adds the kernel covariance") {
    MixtureBatch input(2, 1, 1, 4);
    Rng rng(41);
    for (int i = 0; i < 4; ++i) {
        const Mixture r = harness::random_mixture(2, 1, rng.next_u64());
        std::copy(r.data.begin(), r.data.end(), input.g(0, 0, i));
    }
    MixtureBatch kernels(2, 1, 1, 1);
    double* kg = kernels.g(0, 0, 0);
    kg[0] = 1;
    kg[1] = kg[2] = 0;
    kg[3] = 0.5;
    kg[4] = 0.1;
    kg[5] = 0.8;
    const MixtureBatch out = gm::convolution_layer(input, kernels);
    for (int i = 0; i < 4; ++i) {
        const double* gi = input.g(0, 0, i);
        const double* go = out.g(0, 0, i);
        CHECK(go[0] == doctest::Approx(gi[0]).epsilon(1e-14));
        CHECK(go[1] == doctest::Approx(gi[1]).epsilon(1e-14));
        CHECK(go[3] == doctest::Approx(gi[3] + 0.5).epsilon(1e-14));
        CHECK(go[4] == doctest::Approx(gi[4] + 0.1).epsilon(1e-14));
        CHECK(go[5] == doctest::Approx(gi[5] + 0.8).epsilon(1e-14));
    }
}

TEST_CASE("mixture_integral is the weight sum") {
    MixtureBatch mb(2, 1, 1, 3);
    const double w[3] = {1, 2, -0.5};
    for (int i = 0; i < 3; ++i) {
        double* g = mb.g(0, 0, i);
        g[0] = w[i];
        g[1] = i;
        g[3] = 1;
        g[5] = 1;
    }
    CHECK(gm::mixture_integral(mb)[0] == doctest::Approx(2.5).epsilon(1e-15));

    for (int i = 0; i < 3; ++i) mb.g(0, 0, i)[0] = 0;
    CHECK(gm::mixture_integral(mb)[0] == 0.0);
}

TEST_CASE("mixture integral against Monte Carlo") {
    const Mixture m = harness::random_mixture(2, 6, 51);
    const gm::BBox box = gm::support_bbox(m.span(), 8.0);
    const double mc = oracle::mc_integral(m.span(), box, 2000000, 52);
    CHECK(mc == doctest::Approx(gm::span_integral(m.span())).epsilon(0.01));
}

TEST_CASE("rescale_domain basics") {
    MixtureBatch mb(2, 1, 1, 1);
    double* g = mb.g(0, 0, 0);
    g[0] = 1;
    g[1] = 2;
    g[2] = -4;
    g[3] = 4;
    g[4] = 0;
    g[5] = 4;  // trace 8 -> sigma = 1/2
    auto [out, scale] = gm::rescale_domain(mb);
    CHECK(scale.sigma[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.g(0, 0, 0)[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.g(0, 0, 0)[2] == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK(out.g(0, 0, 0)[3] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.g(0, 0, 0)[5] == doctest::Approx(1.0).epsilon(1e-15));

    // fixed point: already at mean trace k
    auto [out2, scale2] = gm::rescale_domain(out);
    CHECK(scale2.sigma[0] == doctest::Approx(1.0).epsilon(1e-12));
    for (size_t i = 0; i < out.data.size(); ++i)
        CHECK(out2.data[i] == doctest::Approx(out.data[i]).epsilon(1e-12));
}

TEST_CASE("rescale_domain post-condition and evaluation invariance") {
    MixtureBatch mb(3, 3, 2, 4);
    Rng rng(61);
    for (int b = 0; b < 3; ++b)
        for (int f = 0; f < 2; ++f)
            for (int i = 0; i < 4; ++i) {
                const Mixture r = harness::random_mixture(3, 1, rng.next_u64());
                std::copy(r.data.begin(), r.data.end(), mb.g(b, f, i));
            }
    auto [out, scale] = gm::rescale_domain(mb);
    for (int b = 0; b < 3; ++b) {
        double tr = 0;
        for (int f = 0; f < 2; ++f)
            for (int i = 0; i < 4; ++i) {
                const double* c = out.g(b, f, i) + 4;
                tr += c[0] + c[2] + c[5];
            }
        CHECK(tr / 8.0 == doctest::Approx(3.0).epsilon(1e-9));
    }
    // eval(m', sigma x) * sigma^k == eval(m, x)
    for (int t = 0; t < 5; ++t) {
        const double x[3] = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
        const double s = scale.sigma[1];
        const double sx[3] = {s * x[0], s * x[1], s * x[2]};
        CHECK(gm::eval_mixture(out, 1, 0, sx) * s * s * s ==
              doctest::Approx(gm::eval_mixture(mb, 1, 0, x)).epsilon(1e-9));
    }
}

TEST_CASE("rescale_domain degenerate domain") {
    MixtureBatch mb(2, 1, 1, 0);
    CHECK_THROWS_AS(gm::rescale_domain(mb), degenerate_domain_error);
}

TEST_CASE("eval_grid") {
    Mixture zero(2, 2);
    zero.g(0)[3] = zero.g(0)[5] = 1;
    zero.g(1)[3] = zero.g(1)[5] = 1;
    gm::BBox box;
    box.lo[0] = box.lo[1] = -2;
    box.hi[0] = box.hi[1] = 2;
    int res[2] = {8, 8};
    for (double v : gm::eval_grid(zero.span(), box, res)) CHECK(v == 0.0);

    // symmetric standard Gaussian field reflects across both axes
    const Mixture std1 = single(1, 0, 0, 1, 0, 1);
    const auto field = gm::eval_grid(std1.span(), box, res);
    for (int iy = 0; iy < 8; ++iy)
        for (int ix = 0; ix < 8; ++ix) {
            CHECK(field[iy * 8 + ix] == doctest::Approx(field[iy * 8 + (7 - ix)]).epsilon(1e-12));
            CHECK(field[iy * 8 + ix] == doctest::Approx(field[(7 - iy) * 8 + ix]).epsilon(1e-12));
        }

    // maximum lands within one cell of the mean
    const Mixture off = single(2, 0.3, -0.7, 0.5, 0.1, 0.8);
    int res2[2] = {64, 64};
    const auto f2 = gm::eval_grid(off.span(), box, res2);
    size_t arg = 0;
    for (size_t i = 1; i < f2.size(); ++i)
        if (f2[i] > f2[arg]) arg = i;
    const double cell = 4.0 / 64;
    const double cx = -2 + (arg % 64 + 0.5) * cell;
    const double cy = -2 + (arg / 64 + 0.5) * cell;
    CHECK(std::fabs(cx - 0.3) <= cell);
    CHECK(std::fabs(cy + 0.7) <= cell);

    int bad[2] = {1, 8};
    CHECK_THROWS_AS(gm::eval_grid(std1.span(), box, bad), std::invalid_argument);
    gm::BBox flat = box;
    flat.hi[0] = flat.lo[0];
    CHECK_THROWS_AS(gm::eval_grid(std1.span(), flat, res), std::invalid_argument);

    // 3D field peaks within one cell of the mean
    const Mixture g3 = harness::random_mixture(3, 1, 67);
    gm::BBox box3 = gm::support_bbox(g3.span(), 3.0);
    int res3[3] = {24, 24, 24};
    const auto f3 = gm::eval_grid(g3.span(), box3, res3);
    size_t arg3 = 0;
    for (size_t i = 1; i < f3.size(); ++i)
        if (std::fabs(f3[i]) > std::fabs(f3[arg3])) arg3 = i;
    for (int d = 0; d < 3; ++d) {
        const size_t idx = d == 0 ? arg3 % 24 : d == 1 ? arg3 / 24 % 24 : arg3 / (24 * 24);
        const double cell = (box3.hi[d] - box3.lo[d]) / 24;
        const double c = box3.lo[d] + (idx + 0.5) * cell;
        CHECK(std::fabs(c - g3.g(0)[1 + d]) <= cell);
    }
}

TEST_CASE("mixture serialization round trip") {
    MixtureBatch mb(3, 2, 3, 4);
    Rng rng(71);
    for (double& v : mb.data) v = rng.uniform(-3, 3);
    std::stringstream ss;
    io::write_mixture(ss, mb);
    const MixtureBatch back = io::read_mixture(ss);
    CHECK(back.dims == 3);
    CHECK(back.batch == 2);
    CHECK(back.channels == 3);
    CHECK(back.comps == 4);
    for (size_t i = 0; i < mb.data.size(); ++i)
        CHECK(back.data[i] == doctest::Approx(mb.data[i]).epsilon(1e-6));  // f32 storage

    std::stringstream text;
    io::write_mixture_text(text, mb);
    CHECK(text.str().find("channel 1 2") != std::string::npos);

    std::stringstream bad("XXXX not a mixture");
    CHECK_THROWS_AS(io::read_mixture(bad), io_error);
}

TEST_SUITE_END();
