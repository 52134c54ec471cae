#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "gmcn/activation.hpp"
#include "gmcn/bench.hpp"
#include "gmcn/counters.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/reduction.hpp"
#include "oracles.hpp"

using namespace gmcn;

namespace {

// Appendix-style responsibilities recomputed in long double with explicit
// 2x2 inverses, straight from the formula.
std::vector<long double> responsibilities_ld(const Mixture& targets, const Mixture& fits,
                                             double n_virtual) {
    const int m = targets.size(), S = fits.size();
    long double wsum = 0;
    for (int i = 0; i < m; ++i) wsum += targets.g(i)[0];
    std::vector<long double> r(static_cast<size_t>(m) * S, 0.0L);
    for (int i = 0; i < m; ++i) {
        const long double hatw = wsum > 0 ? n_virtual * targets.g(i)[0] / wsum : 0.0L;
        std::vector<long double> val(S);
        long double norm = 0;
        for (int s = 0; s < S; ++s) {
            const double* f = fits.g(s);
            const long double c00 = f[3], c10 = f[4], c11 = f[5];
            const long double det = c00 * c11 - c10 * c10;
            const long double i00 = c11 / det, i10 = -c10 / det, i11 = c00 / det;
            const long double dx = targets.g(i)[1] - f[1], dy = targets.g(i)[2] - f[2];
            const long double q = dx * (i00 * dx + i10 * dy) + dy * (i10 * dx + i11 * dy);
            const long double gval = 1.0L / (2.0L * M_PI * sqrtl(det)) * expl(-0.5L * q);
            const long double tr = i00 * targets.g(i)[3] + 2.0L * i10 * targets.g(i)[4] +
                                   i11 * targets.g(i)[5];
            const long double lik = powl(gval * expl(-0.5L * tr), hatw);
            val[s] = lik * f[0];
            norm += val[s];
        }
        for (int s = 0; s < S; ++s)
            r[static_cast<size_t>(i) * S + s] = norm > 0 ? val[s] / norm : 1.0L / S;
    }
    return r;
}

Mixture gaussian2(double w, double x, double y, double c00, double c10, double c11) {
    Mixture m(2, 1);
    double* g = m.g(0);
    g[0] = w;
    g[1] = x;
    g[2] = y;
    g[3] = c00;
    g[4] = c10;
    g[5] = c11;
    return m;
}

Mixture concat(const Mixture& a, const Mixture& b) {
    Mixture out(a.dims, a.size() + b.size());
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("reduction-fitting");

TEST_CASE("morton code of a single point is zero") {
    const Mixture m = gaussian2(1, 3.7, -2.2, 1, 0, 1);
    const auto codes = red::morton_codes(m.span());
    REQUIRE(codes.size() == 1);
    CHECK(codes[0].code == 0);
}

TEST_CASE("bit interleave matches the loop oracle") {
    // quantized x=3 (0b11), y=1 (0b01) interleaves to 0b0111 = 7
    CHECK(red::interleave2(3, 1) == 7);
    Rng rng(42);
    for (int t = 0; t < 200; ++t) {
        const uint32_t q2[2] = {static_cast<uint32_t>(rng.below(1u << 31)),
                                static_cast<uint32_t>(rng.below(1u << 31))};
        CHECK(red::interleave2(q2[0], q2[1]) == oracle::interleave_loop(q2, 2, 31));
        const uint32_t q3[3] = {static_cast<uint32_t>(rng.below(1u << 21)),
                                static_cast<uint32_t>(rng.below(1u << 21)),
                                static_cast<uint32_t>(rng.below(1u << 21))};
        CHECK(red::interleave3(q3[0], q3[1], q3[2]) == oracle::interleave_loop(q3, 3, 21));
    }
}

TEST_CASE("morton order matches the interleave oracle on random points") {
    const Mixture m = harness::random_mixture(2, 64, 5);
    const auto codes = red::morton_codes(m.span());
    for (size_t i = 1; i < codes.size(); ++i) {
        CHECK((codes[i - 1].code < codes[i].code ||
               (codes[i - 1].code == codes[i].code && codes[i - 1].source < codes[i].source)));
    }
    double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
    for (int i = 0; i < 64; ++i)
        for (int d = 0; d < 2; ++d) {
            lo[d] = std::min(lo[d], m.g(i)[1 + d]);
            hi[d] = std::max(hi[d], m.g(i)[1 + d]);
        }
    for (const auto& mc : codes) {
        uint32_t q[2];
        for (int d = 0; d < 2; ++d) {
            const double t = (m.g(mc.source)[1 + d] - lo[d]) / (hi[d] - lo[d]);
            q[d] = std::min<uint32_t>((1u << 31) - 1, static_cast<uint32_t>(t * 2147483648.0));
        }
        CHECK(mc.code == oracle::interleave_loop(q, 2, 31));
    }
}

TEST_CASE("degenerate bounding box gives all-zero codes ordered by index") {
    Mixture m(2, 5);
    for (int i = 0; i < 5; ++i) {
        double* g = m.g(i);
        g[0] = i + 1;
        g[1] = 1.5;
        g[2] = -0.5;
        g[3] = g[5] = 1;
    }
    const auto codes = red::morton_codes(m.span());
    for (int i = 0; i < 5; ++i) {
        CHECK(codes[i].code == 0);
        CHECK(codes[i].source == i);
    }
}

TEST_CASE("radix tree structure") {
    {
        const Mixture m = gaussian2(1, 0, 0, 1, 0, 1);
        const auto tree = red::build_tree(red::morton_codes(m.span()));
        CHECK(tree.nodes.size() == 1);
        CHECK(tree.nodes[tree.root].leaf == 0);
    }
    {
        const Mixture m = harness::random_mixture(2, 2, 9);
        const auto tree = red::build_tree(red::morton_codes(m.span()));
        REQUIRE(tree.nodes.size() == 3);
        const auto& root = tree.nodes[tree.root];
        CHECK(tree.nodes[root.left].leaf >= 0);
        CHECK(tree.nodes[root.right].leaf >= 0);
    }
    // random 64-component tree: every leaf reachable exactly once upward,
    // split level strictly decreasing along root-to-leaf paths
    const Mixture m = harness::random_mixture(2, 64, 10);
    const auto tree = red::build_tree(red::morton_codes(m.span()));
    CHECK(tree.nodes.size() == 127);
    std::set<int> seen;
    for (size_t id = 0; id < tree.nodes.size(); ++id) {
        const auto& nd = tree.nodes[id];
        if (nd.leaf < 0) continue;
        CHECK(seen.insert(nd.leaf).second);
        int cur = static_cast<int>(id);
        int last_level = -1;
        int hops = 0;
        while (tree.nodes[cur].parent >= 0) {
            const int p = tree.nodes[cur].parent;
            CHECK((tree.nodes[p].left == cur || tree.nodes[p].right == cur));
            if (last_level >= 0) CHECK(tree.nodes[p].split_level > last_level);
            last_level = tree.nodes[p].split_level;
            cur = p;
            REQUIRE(++hops < 200);
        }
        CHECK(cur == tree.root);
    }
    CHECK(seen.size() == 64);
}

TEST_CASE("radix tree with duplicate codes splits by index bits") {
    Mixture m(2, 6);
    for (int i = 0; i < 6; ++i) {
        double* g = m.g(i);
        g[0] = 1;
        g[1] = 2.0;
        g[2] = 2.0;
        g[3] = g[5] = 1;
    }
    const auto tree = red::build_tree(red::morton_codes(m.span()));
    CHECK(tree.nodes.size() == 11);
    std::set<int> leaves;
    for (const auto& nd : tree.nodes)
        if (nd.leaf >= 0) leaves.insert(nd.leaf);
    CHECK(leaves.size() == 6);
}

TEST_CASE("select_top_integral") {
    const double w1[3] = {3, 1, 2};
    CHECK(red::select_top_integral(w1, 3, 2) == std::vector<int>{0, 2});
    const double w2[4] = {5, 5, 5, 5};
    CHECK(red::select_top_integral(w2, 4, 2) == std::vector<int>{0, 1});
    CHECK(red::select_top_integral(w1, 3, 7) == std::vector<int>{0, 1, 2});

    Rng rng(11);
    for (int t = 0; t < 30; ++t) {
        std::vector<double> w(20);
        for (double& v : w) v = rng.uniform(0, 1);
        const auto sel = red::select_top_integral(w.data(), 20, 6);
        std::vector<int> idx(20);
        for (int i = 0; i < 20; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(),
                  [&](int a, int b) { return w[a] != w[b] ? w[a] > w[b] : a < b; });
        std::vector<int> expect(idx.begin(), idx.begin() + 6);
        std::sort(expect.begin(), expect.end());
        CHECK(sel == expect);
    }
}

TEST_CASE("cluster_init separations and ties") {
    const double pos[8] = {0, 0, 0.1, 0, 10, 10, 10.1, 10};
    const double w[4] = {1, 2, 5, 3};
    const auto picks = red::cluster_init(2, pos, w, 4, 2);
    REQUIRE(picks.size() == 2);
    CHECK(std::set<int>(picks.begin(), picks.end()) == std::set<int>{1, 2});

    // identical positions: ties break by weight, then index
    const double pos2[8] = {1, 1, 1, 1, 1, 1, 1, 1};
    const double w2[4] = {2, 7, 7, 1};
    const auto p2 = red::cluster_init(2, pos2, w2, 4, 2);
    REQUIRE(p2.size() == 2);
    CHECK(std::set<int>(p2.begin(), p2.end()) == std::set<int>{1, 2});

    CHECK(red::cluster_init(2, pos, w, 2, 4) == std::vector<int>{0, 1});
}

TEST_CASE("cluster_init against the exhaustive partition oracle") {
    int matches = 0;
    const int trials = 30;
    for (int t = 0; t < trials; ++t) {
        Rng rng(900 + t);
        const int m = 8, T = 4;
        std::vector<double> pos(m * 2), w(m);
        for (int i = 0; i < m; ++i) {
            const int c = i % T;
            pos[i * 2] = c * 6.0 + rng.normal(0, 0.5);
            pos[i * 2 + 1] = (c % 2) * 6.0 + rng.normal(0, 0.5);
            w[i] = rng.uniform(0.1, 2.0);
        }
        const auto picks = red::cluster_init(2, pos.data(), w.data(), m, T);
        const auto best = oracle::exhaustive_partition(2, pos.data(), nullptr, m, T);
        std::set<int> expect;
        for (int c = 0; c < T; ++c) {
            int heaviest = -1;
            for (int i = 0; i < m; ++i)
                if (best.assign[i] == c && (heaviest < 0 || w[i] > w[heaviest])) heaviest = i;
            expect.insert(heaviest);
        }
        if (std::set<int>(picks.begin(), picks.end()) == expect) ++matches;
    }
    CHECK(matches >= trials - 2);  // Lloyd can stall in a local optimum
}

TEST_CASE("em_responsibilities symmetry and normalization") {
    const Mixture targets = harness::random_mixture(2, 12, 21, true);
    red::VirtualSampleConfig vcfg;

    Mixture fits = concat(gaussian2(1, 0.5, 0.5, 1, 0, 1), gaussian2(1, 0.5, 0.5, 1, 0, 1));
    auto r = red::em_responsibilities(targets, fits, vcfg);
    for (double v : r) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));

    const Mixture one = gaussian2(2, 0, 0, 2, 0.2, 1);
    r = red::em_responsibilities(targets, one, vcfg);
    for (double v : r) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("em_responsibilities against long-double recomputation") {
    for (int t = 0; t < 20; ++t) {
        const Mixture targets = harness::random_mixture(2, 10, 100 + t, true);
        Mixture fits(2, 3);
        for (int s = 0; s < 3; ++s) std::copy(targets.g(s * 3), targets.g(s * 3) + 6, fits.g(s));
        red::VirtualSampleConfig vcfg;
        const auto r = red::em_responsibilities(targets, fits, vcfg);
        const auto rl = responsibilities_ld(targets, fits, vcfg.n_virtual);
        for (size_t i = 0; i < r.size(); ++i)
            CHECK(r[i] == doctest::Approx(static_cast<double>(rl[i])).epsilon(1e-9));
        for (int i = 0; i < 10; ++i) {
            double s = 0;
            for (int j = 0; j < 3; ++j) s += r[i * 3 + j];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("em_m_step merges a symmetric pair into the exact moment match") {
    const Mixture targets = concat(gaussian2(1, 1, 0, 1, 0, 1), gaussian2(1, -1, 0, 1, 0, 1));
    const Mixture init = gaussian2(1, 0.2, 0, 1, 0, 1);
    const std::vector<double> r = {1.0, 1.0};
    const Mixture out = red::em_m_step(targets, r, init);
    REQUIRE(out.size() == 1);
    CHECK(out.g(0)[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(out.g(0)[1] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(out.g(0)[2] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(out.g(0)[3] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(out.g(0)[4] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(out.g(0)[5] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("em_m_step single target passthrough and mass conservation") {
    const Mixture t1 = harness::random_mixture(2, 1, 31, true);
    const std::vector<double> r1 = {1.0};
    const Mixture out1 = red::em_m_step(t1, r1, t1);
    for (int d = 0; d < 6; ++d) CHECK(out1.g(0)[d] == doctest::Approx(t1.g(0)[d]).epsilon(1e-12));

    for (int t = 0; t < 50; ++t) {
        const Mixture targets = harness::random_mixture(2, 14, 200 + t, true);
        Mixture fits(2, 4);
        for (int s = 0; s < 4; ++s) std::copy(targets.g(s), targets.g(s) + 6, fits.g(s));
        red::VirtualSampleConfig vcfg;
        const auto r = red::em_responsibilities(targets, fits, vcfg);
        const Mixture out = red::em_m_step(targets, r, fits);
        double min = 0, mout = 0;
        for (int i = 0; i < targets.size(); ++i) min += targets.g(i)[0];
        for (int s = 0; s < out.size(); ++s) {
            mout += out.g(s)[0];
            double lf[6];
            CHECK(la::chol_packed(2, out.g(s) + 3, lf));
        }
        CHECK(mout == doctest::Approx(min).epsilon(1e-9));
    }
}

TEST_CASE("modified EM reduce: identity regime and cluster recovery") {
    const Mixture m = harness::random_mixture(2, 6, 41, true);
    const auto res = red::modified_em_reduce(m, 10);
    CHECK(res.mixture.size() == 6);
    for (size_t i = 0; i < m.data.size(); ++i) CHECK(res.mixture.data[i] == m.data[i]);

    // two far clusters: responsibilities are block diagonal and each fitted
    // component sits on one cluster
    Mixture two(2, 8);
    Rng rng(42);
    for (int i = 0; i < 8; ++i) {
        double* g = two.g(i);
        const double cx = i < 4 ? -50.0 : 50.0;
        g[0] = rng.uniform(0.5, 1.5);
        g[1] = cx + rng.uniform(-1, 1);
        g[2] = rng.uniform(-1, 1);
        g[3] = g[5] = 1;
        g[4] = 0;
    }
    const auto res2 = red::modified_em_reduce(two, 2);
    REQUIRE(res2.mixture.size() == 2);
    const double x0 = res2.mixture.g(0)[1], x1 = res2.mixture.g(1)[1];
    CHECK(std::min(x0, x1) == doctest::Approx(-50).epsilon(0.05));
    CHECK(std::max(x0, x1) == doctest::Approx(50).epsilon(0.05));
    Mixture fits(2, 2);
    const auto sel = red::select_top_integral(two.span(), 2);
    std::copy(two.g(sel[0]), two.g(sel[0]) + 6, fits.g(0));
    std::copy(two.g(sel[1]), two.g(sel[1]) + 6, fits.g(1));
    const auto rl = responsibilities_ld(two, fits, 100.0);
    for (int i = 0; i < 8; ++i) {
        const int own = (two.g(i)[1] < 0) == (fits.g(0)[1] < 0) ? 0 : 1;
        CHECK(static_cast<double>(rl[i * 2 + own]) > 0.999);
    }
}

TEST_CASE("modified EM compute scales as N * Np") {
    red::EmFitConfig cfg;
    counters::em_pair_terms = 0;
    red::modified_em_reduce(harness::random_mixture(2, 64, 51, true), 8, cfg);
    CHECK(counters::em_pair_terms.load() == 64u * 8u);
    counters::em_pair_terms = 0;
    red::modified_em_reduce(harness::random_mixture(2, 128, 52, true), 16, cfg);
    CHECK(counters::em_pair_terms.load() == 128u * 16u);
}

TEST_CASE("treehem identity and separated-cluster recovery") {
    const Mixture m = harness::random_mixture(2, 5, 61, true);
    const auto res = red::treehem_reduce(m, 8, 2);
    CHECK(res.mixture.size() == 5);

    Mixture four(2, 4);
    const double corners[4][2] = {{-4, -4}, {4, -4}, {-4, 4}, {4, 4}};
    for (int i = 0; i < 4; ++i) {
        double* g = four.g(i);
        g[0] = 0.5 + 0.1 * i;
        g[1] = corners[i][0];
        g[2] = corners[i][1];
        g[3] = g[5] = 0.3;
        g[4] = 0;
    }
    const auto r4 = red::treehem_reduce(four, 4, 2);
    REQUIRE(r4.mixture.size() == 4);
    CHECK(r4.real_count == 4);
    for (int i = 0; i < 4; ++i) {
        double best = 1e300;
        for (int j = 0; j < 4; ++j) {
            const double dx = r4.mixture.g(j)[1] - four.g(i)[1];
            const double dy = r4.mixture.g(j)[2] - four.g(i)[2];
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
        }
        CHECK(best < 1e-6);
    }
}

TEST_CASE("treehem output components and masses are sane") {
    for (int t = 0; t < 10; ++t) {
        const Mixture m = harness::random_mixture(2, 60, 70 + t, true);
        const auto res = red::treehem_reduce(m, 12, 2);
        CHECK(res.mixture.size() == 12);
        CHECK(res.real_count <= 12);
        for (int i = 0; i < res.mixture.size(); ++i) {
            CHECK(res.mixture.g(i)[0] >= 0.0);
            double lf[6];
            CHECK(la::chol_packed(2, res.mixture.g(i) + 3, lf));
        }
        const auto res2 = red::treehem_reduce(m, 12, 2);
        CHECK(res.mixture.data == res2.mixture.data);
    }
}

TEST_CASE("treehem T=4 works, other T rejected") {
    const Mixture m = harness::random_mixture(2, 60, 81, true);
    const auto res = red::treehem_reduce(m, 12, 4);
    CHECK(res.mixture.size() == 12);
    CHECK_THROWS_AS(red::treehem_reduce(m, 12, 3), std::invalid_argument);
}

TEST_CASE("two-visitor parallel pass matches the sequential pass bit for bit") {
    for (int t = 0; t < 6; ++t) {
        const Mixture m = harness::random_mixture(2, 100 + t * 17, 90 + t, true);
        red::TreeHemStats seq_stats, par_stats;
        const auto seq = red::treehem_reduce(m, 16, 2, {}, &seq_stats, 1);
        const auto par = red::treehem_reduce(m, 16, 2, {}, &par_stats, 4);
        CHECK(seq.mixture.data == par.mixture.data);
        CHECK(seq.real_count == par.real_count);
        // fitting ran exactly once per oversized node in both passes
        CHECK(seq_stats.node_fits == par_stats.node_fits);
        CHECK(seq_stats.cache_gaussians == par_stats.cache_gaussians);
    }
}

TEST_CASE("treehem T=2 caches fewer Gaussians than T=4 on identical inputs") {
    for (int t = 0; t < 5; ++t) {
        const Mixture m = harness::random_mixture(2, 96 + 16 * t, 1200 + t, true);
        red::TreeHemStats s2, s4;
        red::treehem_reduce(m, 16, 2, {}, &s2);
        red::treehem_reduce(m, 16, 4, {}, &s4);
        CHECK(s2.cache_gaussians <= s4.cache_gaussians);
    }
}

TEST_CASE("treehem conserves mass through the selected frontier") {
    const Mixture m = harness::random_mixture(2, 48, 95, true);
    red::TreeHemStats stats;
    const auto res = red::treehem_reduce(m, 8, 2, {}, &stats);
    CHECK(stats.node_fits > 0);
    CHECK(stats.cache_gaussians == stats.node_fits * 2);
    double min = 0, mout = 0;
    for (int i = 0; i < m.size(); ++i) min += m.g(i)[0];
    for (int i = 0; i < res.mixture.size(); ++i) mout += res.mixture.g(i)[0];
    CHECK(mout == doctest::Approx(min).epsilon(1e-9));
}

TEST_SUITE_END();
