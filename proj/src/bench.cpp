#include "gmcn/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "gmcn/activation.hpp"
#include "gmcn/counters.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/parallel.hpp"
#include "gmcn/reduction.hpp"
#include "gmcn/rng.hpp"

namespace gmcn::harness {

Mixture random_mixture(int dims, int n, uint64_t seed, bool nonnegative) {
    Rng rng(seed);
    Mixture m(dims, n);
    for (int i = 0; i < n; ++i) {
        double* g = m.g(i);
        const double w = rng.normal(0.25, 0.8);
        g[0] = nonnegative ? std::fabs(w) : w;
        for (int d = 0; d < dims; ++d) g[1 + d] = rng.uniform(-4.0, 4.0);
        if (dims == 2) {
            const double ang = rng.uniform(0.0, 2.0 * M_PI);
            const double e0 = rng.uniform(0.5, 2.0), e1 = rng.uniform(0.5, 2.0);
            const double c = std::cos(ang), s = std::sin(ang);
            g[3] = c * c * e0 + s * s * e1;
            g[4] = c * s * (e0 - e1);
            g[5] = s * s * e0 + c * c * e1;
        } else {
            // B B^T with a bounded random factor keeps eigenvalues well away
            // from zero
            double b[9];
            for (int d = 0; d < 9; ++d) b[d] = rng.uniform(-0.6, 0.6);
            for (int d = 0; d < 3; ++d) b[d * 3 + d] += 1.0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c <= r; ++c) {
                    double v = r == c ? 0.25 : 0.0;
                    for (int t = 0; t < 3; ++t) v += b[r * 3 + t] * b[c * 3 + t];
                    g[1 + 3 + la::packed_index(r, c)] = v;
                }
        }
    }
    return m;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct MethodReport {
    std::string method, param;
    double wall_ms = 0;
    double rmse_all = 0, rmse_relu = 0, rmse_red = 0;
    uint64_t cache_slots = 0;
};

}  // namespace

std::string bench_fitting(const BenchConfig& cfg) {
    std::vector<Mixture> inputs;
    for (int i = 0; i < cfg.mixtures; ++i)
        inputs.push_back(random_mixture(cfg.dims, cfg.n, Rng::derive_seed(cfg.seed, i)));

    // shared dense-fit outputs feed the reduction rows
    std::vector<Mixture> dense(cfg.mixtures);
    act::DenseFitConfig fit_cfg;
    const Clock::time_point t0 = Clock::now();
    for (int i = 0; i < cfg.mixtures; ++i) dense[i] = act::relu_dense_fit(inputs[i], fit_cfg);
    const double heuristic_ms = ms_since(t0);

    auto rmse_vs_target = [&](const std::vector<Mixture>& fitted, int which) {
        double s = 0;
        for (int i = 0; i < cfg.mixtures; ++i) {
            const act::EvalFn target = act::relu_mixture_eval_fn(inputs[i].span());
            const act::EvalFn fn = act::mixture_eval_fn(fitted[i].span());
            s += act::fitting_rmse(inputs[i].span(), fn, target, cfg.rmse_samples,
                                   Rng::derive_seed(cfg.seed, 100 + which * 64 + i));
        }
        return s / cfg.mixtures;
    };
    auto rmse_reduction = [&](const std::vector<Mixture>& reduced, int which) {
        double s = 0;
        for (int i = 0; i < cfg.mixtures; ++i) {
            const act::EvalFn ref = act::mixture_eval_fn(dense[i].span());
            const act::EvalFn fn = act::mixture_eval_fn(reduced[i].span());
            s += act::fitting_rmse(dense[i].span(), fn, ref, cfg.rmse_samples,
                                   Rng::derive_seed(cfg.seed, 500 + which * 64 + i));
        }
        return s / cfg.mixtures;
    };

    std::vector<MethodReport> rows;

    // reductions on the heuristic output; TreeHEM T=2 is the default route
    red::EmFitConfig em_cfg;
    auto run_reduce = [&](const std::string& name, int variant) {
        MethodReport r;
        r.method = name;
        counters::tree_cache_slots = 0;
        std::vector<Mixture> reduced(cfg.mixtures);
        const Clock::time_point t = Clock::now();
        for (int i = 0; i < cfg.mixtures; ++i) {
            if (variant == 0)
                reduced[i] = red::modified_em_reduce(dense[i], cfg.np, em_cfg).mixture;
            else
                reduced[i] =
                    red::treehem_reduce(dense[i], cfg.np, variant, em_cfg, nullptr, cfg.threads)
                        .mixture;
        }
        r.wall_ms = ms_since(t);
        r.cache_slots = counters::tree_cache_slots.load();
        r.param = variant == 0 ? "np=" + std::to_string(cfg.np) : "T=" + std::to_string(variant);
        r.rmse_relu = rmse_vs_target(dense, 1);
        r.rmse_red = rmse_reduction(reduced, variant + 1);
        r.rmse_all = rmse_vs_target(reduced, variant + 8);
        return r;
    };

    {
        MethodReport r;
        r.method = "dense-heuristic";
        char buf[48];
        std::snprintf(buf, sizeof(buf), "eps=%g", fit_cfg.epsilon_floor);
        r.param = buf;
        r.wall_ms = heuristic_ms;
        r.rmse_relu = rmse_vs_target(dense, 1);
        std::vector<Mixture> reduced(cfg.mixtures);
        for (int i = 0; i < cfg.mixtures; ++i)
            reduced[i] = red::treehem_reduce(dense[i], cfg.np, 2, em_cfg).mixture;
        r.rmse_red = rmse_reduction(reduced, 40);
        r.rmse_all = rmse_vs_target(reduced, 41);
        rows.push_back(r);
    }

    // least-squares reference with the three sample-set choices
    struct LsVariant {
        act::SampleSet set;
        int random_count;
        const char* label;
    };
    const LsVariant variants[] = {
        {act::SampleSet::Centers, 0, "D=B"},
        {act::SampleSet::CentersPlusRandom, 3 * cfg.n, "D=concat(B,rand(3N))"},
        {act::SampleSet::Random, 4 * cfg.n, "D=rand(4N)"},
    };
    for (int v = 0; v < 3; ++v) {
        MethodReport r;
        r.method = "least-squares";
        r.param = variants[v].label;
        std::vector<Mixture> fitted(cfg.mixtures);
        const Clock::time_point t = Clock::now();
        for (int i = 0; i < cfg.mixtures; ++i) {
            Rng rng(Rng::derive_seed(cfg.seed, 900 + v * 64 + i));
            const std::vector<double> pts =
                act::build_sample_set(inputs[i].span(), variants[v].set, variants[v].random_count,
                                      rng);
            const std::vector<double> y = act::least_squares_relu_fit(inputs[i].span(), pts);
            fitted[i] = inputs[i];
            for (int j = 0; j < cfg.n; ++j) fitted[i].g(j)[0] = y[j];
        }
        r.wall_ms = ms_since(t);
        r.rmse_relu = rmse_vs_target(fitted, 20 + v);
        std::vector<Mixture> reduced(cfg.mixtures);
        for (int i = 0; i < cfg.mixtures; ++i) {
            Mixture nn = fitted[i];  // reductions need non-negative weights
            for (int j = 0; j < cfg.n; ++j) nn.g(j)[0] = std::max(0.0, nn.g(j)[0]);
            reduced[i] = red::treehem_reduce(nn, cfg.np, 2, em_cfg).mixture;
        }
        r.rmse_red = rmse_reduction(reduced, 60 + v);
        r.rmse_all = rmse_vs_target(reduced, 70 + v);
        rows.push_back(r);
    }

    rows.push_back(run_reduce("modified-em", 0));
    rows.push_back(run_reduce("treehem", 2));
    rows.push_back(run_reduce("treehem", 4));

    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "fitting bench: %d mixtures, N=%d, Np=%d, %dD\n",
                  cfg.mixtures, cfg.n, cfg.np, cfg.dims);
    out += line;
    std::snprintf(line, sizeof(line), "%-16s %-22s %12s %10s %10s %10s %12s\n", "method", "param",
                  "wall[ms]", "rmse_all", "rmse_relu", "rmse_red", "cache_slots");
    out += line;
    for (const MethodReport& r : rows) {
        std::snprintf(line, sizeof(line), "%-16s %-22s %12.3f %10.5f %10.5f %10.5f %12llu\n",
                      r.method.c_str(), r.param.c_str(), r.wall_ms, r.rmse_all, r.rmse_relu,
                      r.rmse_red, static_cast<unsigned long long>(r.cache_slots));
        out += line;
    }
    return out;
}

}  // namespace gmcn::harness
