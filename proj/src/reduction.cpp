#include "gmcn/reduction.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "gmcn/counters.hpp"
#include "gmcn/gm.hpp"

namespace gmcn::red {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}  // namespace

// ---------------------------------------------------------------- Morton

uint64_t interleave2(uint32_t x, uint32_t y) {
    auto part = [](uint64_t v) {
        v &= 0x7fffffffull;
        v = (v | (v << 16)) & 0x0000ffff0000ffffull;
        v = (v | (v << 8)) & 0x00ff00ff00ff00ffull;
        v = (v | (v << 4)) & 0x0f0f0f0f0f0f0f0full;
        v = (v | (v << 2)) & 0x3333333333333333ull;
        v = (v | (v << 1)) & 0x5555555555555555ull;
        return v;
    };
    return part(x) | (part(y) << 1);
}

uint64_t interleave3(uint32_t x, uint32_t y, uint32_t z) {
    auto part = [](uint64_t v) {
        v &= 0x1fffffull;
        v = (v | (v << 32)) & 0x001f00000000ffffull;
        v = (v | (v << 16)) & 0x001f0000ff0000ffull;
        v = (v | (v << 8)) & 0x100f00f00f00f00full;
        v = (v | (v << 4)) & 0x10c30c30c30c30c3ull;
        v = (v | (v << 2)) & 0x1249249249249249ull;
        return v;
    };
    return part(x) | (part(y) << 1) | (part(z) << 2);
}

std::vector<MortonCode> morton_codes(ConstGaussSpan m) {
    if (m.n < 1) throw std::invalid_argument("morton_codes: empty mixture");
    const int k = m.dims;
    const int bits = k == 2 ? 31 : 21;
    const double scale = static_cast<double>(1ull << bits);
    const uint32_t maxq = static_cast<uint32_t>((1ull << bits) - 1);

    double lo[3], hi[3];
    for (int d = 0; d < k; ++d) lo[d] = hi[d] = m.pos(0)[d];
    for (int i = 1; i < m.n; ++i)
        for (int d = 0; d < k; ++d) {
            lo[d] = std::min(lo[d], m.pos(i)[d]);
            hi[d] = std::max(hi[d], m.pos(i)[d]);
        }

    std::vector<MortonCode> out(m.n);
    for (int i = 0; i < m.n; ++i) {
        uint32_t q[3] = {0, 0, 0};
        for (int d = 0; d < k; ++d) {
            const double ext = hi[d] - lo[d];
            if (ext > 0) {
                const double t = (m.pos(i)[d] - lo[d]) / ext;
                q[d] = std::min(maxq, static_cast<uint32_t>(t * scale));
            }
        }
        out[i].code = k == 2 ? interleave2(q[0], q[1]) : interleave3(q[0], q[1], q[2]);
        out[i].source = i;
    }
    std::sort(out.begin(), out.end(), [](const MortonCode& a, const MortonCode& b) {
        return a.code != b.code ? a.code < b.code : a.source < b.source;
    });
    return out;
}

// ------------------------------------------------------------- radix tree

namespace {

int build_range(GaussianTree& tree, int lo, int hi, int parent) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes[id].parent = parent;
    tree.nodes[id].first = lo;
    tree.nodes[id].count = hi - lo;
    if (hi - lo == 1) {
        tree.nodes[id].leaf = lo;
        return id;
    }
    const uint64_t clo = tree.order[lo].code, chi = tree.order[hi - 1].code;
    int split, level;
    if (clo != chi) {
        const int bit = 63 - __builtin_clzll(clo ^ chi);
        level = 64 + bit;
        // codes are sorted, so the bit flips exactly once in the range
        int a = lo + 1, b = hi - 1;
        split = hi - 1;
        while (a <= b) {
            const int mid = (a + b) / 2;
            if ((tree.order[mid].code >> bit) & 1ull) {
                split = mid;
                b = mid - 1;
            } else {
                a = mid + 1;
            }
        }
    } else {
        // duplicate codes: extend the key with the sorted index bits
        const int bit = 63 - __builtin_clzll(static_cast<uint64_t>(lo) ^
                                             static_cast<uint64_t>(hi - 1));
        level = bit;
        split = ((hi - 1) >> bit) << bit;
    }
    tree.nodes[id].split_level = level;
    tree.nodes[id].left = build_range(tree, lo, split, id);
    tree.nodes[id].right = build_range(tree, split, hi, id);
    return id;
}

}  // namespace

GaussianTree build_tree(std::vector<MortonCode> sorted) {
    GaussianTree tree;
    tree.order = std::move(sorted);
    tree.nodes.reserve(2 * tree.order.size());
    tree.root = build_range(tree, 0, static_cast<int>(tree.order.size()), -1);
    return tree;
}

// -------------------------------------------------------------- selection

std::vector<int> select_top_integral(const double* weights, int n, int np) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (np >= n) return idx;
    std::partial_sort(idx.begin(), idx.begin() + np, idx.end(), [&](int a, int b) {
        return weights[a] != weights[b] ? weights[a] > weights[b] : a < b;
    });
    idx.resize(np);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<int> select_top_integral(ConstGaussSpan m, int np) {
    std::vector<double> w(m.n);
    for (int i = 0; i < m.n; ++i) w[i] = m.weight(i);
    return select_top_integral(w.data(), m.n, np);
}

std::vector<int> cluster_init(int k, const double* positions, const double* weights, int m,
                              int T) {
    std::vector<int> all(m);
    std::iota(all.begin(), all.end(), 0);
    if (m <= T) return all;

    auto dist2 = [&](int a, int b) {
        double s = 0;
        for (int d = 0; d < k; ++d) {
            const double diff = positions[a * k + d] - positions[b * k + d];
            s += diff * diff;
        }
        return s;
    };
    auto heavier = [&](int a, int b) {
        return weights[a] != weights[b] ? weights[a] > weights[b] : a < b;
    };

    // farthest-point seeding from the heaviest member
    std::vector<int> seeds;
    int first = 0;
    for (int i = 1; i < m; ++i)
        if (heavier(i, first)) first = i;
    seeds.push_back(first);
    std::vector<double> mind(m);
    for (int i = 0; i < m; ++i) mind[i] = dist2(i, first);
    while (static_cast<int>(seeds.size()) < T) {
        int next = -1;
        for (int i = 0; i < m; ++i) {
            if (std::find(seeds.begin(), seeds.end(), i) != seeds.end()) continue;
            if (next < 0 || mind[i] > mind[next] ||
                (mind[i] == mind[next] && heavier(i, next)))
                next = i;
        }
        seeds.push_back(next);
        for (int i = 0; i < m; ++i) mind[i] = std::min(mind[i], dist2(i, next));
    }

    std::vector<double> centroid(static_cast<size_t>(T) * k);
    for (int t = 0; t < T; ++t)
        for (int d = 0; d < k; ++d) centroid[t * k + d] = positions[seeds[t] * k + d];

    std::vector<int> assign(m, 0), prev(m, -1);
    for (int iter = 0; iter < 10; ++iter) {
        for (int i = 0; i < m; ++i) {
            int best = 0;
            double bestd = 0;
            for (int t = 0; t < T; ++t) {
                double s = 0;
                for (int d = 0; d < k; ++d) {
                    const double diff = positions[i * k + d] - centroid[t * k + d];
                    s += diff * diff;
                }
                if (t == 0 || s < bestd) {
                    bestd = s;
                    best = t;
                }
            }
            assign[i] = best;
        }
        if (assign == prev) break;
        prev = assign;
        for (int t = 0; t < T; ++t) {
            double sum[3] = {0, 0, 0};
            int cnt = 0;
            for (int i = 0; i < m; ++i)
                if (assign[i] == t) {
                    for (int d = 0; d < k; ++d) sum[d] += positions[i * k + d];
                    ++cnt;
                }
            if (cnt > 0)
                for (int d = 0; d < k; ++d) centroid[t * k + d] = sum[d] / cnt;
        }
    }

    // heaviest member per cluster; empty clusters are filled with the
    // heaviest not-yet-picked members so we always return T distinct picks
    std::vector<int> picks;
    std::vector<uint8_t> picked(m, 0);
    for (int t = 0; t < T; ++t) {
        int best = -1;
        for (int i = 0; i < m; ++i)
            if (assign[i] == t && !picked[i] && (best < 0 || heavier(i, best))) best = i;
        if (best >= 0) {
            picks.push_back(best);
            picked[best] = 1;
        }
    }
    while (static_cast<int>(picks.size()) < T) {
        int best = -1;
        for (int i = 0; i < m; ++i)
            if (!picked[i] && (best < 0 || heavier(i, best))) best = i;
        picks.push_back(best);
        picked[best] = 1;
    }
    return picks;
}

// ------------------------------------------------------------ EM kernels

namespace {

struct FitPrep {
    double lf[6];      // factor of the initial fit covariance
    double sinv[6];    // packed inverse
    double logconst;
    double w;
    const double* pos;
    const double* cov;
};

void prep_fit(int k, const double* g, FitPrep& fp) {
    fp.w = g[0];
    fp.pos = g + 1;
    fp.cov = g + 1 + k;
    if (!la::chol_packed(k, fp.cov, fp.lf))
        throw covariance_degenerate_error("em fit: covariance not positive-definite");
    fp.logconst = -0.5 * (k * kLog2Pi + la::chol_logdet(k, fp.lf));
    la::chol_inverse(k, fp.lf, fp.sinv);
}

// E matrix, responsibilities and per-row fallbacks shared by the forward
// and the adjoint recomputation.
struct EmCore {
    std::vector<FitPrep> fits;
    std::vector<double> hatw;   // per target
    std::vector<double> e;      // m x S
    std::vector<double> r;      // m x S
    std::vector<uint8_t> row_uniform;
    double wsum = 0;
};

void em_core(int k, const double* const* targets, int m, const double* const* fit_comps, int S,
             double n_virtual, EmCore& core) {
    counters::em_pair_terms += static_cast<uint64_t>(m) * S;
    core.fits.resize(S);
    for (int s = 0; s < S; ++s) prep_fit(k, fit_comps[s], core.fits[s]);

    core.wsum = 0;
    for (int i = 0; i < m; ++i) core.wsum += targets[i][0];
    core.hatw.resize(m);
    for (int i = 0; i < m; ++i)
        core.hatw[i] = core.wsum > 0 ? n_virtual * targets[i][0] / core.wsum : 0.0;

    core.e.assign(static_cast<size_t>(m) * S, 0.0);
    core.r.assign(static_cast<size_t>(m) * S, 0.0);
    core.row_uniform.assign(m, 0);

    std::vector<double> logw(S);
    for (int s = 0; s < S; ++s) logw[s] = core.fits[s].w > 0 ? std::log(core.fits[s].w) : kNegInf;

    std::vector<double> alpha(S);
    double d[3], y[3];
    for (int i = 0; i < m; ++i) {
        const double* mu_i = targets[i] + 1;
        const double* sig_i = targets[i] + 1 + k;
        double mx = kNegInf;
        for (int s = 0; s < S; ++s) {
            const FitPrep& fp = core.fits[s];
            for (int dd = 0; dd < k; ++dd) d[dd] = mu_i[dd] - fp.pos[dd];
            la::chol_solve(k, fp.lf, d, y);
            double q = 0;
            for (int dd = 0; dd < k; ++dd) q += d[dd] * y[dd];
            const double tr = la::trace_product_packed(k, fp.sinv, sig_i);
            const double e_is = fp.logconst - 0.5 * q - 0.5 * tr;
            core.e[static_cast<size_t>(i) * S + s] = e_is;
            alpha[s] = core.hatw[i] * e_is + logw[s];
            mx = std::max(mx, alpha[s]);
        }
        double* row = core.r.data() + static_cast<size_t>(i) * S;
        if (mx == kNegInf) {
            core.row_uniform[i] = 1;
            for (int s = 0; s < S; ++s) row[s] = 1.0 / S;
            continue;
        }
        double norm = 0;
        for (int s = 0; s < S; ++s) {
            row[s] = alpha[s] == kNegInf ? 0.0 : std::exp(alpha[s] - mx);
            norm += row[s];
        }
        for (int s = 0; s < S; ++s) row[s] /= norm;
    }
}

void packed_to_full(int k, const double* p, double* full) {
    for (int r = 0; r < k; ++r)
        for (int c = 0; c <= r; ++c) full[r * k + c] = full[c * k + r] = p[la::packed_index(r, c)];
}

}  // namespace

void em_fit_forward(int k, const double* const* targets, int m, const int* sel, int S,
                    const EmFitConfig& cfg, double* out, EmFitFlags* flags, double* resp) {
    const int stride = gaussian_stride(k);
    const int ps = la::packed_size(k);

    std::vector<const double*> fit_comps(S);
    for (int s = 0; s < S; ++s) fit_comps[s] = targets[sel[s]];

    EmCore core;
    em_core(k, targets, m, fit_comps.data(), S, cfg.n_virtual, core);
    if (resp) std::memcpy(resp, core.r.data(), sizeof(double) * m * S);
    if (flags) {
        flags->row_uniform = core.row_uniform;
        flags->wzero.assign(S, 0);
        flags->cov_floored.assign(S, 0);
    }

    for (int s = 0; s < S; ++s) {
        double ws = 0;
        for (int i = 0; i < m; ++i) ws += core.r[static_cast<size_t>(i) * S + s] * targets[i][0];
        double* g = out + static_cast<size_t>(s) * stride;
        if (!(ws > cfg.ws_floor_rel * core.wsum)) {
            std::memcpy(g, fit_comps[s], sizeof(double) * stride);
            if (flags) flags->wzero[s] = 1;
            continue;
        }
        g[0] = ws;
        double mu[3] = {0, 0, 0};
        for (int i = 0; i < m; ++i) {
            const double wis = core.r[static_cast<size_t>(i) * S + s] * targets[i][0] / ws;
            for (int d = 0; d < k; ++d) mu[d] += wis * targets[i][1 + d];
        }
        for (int d = 0; d < k; ++d) g[1 + d] = mu[d];
        double* sig = g + 1 + k;
        for (int d = 0; d < ps; ++d) sig[d] = 0;
        for (int i = 0; i < m; ++i) {
            const double wis = core.r[static_cast<size_t>(i) * S + s] * targets[i][0] / ws;
            if (wis == 0.0) continue;
            const double* ti = targets[i];
            for (int r = 0; r < k; ++r)
                for (int c = 0; c <= r; ++c) {
                    const double dd = (ti[1 + r] - mu[r]) * (ti[1 + c] - mu[c]);
                    sig[la::packed_index(r, c)] += wis * (ti[1 + k + la::packed_index(r, c)] + dd);
                }
        }
        double lf[6];
        bool ok = la::chol_packed(k, sig, lf);
        if (ok)
            for (int d = 0; d < k; ++d) ok &= lf[la::packed_index(d, d)] >= cfg.pivot_min;
        if (!ok) {
            for (int d = 0; d < k; ++d) sig[la::packed_index(d, d)] += cfg.cov_floor;
            if (flags) flags->cov_floored[s] = 1;
        }
    }
}

void em_fit_backward(int k, const double* const* targets, int m, const int* sel, int S,
                     const EmFitConfig& cfg, const double* out, const double* grad_out,
                     double* const* grad_targets) {
    const int stride = gaussian_stride(k);
    const int ps = la::packed_size(k);

    std::vector<const double*> fit_comps(S);
    for (int s = 0; s < S; ++s) fit_comps[s] = targets[sel[s]];

    EmCore core;
    em_core(k, targets, m, fit_comps.data(), S, cfg.n_virtual, core);

    // accumulators in full-matrix semantics (off-diagonals doubled on
    // flush), one record per target plus scalar rbar / hatwbar
    std::vector<double> tw(m, 0.0), tmu(static_cast<size_t>(m) * k, 0.0);
    std::vector<double> tsig(static_cast<size_t>(m) * ps, 0.0);
    std::vector<double> rbar(static_cast<size_t>(m) * S, 0.0);
    std::vector<double> hatwbar(m, 0.0);
    std::vector<double> wbar_is(m);

    std::vector<double> ws(S, 0.0);
    std::vector<uint8_t> wzero(S, 0);
    for (int s = 0; s < S; ++s) {
        for (int i = 0; i < m; ++i) ws[s] += core.r[static_cast<size_t>(i) * S + s] * targets[i][0];
        wzero[s] = !(ws[s] > cfg.ws_floor_rel * core.wsum);
    }

    for (int s = 0; s < S; ++s) {
        const double* gout = grad_out + static_cast<size_t>(s) * stride;
        if (wzero[s]) {
            // output was the initialization, identity pass-through
            double* gt = grad_targets[sel[s]];
            for (int d = 0; d < stride; ++d) gt[d] += gout[d];
            continue;
        }
        // symmetrized matrix cotangent of the output covariance
        double gsym[9];
        for (int r = 0; r < k; ++r)
            for (int c = 0; c < k; ++c) {
                const double v = r >= c ? gout[1 + k + la::packed_index(r, c)]
                                        : gout[1 + k + la::packed_index(c, r)];
                gsym[r * k + c] = r == c ? v : 0.5 * v;
            }
        const double* mu_s = out + static_cast<size_t>(s) * stride + 1;

        // covariance step
        double mubar[3] = {gout[1], gout[2], k == 3 ? gout[3] : 0.0};
        for (int i = 0; i < m; ++i) {
            const double r_is = core.r[static_cast<size_t>(i) * S + s];
            const double wis = r_is * targets[i][0] / ws[s];
            const double* ti = targets[i];
            double d[3], gd[3];
            for (int dd = 0; dd < k; ++dd) d[dd] = ti[1 + dd] - mu_s[dd];
            double frob = 0;
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < k; ++c) {
                    const double sig_rc = ti[1 + k + (r >= c ? la::packed_index(r, c)
                                                             : la::packed_index(c, r))];
                    frob += (sig_rc + d[r] * d[c]) * gsym[r * k + c];
                }
            wbar_is[i] = frob;
            for (int r = 0; r < k; ++r) {
                gd[r] = 0;
                for (int c = 0; c < k; ++c) gd[r] += 2.0 * gsym[r * k + c] * d[c];
            }
            for (int r = 0; r < k; ++r) {
                tmu[static_cast<size_t>(i) * k + r] += wis * gd[r];
                mubar[r] -= wis * gd[r];
            }
            for (int r = 0; r < k; ++r)
                for (int c = 0; c <= r; ++c)
                    tsig[static_cast<size_t>(i) * ps + la::packed_index(r, c)] +=
                        wis * gsym[r * k + c];
        }
        // mean step and the weight normalization
        double wsbar = gout[0];
        for (int i = 0; i < m; ++i) {
            const double r_is = core.r[static_cast<size_t>(i) * S + s];
            const double wis = r_is * targets[i][0] / ws[s];
            const double* ti = targets[i];
            double dot = 0;
            for (int d = 0; d < k; ++d) dot += mubar[d] * ti[1 + d];
            wbar_is[i] += dot;
            for (int d = 0; d < k; ++d) tmu[static_cast<size_t>(i) * k + d] += wis * mubar[d];
            rbar[static_cast<size_t>(i) * S + s] += wbar_is[i] * targets[i][0] / ws[s];
            tw[i] += wbar_is[i] * r_is / ws[s];
            wsbar -= wbar_is[i] * r_is * targets[i][0] / (ws[s] * ws[s]);
        }
        for (int i = 0; i < m; ++i) {
            const double r_is = core.r[static_cast<size_t>(i) * S + s];
            rbar[static_cast<size_t>(i) * S + s] += wsbar * targets[i][0];
            tw[i] += wsbar * r_is;
        }
    }

    // softmax rows, then the likelihood terms
    double sinv_full[9], sig_full[9], tmpm[9];
    for (int i = 0; i < m; ++i) {
        if (core.row_uniform[i]) continue;
        const double* rrow = core.r.data() + static_cast<size_t>(i) * S;
        const double* rbrow = rbar.data() + static_cast<size_t>(i) * S;
        double dotrr = 0;
        for (int s = 0; s < S; ++s) dotrr += rrow[s] * rbrow[s];
        const double* ti = targets[i];
        for (int s = 0; s < S; ++s) {
            const double abar = rrow[s] * (rbrow[s] - dotrr);
            if (abar == 0.0) continue;
            const double e_is = core.e[static_cast<size_t>(i) * S + s];
            hatwbar[i] += abar * e_is;
            const FitPrep& fp = core.fits[s];
            if (fp.w > 0) tw[sel[s]] += abar / fp.w;
            const double ebar = abar * core.hatw[i];
            if (ebar == 0.0) continue;

            double d[3], y[3];
            for (int dd = 0; dd < k; ++dd) d[dd] = ti[1 + dd] - fp.pos[dd];
            la::chol_solve(k, fp.lf, d, y);
            for (int dd = 0; dd < k; ++dd) {
                tmu[static_cast<size_t>(i) * k + dd] -= ebar * y[dd];
                tmu[static_cast<size_t>(sel[s]) * k + dd] += ebar * y[dd];
            }
            packed_to_full(k, fp.sinv, sinv_full);
            packed_to_full(k, ti + 1 + k, sig_full);
            // sinv * sigma_i * sinv
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < k; ++c) {
                    double v = 0;
                    for (int a = 0; a < k; ++a) v += sinv_full[r * k + a] * sig_full[a * k + c];
                    tmpm[r * k + c] = v;
                }
            for (int r = 0; r < k; ++r)
                for (int c = 0; c <= r; ++c) {
                    double sss = 0;
                    for (int a = 0; a < k; ++a) sss += tmpm[r * k + a] * sinv_full[a * k + c];
                    const double fit_term =
                        -0.5 * (sinv_full[r * k + c] - y[r] * y[c]) + 0.5 * sss;
                    tsig[static_cast<size_t>(sel[s]) * ps + la::packed_index(r, c)] +=
                        ebar * fit_term;
                    tsig[static_cast<size_t>(i) * ps + la::packed_index(r, c)] -=
                        ebar * 0.5 * sinv_full[r * k + c];
                }
        }
    }

    // virtual sample weights
    if (core.wsum > 0) {
        double wbar_sum = 0;
        for (int i = 0; i < m; ++i) {
            tw[i] += hatwbar[i] * cfg.n_virtual / core.wsum;
            wbar_sum -= hatwbar[i] * cfg.n_virtual * targets[i][0] / (core.wsum * core.wsum);
        }
        for (int i = 0; i < m; ++i) tw[i] += wbar_sum;
    }

    // flush: packed covariance cotangents double the off-diagonals
    for (int i = 0; i < m; ++i) {
        double* gt = grad_targets[i];
        gt[0] += tw[i];
        for (int d = 0; d < k; ++d) gt[1 + d] += tmu[static_cast<size_t>(i) * k + d];
        for (int r = 0; r < k; ++r)
            for (int c = 0; c <= r; ++c) {
                const double v = tsig[static_cast<size_t>(i) * ps + la::packed_index(r, c)];
                gt[1 + k + la::packed_index(r, c)] += r == c ? v : 2.0 * v;
            }
    }
}

std::vector<double> em_responsibilities(const Mixture& targets, const Mixture& fits,
                                        const VirtualSampleConfig& cfg,
                                        std::vector<uint8_t>* row_uniform) {
    const int k = targets.dims;
    const int m = targets.size(), S = fits.size();
    std::vector<const double*> tp(m), fp(S);
    for (int i = 0; i < m; ++i) tp[i] = targets.g(i);
    for (int s = 0; s < S; ++s) fp[s] = fits.g(s);
    EmCore core;
    em_core(k, tp.data(), m, fp.data(), S, cfg.n_virtual, core);
    if (row_uniform) *row_uniform = core.row_uniform;
    return core.r;
}

Mixture em_m_step(const Mixture& targets, const std::vector<double>& resp, const Mixture& init,
                  EmFitFlags* flags) {
    const int k = targets.dims;
    const int m = targets.size(), S = init.size();
    if (resp.size() != static_cast<size_t>(m) * S)
        throw std::invalid_argument("em_m_step: responsibility shape mismatch");
    const int stride = gaussian_stride(k);
    const int ps = la::packed_size(k);
    Mixture out(k, S);
    if (flags) {
        flags->wzero.assign(S, 0);
        flags->cov_floored.assign(S, 0);
    }
    const EmFitConfig cfg;
    double wsum = 0;
    for (int i = 0; i < m; ++i) wsum += targets.g(i)[0];
    for (int s = 0; s < S; ++s) {
        double wsv = 0;
        for (int i = 0; i < m; ++i) wsv += resp[static_cast<size_t>(i) * S + s] * targets.g(i)[0];
        double* g = out.g(s);
        if (!(wsv > cfg.ws_floor_rel * wsum)) {
            std::memcpy(g, init.g(s), sizeof(double) * stride);
            if (flags) flags->wzero[s] = 1;
            continue;
        }
        g[0] = wsv;
        double mu[3] = {0, 0, 0};
        for (int i = 0; i < m; ++i) {
            const double wis = resp[static_cast<size_t>(i) * S + s] * targets.g(i)[0] / wsv;
            for (int d = 0; d < k; ++d) mu[d] += wis * targets.g(i)[1 + d];
        }
        for (int d = 0; d < k; ++d) g[1 + d] = mu[d];
        double* sig = g + 1 + k;
        for (int d = 0; d < ps; ++d) sig[d] = 0;
        for (int i = 0; i < m; ++i) {
            const double wis = resp[static_cast<size_t>(i) * S + s] * targets.g(i)[0] / wsv;
            if (wis == 0.0) continue;
            const double* ti = targets.g(i);
            for (int r = 0; r < k; ++r)
                for (int c = 0; c <= r; ++c)
                    sig[la::packed_index(r, c)] +=
                        wis * (ti[1 + k + la::packed_index(r, c)] +
                               (ti[1 + r] - mu[r]) * (ti[1 + c] - mu[c]));
        }
        double lf[6];
        bool ok = la::chol_packed(k, sig, lf);
        if (ok)
            for (int d = 0; d < k; ++d) ok &= lf[la::packed_index(d, d)] >= cfg.pivot_min;
        if (!ok) {
            for (int d = 0; d < k; ++d) sig[la::packed_index(d, d)] += cfg.cov_floor;
            if (flags) flags->cov_floored[s] = 1;
        }
    }
    return out;
}

}  // namespace gmcn::red
