#include "gmcn/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>

#include "gmcn/counters.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/parallel.hpp"

namespace gmcn::ad {

namespace {
constexpr uint64_t kFnvPrime = 1099511628211ull;
}

void Tape::sig_mix(uint64_t v) { sig_ = (sig_ ^ v) * kFnvPrime; }

uint32_t Tape::alloc(uint32_t ndoubles) {
    const uint32_t off = static_cast<uint32_t>(val_.size());
    val_.resize(val_.size() + ndoubles, 0.0);
    grad_.resize(val_.size(), 0.0);
    return off;
}

GaussRange Tape::load_gaussians(ConstGaussSpan src) {
    if (src.dims != dims_) throw std::invalid_argument("tape: dimension mismatch");
    GaussRange r = alloc_gauss(src.n);
    std::memcpy(val(r.off), src.p, sizeof(double) * src.n * gstride());
    return r;
}

uint32_t Tape::load_values(const double* src, uint32_t n) {
    const uint32_t off = alloc(n);
    std::memcpy(val(off), src, sizeof(double) * n);
    return off;
}

void Tape::bind(uint32_t off, uint32_t n, double* grad_out) { binds_.push_back({off, n, grad_out}); }

GaussRange Tape::ensure_out(GaussRange out, uint32_t n) {
    if (out.n == 0) return alloc_gauss(n);
    if (out.n != n) throw std::invalid_argument("tape: preallocated output has wrong size");
    return out;
}

GaussRange Tape::make_covariance(uint32_t raw_off, uint32_t count, double eps, GaussRange out) {
    out = ensure_out(out, count);
    const int k = dims_;
    const int rk = 1 + k + k * k;
    for (uint32_t i = 0; i < count; ++i) {
        const double* raw = val(raw_off + i * rk);
        double* g = val(out.off + i * gstride());
        g[0] = raw[0];
        for (int d = 0; d < k; ++d) g[1 + d] = raw[1 + d];
        const double* cp = raw + 1 + k;
        for (int r = 0; r < k; ++r)
            for (int c = 0; c <= r; ++c) {
                double v = r == c ? eps : 0.0;
                for (int m = 0; m < k; ++m) v += cp[m * k + r] * cp[m * k + c];
                g[1 + k + la::packed_index(r, c)] = v;
            }
    }
    makecov_.push_back({raw_off, count, eps});
    ops_.push_back({OpKind::MakeCov, out, 0, static_cast<uint32_t>(makecov_.size() - 1)});
    sig_mix(0x11 + count);
    return out;
}

GaussRange Tape::convolve(GaussRange a, GaussRange b, GaussRange out) {
    out = ensure_out(out, a.n * b.n);
    gm::convolve_spans(cspan(a), cspan(b), span(out));
    conv_.push_back({a, b});
    ops_.push_back({OpKind::Convolve, out, 0, static_cast<uint32_t>(conv_.size() - 1)});
    sig_mix(0x22 + out.n);
    return out;
}

GaussRange Tape::dense_relu_fit(GaussRange a, const act::DenseFitConfig& cfg, GaussRange out) {
    out = ensure_out(out, a.n);
    densefit_.push_back({a, cfg, {}});
    auto& pl = densefit_.back();
    act::relu_dense_fit(cspan(a), span(out), cfg, &pl.scratch);
    ops_.push_back({OpKind::DenseFit, out, 0, static_cast<uint32_t>(densefit_.size() - 1)});
    ConstGaussSpan in = cspan(a);
    for (uint32_t i = 0; i < a.n; ++i) {
        const uint64_t bits = (in.weight(i) > 0 ? 1 : 0) | (pl.scratch.u[i] > 0 ? 2 : 0) |
                              (pl.scratch.zeroed[i] ? 4 : 0);
        sig_mix(0x33 + (static_cast<uint64_t>(i) << 3) + bits);
    }
    sig_mix(0x35 + static_cast<uint64_t>(pl.scratch.eps_source + 1));
    return out;
}

GaussRange Tape::param_relu(GaussRange a, GaussRange out) {
    out = ensure_out(out, a.n);
    act::parameter_space_relu(cspan(a), span(out));
    unary_.push_back({a});
    ops_.push_back({OpKind::ParamRelu, out, 0, static_cast<uint32_t>(unary_.size() - 1)});
    ConstGaussSpan in = cspan(a);
    for (uint32_t i = 0; i < a.n; ++i)
        sig_mix(0x44 + (static_cast<uint64_t>(i) << 1) + (in.weight(i) > 0 ? 1 : 0));
    return out;
}

GaussRange Tape::em_fit(const std::vector<uint32_t>& targets, const std::vector<int>& sel,
                        const red::EmFitConfig& cfg, GaussRange out) {
    out = ensure_out(out, static_cast<uint32_t>(sel.size()));
    emfit_.push_back({targets, sel, cfg, {}});
    auto& pl = emfit_.back();
    std::vector<const double*> tp(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) tp[i] = val(targets[i]);
    red::em_fit_forward(dims_, tp.data(), static_cast<int>(targets.size()), sel.data(),
                        static_cast<int>(sel.size()), cfg, val(out.off), &pl.flags);
    ops_.push_back({OpKind::EmFit, out, 0, static_cast<uint32_t>(emfit_.size() - 1)});
    for (int s : sel) sig_mix(0x55 + static_cast<uint64_t>(s));
    for (uint8_t f : pl.flags.row_uniform) sig_mix(0x56 + f);
    for (uint8_t f : pl.flags.wzero) sig_mix(0x57 + f);
    for (uint8_t f : pl.flags.cov_floored) sig_mix(0x58 + f);
    return out;
}

GaussRange Tape::gather(const std::vector<uint32_t>& src, GaussRange out) {
    out = ensure_out(out, static_cast<uint32_t>(src.size()));
    const int k = dims_;
    for (size_t i = 0; i < src.size(); ++i) {
        double* g = val(out.off + static_cast<uint32_t>(i) * gstride());
        if (src[i] == kPad) {
            for (int d = 0; d < gstride(); ++d) g[d] = 0.0;
            for (int d = 0; d < k; ++d) g[1 + k + la::packed_index(d, d)] = 1.0;
        } else {
            std::memcpy(g, val(src[i]), sizeof(double) * gstride());
        }
        sig_mix(0x66 + src[i]);
    }
    gather_.push_back({src});
    ops_.push_back({OpKind::Gather, out, 0, static_cast<uint32_t>(gather_.size() - 1)});
    return out;
}

GaussRange Tape::rescale(GaussRange a, double* sigma_out) {
    GaussRange out = alloc_gauss(a.n);
    ConstGaussSpan in = cspan(a);
    const double tbar = gm::mean_cov_trace(&in, 1);
    if (!(tbar > 0)) throw degenerate_domain_error("rescale: non-positive mean trace");
    const double sigma = std::sqrt(dims_ / tbar);
    std::memcpy(val(out.off), in.p, sizeof(double) * a.n * gstride());
    gm::rescale_apply(span(out), sigma);
    if (sigma_out) *sigma_out = sigma;
    rescale_.push_back({a, sigma, tbar});
    ops_.push_back({OpKind::Rescale, out, 0, static_cast<uint32_t>(rescale_.size() - 1)});
    sig_mix(0x77 + a.n);
    return out;
}

uint32_t Tape::integrate(GaussRange a) {
    const uint32_t slot = alloc(1);
    val_[slot] = gm::span_integral(cspan(a));
    unary_.push_back({a});
    Op op{OpKind::Integrate, {}, slot, static_cast<uint32_t>(unary_.size() - 1)};
    ops_.push_back(op);
    sig_mix(0x88 + a.n);
    return slot;
}

uint32_t Tape::eval_point(GaussRange a, const double* x) {
    const uint32_t slot = alloc(1);
    val_[slot] = gm::eval_mixture(cspan(a), x);
    EvalPayload pl{a, {0, 0, 0}};
    for (int d = 0; d < dims_; ++d) pl.x[d] = x[d];
    evalp_.push_back(pl);
    ops_.push_back({OpKind::EvalPoint, {}, slot, static_cast<uint32_t>(evalp_.size() - 1)});
    sig_mix(0x99 + a.n);
    return slot;
}

void Tape::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

void Tape::backward() {
    const int k = dims_;
    const int gs = gstride();
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        const Op& op = *it;
        switch (op.kind) {
            case OpKind::MakeCov: {
                const auto& pl = makecov_[op.payload];
                const int rk = 1 + k + k * k;
                for (uint32_t i = 0; i < pl.count; ++i) {
                    const double* raw = val(pl.raw_off + i * rk);
                    const double* go = grad(op.gout.off + i * gs);
                    double* gr = grad(pl.raw_off + i * rk);
                    gr[0] += go[0];
                    for (int d = 0; d < k; ++d) gr[1 + d] += go[1 + d];
                    double gsym[9];
                    for (int r = 0; r < k; ++r)
                        for (int c = 0; c < k; ++c) {
                            const double v = r >= c ? go[1 + k + la::packed_index(r, c)]
                                                    : go[1 + k + la::packed_index(c, r)];
                            gsym[r * k + c] = r == c ? v : 0.5 * v;
                        }
                    const double* cp = raw + 1 + k;
                    for (int a = 0; a < k; ++a)
                        for (int b = 0; b < k; ++b) {
                            double v = 0;
                            for (int c = 0; c < k; ++c) v += cp[a * k + c] * gsym[c * k + b];
                            gr[1 + k + a * k + b] += 2.0 * v;
                        }
                }
                break;
            }
            case OpKind::Convolve: {
                const auto& pl = conv_[op.payload];
                const int ps = la::packed_size(k);
                for (uint32_t i = 0; i < pl.a.n; ++i) {
                    const double* ga = val(pl.a.off + i * gs);
                    double* gra = grad(pl.a.off + i * gs);
                    for (uint32_t j = 0; j < pl.b.n; ++j) {
                        const double* gb = val(pl.b.off + j * gs);
                        double* grb = grad(pl.b.off + j * gs);
                        const double* go = grad(op.gout.off + (i * pl.b.n + j) * gs);
                        gra[0] += go[0] * gb[0];
                        grb[0] += go[0] * ga[0];
                        for (int d = 0; d < k + ps; ++d) {
                            gra[1 + d] += go[1 + d];
                            grb[1 + d] += go[1 + d];
                        }
                    }
                }
                break;
            }
            case OpKind::DenseFit: {
                auto& pl = densefit_[op.payload];
                act::relu_dense_fit_backward(cspan(pl.a), grad(op.gout.off), grad(pl.a.off),
                                             pl.cfg, pl.scratch);
                break;
            }
            case OpKind::ParamRelu: {
                const auto& pl = unary_[op.payload];
                ConstGaussSpan in = cspan(pl.a);
                for (uint32_t i = 0; i < pl.a.n; ++i) {
                    const double* go = grad(op.gout.off + i * gs);
                    double* gi = grad(pl.a.off + i * gs);
                    if (in.weight(i) > 0) gi[0] += go[0];
                    for (int d = 1; d < gs; ++d) gi[d] += go[d];
                }
                break;
            }
            case OpKind::EmFit: {
                auto& pl = emfit_[op.payload];
                std::vector<const double*> tp(pl.targets.size());
                std::vector<double*> gp(pl.targets.size());
                for (size_t i = 0; i < pl.targets.size(); ++i) {
                    tp[i] = val(pl.targets[i]);
                    gp[i] = grad(pl.targets[i]);
                }
                red::em_fit_backward(k, tp.data(), static_cast<int>(pl.targets.size()),
                                     pl.sel.data(), static_cast<int>(pl.sel.size()), pl.cfg,
                                     val(op.gout.off), grad(op.gout.off), gp.data());
                break;
            }
            case OpKind::Gather: {
                const auto& pl = gather_[op.payload];
                for (size_t i = 0; i < pl.src.size(); ++i) {
                    if (pl.src[i] == kPad) continue;
                    const double* go = grad(op.gout.off + static_cast<uint32_t>(i) * gs);
                    double* gi = grad(pl.src[i]);
                    for (int d = 0; d < gs; ++d) gi[d] += go[d];
                }
                break;
            }
            case OpKind::Rescale: {
                const auto& pl = rescale_[op.payload];
                const int ps = la::packed_size(k);
                const double sigma = pl.sigma, s2 = sigma * sigma;
                double sigbar = 0;
                for (uint32_t i = 0; i < pl.a.n; ++i) {
                    const double* gin = val(pl.a.off + i * gs);
                    const double* go = grad(op.gout.off + i * gs);
                    double* gi = grad(pl.a.off + i * gs);
                    gi[0] += go[0];
                    for (int d = 0; d < k; ++d) {
                        gi[1 + d] += sigma * go[1 + d];
                        sigbar += go[1 + d] * gin[1 + d];
                    }
                    for (int d = 0; d < ps; ++d) {
                        gi[1 + k + d] += s2 * go[1 + k + d];
                        sigbar += go[1 + k + d] * gin[1 + k + d] * 2.0 * sigma;
                    }
                }
                // sigma = sqrt(k / tbar), tbar = mean of covariance traces
                const double tbar_bar = sigbar * (-sigma / (2.0 * pl.tbar));
                const double per_entry = tbar_bar / static_cast<double>(pl.a.n);
                for (uint32_t i = 0; i < pl.a.n; ++i) {
                    double* gi = grad(pl.a.off + i * gs);
                    for (int d = 0; d < k; ++d) gi[1 + k + la::packed_index(d, d)] += per_entry;
                }
                break;
            }
            case OpKind::Integrate: {
                const auto& pl = unary_[op.payload];
                const double go = grad_[op.sout];
                if (go != 0.0)
                    for (uint32_t i = 0; i < pl.a.n; ++i) grad(pl.a.off + i * gs)[0] += go;
                break;
            }
            case OpKind::EvalPoint: {
                const auto& pl = evalp_[op.payload];
                const double go = grad_[op.sout];
                if (go == 0.0) break;
                for (uint32_t i = 0; i < pl.a.n; ++i) {
                    const gm::EvalDerivs d =
                        gm::eval_gaussian_derivs(k, val(pl.a.off + i * gs), pl.x);
                    double* gi = grad(pl.a.off + i * gs);
                    gi[0] += go * d.wrt_weight;
                    for (int dd = 0; dd < k; ++dd) gi[1 + dd] += go * d.wrt_pos[dd];
                    for (int dd = 0; dd < la::packed_size(k); ++dd)
                        gi[1 + k + dd] += go * d.wrt_cov[dd];
                }
                break;
            }
        }
    }
    for (const Bind& b : binds_)
        for (uint32_t i = 0; i < b.n; ++i) b.out[i] += grad_[b.off + i];
}

bool Tape::validate_single_assignment() const {
    std::vector<std::pair<uint32_t, uint32_t>> ranges;
    const int gs = gaussian_stride(dims_);
    for (const Op& op : ops_) {
        if (op.gout.n > 0) ranges.emplace_back(op.gout.off, op.gout.off + op.gout.n * gs);
        else ranges.emplace_back(op.sout, op.sout + 1);
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second) return false;
    return true;
}

// ------------------------------------------------------------- reductions

GaussRange record_modified_em(Tape& t, GaussRange in, int np, const red::EmFitConfig& cfg,
                              bool* padded, int* real_count) {
    if (padded) *padded = false;
    if (np >= static_cast<int>(in.n)) {
        if (real_count) *real_count = static_cast<int>(in.n);
        return in;
    }
    ConstGaussSpan s = t.cspan(in);
    std::vector<int> sel = red::select_top_integral(s, np);
    std::vector<uint32_t> targets(in.n);
    for (uint32_t i = 0; i < in.n; ++i) targets[i] = in.off + i * t.gstride();
    if (real_count) *real_count = np;
    return t.em_fit(targets, sel, cfg);
}

}  // namespace gmcn::ad

namespace {

using gmcn::ConstGaussSpan;

struct TreePlan {
    gmcn::red::GaussianTree tree;
    std::vector<int> cache_size;
    std::vector<uint8_t> needs_fit;
    std::vector<int> order;  // children before parents
};

TreePlan plan_tree(ConstGaussSpan m, int T) {
    TreePlan plan;
    plan.tree = gmcn::red::build_tree(gmcn::red::morton_codes(m));
    const int n = static_cast<int>(plan.tree.nodes.size());
    plan.cache_size.assign(n, 0);
    plan.needs_fit.assign(n, 0);
    plan.order.reserve(n);
    // iterative post-order
    std::vector<std::pair<int, int>> stack{{plan.tree.root, 0}};
    while (!stack.empty()) {
        auto& [id, state] = stack.back();
        const gmcn::red::TreeNode& nd = plan.tree.nodes[id];
        if (nd.leaf >= 0 || state == 2) {
            plan.order.push_back(id);
            stack.pop_back();
            continue;
        }
        ++state;
        stack.push_back({state == 1 ? nd.left : nd.right, 0});
    }
    for (int id : plan.order) {
        const gmcn::red::TreeNode& nd = plan.tree.nodes[id];
        if (nd.leaf >= 0) {
            plan.cache_size[id] = 1;
        } else {
            const int s = plan.cache_size[nd.left] + plan.cache_size[nd.right];
            plan.needs_fit[id] = s > T;
            plan.cache_size[id] = std::min(s, T);
        }
    }
    return plan;
}

// Greedy top-down selection: start at the root, repeatedly expand the
// selected node of largest cached mass until ceil(np/T) nodes are selected,
// then emit cache handles.
std::vector<uint32_t> treehem_topdown(const TreePlan& plan,
                                      const std::vector<std::vector<uint32_t>>& cache,
                                      const std::vector<double>& mass, int np, int T,
                                      gmcn::ad::Tape* sig_tape) {
    const int need = (np + T - 1) / T;
    std::vector<int> selected{plan.tree.root};
    while (static_cast<int>(selected.size()) < need) {
        int best = -1;
        for (size_t i = 0; i < selected.size(); ++i) {
            const gmcn::red::TreeNode& nd = plan.tree.nodes[selected[i]];
            if (nd.leaf >= 0) continue;
            if (best < 0 || mass[selected[i]] > mass[selected[best]]) best = static_cast<int>(i);
        }
        if (best < 0) break;
        const gmcn::red::TreeNode& nd = plan.tree.nodes[selected[best]];
        selected[best] = nd.left;
        selected.push_back(nd.right);
    }

    std::vector<uint32_t> handles;
    for (int id : selected) {
        if (sig_tape) sig_tape->sig_mix(0xaa + static_cast<uint64_t>(id));
        for (uint32_t h : cache[id]) handles.push_back(h);
    }
    return handles;
}

template <typename WeightOf>
void truncate_by_weight(std::vector<uint32_t>& handles, int np, WeightOf&& weight_of) {
    if (static_cast<int>(handles.size()) <= np) return;
    std::vector<int> idx(handles.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return weight_of(handles[a]) > weight_of(handles[b]);
    });
    idx.resize(np);
    std::sort(idx.begin(), idx.end());
    std::vector<uint32_t> kept;
    kept.reserve(np);
    for (int i : idx) kept.push_back(handles[i]);
    handles.swap(kept);
}

}  // namespace

namespace gmcn::ad {

GaussRange record_treehem(Tape& t, GaussRange in, int np, int T, const red::EmFitConfig& cfg,
                          red::TreeHemStats* stats, bool* padded, int* real_count) {
    if (T != 2 && T != 4) throw std::invalid_argument("treehem: T must be 2 or 4");
    if (padded) *padded = false;
    if (np >= static_cast<int>(in.n)) {
        if (real_count) *real_count = static_cast<int>(in.n);
        return in;
    }
    const int gs = t.gstride();
    const int k = t.dims();
    TreePlan plan = plan_tree(t.cspan(in), T);
    const int nodes = static_cast<int>(plan.tree.nodes.size());
    for (const auto& mc : plan.tree.order) t.sig_mix(0xb0 + static_cast<uint64_t>(mc.source));
    for (const auto& nd : plan.tree.nodes) t.sig_mix(0xb1 + static_cast<uint64_t>(nd.split_level + 2));

    std::vector<std::vector<uint32_t>> cache(nodes);
    std::vector<double> pos, wts;
    for (int id : plan.order) {
        const red::TreeNode& nd = plan.tree.nodes[id];
        if (nd.leaf >= 0) {
            cache[id] = {in.off + static_cast<uint32_t>(plan.tree.order[nd.leaf].source) * gs};
            continue;
        }
        std::vector<uint32_t> gathered = cache[nd.left];
        gathered.insert(gathered.end(), cache[nd.right].begin(), cache[nd.right].end());
        if (!plan.needs_fit[id]) {
            cache[id] = std::move(gathered);
            continue;
        }
        const int m = static_cast<int>(gathered.size());
        pos.resize(static_cast<size_t>(m) * k);
        wts.resize(m);
        for (int i = 0; i < m; ++i) {
            const double* g = t.val(gathered[i]);
            wts[i] = g[0];
            for (int d = 0; d < k; ++d) pos[static_cast<size_t>(i) * k + d] = g[1 + d];
        }
        std::vector<int> picks = red::cluster_init(k, pos.data(), wts.data(), m, T);
        for (int p : picks) t.sig_mix(0xb2 + static_cast<uint64_t>(p));
        GaussRange fit = t.em_fit(gathered, picks, cfg);
        cache[id].resize(T);
        for (int s = 0; s < T; ++s) cache[id][s] = fit.off + static_cast<uint32_t>(s) * gs;
        if (stats) {
            stats->cache_gaussians += T;
            ++stats->node_fits;
        }
        counters::tree_cache_slots += T;
    }

    std::vector<double> mass(nodes, 0.0);
    for (int id : plan.order)
        for (uint32_t h : cache[id]) mass[id] += t.val(h)[0];

    std::vector<uint32_t> handles = treehem_topdown(plan, cache, mass, np, T, &t);
    truncate_by_weight(handles, np, [&](uint32_t h) { return t.val(h)[0]; });
    if (real_count) *real_count = static_cast<int>(handles.size());
    if (padded) *padded = static_cast<int>(handles.size()) < np;
    while (static_cast<int>(handles.size()) < np) handles.push_back(Tape::kPad);
    return t.gather(handles);
}

}  // namespace gmcn::ad

// Pure reduction API (declared in reduction.hpp).
namespace gmcn::red {

namespace {

Mixture extract(ad::Tape& t, ad::GaussRange r) {
    Mixture out(t.dims(), static_cast<int>(r.n));
    std::memcpy(out.data.data(), t.val(r.off), sizeof(double) * out.data.size());
    return out;
}

}  // namespace

ReduceResult modified_em_reduce(const Mixture& m, int np, const EmFitConfig& cfg) {
    ReduceResult res;
    if (np >= m.size()) {
        res.mixture = m;
        res.real_count = m.size();
        return res;
    }
    ad::Tape t(m.dims);
    ad::GaussRange in = t.load_gaussians(m.span());
    ad::GaussRange out = ad::record_modified_em(t, in, np, cfg, &res.padded, &res.real_count);
    res.mixture = extract(t, out);
    return res;
}

ReduceResult treehem_reduce(const Mixture& m, int np, int T, const EmFitConfig& cfg,
                            TreeHemStats* stats, int threads) {
    ReduceResult res;
    if (np >= m.size()) {
        res.mixture = m;
        res.real_count = m.size();
        return res;
    }
    if (threads <= 1) {
        ad::Tape t(m.dims);
        ad::GaussRange in = t.load_gaussians(m.span());
        ad::GaussRange out =
            ad::record_treehem(t, in, np, T, cfg, stats, &res.padded, &res.real_count);
        res.mixture = extract(t, out);
        return res;
    }
    if (T != 2 && T != 4) throw std::invalid_argument("treehem: T must be 2 or 4");

    // Two-visitor bottom-up pass: workers start at the leaves; the first
    // thread reaching an inner node flags it and leaves, the second does the
    // fit after both child caches are complete. Output slots are
    // preallocated per node, so writes are disjoint and the result is
    // identical to the sequential pass.
    const int k = m.dims;
    const int gs = gaussian_stride(k);
    const TreePlan plan = plan_tree(m.span(), T);
    const int nodes = static_cast<int>(plan.tree.nodes.size());

    // buffer: input mixture followed by preallocated fit outputs
    std::vector<uint32_t> fit_off(nodes, 0);
    uint32_t next = static_cast<uint32_t>(m.data.size());
    uint64_t fits_planned = 0;
    for (int id = 0; id < nodes; ++id)
        if (plan.needs_fit[id]) {
            fit_off[id] = next;
            next += static_cast<uint32_t>(T) * gs;
            ++fits_planned;
        }
    std::vector<double> buf(next, 0.0);
    std::memcpy(buf.data(), m.data.data(), sizeof(double) * m.data.size());

    std::vector<std::vector<uint32_t>> cache(nodes);
    for (int id = 0; id < nodes; ++id) {
        const TreeNode& nd = plan.tree.nodes[id];
        if (nd.leaf >= 0)
            cache[id] = {static_cast<uint32_t>(plan.tree.order[nd.leaf].source) * gs};
    }

    std::vector<std::atomic<int>> visits(nodes);
    for (auto& v : visits) v.store(0);
    std::atomic<uint64_t> fits_done{0};
    std::vector<int> leaves;
    for (int id = 0; id < nodes; ++id)
        if (plan.tree.nodes[id].leaf >= 0) leaves.push_back(id);

    auto process_node = [&](int id) {
        const TreeNode& nd = plan.tree.nodes[id];
        std::vector<uint32_t> gathered = cache[nd.left];
        gathered.insert(gathered.end(), cache[nd.right].begin(), cache[nd.right].end());
        if (!plan.needs_fit[id]) {
            cache[id] = std::move(gathered);
            return;
        }
        const int mm = static_cast<int>(gathered.size());
        std::vector<double> pos(static_cast<size_t>(mm) * k), wts(mm);
        std::vector<const double*> tp(mm);
        for (int i = 0; i < mm; ++i) {
            const double* g = buf.data() + gathered[i];
            tp[i] = g;
            wts[i] = g[0];
            for (int d = 0; d < k; ++d) pos[static_cast<size_t>(i) * k + d] = g[1 + d];
        }
        std::vector<int> picks = cluster_init(k, pos.data(), wts.data(), mm, T);
        em_fit_forward(k, tp.data(), mm, picks.data(), T, cfg, buf.data() + fit_off[id]);
        cache[id].resize(T);
        for (int s = 0; s < T; ++s) cache[id][s] = fit_off[id] + static_cast<uint32_t>(s) * gs;
        fits_done.fetch_add(1);
        counters::tree_cache_slots += T;
    };

    parallel_for(leaves.size(), threads, [&](size_t lo, size_t hi) {
        for (size_t li = lo; li < hi; ++li) {
            int id = leaves[li];
            int p = plan.tree.nodes[id].parent;
            while (p >= 0) {
                if (visits[p].fetch_add(1, std::memory_order_acq_rel) == 0) break;
                process_node(p);
                p = plan.tree.nodes[p].parent;
            }
        }
    });
    if (fits_done.load() != fits_planned)
        throw std::runtime_error("treehem: bottom-up pass incomplete");
    if (stats) {
        stats->cache_gaussians += fits_planned * static_cast<uint64_t>(T);
        stats->node_fits += fits_planned;
    }

    std::vector<double> mass(nodes, 0.0);
    for (int id = 0; id < nodes; ++id)
        for (uint32_t h : cache[id]) mass[id] += buf[h];

    std::vector<uint32_t> handles = treehem_topdown(plan, cache, mass, np, T, nullptr);
    truncate_by_weight(handles, np, [&](uint32_t h) { return buf[h]; });
    res.real_count = static_cast<int>(handles.size());
    res.padded = res.real_count < np;
    res.mixture = Mixture(k, np);
    for (int i = 0; i < np; ++i) {
        double* g = res.mixture.g(i);
        if (i < res.real_count) {
            std::memcpy(g, buf.data() + handles[i], sizeof(double) * gs);
        } else {
            for (int d = 0; d < gs; ++d) g[d] = 0.0;
            for (int d = 0; d < k; ++d) g[1 + k + la::packed_index(d, d)] = 1.0;
        }
    }
    return res;
}

}  // namespace gmcn::red
