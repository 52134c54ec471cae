#include "gmcn/network.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "gmcn/gm.hpp"
#include "gmcn/parallel.hpp"
#include "gmcn/rng.hpp"

namespace gmcn::net {

int ModelSpec::layer_input_comps(int l) const {
    int n = input_comps;
    for (int i = 0; i < l; ++i) {
        const LayerSpec& ls = layers[i];
        n = ls.reduce ? ls.n_fit : ls.in_ch * n * ls.n_kernel;
    }
    return n;
}

void ModelSpec::validate() const {
    if (dims != 2 && dims != 3) throw std::invalid_argument("model: dims must be 2 or 3");
    if (layers.empty()) throw std::invalid_argument("model: no layers");
    if (layers.front().in_ch != input_channels)
        throw std::invalid_argument("model: first layer channel mismatch");
    for (size_t l = 0; l < layers.size(); ++l) {
        const LayerSpec& ls = layers[l];
        if (ls.in_ch < 1 || ls.out_ch < 1 || ls.n_kernel < 1 || ls.n_fit < 1)
            throw std::invalid_argument("model: layer counts must be >= 1");
        if (l + 1 < layers.size() && layers[l + 1].in_ch != ls.out_ch)
            throw std::invalid_argument("model: layer channels do not chain");
    }
}

ParamLayout make_layout(const ModelSpec& spec) {
    ParamLayout lo;
    const int rk = kernel_raw_stride(spec.dims);
    size_t off = 0;
    for (const LayerSpec& ls : spec.layers) {
        lo.layer_off.push_back(off);
        off += static_cast<size_t>(ls.out_ch) * ls.in_ch * ls.n_kernel * rk;
    }
    lo.bn_gamma = off;
    off += spec.classes();
    lo.bn_beta = off;
    off += spec.classes();
    lo.total = off;
    return lo;
}

void make_covariance(int k, const double* cfac, double eps, double* packed_out) {
    for (int r = 0; r < k; ++r)
        for (int c = 0; c <= r; ++c) {
            double v = r == c ? eps : 0.0;
            for (int m = 0; m < k; ++m) v += cfac[m * k + r] * cfac[m * k + c];
            packed_out[la::packed_index(r, c)] = v;
        }
}

void init_kernels(const ModelSpec& spec, uint64_t seed, double* params) {
    const int k = spec.dims;
    const int rk = kernel_raw_stride(k);
    Rng rng(seed);
    const ParamLayout lo = make_layout(spec);
    for (size_t l = 0; l < spec.layers.size(); ++l) {
        const LayerSpec& ls = spec.layers[l];
        double* p = params + lo.layer_off[l];
        for (int fo = 0; fo < ls.out_ch; ++fo)
            for (int fi = 0; fi < ls.in_ch; ++fi)
                for (int n = 0; n < ls.n_kernel; ++n) {
                    double* g = p + (static_cast<size_t>(fo) * ls.in_ch * ls.n_kernel +
                                     static_cast<size_t>(fi) * ls.n_kernel + n) * rk;
                    g[0] = rng.normal(0.1, 1.0);
                    if (n == 0) {
                        for (int d = 0; d < k; ++d) g[1 + d] = 0.0;
                    } else if (k == 2) {
                        const double ang = 2.0 * M_PI * (n - 1) / (ls.n_kernel - 1);
                        // exact axis positions for the four-spoke layout
                        const double c = std::fabs(std::cos(ang)) < 1e-15 ? 0.0 : std::cos(ang);
                        const double s = std::fabs(std::sin(ang)) < 1e-15 ? 0.0 : std::sin(ang);
                        g[1] = 2.5 * c;
                        g[2] = 2.5 * s;
                    } else {
                        double v[3], norm = 0;
                        do {
                            norm = 0;
                            for (int d = 0; d < 3; ++d) {
                                v[d] = rng.normal();
                                norm += v[d] * v[d];
                            }
                        } while (norm < 1e-12);
                        norm = std::sqrt(norm);
                        for (int d = 0; d < 3; ++d) g[1 + d] = 2.5 * v[d] / norm;
                    }
                    for (int r = 0; r < k; ++r)
                        for (int c = 0; c < k; ++c)
                            g[1 + k + r * k + c] =
                                ((r == c ? 1.0 : 0.0) + 0.05 * rng.uniform(-1.0, 1.0)) * 0.7;
                }
    }
    // batch norm: unit scale, zero shift
    for (int c = 0; c < spec.classes(); ++c) {
        params[lo.bn_gamma + c] = 1.0;
        params[lo.bn_beta + c] = 0.0;
    }
}

Model build_model(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    m.layout = make_layout(spec);
    m.params.assign(m.layout.total, 0.0);
    init_kernels(spec, seed, m.params.data());
    m.bn.running_mean.assign(spec.classes(), 0.0);
    m.bn.running_var.assign(spec.classes(), 1.0);
    return m;
}

MixtureBatch materialize_kernels(const Model& model, int layer) {
    const ModelSpec& spec = model.spec;
    const int k = spec.dims;
    const LayerSpec& ls = spec.layers[layer];
    const int rk = kernel_raw_stride(k);
    MixtureBatch out(k, ls.out_ch, ls.in_ch, ls.n_kernel);
    const double* p = model.params.data() + model.layout.layer_off[layer];
    for (int fo = 0; fo < ls.out_ch; ++fo)
        for (int fi = 0; fi < ls.in_ch; ++fi)
            for (int n = 0; n < ls.n_kernel; ++n) {
                const double* raw = p + (static_cast<size_t>(fo) * ls.in_ch * ls.n_kernel +
                                         static_cast<size_t>(fi) * ls.n_kernel + n) * rk;
                double* g = out.g(fo, fi, n);
                g[0] = raw[0];
                for (int d = 0; d < k; ++d) g[1 + d] = raw[1 + d];
                make_covariance(k, raw + 1 + k, spec.kernel_eps, g + 1 + k);
            }
    return out;
}

double weight_decay_loss(const Model& model) {
    const int k = model.spec.dims;
    const int rk = kernel_raw_stride(k);
    double total = 0;
    double packed[6];
    for (size_t l = 0; l < model.spec.layers.size(); ++l) {
        const LayerSpec& ls = model.spec.layers[l];
        const double* p = model.params.data() + model.layout.layer_off[l];
        const int count = ls.out_ch * ls.in_ch * ls.n_kernel;
        for (int i = 0; i < count; ++i) {
            const double* raw = p + static_cast<size_t>(i) * rk;
            total += raw[0] * raw[0];
            make_covariance(k, raw + 1 + k, model.spec.kernel_eps, packed);
            double sq = 0;
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < k; ++c) {
                    const double v = packed[r >= c ? la::packed_index(r, c)
                                                   : la::packed_index(c, r)] -
                                     (r == c ? 1.0 : 0.0);
                    sq += v * v;
                }
            total += sq / (k * k);
        }
    }
    return total;
}

void weight_decay_grad(const Model& model, double scale, double* grad) {
    const int k = model.spec.dims;
    const int rk = kernel_raw_stride(k);
    double packed[6];
    for (size_t l = 0; l < model.spec.layers.size(); ++l) {
        const LayerSpec& ls = model.spec.layers[l];
        const size_t off = model.layout.layer_off[l];
        const int count = ls.out_ch * ls.in_ch * ls.n_kernel;
        for (int i = 0; i < count; ++i) {
            const double* raw = model.params.data() + off + static_cast<size_t>(i) * rk;
            double* g = grad + off + static_cast<size_t>(i) * rk;
            g[0] += scale * 2.0 * raw[0];
            make_covariance(k, raw + 1 + k, model.spec.kernel_eps, packed);
            // d/dC' of mean((C - I)^2) with C = C'^T C' + eps I is
            // 2 C' G with G = 2 (C - I) / k^2
            double gm[9];
            for (int r = 0; r < k; ++r)
                for (int c = 0; c < k; ++c)
                    gm[r * k + c] = 2.0 *
                                    (packed[r >= c ? la::packed_index(r, c)
                                                   : la::packed_index(c, r)] -
                                     (r == c ? 1.0 : 0.0)) /
                                    (k * k);
            const double* cp = raw + 1 + k;
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b) {
                    double v = 0;
                    for (int c = 0; c < k; ++c) v += cp[a * k + c] * gm[c * k + b];
                    g[1 + k + a * k + b] += scale * 2.0 * v;
                }
        }
    }
}

void sample_forward(const Model& model, const MixtureBatch& input, int b, SampleForward& sf,
                    double* param_grad, bool want_traces) {
    const ModelSpec& spec = model.spec;
    const int k = spec.dims;
    if (input.dims != k) throw std::invalid_argument("sample_forward: dimension mismatch");
    if (input.channels != spec.input_channels || input.comps != spec.input_comps)
        throw std::invalid_argument("sample_forward: input shape mismatch");
    ad::Tape& t = sf.tape;
    const int gs = t.gstride();
    const int rk = kernel_raw_stride(k);

    std::vector<ad::GaussRange> cur(spec.input_channels);
    for (int f = 0; f < spec.input_channels; ++f) cur[f] = t.load_gaussians(input.channel(b, f));
    int comps = spec.input_comps;

    for (size_t l = 0; l < spec.layers.size(); ++l) {
        const LayerSpec& ls = spec.layers[l];
        const uint32_t raw_count = static_cast<uint32_t>(ls.out_ch) * ls.in_ch * ls.n_kernel;
        const uint32_t raw_off =
            t.load_values(model.params.data() + model.layout.layer_off[l], raw_count * rk);
        if (param_grad)
            t.bind(raw_off, raw_count * rk, param_grad + model.layout.layer_off[l]);
        const ad::GaussRange kernels = t.make_covariance(raw_off, raw_count, spec.kernel_eps);

        const int conv_n = ls.in_ch * comps * ls.n_kernel;
        std::vector<ad::GaussRange> next(ls.out_ch);
        for (int fo = 0; fo < ls.out_ch; ++fo) {
            ad::GaussRange conv_ch = t.alloc_gauss(conv_n);
            for (int fi = 0; fi < ls.in_ch; ++fi) {
                const ad::GaussRange kslice{
                    kernels.off + (static_cast<uint32_t>(fo) * ls.in_ch + fi) * ls.n_kernel * gs,
                    static_cast<uint32_t>(ls.n_kernel)};
                const ad::GaussRange oslice{
                    conv_ch.off + static_cast<uint32_t>(fi) * comps * ls.n_kernel * gs,
                    static_cast<uint32_t>(comps) * ls.n_kernel};
                t.convolve(cur[fi], kslice, oslice);
            }
            ad::GaussRange fit = spec.activation == Activation::DenseFit
                                     ? t.dense_relu_fit(conv_ch, spec.fit)
                                     : t.param_relu(conv_ch);
            ad::GaussRange reduced = fit;
            if (ls.reduce) {
                reduced = spec.reduce_method == ReduceMethod::TreeHem
                              ? ad::record_treehem(t, fit, ls.n_fit, spec.tree_t, spec.em)
                              : ad::record_modified_em(t, fit, ls.n_fit, spec.em);
            }
            next[fo] = reduced;
            if (want_traces) {
                if (sf.traces.size() <= l) sf.traces.resize(l + 1);
                if (fo == 0) sf.traces[l] = {conv_ch, fit, reduced, 1.0};
            }
        }
        comps = static_cast<int>(next[0].n);

        if (ls.rescale) {
            std::vector<uint32_t> srcs;
            srcs.reserve(static_cast<size_t>(ls.out_ch) * comps);
            for (int fo = 0; fo < ls.out_ch; ++fo)
                for (int i = 0; i < comps; ++i)
                    srcs.push_back(next[fo].off + static_cast<uint32_t>(i) * gs);
            const ad::GaussRange packed = t.gather(srcs);
            double sigma = 1.0;
            const ad::GaussRange scaled = t.rescale(packed, &sigma);
            for (int fo = 0; fo < ls.out_ch; ++fo)
                next[fo] = {scaled.off + static_cast<uint32_t>(fo) * comps * gs,
                            static_cast<uint32_t>(comps)};
            if (want_traces && !sf.traces.empty()) sf.traces[l].sigma = sigma;
        }
        cur = std::move(next);
    }

    const int classes = spec.classes();
    sf.integral_slots.resize(classes);
    sf.integrals.resize(classes);
    for (int c = 0; c < classes; ++c) {
        sf.integral_slots[c] = t.integrate(cur[c]);
        sf.integrals[c] = *t.val(sf.integral_slots[c]);
    }
}

void head_forward(const Model& model, const double* integrals, int batch, bool training,
                  BatchNormState* bn, HeadContext& ctx) {
    const int C = model.spec.classes();
    ctx.batch = batch;
    ctx.classes = C;
    ctx.x.assign(integrals, integrals + static_cast<size_t>(batch) * C);
    ctx.mean.assign(C, 0.0);
    ctx.istd.assign(C, 0.0);
    ctx.xhat.resize(static_cast<size_t>(batch) * C);
    ctx.logp.resize(static_cast<size_t>(batch) * C);
    ctx.used_batch_stats = training && batch > 1;

    const double* gamma = model.params.data() + model.layout.bn_gamma;
    const double* beta = model.params.data() + model.layout.bn_beta;
    const BatchNormState& state = model.bn;

    for (int c = 0; c < C; ++c) {
        double mean, var;
        if (ctx.used_batch_stats) {
            mean = 0;
            for (int i = 0; i < batch; ++i) mean += ctx.x[static_cast<size_t>(i) * C + c];
            mean /= batch;
            var = 0;
            for (int i = 0; i < batch; ++i) {
                const double d = ctx.x[static_cast<size_t>(i) * C + c] - mean;
                var += d * d;
            }
            var /= batch;
            if (bn) {
                bn->running_mean[c] = (1.0 - bn->momentum) * bn->running_mean[c] + bn->momentum * mean;
                bn->running_var[c] = (1.0 - bn->momentum) * bn->running_var[c] + bn->momentum * var;
            }
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        ctx.mean[c] = mean;
        ctx.istd[c] = 1.0 / std::sqrt(var + state.eps);
        for (int i = 0; i < batch; ++i) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            ctx.xhat[idx] = (ctx.x[idx] - mean) * ctx.istd[c];
        }
    }
    if (bn && ctx.used_batch_stats) ++bn->updates;

    // log softmax over gamma * xhat + beta
    for (int i = 0; i < batch; ++i) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            ctx.logp[idx] = gamma[c] * ctx.xhat[idx] + beta[c];
            mx = std::max(mx, ctx.logp[idx]);
        }
        double lse = 0;
        for (int c = 0; c < C; ++c) lse += std::exp(ctx.logp[static_cast<size_t>(i) * C + c] - mx);
        lse = mx + std::log(lse);
        for (int c = 0; c < C; ++c) ctx.logp[static_cast<size_t>(i) * C + c] -= lse;
    }
}

double nll_loss(const HeadContext& ctx, const int* labels) {
    double s = 0;
    for (int i = 0; i < ctx.batch; ++i)
        s -= ctx.logp[static_cast<size_t>(i) * ctx.classes + labels[i]];
    return s / ctx.batch;
}

void head_backward(const Model& model, const HeadContext& ctx, const int* labels,
                   double* dintegrals, double* dgamma, double* dbeta) {
    const int B = ctx.batch, C = ctx.classes;
    const double* gamma = model.params.data() + model.layout.bn_gamma;

    // d(mean NLL)/d(logit) = (softmax - onehot) / B
    std::vector<double> dlogit(static_cast<size_t>(B) * C);
    for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            dlogit[idx] = (std::exp(ctx.logp[idx]) - (labels[i] == c ? 1.0 : 0.0)) / B;
        }

    for (int c = 0; c < C; ++c) {
        double sum_d = 0, sum_dx = 0;
        for (int i = 0; i < B; ++i) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            sum_d += dlogit[idx];
            sum_dx += dlogit[idx] * ctx.xhat[idx];
        }
        if (dgamma) dgamma[c] += sum_dx;
        if (dbeta) dbeta[c] += sum_d;
        const double g = gamma[c] * ctx.istd[c];
        for (int i = 0; i < B; ++i) {
            const size_t idx = static_cast<size_t>(i) * C + c;
            if (ctx.used_batch_stats) {
                dintegrals[idx] =
                    g * (dlogit[idx] - sum_d / B - ctx.xhat[idx] * (sum_dx / B));
            } else {
                dintegrals[idx] = g * dlogit[idx];
            }
        }
    }
}

std::vector<double> classifier_forward(Model& model, const MixtureBatch& features,
                                       bool training) {
    if (features.channels != model.spec.classes())
        throw std::invalid_argument("classifier_forward: channel count != class count");
    const std::vector<double> integrals = gm::mixture_integral(features);
    HeadContext ctx;
    head_forward(model, integrals.data(), features.batch, training,
                 training ? &model.bn : nullptr, ctx);
    return ctx.logp;
}

std::vector<double> model_forward(Model& model, const MixtureBatch& input, bool training,
                                  int threads) {
    const int B = input.batch;
    const int C = model.spec.classes();
    std::vector<double> integrals(static_cast<size_t>(B) * C);
    std::vector<SampleForward> sfs;
    sfs.reserve(B);
    for (int b = 0; b < B; ++b) sfs.emplace_back(model.spec.dims);
    parallel_for(B, threads, [&](size_t lo, size_t hi) {
        for (size_t b = lo; b < hi; ++b) {
            sample_forward(model, input, static_cast<int>(b), sfs[b], nullptr);
            for (int c = 0; c < C; ++c) integrals[b * C + c] = sfs[b].integrals[c];
        }
    });
    HeadContext ctx;
    head_forward(model, integrals.data(), B, training, training ? &model.bn : nullptr, ctx);
    return ctx.logp;
}

}  // namespace gmcn::net
