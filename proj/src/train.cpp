#include "gmcn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gmcn/activation.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/parallel.hpp"
#include "gmcn/rng.hpp"
#include "gmcn/serialize.hpp"

namespace gmcn::harness {

double train_step(net::Model& model, AdamState& adam, const MixtureBatch& batch,
                  const int* labels, double lr, double wd_scale, int threads,
                  const std::string& dump_dir) {
    const int B = batch.batch;
    const int C = model.spec.classes();
    const size_t np = model.layout.total;
    if (adam.m.size() != np) {
        adam.m.assign(np, 0.0);
        adam.v.assign(np, 0.0);
    }

    std::vector<net::SampleForward> sfs;
    sfs.reserve(B);
    for (int b = 0; b < B; ++b) sfs.emplace_back(model.spec.dims);
    std::vector<std::vector<double>> sample_grad(B, std::vector<double>(np, 0.0));
    std::vector<double> integrals(static_cast<size_t>(B) * C);

    parallel_for(B, threads, [&](size_t lo, size_t hi) {
        for (size_t b = lo; b < hi; ++b) {
            net::sample_forward(model, batch, static_cast<int>(b), sfs[b],
                                sample_grad[b].data());
            for (int c = 0; c < C; ++c) integrals[b * C + c] = sfs[b].integrals[c];
        }
    });

    net::HeadContext ctx;
    net::head_forward(model, integrals.data(), B, true, &model.bn, ctx);
    const double nll = net::nll_loss(ctx, labels);
    const double lambda = wd_scale * lr;
    const double wd = net::weight_decay_loss(model);
    const double loss = nll + lambda * wd;
    if (!std::isfinite(loss)) {
        if (!dump_dir.empty()) {
            std::filesystem::create_directories(dump_dir);
            io::write_mixture_file(dump_dir + "/diverged_batch.gmix", batch);
        }
        throw std::runtime_error("train_step: non-finite loss");
    }

    std::vector<double> dintegrals(static_cast<size_t>(B) * C);
    std::vector<double> grad(np, 0.0);
    net::head_backward(model, ctx, labels, dintegrals.data(),
                       grad.data() + model.layout.bn_gamma, grad.data() + model.layout.bn_beta);

    parallel_for(B, threads, [&](size_t lo, size_t hi) {
        for (size_t b = lo; b < hi; ++b) {
            for (int c = 0; c < C; ++c)
                sfs[b].tape.seed(sfs[b].integral_slots[c], dintegrals[b * C + c]);
            sfs[b].tape.backward();
        }
    });
    // fixed-order reduction keeps results independent of the thread count
    for (int b = 0; b < B; ++b)
        for (size_t i = 0; i < np; ++i) grad[i] += sample_grad[b][i];
    net::weight_decay_grad(model, lambda, grad.data());

    ++adam.t;
    const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.t));
    for (size_t i = 0; i < np; ++i) {
        adam.m[i] = adam.beta1 * adam.m[i] + (1.0 - adam.beta1) * grad[i];
        adam.v[i] = adam.beta2 * adam.v[i] + (1.0 - adam.beta2) * grad[i] * grad[i];
        model.params[i] -= lr * (adam.m[i] / bc1) / (std::sqrt(adam.v[i] / bc2) + adam.eps);
    }
    return loss;
}

EvalResult evaluate(net::Model& model, const Dataset& data, int batch_size, int threads) {
    const int C = model.spec.classes();
    const int total = data.mixtures.batch;
    EvalResult res;
    res.confusion.assign(static_cast<size_t>(C) * C, 0);
    long correct = 0;
    for (int start = 0; start < total; start += batch_size) {
        const int B = std::min(batch_size, total - start);
        MixtureBatch mb(data.mixtures.dims, B, data.mixtures.channels, data.mixtures.comps);
        for (int b = 0; b < B; ++b)
            std::memcpy(mb.data.data() + mb.channel_offset(b, 0),
                        data.mixtures.data.data() + data.mixtures.channel_offset(start + b, 0),
                        sizeof(double) * mb.channels * mb.comps * mb.stride());
        const std::vector<double> logp = net::model_forward(model, mb, false, threads);
        for (int b = 0; b < B; ++b) {
            int pred = 0;
            for (int c = 1; c < C; ++c)
                if (logp[static_cast<size_t>(b) * C + c] > logp[static_cast<size_t>(b) * C + pred])
                    pred = c;
            const int truth = data.labels[start + b];
            ++res.confusion[static_cast<size_t>(truth) * C + pred];
            if (pred == truth) ++correct;
        }
    }
    res.accuracy = static_cast<double>(correct) / total;
    return res;
}

std::vector<LayerRmse> layer_fitting_rmse(const net::Model& model, const MixtureBatch& input,
                                          int sample, int n_samples, uint64_t seed) {
    net::SampleForward sf(model.spec.dims);
    net::sample_forward(model, input, sample, sf, nullptr, true);
    std::vector<LayerRmse> out;
    for (size_t l = 0; l < sf.traces.size(); ++l) {
        const net::SampleTrace& tr = sf.traces[l];
        ConstGaussSpan conv = sf.tape.cspan(tr.conv);
        ConstGaussSpan fit = sf.tape.cspan(tr.fit);
        ConstGaussSpan reduced = sf.tape.cspan(tr.reduced);
        LayerRmse r;
        const act::EvalFn target = act::relu_mixture_eval_fn(conv);
        const act::EvalFn fit_fn = act::mixture_eval_fn(fit);
        const act::EvalFn red_fn = act::mixture_eval_fn(reduced);
        r.all = act::fitting_rmse(conv, red_fn, target, n_samples, Rng::derive_seed(seed, l * 3));
        r.relu =
            act::fitting_rmse(conv, fit_fn, target, n_samples, Rng::derive_seed(seed, l * 3 + 1));
        r.reduction =
            act::fitting_rmse(fit, red_fn, fit_fn, n_samples, Rng::derive_seed(seed, l * 3 + 2));
        out.push_back(r);
    }
    return out;
}

namespace {

void log_line(std::ofstream& os, int epoch, const std::string& split, const std::string& metric,
              double value) {
    if (os.is_open()) os << epoch << "\t" << split << "\t" << metric << "\t" << value << "\n";
}

MixtureBatch slice_batch(const MixtureBatch& src, const std::vector<int>& order, int start,
                         int count) {
    MixtureBatch mb(src.dims, count, src.channels, src.comps);
    for (int b = 0; b < count; ++b)
        std::memcpy(mb.data.data() + mb.channel_offset(b, 0),
                    src.data.data() + src.channel_offset(order[start + b], 0),
                    sizeof(double) * src.channels * src.comps * src.stride());
    return mb;
}

}  // namespace

TrainResult train(net::Model& model, AdamState& adam, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& cfg) {
    TrainResult res;
    const int total = train_set.mixtures.batch;
    double lr = cfg.lr;
    int stale_epochs = 0;

    std::ofstream log;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        log.open(cfg.out_dir + "/metrics.log", std::ios::app);
        res.checkpoint_path = cfg.out_dir + "/best.ckpt";
    }

    std::vector<int> order(total);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive_seed(cfg.seed, 1000 + epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0;
        int steps = 0;
        for (int start = 0; start < total; start += cfg.batch_size) {
            const int B = std::min(cfg.batch_size, total - start);
            const MixtureBatch mb = slice_batch(train_set.mixtures, order, start, B);
            std::vector<int> labels(B);
            for (int b = 0; b < B; ++b) labels[b] = train_set.labels[order[start + b]];
            loss_sum += train_step(model, adam, mb, labels.data(), lr, cfg.weight_decay_scale,
                                   cfg.threads, cfg.out_dir);
            ++steps;
        }
        const double mean_loss = loss_sum / steps;
        res.epoch_loss.push_back(mean_loss);

        const EvalResult ev = evaluate(model, val_set, cfg.batch_size, cfg.threads);
        log_line(log, epoch, "train", "loss", mean_loss);
        log_line(log, epoch, "train", "lr", lr);
        log_line(log, epoch, "val", "accuracy", ev.accuracy);
        if (cfg.log_rmse && total > 0) {
            const MixtureBatch first = slice_batch(train_set.mixtures, order, 0, 1);
            const std::vector<LayerRmse> rmse =
                layer_fitting_rmse(model, first, 0, cfg.rmse_samples, cfg.seed + epoch);
            for (size_t l = 0; l < rmse.size(); ++l) {
                log_line(log, epoch, "train", "rmse_layer" + std::to_string(l) + "_all",
                         rmse[l].all);
                log_line(log, epoch, "train", "rmse_layer" + std::to_string(l) + "_relu",
                         rmse[l].relu);
                log_line(log, epoch, "train", "rmse_layer" + std::to_string(l) + "_reduction",
                         rmse[l].reduction);
            }
        }
        log.flush();

        if (ev.accuracy > res.best_val_acc) {
            res.best_val_acc = ev.accuracy;
            res.best_epoch = epoch;
            stale_epochs = 0;
            if (!res.checkpoint_path.empty())
                save_checkpoint(res.checkpoint_path, model, adam, epoch, res.best_val_acc, lr,
                                cfg.seed);
        } else if (++stale_epochs > cfg.sched_patience) {
            lr = std::max(cfg.min_lr, lr * cfg.sched_factor);
            stale_epochs = 0;
        }
        if (cfg.target_accuracy > 0 && ev.accuracy >= cfg.target_accuracy) break;
    }
    return res;
}

// ----------------------------------------------------------- checkpoints

namespace {

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_vec(std::ostream& os, const std::vector<double>& v) {
    put_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}
uint32_t get_u32(std::istream& is) {
    uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw io_error("checkpoint truncated");
    return v;
}
uint64_t get_u64(std::istream& is) {
    uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw io_error("checkpoint truncated");
    return v;
}
double get_f64(std::istream& is) {
    double v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw io_error("checkpoint truncated");
    return v;
}
std::vector<double> get_vec(std::istream& is) {
    std::vector<double> v(get_u64(is));
    if (!is.read(reinterpret_cast<char*>(v.data()), sizeof(double) * v.size()))
        throw io_error("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const net::Model& model, const AdamState& adam,
                     int epoch, double best_acc, double lr, uint64_t seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    os.write("GMCK", 4);
    put_u32(os, 1);  // version
    const net::ModelSpec& s = model.spec;
    put_u32(os, static_cast<uint32_t>(s.dims));
    put_u32(os, static_cast<uint32_t>(s.input_channels));
    put_u32(os, static_cast<uint32_t>(s.input_comps));
    put_u32(os, static_cast<uint32_t>(s.layers.size()));
    for (const net::LayerSpec& ls : s.layers) {
        put_u32(os, static_cast<uint32_t>(ls.in_ch));
        put_u32(os, static_cast<uint32_t>(ls.out_ch));
        put_u32(os, static_cast<uint32_t>(ls.n_kernel));
        put_u32(os, static_cast<uint32_t>(ls.n_fit));
        put_u32(os, (ls.reduce ? 1u : 0u) | (ls.rescale ? 2u : 0u));
    }
    put_u32(os, s.reduce_method == net::ReduceMethod::TreeHem ? 0 : 1);
    put_u32(os, static_cast<uint32_t>(s.tree_t));
    put_u32(os, s.activation == net::Activation::DenseFit ? 0 : 1);
    put_f64(os, s.kernel_eps);
    put_f64(os, s.em.n_virtual);
    put_f64(os, s.em.cov_floor);
    put_f64(os, s.em.pivot_min);
    put_f64(os, s.fit.epsilon_floor);
    put_f64(os, s.fit.eval_clamp);
    put_vec(os, model.params);
    put_f64(os, model.bn.momentum);
    put_f64(os, model.bn.eps);
    put_u64(os, static_cast<uint64_t>(model.bn.updates));
    put_vec(os, model.bn.running_mean);
    put_vec(os, model.bn.running_var);
    put_u64(os, static_cast<uint64_t>(adam.t));
    put_f64(os, adam.beta1);
    put_f64(os, adam.beta2);
    put_f64(os, adam.eps);
    put_vec(os, adam.m);
    put_vec(os, adam.v);
    put_u32(os, static_cast<uint32_t>(epoch));
    put_f64(os, best_acc);
    put_f64(os, lr);
    put_u64(os, seed);
    if (!os) throw io_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "GMCK", 4) != 0)
        throw io_error("not a checkpoint file: " + path);
    if (get_u32(is) != 1) throw io_error("unsupported checkpoint version");
    Checkpoint ck;
    net::ModelSpec s;
    s.dims = static_cast<int>(get_u32(is));
    s.input_channels = static_cast<int>(get_u32(is));
    s.input_comps = static_cast<int>(get_u32(is));
    const uint32_t nl = get_u32(is);
    for (uint32_t l = 0; l < nl; ++l) {
        net::LayerSpec ls;
        ls.in_ch = static_cast<int>(get_u32(is));
        ls.out_ch = static_cast<int>(get_u32(is));
        ls.n_kernel = static_cast<int>(get_u32(is));
        ls.n_fit = static_cast<int>(get_u32(is));
        const uint32_t flags = get_u32(is);
        ls.reduce = flags & 1u;
        ls.rescale = flags & 2u;
        s.layers.push_back(ls);
    }
    s.reduce_method = get_u32(is) == 0 ? net::ReduceMethod::TreeHem : net::ReduceMethod::ModifiedEm;
    s.tree_t = static_cast<int>(get_u32(is));
    s.activation = get_u32(is) == 0 ? net::Activation::DenseFit : net::Activation::ParamRelu;
    s.kernel_eps = get_f64(is);
    s.em.n_virtual = get_f64(is);
    s.em.cov_floor = get_f64(is);
    s.em.pivot_min = get_f64(is);
    s.fit.epsilon_floor = get_f64(is);
    s.fit.eval_clamp = get_f64(is);
    ck.model.spec = s;
    ck.model.layout = net::make_layout(s);
    ck.model.params = get_vec(is);
    ck.model.bn.momentum = get_f64(is);
    ck.model.bn.eps = get_f64(is);
    ck.model.bn.updates = static_cast<long>(get_u64(is));
    ck.model.bn.running_mean = get_vec(is);
    ck.model.bn.running_var = get_vec(is);
    ck.adam.t = static_cast<long>(get_u64(is));
    ck.adam.beta1 = get_f64(is);
    ck.adam.beta2 = get_f64(is);
    ck.adam.eps = get_f64(is);
    ck.adam.m = get_vec(is);
    ck.adam.v = get_vec(is);
    ck.epoch = static_cast<int>(get_u32(is));
    ck.best_acc = get_f64(is);
    ck.lr = get_f64(is);
    ck.seed = get_u64(is);
    if (ck.model.params.size() != ck.model.layout.total)
        throw io_error("checkpoint parameter count mismatch");
    return ck;
}

}  // namespace gmcn::harness
