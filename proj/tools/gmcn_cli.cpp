// gmcn: train and evaluate Gaussian mixture convolution networks, fit input
// mixtures, render them, and run the fitting benchmarks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "gmcn/bench.hpp"
#include "gmcn/fdcheck.hpp"
#include "gmcn/gm.hpp"
#include "gmcn/inputfit.hpp"
#include "gmcn/memcalc.hpp"
#include "gmcn/network.hpp"
#include "gmcn/parallel.hpp"
#include "gmcn/render.hpp"
#include "gmcn/rng.hpp"
#include "gmcn/serialize.hpp"
#include "gmcn/toydata.hpp"
#include "gmcn/train.hpp"

using namespace gmcn;

namespace {

std::vector<int> read_labels(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open labels: " + path);
    std::vector<int> labels;
    int v;
    while (is >> v) labels.push_back(v);
    return labels;
}

void write_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream os(path);
    for (int v : labels) os << v << "\n";
}

harness::Dataset load_dataset(const std::string& mix_path, const std::string& label_path) {
    harness::Dataset ds;
    ds.mixtures = io::read_mixture_file(mix_path);
    const std::vector<int> labels = read_labels(label_path);
    if (static_cast<int>(labels.size()) != ds.mixtures.batch)
        throw io_error("label count does not match mixture batch size");
    ds.labels = labels;
    return ds;
}

// architecture strings like "1/16:8/8:3"; the last entry is the class count
net::ModelSpec parse_arch(const std::string& arch, int dims, int nk, const std::string& reduce,
                          const std::string& activation) {
    net::ModelSpec spec;
    spec.dims = dims;
    std::vector<std::pair<int, int>> stages;
    std::stringstream ss(arch);
    std::string tok;
    while (std::getline(ss, tok, ':')) {
        const size_t slash = tok.find('/');
        if (slash == std::string::npos) {
            stages.emplace_back(std::stoi(tok), -1);
        } else {
            stages.emplace_back(std::stoi(tok.substr(0, slash)),
                                std::stoi(tok.substr(slash + 1)));
        }
    }
    if (stages.size() < 2) throw std::invalid_argument("arch needs at least input and classes");
    if (stages.back().second != -1)
        throw std::invalid_argument("the last arch entry is the class count, e.g. ...:10");
    spec.input_channels = stages[0].first;
    spec.input_comps = stages[0].second;
    for (size_t i = 1; i < stages.size(); ++i) {
        net::LayerSpec ls;
        ls.in_ch = stages[i - 1].first;
        ls.out_ch = stages[i].first;
        ls.n_kernel = nk;
        const bool last = i + 1 == stages.size();
        ls.n_fit = last ? 1 : stages[i].second;
        ls.reduce = !last;
        ls.rescale = !last;
        spec.layers.push_back(ls);
    }
    if (reduce == "treehem2") {
        spec.reduce_method = net::ReduceMethod::TreeHem;
        spec.tree_t = 2;
    } else if (reduce == "treehem4") {
        spec.reduce_method = net::ReduceMethod::TreeHem;
        spec.tree_t = 4;
    } else if (reduce == "mem") {
        spec.reduce_method = net::ReduceMethod::ModifiedEm;
    } else {
        throw std::invalid_argument("unknown reduction: " + reduce);
    }
    spec.activation =
        activation == "param" ? net::Activation::ParamRelu : net::Activation::DenseFit;
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian mixture convolution networks"};
    app.set_config("--config", "", "configuration file (key = value with [sections])");
    uint64_t seed = 1;
    int threads = 0;
    std::string out_dir = "out";
    app.add_option("--seed", seed, "global random seed");
    app.add_option("--threads", threads, "worker threads (0 = auto, 1 = deterministic)");
    app.add_option("--device", "reserved, CPU only")->group("");
    app.add_option("--out", out_dir, "output directory");
    app.require_subcommand(1);

    // ---- fit-input ----
    auto* fit = app.add_subcommand("fit-input", "fit Gaussian mixtures to images or point clouds");
    std::string fi_images, fi_labels, fi_xyz, fi_off, fi_prefix = "dataset";
    std::string fi_method = "kmeans", fi_scale_in, fi_scale_out;
    int fi_n = 16, fi_count = 0;
    fit->add_option("--images", fi_images, "MNIST IDX image file");
    fit->add_option("--labels", fi_labels, "MNIST IDX label file");
    fit->add_option("--xyz", fi_xyz, "whitespace-separated x y z point file");
    fit->add_option("--off", fi_off, "OFF mesh file (vertices only)");
    fit->add_option("--n", fi_n, "Gaussians per sample");
    fit->add_option("--count", fi_count, "limit the number of samples (0 = all)");
    fit->add_option("--method", fi_method, "kmeans | kmeans+em | rand+em");
    fit->add_option("--out-prefix", fi_prefix, "output file prefix");
    fit->add_option("--apply-scale", fi_scale_in, "use a stored weight scale (test sets)");
    fit->add_option("--save-scale", fi_scale_out, "write the weight scale for later test sets");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_dataset = "toy", tr_train_mix, tr_train_lab, tr_val_mix, tr_val_lab;
    std::string tr_arch = "1/16:8/8:3", tr_reduce = "treehem2", tr_activation = "dense";
    std::string tr_resume;
    int tr_epochs = 20, tr_batch = 32, tr_nk = 5, tr_dims = 2, tr_toy_train = 600,
        tr_toy_test = 300, tr_patience = 3;
    double tr_lr = 1e-3, tr_factor = 0.5, tr_wd = 0.1, tr_target = -1;
    tr->add_option("--dataset", tr_dataset, "toy | files");
    tr->add_option("--train-mixtures", tr_train_mix);
    tr->add_option("--train-labels", tr_train_lab);
    tr->add_option("--val-mixtures", tr_val_mix);
    tr->add_option("--val-labels", tr_val_lab);
    tr->add_option("--arch", tr_arch, "channels/components chain, e.g. 1/16:8/8:3");
    tr->add_option("--nk", tr_nk, "kernel Gaussians per channel pair");
    tr->add_option("--dims", tr_dims, "2 or 3");
    tr->add_option("--reduce", tr_reduce, "treehem2 | treehem4 | mem");
    tr->add_option("--activation", tr_activation, "dense | param");
    tr->add_option("--epochs", tr_epochs);
    tr->add_option("--batch", tr_batch);
    tr->add_option("--lr", tr_lr);
    tr->add_option("--patience", tr_patience, "plateau epochs before the rate drops");
    tr->add_option("--factor", tr_factor, "rate multiplier on plateau");
    tr->add_option("--weight-decay", tr_wd, "decay loss scale, times the learning rate");
    tr->add_option("--toy-train", tr_toy_train);
    tr->add_option("--toy-test", tr_toy_test);
    tr->add_option("--target-accuracy", tr_target, "stop once validation reaches this");
    tr->add_option("--resume", tr_resume, "checkpoint to continue from");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_mix, ev_lab;
    int ev_batch = 32;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--mixtures", ev_mix)->required();
    ev->add_option("--labels", ev_lab)->required();
    ev->add_option("--batch", ev_batch);

    // ---- render ----
    auto* rd = app.add_subcommand("render", "render a mixture to a PPM image");
    std::string rd_in, rd_out = "mixture.ppm", rd_bbox;
    int rd_res = 512, rd_batch = 0, rd_channel = 0, rd_axis = 2;
    double rd_slice = 0;
    rd->add_option("--input", rd_in)->required();
    rd->add_option("--output", rd_out);
    rd->add_option("--res", rd_res);
    rd->add_option("--bbox", rd_bbox, "x0,y0,x1,y1 (default: mixture support)");
    rd->add_option("--batch", rd_batch);
    rd->add_option("--channel", rd_channel);
    rd->add_option("--axis", rd_axis, "slice axis for 3D mixtures");
    rd->add_option("--slice", rd_slice, "slice coordinate for 3D mixtures");

    // ---- memcalc ----
    auto* mc = app.add_subcommand("memcalc", "theoretical memory footprint per layer");
    std::vector<std::string> mc_rows;
    bool mc_reference = false;
    mc->add_option("--row", mc_rows, "B,Fi,Fo,Ni,No,Np,Nk (repeatable)");
    mc->add_flag("--reference-tables", mc_reference,
                 "print the two reference five-layer configurations");

    // ---- bench-fitting ----
    auto* bf = app.add_subcommand("bench-fitting", "fitting method benchmark");
    int bf_n = 256, bf_count = 8, bf_np = 32, bf_samples = 20000;
    bf->add_option("--n", bf_n, "components per mixture");
    bf->add_option("--count", bf_count, "number of mixtures");
    bf->add_option("--np", bf_np, "reduction target");
    bf->add_option("--samples", bf_samples, "RMSE sample count");

    // ---- grad-check ----
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of a toy model");
    int gc_points = 3;
    gc->add_option("--points", gc_points, "random parameter points to test");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*fit) {
            if (!fi_images.empty()) {
                const infit::IdxImages imgs = infit::read_idx_images(fi_images);
                const std::vector<uint8_t> labels = infit::read_idx_labels(fi_labels);
                const int count =
                    fi_count > 0 ? std::min(fi_count, imgs.count) : imgs.count;
                std::vector<Mixture> mixes(count);
                parallel_for(count, threads, [&](size_t lo, size_t hi) {
                    for (size_t i = lo; i < hi; ++i)
                        mixes[i] = infit::fit_image_mixture(imgs.image(static_cast<int>(i)),
                                                            imgs.rows, imgs.cols, fi_n,
                                                            Rng::derive_seed(seed, i));
                });
                infit::DatasetNorm norm;
                if (!fi_scale_in.empty()) {
                    std::ifstream is(fi_scale_in);
                    if (!(is >> norm.weight_scale)) throw io_error("bad scale file");
                    infit::apply_dataset_norm(mixes, norm);
                } else {
                    norm = infit::normalize_dataset(mixes);
                }
                if (!fi_scale_out.empty()) {
                    std::ofstream os(fi_scale_out);
                    os.precision(17);
                    os << norm.weight_scale << "\n";
                }
                MixtureBatch mb(2, count, 1, fi_n);
                std::vector<int> out_labels(count);
                for (int i = 0; i < count; ++i) {
                    std::copy(mixes[i].data.begin(), mixes[i].data.end(),
                              mb.data.data() + mb.channel_offset(i, 0));
                    out_labels[i] = labels[i];
                }
                io::write_mixture_file(fi_prefix + ".gmix", mb);
                write_labels(fi_prefix + ".labels", out_labels);
                std::printf("wrote %d mixtures to %s.gmix (scale %.9g)\n", count,
                            fi_prefix.c_str(), norm.weight_scale);
            } else if (!fi_xyz.empty() || !fi_off.empty()) {
                const infit::WeightedPointSet pts = !fi_xyz.empty()
                                                        ? infit::read_xyz_text(fi_xyz)
                                                        : infit::read_off_vertices(fi_off);
                infit::PcFitMethod method = infit::PcFitMethod::KMeans;
                if (fi_method == "kmeans+em") method = infit::PcFitMethod::KMeansEm;
                else if (fi_method == "rand+em") method = infit::PcFitMethod::RandEm;
                else if (fi_method != "kmeans") throw std::invalid_argument("unknown method");
                const Mixture m = infit::fit_pointcloud_mixture(pts, fi_n, method, seed);
                MixtureBatch mb(3, 1, 1, fi_n);
                std::copy(m.data.begin(), m.data.end(), mb.data.begin());
                io::write_mixture_file(fi_prefix + ".gmix", mb);
                std::printf("wrote 1 mixture (%d points, %d Gaussians) to %s.gmix\n",
                            pts.size(), fi_n, fi_prefix.c_str());
            } else {
                throw std::invalid_argument("fit-input needs --images or --xyz/--off");
            }
        } else if (*tr) {
            harness::Dataset train_set, val_set;
            if (tr_dataset == "toy") {
                train_set = harness::make_toy_dataset(tr_toy_train, seed);
                val_set = harness::make_toy_dataset(tr_toy_test, seed + 1);
            } else {
                train_set = load_dataset(tr_train_mix, tr_train_lab);
                val_set = load_dataset(tr_val_mix, tr_val_lab);
            }
            net::Model model;
            harness::AdamState adam;
            harness::TrainConfig cfg;
            cfg.lr = tr_lr;
            if (!tr_resume.empty()) {
                harness::Checkpoint ck = harness::load_checkpoint(tr_resume);
                model = std::move(ck.model);
                adam = std::move(ck.adam);
                cfg.lr = ck.lr;
                std::printf("resumed from %s (epoch %d, best %.4f)\n", tr_resume.c_str(),
                            ck.epoch, ck.best_acc);
            } else {
                net::ModelSpec spec =
                    parse_arch(tr_arch, tr_dims, tr_nk, tr_reduce, tr_activation);
                if (spec.input_comps != train_set.mixtures.comps)
                    spec.input_comps = train_set.mixtures.comps;
                model = net::build_model(spec, seed);
            }
            cfg.batch_size = tr_batch;
            cfg.epochs = tr_epochs;
            cfg.sched_factor = tr_factor;
            cfg.sched_patience = tr_patience;
            cfg.weight_decay_scale = tr_wd;
            cfg.seed = seed;
            cfg.threads = threads;
            cfg.out_dir = out_dir;
            cfg.target_accuracy = tr_target;
            const harness::TrainResult res = harness::train(model, adam, train_set, val_set, cfg);
            std::printf("best val accuracy %.4f (epoch %d), checkpoint %s\n", res.best_val_acc,
                        res.best_epoch, res.checkpoint_path.c_str());
        } else if (*ev) {
            harness::Checkpoint ck = harness::load_checkpoint(ev_ckpt);
            const harness::Dataset data = load_dataset(ev_mix, ev_lab);
            const harness::EvalResult res =
                harness::evaluate(ck.model, data, ev_batch, threads);
            std::printf("accuracy %.4f over %d samples\n", res.accuracy, data.mixtures.batch);
            const int C = ck.model.spec.classes();
            std::printf("confusion (rows = true class):\n");
            for (int t = 0; t < C; ++t) {
                for (int p = 0; p < C; ++p) std::printf("%6ld", res.confusion[t * C + p]);
                std::printf("\n");
            }
        } else if (*rd) {
            const MixtureBatch m = io::read_mixture_file(rd_in);
            ConstGaussSpan span = m.channel(rd_batch, rd_channel);
            gm::BBox box;
            if (rd_bbox.empty()) {
                box = gm::support_bbox(span, 3.0);
            } else {
                std::stringstream ss(rd_bbox);
                char comma;
                ss >> box.lo[0] >> comma >> box.lo[1] >> comma >> box.hi[0] >> comma >> box.hi[1];
                if (!ss) throw std::invalid_argument("bad --bbox, expected x0,y0,x1,y1");
            }
            harness::render_mixture(span, rd_out, box, rd_res, rd_res, rd_axis, rd_slice);
            std::printf("wrote %s (%dx%d)\n", rd_out.c_str(), rd_res, rd_res);
        } else if (*mc) {
            std::vector<harness::FootprintRow> rows;
            for (const std::string& s : mc_rows) {
                harness::FootprintRow r;
                std::stringstream ss(s);
                char c;
                ss >> r.batch >> c >> r.fi >> c >> r.fo >> c >> r.ni >> c >> r.no >> c >> r.np >>
                    c >> r.nk;
                if (!ss) throw std::invalid_argument("bad --row, expected B,Fi,Fo,Ni,No,Np,Nk");
                rows.push_back(r);
            }
            if (mc_reference) {
                std::printf("integrated convolution-fitting (No = 2 Np):\n%s\n",
                            harness::memcalc_table({{32, 1, 8, 128, 128, 64, 5},
                                                    {32, 8, 16, 64, 64, 32, 5},
                                                    {32, 16, 32, 32, 32, 16, 5},
                                                    {32, 32, 64, 16, 16, 8, 5},
                                                    {32, 64, 10, 8, 8, 4, 5}})
                                .c_str());
                std::printf("explicit intermediates (No = Fi Ni Nk):\n%s",
                            harness::memcalc_table({{32, 1, 8, 128, 640, 64, 5},
                                                    {32, 8, 16, 64, 2560, 32, 5},
                                                    {32, 16, 32, 32, 2560, 16, 5},
                                                    {32, 32, 64, 16, 2560, 8, 5},
                                                    {32, 64, 10, 8, 2560, 4, 5}})
                                .c_str());
            }
            if (!rows.empty()) std::printf("%s", harness::memcalc_table(rows).c_str());
            if (rows.empty() && !mc_reference)
                std::printf("nothing to do: pass --row or --reference-tables\n");
        } else if (*bf) {
            harness::BenchConfig cfg;
            cfg.n = bf_n;
            cfg.mixtures = bf_count;
            cfg.np = bf_np;
            cfg.rmse_samples = bf_samples;
            cfg.seed = seed;
            cfg.threads = threads;
            std::printf("%s", harness::bench_fitting(cfg).c_str());
        } else if (*gc) {
            net::ModelSpec spec;
            spec.dims = 2;
            spec.input_channels = 1;
            spec.input_comps = 6;
            spec.layers.push_back({1, 3, 3, 4, true, true});
            spec.layers.push_back({3, 2, 2, 4, false, false});
            const harness::Dataset data = harness::make_toy_dataset(3, seed);
            MixtureBatch input(2, 3, 1, 6);
            for (int b = 0; b < 3; ++b)
                for (int i = 0; i < 6; ++i)
                    std::copy(data.mixtures.g(b, 0, i), data.mixtures.g(b, 0, i) + 6,
                              input.g(b, 0, i));
            const int labels[3] = {0, 1, 2 % 2};
            double worst = 0;
            int total_checked = 0, total_skipped = 0;
            for (int pt = 0; pt < gc_points; ++pt) {
                net::Model model = net::build_model(spec, seed + 100 + pt);
                auto loss_fn = [&](const double* p, double* grad, uint64_t* sig) {
                    net::Model mm = model;
                    mm.params.assign(p, p + model.layout.total);
                    const int B = 3, C = 2;
                    std::vector<double> ints(B * C);
                    std::vector<net::SampleForward> sfs;
                    sfs.reserve(B);
                    std::vector<std::vector<double>> sg(B);
                    for (int b = 0; b < B; ++b) {
                        sfs.emplace_back(2);
                        sg[b].assign(model.layout.total, 0.0);
                        net::sample_forward(mm, input, b, sfs[b], grad ? sg[b].data() : nullptr);
                        for (int c = 0; c < C; ++c) ints[b * C + c] = sfs[b].integrals[c];
                    }
                    net::HeadContext ctx;
                    net::head_forward(mm, ints.data(), B, true, nullptr, ctx);
                    const double loss = 0.005 * net::nll_loss(ctx, labels);
                    if (grad) {
                        std::vector<double> dint(B * C), dg(C, 0.0), db(C, 0.0);
                        net::head_backward(mm, ctx, labels, dint.data(), dg.data(), db.data());
                        for (int c = 0; c < C; ++c) {
                            grad[model.layout.bn_gamma + c] += 0.005 * dg[c];
                            grad[model.layout.bn_beta + c] += 0.005 * db[c];
                        }
                        for (int b = 0; b < B; ++b) {
                            for (int c = 0; c < C; ++c)
                                sfs[b].tape.seed(sfs[b].integral_slots[c], 0.005 * dint[b * C + c]);
                            sfs[b].tape.backward();
                        }
                        for (int b = 0; b < B; ++b)
                            for (size_t i = 0; i < sg[b].size(); ++i) grad[i] += sg[b][i];
                    }
                    if (sig) {
                        uint64_t s = 1469598103934665603ull;
                        for (int b = 0; b < B; ++b)
                            s = (s ^ sfs[b].tape.signature()) * 1099511628211ull;
                        *sig = s;
                    }
                    return loss;
                };
                std::vector<double> analytic(model.layout.total, 0.0);
                loss_fn(model.params.data(), analytic.data(), nullptr);
                const ad::FdFn fn = [&](const double* p, uint64_t* sig) {
                    return loss_fn(p, nullptr, sig);
                };
                const ad::FdResult res =
                    ad::finite_difference_check(fn, model.params, 1e-5, analytic);
                worst = std::max(worst, res.max_rel_err);
                total_checked += res.checked;
                total_skipped += res.skipped;
            }
            std::printf("max relative error %.3g over %d parameters (%d near decision "
                        "boundaries skipped): %s\n",
                        worst, total_checked, total_skipped, worst < 1e-4 ? "PASS" : "FAIL");
            return worst < 1e-4 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
