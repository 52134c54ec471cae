#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gmcn/bench.hpp"
#include "gmcn/memcalc.hpp"
#include "gmcn/render.hpp"
#include "gmcn/serialize.hpp"
#include "gmcn/toydata.hpp"
#include "gmcn/train.hpp"

using namespace gmcn;

namespace {

net::ModelSpec tiny_spec() {
    net::ModelSpec spec;
    spec.dims = 2;
    spec.input_channels = 1;
    spec.input_comps = 16;
    spec.layers.push_back({1, 4, 3, 6, true, true});
    spec.layers.push_back({4, 3, 2, 6, false, false});
    return spec;
}

harness::Dataset subset(const harness::Dataset& ds, int count) {
    harness::Dataset out;
    out.mixtures = MixtureBatch(ds.mixtures.dims, count, ds.mixtures.channels, ds.mixtures.comps);
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + count);
    std::copy(ds.mixtures.data.begin(),
              ds.mixtures.data.begin() + out.mixtures.data.size(), out.mixtures.data.begin());
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("memcalc reproduces the reference configurations exactly") {
    // integrated convolution-fitting table (No = 2 Np)
    const harness::FootprintRow t5[5] = {
        {32, 1, 8, 128, 128, 64, 5},  {32, 8, 16, 64, 64, 32, 5}, {32, 16, 32, 32, 32, 16, 5},
        {32, 32, 64, 16, 16, 8, 5},   {32, 64, 10, 8, 8, 4, 5},
    };
    const long t5_expect[5][3] = {{40, 49152, 98384},
                                  {640, 49152, 99584},
                                  {2560, 49152, 103424},
                                  {10240, 49152, 118784},
                                  {3200, 3840, 14080}};
    const double t5_mb[5][2] = {
        {2.25, 3.75}, {2.28, 3.80}, {2.37, 3.95}, {2.72, 4.53}, {0.32, 0.54}};
    for (int r = 0; r < 5; ++r) {
        const harness::FootprintResult res = harness::memcalc_row(t5[r]);
        CHECK(res.kernels == t5_expect[r][0]);
        CHECK(res.data == t5_expect[r][1]);
        CHECK(res.gaussians == t5_expect[r][2]);
        CHECK(std::fabs(res.mb_2d - t5_mb[r][0]) < 0.01);
        CHECK(std::fabs(res.mb_3d - t5_mb[r][1]) < 0.01);
    }

    // explicit-intermediate table (No = Fi Ni Nk)
    const harness::FootprintRow t6[5] = {
        {32, 1, 8, 128, 640, 64, 5},   {32, 8, 16, 64, 2560, 32, 5},
        {32, 16, 32, 32, 2560, 16, 5}, {32, 32, 64, 16, 2560, 8, 5},
        {32, 64, 10, 8, 2560, 4, 5},
    };
    const long t6_expect[5][3] = {{40, 180224, 360528},
                                  {640, 1327104, 2655488},
                                  {2560, 2637824, 5280768},
                                  {10240, 5259264, 10539008},
                                  {3200, 820480, 1647360}};
    for (int r = 0; r < 5; ++r) {
        const harness::FootprintResult res = harness::memcalc_row(t6[r]);
        CHECK(res.kernels == t6_expect[r][0]);
        CHECK(res.data == t6_expect[r][1]);
        CHECK(res.gaussians == t6_expect[r][2]);
    }

    // B = 0 boundary: no data, only kernels
    const harness::FootprintResult z = harness::memcalc_row({0, 2, 3, 8, 8, 4, 5});
    CHECK(z.data == 0);
    CHECK(z.gaussians == 2 * z.kernels);

    const std::string table = harness::memcalc_table({t5[0], t5[1]});
    CHECK(table.find("98384") != std::string::npos);
    CHECK(table.find("total") != std::string::npos);
}

TEST_CASE("render writes valid P6 with the expected hot spot") {
    const std::string dir = std::filesystem::temp_directory_path().string();
    const std::string path = dir + "/gmcn_render_test.ppm";
    gm::BBox box;
    box.lo[0] = box.lo[1] = -2;
    box.hi[0] = box.hi[1] = 2;

    // zero mixture: uniform mid color
    Mixture zero(2, 1);
    zero.g(0)[3] = zero.g(0)[5] = 1;
    harness::render_mixture(zero.span(), path, box, 16, 16);
    {
        std::ifstream is(path, std::ios::binary);
        std::string magic;
        int w, h, maxv;
        is >> magic >> w >> h >> maxv;
        CHECK(magic == "P6");
        CHECK(w == 16);
        CHECK(h == 16);
        CHECK(maxv == 255);
        is.get();
        std::vector<unsigned char> px(16 * 16 * 3);
        CHECK(!!is.read(reinterpret_cast<char*>(px.data()), px.size()));
        for (unsigned char v : px) CHECK(static_cast<int>(v) == 255);  // white everywhere
        CHECK(is.peek() == EOF);
    }

    // single positive Gaussian: the reddest pixel sits on the mean
    Mixture g(2, 1);
    g.g(0)[0] = 1;
    g.g(0)[1] = 0.5;
    g.g(0)[2] = -0.25;
    g.g(0)[3] = g.g(0)[5] = 0.2;
    harness::render_mixture(g.span(), path, box, 64, 64);
    {
        std::ifstream is(path, std::ios::binary);
        std::string magic;
        int w, h, maxv;
        is >> magic >> w >> h >> maxv;
        is.get();
        std::vector<unsigned char> px(static_cast<size_t>(w) * h * 3);
        REQUIRE(!!is.read(reinterpret_cast<char*>(px.data()), px.size()));
        int best = 0, arg = -1;
        for (int i = 0; i < w * h; ++i) {
            const int redness = px[i * 3] - px[i * 3 + 1];
            if (redness > best) {
                best = redness;
                arg = i;
            }
        }
        REQUIRE(arg >= 0);
        const double cell = 4.0 / 64;
        const double cx = -2 + (arg % w + 0.5) * cell;
        const double cy = 2 - (arg / w + 0.5) * cell;  // +y rendered upward
        CHECK(std::fabs(cx - 0.5) <= cell);
        CHECK(std::fabs(cy + 0.25) <= cell);
    }
    std::filesystem::remove(path);
}

TEST_CASE("toy dataset shape and normalization") {
    const harness::Dataset ds = harness::make_toy_dataset(30, 9);
    CHECK(ds.mixtures.batch == 30);
    CHECK(ds.mixtures.comps == harness::kToyComps);
    int counts[3] = {0, 0, 0};
    for (int l : ds.labels) ++counts[l];
    CHECK(counts[0] == 10);
    CHECK(counts[1] == 10);
    CHECK(counts[2] == 10);
    double mean = 0;
    for (int b = 0; b < 30; ++b) mean += gm::span_integral(ds.mixtures.channel(b, 0));
    CHECK(mean / 30 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("training learns a constant-label dataset within 3 epochs") {
    harness::Dataset ds = harness::make_toy_dataset(45, 17);
    for (int& l : ds.labels) l = 0;

    net::Model model = net::build_model(tiny_spec(), 4);
    harness::AdamState adam;
    harness::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 5;
    cfg.lr = 0.02;
    cfg.threads = 2;
    cfg.log_rmse = false;
    harness::train(model, adam, ds, ds, cfg);
    const harness::EvalResult ev = harness::evaluate(model, ds, 15, 2);
    CHECK(ev.accuracy >= 0.99);
}

TEST_CASE("loss drops after the first epoch on the toy task") {
    const harness::Dataset ds = harness::make_toy_dataset(60, 23);
    net::Model model = net::build_model(tiny_spec(), 4);
    harness::AdamState adam;
    harness::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 15;
    cfg.threads = 2;
    cfg.log_rmse = false;
    cfg.seed = 5;
    const harness::TrainResult res = harness::train(model, adam, ds, ds, cfg);
    REQUIRE(res.epoch_loss.size() == 2);
    CHECK(res.epoch_loss[1] < res.epoch_loss[0]);
}

TEST_CASE("evaluate: memorized set, confusion sums, batch-size invariance") {
    const harness::Dataset ds = subset(harness::make_toy_dataset(12, 31), 10);
    net::Model model = net::build_model(tiny_spec(), 7);
    harness::AdamState adam;
    harness::TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 10;
    cfg.lr = 0.02;
    cfg.sched_patience = 1000;  // keep the rate flat while memorizing
    cfg.threads = 2;
    cfg.log_rmse = false;
    cfg.target_accuracy = 1.0;
    harness::train(model, adam, ds, ds, cfg);

    const harness::EvalResult e1 = harness::evaluate(model, ds, 32, 2);
    CHECK(e1.accuracy == 1.0);

    // confusion rows sum to the per-class sample counts
    int counts[3] = {0, 0, 0};
    for (int l : ds.labels) ++counts[l];
    for (int c = 0; c < 3; ++c) {
        long row = 0;
        for (int p = 0; p < 3; ++p) row += e1.confusion[c * 3 + p];
        CHECK(row == counts[c]);
    }

    // accuracy invariant to the evaluation batch size
    const harness::EvalResult e2 = harness::evaluate(model, ds, 1, 1);
    CHECK(e2.accuracy == e1.accuracy);
    CHECK(e2.confusion == e1.confusion);
}

TEST_CASE("checkpoint round trip and bit-identical resume") {
    const harness::Dataset ds = harness::make_toy_dataset(30, 41);
    net::Model model = net::build_model(tiny_spec(), 11);
    harness::AdamState adam;
    harness::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 10;
    cfg.threads = 1;
    cfg.log_rmse = false;
    harness::train(model, adam, ds, ds, cfg);

    const std::string path =
        std::filesystem::temp_directory_path().string() + "/gmcn_test.ckpt";
    harness::save_checkpoint(path, model, adam, 1, 0.5, 1e-3, 42);
    harness::Checkpoint ck = harness::load_checkpoint(path);
    CHECK(ck.model.params == model.params);
    CHECK(ck.adam.m == adam.m);
    CHECK(ck.adam.v == adam.v);
    CHECK(ck.model.bn.running_mean == model.bn.running_mean);
    CHECK(ck.epoch == 1);
    CHECK(ck.seed == 42);

    // the restored state reproduces the next training step bit for bit
    MixtureBatch batch(2, 10, 1, 16);
    std::vector<int> labels(10);
    for (int b = 0; b < 10; ++b) {
        labels[b] = ds.labels[b];
        std::copy(ds.mixtures.data.begin() + ds.mixtures.channel_offset(b, 0),
                  ds.mixtures.data.begin() + ds.mixtures.channel_offset(b, 0) + 16 * 6,
                  batch.data.begin() + batch.channel_offset(b, 0));
    }
    const double loss_a =
        harness::train_step(model, adam, batch, labels.data(), 1e-3, 0.1, 1);
    const double loss_b =
        harness::train_step(ck.model, ck.adam, batch, labels.data(), 1e-3, 0.1, 1);
    CHECK(loss_a == loss_b);
    CHECK(model.params == ck.model.params);
    std::filesystem::remove(path);
}

TEST_CASE("training is deterministic and thread-count independent") {
    const harness::Dataset ds = harness::make_toy_dataset(24, 51);
    auto run = [&](int threads) {
        net::Model model = net::build_model(tiny_spec(), 13);
        harness::AdamState adam;
        harness::TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.threads = threads;
        cfg.log_rmse = false;
        harness::train(model, adam, ds, ds, cfg);
        return model.params;
    };
    const auto p1 = run(1);
    const auto p2 = run(1);
    CHECK(p1 == p2);
    const auto p4 = run(4);
    CHECK(p1 == p4);  // ordered reductions make results thread-count independent
}

TEST_CASE("train aborts on non-finite loss with a diagnostic dump") {
    harness::Dataset ds = harness::make_toy_dataset(8, 61);
    net::Model model = net::build_model(tiny_spec(), 15);
    model.params[0] = std::numeric_limits<double>::quiet_NaN();
    harness::AdamState adam;
    MixtureBatch batch = ds.mixtures;
    const std::string dump =
        std::filesystem::temp_directory_path().string() + "/gmcn_dump_test";
    CHECK_THROWS_AS(harness::train_step(model, adam, batch, ds.labels.data(), 1e-3, 0.1, 1,
                                        dump),
                    std::runtime_error);
    CHECK(std::filesystem::exists(dump + "/diverged_batch.gmix"));
    std::filesystem::remove_all(dump);
}

TEST_CASE("metrics log lines are monotone in epoch and rmse metrics appear") {
    const harness::Dataset ds = harness::make_toy_dataset(16, 71);
    net::Model model = net::build_model(tiny_spec(), 17);
    harness::AdamState adam;
    harness::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.threads = 2;
    cfg.rmse_samples = 500;
    cfg.out_dir = std::filesystem::temp_directory_path().string() + "/gmcn_train_test";
    std::filesystem::remove_all(cfg.out_dir);
    harness::train(model, adam, ds, ds, cfg);

    std::ifstream log(cfg.out_dir + "/metrics.log");
    REQUIRE(!!log);
    int last_epoch = -1;
    bool saw_rmse = false, saw_acc = false;
    std::string line;
    while (std::getline(log, line)) {
        int epoch;
        char split[32], metric[64];
        double value;
        REQUIRE(std::sscanf(line.c_str(), "%d %31s %63s %lf", &epoch, split, metric, &value) == 4);
        CHECK(epoch >= last_epoch);
        last_epoch = epoch;
        if (std::string(metric).rfind("rmse_layer", 0) == 0) saw_rmse = true;
        if (std::string(metric) == "accuracy") saw_acc = true;
    }
    CHECK(saw_rmse);
    CHECK(saw_acc);
    CHECK(std::filesystem::exists(cfg.out_dir + "/best.ckpt"));
    std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("bench_fitting reports all three error splits per method") {
    harness::BenchConfig cfg;
    cfg.n = 24;
    cfg.mixtures = 2;
    cfg.np = 6;
    cfg.rmse_samples = 1500;
    const std::string report = harness::bench_fitting(cfg);
    CHECK(report.find("rmse_all") != std::string::npos);
    CHECK(report.find("rmse_relu") != std::string::npos);
    CHECK(report.find("rmse_red") != std::string::npos);
    CHECK(report.find("dense-heuristic") != std::string::npos);
    CHECK(report.find("least-squares") != std::string::npos);
    CHECK(report.find("modified-em") != std::string::npos);
    CHECK(report.find("treehem") != std::string::npos);
}

TEST_SUITE_END();
