#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmcn/network.hpp"
#include "gmcn/toydata.hpp"

namespace gmcn::harness {

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 32;
    int epochs = 10;
    double sched_factor = 0.5;   // learning rate multiplier on plateau
    int sched_patience = 3;      // epochs without val-accuracy improvement
    double min_lr = 1e-5;
    double weight_decay_scale = 0.1;  // of the learning rate
    uint64_t seed = 1;
    int threads = 0;             // 0 = auto, 1 = deterministic
    std::string out_dir;         // empty: no metrics log / checkpoints
    bool log_rmse = true;
    int rmse_samples = 4000;
    double target_accuracy = -1; // stop early when the val accuracy reaches it
};

struct AdamState {
    std::vector<double> m, v;
    long t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct EvalResult {
    double accuracy = 0;
    std::vector<long> confusion;  // classes x classes, row = true label
};

struct TrainResult {
    double best_val_acc = 0;
    int best_epoch = -1;
    std::vector<double> epoch_loss;
    std::string checkpoint_path;
};

// One Adam step over a minibatch; returns total loss (mean NLL plus the
// weight decay term scaled by 0.1 lr). Aborts via exception on a
// non-finite loss, dumping the offending batch next to out_dir.
double train_step(net::Model& model, AdamState& adam, const MixtureBatch& batch,
                  const int* labels, double lr, double wd_scale, int threads,
                  const std::string& dump_dir = "");

TrainResult train(net::Model& model, AdamState& adam, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& cfg);

EvalResult evaluate(net::Model& model, const Dataset& data, int batch_size, int threads);

// ---- checkpoints (binary, versioned, double precision) ----

struct Checkpoint {
    net::Model model;
    AdamState adam;
    int epoch = 0;
    double best_acc = 0;
    double lr = 0;
    uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const net::Model& model, const AdamState& adam,
                     int epoch, double best_acc, double lr, uint64_t seed);
Checkpoint load_checkpoint(const std::string& path);

// Per-layer fitting error of one sample, measured by stratified sampling:
// all (reduction output vs relu of convolution output), relu (dense fit vs
// relu of convolution output), reduction (reduction output vs dense fit).
struct LayerRmse {
    double all = 0, relu = 0, reduction = 0;
};
std::vector<LayerRmse> layer_fitting_rmse(const net::Model& model, const MixtureBatch& input,
                                          int sample, int n_samples, uint64_t seed);

}  // namespace gmcn::harness
