#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmcn/tape.hpp"
#include "gmcn/types.hpp"

namespace gmcn::net {

struct LayerSpec {
    int in_ch = 1;
    int out_ch = 1;
    int n_kernel = 5;
    int n_fit = 8;       // components after reduction
    bool reduce = true;
    bool rescale = true;
};

enum class ReduceMethod { TreeHem, ModifiedEm };
enum class Activation { DenseFit, ParamRelu };

struct ModelSpec {
    int dims = 2;
    int input_channels = 1;
    int input_comps = 16;
    std::vector<LayerSpec> layers;  // last layer's out_ch is the class count
    ReduceMethod reduce_method = ReduceMethod::TreeHem;
    int tree_t = 2;
    Activation activation = Activation::DenseFit;
    double kernel_eps = 0.01;
    red::EmFitConfig em;
    act::DenseFitConfig fit;

    int classes() const { return layers.empty() ? 0 : layers.back().out_ch; }
    int layer_input_comps(int l) const;  // component count entering layer l
    void validate() const;               // consecutive layers must chain
};

// Raw learnable kernel record: [a, b (k), C' (k x k row major)].
inline constexpr int kernel_raw_stride(int k) { return 1 + k + k * k; }

struct ParamLayout {
    std::vector<size_t> layer_off;  // raw kernels per layer, (out, in, comp) order
    size_t bn_gamma = 0, bn_beta = 0;
    size_t total = 0;
};
ParamLayout make_layout(const ModelSpec& spec);

struct BatchNormState {
    std::vector<double> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    long updates = 0;
};

struct Model {
    ModelSpec spec;
    ParamLayout layout;
    std::vector<double> params;
    BatchNormState bn;
};

// C = C'^T C' + eps I, always symmetric positive-definite.
void make_covariance(int k, const double* cfac, double eps, double* packed_out);

// Weights drawn from Normal(0.1, 1.0); one component at the origin, the
// rest on the radius-2.5 circle (2D, evenly spaced starting on +x) or
// uniformly random on the radius-2.5 sphere (3D); C' = (I + 0.05 R) * 0.7.
void init_kernels(const ModelSpec& spec, uint64_t seed, double* params);
Model build_model(const ModelSpec& spec, uint64_t seed);

// Materialized kernels of one layer as a MixtureBatch (out-channel = batch).
MixtureBatch materialize_kernels(const Model& model, int layer);

// sum of a_i^2 + mean((C_i - I) o (C_i - I)) over every kernel Gaussian
double weight_decay_loss(const Model& model);
// accumulates scale * d(weight_decay_loss)/d(params)
void weight_decay_grad(const Model& model, double scale, double* grad);

// ---- forward passes ----

struct SampleTrace {
    ad::GaussRange conv, fit, reduced;
    double sigma = 1.0;
};

// One sample's pass through all convolution blocks, recorded on its own
// tape; class-channel integrals land in scalar slots so the head can seed
// cotangents for the backward pass.
struct SampleForward {
    explicit SampleForward(int dims) : tape(dims) {}
    ad::Tape tape;
    std::vector<uint32_t> integral_slots;
    std::vector<double> integrals;
    std::vector<SampleTrace> traces;
};

// param_grad (layout.total doubles) receives kernel cotangents on
// tape.backward(); pass nullptr when gradients are not needed.
void sample_forward(const Model& model, const MixtureBatch& input, int b, SampleForward& sf,
                    double* param_grad, bool want_traces = false);

// ---- classifier head: integral -> batch norm -> log softmax ----

struct HeadContext {
    int batch = 0, classes = 0;
    bool used_batch_stats = false;
    std::vector<double> x;       // integrals, [b * C + c]
    std::vector<double> mean, istd;  // per class
    std::vector<double> xhat;
    std::vector<double> logp;    // log probabilities
};

// training with batch >= 2 uses batch statistics and updates the running
// ones; otherwise the running statistics are used.
void head_forward(const Model& model, const double* integrals, int batch, bool training,
                  BatchNormState* bn, HeadContext& ctx);
double nll_loss(const HeadContext& ctx, const int* labels);
// gradient of the mean NLL; dintegrals is batch x classes, dgamma/dbeta per class
void head_backward(const Model& model, const HeadContext& ctx, const int* labels,
                   double* dintegrals, double* dgamma, double* dbeta);

// Features with one channel per class -> log probabilities.
std::vector<double> classifier_forward(Model& model, const MixtureBatch& features,
                                       bool training);

// Full model: convolution blocks then the classifier head. Deterministic
// for fixed parameters; thread count only affects speed.
std::vector<double> model_forward(Model& model, const MixtureBatch& input, bool training,
                                  int threads = 1);

}  // namespace gmcn::net
