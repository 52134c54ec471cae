#pragma once

#include <cstdint>
#include <vector>

#include "gmcn/activation.hpp"
#include "gmcn/reduction.hpp"
#include "gmcn/types.hpp"

namespace gmcn::ad {

// Gaussians on the tape arena: off is a double index, n a component count.
struct GaussRange {
    uint32_t off = 0;
    uint32_t n = 0;
};

enum class OpKind : uint8_t {
    MakeCov,
    Convolve,
    DenseFit,
    ParamRelu,
    EmFit,
    Gather,
    Rescale,
    Integrate,
    EvalPoint,
};

// Record of executed differentiable operations over one forward pass.
// Values are written into the arena as ops are recorded; backward() walks
// the records in reverse and accumulates cotangents in the parallel grad
// arena. Discrete choices (selections, sign masks, tree shape) are mixed
// into `signature` so derivative checks can detect decision boundaries.
class Tape {
public:
    explicit Tape(int dims) : dims_(dims) {}

    int dims() const { return dims_; }
    int gstride() const { return gaussian_stride(dims_); }

    double* val(uint32_t off) { return val_.data() + off; }
    const double* val(uint32_t off) const { return val_.data() + off; }
    double* grad(uint32_t off) { return grad_.data() + off; }

    GaussSpan span(GaussRange r) { return {dims_, val_.data() + r.off, static_cast<int>(r.n)}; }
    ConstGaussSpan cspan(GaussRange r) const {
        return {dims_, val_.data() + r.off, static_cast<int>(r.n)};
    }

    uint32_t alloc(uint32_t ndoubles);
    GaussRange alloc_gauss(uint32_t n) { return {alloc(n * gstride()), n}; }

    // constant inputs (no gradient unless bound explicitly)
    GaussRange load_gaussians(ConstGaussSpan src);
    uint32_t load_values(const double* src, uint32_t n);

    // after backward(), grad_out[i] += grad[off + i]
    void bind(uint32_t off, uint32_t n, double* grad_out);

    // ---- recorded operations (forward runs immediately) ----

    // raw kernel records [a, b(k), C'(k x k)] -> Gaussians with C = C'^T C' + eps I
    GaussRange make_covariance(uint32_t raw_off, uint32_t count, double eps,
                               GaussRange out = {});
    GaussRange convolve(GaussRange a, GaussRange b, GaussRange out = {});
    GaussRange dense_relu_fit(GaussRange a, const act::DenseFitConfig& cfg, GaussRange out = {});
    GaussRange param_relu(GaussRange a, GaussRange out = {});
    // targets gathered by arena offset; sel indexes into targets
    GaussRange em_fit(const std::vector<uint32_t>& targets, const std::vector<int>& sel,
                      const red::EmFitConfig& cfg, GaussRange out = {});
    // per-output source offset; kPad emits a zero-weight unit-covariance Gaussian
    static constexpr uint32_t kPad = UINT32_MAX;
    GaussRange gather(const std::vector<uint32_t>& src, GaussRange out = {});
    GaussRange rescale(GaussRange a, double* sigma_out = nullptr);
    uint32_t integrate(GaussRange a);
    uint32_t eval_point(GaussRange a, const double* x);

    // ---- backward ----
    void seed(uint32_t off, double g) { grad_[off] += g; }
    void backward();
    void zero_grad();

    uint64_t signature() const { return sig_; }
    void sig_mix(uint64_t v);
    size_t op_count() const { return ops_.size(); }

    // debug invariant: every arena double is written by at most one op
    bool validate_single_assignment() const;

private:
    struct Op {
        OpKind kind;
        GaussRange gout;
        uint32_t sout = 0;
        uint32_t payload = 0;
    };
    struct MakeCovPayload {
        uint32_t raw_off, count;
        double eps;
    };
    struct ConvPayload {
        GaussRange a, b;
    };
    struct DenseFitPayload {
        GaussRange a;
        act::DenseFitConfig cfg;
        act::DenseFitScratch scratch;
    };
    struct UnaryPayload {
        GaussRange a;
    };
    struct EmFitPayload {
        std::vector<uint32_t> targets;
        std::vector<int> sel;
        red::EmFitConfig cfg;
        red::EmFitFlags flags;
    };
    struct GatherPayload {
        std::vector<uint32_t> src;
    };
    struct RescalePayload {
        GaussRange a;
        double sigma = 1, tbar = 0;
    };
    struct EvalPayload {
        GaussRange a;
        double x[3];
    };
    struct Bind {
        uint32_t off, n;
        double* out;
    };

    GaussRange ensure_out(GaussRange out, uint32_t n);

    int dims_;
    std::vector<double> val_, grad_;
    std::vector<Op> ops_;
    std::vector<MakeCovPayload> makecov_;
    std::vector<ConvPayload> conv_;
    std::vector<DenseFitPayload> densefit_;
    std::vector<UnaryPayload> unary_;
    std::vector<EmFitPayload> emfit_;
    std::vector<GatherPayload> gather_;
    std::vector<RescalePayload> rescale_;
    std::vector<EvalPayload> evalp_;
    std::vector<Bind> binds_;
    uint64_t sig_ = 1469598103934665603ull;  // fnv offset basis
};

// Reductions recorded onto a tape. Both return exactly np components when
// np < in.n (zero-weight padded if the caches run short) and the input
// range unchanged when np >= in.n.
GaussRange record_modified_em(Tape& t, GaussRange in, int np, const red::EmFitConfig& cfg,
                              bool* padded = nullptr, int* real_count = nullptr);
GaussRange record_treehem(Tape& t, GaussRange in, int np, int T, const red::EmFitConfig& cfg,
                          red::TreeHemStats* stats = nullptr, bool* padded = nullptr,
                          int* real_count = nullptr);

}  // namespace gmcn::ad
