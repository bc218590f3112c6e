#pragma once

// Adaptive step-size unfolding network: K stages of
//   r = z - rho (.) Phi^T(Phi z - y)     (per-channel rho from the ASP subnetwork)
//   x = NLIA(r)                           (U-shaped learned prox built from NHAT blocks)
// chained by the FISTA momentum/extrapolation recurrences.
//
// Feature maps are [H, W, C] tensors; all learnable tensors live in a ParameterSet
// under hierarchical dotted names such as "stage0.nlia.enc0.nhat.nlha.pna.wq".

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "aspun/cassi.hpp"
#include "aspun/tensor.hpp"

namespace aspun::net {

enum class AttentionKind { pna, wmsa };

struct NetworkConfig {
    std::size_t stages = 3;
    std::size_t spectral_channels = 8;
    std::size_t base_channels = 16;
    std::size_t window_size = 4;
    std::size_t pna_pool = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_expansion = 2;
    std::size_t levels = 3;  // two encoder levels plus the bottleneck; fixed

    bool use_asp = true;
    bool use_isa = true;
    bool use_gla = true;
    bool use_pna = true;
    bool use_pna_transformer = true;
    AttentionKind attention = AttentionKind::pna;

    double asp_eps = 1e-4;
    std::uint64_t init_seed = 1;

    /// Pool factor actually used on keys/values (1 under WMSA).
    std::size_t key_pool() const noexcept { return attention == AttentionKind::wmsa ? 1 : pna_pool; }
    /// Spatial extents must be multiples of this.
    std::size_t spatial_multiple() const noexcept { return window_size << (levels - 1); }

    /// Throws ConfigError on inconsistent topology.
    void validate() const;
    /// Throws ShapeError when an H x W scene cannot pass through the U-shape.
    void validate_extent(std::size_t height, std::size_t width) const;
};

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
};

/// Ordered registry of learnable tensors; modules hold aliases of the same nodes.
class ParameterSet {
public:
    ad::Tensor add(std::string name, ad::Shape shape, std::vector<double> values);

    const std::vector<NamedTensor>& entries() const noexcept { return entries_; }
    bool contains(const std::string& name) const;
    ad::Tensor get(const std::string& name) const;
    /// Overwrites values in place; shapes must match.
    void assign(const std::string& name, std::span<const double> values);

    std::size_t scalar_count() const noexcept;
    /// Scalars under names starting with `prefix`.
    std::size_t scalar_count(const std::string& prefix) const;
    void zero_grad();

private:
    std::vector<NamedTensor> entries_;
};

/// Draws initial values; weights are uniform in +-sqrt(6 / (fan_in + fan_out)).
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}
    std::vector<double> uniform(std::size_t count, double bound);
    std::vector<double> glorot(std::size_t count, std::size_t fan_in, std::size_t fan_out);

private:
    std::mt19937_64 rng_;
};

/// Registration context handing out names and initial values.
class Builder {
public:
    Builder(ParameterSet& params, Initializer& init, std::string prefix = {})
        : params_(params), init_(init), prefix_(std::move(prefix)) {}

    Builder scope(const std::string& name) const;
    ad::Tensor weight(const std::string& name, ad::Shape shape, std::size_t fan_in, std::size_t fan_out);
    ad::Tensor constant(const std::string& name, ad::Shape shape, double value);
    ad::Tensor values(const std::string& name, ad::Shape shape, std::vector<double> v);

private:
    ParameterSet& params_;
    Initializer& init_;
    std::string prefix_;
};

// ---- building blocks -----------------------------------------------------------

/// Pointwise (1x1) projection over the last axis.
struct Linear {
    ad::Tensor weight;  // [in, out]
    ad::Tensor bias;    // [out], undefined when unbiased

    static Linear create(Builder b, std::size_t in, std::size_t out);
    /// Keys use this: a key bias only shifts every score of a query equally, so softmax ignores it.
    static Linear create_unbiased(Builder b, std::size_t in, std::size_t out);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

struct Conv {
    ad::Tensor weight;  // [k, k, in, out]
    ad::Tensor bias;
    ad::Conv2dOptions opts;

    static Conv create(Builder b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                       std::size_t padding);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

struct TransposedConv {
    ad::Tensor weight;  // [k, k, out, in]
    ad::Tensor bias;
    ad::Conv2dOptions opts;

    static TransposedConv create(Builder b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

struct LayerNorm {
    ad::Tensor gamma;
    ad::Tensor beta;

    static LayerNorm create(Builder b, std::size_t channels);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

/// Pooled non-local attention inside non-overlapping windows: queries from every
/// token, keys/values from the average-pooled window.
struct PooledAttention {
    std::size_t channels = 0, heads = 1, window = 1, pool = 1;
    bool transformer = true;
    Linear query, key, value, out;

    static PooledAttention create(Builder b, std::size_t channels, const NetworkConfig& cfg);
    ad::Tensor operator()(const ad::Tensor& x) const;
    /// Attention weights [windows, heads, window^2, (window/pool)^2] for inspection.
    ad::Tensor attention_weights(const ad::Tensor& x) const;
};

/// Gated local attention: sigmoid(pw(gelu(conv3x3(x)))) (.) pw(x).
struct GatedLocalAttention {
    Conv context_conv;
    Linear context_proj;
    Linear value_proj;

    static GatedLocalAttention create(Builder b, std::size_t channels);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

/// Hybrid attention: projection of the sum of the enabled PNA and GLA branches.
struct HybridAttention {
    bool has_pna = false, has_gla = false;
    PooledAttention pna;
    GatedLocalAttention gla;
    Linear proj;

    static HybridAttention create(Builder b, std::size_t channels, const NetworkConfig& cfg);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

struct GatedFeedForward {
    Linear gate;
    Linear value;
    Linear down;

    static GatedFeedForward create(Builder b, std::size_t channels, std::size_t expansion);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

/// u = x + NLHA(LN(x)); out = u + FFN(LN(u))
struct HybridTransformerBlock {
    LayerNorm norm1;
    HybridAttention attention;
    LayerNorm norm2;
    GatedFeedForward ffn;

    static HybridTransformerBlock create(Builder b, std::size_t channels, const NetworkConfig& cfg);
    ad::Tensor operator()(const ad::Tensor& x) const;
};

/// Inter-stage spectral attention: channel gates from the previous stage's pooled summary.
struct InterStageAttention {
    Linear fc1;
    Linear fc2;

    static InterStageAttention create(Builder b, std::size_t summary_channels, std::size_t channels);
    /// Gate values in (0, 1), shape [channels].
    ad::Tensor coefficients(const ad::Tensor& pooled_summary) const;
    /// Identity when `pooled_summary` is undefined (first stage).
    ad::Tensor operator()(const ad::Tensor& x, const ad::Tensor& pooled_summary) const;
};

struct NliaOutput {
    ad::Tensor x;
    ad::Tensor summary;  // bottleneck features handed to the next stage
};

/// U-shaped prox: embed, two encoder levels, bottleneck, two decoder levels, project back.
struct NonLocalAggregation {
    bool use_isa = true;
    Conv embed;
    HybridTransformerBlock enc0, enc1, bottleneck, dec1, dec0;
    InterStageAttention isa_enc0, isa_enc1, isa_bottleneck, isa_dec1, isa_dec0;
    Conv down0, down1;
    TransposedConv up1, up0;
    Linear fuse1, fuse0;
    Conv project;

    static NonLocalAggregation create(Builder b, const NetworkConfig& cfg);
    NliaOutput operator()(const ad::Tensor& r, const ad::Tensor& previous_summary) const;
};

/// Per-channel step sizes from the pooled gradient cube (or one learned scalar when ASP is off).
struct StepSizePerception {
    bool adaptive = true;
    std::size_t channels = 0;
    double eps = 1e-4;
    Linear fc1, fc2;
    ad::Tensor scalar_logit;

    static StepSizePerception create(Builder b, const NetworkConfig& cfg);
    /// rho, shape [C], strictly positive.
    ad::Tensor operator()(const ad::Tensor& gradient) const;
};

struct AspStepResult {
    ad::Tensor r;
    ad::Tensor rho;
};

/// Differentiable Phi and Phi^T. The mask is a constant.
ad::Tensor sense_forward(const ad::Tensor& cube, const cassi::CodedMask& mask, std::size_t step);
ad::Tensor sense_adjoint(const ad::Tensor& meas, const cassi::CodedMask& mask, std::size_t step,
                         std::size_t channels);

ad::Tensor cube_tensor(const cassi::SpectralCube& cube, bool requires_grad = false);
ad::Tensor measurement_tensor(const cassi::Measurement& meas);
cassi::SpectralCube to_cube(const ad::Tensor& t);

/// g = Phi^T(Phi z - y); rho = asp(g); r = z - rho (.) g
AspStepResult asp_step(const ad::Tensor& z, const ad::Tensor& y, const cassi::CodedMask& mask,
                       const cassi::DispersionSpec& spec, const StepSizePerception& asp);

struct Stage {
    StepSizePerception asp;
    NonLocalAggregation nlia;
};

struct UnfoldResult {
    ad::Tensor x;
    std::vector<ad::Tensor> step_sizes;  // per stage, [C]
    std::vector<ad::Tensor> iterates;    // x^k per stage
    std::vector<double> momentum;        // t^1 .. t^{K+1}
};

class Network {
public:
    explicit Network(const NetworkConfig& cfg);

    const NetworkConfig& config() const noexcept { return config_; }
    ParameterSet& parameters() noexcept { return params_; }
    const ParameterSet& parameters() const noexcept { return params_; }
    const std::vector<Stage>& stages() const noexcept { return stages_; }

    UnfoldResult unfold(const cassi::Measurement& y, const cassi::CodedMask& mask,
                        const cassi::DispersionSpec& spec) const;
    cassi::SpectralCube reconstruct(const cassi::Measurement& y, const cassi::CodedMask& mask,
                                    const cassi::DispersionSpec& spec) const;

private:
    NetworkConfig config_;
    ParameterSet params_;
    std::vector<Stage> stages_;
};

/// Overwrites every parameter with uniform(-bound, bound) noise (gamma keeps a +1 offset).
void randomize_parameters(ParameterSet& params, std::uint64_t seed, double bound);

/// Names of parameters that cannot receive a gradient by construction (first-stage ISA).
bool is_inert_parameter(const std::string& name);

}  // namespace aspun::net
