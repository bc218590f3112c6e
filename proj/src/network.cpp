#include "aspun/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "aspun/errors.hpp"
#include "aspun/fista.hpp"

namespace aspun::net {

using ad::Shape;
using ad::Tensor;

namespace {

double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

// ---- configuration ---------------------------------------------------------------

void NetworkConfig::validate() const {
    if (stages < 1) throw ConfigError("net.stages must be >= 1");
    if (spectral_channels < 1) throw ConfigError("net.spectral_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("net.base_channels must be >= 1");
    if (levels != 3) throw ConfigError("net.levels is fixed at 3");
    if (window_size < 1) throw ConfigError("net.window_size must be >= 1");
    if (pna_pool < 1 || window_size % pna_pool != 0) {
        throw ConfigError("net.pna_pool must divide net.window_size");
    }
    if (num_heads < 1 || base_channels % num_heads != 0) {
        throw ConfigError("net.heads must divide net.base_channels");
    }
    if (ffn_expansion < 1) throw ConfigError("net.ffn_expansion must be >= 1");
    if (!use_pna && !use_gla) throw ConfigError("hybrid attention needs at least one of PNA and GLA enabled");
    if (!(asp_eps > 0.0)) throw ConfigError("asp eps must be > 0");
}

void NetworkConfig::validate_extent(std::size_t height, std::size_t width) const {
    const std::size_t m = spatial_multiple();
    if (height == 0 || width == 0 || height % m != 0 || width % m != 0) {
        throw ShapeError("scene " + std::to_string(height) + "x" + std::to_string(width) +
                         " must have extents divisible by window * 2^(levels-1) = " + std::to_string(m));
    }
}

// ---- parameters ------------------------------------------------------------------

Tensor ParameterSet::add(std::string name, Shape shape, std::vector<double> values) {
    if (contains(name)) throw std::logic_error("duplicate parameter name " + name);
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    entries_.push_back({std::move(name), t});
    return t;
}

bool ParameterSet::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
}

Tensor ParameterSet::get(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.tensor;
    }
    throw std::out_of_range("no parameter named " + name);
}

void ParameterSet::assign(const std::string& name, std::span<const double> values) {
    Tensor t = get(name);
    if (values.size() != t.size()) {
        throw ShapeError("parameter " + name + " holds " + std::to_string(t.size()) + " values, got " +
                         std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
}

std::size_t ParameterSet::scalar_count() const noexcept { return scalar_count(""); }

std::size_t ParameterSet::scalar_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.tensor.size();
    }
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<double> Initializer::uniform(std::size_t count, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(count);
    for (double& x : v) x = dist(rng_);
    return v;
}

std::vector<double> Initializer::glorot(std::size_t count, std::size_t fan_in, std::size_t fan_out) {
    return uniform(count, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

Builder Builder::scope(const std::string& name) const { return Builder(params_, init_, prefix_ + name + "."); }

Tensor Builder::weight(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const auto n = ad::numel(shape);
    return params_.add(prefix_ + name, std::move(shape), init_.glorot(n, fan_in, fan_out));
}

Tensor Builder::constant(const std::string& name, Shape shape, double value) {
    const auto n = ad::numel(shape);
    return params_.add(prefix_ + name, std::move(shape), std::vector<double>(n, value));
}

Tensor Builder::values(const std::string& name, Shape shape, std::vector<double> v) {
    return params_.add(prefix_ + name, std::move(shape), std::move(v));
}

void randomize_parameters(ParameterSet& params, std::uint64_t seed, double bound) {
    Initializer init(seed);
    for (const auto& e : params.entries()) {
        auto v = init.uniform(e.tensor.size(), bound);
        const bool is_gain = e.name.size() >= 6 && e.name.compare(e.name.size() - 6, 6, ".gamma") == 0;
        if (is_gain) {
            for (double& x : v) x += 1.0;
        }
        params.assign(e.name, v);
    }
}

bool is_inert_parameter(const std::string& name) {
    return name.rfind("stage0.", 0) == 0 && name.find(".isa_") != std::string::npos;
}

// ---- blocks ----------------------------------------------------------------------

Linear Linear::create(Builder b, std::size_t in, std::size_t out) {
    return Linear{b.weight("weight", {in, out}, in, out), b.constant("bias", {out}, 0.0)};
}

Linear Linear::create_unbiased(Builder b, std::size_t in, std::size_t out) {
    return Linear{b.weight("weight", {in, out}, in, out), Tensor()};
}

Tensor Linear::operator()(const Tensor& x) const {
    if (x.rank() == 1) return reshape((*this)(reshape(x, {1, x.size()})), {weight.shape()[1]});
    const Tensor y = ad::matmul(x, weight);
    return bias.defined() ? ad::add(y, bias) : y;
}

Conv Conv::create(Builder b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                  std::size_t padding) {
    return Conv{b.weight("weight", {kernel, kernel, in, out}, kernel * kernel * in, kernel * kernel * out),
                b.constant("bias", {out}, 0.0), ad::Conv2dOptions{stride, padding, 1}};
}

Tensor Conv::operator()(const Tensor& x) const { return ad::conv2d(x, weight, bias, opts); }

TransposedConv TransposedConv::create(Builder b, std::size_t in, std::size_t out, std::size_t kernel,
                                      std::size_t stride) {
    return TransposedConv{b.weight("weight", {kernel, kernel, out, in}, kernel * kernel * in, kernel * kernel * out),
                          b.constant("bias", {out}, 0.0), ad::Conv2dOptions{stride, 0, 1}};
}

Tensor TransposedConv::operator()(const Tensor& x) const { return ad::transposed_conv2d(x, weight, bias, opts); }

LayerNorm LayerNorm::create(Builder b, std::size_t channels) {
    return LayerNorm{b.constant("gamma", {channels}, 1.0), b.constant("beta", {channels}, 0.0)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }

PooledAttention PooledAttention::create(Builder b, std::size_t channels, const NetworkConfig& cfg) {
    PooledAttention a;
    a.channels = channels;
    a.heads = cfg.num_heads;
    a.window = cfg.window_size;
    a.pool = cfg.key_pool();
    a.transformer = cfg.use_pna_transformer;
    if (a.transformer) {
        a.query = Linear::create(b.scope("query"), channels, channels);
        a.key = Linear::create_unbiased(b.scope("key"), channels, channels);
    }
    a.value = Linear::create(b.scope("value"), channels, channels);
    a.out = Linear::create(b.scope("out"), channels, channels);
    return a;
}

Tensor PooledAttention::attention_weights(const Tensor& x) const {
    if (!transformer) throw std::logic_error("attention weights requested with the transformer disabled");
    const std::size_t T = window * window;
    const std::size_t Tk = (window / pool) * (window / pool);
    const std::size_t dh = channels / heads;
    Tensor q = ad::window_partition(query(x), window);
    const std::size_t nw = q.shape()[0];
    q = ad::permute(ad::reshape(q, {nw, T, heads, dh}), {0, 2, 1, 3});
    const Tensor src = pool > 1 ? ad::avg_pool2d(x, pool, pool) : x;
    Tensor k = ad::window_partition(key(src), window / pool);
    k = ad::permute(ad::reshape(k, {nw, Tk, heads, dh}), {0, 2, 3, 1});
    const Tensor scores = ad::scale(ad::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    return ad::softmax(scores, -1);
}

Tensor PooledAttention::operator()(const Tensor& x) const {
    if (x.rank() != 3 || x.shape()[2] != channels) {
        throw ShapeError("pooled attention expects [H, W, " + std::to_string(channels) + "], got " +
                         ad::to_string(x.shape()));
    }
    if (!transformer) return out(value(x));
    const std::size_t H = x.shape()[0], W = x.shape()[1];
    const std::size_t Tk = (window / pool) * (window / pool);
    const std::size_t dh = channels / heads;
    const Tensor weights = attention_weights(x);
    const std::size_t nw = weights.shape()[0];
    const Tensor src = pool > 1 ? ad::avg_pool2d(x, pool, pool) : x;
    Tensor v = ad::window_partition(value(src), window / pool);
    v = ad::permute(ad::reshape(v, {nw, Tk, heads, dh}), {0, 2, 1, 3});
    Tensor o = ad::permute(ad::matmul(weights, v), {0, 2, 1, 3});
    o = ad::reshape(o, {nw, window * window, channels});
    return out(ad::window_merge(o, H, W, window));
}

GatedLocalAttention GatedLocalAttention::create(Builder b, std::size_t channels) {
    return GatedLocalAttention{Conv::create(b.scope("context_conv"), channels, channels, 3, 1, 1),
                               Linear::create(b.scope("context_proj"), channels, channels),
                               Linear::create(b.scope("value_proj"), channels, channels)};
}

Tensor GatedLocalAttention::operator()(const Tensor& x) const {
    const Tensor score = ad::sigmoid(context_proj(ad::gelu(context_conv(x))));
    return ad::mul(score, value_proj(x));
}

HybridAttention HybridAttention::create(Builder b, std::size_t channels, const NetworkConfig& cfg) {
    HybridAttention h;
    h.has_pna = cfg.use_pna;
    h.has_gla = cfg.use_gla;
    if (h.has_pna) h.pna = PooledAttention::create(b.scope("pna"), channels, cfg);
    if (h.has_gla) h.gla = GatedLocalAttention::create(b.scope("gla"), channels);
    h.proj = Linear::create(b.scope("proj"), channels, channels);
    return h;
}

Tensor HybridAttention::operator()(const Tensor& x) const {
    Tensor mixed;
    if (has_pna) mixed = pna(x);
    if (has_gla) mixed = mixed.defined() ? ad::add(mixed, gla(x)) : gla(x);
    if (!mixed.defined()) throw ConfigError("hybrid attention has no enabled branch");
    return proj(mixed);
}

GatedFeedForward GatedFeedForward::create(Builder b, std::size_t channels, std::size_t expansion) {
    const std::size_t hidden = channels * expansion;
    return GatedFeedForward{Linear::create(b.scope("gate"), channels, hidden),
                            Linear::create(b.scope("value"), channels, hidden),
                            Linear::create(b.scope("down"), hidden, channels)};
}

Tensor GatedFeedForward::operator()(const Tensor& x) const {
    return down(ad::mul(ad::gelu(gate(x)), value(x)));
}

HybridTransformerBlock HybridTransformerBlock::create(Builder b, std::size_t channels, const NetworkConfig& cfg) {
    return HybridTransformerBlock{LayerNorm::create(b.scope("norm1"), channels),
                                  HybridAttention::create(b.scope("nlha"), channels, cfg),
                                  LayerNorm::create(b.scope("norm2"), channels),
                                  GatedFeedForward::create(b.scope("ffn"), channels, cfg.ffn_expansion)};
}

Tensor HybridTransformerBlock::operator()(const Tensor& x) const {
    const Tensor u = ad::add(x, attention(norm1(x)));
    return ad::add(u, ffn(norm2(u)));
}

InterStageAttention InterStageAttention::create(Builder b, std::size_t summary_channels, std::size_t channels) {
    return InterStageAttention{Linear::create(b.scope("fc1"), summary_channels, channels),
                               Linear::create(b.scope("fc2"), channels, channels)};
}

Tensor InterStageAttention::coefficients(const Tensor& pooled_summary) const {
    return ad::sigmoid(fc2(ad::gelu(fc1(pooled_summary))));
}

Tensor InterStageAttention::operator()(const Tensor& x, const Tensor& pooled_summary) const {
    if (!pooled_summary.defined()) return x;
    return ad::mul(x, coefficients(pooled_summary));
}

NonLocalAggregation NonLocalAggregation::create(Builder b, const NetworkConfig& cfg) {
    const std::size_t c0 = cfg.base_channels, c1 = 2 * c0, c2 = 4 * c0;
    NonLocalAggregation n;
    n.use_isa = cfg.use_isa;
    n.embed = Conv::create(b.scope("embed"), cfg.spectral_channels, c0, 3, 1, 1);
    n.enc0 = HybridTransformerBlock::create(b.scope("enc0"), c0, cfg);
    n.down0 = Conv::create(b.scope("down0"), c0, c1, 4, 2, 1);
    n.enc1 = HybridTransformerBlock::create(b.scope("enc1"), c1, cfg);
    n.down1 = Conv::create(b.scope("down1"), c1, c2, 4, 2, 1);
    n.bottleneck = HybridTransformerBlock::create(b.scope("bottleneck"), c2, cfg);
    n.up1 = TransposedConv::create(b.scope("up1"), c2, c1, 2, 2);
    n.fuse1 = Linear::create(b.scope("fuse1"), 2 * c1, c1);
    n.dec1 = HybridTransformerBlock::create(b.scope("dec1"), c1, cfg);
    n.up0 = TransposedConv::create(b.scope("up0"), c1, c0, 2, 2);
    n.fuse0 = Linear::create(b.scope("fuse0"), 2 * c0, c0);
    n.dec0 = HybridTransformerBlock::create(b.scope("dec0"), c0, cfg);
    if (n.use_isa) {
        n.isa_enc0 = InterStageAttention::create(b.scope("isa_enc0"), c2, c0);
        n.isa_enc1 = InterStageAttention::create(b.scope("isa_enc1"), c2, c1);
        n.isa_bottleneck = InterStageAttention::create(b.scope("isa_bottleneck"), c2, c2);
        n.isa_dec1 = InterStageAttention::create(b.scope("isa_dec1"), c2, c1);
        n.isa_dec0 = InterStageAttention::create(b.scope("isa_dec0"), c2, c0);
    }
    // Zero output projection: a fresh stage is the identity prox x = r.
    const std::size_t C = cfg.spectral_channels;
    n.project = Conv{b.constant("project.weight", {3, 3, c0, C}, 0.0), b.constant("project.bias", {C}, 0.0),
                     ad::Conv2dOptions{1, 1, 1}};
    return n;
}

NliaOutput NonLocalAggregation::operator()(const Tensor& r, const Tensor& previous_summary) const {
    const Tensor pooled =
        use_isa && previous_summary.defined() ? ad::global_avg_pool(previous_summary) : Tensor();
    auto gate = [&](const InterStageAttention& isa, const Tensor& f) { return use_isa ? isa(f, pooled) : f; };

    const Tensor f0 = gate(isa_enc0, enc0(embed(r)));
    const Tensor f1 = gate(isa_enc1, enc1(down0(f0)));
    const Tensor f2 = gate(isa_bottleneck, bottleneck(down1(f1)));
    const Tensor g1 = gate(isa_dec1, dec1(fuse1(ad::concat({up1(f2), f1}, -1))));
    const Tensor g0 = gate(isa_dec0, dec0(fuse0(ad::concat({up0(g1), f0}, -1))));
    return NliaOutput{ad::add(r, project(g0)), f2};
}

StepSizePerception StepSizePerception::create(Builder b, const NetworkConfig& cfg) {
    StepSizePerception s;
    s.adaptive = cfg.use_asp;
    s.channels = cfg.spectral_channels;
    s.eps = cfg.asp_eps;
    const std::size_t C = cfg.spectral_channels;
    // Start near rho = 1/C, a safe step for any [0, 1] mask (||Phi||^2 <= C).
    const double logit = softplus_inverse(1.0 / static_cast<double>(C) - cfg.asp_eps);
    if (s.adaptive) {
        s.fc1 = Linear::create(b.scope("fc1"), C, 4 * C);
        s.fc2 = Linear{b.weight("fc2.weight", {4 * C, C}, 4 * C, C), b.constant("fc2.bias", {C}, logit)};
    } else {
        s.scalar_logit = b.constant("logit", {1}, logit);
    }
    return s;
}

Tensor StepSizePerception::operator()(const Tensor& gradient) const {
    if (!adaptive) {
        const Tensor rho = ad::add_scalar(ad::softplus(scalar_logit), eps);
        return ad::mul(Tensor::full({channels}, 1.0), rho);
    }
    const Tensor pooled = ad::global_avg_pool(gradient);
    return ad::add_scalar(ad::softplus(fc2(ad::gelu(fc1(pooled)))), eps);
}

// ---- sensing ---------------------------------------------------------------------

Tensor sense_forward(const Tensor& cube, const cassi::CodedMask& mask, std::size_t step) {
    if (cube.rank() != 3 || cube.shape()[0] != mask.height() || cube.shape()[1] != mask.width()) {
        throw ShapeError("sense_forward: cube " + ad::to_string(cube.shape()) + " does not match the mask");
    }
    const cassi::CubeShape shape{cube.shape()[0], cube.shape()[1], cube.shape()[2]};
    const std::size_t wm = cassi::measurement_width(shape.width, shape.channels, step);
    std::vector<double> out(shape.height * wm);
    cassi::apply_forward(cube.data(), shape, mask.values(), step, out);
    Tensor result = Tensor::from({shape.height, wm}, std::move(out));
    if (!cube.requires_grad()) return result;
    // Phi is linear with a constant mask: its backward is Phi^T.
    std::vector<double> m(mask.values().begin(), mask.values().end());
    ad::Node* cn = cube.node();
    ad::Node* rn = result.node();
    rn->requires_grad = true;
    rn->op = "sense_forward";
    rn->inputs.push_back(cube.node_ptr());
    rn->backward = [cn, shape, m = std::move(m), step](ad::Node& self) {
        std::vector<double> g(shape.size());
        cassi::apply_adjoint(self.grad, shape, m, step, g);
        auto& gc = cn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gc[i] += g[i];
    };
    return result;
}

Tensor sense_adjoint(const Tensor& meas, const cassi::CodedMask& mask, std::size_t step, std::size_t channels) {
    const cassi::CubeShape shape{mask.height(), mask.width(), channels};
    if (meas.rank() != 2 || meas.shape()[0] != shape.height ||
        meas.shape()[1] != cassi::measurement_width(shape.width, channels, step)) {
        throw ShapeError("sense_adjoint: measurement " + ad::to_string(meas.shape()) + " does not match the mask");
    }
    std::vector<double> out(shape.size());
    cassi::apply_adjoint(meas.data(), shape, mask.values(), step, out);
    Tensor result = Tensor::from({shape.height, shape.width, channels}, std::move(out));
    if (!meas.requires_grad()) return result;
    std::vector<double> m(mask.values().begin(), mask.values().end());
    ad::Node* mn = meas.node();
    ad::Node* rn = result.node();
    rn->requires_grad = true;
    rn->op = "sense_adjoint";
    rn->inputs.push_back(meas.node_ptr());
    rn->backward = [mn, shape, m = std::move(m), step](ad::Node& self) {
        std::vector<double> g(mn->value.size());
        cassi::apply_forward(self.grad, shape, m, step, g);
        auto& gm = mn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    };
    return result;
}

Tensor cube_tensor(const cassi::SpectralCube& cube, bool requires_grad) {
    return Tensor::from({cube.height(), cube.width(), cube.channels()}, cube.values(), requires_grad);
}

Tensor measurement_tensor(const cassi::Measurement& meas) {
    return Tensor::from({meas.height(), meas.width()}, meas.values());
}

cassi::SpectralCube to_cube(const Tensor& t) {
    if (t.rank() != 3) throw ShapeError("to_cube expects [H, W, C], got " + ad::to_string(t.shape()));
    return cassi::SpectralCube(t.shape()[0], t.shape()[1], t.shape()[2],
                               std::vector<double>(t.data().begin(), t.data().end()));
}

AspStepResult asp_step(const Tensor& z, const Tensor& y, const cassi::CodedMask& mask,
                       const cassi::DispersionSpec& spec, const StepSizePerception& asp) {
    const std::size_t C = z.shape()[2];
    spec.validate(C);
    const Tensor residual = ad::sub(sense_forward(z, mask, spec.step), y);
    const Tensor g = sense_adjoint(residual, mask, spec.step, C);
    const Tensor rho = asp(g);
    return AspStepResult{ad::sub(z, ad::mul(g, rho)), rho};
}

// ---- network ---------------------------------------------------------------------

Network::Network(const NetworkConfig& cfg) : config_(cfg) {
    config_.validate();
    Initializer init(config_.init_seed);
    for (std::size_t k = 0; k < config_.stages; ++k) {
        Builder b = Builder(params_, init).scope("stage" + std::to_string(k));
        Stage s;
        s.asp = StepSizePerception::create(b.scope("asp"), config_);
        s.nlia = NonLocalAggregation::create(b.scope("nlia"), config_);
        stages_.push_back(std::move(s));
    }
}

UnfoldResult Network::unfold(const cassi::Measurement& y, const cassi::CodedMask& mask,
                             const cassi::DispersionSpec& spec) const {
    const std::size_t C = config_.spectral_channels;
    spec.validate(C);
    if (y.height() != mask.height() || y.width() != cassi::measurement_width(mask.width(), C, spec.step)) {
        throw ShapeError("measurement " + std::to_string(y.height()) + "x" + std::to_string(y.width()) +
                         " inconsistent with mask " + std::to_string(mask.height()) + "x" +
                         std::to_string(mask.width()) + " and " + std::to_string(C) + " channels");
    }
    config_.validate_extent(mask.height(), mask.width());

    const Tensor yt = measurement_tensor(y);
    Tensor z = cube_tensor(cassi::shift_back(y, spec, C));
    Tensor x_prev = z;
    Tensor summary;
    double t = 1.0;
    UnfoldResult result;
    result.momentum.push_back(t);
    for (std::size_t k = 0; k < stages_.size(); ++k) {
        try {
            const AspStepResult step = asp_step(z, yt, mask, spec, stages_[k].asp);
            NliaOutput prox = stages_[k].nlia(step.r, summary);
            const double t_next = fista::momentum_update(t);
            const double coeff = (t - 1.0) / t_next;
            z = coeff == 0.0 ? prox.x : ad::add(prox.x, ad::scale(ad::sub(prox.x, x_prev), coeff));
            x_prev = prox.x;
            summary = prox.summary;
            t = t_next;
            result.step_sizes.push_back(step.rho);
            result.iterates.push_back(prox.x);
            result.momentum.push_back(t);
        } catch (const NumericalError& e) {
            throw NumericalError(std::string(e.what()) + " in stage " + std::to_string(k), static_cast<long>(k));
        } catch (const ShapeError& e) {
            throw ShapeError(std::string(e.what()) + " in stage " + std::to_string(k));
        }
    }
    result.x = x_prev;
    return result;
}

cassi::SpectralCube Network::reconstruct(const cassi::Measurement& y, const cassi::CodedMask& mask,
                                         const cassi::DispersionSpec& spec) const {
    return to_cube(unfold(y, mask, spec).x);
}

}  // namespace aspun::net
