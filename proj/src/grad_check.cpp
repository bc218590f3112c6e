#include "aspun/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "aspun/cassi.hpp"
#include "aspun/network.hpp"

namespace aspun::gradcheck {

using ad::Shape;
using ad::Tensor;

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

namespace {

void record(Report& r, const std::string& name, double analytic, double numeric, double floor) {
    const double err = relative_error(analytic, numeric, floor);
    ++r.probes;
    if (err > r.max_rel_error || r.worst_input.empty()) {
        r.max_rel_error = err;
        r.worst_input = name;
        r.worst_analytic = analytic;
        r.worst_numeric = numeric;
    }
}

}  // namespace

Report check(const std::function<Tensor()>& loss, const std::vector<GradInput>& inputs, const Options& opts) {
    for (const auto& in : inputs) {
        if (!in.tensor.requires_grad() || !in.tensor.node()->is_leaf()) {
            throw std::invalid_argument("gradcheck input " + in.name + " must be a leaf requiring grad");
        }
        Tensor t = in.tensor;
        t.zero_grad();
    }
    Tensor l = loss();
    if (l.size() != 1) throw std::invalid_argument("gradcheck loss must hold one element");
    ad::backward(l);

    std::mt19937_64 rng(opts.seed);
    const double h = opts.step;
    auto eval = [&] { return loss().item(); };
    Report report;
    for (const auto& in : inputs) {
        Tensor t = in.tensor;
        std::vector<double> grad(t.size(), 0.0);
        if (!t.grad().empty()) std::copy(t.grad().begin(), t.grad().end(), grad.begin());
        auto values = t.mutable_data();

        if (opts.directions > 0) {
            std::normal_distribution<double> gauss(0.0, 1.0);
            const std::vector<double> base(values.begin(), values.end());
            for (std::size_t d = 0; d < opts.directions; ++d) {
                std::vector<double> dir(t.size());
                for (double& v : dir) v = gauss(rng);
                const double norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
                for (double& v : dir) v /= norm;
                for (std::size_t i = 0; i < dir.size(); ++i) values[i] = base[i] + h * dir[i];
                const double up = eval();
                for (std::size_t i = 0; i < dir.size(); ++i) values[i] = base[i] - h * dir[i];
                const double down = eval();
                std::copy(base.begin(), base.end(), values.begin());
                const double analytic = std::inner_product(grad.begin(), grad.end(), dir.begin(), 0.0);
                record(report, in.name, analytic, (up - down) / (2.0 * h), opts.floor);
            }
            continue;
        }

        std::vector<std::size_t> coords(t.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.max_coordinates > 0 && opts.max_coordinates < coords.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.max_coordinates);
        }
        for (std::size_t i : coords) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = eval();
            values[i] = saved - h;
            const double down = eval();
            values[i] = saved;
            record(report, in.name + "[" + std::to_string(i) + "]", grad[i], (up - down) / (2.0 * h), opts.floor);
        }
    }
    return report;
}

// ---- registered suite ----------------------------------------------------------------

namespace {

struct Fixture {
    std::mt19937_64 rng;
    explicit Fixture(std::uint64_t seed) : rng(seed) {}

    std::vector<double> uniform(std::size_t n, double lo, double hi) {
        std::uniform_real_distribution<double> u(lo, hi);
        std::vector<double> v(n);
        for (double& x : v) x = u(rng);
        return v;
    }
    Tensor input(Shape shape, double lo = -1.0, double hi = 1.0) {
        const std::size_t n = ad::numel(shape);
        return Tensor::from(std::move(shape), uniform(n, lo, hi), true);
    }
    /// Away from zero by at least `gap`, random sign.
    Tensor input_off_zero(Shape shape, double gap) {
        const std::size_t n = ad::numel(shape);
        auto v = uniform(n, gap, 1.5);
        std::bernoulli_distribution flip(0.5);
        for (double& x : v) if (flip(rng)) x = -x;
        return Tensor::from(std::move(shape), std::move(v), true);
    }
    Tensor constant(const Shape& shape) { return Tensor::from(shape, uniform(ad::numel(shape), -1.0, 1.0)); }
};

/// sum(w (.) out) with fixed random weights so every output coordinate matters.
Tensor weighted(const Tensor& out, std::uint64_t seed) {
    Fixture f(seed ^ 0xabcdefULL);
    return ad::sum(ad::mul(out, f.constant(out.shape())));
}

// Central differences are exact on linear maps, so a wider step only reduces roundoff there.
Options coordinates(bool linear = true) {
    Options o;
    if (linear) o.step = 1e-3;
    return o;
}

Options sampled(std::size_t n) {
    Options o;
    o.max_coordinates = n;
    return o;
}

Options directional(std::size_t n, double step) {
    Options o;
    o.directions = n;
    o.step = step;
    return o;
}

using Inputs = std::vector<GradInput>;

Case unary(std::string name, bool linear, Tensor (*op)(const Tensor&), bool off_zero = false) {
    return Case{name, linear, [linear, op, off_zero] {
                    Fixture f(11);
                    Tensor x = off_zero ? f.input_off_zero({3, 4, 5}, 0.05) : f.input({3, 4, 5}, -2.0, 2.0);
                    return check([&] { return weighted(op(x), 1); }, Inputs{{"x", x}}, coordinates(linear));
                }};
}

Case binary(std::string name, Tensor (*op)(const Tensor&, const Tensor&), Shape bshape) {
    return Case{name, true, [op, bshape] {
                    Fixture f(12);
                    Tensor a = f.input({3, 4, 5});
                    Tensor b = f.input(bshape);
                    return check([&] { return weighted(op(a, b), 2); }, Inputs{{"a", a}, {"b", b}}, coordinates());
                }};
}

// Parameters of a module plus its input, as grad inputs.
Inputs with_params(const net::ParameterSet& params, Inputs extra) {
    for (const auto& e : params.entries()) extra.push_back({e.name, e.tensor});
    return extra;
}

net::NetworkConfig small_config() {
    net::NetworkConfig cfg;
    cfg.stages = 1;
    cfg.spectral_channels = 4;
    cfg.base_channels = 8;
    cfg.window_size = 4;
    cfg.pna_pool = 2;
    cfg.num_heads = 2;
    cfg.ffn_expansion = 2;
    return cfg;
}

template <class Module, class Make, class Apply>
Case block(std::string name, Make make, Apply apply, Shape xshape) {
    return Case{name, false, [make, apply, xshape] {
                    net::ParameterSet params;
                    net::Initializer init(21);
                    net::Builder b(params, init, "m.");
                    Module m = make(b);
                    net::randomize_parameters(params, 22, 0.4);
                    Fixture f(23);
                    Tensor x = f.input(xshape);
                    auto inputs = with_params(params, Inputs{{"x", x}});
                    return check([&] { return weighted(apply(m, x), 3); }, inputs, sampled(6));
                }};
}

std::vector<Case> build_suite() {
    std::vector<Case> s;

    // elementwise
    s.push_back(binary("add", ad::add, {4, 5}));
    s.push_back(binary("add_scalar_broadcast", ad::add, {1}));
    s.push_back(binary("sub", ad::sub, {5}));
    s.push_back(binary("mul", ad::mul, {4, 5}));
    s.push_back(unary("scale", true, [](const Tensor& x) { return ad::scale(x, -1.75); }));
    s.push_back(unary("add_scalar", true, [](const Tensor& x) { return ad::add_scalar(x, 0.3); }));
    s.push_back(unary("sigmoid", false, ad::sigmoid));
    s.push_back(unary("gelu", false, ad::gelu));
    s.push_back(unary("relu", false, ad::relu, true));
    s.push_back(unary("softplus", false, ad::softplus));

    // reductions
    s.push_back(unary("sum", true, ad::sum));
    s.push_back(unary("mean", true, ad::mean));
    s.push_back(Case{"charbonnier", false, [] {
                         Fixture f(13);
                         Tensor p = f.input({4, 4, 3});
                         Tensor t = f.input({4, 4, 3});
                         return check([&] { return ad::charbonnier(p, t, 1e-3); }, Inputs{{"pred", p}, {"target", t}},
                                      coordinates(false));
                     }});

    // linear algebra
    s.push_back(Case{"matmul", true, [] {
                         Fixture f(14);
                         Tensor a = f.input({2, 3, 4});
                         Tensor b = f.input({4, 5});
                         return check([&] { return weighted(ad::matmul(a, b), 4); }, Inputs{{"a", a}, {"b", b}},
                                      coordinates());
                     }});
    s.push_back(Case{"matmul_batched", true, [] {
                         Fixture f(15);
                         Tensor a = f.input({2, 3, 3, 4});
                         Tensor b = f.input({2, 3, 4, 2});
                         return check([&] { return weighted(ad::matmul(a, b), 5); }, Inputs{{"a", a}, {"b", b}},
                                      coordinates());
                     }});
    auto conv_case = [](std::string name, Shape x, Shape w, ad::Conv2dOptions o) {
        return Case{name, true, [x, w, o] {
                        Fixture f(16);
                        Tensor xt = f.input(x);
                        Tensor wt = f.input(w);
                        Tensor bt = f.input({w.back()});
                        return check([&] { return weighted(ad::conv2d(xt, wt, bt, o), 6); },
                                     Inputs{{"x", xt}, {"weight", wt}, {"bias", bt}}, coordinates());
                    }};
    };
    s.push_back(conv_case("conv2d_3x3", {5, 6, 3}, {3, 3, 3, 4}, {1, 1, 1}));
    s.push_back(conv_case("conv2d_4x4_stride2", {6, 6, 2}, {4, 4, 2, 3}, {2, 1, 1}));
    s.push_back(conv_case("conv2d_grouped", {5, 5, 4}, {3, 3, 2, 4}, {1, 1, 2}));
    s.push_back(Case{"transposed_conv2d", true, [] {
                         Fixture f(17);
                         Tensor x = f.input({3, 4, 3});
                         Tensor w = f.input({2, 2, 2, 3});
                         Tensor b = f.input({2});
                         return check([&] { return weighted(ad::transposed_conv2d(x, w, b, {2, 0, 1}), 7); },
                                      Inputs{{"x", x}, {"weight", w}, {"bias", b}}, coordinates());
                     }});
    s.push_back(unary("avg_pool2d", true, [](const Tensor& x) { return ad::avg_pool2d(x, 2, 2); }));
    s.push_back(unary("avg_pool2d_padded", true, [](const Tensor& x) { return ad::avg_pool2d(x, 3, 1, 1); }));
    s.push_back(unary("global_avg_pool", true, ad::global_avg_pool));
    s.push_back(Case{"layer_norm", false, [] {
                         Fixture f(18);
                         Tensor x = f.input({3, 4, 5});
                         Tensor g = f.input({5}, 0.5, 1.5);
                         Tensor b = f.input({5});
                         return check([&] { return weighted(ad::layer_norm(x, g, b), 8); },
                                      Inputs{{"x", x}, {"gamma", g}, {"beta", b}}, coordinates(false));
                     }});
    s.push_back(unary("softmax_last", false, [](const Tensor& x) { return ad::softmax(x, -1); }));
    s.push_back(unary("softmax_axis1", false, [](const Tensor& x) { return ad::softmax(x, 1); }));

    // shape
    s.push_back(unary("reshape", true, [](const Tensor& x) { return ad::reshape(x, {12, 5}); }));
    s.push_back(unary("permute", true, [](const Tensor& x) { return ad::permute(x, {2, 0, 1}); }));
    s.push_back(Case{"concat", true, [] {
                         Fixture f(19);
                         Tensor a = f.input({3, 4, 2});
                         Tensor b = f.input({3, 4, 3});
                         return check([&] { return weighted(ad::concat({a, b}, -1), 9); }, Inputs{{"a", a}, {"b", b}},
                                      coordinates());
                     }});
    s.push_back(unary("split", true, [](const Tensor& x) {
        auto parts = ad::split(x, 2, {2, 3});
        return ad::add(weighted(parts[0], 17), weighted(parts[1], 18));
    }));
    s.push_back(Case{"window_partition", true, [] {
                         Fixture f(20);
                         Tensor x = f.input({4, 6, 2});
                         return check([&] { return weighted(ad::window_partition(x, 2), 10); }, Inputs{{"x", x}},
                                      coordinates());
                     }});
    s.push_back(Case{"window_merge", true, [] {
                         Fixture f(24);
                         Tensor w = f.input({6, 4, 2});
                         return check([&] { return weighted(ad::window_merge(w, 4, 6, 2), 11); }, Inputs{{"w", w}},
                                      coordinates());
                     }});

    // sensing operators
    s.push_back(Case{"sense_forward", true, [] {
                         Fixture f(25);
                         auto mask = cassi::CodedMask::random_binary(5, 4, 3);
                         Tensor x = f.input({5, 4, 3});
                         return check([&] { return weighted(net::sense_forward(x, mask, 1), 12); }, Inputs{{"x", x}},
                                      coordinates());
                     }});
    s.push_back(Case{"sense_adjoint", true, [] {
                         Fixture f(26);
                         auto mask = cassi::CodedMask::random_binary(5, 4, 4);
                         Tensor y = f.input({5, 8});
                         return check([&] { return weighted(net::sense_adjoint(y, mask, 2, 3), 13); },
                                      Inputs{{"y", y}}, coordinates());
                     }});

    // composite blocks
    const auto cfg = small_config();
    s.push_back(block<net::GatedLocalAttention>(
        "gla", [](net::Builder b) { return net::GatedLocalAttention::create(b, 4); },
        [](const net::GatedLocalAttention& m, const Tensor& x) { return m(x); }, {8, 8, 4}));
    s.push_back(block<net::PooledAttention>(
        "pna", [cfg](net::Builder b) { return net::PooledAttention::create(b, 4, cfg); },
        [](const net::PooledAttention& m, const Tensor& x) { return m(x); }, {8, 8, 4}));
    auto wmsa = cfg;
    wmsa.attention = net::AttentionKind::wmsa;
    s.push_back(block<net::PooledAttention>(
        "wmsa", [wmsa](net::Builder b) { return net::PooledAttention::create(b, 4, wmsa); },
        [](const net::PooledAttention& m, const Tensor& x) { return m(x); }, {8, 8, 4}));
    s.push_back(block<net::HybridAttention>(
        "nlha", [cfg](net::Builder b) { return net::HybridAttention::create(b, 4, cfg); },
        [](const net::HybridAttention& m, const Tensor& x) { return m(x); }, {8, 8, 4}));
    s.push_back(block<net::GatedFeedForward>(
        "gated_ffn", [](net::Builder b) { return net::GatedFeedForward::create(b, 4, 2); },
        [](const net::GatedFeedForward& m, const Tensor& x) { return m(x); }, {4, 4, 4}));
    s.push_back(block<net::HybridTransformerBlock>(
        "nhat", [cfg](net::Builder b) { return net::HybridTransformerBlock::create(b, 4, cfg); },
        [](const net::HybridTransformerBlock& m, const Tensor& x) { return m(x); }, {8, 8, 4}));
    s.push_back(Case{"isa", false, [] {
                         net::ParameterSet params;
                         net::Initializer init(27);
                         net::Builder b(params, init, "isa.");
                         auto isa = net::InterStageAttention::create(b, 6, 4);
                         net::randomize_parameters(params, 28, 0.5);
                         Fixture f(29);
                         Tensor x = f.input({4, 4, 4});
                         Tensor summary = f.input({6});
                         auto inputs = with_params(params, Inputs{{"x", x}, {"summary", summary}});
                         return check([&] { return weighted(isa(x, summary), 14); }, inputs, coordinates(false));
                     }});
    s.push_back(Case{"asp_step", false, [cfg] {
                         net::ParameterSet params;
                         net::Initializer init(30);
                         net::Builder b(params, init, "asp.");
                         auto asp = net::StepSizePerception::create(b, cfg);
                         net::randomize_parameters(params, 31, 0.5);
                         Fixture f(32);
                         auto mask = cassi::CodedMask::random_binary(4, 4, 5);
                         cassi::DispersionSpec spec;
                         Tensor z = f.input({4, 4, 4});
                         Tensor y = Tensor::from({4, 7}, f.uniform(28, 0.0, 2.0));
                         auto inputs = with_params(params, Inputs{{"z", z}});
                         return check([&] { return weighted(net::asp_step(z, y, mask, spec, asp).r, 15); }, inputs,
                                      sampled(8));
                     }});
    // The deep composition amplifies roundoff; 1e-4 sits near the cube root of machine epsilon.
    s.push_back(Case{"aspun_1stage_16x16x4", false, [cfg] {
                         net::Network network(cfg);
                         net::randomize_parameters(network.parameters(), 33, 0.2);
                         auto mask = cassi::CodedMask::random_binary(16, 16, 34);
                         cassi::DispersionSpec spec;
                         Fixture f(35);
                         cassi::SpectralCube scene(16, 16, 4, f.uniform(16 * 16 * 4, 0.0, 1.0));
                         const auto y = cassi::forward(scene, mask, spec);
                         Inputs inputs;
                         for (const auto& e : network.parameters().entries()) {
                             if (!net::is_inert_parameter(e.name)) inputs.push_back({e.name, e.tensor});
                         }
                         return check([&] { return weighted(network.unfold(y, mask, spec).x, 16); }, inputs,
                                      directional(2, 1e-4));
                     }});
    return s;
}

}  // namespace

const std::vector<Case>& suite() {
    static const std::vector<Case> cases = build_suite();
    return cases;
}

}  // namespace aspun::gradcheck
