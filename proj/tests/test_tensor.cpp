#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "aspun/errors.hpp"
#include "aspun/grad_check.hpp"
#include "aspun/tensor.hpp"

using namespace aspun;
using namespace aspun::ad;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, bool grad = false) {
    const auto n = numel(s);
    return Tensor::from(std::move(s), random_values(n, rng), grad);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Direct-loop convolution oracle: x [H, W, Cin], w [k, k, Cin/g, Cout].
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                                std::size_t groups, std::size_t& Ho, std::size_t& Wo) {
    const std::size_t H = x.shape()[0], W = x.shape()[1], Cin = x.shape()[2];
    const std::size_t k = w.shape()[0], cig = w.shape()[2], Cout = w.shape()[3], cog = Cout / groups;
    Ho = (H + 2 * pad - k) / stride + 1;
    Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<double> out(Ho * Wo * Cout, 0.0);
    for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow)
            for (std::size_t o = 0; o < Cout; ++o) {
                const std::size_t g = o / cog;
                double acc = 0.0;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
                        const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
                        if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                        for (std::size_t c = 0; c < cig; ++c) {
                            acc += x.data()[(static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)) * Cin +
                                            g * cig + c] *
                                   w.data()[((i * k + j) * cig + c) * Cout + o];
                        }
                    }
                out[(oh * Wo + ow) * Cout + o] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("construction and shape errors") {
    CHECK_THROWS(Tensor::from({2, 3}, std::vector<double>(5)));
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS(softmax(a, 2));
    CHECK_THROWS(reshape(a, {4}));
    CHECK_THROWS(window_partition(Tensor::zeros({6, 4, 1}), 4));
    CHECK_THROWS(backward(a));
    CHECK(Tensor::scalar(2.5).item() == 2.5);
}

TEST_CASE("broadcasting over leading extents") {
    std::mt19937_64 rng(1);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor c = add(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(c.data()[i] == a.data()[i] + b.data()[i % 4]);
    Tensor s = mul(a, Tensor::scalar(3.0));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(s.data()[i] == a.data()[i] * 3.0);
}

TEST_CASE("elementwise values") {
    Tensor x = Tensor::from({5}, {-2.0, -0.5, 0.0, 0.5, 2.0}, true);
    Tensor g = gelu(x);
    for (std::size_t i = 0; i < 5; ++i) {
        const double v = x.data()[i];
        CHECK(g.data()[i] == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-15));
    }
    Tensor sp = softplus(x);
    for (std::size_t i = 0; i < 5; ++i) CHECK(sp.data()[i] == doctest::Approx(std::log1p(std::exp(x.data()[i]))));
    CHECK(softplus(Tensor::scalar(800.0)).item() == 800.0);
    CHECK(relu(x).data()[0] == 0.0);
    CHECK(relu(x).data()[4] == 2.0);

    Tensor z = Tensor::from({1}, {0.0}, true);
    backward(sum(sigmoid(z)));
    CHECK(z.grad()[0] == 0.25);
}

TEST_CASE("backward basics") {
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({3, 4}, rng, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
    x.zero_grad();
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);
    x.zero_grad();
    backward(sum(add(x, x)));
    for (double g : x.grad()) CHECK(g == 2.0);

    // Leaf gradients accumulate across backward calls.
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 3.0);

    // Diamond: y = a*b + a, a shared.
    x.zero_grad();
    Tensor a = scale(x, 2.0);
    Tensor loss = sum(add(mul(a, a), a));
    backward(loss);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(8.0 * x.data()[i] + 2.0));

    Tensor leaf = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor derived = scale(leaf, 2.0);
    CHECK_THROWS(derived.set_requires_grad(false));
    CHECK(!leaf.detach().requires_grad());
}

TEST_CASE("determinism") {
    auto run = [] {
        std::mt19937_64 rng(3);
        Tensor x = random_tensor({4, 4, 3}, rng, true);
        Tensor w = random_tensor({3, 3, 3, 2}, rng, true);
        Tensor y = softmax(conv2d(x, w, Tensor(), {1, 1, 1}), -1);
        backward(sum(mul(y, y)));
        std::vector<double> out(y.data().begin(), y.data().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("matmul matches Eigen") {
    std::mt19937_64 rng(4);
    Tensor a = random_tensor({2, 3, 5}, rng);
    Tensor b = random_tensor({5, 4}, rng);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 3, 4});
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMat> B(b.data().data(), 5, 4);
    for (std::size_t batch = 0; batch < 2; ++batch) {
        const Eigen::Map<const RowMat> A(a.data().data() + batch * 15, 3, 5);
        const RowMat expected = A * B;
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index j = 0; j < 4; ++j)
                CHECK(std::abs(c.data()[batch * 12 + static_cast<std::size_t>(i * 4 + j)] - expected(i, j)) < 1e-14);
    }
}

TEST_CASE("conv2d matches a direct-loop oracle") {
    std::mt19937_64 rng(5);
    struct Cfg {
        Shape x, w;
        std::size_t stride, pad, groups;
    };
    for (const Cfg& c : {Cfg{{4, 4, 2}, {3, 3, 2, 3}, 1, 1, 1}, Cfg{{6, 8, 3}, {4, 4, 3, 2}, 2, 1, 1},
                         Cfg{{5, 5, 4}, {3, 3, 2, 6}, 1, 0, 2}}) {
        Tensor x = random_tensor(c.x, rng);
        Tensor w = random_tensor(c.w, rng);
        Tensor y = conv2d(x, w, Tensor(), {c.stride, c.pad, c.groups});
        std::size_t Ho = 0, Wo = 0;
        const auto expected = conv_oracle(x, w, c.stride, c.pad, c.groups, Ho, Wo);
        REQUIRE(y.shape() == Shape{Ho, Wo, c.w[3]});
        for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(y.data()[i] - expected[i]) < 1e-13);
    }
}

TEST_CASE("conv2d 4x4 input-gradient against finite differences") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({4, 4, 1}, rng, true);
    Tensor w = random_tensor({3, 3, 1, 1}, rng);
    Tensor y = conv2d(x, w, Tensor(), {1, 1, 1});
    CHECK(y.shape() == Shape{4, 4, 1});
    Tensor wts = random_tensor({4, 4, 1}, rng);
    gradcheck::Options opts;
    opts.step = 1e-5;
    const auto r = gradcheck::check([&] { return sum(mul(conv2d(x, w, Tensor(), {1, 1, 1}), wts)); },
                                    {{"x", x}}, opts);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("transposed conv is the adjoint of conv") {
    std::mt19937_64 rng(7);
    struct Cfg {
        Shape x, w;
        std::size_t stride, pad, groups;
    };
    for (const Cfg& c : {Cfg{{6, 6, 3}, {4, 4, 3, 2}, 2, 1, 1}, Cfg{{4, 6, 4}, {2, 2, 4, 4}, 2, 0, 1},
                         Cfg{{5, 5, 4}, {3, 3, 2, 6}, 1, 1, 2}}) {
        Tensor x = random_tensor(c.x, rng);
        Tensor w = random_tensor(c.w, rng);
        Tensor y = conv2d(x, w, Tensor(), {c.stride, c.pad, c.groups});
        Tensor v = random_tensor(y.shape(), rng);
        Tensor back = transposed_conv2d(v, w, Tensor(), {c.stride, c.pad, c.groups});
        REQUIRE(back.shape() == x.shape());
        const double lhs = dot(y.data(), v.data());
        const double rhs = dot(x.data(), back.data());
        CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("pooling, normalisation, softmax") {
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({4, 6, 2}, rng);
    Tensor p = avg_pool2d(x, 2, 2);
    REQUIRE(p.shape() == Shape{2, 3, 2});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t c = 0; c < 2; ++c) {
                double s = 0.0;
                for (std::size_t a = 0; a < 2; ++a)
                    for (std::size_t b = 0; b < 2; ++b) s += x.data()[((2 * i + a) * 6 + 2 * j + b) * 2 + c];
                CHECK(p.data()[(i * 3 + j) * 2 + c] == doctest::Approx(s / 4.0).epsilon(1e-14));
            }
    // Count-including-pad: the corner of a padded 3x3 pool sees 4 real taps out of 9.
    Tensor ones = Tensor::full({3, 3, 1}, 1.0);
    CHECK(avg_pool2d(ones, 3, 1, 1).data()[0] == doctest::Approx(4.0 / 9.0));

    Tensor gp = global_avg_pool(x);
    REQUIRE(gp.shape() == Shape{2});
    double s0 = 0.0;
    for (std::size_t i = 0; i < 24; ++i) s0 += x.data()[2 * i];
    CHECK(gp.data()[0] == doctest::Approx(s0 / 24.0).epsilon(1e-14));

    Tensor ln = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}));
    for (std::size_t i = 0; i < 24; ++i) {
        const double a = x.data()[2 * i], b = x.data()[2 * i + 1];
        const double m = 0.5 * (a + b), var = 0.25 * (a - b) * (a - b);
        CHECK(ln.data()[2 * i] == doctest::Approx((a - m) / std::sqrt(var + 1e-5)).epsilon(1e-12));
    }

    Tensor sm = softmax(random_tensor({3, 4, 5}, rng), 1);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < 4; ++j) s += sm.data()[(i * 4 + j) * 5 + k];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
        }
    CHECK(softmax(Tensor::from({2}, {1000.0, 1000.0}), 0).data()[0] == 0.5);
}

TEST_CASE("shape ops") {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({8, 8, 3}, rng);
    Tensor w = window_partition(x, 4);
    CHECK(w.shape() == Shape{4, 16, 3});
    // second window (top-right), first token is x[0, 4]
    CHECK(w.data()[16 * 3] == x.data()[4 * 3]);
    CHECK(window_merge(w, 8, 8, 4).data().size() == x.size());
    const auto merged = window_merge(w, 8, 8, 4);
    CHECK(std::equal(merged.data().begin(), merged.data().end(), x.data().begin()));

    Tensor p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{3, 8, 8});
    CHECK(p.data()[1 * 64 + 2 * 8 + 5] == x.data()[(2 * 8 + 5) * 3 + 1]);

    auto parts = split(x, -1, {1, 2});
    CHECK(parts[1].shape() == Shape{8, 8, 2});
    const auto joined = concat(parts, 2);
    CHECK(std::equal(joined.data().begin(), joined.data().end(), x.data().begin()));
    CHECK_THROWS(split(x, 2, {1, 1}));
}

TEST_CASE("finite-value checks at op boundaries") {
    DebugChecks on(true);
    Tensor x = Tensor::from({2}, {1.0, -1.0});
    Tensor big = Tensor::from({2}, {1e308, 1e308});
    CHECK_THROWS_AS(mul(big, Tensor::scalar(10.0)), NumericalError);
    {
        DebugChecks off(false);
        CHECK_NOTHROW(mul(big, Tensor::scalar(10.0)));
    }
    CHECK(DebugChecks::enabled());
    (void)x;
}

TEST_CASE("primitive gradients at several random shapes") {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<std::size_t> ext(2, 5);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t H = ext(rng), W = ext(rng), C = ext(rng);
        Tensor x = random_tensor({H, W, C}, rng, true);
        Tensor b = random_tensor({C}, rng, true);
        Tensor wts = random_tensor({H, W, C}, rng);
        Tensor w = random_tensor({3, 3, C, 2}, rng, true);
        Tensor m = random_tensor({C, 3}, rng, true);
        Tensor gamma = Tensor::from({C}, random_values(C, rng, 0.5, 1.5), true);
        auto weighted = [&](const Tensor& y) {
            std::mt19937_64 r2(99);
            return sum(mul(y, Tensor::from(y.shape(), random_values(y.size(), r2))));
        };
        gradcheck::Options lin;
        lin.step = 1e-3;
        gradcheck::Options gen;
        const std::vector<std::pair<const char*, std::function<Tensor()>>> nonlinear = {
            {"sigmoid", [&] { return weighted(sigmoid(x)); }},
            {"gelu", [&] { return weighted(gelu(x)); }},
            {"softplus", [&] { return weighted(softplus(x)); }},
            {"softmax", [&] { return weighted(softmax(x, -1)); }},
            {"layer_norm", [&] { return weighted(layer_norm(x, gamma, b)); }},
            {"charbonnier", [&] { return charbonnier(x, wts, 1e-3); }},
        };
        for (const auto& [name, f] : nonlinear) {
            const auto r = gradcheck::check(f, {{"x", x}, {"b", b}, {"gamma", gamma}}, gen);
            INFO(name, " shape ", to_string(x.shape()));
            CHECK(r.max_rel_error < 1e-4);
        }
        const std::vector<std::pair<const char*, std::function<Tensor()>>> linear = {
            {"add", [&] { return weighted(add(x, b)); }},
            {"mul", [&] { return weighted(mul(x, wts)); }},
            {"matmul", [&] { return weighted(matmul(x, m)); }},
            {"conv2d", [&] { return weighted(conv2d(x, w, Tensor(), {1, 1, 1})); }},
            {"avg_pool2d", [&] { return weighted(avg_pool2d(x, 3, 1, 1)); }},
            {"global_avg_pool", [&] { return weighted(global_avg_pool(x)); }},
            {"permute", [&] { return weighted(permute(x, {1, 2, 0})); }},
        };
        for (const auto& [name, f] : linear) {
            const auto r = gradcheck::check(f, {{"x", x}, {"b", b}, {"w", w}, {"m", m}}, lin);
            INFO(name, " shape ", to_string(x.shape()));
            CHECK(r.max_rel_error < 1e-7);
        }
    }
}

TEST_CASE("registered gradient suite") {
    for (const auto& c : gradcheck::suite()) {
        const auto r = c.run();
        INFO(c.name, " worst ", r.worst_input, " err ", r.max_rel_error);
        CHECK(r.max_rel_error < c.tolerance());
    }
}

TEST_CASE("relative error definition") {
    CHECK(gradcheck::relative_error(1.0, 1.0) == 0.0);
    CHECK(gradcheck::relative_error(2.0, 1.0) == 0.5);
    CHECK(gradcheck::relative_error(0.0, 1e-12) == doctest::Approx(1e-4));
}
