#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "aspun/errors.hpp"
#include "aspun/training.hpp"

using namespace aspun;
using namespace aspun::train;
using cassi::SpectralCube;

namespace {

SpectralCube cube_from(std::size_t H, std::size_t W, std::size_t C, auto f) {
    SpectralCube x(H, W, C);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
            for (std::size_t c = 0; c < C; ++c) x.at(h, w, c) = f(h, w, c);
    return x;
}

// Direct 2D Gaussian-window SSIM over valid positions, one channel at a time.
double ssim_oracle(const SpectralCube& a, const SpectralCube& b) {
    const std::size_t H = a.height(), W = a.width(), C = a.channels();
    const int r = 5;
    double kern[11][11];
    double total = 0.0;
    for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) total += kern[i + r][j + r] = std::exp(-(i * i + j * j) / (2.0 * 1.5 * 1.5));
    const double c1 = 1e-4, c2 = 9e-4;
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = r; h + r < H; ++h)
            for (std::size_t w = r; w + r < W; ++w) {
                double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
                for (int i = -r; i <= r; ++i)
                    for (int j = -r; j <= r; ++j) {
                        const double k = kern[i + r][j + r] / total;
                        const double va = a.at(h + i, w + j, c), vb = b.at(h + i, w + j, c);
                        ma += k * va;
                        mb += k * vb;
                        aa += k * va * va;
                        bb += k * vb * vb;
                        ab += k * va * vb;
                    }
                const double sa = aa - ma * ma, sb = bb - mb * mb, sab = ab - ma * mb;
                acc += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                ++n;
            }
    return acc / static_cast<double>(n);
}

TrainData tiny_data(std::size_t scenes = 1) {
    SyntheticSceneSpec s;
    s.height = 16;
    s.width = 16;
    s.channels = 4;
    TrainData d{{}, {}, cassi::CodedMask::random_binary(16, 16, 7), cassi::DispersionSpec{1, 0}};
    for (std::size_t i = 0; i < scenes; ++i) {
        s.seed = i;
        d.train_scenes.push_back(generate_scene(s));
    }
    s.seed = 99;
    d.eval_scenes.push_back(generate_scene(s));
    return d;
}

net::NetworkConfig tiny_net() {
    net::NetworkConfig c;
    c.stages = 2;
    c.spectral_channels = 4;
    c.base_channels = 4;
    c.num_heads = 2;
    return c;
}

}  // namespace

TEST_CASE("charbonnier loss") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> a(500), b(500);
    for (double& v : a) v = u(rng);
    CHECK(charbonnier_loss(a, a, 1e-3) == doctest::Approx(1e-3).epsilon(1e-15));
    double mae = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = u(rng);
        if (std::abs(d) < 1e-3) d = 1e-3;
        b[i] = a[i] + d;
        mae += std::abs(d);
    }
    mae /= static_cast<double>(a.size());
    CHECK(std::abs(charbonnier_loss(a, b, 1e-8) - mae) < 1e-6);
    CHECK(charbonnier_loss(a, b, 1e-3) > 1e-3);
    CHECK_THROWS(charbonnier_loss(a, std::span<const double>(b).first(10), 1e-3));
    CHECK_THROWS(charbonnier_loss(a, b, 0.0));
}

TEST_CASE("cosine schedule") {
    TrainConfig cfg;
    cfg.total_steps = 500;
    CHECK(cosine_lr(0, cfg) == doctest::Approx(3e-4).epsilon(1e-15));
    CHECK(cosine_lr(500, cfg) == doctest::Approx(cfg.lr_min).epsilon(1e-12));
    CHECK(cosine_lr(250, cfg) == doctest::Approx((cfg.lr_initial + cfg.lr_min) / 2).epsilon(1e-14));
    for (std::size_t s = 1; s <= 500; ++s) CHECK(cosine_lr(s, cfg) <= cosine_lr(s - 1, cfg));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.lr_min = cfg.lr_initial;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.total_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.charbonnier_eps = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("adam") {
    // Hand-evaluated recurrence: lr 0.1, grads 0.5, -0.2, 0.1 from p = 1.
    std::vector<double> p{1.0};
    AdamState st;
    const AdamConfig cfg;
    const double expected[] = {0.900000002, 0.8654394181165108, 0.8275002408356956};
    const double grads[] = {0.5, -0.2, 0.1};
    for (int i = 0; i < 3; ++i) {
        adam_step(p, std::span<const double>(&grads[i], 1), st, 0.1, cfg);
        CHECK(p[0] == doctest::Approx(expected[i]).epsilon(1e-14));
    }
    CHECK(st.t == 3);

    std::vector<double> q{0.3, -2.0};
    const std::vector<double> zeros(2, 0.0);
    AdamState zs;
    for (int i = 0; i < 10; ++i) adam_step(q, zeros, zs, 0.1, cfg);
    CHECK(q == std::vector<double>{0.3, -2.0});

    std::vector<double> r{0.0};
    AdamState cs;
    const double g = 0.37;
    double prev = 0.0;
    for (int i = 0; i < 2000; ++i) {
        prev = r[0];
        adam_step(r, std::span<const double>(&g, 1), cs, 0.01, cfg);
    }
    CHECK(std::abs(prev - r[0]) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK_THROWS(adam_step(r, zeros, cs, 0.01, cfg));
}

TEST_CASE("adam over a parameter set with lr zero leaves values bit-identical") {
    net::Network n(tiny_net());
    std::vector<std::vector<double>> before;
    for (const auto& e : n.parameters().entries()) before.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    for (const auto& e : n.parameters().entries()) {
        auto& g = e.tensor.node()->grad_buffer();
        std::fill(g.begin(), g.end(), 1.0);
    }
    Adam adam(n.parameters(), AdamConfig{});
    adam.step(0.0);
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto d = n.parameters().entries()[i].tensor.data();
        CHECK(std::equal(d.begin(), d.end(), before[i].begin()));
    }
}

TEST_CASE("psnr") {
    std::vector<double> gt(100, 0.5), pred(100, 0.6);
    CHECK(psnr(pred, gt) == doctest::Approx(20.0).epsilon(1e-12));
    std::vector<double> g255(10, 100.0), p255(10, 101.0);
    CHECK(psnr(p255, g255, 255.0) == doctest::Approx(48.1308).epsilon(1e-6));
    CHECK(psnr(gt, gt) == std::numeric_limits<double>::infinity());
    std::vector<double> worse(100, 0.7);
    CHECK(psnr(worse, gt) < psnr(pred, gt));
}

TEST_CASE("ssim") {
    const auto a = cube_from(16, 20, 3, [](auto h, auto w, auto c) {
        return 0.5 + 0.4 * std::sin(0.3 * double(h) + 0.7 * double(w) + double(c));
    });
    const auto b = cube_from(16, 20, 3, [&](auto h, auto w, auto c) {
        return std::clamp(a.at(h, w, c) + 0.1 * std::cos(1.1 * double(h) - 0.4 * double(w) + 2.0 * double(c)), 0.0, 1.0);
    });
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
    CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-12);
    // Reference value from scikit-image 0.25 (gaussian_weights, sigma 1.5, population covariance).
    CHECK(std::abs(ssim(a, b) - 0.9590342379462112) < 1e-9);

    const double m1 = 0.3, m2 = 0.55, c1 = 1e-4;
    const auto k1 = cube_from(12, 12, 2, [&](auto, auto, auto) { return m1; });
    const auto k2 = cube_from(12, 12, 2, [&](auto, auto, auto) { return m2; });
    CHECK(ssim(k1, k2) == doctest::Approx((2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1)).epsilon(1e-12));

    // Translating both inputs and cropping the same region gives the same score.
    auto crop = [](const SpectralCube& x, std::size_t dh, std::size_t dw) {
        return cube_from(12, 14, x.channels(), [&](auto h, auto w, auto c) { return x.at(h + dh, w + dw, c); });
    };
    CHECK(ssim(crop(a, 0, 0), crop(b, 0, 0)) != doctest::Approx(ssim(crop(a, 3, 5), crop(b, 3, 5))));
    const auto a2 = cube_from(16, 20, 3, [&](auto h, auto w, auto c) { return a.at((h + 13) % 16, (w + 15) % 20, c); });
    const auto b2 = cube_from(16, 20, 3, [&](auto h, auto w, auto c) { return b.at((h + 13) % 16, (w + 15) % 20, c); });
    CHECK(ssim(crop(a, 0, 0), crop(b, 0, 0)) == ssim(crop(a2, 3, 5), crop(b2, 3, 5)));

    // Small images fall back to a smaller window.
    const auto s = cube_from(4, 4, 1, [](auto h, auto w, auto) { return 0.1 * double(h + w); });
    CHECK(ssim(s, s) == doctest::Approx(1.0));
    CHECK_THROWS(ssim(a, k1));
}

TEST_CASE("synthetic scenes") {
    SyntheticSceneSpec s;
    s.seed = 5;
    const auto x = generate_scene(s);
    CHECK(x.shape() == cassi::CubeShape{32, 32, 8});
    CHECK(generate_scene(s).values() == x.values());
    double mx = 0.0;
    for (double v : x.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
    }
    CHECK(mx > 0.0);
    s.seed = 6;
    CHECK(generate_scene(s).values() != x.values());
    s.blob_count = 0;
    const auto empty = generate_scene(s);
    for (double v : empty.values()) CHECK(v == 0.0);
}

TEST_CASE("training loop") {
    const TrainData data = tiny_data(2);
    TrainConfig cfg;
    cfg.total_steps = 4;
    cfg.eval_interval = 2;
    cfg.lr_initial = 1e-3;

    net::Network fresh(tiny_net());
    const double step0 = scene_loss(fresh, data.train_scenes[0], data.mask, data.spec, cfg.charbonnier_eps);

    net::Network a(tiny_net());
    std::size_t callbacks = 0;
    const auto trace_a = train::train(a, cfg, data, [&](const TrainRecord&) { ++callbacks; });
    REQUIRE(trace_a.size() == 4);
    CHECK(callbacks == 4);
    CHECK(trace_a[0].loss == doctest::Approx(step0).epsilon(1e-13));
    CHECK(trace_a[0].lr == cosine_lr(0, cfg));
    CHECK(trace_a[0].psnr.has_value());
    CHECK(!trace_a[1].psnr.has_value());
    CHECK(trace_a[2].psnr.has_value());
    CHECK(trace_a[3].ssim.has_value());

    net::Network b(tiny_net());
    const auto trace_b = train::train(b, cfg, data);
    for (std::size_t i = 0; i < 4; ++i) CHECK(trace_a[i].loss == trace_b[i].loss);
    const auto& pa = a.parameters().entries();
    const auto& pb = b.parameters().entries();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));

    // lr = 0 everywhere leaves every parameter bit-identical.
    TrainConfig frozen = cfg;
    frozen.lr_initial = 0.0;
    frozen.lr_min = 0.0;
    CHECK_THROWS_AS(frozen.validate(), ConfigError);
    net::Network c(tiny_net());
    std::vector<std::vector<double>> before;
    for (const auto& e : c.parameters().entries()) before.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    Adam adam(c.parameters(), cfg.adam);
    for (int s = 0; s < 3; ++s) {
        c.parameters().zero_grad();
        const auto res = c.unfold(cassi::forward(data.train_scenes[0], data.mask, data.spec), data.mask, data.spec);
        ad::backward(ad::charbonnier(res.x, net::cube_tensor(data.train_scenes[0]), 1e-3));
        adam.step(0.0);
    }
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto d = c.parameters().entries()[i].tensor.data();
        CHECK(std::equal(d.begin(), d.end(), before[i].begin()));
    }
}

TEST_CASE("non-finite loss aborts with the step index") {
    const TrainData data = tiny_data();
    TrainConfig cfg;
    cfg.total_steps = 6;
    net::Network n(tiny_net());
    const std::string victim = "stage1.nlia.project.bias";
    REQUIRE(n.parameters().contains(victim));
    try {
        train::train(n, cfg, data, [&](const TrainRecord& r) {
            if (r.step == 2) n.parameters().assign(victim, std::vector<double>(4, std::nan("")));
        });
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.iteration() == 3);
    }
}

TEST_CASE("trace csv") {
    const auto dir = std::filesystem::temp_directory_path() / "aspun_trace_test";
    std::filesystem::create_directories(dir);
    std::vector<TrainRecord> trace(2);
    trace[0] = {0, 0.5, 3e-4, 12.5, 0.25};
    trace[1] = {1, 0.25, 1e-4, std::nullopt, std::nullopt};
    write_trace_csv(dir / "t.csv", trace);
    std::ifstream in(dir / "t.csv");
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == "step,loss,lr,psnr,ssim\n0,0.5,0.0003,12.5,0.25\n1,0.25,0.0001,,\n");
    std::filesystem::remove_all(dir);
}
