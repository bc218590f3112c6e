// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aspun/cassi.hpp"
#include "aspun/errors.hpp"
#include "aspun/fista.hpp"
#include "aspun/grad_check.hpp"
#include "aspun/network.hpp"
#include "aspun/training.hpp"

using namespace aspun;
using cassi::SpectralCube;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

SpectralCube random_cube(std::size_t H, std::size_t W, std::size_t C, std::mt19937_64& rng, double lo = 0.0,
                         double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    SpectralCube x(H, W, C);
    for (double& v : x.values()) v = u(rng);
    return x;
}

cassi::CodedMask random_gray_mask(std::size_t H, std::size_t W, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(H * W);
    for (double& v : m) v = u(rng);
    return cassi::CodedMask(H, W, m);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Outcome adjoint_identity() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> hw(1, 24), ch(1, 12), dd(0, 3);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t H = hw(rng), W = hw(rng), C = ch(rng), d = dd(rng);
        const auto mask = random_gray_mask(H, W, rng);
        const cassi::DispersionSpec spec{d, 0};
        const auto x = random_cube(H, W, C, rng, -1.0, 1.0);
        cassi::Measurement y(H, cassi::measurement_width(W, C, d));
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (double& v : y.values()) v = u(rng);
        const double lhs = dot(cassi::forward(x, mask, spec).data(), y.data());
        const double rhs = dot(x.data(), cassi::adjoint(y, mask, spec, C).data());
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs)));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-10 && secs < 10.0,
            fmt("100 trials, max relative discrepancy %.2e (< 1e-10), %.2fs (< 10s)", worst, secs)};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    std::size_t failures = 0, count = 0;
    double worst_linear = 0.0, worst_other = 0.0;
    std::string failed;
    for (const auto& c : gradcheck::suite()) {
        const auto r = c.run();
        ++count;
        (c.linear ? worst_linear : worst_other) = std::max(c.linear ? worst_linear : worst_other, r.max_rel_error);
        if (!(r.max_rel_error < c.tolerance())) {
            ++failures;
            failed += " " + c.name;
        }
    }
    const double secs = seconds_since(t0);
    return {failures == 0 && secs < 300.0,
            fmt("%zu cases, linear max %.2e (< 1e-7), other max %.2e (< 1e-4), %.1fs (< 300s)%s%s", count, worst_linear,
                worst_other, secs, failures ? ", failed:" : "", failed.c_str())};
}

Outcome fista_correctness() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(77);
    bool monotone = true, fista_wins = true;
    double worst_rise = 0.0;
    for (int inst = 0; inst < 10; ++inst) {
        const auto mask = cassi::CodedMask::random_binary(8, 8, 100 + inst);
        const cassi::DispersionSpec spec{1, 0};
        auto x = random_cube(8, 8, 4, rng);
        for (double& v : x.values()) v = v < 0.7 ? 0.0 : v;
        const auto y = cassi::forward(x, mask, spec);
        fista::SolverConfig cfg;
        cfg.reg_weight = 0.01;
        cfg.max_iters = 200;
        cfg.tolerance = 0.0;
        cfg.power_iters = 100;
        cfg.accelerate = false;
        const auto ista = fista::solve(y, mask, spec, 4, cfg);
        cfg.accelerate = true;
        const auto fast = fista::solve(y, mask, spec, 4, cfg);
        for (std::size_t k = 1; k < ista.objective_trace.size(); ++k) {
            const double rise = ista.objective_trace[k] - ista.objective_trace[k - 1];
            worst_rise = std::max(worst_rise, rise);
            if (rise > 1e-12 * std::abs(ista.objective_trace[k - 1])) monotone = false;
        }
        double running = fast.objective_trace.front();
        for (double v : fast.objective_trace) running = std::min(running, v);
        if (ista.objective_trace.size() != 200 || fast.objective_trace.size() != 200) fista_wins = false;
        if (running > ista.objective_trace.back()) fista_wins = false;
    }

    // Soft threshold against a golden-section scan of the scalar prox objective.
    std::uniform_real_distribution<double> uv(-3.0, 3.0), ut(0.0, 1.5);
    double worst_gap = -1e300;
    for (int i = 0; i < 10000; ++i) {
        const double v = uv(rng), theta = ut(rng);
        auto f = [&](double x) { return 0.5 * (x - v) * (x - v) + theta * std::abs(x); };
        double a = -4.0, b = 4.0;
        const double g = (std::sqrt(5.0) - 1.0) / 2.0;
        for (int it = 0; it < 200 && b - a > 1e-15; ++it) {
            const double c = b - g * (b - a), d = a + g * (b - a);
            if (f(c) < f(d)) b = d; else a = c;
        }
        const double scan = f(0.5 * (a + b));
        worst_gap = std::max(worst_gap, f(fista::soft_threshold(v, theta)) - scan);
    }
    const double secs = seconds_since(t0);
    const bool pass = monotone && fista_wins && worst_gap < 1e-9 && secs < 60.0;
    return {pass, fmt("ISTA monotone on 10 instances: %s (max rise %.1e); FISTA running min <= ISTA at 200: %s; "
                      "soft-threshold minus golden-section objective max %.1e (< 1e-9); %.2fs (< 60s)",
                      monotone ? "yes" : "no", worst_rise, fista_wins ? "yes" : "no", worst_gap, secs)};
}

Outcome degeneracies() {
    std::mt19937_64 rng(5);
    // (a) frozen step-size network equals the scalar gradient step.
    double err_a = 0.0;
    {
        const std::size_t H = 8, W = 8, C = 4;
        net::NetworkConfig cfg;
        cfg.spectral_channels = C;
        net::ParameterSet ps;
        net::Initializer init(3);
        auto asp = net::StepSizePerception::create(net::Builder(ps, init).scope("asp"), cfg);
        net::randomize_parameters(ps, 9, 0.5);
        const double rho_bar = 0.21;
        ps.assign("asp.fc2.weight", std::vector<double>(ps.get("asp.fc2.weight").size(), 0.0));
        ps.assign("asp.fc2.bias", std::vector<double>(C, std::log(std::expm1(rho_bar - cfg.asp_eps))));
        const auto mask = cassi::CodedMask::random_binary(H, W, 4);
        const cassi::DispersionSpec spec{2, 0};
        const auto z = random_cube(H, W, C, rng);
        const auto y = cassi::forward(random_cube(H, W, C, rng), mask, spec);
        const auto res = net::asp_step(net::cube_tensor(z), net::measurement_tensor(y), mask, spec, asp);
        const auto ref = fista::gradient_step(z, y, mask, spec, rho_bar);
        err_a = max_abs_diff(res.r.data(), ref.data());
    }
    // (b) unit pool factor against brute-force window attention on one 4x4 window.
    double err_b = 0.0;
    {
        net::NetworkConfig cfg;
        cfg.window_size = 4;
        cfg.pna_pool = 1;
        cfg.num_heads = 2;
        const std::size_t Cf = 4, dh = 2, T = 16;
        net::ParameterSet ps;
        net::Initializer init(8);
        auto att = net::PooledAttention::create(net::Builder(ps, init).scope("pna"), Cf, cfg);
        net::randomize_parameters(ps, 10, 0.7);
        const auto xt = random_cube(4, 4, Cf, rng, -1.0, 1.0);
        const ad::Tensor x = net::cube_tensor(xt);
        auto lin = [&](const net::Linear& l, const std::vector<double>& in, std::size_t t, std::size_t o) {
            double s = l.bias.defined() ? l.bias.data()[o] : 0.0;
            for (std::size_t i = 0; i < Cf; ++i) s += in[t * Cf + i] * l.weight.data()[i * Cf + o];
            return s;
        };
        const std::vector<double> xin(x.data().begin(), x.data().end());
        std::vector<double> q(T * Cf), k(T * Cf), v(T * Cf), mixed(T * Cf, 0.0), expected(T * Cf);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t o = 0; o < Cf; ++o) {
                q[t * Cf + o] = lin(att.query, xin, t, o);
                k[t * Cf + o] = lin(att.key, xin, t, o);
                v[t * Cf + o] = lin(att.value, xin, t, o);
            }
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < T; ++i) {
                std::vector<double> s(T);
                double z = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    double d = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) d += q[i * Cf + h * dh + e] * k[j * Cf + h * dh + e];
                    z += s[j] = std::exp(d / std::sqrt(double(dh)));
                }
                for (std::size_t j = 0; j < T; ++j)
                    for (std::size_t e = 0; e < dh; ++e) mixed[i * Cf + h * dh + e] += s[j] / z * v[j * Cf + h * dh + e];
            }
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t o = 0; o < Cf; ++o) expected[t * Cf + o] = lin(att.out, mixed, t, o);
        err_b = max_abs_diff(att(x).data(), expected);
    }
    // (c) fresh network: first iterate is the per-channel gradient step from shift_back.
    double err_c = 0.0;
    {
        net::NetworkConfig cfg;
        cfg.stages = 3;
        const net::Network network(cfg);
        const auto mask = cassi::CodedMask::random_binary(32, 32, 7);
        const cassi::DispersionSpec spec{1, 0};
        const auto y = cassi::forward(random_cube(32, 32, 8, rng), mask, spec);
        const auto out = network.unfold(y, mask, spec);
        const auto z = cassi::shift_back(y, spec, 8);
        for (std::size_t c = 0; c < 8; ++c) {
            const auto ref = fista::gradient_step(z, y, mask, spec, out.step_sizes[0].data()[c]);
            for (std::size_t p = 0; p < 32 * 32; ++p) {
                err_c = std::max(err_c, std::abs(out.iterates[0].data()[p * 8 + c] - ref.values()[p * 8 + c]));
            }
        }
    }
    return {err_a < 1e-12 && err_b < 1e-10 && err_c < 1e-12,
            fmt("(a) frozen step size %.1e (< 1e-12); (b) unit-pool attention %.1e (< 1e-10); "
                "(c) fresh first iterate %.1e (< 1e-12)",
                err_a, err_b, err_c)};
}

Outcome shape_law() {
    std::mt19937_64 rng(6);
    const auto mask = cassi::CodedMask::random_binary(32, 32, 5);
    const cassi::DispersionSpec spec{1, 0};
    const auto y = cassi::forward(random_cube(32, 32, 8, rng), mask, spec);
    bool ok = y.height() == 32 && y.width() == 39;
    std::string stages;
    for (std::size_t K : {3u, 6u, 9u}) {
        net::NetworkConfig cfg;
        cfg.stages = K;
        const auto x = net::Network(cfg).reconstruct(y, mask, spec);
        const bool k_ok = x.shape() == cassi::CubeShape{32, 32, 8};
        ok = ok && k_ok;
        stages += fmt(" K=%zu:%zux%zux%zu", K, x.height(), x.width(), x.channels());
    }
    std::uniform_int_distribution<std::size_t> hw(1, 40), ch(1, 16), dd(0, 4);
    int laws = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t H = hw(rng), W = hw(rng), C = ch(rng), d = dd(rng);
        const auto m = cassi::forward(SpectralCube(H, W, C), cassi::CodedMask::ones(H, W), cassi::DispersionSpec{d, 0});
        if (m.width() == W + d * (C - 1) && m.height() == H) ++laws;
    }
    ok = ok && laws == 200;
    return {ok, fmt("32x39 measurement ->%s; width law held on %d/200 random shapes", stages.c_str(), laws)};
}

struct OverfitRun {
    double baseline = 0.0, final_psnr = 0.0, seconds = 0.0;
    std::vector<double> losses;
    std::vector<std::uint8_t> weights;
};

OverfitRun overfit_once() {
    const auto t0 = Clock::now();
    train::SyntheticSceneSpec s;  // 32x32x8
    s.seed = 0;
    const auto scene = train::generate_scene(s);
    const auto mask = cassi::CodedMask::random_binary(32, 32, 7);
    const cassi::DispersionSpec spec{1, 0};
    net::NetworkConfig ncfg;  // 3 stages, base 16
    net::Network network(ncfg);
    train::TrainConfig tcfg;  // 500 steps, lr 3e-4 cosine, seed 0
    train::TrainData data{{scene}, {}, mask, spec};
    const auto trace = train::train(network, tcfg, data);
    const auto y = cassi::forward(scene, mask, spec);
    OverfitRun r;
    r.baseline = train::psnr(cassi::shift_back(y, spec, 8), scene);
    r.final_psnr = train::psnr(network.reconstruct(y, mask, spec), scene);
    for (const auto& rec : trace) r.losses.push_back(rec.loss);
    for (const auto& e : network.parameters().entries()) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(e.tensor.data().data());
        r.weights.insert(r.weights.end(), p, p + e.tensor.size() * sizeof(double));
    }
    r.seconds = seconds_since(t0);
    return r;
}

Outcome training_smoke() {
    const auto a = overfit_once();
    const auto b = overfit_once();
    const bool deterministic = a.losses == b.losses && a.weights == b.weights && a.final_psnr == b.final_psnr;
    const double gain = a.final_psnr - a.baseline;
    const double slowest = std::max(a.seconds, b.seconds);
    return {gain >= 10.0 && deterministic && slowest < 600.0,
            fmt("shift_back %.4f dB -> trained %.4f dB, gain %+.4f dB (>= +10); repeat run identical: %s; "
                "%.1fs per run (< 600s)",
                a.baseline, a.final_psnr, gain, deterministic ? "yes" : "no", slowest)};
}

Outcome topology_checks() {
    net::NetworkConfig base;
    base.stages = 3;
    base.spectral_channels = 4;
    base.base_channels = 8;
    const std::size_t n_full = net::Network(base).parameters().scalar_count();
    struct Switch {
        const char* name;
        std::function<void(net::NetworkConfig&)> apply;
        int direction;  // -1 fewer parameters, 0 same
        const char* absent;  // parameter that must disappear, or nullptr
    };
    const std::vector<Switch> switches = {
        {"use_asp=off", [](auto& c) { c.use_asp = false; }, -1, "stage0.asp.fc1.weight"},
        {"use_isa=off", [](auto& c) { c.use_isa = false; }, -1, "stage1.nlia.isa_enc0.fc1.weight"},
        {"use_gla=off", [](auto& c) { c.use_gla = false; }, -1, "stage0.nlia.enc0.nlha.gla.value_proj.weight"},
        {"use_pna=off", [](auto& c) { c.use_pna = false; }, -1, "stage0.nlia.enc0.nlha.pna.value.weight"},
        {"use_pna_transformer=off", [](auto& c) { c.use_pna_transformer = false; }, -1,
         "stage0.nlia.enc0.nlha.pna.query.weight"},
        {"attention=wmsa", [](auto& c) { c.attention = net::AttentionKind::wmsa; }, 0, nullptr},
    };
    std::mt19937_64 rng(3);
    const auto mask = cassi::CodedMask::random_binary(16, 16, 2);
    const cassi::DispersionSpec spec{1, 0};
    const auto y = cassi::forward(random_cube(16, 16, 4, rng), mask, spec);
    bool ok = true;
    std::string detail;
    for (const auto& s : switches) {
        auto cfg = base;
        s.apply(cfg);
        net::Network n(cfg);
        net::randomize_parameters(n.parameters(), 4, 0.1);
        const std::size_t count = n.parameters().scalar_count();
        const bool direction = s.direction < 0 ? count < n_full : count == n_full;
        const bool wiring = s.absent == nullptr || !n.parameters().contains(s.absent);
        const bool shape = n.reconstruct(y, mask, spec).shape() == cassi::CubeShape{16, 16, 4};
        ok = ok && direction && wiring && shape;
        detail += fmt(" %s:%+lld%s", s.name, static_cast<long long>(count) - static_cast<long long>(n_full),
                      direction && wiring && shape ? "" : "(bad)");
    }
    auto both_off = base;
    both_off.use_gla = both_off.use_pna = false;
    bool rejected = false;
    try {
        net::Network{both_off};
    } catch (const ConfigError&) {
        rejected = true;
    }
    ok = ok && rejected;
    return {ok, "full-scale table results are reference-only and not reproduced at desk scale; topology checks vs " +
                    std::to_string(n_full) + " params:" + detail + (rejected ? "; both attention branches off rejected" : "")};
}

Outcome momentum_closed_form() {
    double worst = 0.0;
    double t = 1.0;
    long double direct = 1.0L;
    std::vector<double> seq{t};
    for (int k = 0; k < 50; ++k) {
        t = fista::momentum_update(t);
        direct = (1.0L + std::sqrt(1.0L + 4.0L * direct * direct)) / 2.0L;
        worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(t) - direct) / direct));
        seq.push_back(t);
    }
    std::mt19937_64 rng(8);
    const auto xc = random_cube(4, 5, 3, rng), xp = random_cube(4, 5, 3, rng);
    const auto e = fista::extrapolate(xc, xp, 1.0, fista::momentum_update(1.0));
    const bool exact = e.values() == xc.values();

    // The network's momentum sequence is byte-identical to the solver's.
    net::NetworkConfig cfg;
    cfg.stages = 9;
    cfg.spectral_channels = 2;
    cfg.base_channels = 4;
    const auto mask = cassi::CodedMask::random_binary(16, 16, 1);
    const cassi::DispersionSpec spec{1, 0};
    const auto out = net::Network(cfg).unfold(cassi::forward(random_cube(16, 16, 2, rng), mask, spec), mask, spec);
    const bool same = std::memcmp(out.momentum.data(), seq.data(), out.momentum.size() * sizeof(double)) == 0;
    return {worst < 1e-12 && exact && same,
            fmt("50-step t sequence max relative error %.1e (< 1e-12); t=1 extrapolation returns x exactly: %s; "
                "network sequence byte-identical: %s",
                worst, exact ? "yes" : "no", same ? "yes" : "no")};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"adjoint identity", adjoint_identity},
        {"gradient suite", gradient_suite},
        {"fista correctness", fista_correctness},
        {"degeneracy equivalences", degeneracies},
        {"shape law", shape_law},
        {"toy training smoke", training_smoke},
        {"reference results and ablation topology", topology_checks},
        {"momentum closed form", momentum_closed_form},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::printf("criterion %zu %s: %s | %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures;
}
