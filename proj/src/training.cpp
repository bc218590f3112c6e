#include "aspun/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "aspun/errors.hpp"
#include "aspun/io.hpp"

namespace aspun::train {

using cassi::SpectralCube;

void TrainConfig::validate() const {
    if (!(lr_initial > lr_min) || !(lr_min >= 0.0)) throw ConfigError("need lr_initial > lr_min >= 0");
    if (total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(charbonnier_eps > 0.0)) throw ConfigError("train.charbonnier_eps must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("train.noise_sigma must be >= 0");
}

SpectralCube generate_scene(const SyntheticSceneSpec& spec) {
    const std::size_t H = spec.height, W = spec.width, C = spec.channels;
    SpectralCube cube(H, W, C);
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double extent = static_cast<double>(std::min(H, W));
    const double spectral_width = std::max(spec.spectral_smoothness * static_cast<double>(C), 0.5);
    std::vector<double> signature(C);
    for (std::size_t b = 0; b < spec.blob_count; ++b) {
        const double cy = unit(rng) * static_cast<double>(H);
        const double cx = unit(rng) * static_cast<double>(W);
        const double sigma = extent * (0.06 + 0.18 * unit(rng));
        const double amplitude = 0.4 + 0.6 * unit(rng);
        // Two spectral bumps on a floor, normalized to peak 1.
        const double floor = 0.2 * unit(rng);
        const double mu1 = unit(rng) * static_cast<double>(C - 1);
        const double mu2 = unit(rng) * static_cast<double>(C - 1);
        const double w2 = unit(rng);
        double peak = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double d1 = (static_cast<double>(c) - mu1) / spectral_width;
            const double d2 = (static_cast<double>(c) - mu2) / spectral_width;
            signature[c] = floor + std::exp(-0.5 * d1 * d1) + w2 * std::exp(-0.5 * d2 * d2);
            peak = std::max(peak, signature[c]);
        }
        for (double& s : signature) s /= peak;
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                const double dy = static_cast<double>(h) - cy, dx = static_cast<double>(w) - cx;
                const double spatial = amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                for (std::size_t c = 0; c < C; ++c) cube.at(h, w, c) += spatial * signature[c];
            }
        }
    }
    for (double& v : cube.values()) v = std::clamp(v, 0.0, 1.0);
    return cube;
}

double charbonnier_loss(std::span<const double> pred, std::span<const double> gt, double eps) {
    if (pred.size() != gt.size()) throw ShapeError("charbonnier_loss: operand sizes differ");
    if (!(eps > 0.0)) throw std::invalid_argument("charbonnier eps must be > 0");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - gt[i];
        acc += std::sqrt(d * d + eps * eps);
    }
    return acc / static_cast<double>(pred.size());
}

double cosine_lr(std::size_t step, const TrainConfig& cfg) {
    const double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    return cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
    if (grads.size() != params.size()) throw ShapeError("adam_step: gradient size differs from parameter size");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

Adam::Adam(net::ParameterSet& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
    states_.resize(params_.entries().size());
}

void Adam::step(double lr) {
    const auto& entries = params_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        ad::Tensor t = entries[i].tensor;
        std::vector<double> zeros;
        std::span<const double> g = t.grad();
        if (g.empty()) {
            zeros.assign(t.size(), 0.0);
            g = zeros;
        }
        adam_step(t.mutable_data(), g, states_[i], lr, cfg_);
    }
}

double psnr(std::span<const double> pred, std::span<const double> gt, double peak) {
    if (pred.size() != gt.size() || pred.empty()) throw ShapeError("psnr: operand sizes differ or are empty");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    mse /= static_cast<double>(pred.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double psnr(const SpectralCube& pred, const SpectralCube& gt, double peak) {
    if (pred.shape() != gt.shape()) throw ShapeError("psnr: cube shapes differ");
    return psnr(pred.data(), gt.data(), peak);
}

namespace {

std::vector<double> gaussian_taps(std::size_t size, double sigma) {
    std::vector<double> taps(size);
    const double center = static_cast<double>(size - 1) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - center;
        taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += taps[i];
    }
    for (double& t : taps) t /= total;
    return taps;
}

// Valid-region separable filtering of an H x W plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t H, std::size_t W,
                                 const std::vector<double>& taps) {
    const std::size_t k = taps.size(), Ho = H - k + 1, Wo = W - k + 1;
    std::vector<double> rows(H * Wo, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < Wo; ++w) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += taps[j] * plane[h * W + w + j];
            rows[h * Wo + w] = acc;
        }
    }
    std::vector<double> out(Ho * Wo, 0.0);
    for (std::size_t h = 0; h < Ho; ++h) {
        for (std::size_t w = 0; w < Wo; ++w) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += taps[j] * rows[(h + j) * Wo + w];
            out[h * Wo + w] = acc;
        }
    }
    return out;
}

}  // namespace

double ssim(const SpectralCube& pred, const SpectralCube& gt) {
    if (pred.shape() != gt.shape()) throw ShapeError("ssim: cube shapes differ");
    const std::size_t H = pred.height(), W = pred.width(), C = pred.channels();
    std::size_t win = std::min<std::size_t>(11, std::min(H, W));
    if (win % 2 == 0) --win;
    const auto taps = gaussian_taps(win, 1.5);
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> a(H * W), b(H * W), aa(H * W), bb(H * W), ab(H * W);
        for (std::size_t p = 0; p < H * W; ++p) {
            a[p] = pred.values()[p * C + c];
            b[p] = gt.values()[p * C + c];
            aa[p] = a[p] * a[p];
            bb[p] = b[p] * b[p];
            ab[p] = a[p] * b[p];
        }
        const auto mu_a = filter_valid(a, H, W, taps);
        const auto mu_b = filter_valid(b, H, W, taps);
        const auto e_aa = filter_valid(aa, H, W, taps);
        const auto e_bb = filter_valid(bb, H, W, taps);
        const auto e_ab = filter_valid(ab, H, W, taps);
        double acc = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / static_cast<double>(C);
}

Evaluation evaluate(const net::Network& net, const std::vector<SpectralCube>& scenes, const cassi::CodedMask& mask,
                    const cassi::DispersionSpec& spec) {
    Evaluation e;
    if (scenes.empty()) return e;
    for (const auto& scene : scenes) {
        const auto recon = net.reconstruct(cassi::forward(scene, mask, spec), mask, spec);
        e.psnr += psnr(recon, scene);
        e.ssim += ssim(recon, scene);
    }
    e.psnr /= static_cast<double>(scenes.size());
    e.ssim /= static_cast<double>(scenes.size());
    return e;
}

double scene_loss(const net::Network& net, const SpectralCube& scene, const cassi::CodedMask& mask,
                  const cassi::DispersionSpec& spec, double charbonnier_eps) {
    const auto recon = net.reconstruct(cassi::forward(scene, mask, spec), mask, spec);
    return charbonnier_loss(recon.data(), scene.data(), charbonnier_eps);
}

std::vector<TrainRecord> train(net::Network& net, const TrainConfig& cfg, const TrainData& data,
                               const std::function<void(const TrainRecord&)>& on_record) {
    cfg.validate();
    if (data.train_scenes.empty()) throw std::invalid_argument("training needs at least one scene");
    Adam adam(net.parameters(), cfg.adam);
    std::vector<TrainRecord> trace;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        TrainRecord rec;
        rec.step = step;
        rec.lr = cosine_lr(step, cfg);
        net.parameters().zero_grad();
        double loss_total = 0.0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const SpectralCube& scene = data.train_scenes[cursor++ % data.train_scenes.size()];
            const std::uint64_t noise_seed = cfg.seed * 0x9E3779B97F4A7C15ULL + step * cfg.batch_size + b;
            const auto y = cassi::simulate(scene, data.mask, data.spec, cfg.noise_sigma, noise_seed);
            const auto result = net.unfold(y, data.mask, data.spec);
            ad::Tensor loss = ad::charbonnier(result.x, net::cube_tensor(scene), cfg.charbonnier_eps);
            loss = ad::scale(loss, 1.0 / static_cast<double>(cfg.batch_size));
            if (!std::isfinite(loss.item())) throw NumericalError("non-finite training loss", static_cast<long>(step));
            loss_total += loss.item();
            ad::backward(loss);
        }
        rec.loss = loss_total;
        adam.step(rec.lr);
        const bool last = step + 1 == cfg.total_steps;
        if (!data.eval_scenes.empty() && (step % cfg.eval_interval == 0 || last)) {
            const auto e = evaluate(net, data.eval_scenes, data.mask, data.spec);
            rec.psnr = e.psnr;
            rec.ssim = e.ssim;
        }
        if (on_record) on_record(rec);
        trace.push_back(rec);
    }
    return trace;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TrainRecord>& trace) {
    std::ostringstream out;
    out.precision(10);
    out << "step,loss,lr,psnr,ssim\n";
    for (const auto& r : trace) {
        out << r.step << ',' << r.loss << ',' << r.lr << ',';
        if (r.psnr) out << *r.psnr;
        out << ',';
        if (r.ssim) out << *r.ssim;
        out << '\n';
    }
    const std::string s = out.str();
    io::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace aspun::train
