#include "aspun/fista.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "aspun/errors.hpp"

namespace aspun::fista {

using cassi::CodedMask;
using cassi::DispersionSpec;
using cassi::Measurement;
using cassi::SpectralCube;

namespace {

std::vector<double> dct_matrix(std::size_t n) {
    std::vector<double> m(n * n);
    for (std::size_t k = 0; k < n; ++k) {
        const double alpha = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            m[k * n + i] = alpha * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) *
                                            static_cast<double>(k) / (2.0 * static_cast<double>(n)));
        }
    }
    return m;
}

// Applies D (or D^T when `transpose`) along rows and columns of every channel.
void dct2_apply(SpectralCube& cube, bool transpose) {
    const std::size_t H = cube.height(), W = cube.width(), C = cube.channels();
    const auto dh = dct_matrix(H);
    const auto dw = dct_matrix(W);
    auto coef = [transpose](const std::vector<double>& d, std::size_t n, std::size_t out, std::size_t in) {
        return transpose ? d[in * n + out] : d[out * n + in];
    };
    std::vector<double> tmp(cube.size(), 0.0);
    auto data = cube.data();
    for (std::size_t k = 0; k < H; ++k) {
        for (std::size_t h = 0; h < H; ++h) {
            const double a = coef(dh, H, k, h);
            for (std::size_t j = 0; j < W * C; ++j) tmp[k * W * C + j] += a * data[h * W * C + j];
        }
    }
    std::fill(data.begin(), data.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t k = 0; k < W; ++k) {
            for (std::size_t w = 0; w < W; ++w) {
                const double a = coef(dw, W, k, w);
                for (std::size_t c = 0; c < C; ++c) data[(h * W + k) * C + c] += a * tmp[(h * W + w) * C + c];
            }
        }
    }
}

double squared_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return acc;
}

}  // namespace

void SolverConfig::validate() const {
    if (step_size && !(*step_size > 0.0)) throw ConfigError("solver step size must be > 0");
    if (!(reg_weight >= 0.0)) throw ConfigError("solver regularization weight must be >= 0");
    if (max_iters < 1) throw ConfigError("solver max_iters must be >= 1");
    if (!(tolerance >= 0.0)) throw ConfigError("solver tolerance must be >= 0");
    if (power_iters < 1) throw ConfigError("solver power_iters must be >= 1");
}

double objective(const SpectralCube& x, const Measurement& y, const CodedMask& mask, const DispersionSpec& spec,
                 const SolverConfig& cfg) {
    const Measurement phix = cassi::forward(x, mask, spec);
    if (phix.height() != y.height() || phix.width() != y.width()) {
        throw ShapeError("objective: measurement shape does not match Phi x");
    }
    double fidelity = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = phix.values()[i] - y.values()[i];
        fidelity += r * r;
    }
    double l1 = 0.0;
    if (cfg.reg_weight > 0.0) {
        SpectralCube coeffs = x;
        if (cfg.transform == Transform::dct) dct2_forward(coeffs);
        for (double v : coeffs.values()) l1 += std::abs(v);
    }
    return 0.5 * fidelity + cfg.reg_weight * l1;
}

SpectralCube gradient_step(const SpectralCube& z, const Measurement& y, const CodedMask& mask,
                           const DispersionSpec& spec, double rho) {
    Measurement residual = cassi::forward(z, mask, spec);
    if (residual.width() != y.width() || residual.height() != y.height()) {
        throw ShapeError("gradient_step: measurement shape does not match Phi z");
    }
    for (std::size_t i = 0; i < residual.size(); ++i) residual.values()[i] -= y.values()[i];
    const SpectralCube g = cassi::adjoint(residual, mask, spec, z.channels());
    SpectralCube r = z;
    for (std::size_t i = 0; i < r.size(); ++i) r.values()[i] -= rho * g.values()[i];
    return r;
}

double soft_threshold(double v, double theta) {
    if (!(theta >= 0.0)) throw std::invalid_argument("soft threshold needs theta >= 0");
    const double mag = std::abs(v) - theta;
    if (mag <= 0.0) return 0.0;
    return v > 0.0 ? mag : -mag;
}

std::vector<double> soft_threshold(std::span<const double> v, double theta) {
    if (!(theta >= 0.0)) throw std::invalid_argument("soft threshold must be >= 0");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = soft_threshold(v[i], theta);
    return out;
}

double momentum_update(double t) { return (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0; }

SpectralCube extrapolate(const SpectralCube& x_curr, const SpectralCube& x_prev, double t, double t_next) {
    if (x_curr.shape() != x_prev.shape()) throw ShapeError("extrapolate: iterate shapes differ");
    const double coeff = (t - 1.0) / t_next;
    SpectralCube z = x_curr;
    if (coeff == 0.0) return z;
    for (std::size_t i = 0; i < z.size(); ++i) {
        z.values()[i] += coeff * (x_curr.values()[i] - x_prev.values()[i]);
    }
    return z;
}

void dct2_forward(SpectralCube& cube) { dct2_apply(cube, false); }
void dct2_inverse(SpectralCube& cube) { dct2_apply(cube, true); }

SpectralCube prox_l1(const SpectralCube& r, Transform transform, double theta) {
    if (theta == 0.0) return r;
    SpectralCube out = r;
    if (transform == Transform::dct) dct2_forward(out);
    for (double& v : out.values()) v = soft_threshold(v, theta);
    if (transform == Transform::dct) dct2_inverse(out);
    return out;
}

SolverState initial_state(const Measurement& y, const DispersionSpec& spec, std::size_t channels) {
    SpectralCube x0 = cassi::shift_back(y, spec, channels);
    return SolverState{x0, x0, x0, 1.0, 0};
}

void iterate(SolverState& state, const Measurement& y, const CodedMask& mask, const DispersionSpec& spec,
             const SolverConfig& cfg, double rho) {
    const SpectralCube r = gradient_step(state.z, y, mask, spec, rho);
    SpectralCube x = prox_l1(r, cfg.transform, cfg.reg_weight * rho);
    const double t_next = cfg.accelerate ? momentum_update(state.t) : 1.0;
    state.z = extrapolate(x, state.x_curr, state.t, t_next);
    state.x_prev = std::move(state.x_curr);
    state.x_curr = std::move(x);
    state.t = t_next;
    ++state.iteration;
}

SolveResult solve(const Measurement& y, const CodedMask& mask, const DispersionSpec& spec, std::size_t channels,
                  const SolverConfig& cfg) {
    cfg.validate();
    const cassi::CubeShape shape{mask.height(), mask.width(), channels};
    const double rho =
        cfg.step_size ? *cfg.step_size : 0.9 / power_iteration_lipschitz(mask, spec, shape, cfg.power_iters);
    if (!std::isfinite(rho) || rho <= 0.0) throw NumericalError("degenerate sensing operator: step size " +
                                                                    std::to_string(rho),
                                                                0);

    SolverState state = initial_state(y, spec, channels);
    SolveResult result;
    result.step_size = rho;
    double previous = objective(state.x_curr, y, mask, spec, cfg);
    for (std::size_t k = 1; k <= cfg.max_iters; ++k) {
        iterate(state, y, mask, spec, cfg, rho);
        const double f = objective(state.x_curr, y, mask, spec, cfg);
        if (!std::isfinite(f)) throw NumericalError("FISTA objective diverged", static_cast<long>(k));
        result.objective_trace.push_back(f);
        const double scale = std::max(std::abs(previous), std::numeric_limits<double>::min());
        if (std::abs(previous - f) / scale < cfg.tolerance) break;
        previous = f;
    }
    result.x = std::move(state.x_curr);
    return result;
}

double power_iteration_lipschitz(const CodedMask& mask, const DispersionSpec& spec, const cassi::CubeShape& shape,
                                 std::size_t iters, std::uint64_t seed) {
    if (iters < 1) throw std::invalid_argument("power iteration needs iters >= 1");
    if (mask.height() != shape.height || mask.width() != shape.width) {
        throw ShapeError("power iteration: mask does not match cube shape");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.5, 1.5);
    std::vector<double> v(shape.size());
    for (double& x : v) x = uni(rng);
    double norm = std::sqrt(squared_norm(v));
    for (double& x : v) x /= norm;

    std::vector<double> meas(shape.height * cassi::measurement_width(shape.width, shape.channels, spec.step));
    std::vector<double> w(shape.size());
    double estimate = 0.0;
    for (std::size_t i = 0; i < iters; ++i) {
        cassi::apply_forward(v, shape, mask.values(), spec.step, meas);
        cassi::apply_adjoint(meas, shape, mask.values(), spec.step, w);
        norm = std::sqrt(squared_norm(w));
        if (norm == 0.0) return 0.0;
        estimate = norm;
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = w[j] / norm;
    }
    return estimate;
}

}  // namespace aspun::fista
