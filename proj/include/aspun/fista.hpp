#pragma once

// Classical FISTA for  min_x 1/2 ||Phi x - y||^2 + lambda ||Psi x||_1  with a scalar step.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "aspun/cassi.hpp"

namespace aspun::fista {

enum class Transform { identity, dct };

struct SolverConfig {
    /// Unset means 0.9 / L with L from power iteration.
    std::optional<double> step_size;
    double reg_weight = 0.0;
    std::size_t max_iters = 200;
    Transform transform = Transform::identity;
    /// Relative objective change below which the solve stops.
    double tolerance = 1e-8;
    /// false runs ISTA: the momentum scalar is pinned at 1.
    bool accelerate = true;
    std::size_t power_iters = 20;

    void validate() const;
};

struct SolverState {
    cassi::SpectralCube x_curr;
    cassi::SpectralCube x_prev;
    cassi::SpectralCube z;
    double t = 1.0;
    std::size_t iteration = 0;
};

struct SolveResult {
    cassi::SpectralCube x;
    std::vector<double> objective_trace;
    double step_size = 0.0;
};

double objective(const cassi::SpectralCube& x, const cassi::Measurement& y, const cassi::CodedMask& mask,
                 const cassi::DispersionSpec& spec, const SolverConfig& cfg);

/// z - rho * Phi^T (Phi z - y)
cassi::SpectralCube gradient_step(const cassi::SpectralCube& z, const cassi::Measurement& y,
                                  const cassi::CodedMask& mask, const cassi::DispersionSpec& spec, double rho);

double soft_threshold(double v, double theta);
std::vector<double> soft_threshold(std::span<const double> v, double theta);

/// (1 + sqrt(1 + 4 t^2)) / 2
double momentum_update(double t);

/// x_curr + ((t - 1) / t_next) (x_curr - x_prev)
cassi::SpectralCube extrapolate(const cassi::SpectralCube& x_curr, const cassi::SpectralCube& x_prev, double t,
                                double t_next);

// Orthonormal 2D DCT-II applied to every channel independently.
void dct2_forward(cassi::SpectralCube& cube);
void dct2_inverse(cassi::SpectralCube& cube);

/// argmin_x 1/2 ||x - r||^2 + theta ||Psi x||_1 for orthonormal Psi.
cassi::SpectralCube prox_l1(const cassi::SpectralCube& r, Transform transform, double theta);

SolverState initial_state(const cassi::Measurement& y, const cassi::DispersionSpec& spec, std::size_t channels);

/// One gradient/prox/momentum/extrapolation round; advances `state` in place.
void iterate(SolverState& state, const cassi::Measurement& y, const cassi::CodedMask& mask,
             const cassi::DispersionSpec& spec, const SolverConfig& cfg, double rho);

/// Throws NumericalError carrying the iteration index if the objective stops being finite.
SolveResult solve(const cassi::Measurement& y, const cassi::CodedMask& mask, const cassi::DispersionSpec& spec,
                  std::size_t channels, const SolverConfig& cfg);

/// Largest eigenvalue of Phi^T Phi by power iteration; the estimate is non-decreasing in `iters`.
double power_iteration_lipschitz(const cassi::CodedMask& mask, const cassi::DispersionSpec& spec,
                                 const cassi::CubeShape& shape, std::size_t iters, std::uint64_t seed = 0x5eed);

}  // namespace aspun::fista
