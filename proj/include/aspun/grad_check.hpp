#pragma once

// Central finite-difference checks of reverse-mode gradients, plus the registered
// suite covering every primitive op and composite network block.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aspun/tensor.hpp"

namespace aspun::gradcheck {

struct GradInput {
    std::string name;
    ad::Tensor tensor;  // must be a leaf with requires_grad
};

struct Options {
    double step = 1e-5;
    /// Per input: coordinates probed one at a time (0 = every coordinate).
    std::size_t max_coordinates = 0;
    /// Per input: random Gaussian directions probed instead of coordinates (0 = coordinate mode).
    std::size_t directions = 0;
    /// Denominator floor of the relative error.
    double floor = 1e-8;
    std::uint64_t seed = 1;
};

struct Report {
    double max_rel_error = 0.0;
    std::string worst_input;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t probes = 0;
};

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-8);

/// `loss` rebuilds a one-element tensor from the current values of the inputs.
Report check(const std::function<ad::Tensor()>& loss, const std::vector<GradInput>& inputs, const Options& opts);

struct Case {
    std::string name;
    /// Loss is linear in each input separately; held to the tighter tolerance.
    bool linear = false;
    std::function<Report()> run;

    double tolerance() const noexcept { return linear ? 1e-7 : 1e-4; }
};

/// Every primitive op followed by the composite blocks (GLA, PNA, gated FFN, NHAT, ISA, ASP,
/// full one-stage network on a 16x16x4 scene).
const std::vector<Case>& suite();

}  // namespace aspun::gradcheck
