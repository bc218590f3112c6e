#pragma once

// CASSI sensing model: coded-mask modulation, per-channel dispersion shift and
// detector integration, plus the exact adjoint of the composed operator.
//
// All cubes are stored row-major in (h, w, c) order.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace aspun::cassi {

struct CubeShape {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;

    std::size_t size() const noexcept { return height * width * channels; }
    bool operator==(const CubeShape&) const = default;
};

/// Evenly spaced wavelengths over [450, 650] nm; a single channel sits at 550 nm.
std::vector<double> default_wavelengths(std::size_t channels);

class SpectralCube {
public:
    SpectralCube() = default;
    SpectralCube(std::size_t height, std::size_t width, std::size_t channels);
    SpectralCube(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data);
    SpectralCube(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data,
                 std::vector<double> wavelengths);

    std::size_t height() const noexcept { return shape_.height; }
    std::size_t width() const noexcept { return shape_.width; }
    std::size_t channels() const noexcept { return shape_.channels; }
    const CubeShape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    const std::vector<double>& wavelengths() const noexcept { return wavelengths_; }
    void set_wavelengths(std::vector<double> wavelengths);

    double& at(std::size_t h, std::size_t w, std::size_t c) noexcept {
        return data_[(h * shape_.width + w) * shape_.channels + c];
    }
    double at(std::size_t h, std::size_t w, std::size_t c) const noexcept {
        return data_[(h * shape_.width + w) * shape_.channels + c];
    }

    /// Throws std::invalid_argument if any value is not finite.
    void check_finite() const;

private:
    CubeShape shape_{};
    std::vector<double> data_;
    std::vector<double> wavelengths_;
};

/// Transmission pattern of the coded aperture; values in [0, 1].
class CodedMask {
public:
    CodedMask() = default;
    CodedMask(std::size_t height, std::size_t width, std::vector<double> values);

    static CodedMask ones(std::size_t height, std::size_t width);
    /// i.i.d. Bernoulli(0.5) binary mask.
    static CodedMask random_binary(std::size_t height, std::size_t width, std::uint64_t seed);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::span<const double> values() const noexcept { return values_; }
    double at(std::size_t h, std::size_t w) const noexcept { return values_[h * width_ + w]; }

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> values_;
};

/// Disperser geometry. Channel n lands at detector column offset step * n; the
/// reference channel (zero physical shift, wavelength lambda_c) is metadata only.
struct DispersionSpec {
    std::size_t step = 1;
    std::size_t reference_channel = 0;

    void validate(std::size_t channels) const;
};

class Measurement {
public:
    Measurement() = default;
    Measurement(std::size_t height, std::size_t width);
    Measurement(std::size_t height, std::size_t width, std::vector<double> data);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& at(std::size_t h, std::size_t w) noexcept { return data_[h * width_ + w]; }
    double at(std::size_t h, std::size_t w) const noexcept { return data_[h * width_ + w]; }

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> data_;
};

/// Detector width W + d * (C - 1).
std::size_t measurement_width(std::size_t width, std::size_t channels, std::size_t step) noexcept;

SpectralCube modulate(const SpectralCube& cube, const CodedMask& mask);
SpectralCube disperse(const SpectralCube& cube, const DispersionSpec& spec);
Measurement integrate(const SpectralCube& shifted);

/// Phi x, computed in one pass (equal to integrate(disperse(modulate(x)))).
Measurement forward(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec);

/// Phi^T y for a cube with `channels` spectral bands.
SpectralCube adjoint(const Measurement& meas, const CodedMask& mask, const DispersionSpec& spec,
                     std::size_t channels);

/// forward(cube) plus i.i.d. N(0, noise_sigma^2) detector noise.
Measurement simulate(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec,
                     double noise_sigma, std::mt19937_64& rng);
Measurement simulate(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec,
                     double noise_sigma, std::uint64_t seed);

/// Replicates the measurement into `channels` bands, cropping columns [d*n, d*n + W) for band n.
SpectralCube shift_back(const Measurement& meas, const DispersionSpec& spec, std::size_t channels);

// Span kernels shared with the differentiable sensing ops. `mask` has H*W entries,
// `meas` has H*measurement_width(W, C, step) entries. apply_adjoint overwrites `cube`.
void apply_forward(std::span<const double> cube, const CubeShape& shape, std::span<const double> mask,
                   std::size_t step, std::span<double> meas);
void apply_adjoint(std::span<const double> meas, const CubeShape& shape, std::span<const double> mask,
                   std::size_t step, std::span<double> cube);

}  // namespace aspun::cassi
