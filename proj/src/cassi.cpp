#include "aspun/cassi.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "aspun/errors.hpp"

namespace aspun::cassi {

namespace {

std::string dims(std::size_t h, std::size_t w) {
    return std::to_string(h) + "x" + std::to_string(w);
}

void require_mask_fits(const CubeShape& shape, const CodedMask& mask) {
    if (mask.height() != shape.height || mask.width() != shape.width) {
        throw ShapeError("mask is " + dims(mask.height(), mask.width()) + " but cube is " +
                         dims(shape.height, shape.width));
    }
}

}  // namespace

std::vector<double> default_wavelengths(std::size_t channels) {
    std::vector<double> out(channels);
    if (channels == 1) {
        out[0] = 550.0;
        return out;
    }
    for (std::size_t n = 0; n < channels; ++n) {
        out[n] = 450.0 + 200.0 * static_cast<double>(n) / static_cast<double>(channels - 1);
    }
    return out;
}

SpectralCube::SpectralCube(std::size_t height, std::size_t width, std::size_t channels)
    : SpectralCube(height, width, channels, std::vector<double>(height * width * channels, 0.0)) {}

SpectralCube::SpectralCube(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
    : SpectralCube(height, width, channels, std::move(data), default_wavelengths(channels)) {}

SpectralCube::SpectralCube(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data,
                           std::vector<double> wavelengths)
    : shape_{height, width, channels}, data_(std::move(data)) {
    if (channels == 0) throw ShapeError("spectral cube needs at least one channel");
    if (data_.size() != shape_.size()) {
        throw ShapeError("cube data has " + std::to_string(data_.size()) + " values, expected " +
                         std::to_string(shape_.size()));
    }
    set_wavelengths(std::move(wavelengths));
}

void SpectralCube::set_wavelengths(std::vector<double> wavelengths) {
    if (wavelengths.size() != shape_.channels) {
        throw ShapeError("expected " + std::to_string(shape_.channels) + " wavelengths, got " +
                         std::to_string(wavelengths.size()));
    }
    for (std::size_t n = 1; n < wavelengths.size(); ++n) {
        if (!(wavelengths[n] > wavelengths[n - 1])) {
            throw std::invalid_argument("wavelengths must be strictly increasing");
        }
    }
    wavelengths_ = std::move(wavelengths);
}

void SpectralCube::check_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            throw std::invalid_argument("non-finite cube value at flat index " + std::to_string(i));
        }
    }
}

CodedMask::CodedMask(std::size_t height, std::size_t width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
    if (values_.size() != height * width) {
        throw ShapeError("mask data has " + std::to_string(values_.size()) + " values, expected " +
                         std::to_string(height * width));
    }
    for (double v : values_) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("mask values must lie in [0, 1]");
    }
}

CodedMask CodedMask::ones(std::size_t height, std::size_t width) {
    return CodedMask(height, width, std::vector<double>(height * width, 1.0));
}

CodedMask CodedMask::random_binary(std::size_t height, std::size_t width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> values(height * width);
    for (double& v : values) v = coin(rng) ? 1.0 : 0.0;
    return CodedMask(height, width, std::move(values));
}

void DispersionSpec::validate(std::size_t channels) const {
    if (channels == 0) throw ShapeError("dispersion needs at least one channel");
    if (reference_channel >= channels) {
        throw std::invalid_argument("reference channel " + std::to_string(reference_channel) +
                                    " out of range for " + std::to_string(channels) + " channels");
    }
}

Measurement::Measurement(std::size_t height, std::size_t width)
    : height_(height), width_(width), data_(height * width, 0.0) {}

Measurement::Measurement(std::size_t height, std::size_t width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != height * width) {
        throw ShapeError("measurement data has " + std::to_string(data_.size()) + " values, expected " +
                         std::to_string(height * width));
    }
}

std::size_t measurement_width(std::size_t width, std::size_t channels, std::size_t step) noexcept {
    return width + step * (channels - 1);
}

SpectralCube modulate(const SpectralCube& cube, const CodedMask& mask) {
    require_mask_fits(cube.shape(), mask);
    SpectralCube out = cube;
    const std::size_t C = cube.channels();
    auto m = mask.values();
    auto data = out.data();
    for (std::size_t p = 0; p < m.size(); ++p) {
        for (std::size_t c = 0; c < C; ++c) data[p * C + c] *= m[p];
    }
    return out;
}

SpectralCube disperse(const SpectralCube& cube, const DispersionSpec& spec) {
    spec.validate(cube.channels());
    const std::size_t H = cube.height(), W = cube.width(), C = cube.channels();
    const std::size_t Wm = measurement_width(W, C, spec.step);
    SpectralCube out(H, Wm, C, std::vector<double>(H * Wm * C, 0.0), cube.wavelengths());
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
            for (std::size_t c = 0; c < C; ++c) out.at(h, w + spec.step * c, c) = cube.at(h, w, c);
        }
    }
    return out;
}

Measurement integrate(const SpectralCube& shifted) {
    const std::size_t H = shifted.height(), W = shifted.width(), C = shifted.channels();
    Measurement out(H, W);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += shifted.at(h, w, c);
            out.at(h, w) = acc;
        }
    }
    return out;
}

void apply_forward(std::span<const double> cube, const CubeShape& shape, std::span<const double> mask,
                   std::size_t step, std::span<double> meas) {
    const std::size_t H = shape.height, W = shape.width, C = shape.channels;
    const std::size_t Wm = measurement_width(W, C, step);
    if (cube.size() != shape.size() || mask.size() != H * W || meas.size() != H * Wm) {
        throw ShapeError("apply_forward: inconsistent buffer sizes");
    }
    std::fill(meas.begin(), meas.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        double* row = meas.data() + h * Wm;
        for (std::size_t w = 0; w < W; ++w) {
            const double m = mask[h * W + w];
            const double* px = cube.data() + (h * W + w) * C;
            for (std::size_t c = 0; c < C; ++c) row[w + step * c] += m * px[c];
        }
    }
}

void apply_adjoint(std::span<const double> meas, const CubeShape& shape, std::span<const double> mask,
                   std::size_t step, std::span<double> cube) {
    const std::size_t H = shape.height, W = shape.width, C = shape.channels;
    const std::size_t Wm = measurement_width(W, C, step);
    if (cube.size() != shape.size() || mask.size() != H * W || meas.size() != H * Wm) {
        throw ShapeError("apply_adjoint: inconsistent buffer sizes");
    }
    for (std::size_t h = 0; h < H; ++h) {
        const double* row = meas.data() + h * Wm;
        for (std::size_t w = 0; w < W; ++w) {
            const double m = mask[h * W + w];
            double* px = cube.data() + (h * W + w) * C;
            for (std::size_t c = 0; c < C; ++c) px[c] = m * row[w + step * c];
        }
    }
}

Measurement forward(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec) {
    require_mask_fits(cube.shape(), mask);
    spec.validate(cube.channels());
    Measurement out(cube.height(), measurement_width(cube.width(), cube.channels(), spec.step));
    apply_forward(cube.data(), cube.shape(), mask.values(), spec.step, out.data());
    return out;
}

SpectralCube adjoint(const Measurement& meas, const CodedMask& mask, const DispersionSpec& spec,
                     std::size_t channels) {
    spec.validate(channels);
    const std::size_t H = mask.height(), W = mask.width();
    if (meas.height() != H || meas.width() != measurement_width(W, channels, spec.step)) {
        throw ShapeError("measurement is " + dims(meas.height(), meas.width()) + ", expected " +
                         dims(H, measurement_width(W, channels, spec.step)));
    }
    SpectralCube out(H, W, channels);
    apply_adjoint(meas.data(), out.shape(), mask.values(), spec.step, out.data());
    return out;
}

Measurement simulate(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec,
                     double noise_sigma, std::mt19937_64& rng) {
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");
    Measurement out = forward(cube, mask, spec);
    if (noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, noise_sigma);
        for (double& v : out.values()) v += noise(rng);
    }
    return out;
}

Measurement simulate(const SpectralCube& cube, const CodedMask& mask, const DispersionSpec& spec,
                     double noise_sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return simulate(cube, mask, spec, noise_sigma, rng);
}

SpectralCube shift_back(const Measurement& meas, const DispersionSpec& spec, std::size_t channels) {
    spec.validate(channels);
    const std::size_t shift_total = spec.step * (channels - 1);
    if (meas.width() <= shift_total) {
        throw ShapeError("measurement width " + std::to_string(meas.width()) + " too small for " +
                         std::to_string(channels) + " channels at step " + std::to_string(spec.step));
    }
    const std::size_t H = meas.height(), W = meas.width() - shift_total;
    SpectralCube out(H, W, channels);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t w = 0; w < W; ++w) {
            for (std::size_t c = 0; c < channels; ++c) out.at(h, w, c) = meas.at(h, w + spec.step * c);
        }
    }
    return out;
}

}  // namespace aspun::cassi
