#pragma once

// HSC1 container: "HSC1", u32 LE H, W, C, then H*W*C float32 LE values in (h, w, c) order.
// Masks and measurements are HSC1 files with C = 1.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "aspun/cassi.hpp"

namespace aspun::io {

struct Hsc1Array {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::vector<float> values;
};

std::vector<std::uint8_t> encode_hsc1(std::uint32_t height, std::uint32_t width, std::uint32_t channels,
                                      std::span<const double> values);
/// Throws FormatError with the offending byte offset.
Hsc1Array decode_hsc1(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void save_cube(const std::filesystem::path& path, const cassi::SpectralCube& cube);
void save_mask(const std::filesystem::path& path, const cassi::CodedMask& mask);
void save_measurement(const std::filesystem::path& path, const cassi::Measurement& meas);

cassi::SpectralCube load_cube(const std::filesystem::path& path);
cassi::CodedMask load_mask(const std::filesystem::path& path);
cassi::Measurement load_measurement(const std::filesystem::path& path);

/// 8-bit binary PGM of one band, linearly mapped from [lo, hi] with clipping.
void export_band_pgm(const std::filesystem::path& path, const cassi::SpectralCube& cube, std::size_t band,
                     double lo = 0.0, double hi = 1.0);

// Little-endian primitives shared by the checkpoint codec.
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);

/// Bounds-checked little-endian reader; every failure reports its byte offset.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    float f32();
    double f64();
    std::span<const std::uint8_t> take(std::size_t n);

private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace aspun::io
