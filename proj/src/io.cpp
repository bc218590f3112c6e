#include "aspun/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "aspun/errors.hpp"

namespace aspun::io {

namespace {

constexpr std::uint8_t kHsc1Magic[4] = {'H', 'S', 'C', '1'};
constexpr std::size_t kHsc1HeaderBytes = 16;

std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
        throw std::invalid_argument(std::string(what) + " does not fit in 32 bits");
    }
    return static_cast<std::uint32_t>(v);
}

std::vector<double> widen(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>((bits >> s) & 0xFF));
}

void ByteReader::need(std::size_t n) const {
    if (remaining() < n) {
        throw FormatError("truncated data: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                              " available",
                          pos_);
    }
}

std::uint8_t ByteReader::u8() {
    need(1);
    return bytes_[pos_++];
}

std::uint16_t ByteReader::u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 8;
    return std::bit_cast<double>(v);
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::vector<std::uint8_t> encode_hsc1(std::uint32_t height, std::uint32_t width, std::uint32_t channels,
                                      std::span<const double> values) {
    const std::size_t count = std::size_t{height} * width * channels;
    if (values.size() != count) throw ShapeError("HSC1 payload size does not match header extents");
    std::vector<std::uint8_t> out;
    out.reserve(kHsc1HeaderBytes + 4 * count);
    out.insert(out.end(), std::begin(kHsc1Magic), std::end(kHsc1Magic));
    put_u32(out, height);
    put_u32(out, width);
    put_u32(out, channels);
    for (double v : values) put_f32(out, static_cast<float>(v));
    return out;
}

Hsc1Array decode_hsc1(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    auto magic = in.take(4);
    if (!std::equal(magic.begin(), magic.end(), std::begin(kHsc1Magic))) throw FormatError("bad HSC1 magic", 0);
    Hsc1Array out;
    out.height = in.u32();
    out.width = in.u32();
    out.channels = in.u32();
    const std::uint64_t count = std::uint64_t{out.height} * out.width * out.channels;
    if (count * 4 != in.remaining()) {
        if (count * 4 > in.remaining()) {
            throw FormatError("truncated HSC1 payload: expected " + std::to_string(count * 4) + " bytes, found " +
                                  std::to_string(in.remaining()),
                              bytes.size());
        }
        throw FormatError("trailing bytes after HSC1 payload", kHsc1HeaderBytes + count * 4);
    }
    out.values.resize(count);
    for (auto& v : out.values) v = in.f32();
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::random_device rd;
    auto tmp = path;
    tmp += ".tmp" + std::to_string(rd());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::filesystem::remove(tmp);
            throw std::runtime_error("short write to " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void save_cube(const std::filesystem::path& path, const cassi::SpectralCube& cube) {
    write_file_atomic(path, encode_hsc1(checked_u32(cube.height(), "height"), checked_u32(cube.width(), "width"),
                                        checked_u32(cube.channels(), "channels"), cube.data()));
}

void save_mask(const std::filesystem::path& path, const cassi::CodedMask& mask) {
    write_file_atomic(path, encode_hsc1(checked_u32(mask.height(), "height"), checked_u32(mask.width(), "width"), 1,
                                        mask.values()));
}

void save_measurement(const std::filesystem::path& path, const cassi::Measurement& meas) {
    write_file_atomic(path, encode_hsc1(checked_u32(meas.height(), "height"), checked_u32(meas.width(), "width"), 1,
                                        meas.data()));
}

cassi::SpectralCube load_cube(const std::filesystem::path& path) {
    auto arr = decode_hsc1(read_file(path));
    return cassi::SpectralCube(arr.height, arr.width, arr.channels, widen(arr.values));
}

cassi::CodedMask load_mask(const std::filesystem::path& path) {
    auto arr = decode_hsc1(read_file(path));
    if (arr.channels != 1) throw FormatError("mask file must have C = 1", 12);
    return cassi::CodedMask(arr.height, arr.width, widen(arr.values));
}

cassi::Measurement load_measurement(const std::filesystem::path& path) {
    auto arr = decode_hsc1(read_file(path));
    if (arr.channels != 1) throw FormatError("measurement file must have C = 1", 12);
    return cassi::Measurement(arr.height, arr.width, widen(arr.values));
}

void export_band_pgm(const std::filesystem::path& path, const cassi::SpectralCube& cube, std::size_t band,
                     double lo, double hi) {
    if (band >= cube.channels()) throw std::out_of_range("band index out of range");
    if (!(hi > lo)) throw std::invalid_argument("PGM range must satisfy hi > lo");
    const std::string header =
        "P5\n" + std::to_string(cube.width()) + " " + std::to_string(cube.height()) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (std::size_t h = 0; h < cube.height(); ++h) {
        for (std::size_t w = 0; w < cube.width(); ++w) {
            const double t = std::clamp((cube.at(h, w, band) - lo) / (hi - lo), 0.0, 1.0);
            bytes.push_back(static_cast<std::uint8_t>(std::lround(t * 255.0)));
        }
    }
    write_file_atomic(path, bytes);
}

}  // namespace aspun::io
