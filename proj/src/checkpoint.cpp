#include "aspun/checkpoint.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <stdexcept>

#include "aspun/errors.hpp"
#include "aspun/io.hpp"

namespace aspun::net {

namespace {

constexpr char kMagic[5] = {'A', 'S', 'P', 'W', '1'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    io::put_u32(out, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
        if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw std::invalid_argument("parameter name too long: " + e.name);
        }
        io::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        const auto& shape = e.tensor.shape();
        if (shape.size() > 255) throw std::invalid_argument("parameter rank exceeds 255: " + e.name);
        out.push_back(static_cast<std::uint8_t>(shape.size()));
        for (auto extent : shape) {
            if (extent > std::numeric_limits<std::uint32_t>::max()) {
                throw std::invalid_argument("parameter extent exceeds 32 bits: " + e.name);
            }
            io::put_u32(out, static_cast<std::uint32_t>(extent));
        }
        for (double v : e.tensor.data()) io::put_f64(out, v);
    }
    return out;
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader in(bytes);
    auto magic = in.take(5);
    if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw FormatError("bad ASPW1 magic", 0);
    const std::uint32_t count = in.u32();
    std::vector<CheckpointEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const std::uint16_t len = in.u16();
        auto name = in.take(len);
        e.name.assign(name.begin(), name.end());
        const std::uint8_t rank = in.u8();
        std::uint64_t n = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            e.shape.push_back(in.u32());
            n *= e.shape.back();
        }
        if (n * 8 > in.remaining()) {
            throw FormatError("truncated values for " + e.name + ": need " + std::to_string(n * 8) + " bytes",
                              in.offset());
        }
        e.values.resize(n);
        for (auto& v : e.values) v = in.f64();
        entries.push_back(std::move(e));
    }
    if (in.remaining() != 0) throw FormatError("trailing bytes after ASPW1 entries", in.offset());
    return entries;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
    io::write_file_atomic(path, encode_checkpoint(params));
}

void apply_checkpoint(const std::vector<CheckpointEntry>& entries, ParameterSet& params) {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!params.contains(e.name)) throw ConfigError("checkpoint parameter " + e.name + " not in network");
        const auto t = params.get(e.name);
        if (t.shape() != e.shape) {
            throw ShapeError("checkpoint parameter " + e.name + " has shape " + ad::to_string(e.shape) +
                             ", network expects " + ad::to_string(t.shape()));
        }
        if (!seen.insert(e.name).second) throw ConfigError("checkpoint repeats parameter " + e.name);
    }
    for (const auto& p : params.entries()) {
        if (!seen.count(p.name)) throw ConfigError("checkpoint is missing parameter " + p.name);
    }
    for (const auto& e : entries) params.assign(e.name, e.values);
}

void load_checkpoint(const std::filesystem::path& path, ParameterSet& params) {
    apply_checkpoint(decode_checkpoint(io::read_file(path)), params);
}

}  // namespace aspun::net
