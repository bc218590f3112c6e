#pragma once

// ASPW1 parameter checkpoints: "ASPW1", u32 LE entry count, then per entry
// u16 LE name length, UTF-8 name, u8 rank, rank x u32 LE extents, f64 LE values.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aspun/network.hpp"
#include "aspun/tensor.hpp"

namespace aspun::net {

struct CheckpointEntry {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params);
/// Throws FormatError with the byte offset of the failure.
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
/// Every parameter must appear in the file with a matching shape, and nothing else may.
void load_checkpoint(const std::filesystem::path& path, ParameterSet& params);
void apply_checkpoint(const std::vector<CheckpointEntry>& entries, ParameterSet& params);

}  // namespace aspun::net
