#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rangediff/optim.hpp"

namespace rangediff {

/// One named buffer of an "OLCK" checkpoint.
struct NamedBuffer {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

/// OLCK layout (little-endian): magic "OLCK", u16 version, u32 buffer count, then
/// per buffer u16 name length, UTF-8 name, u8 rank, u32 extents, f32 values.
inline constexpr std::uint16_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedBuffer>& buffers);
std::vector<NamedBuffer> read_checkpoint(const std::filesystem::path& path);

std::vector<NamedBuffer> snapshot(const ParamStore& params);
/// Copies buffers into same-named parameters. Every parameter must be present with matching shape.
void restore(ParamStore& params, const std::vector<NamedBuffer>& buffers);

}  // namespace rangediff
