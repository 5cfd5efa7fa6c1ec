#pragma once

#include <cstdint>
#include <vector>

#include "sif/autodiff.hpp"
#include "sif/binary_io.hpp"

namespace sif {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Named tensor list: u32 count, then per tensor a u16-prefixed name, u32 rows,
// u32 cols and rows*cols little-endian f32 values.
void write_tensors(io::Writer& w, const std::vector<const ad::Param*>& params);
// Reads into `params` in order; names and shapes must match exactly.
void read_tensors(io::Reader& r, const std::vector<ad::Param*>& params);

}  // namespace sif
