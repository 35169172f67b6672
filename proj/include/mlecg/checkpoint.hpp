#pragma once

#include <string>
#include <vector>

#include "mlecg/errors.hpp"

namespace mlecg::num {

// Self-describing binary weight container. Layout, all little-endian:
//   magic "IMLN" | u32 version | u32 entry count |
//   per entry: u32 name length | name bytes | u32 ndim | u32 dims... |
//              f64 values (row-major)
// Optimizer state and run metadata travel as ordinary entries under the
// reserved "opt." and "meta." name prefixes. Round-trips byte-exactly.
struct CheckpointEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

}  // namespace mlecg::num
