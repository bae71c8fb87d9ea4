#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace zip {

// Flat binary container: magic "ZIPT", version u32, count u32, then per
// record name (u32 length + UTF-8), rank u32, extents u32 each, and the
// values as little-endian float64. Round-trips bit-exactly.
struct CheckpointEntry {
    std::string name;
    std::vector<uint32_t> extents;
    std::vector<double> values;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);

// Throws std::runtime_error on bad magic, version, or truncation.
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace zip
