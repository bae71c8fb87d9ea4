#include "zip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace zip {

namespace {

constexpr char kMagic[4] = {'Z', 'I', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        write_u32(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_u32(os, static_cast<uint32_t>(e.extents.size()));
        uint64_t numel = 1;
        for (uint32_t ext : e.extents) {
            write_u32(os, ext);
            numel *= ext;
        }
        if (numel != e.values.size())
            throw std::runtime_error("checkpoint: entry " + e.name + " extents do not match values");
        os.write(reinterpret_cast<const char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failure on " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = read_u32(is);
    std::vector<CheckpointEntry> entries(count);
    for (auto& e : entries) {
        const uint32_t name_len = read_u32(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const uint32_t rank = read_u32(is);
        e.extents.resize(rank);
        uint64_t numel = 1;
        for (auto& ext : e.extents) {
            ext = read_u32(is);
            numel *= ext;
        }
        e.values.resize(numel);
        is.read(reinterpret_cast<char*>(e.values.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated entry " + e.name);
    }
    return entries;
}

}  // namespace zip
