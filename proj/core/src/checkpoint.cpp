#include "boxcal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace boxcal::nn {

namespace {

constexpr char kMagic[4] = {'B', 'X', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    write_u32(f, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_u32(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(f, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) write_u32(f, static_cast<std::uint32_t>(d));
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_checkpoint: " + path + " is not a boxcal checkpoint");
    const std::uint32_t version = read_u32(f);
    if (version != kVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = read_u32(f);
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const std::uint32_t rank = read_u32(f);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u32(f));
        Tensor<float> t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!f) throw std::runtime_error("load_checkpoint: truncated tensor '" + name + "'");
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace boxcal::nn
