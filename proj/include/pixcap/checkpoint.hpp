#pragma once

// Flat parameter checkpoint container.
//
// Layout (all integers little-endian):
//   magic   "PXCK"
//   u32     version (1)
//   u32     entry count
//   entries u16 name length, name bytes,
//           u8 dtype (0 = f32, 1 = f64),
//           u8 ndim, u32 dims[ndim],
//           raw values (little-endian, row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pixcap/error.hpp"
#include "pixcap/model.hpp"
#include "pixcap/tensor.hpp"

namespace pixcap {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

namespace detail {

template <typename V>
void write_pod(std::ofstream& f, V v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& f) {
    V v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!f) throw IoError("checkpoint truncated");
    return v;
}

}  // namespace detail

struct CheckpointEntry {
    std::string name;
    Shape shape;
    int dtype = 0;  // 0 f32, 1 f64
    std::vector<uint8_t> payload;
};

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<ParamInfo<T>>& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write("PXCK", 4);
    detail::write_pod<uint32_t>(f, 1);
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::write_pod<uint16_t>(f, static_cast<uint16_t>(p.name.size()));
        f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_pod<uint8_t>(f, std::is_same_v<T, float> ? 0 : 1);
        detail::write_pod<uint8_t>(f, static_cast<uint8_t>(p.tensor.ndim()));
        for (int d : p.tensor.shape()) detail::write_pod<uint32_t>(f, static_cast<uint32_t>(d));
        f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.data().size() * sizeof(T)));
    }
    if (!f) throw IoError("short write on checkpoint " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "PXCK", 4) != 0) throw IoError("not a checkpoint file: " + path);
    const auto version = detail::read_pod<uint32_t>(f);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_pod<uint32_t>(f);
    std::vector<CheckpointEntry> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const auto name_len = detail::read_pod<uint16_t>(f);
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        e.dtype = detail::read_pod<uint8_t>(f);
        const auto ndim = detail::read_pod<uint8_t>(f);
        int64_t n = 1;
        for (int d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<int>(detail::read_pod<uint32_t>(f)));
            n *= e.shape.back();
        }
        const size_t elem = e.dtype == 0 ? 4 : 8;
        e.payload.resize(static_cast<size_t>(n) * elem);
        f.read(reinterpret_cast<char*>(e.payload.data()), static_cast<std::streamsize>(e.payload.size()));
        if (!f) throw IoError("checkpoint truncated at entry " + e.name);
        out.push_back(std::move(e));
    }
    return out;
}

// Copies checkpoint values into the model's parameters by name;
// every parameter must be present with matching shape and dtype.
template <typename T>
void apply_checkpoint(Captioner<T>& model, const std::vector<CheckpointEntry>& entries) {
    const int want_dtype = std::is_same_v<T, float> ? 0 : 1;
    for (auto& p : model.params()) {
        const CheckpointEntry* found = nullptr;
        for (const auto& e : entries)
            if (e.name == p.name) {
                found = &e;
                break;
            }
        if (!found) throw InputError("checkpoint is missing parameter " + p.name);
        if (found->shape != p.tensor.shape())
            throw ShapeError("checkpoint parameter " + p.name + " has shape " + shape_str(found->shape) +
                             ", model expects " + shape_str(p.tensor.shape()));
        if (found->dtype != want_dtype) throw InputError("checkpoint dtype mismatch for " + p.name);
        std::memcpy(p.tensor.mutable_data().data(), found->payload.data(), found->payload.size());
    }
}

}  // namespace pixcap
