#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/tensor.hpp"

namespace slimrec {

// Stable shortest-roundtrip-ish formatting for logs and reports; %.17g keeps
// doubles bit-reproducible across runs of the same binary.
inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt_real_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// All artifact files are written via temp-file + rename, so a crashed run
// never leaves a truncated artifact behind.
inline void atomic_write(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ParseError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw ParseError("short write to " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline uint64_t fnv1a_hash(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string content_hash_of_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path + " for hashing");
    uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a_hash(buf, static_cast<size_t>(in.gcount()), h);
    }
    char out[24];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: flat little-endian binary of named tensors.
//   "SLRC" | u32 version | u64 count | per tensor:
//   u32 name length | name | u32 rank | u32 dims... | f64 data...
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, size_t& at) {
    if (at + sizeof(T) > in.size()) throw ParseError("truncated checkpoint");
    T v;
    std::memcpy(&v, in.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const std::vector<const Parameter*>& params) {
    std::string out;
    out += "SLRC";
    detail::put<uint32_t>(out, kCheckpointVersion);
    detail::put<uint64_t>(out, params.size());
    for (const Parameter* p : params) {
        detail::put<uint32_t>(out, static_cast<uint32_t>(p->name.size()));
        out += p->name;
        detail::put<uint32_t>(out, static_cast<uint32_t>(p->value.rank()));
        for (int d : p->value.shape()) detail::put<uint32_t>(out, static_cast<uint32_t>(d));
        for (size_t i = 0; i < p->value.numel(); ++i)
            detail::put<double>(out, static_cast<double>(p->value[i]));
    }
    return out;
}

inline void write_checkpoint(const std::string& path, const std::vector<const Parameter*>& params) {
    atomic_write(path, serialize_checkpoint(params));
}

struct NamedTensor {
    std::string name;
    Tensor value;
};

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    size_t at = 0;
    if (data.size() < 4 || data.compare(0, 4, "SLRC") != 0)
        throw ParseError(path + " is not a checkpoint (bad magic)");
    at = 4;
    uint32_t version = detail::get<uint32_t>(data, at);
    if (version != kCheckpointVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version));
    uint64_t count = detail::get<uint64_t>(data, at);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t name_len = detail::get<uint32_t>(data, at);
        if (at + name_len > data.size()) throw ParseError("truncated checkpoint name");
        std::string name = data.substr(at, name_len);
        at += name_len;
        uint32_t rank = detail::get<uint32_t>(data, at);
        std::vector<int> shape;
        for (uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(detail::get<uint32_t>(data, at)));
        Tensor t(shape);
        for (size_t j = 0; j < t.numel(); ++j) t[j] = static_cast<real>(detail::get<double>(data, at));
        out.push_back(NamedTensor{std::move(name), std::move(t)});
    }
    return out;
}

// Loads checkpoint values into an existing parameter list, matching by name
// and validating shapes before any value moves.
inline void restore_parameters(const std::vector<NamedTensor>& stored, const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        const NamedTensor* found = nullptr;
        for (const auto& nt : stored)
            if (nt.name == p->name) {
                found = &nt;
                break;
            }
        if (!found) throw ParseError("checkpoint is missing tensor '" + p->name + "'");
        if (!(found->value.shape() == p->value.shape()))
            throw ParseError("checkpoint tensor '" + p->name + "' has shape " + found->value.shape_str() +
                             ", expected " + p->value.shape_str());
    }
    for (Parameter* p : params)
        for (const auto& nt : stored)
            if (nt.name == p->name) p->value = nt.value;
}

}  // namespace slimrec
