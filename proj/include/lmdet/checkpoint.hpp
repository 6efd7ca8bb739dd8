#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lmdet/errors.hpp"
#include "lmdet/net.hpp"

namespace lmdet {

// Checkpoint container, version 1. All integers and doubles little-endian:
//
//   "LMCK"                       4-byte magic
//   u32  version                 currently 1
//   u64  meta length, bytes      architecture key=value text + rng_seed/step
//   u64  parameter count
//   per parameter:
//     u64 name length, bytes
//     u32 rank
//     u64 dims[rank]
//     f64 values[prod(dims)]
//   u64  slot count              momentum slots, same record layout
//   ...
//   u32  CRC-32 of everything above
//
// The same (model, version) always produces the same bytes.

namespace detail {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'L', 'M', 'C', 'K'};

inline std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

struct ByteWriter {
    std::string out;
    void raw(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        raw(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        raw(b, 8);
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;
    void need(std::size_t k) const {
        if (pos + k > n) throw IoError("checkpoint truncated");
    }
    void raw(void* dst, std::size_t k) {
        need(k);
        std::memcpy(dst, p + pos, k);
        pos += k;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t len = u64();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
};

inline void write_tensor_record(ByteWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) w.u64(static_cast<std::uint64_t>(t.dim(i)));
    for (double v : t.values()) w.f64(v);
}

inline std::pair<std::string, Tensor> read_tensor_record(ByteReader& r, bool requires_grad) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError("checkpoint: implausible tensor rank");
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
        const std::uint64_t v = r.u64();
        if (v == 0 || v > (1u << 30)) throw IoError("checkpoint: implausible dimension");
        d = static_cast<int>(v);
        numel *= v;
    }
    std::vector<double> values(numel);
    for (auto& v : values) v = r.f64();
    return {std::move(name), Tensor(std::move(shape), std::move(values), requires_grad)};
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelState& model) {
    detail::ByteWriter w;
    w.raw(detail::kCheckpointMagic, 4);
    w.u32(detail::kCheckpointVersion);
    std::string meta = model.spec.to_text();
    meta += "rng_seed=" + std::to_string(model.rng_seed) + "\n";
    meta += "step=" + std::to_string(model.step) + "\n";
    w.str(meta);
    w.u64(model.params.size());
    for (const auto& [name, t] : model.params) detail::write_tensor_record(w, name, t);
    w.u64(model.slots.size());
    for (const auto& [name, t] : model.slots) detail::write_tensor_record(w, name, t);
    const std::uint32_t crc =
        detail::crc32(reinterpret_cast<const unsigned char*>(w.out.data()), w.out.size());
    w.u32(crc);
    return std::move(w.out);
}

inline void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write on checkpoint: " + path.string());
}

inline ModelState deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 12) throw IoError("checkpoint truncated");
    const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t stored_crc =
        static_cast<std::uint32_t>(data[bytes.size() - 4]) |
        static_cast<std::uint32_t>(data[bytes.size() - 3]) << 8 |
        static_cast<std::uint32_t>(data[bytes.size() - 2]) << 16 |
        static_cast<std::uint32_t>(data[bytes.size() - 1]) << 24;
    if (detail::crc32(data, bytes.size() - 4) != stored_crc)
        throw IoError("checkpoint checksum mismatch (corrupt or truncated file)");

    detail::ByteReader r{data, bytes.size() - 4};
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
        throw IoError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != detail::kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) +
                      " not supported (this build reads version " +
                      std::to_string(detail::kCheckpointVersion) + ")");

    const std::string meta = r.str();
    ModelState model;
    std::string spec_text;
    std::istringstream ms(meta);
    std::string line;
    while (std::getline(ms, line)) {
        if (line.rfind("rng_seed=", 0) == 0)
            model.rng_seed = std::stoull(line.substr(9));
        else if (line.rfind("step=", 0) == 0)
            model.step = std::stoll(line.substr(5));
        else
            spec_text += line + "\n";
    }
    model.spec = ArchitectureSpec::from_text(spec_text);

    const auto expected = detail::parameter_table(model.spec);
    const std::uint64_t param_count = r.u64();
    if (param_count != expected.size())
        throw DataError("checkpoint: parameter count does not match architecture");
    for (const auto& def : expected) {
        auto [name, t] = detail::read_tensor_record(r, /*requires_grad=*/true);
        if (name != def.name || t.shape() != def.shape)
            throw DataError("checkpoint: parameter '" + name +
                            "' does not match architecture entry '" + def.name + "'");
        model.params.emplace_back(std::move(name), std::move(t));
    }
    const std::uint64_t slot_count = r.u64();
    if (slot_count != expected.size())
        throw DataError("checkpoint: slot count does not match architecture");
    for (const auto& def : expected) {
        auto [name, t] = detail::read_tensor_record(r, /*requires_grad=*/false);
        if (name != def.name || t.shape() != def.shape)
            throw DataError("checkpoint: slot '" + name + "' does not match architecture");
        model.slots.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos != r.n) throw IoError("checkpoint: trailing bytes after slot records");
    return model;
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace lmdet
