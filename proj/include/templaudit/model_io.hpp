#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "templaudit/csv.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/mac_model.hpp"

// Model file layout, all integers and floats little-endian:
//
//   "MACB"                       4-byte magic
//   u16 version                  currently 1
//   spec block:
//     u32 n_in
//     u32 n_trunk, u32 size x n_trunk
//     u32 n_branch, u32 size x n_branch
//     f64 p_drop, u8 regularize_heads, f64 bn_momentum, f64 bn_epsilon
//     u32 n_heads, then per head: u32 name_len, name bytes, u32 n_out
//   per layer (trunk, then each branch's hidden layers and head):
//     f64 weight[fan_in*fan_out] (row-major), f64 bias[fan_out]
//     if normalized: f64 gamma, beta, running_mean, running_var [fan_out each]
//   u32 CRC-32 of every preceding byte
namespace templaudit {

inline constexpr char kModelMagic[4] = {'M', 'A', 'C', 'B'};
inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void f64s(std::span<const double> vs) {
        for (const double v : vs) f64(v);
    }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    double f64() { return std::bit_cast<double>(get(8)); }
    void f64s(std::span<double> out) {
        for (double& v : out) v = f64();
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError("model stream truncated");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

inline void write_layer(ByteWriter& w, const DenseLayer& layer) {
    w.f64s(layer.weight.values());
    w.f64s(layer.bias);
    if (layer.normalized) {
        w.f64s(layer.gamma);
        w.f64s(layer.beta);
        w.f64s(layer.running_mean);
        w.f64s(layer.running_var);
    }
}

inline void read_layer(ByteReader& r, DenseLayer& layer) {
    r.f64s(layer.weight.values());
    r.f64s(layer.bias);
    if (layer.normalized) {
        r.f64s(layer.gamma);
        r.f64s(layer.beta);
        r.f64s(layer.running_mean);
        r.f64s(layer.running_var);
        for (const double v : layer.running_var)
            if (!(v > 0.0)) throw FormatError("model stream has non-positive running variance");
    }
}

inline std::uint32_t checked_u32(std::size_t v) {
    if (v > 0xFFFFFFFFu) throw FormatError("value too large for model format");
    return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const MacModel& model) {
    detail::ByteWriter w;
    const auto& spec = model.spec;
    w.raw(std::string_view(kModelMagic, 4));
    w.u16(kModelFormatVersion);
    w.u32(detail::checked_u32(spec.n_in));
    w.u32(detail::checked_u32(spec.trunk_sizes.size()));
    for (const auto s : spec.trunk_sizes) w.u32(detail::checked_u32(s));
    w.u32(detail::checked_u32(spec.branch_sizes.size()));
    for (const auto s : spec.branch_sizes) w.u32(detail::checked_u32(s));
    w.f64(spec.p_drop);
    w.u8(spec.regularize_heads ? 1 : 0);
    w.f64(spec.bn_momentum);
    w.f64(spec.bn_epsilon);
    w.u32(detail::checked_u32(spec.heads.size()));
    for (const auto& h : spec.heads) {
        w.u32(detail::checked_u32(h.name.size()));
        w.raw(h.name);
        w.u32(detail::checked_u32(h.n_out));
    }
    for (const auto& layer : model.trunk) detail::write_layer(w, layer);
    for (const auto& branch : model.branches) {
        for (const auto& layer : branch.hidden) detail::write_layer(w, layer);
        detail::write_layer(w, branch.head);
    }
    const std::uint32_t crc = detail::crc32_of(w.bytes());
    w.u32(crc);
    return std::move(w.bytes());
}

inline MacModel deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 2 + 4) throw FormatError("model stream truncated");
    if (std::memcmp(bytes.data(), kModelMagic, 4) != 0) throw FormatError("not a model file (bad magic)");
    const auto payload = bytes.first(bytes.size() - 4);
    detail::ByteReader tail(bytes.last(4));
    {
        detail::ByteReader head(bytes.subspan(4, 2));
        const auto version = head.u16();
        if (version != kModelFormatVersion) {
            throw FormatError("model format version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kModelFormatVersion) + ")");
        }
    }
    if (tail.u32() != detail::crc32_of(payload)) throw FormatError("model checksum mismatch");

    detail::ByteReader r(payload.subspan(6));
    MacSpec spec;
    spec.n_in = r.u32();
    spec.trunk_sizes.resize(r.u32());
    for (auto& s : spec.trunk_sizes) s = r.u32();
    spec.branch_sizes.resize(r.u32());
    for (auto& s : spec.branch_sizes) s = r.u32();
    spec.p_drop = r.f64();
    spec.regularize_heads = r.u8() != 0;
    spec.bn_momentum = r.f64();
    spec.bn_epsilon = r.f64();
    spec.heads.resize(r.u32());
    for (auto& h : spec.heads) {
        h.name = r.raw(r.u32());
        h.n_out = r.u32();
    }
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("model stream carries an invalid spec: ") + e.what());
    }

    // Shapes come from the spec; build_mac allocates them.
    Rng unused(0);
    MacModel model = build_mac(spec, unused);
    for (auto& layer : model.trunk) detail::read_layer(r, layer);
    for (auto& branch : model.branches) {
        for (auto& layer : branch.hidden) detail::read_layer(r, layer);
        detail::read_layer(r, branch.head);
    }
    if (r.remaining() != 0) throw FormatError("model stream has trailing bytes");
    return model;
}

inline void save_model(const MacModel& model, const std::filesystem::path& path) {
    const auto bytes = serialize(model);
    csv::write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline MacModel load_model(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError(path.string() + ": model file not found");
    const std::string raw = csv::read_file(path);
    return deserialize(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
}

}  // namespace templaudit
