#pragma once

// Tensor container format:
//
//   "SSMD" | u32 version = 1 | u64 header_length | JSON header | payload
//
// The JSON header lists tensors as {"name", "shape", "count"} in the order
// their little-endian FP64 payloads follow. All integers are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmdyn/error.hpp"
#include "ssmdyn/ssm.hpp"
#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'S', 'M', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Container {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const Tensor& at(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.tensor;
        throw CheckpointError(name, "missing tensor");
    }
    bool has(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return true;
        return false;
    }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string encode_container(const Container& c) {
    nlohmann::json header;
    header["meta"] = c.meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : c.tensors)
        header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"count", t.tensor.size()}});
    const std::string text = header.dump();

    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& t : c.tensors)
        for (double v : t.tensor.flat()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Container decode_container(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
        throw CheckpointError("magic", "bad magic bytes");
    if (n < 8) throw CheckpointError("version", "unexpected end of header");
    const auto version = detail::get_le<std::uint32_t>(p + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError("version", "unsupported version " + std::to_string(version));
    if (n < 16) throw CheckpointError("header_length", "unexpected end of header");
    const auto header_len = detail::get_le<std::uint64_t>(p + 8);
    if (header_len > n - 16) throw CheckpointError("header_length", "header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError("header", "malformed JSON header");
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array())
        throw CheckpointError("tensors", "header lacks a tensor list");

    Container c;
    if (header.contains("meta")) c.meta = header["meta"];
    std::size_t offset = 16 + header_len;
    for (const auto& entry : header["tensors"]) {
        std::string name;
        Shape shape;
        std::size_t count = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<Shape>();
            count = entry.at("count").get<std::size_t>();
        } catch (const nlohmann::json::exception&) {
            throw CheckpointError("tensors", "malformed tensor entry");
        }
        if (element_count(shape) != count) throw CheckpointError(name, "shape/payload mismatch");
        if (count > (n - offset) / 8) throw CheckpointError(name, "unexpected end of tensor data");
        Tensor t(shape);
        for (std::size_t i = 0; i < count; ++i)
            t[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + offset + 8 * i));
        offset += 8 * count;
        c.tensors.push_back({std::move(name), std::move(t)});
    }
    if (offset != n) throw CheckpointError("payload", "shape/payload mismatch");
    return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_container(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_container(bytes);
}

inline Container to_container(const MambaParams& p, const std::string& prefix = "") {
    Container c;
    c.meta = {{"kind", "mamba_params"},
              {"d", p.d},
              {"T_max", p.T_max},
              {"mode", std::string(to_string(p.fused.mode))},
              {"gate_enabled", p.gate_enabled}};
    c.tensors.push_back({prefix + "A_log", p.A_log});
    c.tensors.push_back({prefix + "delta_bias", p.delta_bias});
    c.tensors.push_back({prefix + "fused_W", p.fused.W});
    c.tensors.push_back({prefix + "gate_weight", p.gate_weight});
    return c;
}

inline MambaParams params_from_container(const Container& c, const nlohmann::json& meta,
                                         const std::string& prefix = "") {
    const auto field = [&](const char* key) -> const nlohmann::json& {
        if (!meta.contains(key)) throw CheckpointError(key, "missing header field");
        return meta.at(key);
    };
    MambaParams p;
    try {
        p = MambaParams::zeros(field("d").get<std::size_t>(), field("T_max").get<std::size_t>(),
                               parse_buffer_mode(field("mode").get<std::string>()));
        p.gate_enabled = field("gate_enabled").get<bool>();
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError("meta", "malformed block metadata");
    }
    const auto load = [&](const std::string& name, Tensor& dst) {
        const Tensor& src = c.at(prefix + name);
        if (src.shape() != dst.shape()) throw CheckpointError(prefix + name, "shape does not match metadata");
        dst = src;
    };
    load("A_log", p.A_log);
    load("delta_bias", p.delta_bias);
    load("fused_W", p.fused.W);
    load("gate_weight", p.gate_weight);
    return p;
}

inline void save_checkpoint(const MambaParams& p, const std::filesystem::path& path) {
    write_container(path, to_container(p));
}

inline MambaParams load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "mamba_params") throw CheckpointError("kind", "not a block checkpoint");
    return params_from_container(c, c.meta);
}

}  // namespace ssmdyn
