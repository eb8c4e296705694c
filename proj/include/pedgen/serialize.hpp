#pragma once

// Named-tensor container: a JSON header followed by concatenated little-endian
// float32 payloads, one block per tensor in sorted-name order. Used for the
// embedder and diffusion checkpoints so both stay byte-deterministic.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "pedgen/records.hpp"
#include "pedgen/tensor.hpp"

namespace pedgen::ser {

inline constexpr char kMagic[4] = {'P', 'G', 'T', '1'};

inline void write_tensor_file(const std::string& path, json meta,
                              const std::map<std::string, Tensor>& tensors) {
    json index = json::array();
    for (const auto& [name, t] : tensors) {
        json shape = json::array();
        for (int64_t d : t.shape) shape.push_back(d);
        index.push_back({{"name", name}, {"shape", std::move(shape)}});
    }
    meta["__tensors__"] = std::move(index);
    std::string header = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(kMagic, 4);
    uint64_t hlen = header.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = char((hlen >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& [name, t] : tensors) {
        for (double v : t.data) {
            uint32_t bits = std::bit_cast<uint32_t>(float(v));
            char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff),
                         char((bits >> 24) & 0xff)};
            out.write(b, 4);
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

struct TensorFile {
    json meta;
    std::map<std::string, Tensor> tensors;
};

inline TensorFile read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw SchemaError(path + ": not a tensor file");
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (!in) throw SchemaError(path + ": truncated header length");
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= uint64_t(uint8_t(lenbuf[i])) << (8 * i);
    std::string header(hlen, '\0');
    in.read(header.data(), std::streamsize(hlen));
    if (!in) throw SchemaError(path + ": truncated header");

    TensorFile tf;
    try {
        tf.meta = json::parse(header);
    } catch (const json::exception& e) {
        throw SchemaError(path + ": bad header: " + e.what());
    }
    if (!tf.meta.contains("__tensors__")) throw SchemaError(path + ": missing tensor index");
    for (const auto& entry : tf.meta.at("__tensors__")) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int64_t> shape;
        for (const auto& d : entry.at("shape")) shape.push_back(d.get<int64_t>());
        Tensor t(shape);
        for (double& v : t.data) {
            char b[4];
            in.read(b, 4);
            if (!in) throw SchemaError(path + ": truncated tensor " + name);
            uint32_t bits = uint32_t(uint8_t(b[0])) | uint32_t(uint8_t(b[1])) << 8 |
                            uint32_t(uint8_t(b[2])) << 16 | uint32_t(uint8_t(b[3])) << 24;
            v = double(std::bit_cast<float>(bits));
        }
        tf.tensors.emplace(std::move(name), std::move(t));
    }
    tf.meta.erase("__tensors__");
    return tf;
}

}  // namespace pedgen::ser
