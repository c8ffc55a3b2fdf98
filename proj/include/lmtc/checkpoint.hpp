#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmtc/errors.hpp"
#include "lmtc/tape.hpp"

namespace lmtc {

// Checkpoint file layout: one JSON manifest line (meta + ordered parameter
// names/shapes), then a binary blob of little-endian 32-bit floats in
// manifest order. Values are stored as float32 regardless of the compute
// precision, so float-mode save/load round-trips bit-exactly.

namespace detail {

inline void write_f32_le(std::ostream& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

inline float read_f32_le(std::istream& in) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const nlohmann::ordered_json& meta,
                     const std::vector<const Parameter<T>*>& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    nlohmann::ordered_json manifest;
    manifest["format"] = "lmtc-checkpoint-v1";
    manifest["meta"] = meta;
    auto& plist = manifest["params"] = nlohmann::ordered_json::array();
    for (const auto* p : params)
        plist.push_back({{"name", p->name}, {"rows", p->value.rows}, {"cols", p->value.cols}});
    out << manifest.dump() << "\n";
    for (const auto* p : params)
        for (T x : p->value.v) detail::write_f32_le(out, static_cast<float>(x));
    if (!out) throw IoError("short write on checkpoint " + path);
}

struct CheckpointReader {
    nlohmann::ordered_json meta;
    std::vector<std::tuple<std::string, int, int>> entries;
    std::vector<std::vector<float>> blobs;

    const std::vector<float>* find(const std::string& name, int rows, int cols) const {
        for (size_t i = 0; i < entries.size(); ++i) {
            const auto& [n, r, c] = entries[i];
            if (n != name) continue;
            if (r != rows || c != cols)
                throw IoError("checkpoint parameter " + name + " has shape " + std::to_string(r) +
                              "x" + std::to_string(c) + ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
            return &blobs[i];
        }
        return nullptr;
    }

    template <typename T>
    void load_into(Parameter<T>& p) const {
        const auto* blob = find(p.name, p.value.rows, p.value.cols);
        if (!blob) throw IoError("checkpoint is missing parameter " + p.name);
        for (size_t i = 0; i < blob->size(); ++i) p.value.v[i] = static_cast<T>((*blob)[i]);
    }
};

inline CheckpointReader read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("checkpoint " + path + " has no manifest line");
    auto manifest = nlohmann::ordered_json::parse(line, nullptr, false);
    if (manifest.is_discarded()) throw IoError("checkpoint " + path + ": malformed manifest");
    if (manifest.value("format", "") != std::string("lmtc-checkpoint-v1"))
        throw IoError("checkpoint " + path + ": unknown format");
    CheckpointReader r;
    r.meta = manifest["meta"];
    for (const auto& e : manifest["params"]) {
        const int rows = e.at("rows").get<int>(), cols = e.at("cols").get<int>();
        r.entries.emplace_back(e.at("name").get<std::string>(), rows, cols);
        std::vector<float> blob(static_cast<size_t>(rows) * static_cast<size_t>(cols));
        for (auto& f : blob) f = detail::read_f32_le(in);
        if (!in) throw IoError("checkpoint " + path + " truncated in blob");
        r.blobs.push_back(std::move(blob));
    }
    return r;
}

}  // namespace lmtc
