#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "carspeed/model.hpp"

#include "json.hpp"

namespace carspeed {

// Weights file, little-endian throughout:
//   magic "CSNW" | version 0x01 | u32 header length | JSON header |
//   raw float32 payload in manifest order | u32 CRC-32 of the payload.
// The header carries the model name, window size, layer specs, input
// normalization and a tensor manifest (name / shape / byte offset).

class WeightsError : public std::runtime_error {
public:
    explicit WeightsError(const std::string& m) : std::runtime_error(m) {}
};
class WeightsMagicError : public WeightsError {
public:
    explicit WeightsMagicError(const std::string& m) : WeightsError(m) {}
};
class WeightsVersionError : public WeightsError {
public:
    explicit WeightsVersionError(const std::string& m) : WeightsError(m) {}
};
class WeightsTruncatedError : public WeightsError {
public:
    explicit WeightsTruncatedError(const std::string& m) : WeightsError(m) {}
};
class WeightsChecksumError : public WeightsError {
public:
    explicit WeightsChecksumError(const std::string& m) : WeightsError(m) {}
};
class WeightsFormatError : public WeightsError {
public:
    explicit WeightsFormatError(const std::string& m) : WeightsError(m) {}
};

uint32_t crc32_ieee(const uint8_t* data, size_t len);
std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

nlohmann::json layer_spec_to_json(const LayerSpec& spec);
LayerSpec layer_spec_from_json(const nlohmann::json& j);

inline constexpr char kWeightsMagic[4] = {'C', 'S', 'N', 'W'};
inline constexpr uint8_t kWeightsVersion = 0x01;

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline float get_f32(const uint8_t* p) {
    const uint32_t bits = get_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

template <typename S>
void save_weights(Model<S>& model, const std::string& path) {
    nlohmann::json header;
    header["model"] = model.name;
    header["window_size"] = model.window_size;
    header["layers"] = nlohmann::json::array();
    for (const auto& spec : model.specs) header["layers"].push_back(layer_spec_to_json(spec));
    if (model.norm.fitted) {
        header["norm"] = {{"mean", model.norm.mean}, {"std", model.norm.stddev}};
    } else {
        header["norm"] = nullptr;
    }

    std::vector<uint8_t> payload;
    nlohmann::json manifest = nlohmann::json::array();
    model.for_each_tensor([&](const std::string& name, Tensor<S>& t) {
        manifest.push_back({{"name", name}, {"shape", t.shape}, {"offset", payload.size()}});
        for (int64_t i = 0; i < t.numel(); ++i) {
            detail::put_f32(payload, static_cast<float>(t.at(i)));
        }
    });
    header["manifest"] = std::move(manifest);

    const std::string header_text = header.dump();
    std::vector<uint8_t> bytes;
    bytes.reserve(16 + header_text.size() + payload.size());
    bytes.insert(bytes.end(), std::begin(kWeightsMagic), std::end(kWeightsMagic));
    bytes.push_back(kWeightsVersion);
    detail::put_u32(bytes, static_cast<uint32_t>(header_text.size()));
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    detail::put_u32(bytes, crc32_ieee(payload.data(), payload.size()));
    write_file_bytes(path, bytes);
}

template <typename S>
Model<S> load_weights(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 9) throw WeightsTruncatedError(path + ": file shorter than the fixed prefix");
    if (!std::equal(std::begin(kWeightsMagic), std::end(kWeightsMagic), bytes.begin())) {
        throw WeightsMagicError(path + ": not a CSNW weights file (magic mismatch)");
    }
    if (bytes[4] != kWeightsVersion) {
        throw WeightsVersionError(strfmt("%s: unsupported weights version 0x%02x", path.c_str(), bytes[4]));
    }
    const uint32_t header_len = detail::get_u32(bytes.data() + 5);
    const size_t header_end = 9 + static_cast<size_t>(header_len);
    if (bytes.size() < header_end + 4) throw WeightsTruncatedError(path + ": header extends past end of file");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + static_cast<long>(header_end));
    } catch (const nlohmann::json::exception& e) {
        throw WeightsFormatError(path + ": bad header JSON: " + e.what());
    }

    Model<S> model;
    try {
        model.name = header.at("model").get<std::string>();
        model.window_size = header.at("window_size").get<int>();
        for (const auto& j : header.at("layers")) model.specs.push_back(layer_spec_from_json(j));
        if (!header.at("norm").is_null()) {
            model.norm.mean = header["norm"].at("mean").get<std::array<double, 3>>();
            model.norm.stddev = header["norm"].at("std").get<std::array<double, 3>>();
            model.norm.fitted = true;
        }
    } catch (const nlohmann::json::exception& e) {
        throw WeightsFormatError(path + ": bad header fields: " + e.what());
    }

    ShapeFlow flow;
    for (const auto& spec : model.specs) {
        model.params.push_back(alloc_params<S>(spec, flow.width));
        flow = advance_flow(flow, spec);
    }

    const auto& manifest = header.at("manifest");
    size_t payload_len = 0;
    for (const auto& entry : manifest) {
        payload_len += static_cast<size_t>(numel_of(entry.at("shape").get<std::vector<int>>())) * 4;
    }
    const size_t expect = header_end + payload_len + 4;
    if (bytes.size() < expect) throw WeightsTruncatedError(path + ": payload shorter than the manifest");
    if (bytes.size() > expect) throw WeightsFormatError(path + ": trailing bytes after checksum");

    const uint8_t* payload = bytes.data() + header_end;
    const uint32_t stored_crc = detail::get_u32(bytes.data() + header_end + payload_len);
    const uint32_t actual_crc = crc32_ieee(payload, payload_len);
    if (stored_crc != actual_crc) {
        throw WeightsChecksumError(strfmt("%s: payload CRC-32 %08x does not match stored %08x",
                                          path.c_str(), actual_crc, stored_crc));
    }

    size_t idx = 0;
    model.for_each_tensor([&](const std::string& name, Tensor<S>& t) {
        if (idx >= manifest.size()) throw WeightsFormatError(path + ": manifest too short");
        const auto& entry = manifest[idx++];
        if (entry.at("name").get<std::string>() != name ||
            entry.at("shape").get<std::vector<int>>() != t.shape) {
            throw WeightsFormatError(path + ": manifest entry does not match layer stack at " + name);
        }
        const size_t offset = entry.at("offset").get<size_t>();
        if (offset + static_cast<size_t>(t.numel()) * 4 > payload_len) {
            throw WeightsFormatError(path + ": manifest offset out of range at " + name);
        }
        for (int64_t i = 0; i < t.numel(); ++i) {
            t.mut()[i] = static_cast<S>(detail::get_f32(payload + offset + static_cast<size_t>(i) * 4));
        }
    });
    if (idx != manifest.size()) throw WeightsFormatError(path + ": manifest longer than the layer stack");
    return model;
}

}  // namespace carspeed
