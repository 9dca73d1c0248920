#include "carspeed/serialize.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace carspeed {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) {
            c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        }
        table[i] = c;
    }
    return table;
}

}  // namespace

uint32_t crc32_ieee(const uint8_t* data, size_t len) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) {
        c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    }
    return c ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WeightsError(path + ": cannot open for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw WeightsError(path + ": read failed");
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw WeightsError(path + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw WeightsError(path + ": write failed");
}

nlohmann::json layer_spec_to_json(const LayerSpec& spec) {
    nlohmann::json j;
    j["kind"] = layer_kind_name(spec.kind);
    switch (spec.kind) {
        case LayerKind::dense:
            j["units"] = spec.units;
            j["activation"] = spec.act == Activation::relu ? "relu" : "linear";
            break;
        case LayerKind::conv1d:
            j["filters"] = spec.units;
            j["kernel"] = spec.kernel;
            j["dilation"] = spec.dilation;
            break;
        case LayerKind::lstm:
        case LayerKind::bilstm:
            j["units"] = spec.units;
            j["return_sequences"] = spec.return_sequences;
            break;
        case LayerKind::batchnorm:
            j["momentum"] = spec.momentum;
            j["epsilon"] = spec.epsilon;
            break;
        case LayerKind::dropout:
            j["rate"] = spec.rate;
            break;
        case LayerKind::residual_block:
            j["filters"] = spec.units;
            j["kernel"] = spec.kernel;
            break;
        case LayerKind::relu:
        case LayerKind::take_last_step:
            break;
    }
    return j;
}

LayerSpec layer_spec_from_json(const nlohmann::json& j) {
    LayerSpec spec;
    spec.kind = layer_kind_from_name(j.at("kind").get<std::string>());
    switch (spec.kind) {
        case LayerKind::dense:
            spec.units = j.at("units").get<int>();
            spec.act = j.at("activation").get<std::string>() == "relu" ? Activation::relu
                                                                       : Activation::linear;
            break;
        case LayerKind::conv1d:
            spec.units = j.at("filters").get<int>();
            spec.kernel = j.at("kernel").get<int>();
            spec.dilation = j.at("dilation").get<int>();
            break;
        case LayerKind::lstm:
        case LayerKind::bilstm:
            spec.units = j.at("units").get<int>();
            spec.return_sequences = j.at("return_sequences").get<bool>();
            break;
        case LayerKind::batchnorm:
            spec.momentum = j.at("momentum").get<double>();
            spec.epsilon = j.at("epsilon").get<double>();
            break;
        case LayerKind::dropout:
            spec.rate = j.at("rate").get<double>();
            break;
        case LayerKind::residual_block:
            spec.units = j.at("filters").get<int>();
            spec.kernel = j.at("kernel").get<int>();
            break;
        case LayerKind::relu:
        case LayerKind::take_last_step:
            break;
    }
    return spec;
}

}  // namespace carspeed
