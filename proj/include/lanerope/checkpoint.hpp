#pragma once

// Checkpoint container: a directory holding manifest.json plus one raw
// little-endian float32 blob per parameter array. The manifest pins a magic
// string, the dtype, the byte order, the full model config and the array
// table, so a loader can validate before touching any blob.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanerope/model.hpp"

namespace lanerope::checkpoint {

constexpr const char* kMagic = "LNRP1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and declared little-endian");

// --- config <-> json ---------------------------------------------------------

inline nlohmann::json lane_params_to_json(const rope::LaneRopeParams& lp) {
    return nlohmann::json{{"head_dim", lp.rope.head_dim},
                          {"rope_base", lp.rope.base},
                          {"omega", lp.omega},
                          {"sequence_gap", lp.sequence_gap},
                          {"pretrain_context", lp.pretrain_context},
                          {"ramp_alpha", lp.ramp_alpha},
                          {"ramp_beta", lp.ramp_beta},
                          {"bias_dim", lp.bias_dim},
                          {"bias_freqs", lp.bias_freqs},
                          {"bias_coeffs", lp.bias_coeffs}};
}

inline rope::LaneRopeParams lane_params_from_json(const nlohmann::json& j) {
    rope::LaneRopeParams lp;
    lp.rope = rope::RopeParams::make(j.at("head_dim").get<int>(), j.at("rope_base").get<double>());
    lp.omega = j.at("omega").get<std::vector<double>>();
    lp.sequence_gap = j.at("sequence_gap").get<long long>();
    lp.pretrain_context = j.at("pretrain_context").get<double>();
    lp.ramp_alpha = j.at("ramp_alpha").get<double>();
    lp.ramp_beta = j.at("ramp_beta").get<double>();
    lp.bias_dim = j.at("bias_dim").get<int>();
    lp.bias_freqs = j.at("bias_freqs").get<std::vector<double>>();
    lp.bias_coeffs = j.at("bias_coeffs").get<std::vector<double>>();
    return lp;
}

inline nlohmann::json model_config_to_json(const model::ModelConfig& cfg) {
    return nlohmann::json{{"vocab_size", cfg.vocab_size},
                          {"model_dim", cfg.model_dim},
                          {"n_layers", cfg.n_layers},
                          {"n_heads", cfg.n_heads},
                          {"head_dim", cfg.head_dim},
                          {"mlp_hidden", cfg.mlp_hidden},
                          {"bias_dim", cfg.bias_dim},
                          {"max_steps", cfg.max_steps},
                          {"tied_unembedding", cfg.tied_unembedding},
                          {"rms_eps", cfg.rms_eps},
                          {"lane", lane_params_to_json(cfg.lane)}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
    model::ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.model_dim = j.at("model_dim").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.head_dim = j.at("head_dim").get<int>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
    cfg.bias_dim = j.at("bias_dim").get<int>();
    cfg.max_steps = j.at("max_steps").get<int>();
    cfg.tied_unembedding = j.at("tied_unembedding").get<bool>();
    cfg.rms_eps = j.at("rms_eps").get<double>();
    cfg.lane = lane_params_from_json(j.at("lane"));
    cfg.validate();
    return cfg;
}

// --- save / load --------------------------------------------------------------

// Array names become file names; the visitor order fixes the manifest order.
template <class S>
inline void save(const std::filesystem::path& dir, const model::ModelConfig& cfg,
                 model::ModelParameters<S>& params) {
    std::filesystem::create_directories(dir);
    nlohmann::json arrays = nlohmann::json::array();
    params.for_each_array([&](const std::string& name, S* data, size_t len, const std::vector<int>& shape) {
        arrays.push_back({{"name", name}, {"shape", shape}});
        std::vector<float> buf(len);
        for (size_t i = 0; i < len; ++i) buf[i] = static_cast<float>(data[i]);
        std::ofstream f(dir / (name + ".bin"), std::ios::binary | std::ios::trunc);
        if (!f) throw data_error("checkpoint save: cannot write " + (dir / (name + ".bin")).string());
        f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(len * sizeof(float)));
    });
    nlohmann::json manifest{{"magic", kMagic},
                            {"dtype", "f32"},
                            {"byte_order", "little"},
                            {"config", model_config_to_json(cfg)},
                            {"arrays", arrays}};
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw data_error("checkpoint save: cannot write manifest");
    mf << manifest.dump(2) << "\n";
}

template <class S>
inline model::ModelConfig load(const std::filesystem::path& dir, model::ModelParameters<S>& params_out) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw data_error("checkpoint load: missing manifest at " + dir.string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("checkpoint load: bad manifest: ") + e.what());
    }
    if (manifest.value("magic", "") != kMagic)
        throw data_error("checkpoint load: magic mismatch (expected LNRP1)");
    if (manifest.value("dtype", "") != "f32" || manifest.value("byte_order", "") != "little")
        throw data_error("checkpoint load: unsupported dtype or byte order");

    model::ModelConfig cfg;
    try {
        cfg = model_config_from_json(manifest.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("checkpoint load: bad config: ") + e.what());
    }
    params_out = model::ModelParameters<S>::shaped_like(cfg);
    params_out.tied = cfg.tied_unembedding;

    // Index the manifest table, then validate every visited array against it.
    std::map<std::string, std::vector<int>> table;
    for (const auto& a : manifest.at("arrays"))
        table[a.at("name").get<std::string>()] = a.at("shape").get<std::vector<int>>();

    params_out.for_each_array([&](const std::string& name, S* data, size_t len, const std::vector<int>& shape) {
        auto it = table.find(name);
        if (it == table.end()) throw data_error("checkpoint load: manifest missing array " + name);
        if (it->second != shape) throw data_error("checkpoint load: shape mismatch for " + name);
        std::ifstream f(dir / (name + ".bin"), std::ios::binary);
        if (!f) throw data_error("checkpoint load: missing blob for " + name);
        std::vector<float> buf(len);
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len * sizeof(float)));
        if (static_cast<size_t>(f.gcount()) != len * sizeof(float))
            throw data_error("checkpoint load: truncated blob for " + name);
        for (size_t i = 0; i < len; ++i) data[i] = static_cast<S>(buf[i]);
    });
    return cfg;
}

}  // namespace lanerope::checkpoint
