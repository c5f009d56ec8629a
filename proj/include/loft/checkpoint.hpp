#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "loft/common.hpp"
#include "loft/lora.hpp"
#include "loft/model.hpp"
#include "loft/tokenizer.hpp"

namespace loft {

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr const char* kModelManifestName = "model.json";
inline constexpr const char* kModelBlobName = "model.bin";
inline constexpr const char* kTokenizerManifestName = "tokenizer.json";
inline constexpr const char* kAdapterManifestName = "adapter.json";
inline constexpr const char* kAdapterBlobName = "adapter.bin";

namespace detail {

// Tensor payloads are float32, little-endian regardless of host order.
inline void put_f32_le(std::string& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, sizeof(u));
    out.push_back(static_cast<char>(u & 0xFF));
    out.push_back(static_cast<char>((u >> 8) & 0xFF));
    out.push_back(static_cast<char>((u >> 16) & 0xFF));
    out.push_back(static_cast<char>((u >> 24) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
    const uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                       (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    float f;
    std::memcpy(&f, &u, sizeof(f));
    return f;
}

inline nlohmann::ordered_json model_config_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["d_ff"] = cfg.d_ff;
    j["max_seq_len"] = cfg.max_seq_len;
    j["rope_base"] = cfg.rope_base;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.n_kv_heads = j.at("n_kv_heads").get<int>();
        cfg.d_ff = j.at("d_ff").get<int>();
        cfg.max_seq_len = j.at("max_seq_len").get<int>();
        cfg.rope_base = j.at("rope_base").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json load_manifest(const std::string& path, const char* expected_format) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != expected_format)
        throw CheckpointError("checkpoint: " + path + " is not a '" +
                              std::string(expected_format) + "' manifest");
    return j;
}

// Copies one tensor out of the blob, validating the index entry.
inline void read_tensor(const std::string& blob, const nlohmann::json& tensors,
                        const std::string& name, std::vector<int> expected_shape,
                        float* dst, size_t n) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint: missing tensor " + name);
    const auto& entry = *it;
    size_t offset;
    std::vector<int> shape;
    try {
        offset = entry.at("offset").get<size_t>();
        shape = entry.at("shape").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: bad index entry for " + name + ": " + e.what());
    }
    if (shape != expected_shape)
        throw CheckpointError("checkpoint: tensor " + name + " has unexpected shape");
    if (offset + n * 4 > blob.size())
        throw CheckpointError("checkpoint: tensor " + name + " overruns the blob");
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (size_t i = 0; i < n; ++i) dst[i] = get_f32_le(p + i * 4);
}

inline void verify_tokenizer_manifest(const std::string& dir) {
    const std::string path = dir + "/" + kTokenizerManifestName;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: tokenizer manifest: ") + e.what());
    }
    const nlohmann::json expected = tokenizer_manifest();
    for (const auto& [key, val] : expected.items())
        if (j.value(key, -1) != val.get<int>())
            throw CheckpointError("checkpoint: tokenizer manifest disagrees on '" + key + "'");
}

}  // namespace detail

// Base-model checkpoint: manifest JSON + little-endian float32 blob with a
// name -> (offset, shape) index, plus the tokenizer manifest alongside.
// Returns the FNV-1a fingerprint of the blob (the adapter pairing key).
inline uint64_t save_model_checkpoint(const std::string& dir, const ModelConfig& cfg,
                                      const TransformerParams<float>& params) {
    if (params.any_adapted())
        throw CheckpointError(
            "checkpoint: base checkpoints hold unadapted weights; save before wrapping");
    std::filesystem::create_directories(dir);

    std::string blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for_each_base_tensor(params, [&](const std::string& name, const std::vector<float>& data,
                                     std::vector<int> shape) {
        tensors[name] = {{"offset", blob.size()}, {"shape", shape}};
        blob.reserve(blob.size() + data.size() * 4);
        for (float v : data) detail::put_f32_le(blob, v);
    });

    nlohmann::ordered_json manifest;
    manifest["format"] = "loft-model";
    manifest["version"] = 1;
    manifest["precision"] = "f32";
    manifest["tied_embeddings"] = false;
    manifest["tokenizer"] = kTokenizerManifestName;
    manifest["blob"] = kModelBlobName;
    manifest["config"] = detail::model_config_json(cfg);
    manifest["tensors"] = tensors;

    write_file_atomic(dir + "/" + kModelBlobName, blob);
    write_file_atomic(dir + "/" + kTokenizerManifestName, tokenizer_manifest().dump(2) + "\n");
    write_file_atomic(dir + "/" + kModelManifestName, manifest.dump(2) + "\n");
    return fnv1a64(blob);
}

struct LoadedModel {
    ModelConfig config;
    TransformerParams<float> params;
    uint64_t blob_hash = 0;
};

inline LoadedModel load_model_checkpoint(const std::string& dir) {
    const nlohmann::json manifest =
        detail::load_manifest(dir + "/" + kModelManifestName, "loft-model");
    if (manifest.value("precision", "") != "f32")
        throw CheckpointError("checkpoint: unsupported precision");
    if (manifest.value("tied_embeddings", false))
        throw CheckpointError("checkpoint: tied embeddings are not supported");
    detail::verify_tokenizer_manifest(dir);

    LoadedModel out;
    out.config = detail::model_config_from_json(manifest.value("config", nlohmann::json::object()));
    std::string blob;
    try {
        blob = read_file(dir + "/" + manifest.value("blob", kModelBlobName));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    out.blob_hash = fnv1a64(blob);

    const auto tensors_it = manifest.find("tensors");
    if (tensors_it == manifest.end() || !tensors_it->is_object())
        throw CheckpointError("checkpoint: manifest has no tensor index");
    out.params = make_params_skeleton<float>(out.config);
    size_t expected_bytes = 0;
    for_each_base_tensor(out.params, [&](const std::string& name, std::vector<float>& data,
                                         std::vector<int> shape) {
        detail::read_tensor(blob, *tensors_it, name, std::move(shape), data.data(), data.size());
        expected_bytes += data.size() * 4;
    });
    if (blob.size() != expected_bytes)
        throw CheckpointError("checkpoint: blob size disagrees with the tensor index");
    return out;
}

// Adapter-only checkpoint: LoRA config + the fingerprint of the base blob the
// adapters were trained against + A/B tensors.
inline void save_adapter_checkpoint(const std::string& dir, const LoraConfig& lcfg,
                                    const TransformerParams<float>& params, uint64_t base_hash) {
    if (!params.any_adapted())
        throw CheckpointError("checkpoint: no adapters attached; nothing to save");
    std::filesystem::create_directories(dir);

    std::string blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for_each_adapter_tensor(params, [&](const std::string& name, const std::vector<float>& data,
                                        std::vector<int> shape) {
        tensors[name] = {{"offset", blob.size()}, {"shape", shape}};
        blob.reserve(blob.size() + data.size() * 4);
        for (float v : data) detail::put_f32_le(blob, v);
    });

    nlohmann::ordered_json lora;
    lora["r"] = lcfg.r;
    lora["alpha"] = lcfg.alpha;
    lora["dropout"] = lcfg.dropout;
    std::vector<std::string> target_names;
    for (size_t i = 0; i < lcfg.targets.size(); ++i)
        if (lcfg.targets[i]) target_names.emplace_back(kLoraTargetNames[i]);
    lora["targets"] = target_names;

    nlohmann::ordered_json manifest;
    manifest["format"] = "loft-adapter";
    manifest["version"] = 1;
    manifest["precision"] = "f32";
    manifest["base_blob_fnv1a64"] = to_hex(base_hash);
    manifest["blob"] = kAdapterBlobName;
    manifest["lora"] = lora;
    manifest["tensors"] = tensors;

    write_file_atomic(dir + "/" + kAdapterBlobName, blob);
    write_file_atomic(dir + "/" + kAdapterManifestName, manifest.dump(2) + "\n");
}

// Attaches the stored adapters to `params` (which must be unadapted) after
// verifying the base fingerprint. Returns the stored LoRA config.
inline LoraConfig load_adapter_checkpoint(const std::string& dir, const ModelConfig& cfg,
                                          TransformerParams<float>& params, uint64_t base_hash) {
    const nlohmann::json manifest =
        detail::load_manifest(dir + "/" + kAdapterManifestName, "loft-adapter");
    if (manifest.value("precision", "") != "f32")
        throw CheckpointError("checkpoint: unsupported adapter precision");
    const std::string stored = manifest.value("base_blob_fnv1a64", "");
    if (stored != to_hex(base_hash))
        throw CheckpointError("checkpoint: adapter was trained against a different base model (" +
                              stored + " vs " + to_hex(base_hash) + ")");
    if (params.any_adapted())
        throw CheckpointError("checkpoint: model already has adapters attached");

    LoraConfig lcfg;
    try {
        const auto& lj = manifest.at("lora");
        lcfg.r = lj.at("r").get<int>();
        lcfg.alpha = lj.at("alpha").get<double>();
        lcfg.dropout = lj.at("dropout").get<double>();
        lcfg.targets = {false, false, false, false};
        for (const auto& name : lj.at("targets")) {
            bool known = false;
            for (size_t i = 0; i < kLoraTargetNames.size(); ++i)
                if (name.get<std::string>() == kLoraTargetNames[i]) {
                    lcfg.targets[i] = true;
                    known = true;
                }
            if (!known)
                throw CheckpointError("checkpoint: unknown adapter target '" +
                                      name.get<std::string>() + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad adapter manifest: ") + e.what());
    }
    lcfg.validate();

    std::string blob;
    try {
        blob = read_file(dir + "/" + manifest.value("blob", kAdapterBlobName));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    const auto tensors_it = manifest.find("tensors");
    if (tensors_it == manifest.end() || !tensors_it->is_object())
        throw CheckpointError("checkpoint: adapter manifest has no tensor index");

    if (static_cast<int>(params.layers.size()) != cfg.n_layers)
        throw CheckpointError("checkpoint: adapter/model layer count mismatch");
    for (auto& l : params.layers)
        for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo}) {
            if (!lcfg.targets_projection(t)) continue;
            auto& proj = l.projection(t);
            LoraAdapter<float> ad;
            ad.a = Matrix<float>(lcfg.r, proj.d_in());
            ad.b = Matrix<float>(proj.d_out(), lcfg.r);
            ad.scale = static_cast<float>(lcfg.scale());
            ad.dropout = lcfg.dropout;
            proj.adapter = std::move(ad);
        }

    size_t expected_bytes = 0;
    for_each_adapter_tensor(params, [&](const std::string& name, std::vector<float>& data,
                                        std::vector<int> shape) {
        detail::read_tensor(blob, *tensors_it, name, std::move(shape), data.data(), data.size());
        expected_bytes += data.size() * 4;
    });
    if (blob.size() != expected_bytes)
        throw CheckpointError("checkpoint: adapter blob size disagrees with the tensor index");
    return lcfg;
}

}  // namespace loft
