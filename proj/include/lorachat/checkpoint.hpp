// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint container, shared by model and adapter files.
//
//   "LORA1" | u32le header_len | UTF-8 JSON header | payload bytes
//
// The header carries {format_version, model_config, lora_config, base_hash,
// tensors}; each tensor record stores {name, shape, dtype, offset, byte_len}
// with dtype "f32" or "i8" and offset relative to the start of the payload
// section. Payloads are little-endian row-major. Model files set lora_config
// to null; adapter files carry the LoRA config and one A/B pair per target.
// Quantized weights store the raw int8 values plus a "<name>.scale" f32
// sibling holding the per-row scales.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorachat/errors.hpp"
#include "lorachat/lora.hpp"
#include "lorachat/transformer.hpp"

namespace lorachat {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[5] = {'L', 'O', 'R', 'A', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace detail {

inline std::string hex64(std::uint64_t value) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

struct RawTensor {
    std::string name;
    Shape shape;
    std::string dtype;  // "f32" | "i8"
    std::vector<std::byte> bytes;
};

template <class S>
std::vector<std::byte> f32_bytes(std::span<const S> values) {
    std::vector<std::byte> out(values.size() * sizeof(float));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(out.data() + i * sizeof(float), &f, sizeof(float));
    }
    return out;
}

template <class S>
std::vector<S> f32_values(std::span<const std::byte> bytes) {
    std::vector<S> out(bytes.size() / sizeof(float));
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
        out[i] = static_cast<S>(f);
    }
    return out;
}

inline nlohmann::json config_json(const ModelConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
            {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
            {"d_ff", cfg.d_ff},             {"max_seq", cfg.max_seq},
            {"seed", cfg.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.d_ff = j.at("d_ff").get<std::size_t>();
        cfg.max_seq = j.at("max_seq").get<std::size_t>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model_config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json lora_config_json(const LoraConfig& cfg) {
    return {{"rank", cfg.rank},
            {"alpha", cfg.alpha},
            {"target_paths", cfg.target_paths},
            {"dropout_rate", cfg.dropout_rate}};
}

inline LoraConfig lora_config_from_json(const nlohmann::json& j) {
    LoraConfig cfg;
    try {
        cfg.rank = j.at("rank").get<std::size_t>();
        cfg.alpha = j.at("alpha").get<double>();
        cfg.target_paths = j.at("target_paths").get<std::vector<std::string>>();
        cfg.dropout_rate = j.at("dropout_rate").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed lora_config: ") + e.what());
    }
    return cfg;
}

inline void write_container(const std::filesystem::path& path, const nlohmann::json& model_config,
                            const nlohmann::json& lora_config, const std::string& base_hash,
                            const std::vector<RawTensor>& tensors) {
    nlohmann::json records = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        records.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"dtype", t.dtype},
                           {"offset", offset},
                           {"byte_len", t.bytes.size()}});
        offset += t.bytes.size();
    }
    const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                   {"model_config", model_config},
                                   {"lora_config", lora_config},
                                   {"base_hash", base_hash},
                                   {"tensors", records}};
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.bytes.data()),
                  static_cast<std::streamsize>(t.bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

struct Container {
    nlohmann::json header;
    std::vector<std::byte> payload;

    std::span<const std::byte> slice(std::uint64_t offset, std::uint64_t len) const {
        if (offset + len > payload.size())
            throw FormatError("tensor payload extends past end of file");
        return std::span<const std::byte>(payload).subspan(offset, len);
    }
};

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw FormatError("bad magic: not a LORA1 checkpoint");
    std::uint32_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (in.gcount() != sizeof(header_len)) throw FormatError("truncated checkpoint header");
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), header_len);
    if (in.gcount() != static_cast<std::streamsize>(header_len))
        throw FormatError("truncated checkpoint header");

    Container c;
    try {
        c.header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    const auto version = c.header.value("format_version", std::uint32_t(0));
    if (version != kCheckpointVersion)
        throw FormatError("unsupported format_version " + std::to_string(version));

    std::uint64_t total = 0;
    if (!c.header.contains("tensors") || !c.header["tensors"].is_array())
        throw FormatError("checkpoint header lacks a tensor list");
    for (const auto& rec : c.header["tensors"])
        total = std::max(total, rec.value("offset", std::uint64_t(0)) +
                                    rec.value("byte_len", std::uint64_t(0)));
    c.payload.resize(total);
    in.read(reinterpret_cast<char*>(c.payload.data()), static_cast<std::streamsize>(total));
    if (in.gcount() != static_cast<std::streamsize>(total))
        throw FormatError("truncated checkpoint payload");
    return c;
}

struct RecordView {
    std::string name;
    Shape shape;
    std::string dtype;
    std::uint64_t offset = 0;
    std::uint64_t byte_len = 0;
};

inline std::vector<RecordView> record_views(const Container& c) {
    std::vector<RecordView> out;
    for (const auto& rec : c.header["tensors"]) {
        RecordView v;
        try {
            v.name = rec.at("name").get<std::string>();
            v.shape = rec.at("shape").get<Shape>();
            v.dtype = rec.at("dtype").get<std::string>();
            v.offset = rec.at("offset").get<std::uint64_t>();
            v.byte_len = rec.at("byte_len").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed tensor record: ") + e.what());
        }
        if (v.dtype != "f32" && v.dtype != "i8")
            throw FormatError("unknown tensor dtype '" + v.dtype + "'");
        out.push_back(std::move(v));
    }
    return out;
}

// Zero-valued model skeleton with the correct shapes, filled in by loaders.
template <class S>
ModelWeights<S> model_skeleton(const ModelConfig& cfg) {
    ModelWeights<S> w;
    w.config = cfg;
    w.tok_embedding = Tensor<S>::zeros({cfg.vocab_size, cfg.d_model});
    w.pos_embedding = Tensor<S>::zeros({cfg.max_seq, cfg.d_model});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        LayerWeights<S> layer;
        layer.ln1_gain = Tensor<S>::zeros({cfg.d_model});
        layer.ln1_bias = Tensor<S>::zeros({cfg.d_model});
        layer.wq = Tensor<S>::zeros({cfg.d_model, cfg.d_model});
        layer.wk = Tensor<S>::zeros({cfg.d_model, cfg.d_model});
        layer.wv = Tensor<S>::zeros({cfg.d_model, cfg.d_model});
        layer.wo = Tensor<S>::zeros({cfg.d_model, cfg.d_model});
        layer.ln2_gain = Tensor<S>::zeros({cfg.d_model});
        layer.ln2_bias = Tensor<S>::zeros({cfg.d_model});
        layer.w1 = Tensor<S>::zeros({cfg.d_ff, cfg.d_model});
        layer.w2 = Tensor<S>::zeros({cfg.d_model, cfg.d_ff});
        w.layers.push_back(std::move(layer));
    }
    w.final_ln_gain = Tensor<S>::zeros({cfg.d_model});
    w.final_ln_bias = Tensor<S>::zeros({cfg.d_model});
    w.head = Tensor<S>::zeros({cfg.d_model, cfg.vocab_size});
    return w;
}

}  // namespace detail

/// Writes a model checkpoint. Values are stored as f32 (quantized slots as
/// int8 plus a per-row scale sibling); in-memory doubles are narrowed.
template <class S>
void save_model(const std::filesystem::path& path, const ModelWeights<S>& w) {
    std::vector<detail::RawTensor> tensors;
    for (const auto& [name, tensor] : w.manifest()) {
        auto quant = w.quantized.find(name);
        if (quant != w.quantized.end()) {
            const auto& q = quant->second;
            detail::RawTensor raw;
            raw.name = name;
            raw.shape = q.shape();
            raw.dtype = "i8";
            raw.bytes.resize(q.values.size());
            std::memcpy(raw.bytes.data(), q.values.data(), q.values.size());
            tensors.push_back(std::move(raw));
            tensors.push_back(detail::RawTensor{name + ".scale",
                                                Shape{q.rows},
                                                "f32",
                                                detail::f32_bytes<S>(q.scales)});
        } else {
            tensors.push_back(detail::RawTensor{name, tensor.shape(), "f32",
                                                detail::f32_bytes<S>(tensor.data())});
        }
    }
    detail::write_container(path, detail::config_json(w.config), nullptr,
                            detail::hex64(w.config.hash()), tensors);
}

template <class S>
ModelWeights<S> load_model(const std::filesystem::path& path) {
    auto container = detail::read_container(path);
    if (!container.header.contains("lora_config") || !container.header["lora_config"].is_null())
        throw FormatError("'" + path.string() + "' is an adapter checkpoint, not a model");
    ModelConfig cfg = detail::config_from_json(container.header.at("model_config"));
    cfg.validate();

    auto records = detail::record_views(container);
    ModelWeights<S> w = detail::model_skeleton<S>(cfg);

    std::map<std::string, detail::RecordView> by_name;
    for (auto& r : records) by_name.emplace(r.name, r);

    for (auto& [name, tensor] : w.manifest()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint missing tensor '" + name + "'");
        const auto& rec = it->second;
        if (rec.shape != tensor.shape())
            throw FormatError("tensor '" + name + "' has shape " + detail::shape_str(rec.shape) +
                              ", expected " + detail::shape_str(tensor.shape()));
        if (rec.dtype == "f32") {
            auto values =
                detail::f32_values<S>(container.slice(rec.offset, rec.byte_len));
            if (values.size() != tensor.size())
                throw FormatError("tensor '" + name + "' payload length mismatch");
            std::copy(values.begin(), values.end(), tensor.data().begin());
        } else {  // i8 + scale sibling
            QuantizedWeight<S> q;
            q.rows = rec.shape[0];
            q.cols = rec.shape[1];
            if (rec.byte_len != q.rows * q.cols)
                throw FormatError("tensor '" + name + "' payload length mismatch");
            q.values.resize(rec.byte_len);
            auto bytes = container.slice(rec.offset, rec.byte_len);
            std::memcpy(q.values.data(), bytes.data(), bytes.size());
            auto scale_it = by_name.find(name + ".scale");
            if (scale_it == by_name.end())
                throw FormatError("quantized tensor '" + name + "' lacks its scale sibling");
            q.scales = detail::f32_values<S>(
                container.slice(scale_it->second.offset, scale_it->second.byte_len));
            if (q.scales.size() != q.rows)
                throw FormatError("tensor '" + name + "' scale length mismatch");
            Tensor<S> dense = dequantize(q);
            std::copy(dense.data().begin(), dense.data().end(), tensor.data().begin());
            w.quantized.emplace(name, std::move(q));
        }
    }
    return w;
}

template <class S>
void save_adapter(const std::filesystem::path& path, const LoraAdapter<S>& adapter) {
    std::vector<detail::RawTensor> tensors;
    for (const auto& [name, tensor] : adapter.trainables())
        tensors.push_back(
            detail::RawTensor{name, tensor.shape(), "f32", detail::f32_bytes<S>(tensor.data())});
    detail::write_container(path, detail::config_json(adapter.model_config),
                            detail::lora_config_json(adapter.config),
                            detail::hex64(adapter.base_hash), tensors);
}

template <class S>
LoraAdapter<S> load_adapter(const std::filesystem::path& path) {
    auto container = detail::read_container(path);
    if (!container.header.contains("lora_config") || container.header["lora_config"].is_null())
        throw FormatError("'" + path.string() + "' is a model checkpoint, not an adapter");

    LoraAdapter<S> adapter;
    adapter.config = detail::lora_config_from_json(container.header["lora_config"]);
    adapter.model_config = detail::config_from_json(container.header.at("model_config"));
    const std::string hash_text = container.header.value("base_hash", "");
    adapter.base_hash = std::strtoull(hash_text.c_str(), nullptr, 16);

    auto records = detail::record_views(container);
    for (const auto& rec : records) {
        if (rec.dtype != "f32") throw FormatError("adapter tensors must be f32");
        const bool is_a = rec.name.ends_with(".lora_A");
        const bool is_b = rec.name.ends_with(".lora_B");
        if (!is_a && !is_b)
            throw FormatError("unexpected adapter tensor '" + rec.name + "'");
        const std::string target = rec.name.substr(0, rec.name.size() - 7);
        auto values = detail::f32_values<S>(container.slice(rec.offset, rec.byte_len));
        if (values.size() != detail::numel(rec.shape))
            throw FormatError("tensor '" + rec.name + "' payload length mismatch");
        auto& entry = adapter.entries[target];
        Tensor<S> tensor = Tensor<S>::from(rec.shape, std::move(values), true);
        if (is_a) {
            if (rec.shape.size() != 2 || rec.shape[0] != adapter.config.rank)
                throw FormatError("adapter tensor '" + rec.name + "' has inconsistent rank");
            entry.k = rec.shape[1];
            entry.a = std::move(tensor);
        } else {
            if (rec.shape.size() != 2 || rec.shape[1] != adapter.config.rank)
                throw FormatError("adapter tensor '" + rec.name + "' has inconsistent rank");
            entry.d = rec.shape[0];
            entry.b = std::move(tensor);
        }
    }
    for (const auto& [target, entry] : adapter.entries)
        if (!entry.a.defined() || !entry.b.defined())
            throw FormatError("adapter target '" + target + "' lacks its A/B pair");
    return adapter;
}

/// Load plus base-compatibility verification.
template <class S>
LoraAdapter<S> load_adapter(const std::filesystem::path& path, const ModelWeights<S>& base) {
    LoraAdapter<S> adapter = load_adapter<S>(path);
    if (adapter.base_hash != base.config.hash())
        throw CompatibilityError("adapter at '" + path.string() +
                                 "' was trained against a different base model config");
    return adapter;
}

}  // namespace lorachat
