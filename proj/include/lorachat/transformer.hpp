// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only causal transformer: pre-layer-norm residual blocks,
// learned absolute positions, untied output head, no biases on the linear
// projections. Every parameter is addressable through a stable dotted-path
// manifest (e.g. "layers.3.attn.Wv") so adapters and checkpoints can name
// weights without touching the structs.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorachat/errors.hpp"
#include "lorachat/quantize.hpp"
#include "lorachat/rng.hpp"
#include "lorachat/tensor.hpp"

namespace lorachat {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStdDev = 0.02;

struct ModelConfig {
    std::size_t vocab_size = 258;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq = 512;
    std::uint64_t seed = 0;

    // The last two vocabulary slots are reserved control tokens.
    TokenId pad_id() const { return static_cast<TokenId>(vocab_size) - 2; }
    TokenId eos_id() const { return static_cast<TokenId>(vocab_size) - 1; }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2 (PAD and EOS)");
        if (max_seq < 1) throw ConfigError("max_seq must be >= 1");
        if (d_model == 0 || d_ff == 0) throw ConfigError("d_model and d_ff must be positive");
        if (n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("d_model (" + std::to_string(d_model) +
                              ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }

    std::string canonical() const {
        return "vocab_size=" + std::to_string(vocab_size) + ";d_model=" + std::to_string(d_model) +
               ";n_layers=" + std::to_string(n_layers) + ";n_heads=" + std::to_string(n_heads) +
               ";d_ff=" + std::to_string(d_ff) + ";max_seq=" + std::to_string(max_seq) +
               ";seed=" + std::to_string(seed);
    }

    std::uint64_t hash() const { return fnv1a64(canonical()); }

    bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct LayerWeights {
    Tensor<S> ln1_gain, ln1_bias;
    Tensor<S> wq, wk, wv, wo;  // each [d_model, d_model]
    Tensor<S> ln2_gain, ln2_bias;
    Tensor<S> w1;  // [d_ff, d_model]
    Tensor<S> w2;  // [d_model, d_ff]
};

template <class S>
struct ModelWeights {
    ModelConfig config;
    Tensor<S> tok_embedding;  // [vocab, d_model]
    Tensor<S> pos_embedding;  // [max_seq, d_model]
    std::vector<LayerWeights<S>> layers;
    Tensor<S> final_ln_gain, final_ln_bias;
    Tensor<S> head;  // [d_model, vocab]
    bool adapted = false;
    // int8 sidecar per quantized path; the dense tensor then holds the
    // dequantized image so forward passes need no special casing.
    std::map<std::string, QuantizedWeight<S>> quantized;

    bool is_quantized() const { return !quantized.empty(); }

    std::vector<std::pair<std::string, Tensor<S>>> manifest() const {
        std::vector<std::pair<std::string, Tensor<S>>> entries;
        entries.emplace_back("tok_embedding", tok_embedding);
        entries.emplace_back("pos_embedding", pos_embedding);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string prefix = "layers." + std::to_string(i) + ".";
            const auto& l = layers[i];
            entries.emplace_back(prefix + "ln1.gain", l.ln1_gain);
            entries.emplace_back(prefix + "ln1.bias", l.ln1_bias);
            entries.emplace_back(prefix + "attn.Wq", l.wq);
            entries.emplace_back(prefix + "attn.Wk", l.wk);
            entries.emplace_back(prefix + "attn.Wv", l.wv);
            entries.emplace_back(prefix + "attn.Wo", l.wo);
            entries.emplace_back(prefix + "ln2.gain", l.ln2_gain);
            entries.emplace_back(prefix + "ln2.bias", l.ln2_bias);
            entries.emplace_back(prefix + "mlp.W1", l.w1);
            entries.emplace_back(prefix + "mlp.W2", l.w2);
        }
        entries.emplace_back("final_ln.gain", final_ln_gain);
        entries.emplace_back("final_ln.bias", final_ln_bias);
        entries.emplace_back("head", head);
        return entries;
    }

    std::optional<Tensor<S>> find(const std::string& path) const {
        for (auto& [name, tensor] : manifest())
            if (name == path) return tensor;
        return std::nullopt;
    }

    ModelWeights clone() const {
        ModelWeights copy;
        copy.config = config;
        copy.tok_embedding = tok_embedding.clone();
        copy.pos_embedding = pos_embedding.clone();
        for (const auto& l : layers)
            copy.layers.push_back(LayerWeights<S>{l.ln1_gain.clone(), l.ln1_bias.clone(),
                                                  l.wq.clone(), l.wk.clone(), l.wv.clone(),
                                                  l.wo.clone(), l.ln2_gain.clone(),
                                                  l.ln2_bias.clone(), l.w1.clone(), l.w2.clone()});
        copy.final_ln_gain = final_ln_gain.clone();
        copy.final_ln_bias = final_ln_bias.clone();
        copy.head = head.clone();
        copy.adapted = adapted;
        copy.quantized = quantized;
        return copy;
    }
};

namespace detail {

template <class S>
Tensor<S> normal_init(Shape shape, SplitMix64& rng) {
    std::vector<S> values(numel(shape));
    for (auto& v : values) v = static_cast<S>(rng.normal(0.0, kInitStdDev));
    return Tensor<S>::from(std::move(shape), std::move(values));
}

}  // namespace detail

/// Deterministic initialization from config.seed: linear weights and
/// embeddings ~ Normal(0, 0.02), layer-norm gain 1 / bias 0.
template <class S>
ModelWeights<S> init_model(const ModelConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);
    ModelWeights<S> w;
    w.config = config;
    w.tok_embedding = detail::normal_init<S>({config.vocab_size, config.d_model}, rng);
    w.pos_embedding = detail::normal_init<S>({config.max_seq, config.d_model}, rng);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        LayerWeights<S> layer;
        layer.ln1_gain = Tensor<S>::filled({config.d_model}, S(1));
        layer.ln1_bias = Tensor<S>::zeros({config.d_model});
        layer.wq = detail::normal_init<S>({config.d_model, config.d_model}, rng);
        layer.wk = detail::normal_init<S>({config.d_model, config.d_model}, rng);
        layer.wv = detail::normal_init<S>({config.d_model, config.d_model}, rng);
        layer.wo = detail::normal_init<S>({config.d_model, config.d_model}, rng);
        layer.ln2_gain = Tensor<S>::filled({config.d_model}, S(1));
        layer.ln2_bias = Tensor<S>::zeros({config.d_model});
        layer.w1 = detail::normal_init<S>({config.d_ff, config.d_model}, rng);
        layer.w2 = detail::normal_init<S>({config.d_model, config.d_ff}, rng);
        w.layers.push_back(std::move(layer));
    }
    w.final_ln_gain = Tensor<S>::filled({config.d_model}, S(1));
    w.final_ln_bias = Tensor<S>::zeros({config.d_model});
    w.head = detail::normal_init<S>({config.d_model, config.vocab_size}, rng);
    return w;
}

template <class S>
std::size_t count_params(const ModelWeights<S>& w) {
    std::size_t total = 0;
    for (const auto& [name, tensor] : w.manifest()) total += tensor.size();
    return total;
}

/// How each named weight is applied during the forward pass. Adapters
/// override these three hooks to route targeted weights through the
/// low-rank path; the defaults apply the plain weight.
template <class S>
struct WeightAccess {
    virtual ~WeightAccess() = default;

    /// Stored w[out, in] applied to row-major activations x[T, in] -> [T, out].
    virtual Tensor<S> project(const std::string& path, const Tensor<S>& w,
                              const Tensor<S>& x) const {
        (void)path;
        return matmul(x, transpose(w));
    }

    /// Stored w[in, out] applied to x[T, in] -> [T, out] (the output head).
    virtual Tensor<S> project_out(const std::string& path, const Tensor<S>& w,
                                  const Tensor<S>& x) const {
        (void)path;
        return matmul(x, w);
    }

    /// Row gather from an embedding table [n, d].
    virtual Tensor<S> gather(const std::string& path, const Tensor<S>& table,
                             std::span<const TokenId> ids) const {
        (void)path;
        return embedding_rows(table, ids);
    }
};

template <class S>
struct AttentionRecord {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t seq_len = 0;
    std::vector<S> weights;  // [seq_len, seq_len] post-softmax
};

template <class S>
struct AttentionProbe {
    std::vector<AttentionRecord<S>> records;
};

namespace detail {

template <class S>
Tensor<S> causal_mask(std::size_t t) {
    std::vector<S> m(t * t, S(0));
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = S(-1e9);
    return Tensor<S>::from({t, t}, std::move(m));
}

}  // namespace detail

/// Logits [T, vocab] for one token sequence. Positions t see only tokens <= t.
template <class S>
Tensor<S> forward_sequence(const ModelWeights<S>& w, std::span<const TokenId> ids,
                           const WeightAccess<S>& access, AttentionProbe<S>* probe = nullptr) {
    const ModelConfig& cfg = w.config;
    const std::size_t t_len = ids.size();
    if (t_len == 0) throw LengthError("forward requires at least one token");
    if (t_len > cfg.max_seq)
        throw LengthError("sequence length " + std::to_string(t_len) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
    for (TokenId id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(cfg.vocab_size));

    std::vector<TokenId> positions(t_len);
    for (std::size_t i = 0; i < t_len; ++i) positions[i] = static_cast<TokenId>(i);

    Tensor<S> x = add(access.gather("tok_embedding", w.tok_embedding, ids),
                      access.gather("pos_embedding", w.pos_embedding, positions));

    const std::size_t head_dim = cfg.d_model / cfg.n_heads;
    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(head_dim));
    const Tensor<S> mask = detail::causal_mask<S>(t_len);
    const S eps = static_cast<S>(kLayerNormEps);

    for (std::size_t li = 0; li < w.layers.size(); ++li) {
        const auto& layer = w.layers[li];
        const std::string prefix = "layers." + std::to_string(li) + ".";

        Tensor<S> h = layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps);
        Tensor<S> q = access.project(prefix + "attn.Wq", layer.wq, h);
        Tensor<S> k = access.project(prefix + "attn.Wk", layer.wk, h);
        Tensor<S> v = access.project(prefix + "attn.Wv", layer.wv, h);

        std::vector<Tensor<S>> contexts;
        contexts.reserve(cfg.n_heads);
        for (std::size_t hi = 0; hi < cfg.n_heads; ++hi) {
            Tensor<S> qh = slice_cols(q, hi * head_dim, head_dim);
            Tensor<S> kh = slice_cols(k, hi * head_dim, head_dim);
            Tensor<S> vh = slice_cols(v, hi * head_dim, head_dim);
            Tensor<S> scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_hd), mask);
            Tensor<S> attn = softmax(scores, 1);
            if (probe) {
                AttentionRecord<S> rec;
                rec.layer = li;
                rec.head = hi;
                rec.seq_len = t_len;
                rec.weights.assign(attn.data().begin(), attn.data().end());
                probe->records.push_back(std::move(rec));
            }
            contexts.push_back(matmul(attn, vh));
        }
        Tensor<S> attn_out = access.project(prefix + "attn.Wo", layer.wo, concat_cols(contexts));
        x = add(x, attn_out);

        Tensor<S> h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias, eps);
        Tensor<S> mid = gelu(access.project(prefix + "mlp.W1", layer.w1, h2));
        Tensor<S> mlp_out = access.project(prefix + "mlp.W2", layer.w2, mid);
        x = add(x, mlp_out);
    }

    Tensor<S> final_h = layer_norm(x, w.final_ln_gain, w.final_ln_bias, eps);
    return access.project_out("head", w.head, final_h);
}

template <class S>
Tensor<S> forward_sequence(const ModelWeights<S>& w, std::span<const TokenId> ids) {
    return forward_sequence(w, ids, WeightAccess<S>{});
}

/// Batched forward over length-uniform sequences: [B, T, vocab].
template <class S>
Tensor<S> forward(const ModelWeights<S>& w, const std::vector<std::vector<TokenId>>& batch,
                  const WeightAccess<S>& access) {
    if (batch.empty()) throw ShapeError("forward requires a non-empty batch");
    const std::size_t t_len = batch.front().size();
    std::vector<Tensor<S>> rows;
    rows.reserve(batch.size());
    for (const auto& ids : batch) {
        if (ids.size() != t_len)
            throw ShapeError("forward batch rows must be length-uniform (right-pad with PAD)");
        rows.push_back(forward_sequence(w, ids, access));
    }
    return stack(rows);
}

template <class S>
Tensor<S> forward(const ModelWeights<S>& w, const std::vector<std::vector<TokenId>>& batch) {
    return forward(w, batch, WeightAccess<S>{});
}

}  // namespace lorachat
