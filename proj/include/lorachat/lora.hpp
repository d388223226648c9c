// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adaptation of frozen base weights. A target weight W0 [d, k]
// gains a trainable pair B [d, r], A [r, k]; the adapted layer computes
// W0 x + (alpha / r) B A x. B starts at zero, so a freshly injected model
// is exactly the base model.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lorachat/errors.hpp"
#include "lorachat/quantize.hpp"
#include "lorachat/rng.hpp"
#include "lorachat/tensor.hpp"
#include "lorachat/transformer.hpp"

namespace lorachat {

struct LoraConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    std::vector<std::string> target_paths;
    double dropout_rate = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
        if (!(alpha > 0)) throw ConfigError("LoRA alpha must be > 0");
        if (target_paths.empty()) throw ConfigError("LoRA target_paths must be non-empty");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("LoRA dropout_rate must be in [0, 1)");
    }
};

/// Attention query and value projections of every layer — reproduces the
/// reference trainable-parameter accounting.
inline std::vector<std::string> default_target_paths(const ModelConfig& config) {
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        paths.push_back("layers." + std::to_string(i) + ".attn.Wq");
        paths.push_back("layers." + std::to_string(i) + ".attn.Wv");
    }
    return paths;
}

template <class S>
struct LoraEntry {
    Tensor<S> a;  // [rank, k]
    Tensor<S> b;  // [d, rank]
    std::size_t d = 0;
    std::size_t k = 0;
};

template <class S>
struct LoraAdapter {
    LoraConfig config;
    ModelConfig model_config;
    std::uint64_t base_hash = 0;
    std::map<std::string, LoraEntry<S>> entries;  // keyed by manifest path

    /// A/B tensors in a fixed order, named "<path>.lora_A" / "<path>.lora_B".
    std::vector<std::pair<std::string, Tensor<S>>> trainables() const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        for (const auto& [path, entry] : entries) {
            out.emplace_back(path + ".lora_A", entry.a);
            out.emplace_back(path + ".lora_B", entry.b);
        }
        return out;
    }
};

/// Sum over targets of rank * (d + k).
inline std::size_t count_trainable(const LoraConfig& cfg,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& targets) {
    std::size_t total = 0;
    for (const auto& [d, k] : targets) total += cfg.rank * (d + k);
    return total;
}

namespace detail {

template <class S>
void check_lora_shapes(const Shape& w0, const Tensor<S>& a, const Tensor<S>& b, std::size_t r) {
    if (w0.size() != 2 || a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("lora_forward requires 2-D W0/A/B");
    const std::size_t d = w0[0], k = w0[1];
    if (a.dim(0) != r || a.dim(1) != k || b.dim(0) != d || b.dim(1) != r)
        throw ShapeError("lora_forward shape mismatch: W0 " + shape_str(w0) + ", A " +
                         shape_str(a.shape()) + ", B " + shape_str(b.shape()) + ", r=" +
                         std::to_string(r));
}

}  // namespace detail

/// Eq-style adapted linear map in the column convention:
/// W0 x + (alpha / r) B (A x), for x a k-vector or a [k, n] batch.
/// Gradient flows only through A and B when the base is frozen.
template <class S>
Tensor<S> lora_forward(const Tensor<S>& w0, const Tensor<S>& a, const Tensor<S>& b, double alpha,
                       std::size_t r, const Tensor<S>& x) {
    detail::check_lora_shapes(w0.shape(), a, b, r);
    const std::size_t k = w0.dim(1);
    const bool vector_input = x.ndim() == 1;
    if (vector_input ? x.dim(0) != k : (x.ndim() != 2 || x.dim(0) != k))
        throw ShapeError("lora_forward input " + detail::shape_str(x.shape()) +
                         " does not match W0 " + detail::shape_str(w0.shape()));

    Tensor<S> cols = vector_input ? reshape(x, {k, 1}) : x;
    Tensor<S> base = matmul(w0, cols);
    Tensor<S> delta = matmul(b, matmul(a, cols));
    Tensor<S> out = add(base, scale(delta, static_cast<S>(alpha / static_cast<double>(r))));
    return vector_input ? reshape(out, {w0.dim(0)}) : out;
}

/// Quantized base: the int8 image is dequantized row-wise for the product.
template <class S>
Tensor<S> lora_forward(const QuantizedWeight<S>& w0, const Tensor<S>& a, const Tensor<S>& b,
                       double alpha, std::size_t r, const Tensor<S>& x) {
    return lora_forward(dequantize(w0), a, b, alpha, r, x);
}

template <class S>
struct AdaptedModel;

/// Routes targeted weights through the low-rank path; everything else falls
/// back to the plain base application.
template <class S>
class LoraWeightAccess : public WeightAccess<S> {
  public:
    explicit LoraWeightAccess(const AdaptedModel<S>& model) : model_(model) {}

    Tensor<S> project(const std::string& path, const Tensor<S>& w,
                      const Tensor<S>& x) const override {
        const LoraEntry<S>* entry = find(path);
        if (!entry) return WeightAccess<S>::project(path, w, x);
        const LoraConfig& cfg = model_.adapter.config;
        Tensor<S> cols = transpose(x);
        if (dropout_active()) {
            Tensor<S> base = matmul(w, cols);
            Tensor<S> delta = matmul(entry->b, matmul(entry->a, dropout(cols)));
            return transpose(add(base, scale(delta, static_cast<S>(cfg.scaling()))));
        }
        return transpose(lora_forward(w, entry->a, entry->b, cfg.alpha, cfg.rank, cols));
    }

    Tensor<S> project_out(const std::string& path, const Tensor<S>& w,
                          const Tensor<S>& x) const override {
        const LoraEntry<S>* entry = find(path);
        if (!entry) return WeightAccess<S>::project_out(path, w, x);
        // stored [in, out]: x (W0 + s B A) = x W0 + s (x B) A
        Tensor<S> base = matmul(x, w);
        Tensor<S> xin = dropout_active() ? dropout(x) : x;
        Tensor<S> delta = matmul(matmul(xin, entry->b), entry->a);
        return add(base, scale(delta, static_cast<S>(model_.adapter.config.scaling())));
    }

    Tensor<S> gather(const std::string& path, const Tensor<S>& table,
                     std::span<const TokenId> ids) const override {
        const LoraEntry<S>* entry = find(path);
        if (!entry) return WeightAccess<S>::gather(path, table, ids);
        // row i of (W0 + s B A) is W0[i, :] + s B[i, :] A
        Tensor<S> base = embedding_rows(table, ids);
        Tensor<S> delta = matmul(embedding_rows(entry->b, ids), entry->a);
        return add(base, scale(delta, static_cast<S>(model_.adapter.config.scaling())));
    }

  private:
    const LoraEntry<S>* find(const std::string& path) const {
        auto it = model_.adapter.entries.find(path);
        return it == model_.adapter.entries.end() ? nullptr : &it->second;
    }

    bool dropout_active() const {
        return model_.training && model_.adapter.config.dropout_rate > 0.0;
    }

    Tensor<S> dropout(const Tensor<S>& x) const {
        if (!model_.dropout_rng)
            throw ConfigError("training with dropout requires a dropout RNG on the model");
        const double rate = model_.adapter.config.dropout_rate;
        const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
        std::vector<S> mask(x.size());
        for (auto& m : mask)
            m = model_.dropout_rng->next_double() < rate ? S(0) : keep_scale;
        return mul(x, Tensor<S>::from(x.shape(), std::move(mask)));
    }

    const AdaptedModel<S>& model_;
};

/// A frozen base plus its trainable adapter.
template <class S>
struct AdaptedModel {
    ModelWeights<S> base;
    LoraAdapter<S> adapter;
    bool training = false;
    SplitMix64* dropout_rng = nullptr;  // only consulted when dropout_rate > 0
};

/// Freezes the base, attaches zero-initialized adapters to the target paths,
/// and returns the combined model. A ~ Normal(0, 0.02), B = 0, so the
/// adapted forward initially equals the base forward.
template <class S>
AdaptedModel<S> inject(ModelWeights<S> weights, LoraConfig cfg,
                       std::optional<std::uint64_t> seed = std::nullopt) {
    if (weights.adapted) throw ConfigError("already adapted: inject may run once per model");
    cfg.validate();

    std::vector<std::string> missing;
    std::vector<std::pair<std::string, Shape>> resolved;
    for (const auto& path : cfg.target_paths) {
        auto tensor = weights.find(path);
        if (!tensor) {
            missing.push_back(path);
            continue;
        }
        if (tensor->ndim() != 2)
            throw ConfigError("LoRA target '" + path + "' is not a 2-D weight");
        resolved.emplace_back(path, tensor->shape());
    }
    if (!missing.empty()) {
        std::string msg = "unresolved LoRA target paths:";
        for (const auto& p : missing) msg += " " + p;
        throw ConfigError(msg);
    }
    for (const auto& [path, shape] : resolved) {
        if (cfg.rank >= std::min(shape[0], shape[1]))
            throw ConfigError("LoRA rank " + std::to_string(cfg.rank) +
                              " must be < min(d, k) of target '" + path + "' " +
                              detail::shape_str(shape));
    }

    for (auto& [name, tensor] : weights.manifest()) tensor.set_requires_grad(false);

    SplitMix64 rng = SplitMix64(seed.value_or(weights.config.seed)).split(0x4C6F5241ULL);
    LoraAdapter<S> adapter;
    adapter.config = cfg;
    adapter.model_config = weights.config;
    adapter.base_hash = weights.config.hash();
    for (const auto& [path, shape] : resolved) {
        const std::size_t d = shape[0], k = shape[1];
        LoraEntry<S> entry;
        entry.d = d;
        entry.k = k;
        std::vector<S> a_init(cfg.rank * k);
        for (auto& v : a_init) v = static_cast<S>(rng.normal(0.0, kInitStdDev));
        entry.a = Tensor<S>::from({cfg.rank, k}, std::move(a_init), true);
        entry.b = Tensor<S>::zeros({d, cfg.rank}, true);
        adapter.entries.emplace(path, std::move(entry));
    }

    weights.adapted = true;
    return AdaptedModel<S>{std::move(weights), std::move(adapter)};
}

template <class S>
Tensor<S> forward_sequence(const AdaptedModel<S>& m, std::span<const TokenId> ids,
                           AttentionProbe<S>* probe = nullptr) {
    LoraWeightAccess<S> access(m);
    return forward_sequence(m.base, ids, access, probe);
}

template <class S>
Tensor<S> forward(const AdaptedModel<S>& m, const std::vector<std::vector<TokenId>>& batch) {
    LoraWeightAccess<S> access(m);
    return forward(m.base, batch, access);
}

/// Folds (alpha / r) B A into a full-precision base, producing a standalone
/// model whose forward matches the adapted forward.
template <class S>
ModelWeights<S> merge(const ModelWeights<S>& weights, const LoraAdapter<S>& adapter) {
    if (adapter.base_hash != weights.config.hash())
        throw CompatibilityError("adapter base hash does not match this model config");
    if (weights.is_quantized())
        throw ConfigError("merge requires a full-precision base (dequantize-then-merge changes semantics)");

    ModelWeights<S> merged = weights.clone();
    merged.adapted = false;
    const S s = static_cast<S>(adapter.config.scaling());
    for (const auto& [path, entry] : adapter.entries) {
        auto slot = merged.find(path);
        if (!slot)
            throw CompatibilityError("adapter entry '" + path + "' missing from the model");
        std::vector<S> delta(entry.d * entry.k, S(0));
        detail::mm_nn_acc(entry.b.data().data(), entry.a.data().data(), delta.data(), entry.d,
                          adapter.config.rank, entry.k);
        auto out = slot->data();
        for (std::size_t i = 0; i < delta.size(); ++i) out[i] += s * delta[i];
    }
    return merged;
}

/// Replaces every 2-D weight with its int8 image (dense side holds the
/// dequantized values, the sidecar keeps the raw int8 + scales).
template <class S>
ModelWeights<S> quantize_model(const ModelWeights<S>& weights) {
    if (weights.is_quantized()) throw ConfigError("model is already quantized");
    ModelWeights<S> out = weights.clone();
    for (auto& [name, tensor] : out.manifest()) {
        if (tensor.ndim() != 2) continue;
        QuantizedWeight<S> q = quantize_int8(tensor);
        Tensor<S> dq = dequantize(q);
        std::copy(dq.data().begin(), dq.data().end(), tensor.data().begin());
        out.quantized.emplace(name, std::move(q));
    }
    return out;
}

}  // namespace lorachat
