// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive decoding: temperature, repetition penalty, top-k sampling,
// stop handling. Per step the order is fixed: scale by temperature, penalize
// repeats (so penalized tokens can drop out of the top-k), filter to the k
// best, renormalize, sample. All randomness comes from a caller-owned
// SplitMix64, so fixed seeds reproduce exactly.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "lorachat/data.hpp"
#include "lorachat/errors.hpp"
#include "lorachat/lora.hpp"
#include "lorachat/rng.hpp"
#include "lorachat/transformer.hpp"

namespace lorachat {

struct GenerationConfig {
    std::size_t max_new_tokens = 256;
    double temperature = 0.5;
    std::size_t top_k = 20;
    double repetition_penalty = 1.2;
    std::uint64_t seed = 0;
    // EOS always terminates; these are additional textual stops.
    std::vector<std::string> stop_sequences{"###"};
    bool penalize_prompt = true;  // include prompt tokens in the penalty set

    void validate() const {
        if (!(temperature > 0))
            throw ConfigError("temperature must be > 0 (use top_k=1 for greedy decoding)");
        if (top_k < 1) throw ConfigError("top_k must be >= 1");
        if (repetition_penalty < 1.0)
            throw ConfigError("repetition_penalty must be >= 1");
    }
};

enum class StopReason { eos, stop_sequence, length, context_exhausted };

inline const char* to_string(StopReason reason) {
    switch (reason) {
        case StopReason::eos: return "eos";
        case StopReason::stop_sequence: return "stop_sequence";
        case StopReason::length: return "length";
        case StopReason::context_exhausted: return "context_exhausted";
    }
    return "unknown";
}

/// Sign-dependent penalty for already-seen tokens: positive logits divide by
/// p, non-positive multiply by p. Unseen tokens pass through unchanged.
template <class S>
std::vector<S> apply_repetition_penalty(std::span<const S> logits,
                                        const std::unordered_set<TokenId>& seen, double p) {
    if (p < 1.0) throw ConfigError("repetition penalty factor must be >= 1");
    std::vector<S> out(logits.begin(), logits.end());
    for (TokenId id : seen) {
        if (id < 0 || static_cast<std::size_t>(id) >= out.size()) continue;
        S& value = out[static_cast<std::size_t>(id)];
        value = value > S(0) ? static_cast<S>(value / p) : static_cast<S>(value * p);
    }
    return out;
}

/// Samples from the renormalized distribution over the k largest logits
/// (after dividing by temperature). Ties break toward the lower token id.
template <class S>
TokenId sample_top_k(std::span<const S> logits, std::size_t k, double temperature,
                     SplitMix64& rng) {
    if (logits.empty()) throw ShapeError("sample_top_k on empty logits");
    if (k < 1 || k > logits.size())
        throw ConfigError("top_k must lie in [1, vocab]; got " + std::to_string(k));
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");

    std::vector<std::size_t> order(logits.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (logits[a] != logits[b]) return logits[a] > logits[b];
                          return a < b;
                      });

    // softmax over the survivors, in double for stability
    std::vector<double> weights(k);
    const double top = static_cast<double>(logits[order[0]]) / temperature;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        weights[i] = std::exp(static_cast<double>(logits[order[i]]) / temperature - top);
        total += weights[i];
    }
    const double target = rng.next_double() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        acc += weights[i];
        if (target < acc) return static_cast<TokenId>(order[i]);
    }
    return static_cast<TokenId>(order[k - 1]);
}

struct GenerationResult {
    std::vector<TokenId> tokens;  // generated content, stop text stripped
    StopReason stop_reason = StopReason::length;
    std::size_t steps = 0;  // sampled tokens, including a terminating EOS
};

/// Model access for decoding: logits over the vocabulary for the next token
/// after the given context.
template <class S>
using NextLogits = std::function<std::vector<S>(std::span<const TokenId>)>;

template <class S>
GenerationResult generate(const NextLogits<S>& next_logits, std::span<const TokenId> prompt,
                          const GenerationConfig& cfg, SplitMix64& rng, std::size_t max_seq,
                          TokenId eos_id) {
    cfg.validate();
    if (prompt.size() >= max_seq)
        throw LengthError("prompt length " + std::to_string(prompt.size()) +
                          " leaves no room in a context of " + std::to_string(max_seq));

    std::vector<TokenId> context(prompt.begin(), prompt.end());
    std::unordered_set<TokenId> seen;
    if (cfg.penalize_prompt) seen.insert(prompt.begin(), prompt.end());

    GenerationResult result;
    std::string text;                      // detokenized generated bytes
    std::vector<std::size_t> text_ends;    // text length after each token

    while (true) {
        if (result.tokens.size() >= cfg.max_new_tokens) {
            result.stop_reason = StopReason::length;
            break;
        }
        if (context.size() >= max_seq) {
            result.stop_reason = StopReason::context_exhausted;
            break;
        }

        std::vector<S> logits = next_logits(context);
        std::vector<S> scaled(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i)
            scaled[i] = static_cast<S>(static_cast<double>(logits[i]) / cfg.temperature);
        std::vector<S> penalized =
            apply_repetition_penalty(std::span<const S>(scaled), seen, cfg.repetition_penalty);
        const std::size_t k = std::min(cfg.top_k, penalized.size());
        const TokenId token = sample_top_k(std::span<const S>(penalized), k, 1.0, rng);
        ++result.steps;

        if (token == eos_id) {
            result.stop_reason = StopReason::eos;
            break;
        }
        context.push_back(token);
        result.tokens.push_back(token);
        seen.insert(token);
        if (token >= 0 && token < 256) text.push_back(static_cast<char>(token));
        text_ends.push_back(text.size());

        std::size_t stop_at = std::string::npos;
        for (const auto& stop : cfg.stop_sequences) {
            if (stop.empty()) continue;
            const auto pos = text.find(stop);
            if (pos != std::string::npos) stop_at = std::min(stop_at, pos);
        }
        if (stop_at != std::string::npos) {
            std::size_t keep = 0;
            while (keep < result.tokens.size() && text_ends[keep] <= stop_at) ++keep;
            result.tokens.resize(keep);
            result.stop_reason = StopReason::stop_sequence;
            break;
        }
    }
    return result;
}

namespace detail {

template <class S, class Model>
NextLogits<S> last_row_logits(const Model& model) {
    return [&model](std::span<const TokenId> ids) {
        Tensor<S> logits = forward_sequence(model, ids);
        const std::size_t t = logits.dim(0), v = logits.dim(1);
        auto data = logits.data();
        return std::vector<S>(data.begin() + static_cast<std::ptrdiff_t>((t - 1) * v),
                              data.end());
    };
}

}  // namespace detail

template <class S>
GenerationResult generate(const ModelWeights<S>& model, std::span<const TokenId> prompt,
                          const GenerationConfig& cfg, SplitMix64& rng) {
    return generate<S>(detail::last_row_logits<S>(model), prompt, cfg, rng,
                       model.config.max_seq, model.config.eos_id());
}

template <class S>
GenerationResult generate(const AdaptedModel<S>& model, std::span<const TokenId> prompt,
                          const GenerationConfig& cfg, SplitMix64& rng) {
    return generate<S>(detail::last_row_logits<S>(model), prompt, cfg, rng,
                       model.base.config.max_seq, model.base.config.eos_id());
}

struct ChatTurn {
    std::string user;
    std::string assistant;
    StopReason stop_reason = StopReason::length;
};

struct ChatSession {
    PromptTemplate tmpl = PromptTemplate::generic_chat();
    GenerationConfig config;
    SplitMix64 rng{0};
    std::vector<ChatTurn> history;

    void reseed(std::uint64_t seed) { rng = SplitMix64(seed); }
};

/// One single-turn exchange: render the active template around the user
/// text, generate, strip at the stop, append to the session history.
template <class Model>
std::string chat_turn(ChatSession& session, const Model& model, std::string_view user_text) {
    const std::string trimmed = detail::trim_copy(user_text);
    if (trimmed.empty()) throw InputError("empty user message");
    const std::vector<TokenId> prompt_ids = tokenize(render_prompt(session.tmpl, trimmed));
    GenerationResult result = generate(model, prompt_ids, session.config, session.rng);
    std::string assistant = detail::trim_copy(detokenize(result.tokens));
    session.history.push_back({trimmed, assistant, result.stop_reason});
    return assistant;
}

}  // namespace lorachat
