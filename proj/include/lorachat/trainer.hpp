// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Adam fine-tuning of LoRA adapters against masked next-token cross-entropy.
// The aggregate batch is realized by gradient accumulation over micro
// batches; each example contributes grad(example_loss) / batch_size, so any
// micro split of the same batch produces the same update. Only adapter
// tensors are ever written; the base stays frozen.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorachat/checkpoint.hpp"
#include "lorachat/data.hpp"
#include "lorachat/errors.hpp"
#include "lorachat/lora.hpp"
#include "lorachat/rng.hpp"
#include "lorachat/tensor.hpp"

namespace lorachat {

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t total_batch = 128;
    std::size_t micro_batch = 8;
    std::size_t epochs = 2;
    std::size_t max_len = 512;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::optional<double> grad_clip;
    std::uint64_t seed = 0;
    std::size_t log_every = 1;

    void validate() const {
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (total_batch < 1 || micro_batch < 1)
            throw ConfigError("batch sizes must be >= 1");
        if (total_batch % micro_batch != 0)
            throw ConfigError("total_batch (" + std::to_string(total_batch) +
                              ") must be a multiple of micro_batch (" +
                              std::to_string(micro_batch) + ")");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
            throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("Adam eps must be > 0");
        if (grad_clip && !(*grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
        if (log_every < 1) throw ConfigError("log_every must be >= 1");
    }
};

template <class S>
struct AdamState {
    std::vector<S> m;
    std::vector<S> v;
    std::size_t t = 0;
};

/// One bias-corrected Adam update in place. A missing gradient counts as
/// zero; a non-finite gradient aborts before any state is touched.
template <class S>
void adam_step(Tensor<S>& param, AdamState<S>& state, const TrainConfig& cfg) {
    const std::size_t n = param.size();
    if (state.m.empty()) state.m.assign(n, S(0));
    if (state.v.empty()) state.v.assign(n, S(0));
    if (state.m.size() != n || state.v.size() != n)
        throw ShapeError("Adam state does not match the parameter size");

    std::span<const S> grad = param.grad();
    for (S g : grad)
        if (!std::isfinite(g))
            throw NumericError("non-finite gradient: Adam step aborted");

    state.t += 1;
    const S lr = static_cast<S>(cfg.learning_rate);
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S eps = static_cast<S>(cfg.eps);
    const S corr1 = S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(state.t)));
    const S corr2 = S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(state.t)));
    auto values = param.data();
    for (std::size_t i = 0; i < n; ++i) {
        const S g = i < grad.size() ? grad[i] : S(0);
        state.m[i] = b1 * state.m[i] + (S(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (S(1) - b2) * g * g;
        const S m_hat = state.m[i] / corr1;
        const S v_hat = state.v[i] / corr2;
        values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

/// Next-token loss of one example: positions with loss_mask=1 are predicted
/// from their prefix; everything else is context only.
template <class S>
Tensor<S> example_loss(const AdaptedModel<S>& model, const TrainingExample& ex) {
    if (ex.input_ids.size() < 2)
        throw ConfigError("example '" + ex.record_id + "' is too short to train on");
    std::span<const TokenId> input(ex.input_ids.data(), ex.input_ids.size() - 1);
    std::span<const TokenId> targets(ex.input_ids.data() + 1, ex.input_ids.size() - 1);
    std::span<const std::uint8_t> target_mask(ex.loss_mask.data() + 1, ex.loss_mask.size() - 1);
    return cross_entropy_masked(forward_sequence(model, input), targets, target_mask);
}

struct TrainStepLog {
    std::size_t step = 0;
    double mean_loss = 0.0;
    std::size_t tokens_seen = 0;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<TrainStepLog> steps;
    std::size_t epochs_completed = 0;
    std::size_t optimizer_steps = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    double final_loss = std::numeric_limits<double>::quiet_NaN();
};

inline void write_train_log_jsonl(const TrainLog& log, std::ostream& out) {
    for (const auto& s : log.steps) {
        nlohmann::json obj{{"step", s.step},
                           {"mean_loss", s.mean_loss},
                           {"tokens_seen", s.tokens_seen},
                           {"wall_seconds", s.wall_seconds}};
        out << obj.dump() << "\n";
    }
}

namespace detail {

// Enables dropout for the duration of a training run and always restores
// evaluation mode, even on exceptions.
template <class S>
struct TrainingMode {
    AdaptedModel<S>& model;
    SplitMix64 rng;

    TrainingMode(AdaptedModel<S>& m, std::uint64_t seed)
        : model(m), rng(SplitMix64(seed).split(0x64726F70ULL)) {
        model.training = true;
        model.dropout_rng = &rng;
    }
    ~TrainingMode() {
        model.training = false;
        model.dropout_rng = nullptr;
    }
};

}  // namespace detail

/// Fine-tunes the adapter in place and returns the per-step log.
/// Deterministic in cfg.seed: data order reshuffles each epoch with
/// seed + epoch, and all updates run on a single thread.
template <class S>
TrainLog train(AdaptedModel<S>& model, std::span<const TrainingExample> examples,
               const TrainConfig& cfg) {
    cfg.validate();
    if (examples.empty()) throw ConfigError("training dataset is empty");
    for (const auto& ex : examples) {
        if (ex.input_ids.size() < 2 || ex.input_ids.size() != ex.loss_mask.size())
            throw ConfigError("example '" + ex.record_id + "' is malformed");
        if (ex.input_ids.size() > cfg.max_len)
            throw ConfigError("example '" + ex.record_id + "' exceeds max_len " +
                              std::to_string(cfg.max_len));
        bool any_target = false;
        for (std::size_t i = 1; i < ex.loss_mask.size(); ++i) any_target |= ex.loss_mask[i] != 0;
        if (!any_target)
            throw ConfigError("example '" + ex.record_id + "' has no response tokens to learn");
    }

    auto params = model.adapter.trainables();
    std::vector<AdamState<S>> states(params.size());

    detail::TrainingMode<S> mode(model, cfg.seed);
    const auto start = std::chrono::steady_clock::now();

    TrainLog log;
    std::size_t tokens_seen = 0;
    std::size_t step = 0;
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        SplitMix64 shuffle_rng(cfg.seed + epoch);
        shuffle(order, shuffle_rng);

        for (std::size_t batch_start = 0; batch_start < order.size();
             batch_start += cfg.total_batch) {
            const std::size_t batch_size =
                std::min(cfg.total_batch, order.size() - batch_start);
            for (auto& [name, tensor] : params) tensor.zero_grad();

            double loss_sum = 0.0;
            for (std::size_t micro_start = 0; micro_start < batch_size;
                 micro_start += cfg.micro_batch) {
                const std::size_t micro_end =
                    std::min(micro_start + cfg.micro_batch, batch_size);
                for (std::size_t i = micro_start; i < micro_end; ++i) {
                    const TrainingExample& ex = examples[order[batch_start + i]];
                    Tensor<S> loss = example_loss(model, ex);
                    const double value = static_cast<double>(loss.item());
                    if (!std::isfinite(value))
                        throw NumericError("non-finite loss at optimizer step " +
                                           std::to_string(step + 1) + " (example '" +
                                           ex.record_id + "')");
                    loss_sum += value;
                    backward(scale(loss, S(1) / static_cast<S>(batch_size)));
                    tokens_seen += ex.input_ids.size();
                }
            }

            if (cfg.grad_clip) {
                double norm_sq = 0.0;
                for (auto& [name, tensor] : params)
                    for (S g : tensor.grad()) norm_sq += static_cast<double>(g) * g;
                const double norm = std::sqrt(norm_sq);
                if (norm > *cfg.grad_clip) {
                    const S factor = static_cast<S>(*cfg.grad_clip / norm);
                    for (auto& [name, tensor] : params) {
                        auto node = tensor.node();
                        for (auto& g : node->grad) g *= factor;
                    }
                }
            }

            for (std::size_t p = 0; p < params.size(); ++p)
                adam_step(params[p].second, states[p], cfg);

            ++step;
            const double mean_loss = loss_sum / static_cast<double>(batch_size);
            log.best_loss = std::min(log.best_loss, mean_loss);
            log.final_loss = mean_loss;
            if (step % cfg.log_every == 0) {
                const double wall =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                        .count();
                log.steps.push_back({step, mean_loss, tokens_seen, wall});
            }
        }
        log.epochs_completed = epoch + 1;
    }
    log.optimizer_steps = step;
    return log;
}

}  // namespace lorachat
