// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lorachat/lora.hpp"
#include "lorachat/rng.hpp"

using namespace lorachat;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_ff = 32;
    cfg.max_seq = 16;
    cfg.seed = seed;
    return cfg;
}

Tensor<double> random_tensor(Shape shape, SplitMix64& rng, double stddev = 1.0) {
    std::vector<double> values(detail::numel(shape));
    for (auto& v : values) v = rng.normal(0.0, stddev);
    return Tensor<double>::from(std::move(shape), std::move(values));
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, SplitMix64& rng) {
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = static_cast<TokenId>(rng.next_below(vocab));
    return ids;
}

void randomize_adapter(LoraAdapter<double>& adapter, SplitMix64& rng) {
    for (auto& [path, entry] : adapter.entries) {
        for (auto& v : entry.a.data()) v = rng.normal(0.0, 0.1);
        for (auto& v : entry.b.data()) v = rng.normal(0.0, 0.1);
    }
}

}  // namespace

TEST_CASE("lora_forward with zero B equals the base product bitwise", "[lora]") {
    SplitMix64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto w0 = random_tensor({6, 4}, rng);
        auto a = random_tensor({2, 4}, rng);
        auto b = Tensor<double>::zeros({6, 2});
        auto x = random_tensor({4, 3}, rng);
        auto adapted = lora_forward(w0, a, b, 16.0, 2, x);
        auto base = matmul(w0, x);
        REQUIRE(adapted.shape() == base.shape());
        for (std::size_t i = 0; i < base.size(); ++i)
            CHECK(adapted.data()[i] == base.data()[i]);
    }
}

TEST_CASE("lora_forward hand example", "[lora]") {
    auto w0 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto a = Tensor<double>::from({1, 2}, {1, 0});
    auto b = Tensor<double>::from({2, 1}, {1, 0});
    auto x = Tensor<double>::from({2}, {1, 2});
    auto h = lora_forward(w0, a, b, 1.0, 1, x);
    REQUIRE(h.shape() == Shape{2});
    CHECK(h.data()[0] == 2.0);  // W0 x = [1,2], B A x = [1,0]
    CHECK(h.data()[1] == 2.0);
}

TEST_CASE("alpha scales the delta term linearly", "[lora]") {
    SplitMix64 rng(2);
    auto w0 = Tensor<double>::zeros({5, 3});
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({5, 2}, rng);
    auto x = random_tensor({3}, rng);
    auto once = lora_forward(w0, a, b, 2.0, 2, x);    // alpha = r
    auto twice = lora_forward(w0, a, b, 4.0, 2, x);   // alpha = 2r
    for (std::size_t i = 0; i < once.size(); ++i)
        CHECK_THAT(twice.data()[i], Catch::Matchers::WithinRel(2.0 * once.data()[i], 1e-12));
}

TEST_CASE("lora_forward validates shapes", "[lora]") {
    auto w0 = Tensor<double>::zeros({4, 3});
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    CHECK_THROWS_AS(lora_forward(w0, a, b, 1.0, 2, Tensor<double>::zeros({5})), ShapeError);
    auto bad_a = Tensor<double>::zeros({2, 5});
    CHECK_THROWS_AS(lora_forward(w0, bad_a, b, 1.0, 2, Tensor<double>::zeros({3})), ShapeError);
}

TEST_CASE("lora_forward on a quantized base dequantizes row-wise", "[lora]") {
    SplitMix64 rng(3);
    auto w0 = random_tensor({4, 3}, rng);
    auto q = quantize_int8(w0);
    auto a = random_tensor({1, 3}, rng);
    auto b = random_tensor({4, 1}, rng);
    auto x = random_tensor({3}, rng);
    auto via_quant = lora_forward(q, a, b, 1.0, 1, x);
    auto via_dense = lora_forward(dequantize(q), a, b, 1.0, 1, x);
    for (std::size_t i = 0; i < via_quant.size(); ++i)
        CHECK(via_quant.data()[i] == via_dense.data()[i]);
}

TEST_CASE("gradient flows only through A and B", "[lora]") {
    SplitMix64 rng(4);
    auto w0 = random_tensor({4, 3}, rng);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({4, 2}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto x = random_tensor({3}, rng);
    backward(sum(lora_forward(w0, a, b, 2.0, 2, x)));
    CHECK(w0.grad().empty());
    CHECK(x.grad().empty());
    CHECK_FALSE(a.grad().empty());
    CHECK_FALSE(b.grad().empty());
}

TEST_CASE("count_trainable reproduces the reference accounting", "[lora]") {
    LoraConfig cfg;
    cfg.rank = 8;
    cfg.target_paths = {"q", "v"};
    // 28 layers, q and v projections of a 4096-wide model
    std::vector<std::pair<std::size_t, std::size_t>> targets;
    for (int i = 0; i < 28; ++i) {
        targets.emplace_back(4096, 4096);
        targets.emplace_back(4096, 4096);
    }
    CHECK(count_trainable(cfg, targets) == 3'670'016);  // ~3.6M

    LoraConfig r1;
    r1.rank = 1;
    r1.target_paths = {"w"};
    CHECK(count_trainable(r1, {{2, 3}}) == 5);

    LoraConfig r16 = cfg;
    r16.rank = 16;
    CHECK(count_trainable(r16, targets) == 2 * count_trainable(cfg, targets));
}

TEST_CASE("inject freezes the base and adds zero-delta adapters", "[lora]") {
    auto cfg = tiny_config();
    auto weights = init_model<double>(cfg);
    LoraConfig lora;
    lora.target_paths = default_target_paths(cfg);
    SplitMix64 rng(5);
    auto ids = random_tokens(8, cfg.vocab_size, rng);
    auto base_logits = forward_sequence(weights, ids);

    auto adapted = inject(std::move(weights), lora);
    auto adapted_logits = forward_sequence(adapted, ids);
    REQUIRE(adapted_logits.size() == base_logits.size());
    for (std::size_t i = 0; i < base_logits.size(); ++i)
        CHECK(adapted_logits.data()[i] == base_logits.data()[i]);

    // census: exactly the adapter tensors are trainable
    for (auto& [name, tensor] : adapted.base.manifest()) CHECK_FALSE(tensor.requires_grad());
    std::size_t trainable_elems = 0;
    for (auto& [name, tensor] : adapted.adapter.trainables()) {
        CHECK(tensor.requires_grad());
        trainable_elems += tensor.size();
    }
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    for (auto& [path, e] : adapted.adapter.entries) shapes.emplace_back(e.d, e.k);
    CHECK(trainable_elems == count_trainable(lora, shapes));

    CHECK_THROWS_AS(inject(std::move(adapted.base), lora), ConfigError);
}

TEST_CASE("inject reports unresolved target paths", "[lora]") {
    auto weights = init_model<double>(tiny_config());
    LoraConfig lora;
    lora.target_paths = {"layers.0.attn.Wq", "layers.9.attn.Wv", "nope"};
    try {
        inject(std::move(weights), lora);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("layers.9.attn.Wv") != std::string::npos);
        CHECK(msg.find("nope") != std::string::npos);
    }
}

TEST_CASE("inject rejects rank >= min(d, k) and 1-D targets", "[lora]") {
    auto cfg = tiny_config();
    LoraConfig lora;
    lora.rank = cfg.d_model;  // not < min(d, k)
    lora.target_paths = {"layers.0.attn.Wq"};
    CHECK_THROWS_AS(inject(init_model<double>(cfg), lora), ConfigError);

    LoraConfig norm_target;
    norm_target.target_paths = {"final_ln.gain"};
    CHECK_THROWS_AS(inject(init_model<double>(cfg), norm_target), ConfigError);
}

TEST_CASE("merge with a zero adapter returns the base weights", "[lora]") {
    auto cfg = tiny_config();
    auto weights = init_model<double>(cfg);
    auto reference = weights.clone();
    LoraConfig lora;
    lora.target_paths = default_target_paths(cfg);
    auto adapted = inject(std::move(weights), lora);
    auto merged = merge(adapted.base, adapted.adapter);
    auto m1 = reference.manifest(), m2 = merged.manifest();
    for (std::size_t i = 0; i < m1.size(); ++i)
        for (std::size_t j = 0; j < m1[i].second.size(); ++j)
            CHECK(m1[i].second.data()[j] == m2[i].second.data()[j]);
}

TEST_CASE("merged forward matches adapted forward", "[lora]") {
    SplitMix64 rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        auto cfg = tiny_config(100 + trial);
        LoraConfig lora;
        lora.rank = 4;
        lora.alpha = 8.0;
        lora.target_paths = default_target_paths(cfg);
        lora.target_paths.push_back("layers.0.mlp.W1");
        lora.target_paths.push_back("head");
        auto adapted = inject(init_model<double>(cfg), lora);
        randomize_adapter(adapted.adapter, rng);
        auto merged = merge(adapted.base, adapted.adapter);
        for (int input = 0; input < 4; ++input) {
            auto ids = random_tokens(8, cfg.vocab_size, rng);
            auto a = forward_sequence(adapted, ids);
            auto m = forward_sequence(merged, ids);
            double worst = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i)
                worst = std::max(worst, std::abs(a.data()[i] - m.data()[i]));
            CHECK(worst < 1e-9);
        }
    }
}

TEST_CASE("merge guards hash and precision", "[lora]") {
    auto cfg = tiny_config();
    LoraConfig lora;
    lora.target_paths = default_target_paths(cfg);
    auto adapted = inject(init_model<double>(cfg), lora);

    auto other = init_model<double>(tiny_config(999));
    CHECK_THROWS_AS(merge(other, adapted.adapter), CompatibilityError);

    auto quantized = quantize_model(init_model<double>(cfg));
    try {
        merge(quantized, adapted.adapter);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("full-precision") != std::string::npos);
    }
}

TEST_CASE("int8 quantization applies the per-row absmax scheme", "[lora][quant]") {
    auto w = Tensor<double>::from({1, 2}, {0.5, -1.0});
    auto q = quantize_int8(w);
    CHECK_THAT(q.scales[0], Catch::Matchers::WithinRel(1.0 / 127.0, 1e-12));
    CHECK(q.values[0] == 64);  // round(63.5) away from zero
    CHECK(q.values[1] == -127);
    auto back = dequantize(q);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(std::abs(back.data()[i] - w.data()[i]) <= q.scales[0] / 2.0 + 1e-15);
}

TEST_CASE("zero matrix round-trips exactly through int8", "[lora][quant]") {
    auto w = Tensor<double>::zeros({3, 4});
    auto q = quantize_int8(w);
    for (auto s : q.scales) CHECK(s == 0.0);
    for (auto v : q.values) CHECK(v == 0);
    auto back = dequantize(q);
    for (auto v : back.data()) CHECK(v == 0.0);
}

TEST_CASE("constant rows saturate to +-127 and round-trip exactly", "[lora][quant]") {
    auto w = Tensor<double>::from({1, 3}, {-0.75, -0.75, -0.75});
    auto q = quantize_int8(w);
    for (auto v : q.values) CHECK(v == -127);
    auto back = dequantize(w.ndim() ? q : q);
    for (auto v : back.data()) CHECK(v == -0.75);
}

TEST_CASE("quantization error stays within half a scale step", "[lora][quant]") {
    SplitMix64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto w = random_tensor({8, 16}, rng, 0.5);
        auto q = quantize_int8(w);
        auto back = dequantize(q);
        for (std::size_t r = 0; r < q.rows; ++r)
            for (std::size_t c = 0; c < q.cols; ++c)
                CHECK(std::abs(back.at(r, c) - w.at(r, c)) <= q.scales[r] / 2.0 + 1e-12);
    }
}

TEST_CASE("quantize_model keeps norms dense and is guarded against reruns", "[lora][quant]") {
    auto cfg = tiny_config();
    auto weights = init_model<double>(cfg);
    auto q = quantize_model(weights);
    CHECK(q.is_quantized());
    CHECK(q.quantized.count("layers.0.attn.Wq") == 1);
    CHECK(q.quantized.count("final_ln.gain") == 0);
    CHECK_THROWS_AS(quantize_model(q), ConfigError);

    // dense side now holds the dequantized image
    const auto& stored = q.quantized.at("head");
    auto dq = dequantize(stored);
    auto head = *q.find("head");
    for (std::size_t i = 0; i < head.size(); ++i) CHECK(head.data()[i] == dq.data()[i]);
}

TEST_CASE("training with dropout perturbs only the training path", "[lora]") {
    auto cfg = tiny_config();
    LoraConfig lora;
    lora.dropout_rate = 0.5;
    lora.target_paths = default_target_paths(cfg);
    auto adapted = inject(init_model<double>(cfg), lora);
    SplitMix64 rng(8);
    randomize_adapter(adapted.adapter, rng);
    SplitMix64 data_rng(9);
    auto ids = random_tokens(6, cfg.vocab_size, data_rng);

    auto eval1 = forward_sequence(adapted, ids);
    auto eval2 = forward_sequence(adapted, ids);
    for (std::size_t i = 0; i < eval1.size(); ++i) CHECK(eval1.data()[i] == eval2.data()[i]);

    SplitMix64 dropout_rng(10);
    adapted.training = true;
    adapted.dropout_rng = &dropout_rng;
    auto train1 = forward_sequence(adapted, ids);
    auto train2 = forward_sequence(adapted, ids);
    bool differs = false;
    for (std::size_t i = 0; i < train1.size(); ++i)
        if (train1.data()[i] != train2.data()[i]) differs = true;
    CHECK(differs);
}
