// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Per-row symmetric absmax int8 weight quantization.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lorachat/errors.hpp"
#include "lorachat/tensor.hpp"

namespace lorachat {

/// Immutable int8 image of a 2-D weight: one scale per row, scale = max|row| / 127.
/// An all-zero row stores scale 0 and dequantizes to exact zeros.
template <class S>
struct QuantizedWeight {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;  // row-major, rows*cols
    std::vector<S> scales;            // per row

    Shape shape() const { return {rows, cols}; }
};

template <class S>
QuantizedWeight<S> quantize_int8(const Tensor<S>& w) {
    if (w.ndim() != 2)
        throw ShapeError("quantize_int8 requires a 2-D weight, got " +
                         detail::shape_str(w.shape()));
    for (S v : w.data())
        if (!std::isfinite(v)) throw NumericError("quantize_int8 input is not finite");

    QuantizedWeight<S> q;
    q.rows = w.dim(0);
    q.cols = w.dim(1);
    q.values.resize(q.rows * q.cols);
    q.scales.resize(q.rows);
    auto wv = w.data();
    for (std::size_t r = 0; r < q.rows; ++r) {
        const S* row = wv.data() + r * q.cols;
        S absmax = S(0);
        for (std::size_t c = 0; c < q.cols; ++c) absmax = std::max(absmax, std::abs(row[c]));
        if (absmax == S(0)) {
            q.scales[r] = S(0);
            continue;  // values already zero-initialized
        }
        const S scale = absmax / S(127);
        q.scales[r] = scale;
        for (std::size_t c = 0; c < q.cols; ++c) {
            // round half away from zero, then clamp to the int8 symmetric range
            const S scaled = std::round(row[c] / scale);
            const S clamped = std::clamp(scaled, S(-127), S(127));
            q.values[r * q.cols + c] = static_cast<std::int8_t>(clamped);
        }
    }
    return q;
}

template <class S>
Tensor<S> dequantize(const QuantizedWeight<S>& q) {
    std::vector<S> out(q.rows * q.cols);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const S scale = q.scales[r];
        for (std::size_t c = 0; c < q.cols; ++c)
            out[r * q.cols + c] = static_cast<S>(q.values[r * q.cols + c]) * scale;
    }
    return Tensor<S>::from({q.rows, q.cols}, std::move(out));
}

}  // namespace lorachat
