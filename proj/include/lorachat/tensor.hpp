// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
// Every operation that touches a tracked tensor records a backward closure
// on its result; backward() replays the closures in reverse topological
// order and then frees the graph (one backward per forward). Tensors copy
// shallowly: copies share the same node, like handles.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lorachat/errors.hpp"

namespace lorachat {

using TokenId = std::int32_t;
using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) n *= extent;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

template <class S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool tracked = false;  // participates in some gradient path
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::span<S> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), S(0));
        return grad;
    }
};

template <class S>
using NodePtr = std::shared_ptr<Node<S>>;

// Kernels accumulate into c so backward passes can reuse them.
// c[m,n] += a[m,k] b[k,n]
template <class S>
void mm_nn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S aip = a[i * k + p];
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// c[m,k] += a[m,n] b[k,n]^T
template <class S>
void mm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * n;
        S* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const S* brow = b + j * n;
            S acc = S(0);
            for (std::size_t t = 0; t < n; ++t) acc += arow[t] * brow[t];
            crow[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T b[m,n]
template <class S>
void mm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const S* arow = a + p * k;
        const S* brow = b + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const S api = arow[i];
            S* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace detail

template <class S>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        auto node = std::make_shared<detail::Node<S>>();
        node->data.assign(detail::numel(shape), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        node->tracked = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (values.size() != detail::numel(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + detail::shape_str(shape));
        auto node = std::make_shared<detail::Node<S>>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        node->requires_grad = requires_grad;
        node->tracked = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    std::size_t ndim() const { return node()->shape.size(); }
    std::size_t size() const { return node()->data.size(); }
    std::size_t dim(std::size_t axis) const { return node()->shape.at(axis); }

    std::span<S> data() { return node()->data; }
    std::span<const S> data() const { return node()->data; }

    bool requires_grad() const { return node()->requires_grad; }

    void set_requires_grad(bool value) {
        node()->requires_grad = value;
        node()->tracked = value || !node()->parents.empty();
    }

    /// Empty span until a backward pass has written to this tensor.
    std::span<const S> grad() const { return node()->grad; }

    void zero_grad() { node()->grad.clear(); }

    S item() const {
        if (size() != 1)
            throw ShapeError("item() requires a scalar tensor, got " + detail::shape_str(shape()));
        return node()->data[0];
    }

    template <class... I>
    S& at(I... indices) {
        return node()->data[offset_of(indices...)];
    }

    template <class... I>
    S at(I... indices) const {
        return node()->data[offset_of(indices...)];
    }

    /// Deep copy of the values; detached from any graph.
    Tensor clone() const {
        auto copy = from(node()->shape, node()->data, false);
        copy.node()->requires_grad = node()->requires_grad;
        copy.node()->tracked = node()->requires_grad;
        return copy;
    }

    const detail::NodePtr<S>& node() const {
        if (!node_) throw ShapeError("operation on an undefined tensor");
        return node_;
    }

    static Tensor wrap(detail::NodePtr<S> node) { return Tensor(std::move(node)); }

  private:
    explicit Tensor(detail::NodePtr<S> node) : node_(std::move(node)) {}

    template <class... I>
    std::size_t offset_of(I... indices) const {
        const Shape& s = node()->shape;
        constexpr std::size_t rank = sizeof...(I);
        if (rank != s.size())
            throw ShapeError("index rank " + std::to_string(rank) + " for tensor " +
                             detail::shape_str(s));
        const std::array<std::size_t, rank> ix{static_cast<std::size_t>(indices)...};
        std::size_t offset = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            if (ix[d] >= s[d]) throw IndexError("tensor index out of range");
            offset = offset * s[d] + ix[d];
        }
        return offset;
    }

    detail::NodePtr<S> node_;
};

namespace detail {

template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> data, std::vector<NodePtr<S>> parents,
                      std::function<void(Node<S>&)> backward) {
    auto node = std::make_shared<Node<S>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || p->tracked;
    if (tracked) {
        node->tracked = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<S>::wrap(std::move(node));
}

template <class S>
void accumulate(const NodePtr<S>& target, std::span<const S> grads) {
    if (!target->tracked) return;
    auto buf = target->grad_buffer();
    for (std::size_t i = 0; i < grads.size(); ++i) buf[i] += grads[i];
}

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<S> out(a.size());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(a.shape(), std::move(out), {an, bn},
                                  [an, bn](detail::Node<S>& o) {
                                      detail::accumulate<S>(an, o.grad);
                                      detail::accumulate<S>(bn, o.grad);
                                  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<S> out(a.size());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(a.shape(), std::move(out), {an, bn},
                                  [an, bn](detail::Node<S>& o) {
                                      detail::accumulate<S>(an, o.grad);
                                      if (bn->tracked) {
                                          auto buf = bn->grad_buffer();
                                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                                              buf[i] -= o.grad[i];
                                      }
                                  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<S> out(a.size());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(a.shape(), std::move(out), {an, bn},
                                  [an, bn](detail::Node<S>& o) {
                                      if (an->tracked) {
                                          auto buf = an->grad_buffer();
                                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                                              buf[i] += o.grad[i] * bn->data[i];
                                      }
                                      if (bn->tracked) {
                                          auto buf = bn->grad_buffer();
                                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                                              buf[i] += o.grad[i] * an->data[i];
                                      }
                                  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    std::vector<S> out(a.size());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), {an},
                                  [an, factor](detail::Node<S>& o) {
                                      if (!an->tracked) return;
                                      auto buf = an->grad_buffer();
                                      for (std::size_t i = 0; i < o.grad.size(); ++i)
                                          buf[i] += o.grad[i] * factor;
                                  });
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    S total = S(0);
    for (S v : a.data()) total += v;
    auto an = a.node();
    return detail::make_result<S>({1}, {total}, {an}, [an](detail::Node<S>& o) {
        if (!an->tracked) return;
        auto buf = an->grad_buffer();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += o.grad[0];
    });
}

/// GELU with the tanh approximation (the GPT-2 convention).
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    static const S c = S(std::sqrt(2.0 / 3.14159265358979323846));
    std::vector<S> out(a.size());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const S x = av[i];
        out[i] = S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
    }
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), {an}, [an](detail::Node<S>& o) {
        if (!an->tracked) return;
        auto buf = an->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const S x = an->data[i];
            const S u = c * (x + S(0.044715) * x * x * x);
            const S t = std::tanh(u);
            const S sech2 = S(1) - t * t;
            const S du = c * (S(1) + S(3) * S(0.044715) * x * x);
            buf[i] += o.grad[i] * (S(0.5) * (S(1) + t) + S(0.5) * x * sech2 * du);
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n, S(0));
    detail::mm_nn_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>({m, n}, std::move(out), {an, bn},
                                  [an, bn, m, k, n](detail::Node<S>& o) {
                                      if (an->tracked)
                                          detail::mm_nt_acc(o.grad.data(), bn->data.data(),
                                                            an->grad_buffer().data(), m, n, k);
                                      if (bn->tracked)
                                          detail::mm_tn_acc(an->data.data(), o.grad.data(),
                                                            bn->grad_buffer().data(), m, k, n);
                                  });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    if (a.ndim() != 2)
        throw ShapeError("transpose requires a 2-D tensor, got " + detail::shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<S> out(r * c);
    auto av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    auto an = a.node();
    return detail::make_result<S>({c, r}, std::move(out), {an}, [an, r, c](detail::Node<S>& o) {
        if (!an->tracked) return;
        auto buf = an->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) buf[i * c + j] += o.grad[j * r + i];
    });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t begin, std::size_t count) {
    if (a.ndim() != 2 || begin + count > a.dim(1))
        throw ShapeError("slice_cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         detail::shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<S> out(r * count);
    auto av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * c + begin + j];
    auto an = a.node();
    return detail::make_result<S>({r, count}, std::move(out), {an},
                                  [an, begin, count, r, c](detail::Node<S>& o) {
                                      if (!an->tracked) return;
                                      auto buf = an->grad_buffer();
                                      for (std::size_t i = 0; i < r; ++i)
                                          for (std::size_t j = 0; j < count; ++j)
                                              buf[i * c + begin + j] += o.grad[i * count + j];
                                  });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
    const std::size_t r = parts.front().dim(0);
    std::size_t total = 0;
    std::vector<detail::NodePtr<S>> nodes;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != r)
            throw ShapeError("concat_cols row mismatch: " + detail::shape_str(p.shape()));
        total += p.dim(1);
        nodes.push_back(p.node());
    }
    std::vector<S> out(r * total);
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        auto pv = p.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * total + col + j] = pv[i * c + j];
        col += c;
    }
    auto nodes_copy = nodes;
    return detail::make_result<S>({r, total}, std::move(out), std::move(nodes),
                                  [nodes_copy, r, total](detail::Node<S>& o) {
                                      std::size_t col = 0;
                                      for (const auto& pn : nodes_copy) {
                                          const std::size_t c = pn->shape[1];
                                          if (pn->tracked) {
                                              auto buf = pn->grad_buffer();
                                              for (std::size_t i = 0; i < r; ++i)
                                                  for (std::size_t j = 0; j < c; ++j)
                                                      buf[i * c + j] += o.grad[i * total + col + j];
                                          }
                                          col += c;
                                      }
                                  });
}

/// Same data viewed under a new shape of equal element count.
template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (detail::numel(shape) != a.size())
        throw ShapeError("reshape to " + detail::shape_str(shape) + " from " +
                         detail::shape_str(a.shape()));
    auto an = a.node();
    std::vector<S> out(an->data);
    return detail::make_result<S>(std::move(shape), std::move(out), {an},
                                  [an](detail::Node<S>& o) { detail::accumulate<S>(an, o.grad); });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class S>
Tensor<S> stack(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    const Shape inner = parts.front().shape();
    const std::size_t step = detail::numel(inner);
    std::vector<detail::NodePtr<S>> nodes;
    std::vector<S> out;
    out.reserve(step * parts.size());
    for (const auto& p : parts) {
        if (p.shape() != inner)
            throw ShapeError("stack shape mismatch: " + detail::shape_str(p.shape()) + " vs " +
                             detail::shape_str(inner));
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
    }
    Shape shape{parts.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    auto nodes_copy = nodes;
    return detail::make_result<S>(std::move(shape), std::move(out), std::move(nodes),
                                  [nodes_copy, step](detail::Node<S>& o) {
                                      for (std::size_t b = 0; b < nodes_copy.size(); ++b) {
                                          detail::accumulate<S>(
                                              nodes_copy[b],
                                              std::span<const S>(o.grad).subspan(b * step, step));
                                      }
                                  });
}

/// Gathers rows of `table` ([n, d]) by index, producing [ids.size(), d].
template <class S>
Tensor<S> embedding_rows(const Tensor<S>& table, std::span<const TokenId> ids) {
    if (table.ndim() != 2)
        throw ShapeError("embedding_rows requires a 2-D table, got " +
                         detail::shape_str(table.shape()));
    const std::size_t n = table.dim(0), d = table.dim(1);
    std::vector<S> out(ids.size() * d);
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const TokenId id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= n)
            throw IndexError("row index " + std::to_string(id) + " out of range for table " +
                             detail::shape_str(table.shape()));
        std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
    }
    auto tn = table.node();
    std::vector<TokenId> ids_copy(ids.begin(), ids.end());
    return detail::make_result<S>({ids.size(), d}, std::move(out), {tn},
                                  [tn, ids_copy, d](detail::Node<S>& o) {
                                      if (!tn->tracked) return;
                                      auto buf = tn->grad_buffer();
                                      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                                          const std::size_t row =
                                              static_cast<std::size_t>(ids_copy[i]) * d;
                                          for (std::size_t j = 0; j < d; ++j)
                                              buf[row + j] += o.grad[i * d + j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Normalization and loss
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilized by max subtraction. Inputs must be finite.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
    if (axis >= x.ndim())
        throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " +
                         detail::shape_str(x.shape()));
    for (S v : x.data())
        if (!std::isfinite(v)) throw NumericError("softmax input is not finite");

    const Shape& shape = x.shape();
    const std::size_t n = shape[axis];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    const std::size_t outer = x.size() / (n * inner);

    std::vector<S> out(x.size());
    auto xv = x.data();
    auto line_base = [n, inner](std::size_t o, std::size_t i) { return (o * n) * inner + i; };
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = line_base(o, i);
            S mx = xv[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            S denom = S(0);
            for (std::size_t j = 0; j < n; ++j) {
                const S e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= denom;
        }
    }
    auto xn = x.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), {xn}, [xn, n, inner, outer, line_base](detail::Node<S>& o) {
            if (!xn->tracked) return;
            auto buf = xn->grad_buffer();
            for (std::size_t ot = 0; ot < outer; ++ot) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = line_base(ot, i);
                    S dot = S(0);
                    for (std::size_t j = 0; j < n; ++j)
                        dot += o.grad[base + j * inner] * o.data[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        buf[idx] += o.data[idx] * (o.grad[idx] - dot);
                    }
                }
            }
        });
}

/// Per-row normalization over the last axis followed by the affine map
/// gain * x_hat + bias. Variance is biased (divide by n); eps sits inside
/// the square root.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
    if (x.ndim() < 1) throw ShapeError("layer_norm requires at least 1-D input");
    const std::size_t n = x.shape().back();
    if (gain.size() != n || bias.size() != n)
        throw ShapeError("layer_norm gain/bias " + detail::shape_str(gain.shape()) + "/" +
                         detail::shape_str(bias.shape()) + " do not match last axis of " +
                         detail::shape_str(x.shape()));
    if (!(eps > S(0))) throw ConfigError("layer_norm eps must be > 0");

    const std::size_t rows = x.size() / n;
    std::vector<S> out(x.size());
    auto xv = x.data(), gv = gain.data(), bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * n;
        S mean = S(0);
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= S(n);
        S var = S(0);
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= S(n);
        const S inv = S(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j)
            out[r * n + j] = gv[j] * ((row[j] - mean) * inv) + bv[j];
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), {xn, gn, bn}, [xn, gn, bn, rows, n, eps](detail::Node<S>& o) {
            std::vector<S> xhat(n), dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* row = xn->data.data() + r * n;
                const S* dy = o.grad.data() + r * n;
                S mean = S(0);
                for (std::size_t j = 0; j < n; ++j) mean += row[j];
                mean /= S(n);
                S var = S(0);
                for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
                var /= S(n);
                const S inv = S(1) / std::sqrt(var + eps);
                for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (row[j] - mean) * inv;
                    dxhat[j] = dy[j] * gn->data[j];
                }
                if (gn->tracked) {
                    auto gbuf = gn->grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) gbuf[j] += dy[j] * xhat[j];
                }
                if (bn->tracked) {
                    auto bbuf = bn->grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) bbuf[j] += dy[j];
                }
                if (xn->tracked) {
                    S m1 = S(0), m2 = S(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= S(n);
                    m2 /= S(n);
                    auto xbuf = xn->grad_buffer();
                    for (std::size_t j = 0; j < n; ++j)
                        xbuf[r * n + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
        });
}

/// Mean of -log softmax(logits)[target] over positions where mask is 1.
template <class S>
Tensor<S> cross_entropy_masked(const Tensor<S>& logits, std::span<const TokenId> targets,
                               std::span<const std::uint8_t> mask) {
    if (logits.ndim() != 2)
        throw ShapeError("cross_entropy_masked requires [T, V] logits, got " +
                         detail::shape_str(logits.shape()));
    const std::size_t t_len = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != t_len || mask.size() != t_len)
        throw ShapeError("cross_entropy_masked targets/mask length " +
                         std::to_string(targets.size()) + "/" + std::to_string(mask.size()) +
                         " does not match " + std::to_string(t_len) + " positions");
    std::size_t support = 0;
    for (std::size_t t = 0; t < t_len; ++t) {
        if (!mask[t]) continue;
        ++support;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab)
            throw IndexError("target id " + std::to_string(targets[t]) +
                             " out of range for vocab " + std::to_string(vocab));
    }
    if (support == 0) throw ConfigError("empty loss support: mask selects no positions");

    auto lv = logits.data();
    S loss = S(0);
    for (std::size_t t = 0; t < t_len; ++t) {
        if (!mask[t]) continue;
        const S* row = lv.data() + t * vocab;
        S mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        loss += mx + std::log(denom) - row[static_cast<std::size_t>(targets[t])];
    }
    loss /= S(support);

    auto ln = logits.node();
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    return detail::make_result<S>(
        {1}, {loss}, {ln}, [ln, tgt, msk, t_len, vocab, support](detail::Node<S>& o) {
            if (!ln->tracked) return;
            const S upstream = o.grad[0] / S(support);
            auto buf = ln->grad_buffer();
            for (std::size_t t = 0; t < t_len; ++t) {
                if (!msk[t]) continue;
                const S* row = ln->data.data() + t * vocab;
                S mx = row[0];
                for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
                S denom = S(0);
                for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
                for (std::size_t j = 0; j < vocab; ++j) {
                    const S p = std::exp(row[j] - mx) / denom;
                    buf[t * vocab + j] +=
                        upstream * (p - (j == static_cast<std::size_t>(tgt[t]) ? S(1) : S(0)));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Runs reverse-mode accumulation from a scalar loss, then frees the graph.
/// Gradients add up across calls until zero_grad(); leaves with
/// requires_grad=false are never written.
template <class S>
void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward requires a scalar loss, got " +
                         detail::shape_str(loss.shape()));

    using NodeT = detail::Node<S>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            NodeT* child = node->parents[next_child++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
    // Dynamic tape: release closures and parent links; leaf grads survive.
    for (NodeT* node : order) {
        node->backward = nullptr;
        node->parents.clear();
        if (!node->requires_grad) node->grad.clear();
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of the autodiff gradient of f at the listed
/// coordinates of x. Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
template <class S, class F>
S finite_difference_check_coords(F&& f, Tensor<S>& x, std::span<const std::size_t> coords, S h) {
    if (!(h > S(0))) throw ConfigError("finite_difference_check requires h > 0");
    const bool was_trainable = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    {
        Tensor<S> loss = f(x);
        if (loss.size() != 1) throw ShapeError("finite_difference_check requires a scalar f");
        backward(loss);
    }
    std::vector<S> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.size(), S(0));

    x.set_requires_grad(false);  // numeric probes do not need a tape
    S worst = S(0);
    auto values = x.data();
    for (std::size_t c : coords) {
        const S saved = values[c];
        values[c] = saved + h;
        const S fp = f(x).item();
        values[c] = saved - h;
        const S fm = f(x).item();
        values[c] = saved;
        const S numeric = (fp - fm) / (S(2) * h);
        const S denom = std::max({std::abs(analytic[c]), std::abs(numeric), S(1e-8)});
        worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
    }
    x.set_requires_grad(was_trainable);
    x.zero_grad();
    return worst;
}

template <class S, class F>
S finite_difference_check(F&& f, Tensor<S>& x, S h) {
    std::vector<std::size_t> coords(x.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    return finite_difference_check_coords(std::forward<F>(f), x, coords, h);
}

}  // namespace lorachat
