#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "error.hpp"

namespace massl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

inline thread_local int no_grad_depth = 0;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    // Empty until a backward pass reaches the node.
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward;

    T* grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Dense row-major array that records the operations producing it.
///
/// Copies share the underlying node: a Tensor is a handle, so a parameter
/// held by a model and the same parameter referenced from a graph are one
/// object. Layout is (batch, channel, spatial...).
template <typename T>
class Tensor {
  public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + to_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    // Direct write access; callers own graph consistency (used for parameters and inputs).
    std::span<T> mutable_values() { return node_->value; }
    const T& operator[](std::size_t i) const { return node_->value[i]; }

    T item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    void clear_grad() { node_->grad.clear(); }

    /// Deep copy of values; the copy is a fresh leaf.
    Tensor clone(bool requires_grad = false) const {
        return Tensor(shape(), node_->value, requires_grad);
    }

    /// Builds an op result. Parents and the backward rule are kept only when
    /// recording is enabled and some parent requires grad.
    static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                              std::function<void(detail::Node<T>&)> backward) {
        Tensor out(std::move(shape), std::move(values));
        bool any = false;
        if (grad_enabled()) {
            for (const auto& p : parents) any = any || p.requires_grad();
        }
        if (any) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

    const NodePtr& node() const { return node_; }

  private:
    NodePtr node_;
};

namespace detail {

template <typename T>
bool needs_grad(const Node<T>& n, std::size_t parent) {
    return n.parents[parent]->requires_grad;
}

}  // namespace detail

/// Reverse-mode pass from a single-value loss.
///
/// Interior gradients are recomputed from scratch on every call; leaf
/// gradients accumulate until cleared, so two calls on the same graph
/// double every leaf gradient.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (NodeT* n : order) {
        if (n->backward) n->grad.assign(n->value.size(), T(0));
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

/// Identity forward; contributes nothing to any ancestor's gradient.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

namespace detail {

enum class BinaryKind { add, sub, mul };

inline const char* name(BinaryKind k) {
    switch (k) {
        case BinaryKind::add: return "add";
        case BinaryKind::sub: return "sub";
        case BinaryKind::mul: return "mul";
    }
    return "?";
}

template <typename T>
Tensor<T> binary(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.size() == 1 && !same;
    const bool b_scalar = b.size() == 1 && !same;
    if (!same && !a_scalar && !b_scalar) {
        throw ShapeError(std::string("shape mismatch in ") + name(kind) + ": " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
    }
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[a_scalar ? 0 : i];
        const T y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
        }
    }
    return Tensor<T>::make_result(out_shape, std::move(out), {a, b}, [kind, a_scalar, b_scalar, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T* g = self.grad.data();
        if (pa.requires_grad) {
            T* ga = pa.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                T d = g[i];
                if (kind == BinaryKind::mul) d *= pb.value[b_scalar ? 0 : i];
                ga[a_scalar ? 0 : i] += d;
            }
        }
        if (pb.requires_grad) {
            T* gb = pb.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                T d = g[i];
                if (kind == BinaryKind::sub) d = -d;
                if (kind == BinaryKind::mul) d *= pa.value[a_scalar ? 0 : i];
                gb[b_scalar ? 0 : i] += d;
            }
        }
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinaryKind::add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinaryKind::sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(detail::BinaryKind::mul, a, b);
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// scale * x + offset, value-wise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T offset = T(0)) {
    const auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + offset;
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [scale](detail::Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += scale * self.grad[i];
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return affine(x, s);
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    const auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * xv[i];
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += T(2) * p.value[i] * self.grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    return Tensor<T>::make_result({1}, {acc}, {x}, [](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < p.value.size(); ++i) gx[i] += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T n = static_cast<T>(x.size());
    T acc = T(0);
    for (T v : x.values()) acc += v;
    return Tensor<T>::make_result({1}, {acc / n}, {x}, [n](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer();
        const T g = self.grad[0] / n;
        for (std::size_t i = 0; i < p.value.size(); ++i) gx[i] += g;
    });
}

/// Sum over every axis but the first: shape (N, ...) -> (N).
template <typename T>
Tensor<T> sum_per_item(const Tensor<T>& x) {
    if (x.dim() < 1) throw ShapeError("sum_per_item on rank-0 tensor");
    const std::size_t items = x.extent(0);
    const std::size_t stride = items ? x.size() / items : 0;
    const auto xv = x.values();
    std::vector<T> out(items, T(0));
    for (std::size_t n = 0; n < items; ++n) {
        T acc = T(0);
        for (std::size_t i = 0; i < stride; ++i) acc += xv[n * stride + i];
        out[n] = acc;
    }
    return Tensor<T>::make_result({items}, std::move(out), {x}, [stride](detail::Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer();
        for (std::size_t n = 0; n < self.grad.size(); ++n) {
            for (std::size_t i = 0; i < stride; ++i) gx[n * stride + i] += self.grad[n];
        }
    });
}

/// Same values, new shape (element count must match).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    return Tensor<T>::make_result(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()), {x},
                                  [](detail::Node<T>& self) {
                                      T* gx = self.parents[0]->grad_buffer();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                                  });
}

/// Converts values to another scalar type as a fresh leaf (no graph link).
template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& x, bool requires_grad = false) {
    std::vector<U> out(x.values().begin(), x.values().end());
    return Tensor<U>(x.shape(), std::move(out), requires_grad);
}

}  // namespace massl
