#pragma once

// Reverse-mode differentiable tensor engine.
//
// A Tensor is a shared handle onto a graph node. Nodes created by an op keep
// handles to their inputs plus a closure that pushes the node's gradient back
// into them, so the graph itself is the tape. backward() walks it in reverse
// topological order; leaf gradients accumulate across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hdu {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Thrown when operand shapes are incompatible with an op's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first written
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into inputs that require grad.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        if (numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             to_string(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        set_requires_grad(requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    // Mutable access is for leaves (parameter updates, loaders); ops never mutate inputs.
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) {
        if (!node_->leaf) throw std::logic_error("requires_grad can only be set on leaf tensors");
        node_->requires_grad = r;
        if (r)
            node_->ensure_grad();
        else
            node_->grad.clear();
    }
    bool is_leaf() const { return node_->leaf; }
    const char* op() const { return node_->op; }

    /// Gradient values; all zeros if nothing has been accumulated.
    std::span<const T> grad() const { return node_->ensure_grad(); }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    /// Fresh leaf holding a copy of the values, cut from any graph.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    Tensor reshape(Shape s) const;

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

/// Creates a result node; records inputs and backward only when grad is needed.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    if (grad_mode_enabled())
        for (auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
        n->requires_grad = true;
        n->leaf = false;
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

template <class T>
void accumulate(Node<T>& target, std::span<const T> g) {
    if (!target.requires_grad) return;
    auto& dst = target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshape(Shape s) const {
    if (numel(s) != size())
        throw ShapeError("reshape: cannot view " + to_string(shape()) + " as " + to_string(s));
    return detail::make_result<T>("reshape", std::move(s), node_->value, {*this}, [](Node<T>& self) {
        detail::accumulate<T>(*self.inputs[0], self.grad);
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        detail::accumulate<T>(*self.inputs[0], self.grad);
        detail::accumulate<T>(*self.inputs[1], self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        detail::accumulate<T>(*self.inputs[0], self.grad);
        auto& rhs = *self.inputs[1];
        if (rhs.requires_grad) {
            auto& g = rhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.size());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& lhs = *self.inputs[0];
        auto& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
            auto& g = lhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.value[i];
        }
        if (rhs.requires_grad) {
            auto& g = rhs.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.value[i];
        }
    });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, T s) {
    std::vector<T> out(a.values());
    for (auto& v : out) v += s;
    return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& self) {
        detail::accumulate<T>(*self.inputs[0], self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, T s) {
    return add(a, -s);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, T s) {
    std::vector<T> out(a.values());
    for (auto& v : out) v *= s;
    return detail::make_result<T>("mul_scalar", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

/// max(x, 0); subgradient 0 at x == 0.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.values());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return detail::make_result<T>("relu", a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in.value[i] > T(0)) g[i] += self.grad[i];
    });
}

/// Clamp into [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
    std::vector<T> out(a.values());
    for (auto& v : out) v = std::clamp(v, lo, hi);
    return detail::make_result<T>("clamp", a.shape(), std::move(out), {a}, [lo, hi](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in.value[i] > lo && in.value[i] < hi) g[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return mul(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
    return mul(a, s);
}

// ---------------------------------------------------------------------------
// Reductions and structural ops

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    return detail::make_result<T>("sum", Shape{}, {acc}, {a}, [](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return mul(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Weighted sum of all elements; handy as a random projection in gradient checks.
template <class T>
Tensor<T> dot(const Tensor<T>& a, std::span<const T> weights) {
    if (weights.size() != a.size()) throw ShapeError("dot: weight length mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * weights[i];
    std::vector<T> w(weights.begin(), weights.end());
    return detail::make_result<T>("dot", Shape{}, {acc}, {a}, [w = std::move(w)](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    });
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& ts, std::size_t axis = 1) {
    if (ts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& ref = ts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for shape " + to_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (auto& t : ts) {
        const Shape& s = t.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d)
            if (d != axis && s[d] != ref[d]) ok = false;
        if (!ok) throw ShapeError("concat: extents " + to_string(s) + " incompatible with " + to_string(ref));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;  // channel offset of each input
    std::size_t off = 0;
    for (auto& t : ts) {
        offsets.push_back(off);
        off += t.shape()[axis];
    }
    const std::size_t total = out_shape[axis];
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const std::size_t c = ts[k].shape()[axis];
        auto src = ts[k].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + o * c * inner, c * inner, out.begin() + (o * total + offsets[k]) * inner);
    }
    return detail::make_result<T>(
        "concat", out_shape, std::move(out), ts, [offsets, outer, inner, total](Node<T>& self) {
            for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                auto& in = *self.inputs[k];
                if (!in.requires_grad) continue;
                auto& g = in.ensure_grad();
                const std::size_t c = g.size() / (outer * inner);
                for (std::size_t o = 0; o < outer; ++o) {
                    const T* src = self.grad.data() + (o * total + offsets[k]) * inner;
                    T* dst = g.data() + o * c * inner;
                    for (std::size_t i = 0; i < c * inner; ++i) dst[i] += src[i];
                }
            }
        });
}

/// Channel concatenation for (N, C, ...) tensors.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& ts) {
    return concat(ts, 1);
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

template <class T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child->requires_grad && !child->leaf && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());
    return order;
}

}  // namespace detail

/// Accumulates dloss/dt into every reachable leaf that requires grad.
/// The graph is retained, so the same loss may be differentiated again.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1 || !loss.shape().empty())
        throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    Node<T>* root = loss.node().get();
    if (!root->requires_grad) return;
    if (root->leaf) {
        root->ensure_grad()[0] += T(1);
        return;
    }
    auto order = detail::topo_order(root);
    for (Node<T>* n : order) {
        auto& g = n->ensure_grad();
        std::fill(g.begin(), g.end(), T(0));
    }
    root->grad[0] = T(1);
    for (Node<T>* n : order) {
        if (n->backward_fn) n->backward_fn(*n);
    }
    // Intermediate gradients are scratch; leaves keep theirs.
    for (Node<T>* n : order) std::vector<T>().swap(n->grad);
}

/// Value copy into another precision (no graph).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> v(t.data().begin(), t.data().end());
    return Tensor<To>(t.shape(), std::move(v), requires_grad);
}

}  // namespace hdu
