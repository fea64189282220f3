#pragma once

// Dense tensor with a minimal reverse-mode autodiff graph. Row-major
// 32-bit storage for training; the same templates instantiate with
// double for the gradient-check shadow evaluator.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kp3d {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

// Thread-local switch: when disabled, ops do not record the graph.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node<T>>> parents;
    // Reads this->grad, accumulates into parents' grad.
    std::function<void(Node<T>&)> backward;

    std::size_t numel() const { return value.size(); }

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& s, bool requires_grad = false) {
        return filled(s, T(0), requires_grad);
    }

    static Tensor filled(const Shape& s, T v, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = s;
        n->value.assign(shape_numel(s), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(const Shape& s, std::vector<T> data, bool requires_grad = false) {
        require(shape_numel(s) == data.size(),
                "tensor data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(s));
        auto n = std::make_shared<Node<T>>();
        n->shape = s;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() { return node_->ensure_grad(); }
    const std::vector<T>& grad_or_empty() const { return node_->grad; }

    T item() const {
        require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    // Deep copy of value (detached leaf).
    Tensor clone_detached() const {
        return Tensor::from(shape(), data(), false);
    }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Builds a graph node. Parents are always stored so the forward value
// stays alive; backward is recorded only in grad mode.
template <typename T>
Tensor<T> make_op(const char* op, const Shape& shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value = std::move(value);
    n->op = op;
    bool track = grad_mode_flag();
    bool rg = false;
    if (track) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    if (track && rg) {
        n->requires_grad = true;
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, "backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order topological sort from the loss node.
    std::vector<Node<T>*> order;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    std::vector<Node<T>*> visited;  // sorted pointer set
    visited.reserve(256);
    auto is_visited = [&](Node<T>* n) {
        return std::binary_search(visited.begin(), visited.end(), n);
    };
    auto insert_visited = [&](Node<T>* n) {
        visited.insert(std::lower_bound(visited.begin(), visited.end(), n), n);
    };

    stack.push_back({loss.node().get(), 0});
    insert_visited(loss.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && !is_visited(p)) {
                insert_visited(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior nodes get fresh gradients on every call; only leaves
    // accumulate across calls (cleared explicitly via zero_grad).
    for (Node<T>* n : order)
        if (n->backward && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));

    // order is post-order: parents before children; iterate in reverse.
    auto& lg = loss.node()->ensure_grad();
    lg[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward) {
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            auto& pg = p.grad;
            for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "div");
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return detail::make_op<T>("div", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pb.value[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] -= n.grad[i] * n.value[i] / pb.value[i];
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op<T>("mul_scalar", a.shape(), std::move(out), {a}, [c](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return detail::make_op<T>("relu", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (p.value[i] > T(0)) p.grad[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> tanh_t(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return detail::make_op<T>("tanh", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
    });
}

// softplus(x) = log(1 + exp(x)), numerically stable form.
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T x = av[i];
        out[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    return detail::make_op<T>("softplus", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            T x = p.value[i];
            T sig = x > T(0) ? T(1) / (T(1) + std::exp(-x)) : T(1) - T(1) / (T(1) + std::exp(x));
            p.grad[i] += n.grad[i] * sig;
        }
    });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return detail::make_op<T>("exp", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
    });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return detail::make_op<T>("log", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
    });
}

// sqrt with subgradient 0 at 0.
template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
    return detail::make_op<T>("sqrt", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (n.value[i] > T(0)) p.grad[i] += n.grad[i] * T(0.5) / n.value[i];
    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    return detail::make_op<T>("square", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.grad[i] * T(2) * p.value[i];
    });
}

// Elementwise min(a, b). Ties route the gradient to a.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "minimum");
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
    return detail::make_op<T>("minimum", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            if (pa.value[i] <= pb.value[i]) {
                if (pa.requires_grad) pa.grad[i] += n.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += n.grad[i];
            }
        }
    });
}

// clamp with zero gradient outside [lo, hi].
template <typename T>
Tensor<T> clamp_t(const Tensor<T>& a, T lo, T hi) {
    std::vector<T> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    return detail::make_op<T>("clamp", a.shape(), std::move(out), {a}, [lo, hi](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (p.value[i] >= lo && p.value[i] <= hi) p.grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// stop_gradient: identity forward, zero gradient through this edge.

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
    auto n = std::make_shared<Node<T>>();
    n->shape = a.shape();
    n->value = a.data();
    n->op = "stop_gradient";
    n->requires_grad = false;
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T x : a.data()) acc += x;
    return detail::make_op<T>("sum", {1}, {acc}, {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        T g = n.grad[0];
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T acc = T(0);
    for (T x : a.data()) acc += x;
    T inv = T(1) / T(a.numel());
    return detail::make_op<T>("mean", {1}, {acc * inv}, {a}, [inv](Node<T>& n) {
        auto& p = *n.parents[0];
        T g = n.grad[0] * inv;
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

// Concatenate along axis 0. All inputs must agree on trailing dims.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat0: empty input list");
    Shape s0 = parts[0].shape();
    std::size_t total0 = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        require(s.size() == s0.size(), "concat0: rank mismatch");
        for (std::size_t i = 1; i < s.size(); ++i)
            require(s[i] == s0[i], "concat0: trailing dim mismatch " + shape_str(s) + " vs " +
                                       shape_str(s0));
        total0 += static_cast<std::size_t>(s[0]);
    }
    Shape out_shape = s0;
    out_shape[0] = static_cast<int>(total0);
    std::vector<T> out;
    out.reserve(shape_numel(out_shape));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_op<T>("concat0", out_shape, std::move(out), parts, [](Node<T>& n) {
        std::size_t off = 0;
        for (auto& pp : n.parents) {
            auto& p = *pp;
            if (p.requires_grad)
                for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += n.grad[off + i];
            off += p.value.size();
        }
    });
}

// Slice along axis 0: rows [begin, begin+len).
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int begin, int len) {
    const Shape& s = a.shape();
    require(begin >= 0 && len >= 0 && begin + len <= s[0],
            "slice0: range [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                ") out of bounds for " + shape_str(s));
    std::size_t inner = a.numel() / static_cast<std::size_t>(s[0]);
    Shape out_shape = s;
    out_shape[0] = len;
    std::vector<T> out(a.data().begin() + begin * inner,
                       a.data().begin() + (begin + len) * inner);
    return detail::make_op<T>("slice0", out_shape, std::move(out), {a},
                              [begin, inner](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  std::size_t off = static_cast<std::size_t>(begin) * inner;
                                  for (std::size_t i = 0; i < n.grad.size(); ++i)
                                      p.grad[off + i] += n.grad[i];
                              });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
    require(shape_numel(s) == a.numel(),
            "reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
    return detail::make_op<T>("reshape", s, a.data(), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// matmul: (m,n) x (n,p) -> (m,p), and (m,n) x (n) -> (m)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.size() == 2, "matmul: lhs must be 2-D, got " + shape_str(sa));
    bool vec = sb.size() == 1;
    require(vec || sb.size() == 2, "matmul: rhs must be 1-D or 2-D, got " + shape_str(sb));
    int m = sa[0], n = sa[1];
    int p = vec ? 1 : sb[1];
    require(sb[0] == n, "matmul: inner dim mismatch " + shape_str(sa) + " x " + shape_str(sb));
    std::vector<T> out(static_cast<std::size_t>(m) * p, T(0));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < n; ++k) {
            T aik = av[i * n + k];
            for (int j = 0; j < p; ++j) out[i * p + j] += aik * bv[k * p + j];
        }
    Shape out_shape = vec ? Shape{m} : Shape{m, p};
    return detail::make_op<T>("matmul", out_shape, std::move(out), {a, b},
                              [m, n, p](Node<T>& n_) {
                                  auto& pa = *n_.parents[0];
                                  auto& pb = *n_.parents[1];
                                  if (pa.requires_grad) {
                                      for (int i = 0; i < m; ++i)
                                          for (int k = 0; k < n; ++k) {
                                              T acc = T(0);
                                              for (int j = 0; j < p; ++j)
                                                  acc += n_.grad[i * p + j] * pb.value[k * p + j];
                                              pa.grad[i * n + k] += acc;
                                          }
                                  }
                                  if (pb.requires_grad) {
                                      for (int i = 0; i < m; ++i)
                                          for (int k = 0; k < n; ++k) {
                                              T aik = pa.value[i * n + k];
                                              for (int j = 0; j < p; ++j)
                                                  pb.grad[k * p + j] += aik * n_.grad[i * p + j];
                                          }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Softmax over a 1-D vector.

template <typename T>
Tensor<T> softmax_vec(const Tensor<T>& a) {
    require(a.shape().size() == 1, "softmax_vec: expects 1-D input, got " + shape_str(a.shape()));
    const auto& av = a.data();
    T mx = av[0];
    for (T x : av) mx = std::max(mx, x);
    std::vector<T> out(a.numel());
    T denom = T(0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(av[i] - mx);
        denom += out[i];
    }
    for (auto& x : out) x /= denom;
    return detail::make_op<T>("softmax_vec", a.shape(), std::move(out), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        T dot = T(0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) dot += n.grad[i] * n.value[i];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            p.grad[i] += n.value[i] * (n.grad[i] - dot);
    });
}

// Spatial softmax applied independently over each (S,S) channel of (K,S,S).
template <typename T>
Tensor<T> spatial_softmax(const Tensor<T>& a) {
    const Shape& s = a.shape();
    require(s.size() == 3 || s.size() == 2, "spatial_softmax: expects (K,S,S) or (S,S)");
    int K = s.size() == 3 ? s[0] : 1;
    std::size_t plane = a.numel() / static_cast<std::size_t>(K);
    const auto& av = a.data();
    std::vector<T> out(a.numel());
    for (int k = 0; k < K; ++k) {
        const T* in = av.data() + k * plane;
        T* o = out.data() + k * plane;
        T mx = in[0];
        for (std::size_t i = 1; i < plane; ++i) mx = std::max(mx, in[i]);
        T denom = T(0);
        for (std::size_t i = 0; i < plane; ++i) {
            o[i] = std::exp(in[i] - mx);
            denom += o[i];
        }
        for (std::size_t i = 0; i < plane; ++i) o[i] /= denom;
    }
    return detail::make_op<T>("spatial_softmax", s, std::move(out), {a}, [K, plane](Node<T>& n) {
        auto& p = *n.parents[0];
        for (int k = 0; k < K; ++k) {
            const T* y = n.value.data() + k * plane;
            const T* g = n.grad.data() + k * plane;
            T* pg = p.grad.data() + k * plane;
            T dot = T(0);
            for (std::size_t i = 0; i < plane; ++i) dot += g[i] * y[i];
            for (std::size_t i = 0; i < plane; ++i) pg[i] += y[i] * (g[i] - dot);
        }
    });
}

// Mean over the spatial dims of (K,S,S) -> (K).
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& a) {
    const Shape& s = a.shape();
    require(s.size() == 3, "channel_mean: expects (K,S,S), got " + shape_str(s));
    int K = s[0];
    std::size_t plane = a.numel() / static_cast<std::size_t>(K);
    std::vector<T> out(K, T(0));
    const auto& av = a.data();
    for (int k = 0; k < K; ++k) {
        T acc = T(0);
        for (std::size_t i = 0; i < plane; ++i) acc += av[k * plane + i];
        out[k] = acc / T(plane);
    }
    return detail::make_op<T>("channel_mean", {K}, std::move(out), {a}, [K, plane](Node<T>& n) {
        auto& p = *n.parents[0];
        T inv = T(1) / T(plane);
        for (int k = 0; k < K; ++k) {
            T g = n.grad[k] * inv;
            T* pg = p.grad.data() + k * plane;
            for (std::size_t i = 0; i < plane; ++i) pg[i] += g;
        }
    });
}

}  // namespace kp3d
