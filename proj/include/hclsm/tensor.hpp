#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// Values are immutable after construction (storage is shared between views);
// gradients accumulate into per-node buffers during backward(). Each forward
// pass records op nodes on a thread-local append-only tape; backward() walks
// the tape once in reverse and then frees it, so a second backward() without
// a fresh forward is an error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hclsm/parallel.hpp"
#include "hclsm/rng.hpp"

namespace hclsm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

inline bool& grad_enabled_flag() {
    static thread_local bool enabled = true;
    return enabled;
}

template <class T>
struct NodeT {
    Shape shape;
    std::shared_ptr<std::vector<T>> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool pending = false;
    std::uint64_t epoch = 0;
    std::int64_t tape_pos = -1;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    std::size_t numel() const { return value ? value->size() : 0; }

    void ensure_grad() {
        if (grad.size() != numel()) grad.assign(numel(), T(0));
    }
};

// Per-forward-pass tape; thread-local so independent model instances can run
// on different threads.
template <class T>
struct TapeT {
    std::vector<std::shared_ptr<NodeT<T>>> nodes;
    std::uint64_t epoch = 1;
    std::size_t checkpoint = 0;  // truncation marker; unused at clip scale

    static TapeT& instance() {
        static thread_local TapeT tape;
        return tape;
    }

    void record(const std::shared_ptr<NodeT<T>>& n) {
        n->epoch = epoch;
        n->tape_pos = static_cast<std::int64_t>(nodes.size());
        nodes.push_back(n);
    }

    void reset() {
        nodes.clear();
        ++epoch;
    }
};

// Optional allocation instrumentation (used by memory-behavior tests).
struct MemStats {
    std::size_t live = 0;
    std::size_t peak = 0;
    bool enabled = false;

    static MemStats& instance() {
        static thread_local MemStats s;
        return s;
    }
    void on_alloc(std::size_t n) {
        if (!enabled) return;
        live += n;
        if (live > peak) peak = live;
    }
    void on_free(std::size_t n) {
        if (!enabled) return;
        live = live > n ? live - n : 0;
    }
    void start() {
        enabled = true;
        live = 0;
        peak = 0;
    }
    void stop() { enabled = false; }
};

template <class T>
struct TrackedStorage {
    std::vector<T> data;
    explicit TrackedStorage(std::size_t n, T fill = T(0)) : data(n, fill) {
        MemStats::instance().on_alloc(n);
    }
    explicit TrackedStorage(std::vector<T>&& v) : data(std::move(v)) {
        MemStats::instance().on_alloc(data.size());
    }
    ~TrackedStorage() { MemStats::instance().on_free(data.size()); }
};

template <class T>
std::shared_ptr<std::vector<T>> make_storage(std::size_t n, T fill = T(0)) {
    auto holder = std::make_shared<TrackedStorage<T>>(n, fill);
    return std::shared_ptr<std::vector<T>>(holder, &holder->data);
}

template <class T>
std::shared_ptr<std::vector<T>> make_storage(std::vector<T>&& v) {
    auto holder = std::make_shared<TrackedStorage<T>>(std::move(v));
    return std::shared_ptr<std::vector<T>>(holder, &holder->data);
}

}  // namespace detail

// Disables tape recording within scope (target branches, monitoring passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <class T>
class TensorT {
public:
    using Node = detail::NodeT<T>;
    using value_type = T;

    TensorT() = default;

    explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    explicit TensorT(const Shape& shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        node_->shape = shape;
        node_->value = detail::make_storage<T>(shape_numel(shape), fill);
    }

    TensorT(const Shape& shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
        if (data.size() != shape_numel(shape)) {
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        node_->shape = shape;
        node_->value = detail::make_storage<T>(std::move(data));
    }

    static TensorT scalar(T v) { return TensorT(Shape{}, std::vector<T>{v}); }
    static TensorT zeros(const Shape& s) { return TensorT(s, T(0)); }
    static TensorT ones(const Shape& s) { return TensorT(s, T(1)); }
    static TensorT full(const Shape& s, T v) { return TensorT(s, v); }

    static TensorT randn(const Shape& s, SplitRng& rng, T stddev = T(1)) {
        TensorT t(s);
        auto& d = *t.node_->value;
        for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    static TensorT uniform(const Shape& s, SplitRng& rng, T lo, T hi) {
        TensorT t(s);
        auto& d = *t.node_->value;
        for (auto& v : d) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->numel(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    const std::vector<T>& data() const { return *node_->value; }

    // Mutable access for leaf tensors (parameter updates, in-place fills).
    // Copies the storage first if a view still shares it.
    std::vector<T>& mutable_data() {
        if (!node_->leaf) throw std::runtime_error("mutable_data on non-leaf tensor");
        if (node_->value.use_count() > 1) {
            node_->value = detail::make_storage<T>(std::vector<T>(*node_->value));
        }
        return *node_->value;
    }

    T item() const {
        if (numel() != 1) {
            throw std::invalid_argument("item() requires a single-element tensor, got " +
                                        shape_str(shape()));
        }
        return (*node_->value)[0];
    }

    T at(const std::vector<std::size_t>& idx) const { return (*node_->value)[offset(idx)]; }

    std::size_t offset(const std::vector<std::size_t>& idx) const {
        const Shape& s = node_->shape;
        if (idx.size() != s.size()) throw std::invalid_argument("index rank mismatch");
        std::size_t off = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= s[i]) throw std::out_of_range("index out of range");
            off = off * s[i] + idx[i];
        }
        return off;
    }

    bool requires_grad() const { return node_->requires_grad; }

    TensorT& set_requires_grad(bool b = true) {
        if (!node_->leaf) throw std::runtime_error("set_requires_grad on non-leaf tensor");
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == numel(); }

    const std::vector<T>& grad() const {
        if (!has_grad()) throw std::runtime_error("gradient not populated; call backward() first");
        return node_->grad;
    }

    std::vector<T>& grad_ref() {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    // Constant view of the same storage, cut off from the graph.
    TensorT detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->value = node_->value;
        return TensorT(n);
    }

    // Reverse-mode sweep from a scalar. Visits recorded nodes exactly once in
    // reverse order, then frees the tape.
    void backward() const {
        auto& tape = detail::TapeT<T>::instance();
        if (numel() != 1) {
            throw std::invalid_argument("backward() requires a scalar loss, got " +
                                        shape_str(shape()));
        }
        if (!node_->leaf && node_->epoch != tape.epoch) {
            throw std::runtime_error("stale tape: loss was produced by a previous forward pass");
        }
        node_->ensure_grad();
        node_->grad[0] = T(1);
        if (node_->leaf) {
            tape.reset();
            return;
        }
        node_->pending = true;
        for (std::int64_t i = node_->tape_pos; i >= 0; --i) {
            Node& n = *tape.nodes[static_cast<std::size_t>(i)];
            if (!n.pending) continue;
            n.pending = false;
            if (n.backward_fn) n.backward_fn(n);
        }
        tape.reset();
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<double>;

namespace detail {

// Builds an op node: value computed by the caller, backward closure wired to
// the parents. Records on the tape only when gradients are enabled and some
// parent needs them; otherwise the result is a plain constant.
template <class T>
TensorT<T> make_op(Shape shape, std::shared_ptr<std::vector<T>> value,
                   std::vector<TensorT<T>> parents,
                   std::function<void(NodeT<T>&)> backward_fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool need = grad_enabled_flag();
    if (need) {
        bool any = false;
        for (auto& p : parents) any = any || p.requires_grad();
        need = any;
    }
    if (need) {
        n->leaf = false;
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
        TapeT<T>::instance().record(n);
    }
    return TensorT<T>(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace detail {

// Unary op: y = f(x); df(x, y, dy) -> dx contribution.
template <class T, class F, class DF>
TensorT<T> unary_op(const TensorT<T>& x, F f, DF df) {
    const auto& xv = x.data();
    auto out = make_storage<T>(xv.size());
    auto& ov = *out;
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = f(xv[i]);
    auto xn = x.node();
    auto on = out;
    return make_op<T>(
        x.shape(), out, {x}, [xn, on, df](NodeT<T>& self) {
            auto& p = *xn;
            if (!p.requires_grad) return;
            p.ensure_grad();
            const auto& xd = *p.value;
            const auto& yd = *on;
            for (std::size_t i = 0; i < xd.size(); ++i) {
                p.grad[i] += df(xd[i], yd[i], self.grad[i]);
            }
            p.pending = true;
        });
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument("cannot broadcast " + shape_str(a) + " with " +
                                        shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::size_t r = out.size();
    std::vector<std::size_t> strides(r, 0);
    std::size_t stride = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        std::size_t oi = i + (r - s.size());
        strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= s[i];
    }
    return strides;
}

// Binary op with numpy-style broadcasting. dfa/dfb map (a, b, y, dy) to the
// gradient contribution for the respective input.
template <class T, class F, class DFA, class DFB>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, F f, DFA dfa, DFB dfb) {
    const auto& av = a.data();
    const auto& bv = b.data();
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as == bs) {
        auto out = make_storage<T>(av.size());
        auto& ov = *out;
        for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i], bv[i]);
        auto an = a.node();
        auto bn = b.node();
        auto on = out;
        return make_op<T>(as, out, {a, b}, [an, bn, on, dfa, dfb](NodeT<T>& self) {
            const auto& ad = *an->value;
            const auto& bd = *bn->value;
            const auto& yd = *on;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < ad.size(); ++i)
                    an->grad[i] += dfa(ad[i], bd[i], yd[i], self.grad[i]);
                an->pending = true;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < bd.size(); ++i)
                    bn->grad[i] += dfb(ad[i], bd[i], yd[i], self.grad[i]);
                bn->pending = true;
            }
        });
    }
    Shape os = broadcast_shape(as, bs);
    std::size_t n = shape_numel(os);
    auto stra = broadcast_strides(as, os);
    auto strb = broadcast_strides(bs, os);
    auto out = make_storage<T>(n);
    auto& ov = *out;
    std::size_t r = os.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t offa = 0, offb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ov[i] = f(av[offa], bv[offb]);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            offa += stra[d];
            offb += strb[d];
            if (idx[d] < os[d]) break;
            offa -= stra[d] * os[d];
            offb -= strb[d] * os[d];
            idx[d] = 0;
        }
    }
    auto an = a.node();
    auto bn = b.node();
    auto on = out;
    return make_op<T>(os, out, {a, b}, [an, bn, on, os, stra, strb, dfa, dfb](NodeT<T>& self) {
        const auto& ad = *an->value;
        const auto& bd = *bn->value;
        const auto& yd = *on;
        bool ga = an->requires_grad;
        bool gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        std::size_t r = os.size();
        std::size_t n = yd.size();
        std::vector<std::size_t> idx(r, 0);
        std::size_t offa = 0, offb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (ga) an->grad[offa] += dfa(ad[offa], bd[offb], yd[i], self.grad[i]);
            if (gb) bn->grad[offb] += dfb(ad[offa], bd[offb], yd[i], self.grad[i]);
            for (std::size_t d = r; d-- > 0;) {
                ++idx[d];
                offa += stra[d];
                offb += strb[d];
                if (idx[d] < os[d]) break;
                offa -= stra[d] * os[d];
                offb -= strb[d] * os[d];
                idx[d] = 0;
            }
        }
        if (ga) an->pending = true;
        if (gb) bn->pending = true;
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T, T g) { return g; },
        [](T, T, T, T g) { return g; });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T, T g) { return g; },
        [](T, T, T, T g) { return -g; });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T, T g) { return g * y; },
        [](T x, T, T, T g) { return g * x; });
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T, T g) { return g / y; },
        [](T x, T y, T, T g) { return -g * x / (y * y); });
}

template <class T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <class T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <class T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }
template <class T>
TensorT<T> operator/(const TensorT<T>& a, const TensorT<T>& b) { return div(a, b); }

template <class T>
TensorT<T> scale(const TensorT<T>& x, T s) {
    return detail::unary_op(
        x, [s](T v) { return v * s; }, [s](T, T, T g) { return g * s; });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T s) {
    return detail::unary_op(
        x, [s](T v) { return v + s; }, [](T, T, T g) { return g; });
}

template <class T>
TensorT<T> neg(const TensorT<T>& x) { return scale(x, T(-1)); }

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <class T>
TensorT<T> sqrt(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::sqrt(v); }, [](T, T y, T g) { return g / (2 * y); });
}

template <class T>
TensorT<T> abs(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::abs(v); },
        [](T v, T, T g) { return v > 0 ? g : (v < 0 ? -g : T(0)); });
}

template <class T>
TensorT<T> tanh(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (1 - y * y); });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    return detail::unary_op(
        x,
        [](T v) {
            if (v >= 0) return T(1) / (T(1) + std::exp(-v));
            T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y, T g) { return g * y * (1 - y); });
}

template <class T>
TensorT<T> softplus(const TensorT<T>& x) {
    return detail::unary_op(
        x,
        [](T v) {
            if (v > T(30)) return v;
            if (v < T(-30)) return std::exp(v);
            return std::log1p(std::exp(v));
        },
        [](T v, T, T g) {
            T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return g * s;
        });
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
    return detail::unary_op(
        x,
        [](T v) {
            T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return v * s;
        },
        [](T v, T, T g) {
            T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return g * (s + v * s * (1 - s));
        });
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return detail::unary_op(
        x,
        [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))); },
        [](T v, T, T g) {
            T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
            T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
            return g * (cdf + v * pdf);
        });
}

// x*x with the multiply backward rule; never routed through generic pow.
template <class T>
TensorT<T> square_stable(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v * v; }, [](T v, T, T g) { return 2 * v * g; });
}

// Generic power, kept as the comparison oracle for square_stable.
template <class T>
TensorT<T> pow(const TensorT<T>& x, T p) {
    return detail::unary_op(
        x, [p](T v) { return std::pow(v, p); },
        [p](T v, T, T g) { return g * p * std::pow(v, p - 1); });
}

// Elementwise clip; gradient passes only strictly inside (lo, hi).
template <class T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
    if (lo > hi) {
        throw std::invalid_argument("clamp: lo " + std::to_string(lo) + " exceeds hi " +
                                    std::to_string(hi));
    }
    return detail::unary_op(
        x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T, T g) { return (v > lo && v < hi) ? g : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
    const auto& xv = x.data();
    T acc = 0;
    for (T v : xv) acc += v;
    auto out = detail::make_storage<T>(1, acc);
    auto xn = x.node();
    return detail::make_op<T>(Shape{}, out, {x}, [xn](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        T g = self.grad[0];
        for (auto& v : xn->grad) v += g;
        xn->pending = true;
    });
}

template <class T>
TensorT<T> mean(const TensorT<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

namespace detail {
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
    if (axis >= s.size()) throw std::invalid_argument("axis out of range for " + shape_str(s));
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
TensorT<T> sum_axis(const TensorT<T>& x, std::size_t axis, bool keepdim = false) {
    std::size_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    Shape os = x.shape();
    if (keepdim) {
        os[axis] = 1;
    } else {
        os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(outer * inner);
    auto& ov = *out;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i)
                ov[o * inner + i] += xv[(o * len + l) * inner + i];
    auto xn = x.node();
    return detail::make_op<T>(os, out, {x}, [xn, outer, len, inner](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t i = 0; i < inner; ++i)
                    xn->grad[(o * len + l) * inner + i] += self.grad[o * inner + i];
        xn->pending = true;
    });
}

template <class T>
TensorT<T> mean_axis(const TensorT<T>& x, std::size_t axis, bool keepdim = false) {
    return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(x.shape()[axis]));
}

// Max-subtracted softmax along an axis.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(xv.size());
    auto& ov = *out;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[(o * len + l) * inner + i]);
            T denom = 0;
            for (std::size_t l = 0; l < len; ++l) {
                T e = std::exp(xv[(o * len + l) * inner + i] - mx);
                ov[(o * len + l) * inner + i] = e;
                denom += e;
            }
            for (std::size_t l = 0; l < len; ++l) ov[(o * len + l) * inner + i] /= denom;
        }
    }
    auto xn = x.node();
    auto on = out;
    return detail::make_op<T>(x.shape(), out, {x},
                              [xn, on, outer, len, inner](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& y = *on;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                T dot = 0;
                for (std::size_t l = 0; l < len; ++l) {
                    std::size_t k = (o * len + l) * inner + i;
                    dot += self.grad[k] * y[k];
                }
                for (std::size_t l = 0; l < len; ++l) {
                    std::size_t k = (o * len + l) * inner + i;
                    xn->grad[k] += y[k] * (self.grad[k] - dot);
                }
            }
        }
        xn->pending = true;
    });
}

// log(sum(exp(x))) along an axis with max subtraction; removes the axis.
template <class T>
TensorT<T> logsumexp(const TensorT<T>& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    Shape os = x.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(outer * inner);
    auto& ov = *out;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[(o * len + l) * inner + i]);
            T acc = 0;
            for (std::size_t l = 0; l < len; ++l) acc += std::exp(xv[(o * len + l) * inner + i] - mx);
            ov[o * inner + i] = mx + std::log(acc);
        }
    }
    auto xn = x.node();
    auto on = out;
    return detail::make_op<T>(os, out, {x}, [xn, on, outer, len, inner](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& xd = *xn->value;
        const auto& lse = *on;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                T g = self.grad[o * inner + i];
                T m = lse[o * inner + i];
                for (std::size_t l = 0; l < len; ++l) {
                    std::size_t k = (o * len + l) * inner + i;
                    xn->grad[k] += g * std::exp(xd[k] - m);
                }
            }
        xn->pending = true;
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[b] (+)= op_a(A[b]) * op_b(B[b or 0]); all matrices row-major.
template <class T>
void matmul_raw(const T* a, const T* b, T* c, std::size_t batch, bool shared_b, std::size_t m,
                std::size_t k, std::size_t n, bool ta, bool tb, bool accumulate,
                std::size_t workers) {
    std::size_t a_sz = m * k;
    std::size_t b_sz = k * n;
    std::size_t c_sz = m * n;
    auto body = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t item = lo; item < hi; ++item) {
            std::size_t bi = item / m;
            std::size_t i = item % m;
            const T* A = a + bi * a_sz;
            const T* B = b + (shared_b ? 0 : bi * b_sz);
            T* C = c + bi * c_sz + i * n;
            if (!accumulate) std::fill(C, C + n, T(0));
            if (!ta && !tb) {
                for (std::size_t p = 0; p < k; ++p) {
                    T av = A[i * k + p];
                    const T* Brow = B + p * n;
                    for (std::size_t j = 0; j < n; ++j) C[j] += av * Brow[j];
                }
            } else if (!ta && tb) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T* Arow = A + i * k;
                    const T* Brow = B + j * k;
                    T acc = 0;
                    for (std::size_t p = 0; p < k; ++p) acc += Arow[p] * Brow[p];
                    C[j] += acc;
                }
            } else if (ta && !tb) {
                for (std::size_t p = 0; p < k; ++p) {
                    T av = A[p * m + i];
                    const T* Brow = B + p * n;
                    for (std::size_t j = 0; j < n; ++j) C[j] += av * Brow[j];
                }
            } else {
                for (std::size_t j = 0; j < n; ++j) {
                    T acc = 0;
                    for (std::size_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
                    C[j] += acc;
                }
            }
        }
    };
    std::size_t items = batch * m;
    if (workers > 1 && items * k * n >= (std::size_t(1) << 18)) {
        parallel_for(items, workers, body);
    } else {
        body(0, items);
    }
}

}  // namespace detail

// Batched matrix product. a: [batch..., m, k]; b: [k, n] (shared weight) or
// [batch..., k, n]. transpose flags apply to the trailing two axes.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool ta = false, bool tb = false) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) {
        throw std::invalid_argument("matmul requires rank >= 2 operands: " + shape_str(as) +
                                    " x " + shape_str(bs));
    }
    std::size_t m = ta ? as[as.size() - 1] : as[as.size() - 2];
    std::size_t ka = ta ? as[as.size() - 2] : as[as.size() - 1];
    std::size_t kb = tb ? bs[bs.size() - 1] : bs[bs.size() - 2];
    std::size_t n = tb ? bs[bs.size() - 2] : bs[bs.size() - 1];
    if (ka != kb) {
        throw std::invalid_argument("matmul inner dimension mismatch: " + shape_str(as) +
                                    (ta ? "^T" : "") + " x " + shape_str(bs) + (tb ? "^T" : ""));
    }
    bool shared_b = bs.size() == 2 && as.size() > 2;
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
    if (!shared_b && as.size() != bs.size()) {
        throw std::invalid_argument("matmul batch rank mismatch: " + shape_str(as) + " x " +
                                    shape_str(bs));
    }
    if (!shared_b) {
        for (std::size_t i = 0; i + 2 < bs.size(); ++i) {
            if (bs[i] != as[i]) {
                throw std::invalid_argument("matmul batch dims mismatch: " + shape_str(as) +
                                            " x " + shape_str(bs));
            }
        }
    }
    Shape os(as.begin(), as.end() - 2);
    os.push_back(m);
    os.push_back(n);
    auto out = detail::make_storage<T>(batch * m * n);
    std::size_t workers = ThreadPool::instance().thread_count();
    detail::matmul_raw(a.data().data(), b.data().data(), out->data(), batch, shared_b, m,
                       ka, n, ta, tb, false, workers);
    std::size_t k = ka;
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(os, out, {a, b},
                              [an, bn, batch, shared_b, m, k, n, ta, tb](detail::NodeT<T>& self) {
        std::size_t workers = ThreadPool::instance().thread_count();
        const T* gc = self.grad.data();
        const T* A = an->value->data();
        const T* B = bn->value->data();
        if (an->requires_grad) {
            an->ensure_grad();
            T* ga = an->grad.data();
            // dA = dC Bt / B dCt depending on flags (see derivations inline).
            if (!ta && !tb) {
                detail::matmul_raw(gc, B, ga, batch, shared_b, m, n, k, false, true, true, workers);
            } else if (!ta && tb) {
                detail::matmul_raw(gc, B, ga, batch, shared_b, m, n, k, false, false, true, workers);
            } else if (ta && !tb) {
                // dA[k x m] = B dC^T
                detail::matmul_raw(B, gc, ga, batch, false, k, n, m, tb, true, true, workers);
            } else {
                // dA[k x m] = B^T dC^T
                detail::matmul_raw(B, gc, ga, batch, false, k, n, m, true, true, true, workers);
            }
            an->pending = true;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            T* gb = bn->grad.data();
            if (shared_b) {
                // Accumulate over the batch; sequential over b for determinism.
                for (std::size_t bi = 0; bi < batch; ++bi) {
                    const T* Ab = A + bi * m * k;
                    const T* gcb = gc + bi * m * n;
                    if (!tb) {
                        detail::matmul_raw(Ab, gcb, gb, 1, false, k, m, n, !ta, false, true, workers);
                    } else {
                        detail::matmul_raw(gcb, Ab, gb, 1, false, n, m, k, true, ta, true, workers);
                    }
                }
            } else {
                if (!tb) {
                    detail::matmul_raw(A, gc, gb, batch, false, k, m, n, !ta, false, true, workers);
                } else {
                    detail::matmul_raw(gc, A, gb, batch, false, n, m, k, true, ta, true, workers);
                }
            }
            bn->pending = true;
        }
    });
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& s) {
    if (shape_numel(s) != x.numel()) {
        throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(s) +
                                    " changes element count");
    }
    auto xn = x.node();
    return detail::make_op<T>(s, xn->value, {x}, [xn](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        xn->pending = true;
    });
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw std::invalid_argument("permute rank mismatch");
    Shape os(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) os[i] = s[perm[i]];
    std::size_t r = s.size();
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
    std::vector<std::size_t> gather(r);
    for (std::size_t i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(xv.size());
    auto& ov = *out;
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = xv[off];
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            off += gather[d];
            if (idx[d] < os[d]) break;
            off -= gather[d] * os[d];
            idx[d] = 0;
        }
    }
    auto xn = x.node();
    return detail::make_op<T>(os, out, {x}, [xn, os, gather, r](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::vector<std::size_t> idx(r, 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            xn->grad[off] += self.grad[i];
            for (std::size_t d = r; d-- > 0;) {
                ++idx[d];
                off += gather[d];
                if (idx[d] < os[d]) break;
                off -= gather[d] * os[d];
                idx[d] = 0;
            }
        }
        xn->pending = true;
    });
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    std::size_t outer, alen, inner;
    detail::axis_split(x.shape(), axis, outer, alen, inner);
    if (start + len > alen) throw std::invalid_argument("slice out of range");
    Shape os = x.shape();
    os[axis] = len;
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(outer * len * inner);
    auto& ov = *out;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            std::copy_n(&xv[(o * alen + start + l) * inner], inner, &ov[(o * len + l) * inner]);
    auto xn = x.node();
    return detail::make_op<T>(os, out, {x},
                              [xn, outer, alen, inner, start, len](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t i = 0; i < inner; ++i)
                    xn->grad[(o * alen + start + l) * inner + i] +=
                        self.grad[(o * len + l) * inner + i];
        xn->pending = true;
    });
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    Shape os = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != os.size()) throw std::invalid_argument("concat rank mismatch");
        for (std::size_t i = 0; i < os.size(); ++i) {
            if (i != axis && p.shape()[i] != os[i])
                throw std::invalid_argument("concat shape mismatch on axis " + std::to_string(i));
        }
        total += p.shape()[axis];
    }
    os[axis] = total;
    std::size_t outer, tlen, inner;
    detail::axis_split(os, axis, outer, tlen, inner);
    auto out = detail::make_storage<T>(outer * tlen * inner);
    auto& ov = *out;
    std::vector<std::size_t> offs;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offs.push_back(off);
        std::size_t plen = p.shape()[axis];
        const auto& pv = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&pv[o * plen * inner], plen * inner, &ov[(o * tlen + off) * inner]);
        off += plen;
    }
    std::vector<std::shared_ptr<detail::NodeT<T>>> pnodes;
    std::vector<std::size_t> plens;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        plens.push_back(p.shape()[axis]);
    }
    return detail::make_op<T>(os, out, parts,
                              [pnodes, plens, offs, outer, tlen, inner](detail::NodeT<T>& self) {
        for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
            auto& pn = *pnodes[pi];
            if (!pn.requires_grad) continue;
            pn.ensure_grad();
            std::size_t plen = plens[pi];
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < plen; ++l)
                    for (std::size_t i = 0; i < inner; ++i)
                        pn.grad[(o * plen + l) * inner + i] +=
                            self.grad[(o * tlen + offs[pi] + l) * inner + i];
            pn.pending = true;
        }
    });
}

template <class T>
TensorT<T> concat(std::initializer_list<TensorT<T>> parts, std::size_t axis) {
    return concat(std::vector<TensorT<T>>(parts), axis);
}

// Selects rows along an axis; duplicate indices accumulate gradient.
template <class T>
TensorT<T> index_select(const TensorT<T>& x, std::size_t axis,
                        const std::vector<std::size_t>& indices) {
    std::size_t outer, alen, inner;
    detail::axis_split(x.shape(), axis, outer, alen, inner);
    for (std::size_t i : indices)
        if (i >= alen) throw std::invalid_argument("index_select index out of range");
    Shape os = x.shape();
    os[axis] = indices.size();
    const auto& xv = x.data();
    auto out = detail::make_storage<T>(outer * indices.size() * inner);
    auto& ov = *out;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < indices.size(); ++l)
            std::copy_n(&xv[(o * alen + indices[l]) * inner], inner,
                        &ov[(o * indices.size() + l) * inner]);
    auto xn = x.node();
    return detail::make_op<T>(os, out, {x},
                              [xn, outer, alen, inner, indices](detail::NodeT<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < indices.size(); ++l)
                for (std::size_t i = 0; i < inner; ++i)
                    xn->grad[(o * alen + indices[l]) * inner + i] +=
                        self.grad[(o * indices.size() + l) * inner + i];
        xn->pending = true;
    });
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

template <class T>
bool all_finite(const TensorT<T>& x) {
    for (T v : x.data())
        if (!std::isfinite(v)) return false;
    return true;
}

template <class T>
T max_abs(const TensorT<T>& x) {
    T m = 0;
    for (T v : x.data()) m = std::max(m, std::abs(v));
    return m;
}

// max |a-b| scaled by the reference magnitude; the comparison metric used by
// all numeric equivalence tests.
template <class T>
T max_rel_err(const TensorT<T>& got, const TensorT<T>& ref) {
    if (got.numel() != ref.numel()) throw std::invalid_argument("max_rel_err size mismatch");
    T scale = std::max(max_abs(ref), T(1e-30));
    T m = 0;
    for (std::size_t i = 0; i < got.numel(); ++i)
        m = std::max(m, std::abs(got.data()[i] - ref.data()[i]));
    return m / scale;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& ref) {
    double scale = 1e-30;
    for (double v : ref) scale = std::max(scale, std::abs(v));
    double m = 0;
    for (std::size_t i = 0; i < got.size(); ++i) m = std::max(m, std::abs(got[i] - ref[i]));
    return m / scale;
}

}  // namespace hclsm
