#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "golo/common.hpp"

namespace golo {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Value-semantic handle to a node in the autodiff graph. Data is immutable
// after construction in normal use; only gradient buffers mutate.
template <class T>
class Tensor {
  public:
    using Scalar = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->data.assign(size_t(numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (int64_t(data.size()) != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return from({}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(int i) const {
        int nd = int(node_->shape.size());
        if (i < 0) i += nd;
        return node_->shape[size_t(i)];
    }
    int ndim() const { return int(node_->shape.size()); }
    int64_t size() const { return int64_t(node_->data.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

    T item() const {
        if (node_->data.size() != 1)
            throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    T at(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) {
            off = off * node_->shape[k] + i;
            ++k;
        }
        return node_->data[size_t(off)];
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

// Ordered record of executed differentiable operations. Ops append closures
// in execution order, which is a valid topological order; the backward sweep
// walks the record once in reverse.
template <class T>
class Tape {
  public:
    static Tape*& current() {
        thread_local Tape* t = nullptr;
        return t;
    }

    void record(std::shared_ptr<Node<T>> out, std::function<void()> backward_fn) {
        ops_.emplace_back(std::move(out), std::move(backward_fn));
    }
    size_t size() const { return ops_.size(); }
    bool empty() const { return ops_.empty(); }
    void clear() { ops_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates into leaf gradients in one
    // reverse sweep. Intermediate (op output) gradients are reset per sweep,
    // so repeated backward calls without zeroing accumulate exactly one more
    // gradient copy onto leaves each time.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        if (ops_.empty()) throw ContractError("backward on an empty tape");
        for (auto& [out, fn] : ops_) out->grad.assign(out->data.size(), T(0));
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->second();
    }

  private:
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::function<void()>>> ops_;
};

// RAII activation of a tape for the current thread.
template <class T>
class TapeScope {
  public:
    explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::current()) { Tape<T>::current() = &t; }
    ~TapeScope() { Tape<T>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape<T>* prev_;
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* opname) {
    if (!debug_checks()) return;
    for (T v : t.data())
        if (!std::isfinite(double(v)))
            throw NumericError(std::string("non-finite value produced by ") + opname);
}

template <class T>
inline Tensor<T> make_out(Shape shape, bool requires_grad) {
    return Tensor<T>::zeros(std::move(shape), requires_grad);
}

template <class T>
inline bool taping(const Tensor<T>& out) {
    return out.requires_grad() && Tape<T>::current() != nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton for binary same-shape elementwise ops.
template <class T, class Fwd, class Bwd>
Tensor<T> ew_binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    auto out = make_out<T>(a.shape(), a.requires_grad() || b.requires_grad());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
    check_finite(out, name);
    if (taping(out)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record(on, [an, bn, on, bwd] {
            on->ensure_grad();
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (size_t i = 0; i < on->data.size(); ++i) {
                T ga, gb;
                bwd(an->data[i], bn->data[i], on->data[i], on->grad[i], ga, gb);
                if (an->requires_grad) an->grad[i] += ga;
                if (bn->requires_grad) bn->grad[i] += gb;
            }
        });
    }
    return out;
}

template <class T, class Fwd, class Bwd>
Tensor<T> ew_unary(const Tensor<T>& a, const char* name, Fwd fwd, Bwd bwd) {
    auto out = make_out<T>(a.shape(), a.requires_grad());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i]);
    check_finite(out, name);
    if (taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, bwd] {
            on->ensure_grad();
            an->ensure_grad();
            for (size_t i = 0; i < on->data.size(); ++i)
                an->grad[i] += bwd(an->data[i], on->data[i], on->grad[i]);
        });
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "add",
        [](T x, T y) { return x + y; },
        [](T, T, T, T g, T& ga, T& gb) { ga = g; gb = g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "sub",
        [](T x, T y) { return x - y; },
        [](T, T, T, T g, T& ga, T& gb) { ga = g; gb = -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "mul",
        [](T x, T y) { return x * y; },
        [](T x, T y, T, T g, T& ga, T& gb) { ga = g * y; gb = g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "div",
        [](T x, T y) { return x / y; },
        [](T x, T y, T, T g, T& ga, T& gb) { ga = g / y; gb = -g * x / (y * y); });
}

// Subgradient convention: ties go to the first argument.
template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "minimum",
        [](T x, T y) { return x <= y ? x : y; },
        [](T x, T y, T, T g, T& ga, T& gb) {
            if (x <= y) { ga = g; gb = T(0); } else { ga = T(0); gb = g; }
        });
}

template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ew_binary(a, b, "maximum",
        [](T x, T y) { return x >= y ? x : y; },
        [](T x, T y, T, T g, T& ga, T& gb) {
            if (x >= y) { ga = g; gb = T(0); } else { ga = T(0); gb = g; }
        });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return detail::ew_unary(a, "neg",
        [](T x) { return -x; },
        [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::ew_unary(a, "add_scalar",
        [s](T x) { return x + s; },
        [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return detail::ew_unary(a, "mul_scalar",
        [s](T x) { return x * s; },
        [s](T, T, T g) { return g * s; });
}

template <class T>
Tensor<T> abs_val(const Tensor<T>& a) {
    return detail::ew_unary(a, "abs",
        [](T x) { return x < T(0) ? -x : x; },
        [](T x, T, T g) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

// Gradient passes through strictly inside [lo, hi] and is zero outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::ew_unary(a, "clamp",
        [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T, T g) { return (x > lo && x < hi) ? g : T(0); });
}

// ReLU subgradient at 0 is defined as 0.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::ew_unary(a, "relu",
        [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::ew_unary(a, "sigmoid",
        [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
    return detail::ew_unary(a, "exp",
        [](T x) { return std::exp(x); },
        [](T, T y, T g) { return g * y; });
}

template <class T>
Tensor<T> log_op(const Tensor<T>& a) {
    return detail::ew_unary(a, "log",
        [](T x) { return std::log(x); },
        [](T x, T, T g) { return g / x; });
}

// softplus(x) = log(1 + e^x), computed without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
    return detail::ew_unary(a, "softplus",
        [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
        [](T x, T, T g) {
            T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                            : std::exp(x) / (T(1) + std::exp(x));
            return g * s;
        });
}

// x^p for x >= 0. d/dx at x==0 is taken as 0 (valid subgradient for p > 1).
template <class T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
    return detail::ew_unary(a, "pow_scalar",
        [p](T x) { return std::pow(x, p); },
        [p](T x, T, T g) { return x > T(0) ? g * p * std::pow(x, p - T(1)) : T(0); });
}

// out[i...] = a[i...] * w[prefix(i)], where w.shape is a prefix of a.shape.
template <class T>
Tensor<T> mul_prefix(const Tensor<T>& a, const Tensor<T>& w) {
    const Shape& as = a.shape();
    const Shape& ws = w.shape();
    if (ws.size() > as.size() || !std::equal(ws.begin(), ws.end(), as.begin()))
        throw ShapeError("mul_prefix: " + shape_str(ws) + " is not a prefix of " + shape_str(as));
    int64_t trail = 1;
    for (size_t i = ws.size(); i < as.size(); ++i) trail *= as[i];
    auto out = detail::make_out<T>(as, a.requires_grad() || w.requires_grad());
    const auto& ad = a.data();
    const auto& wd = w.data();
    auto& od = out.data();
    for (size_t i = 0; i < wd.size(); ++i)
        for (int64_t j = 0; j < trail; ++j) od[i * trail + j] = ad[i * trail + j] * wd[i];
    detail::check_finite(out, "mul_prefix");
    if (detail::taping(out)) {
        auto an = a.node(), wn = w.node(), on = out.node();
        Tape<T>::current()->record(on, [an, wn, on, trail] {
            on->ensure_grad();
            if (an->requires_grad) an->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (size_t i = 0; i < wn->data.size(); ++i) {
                T acc = T(0);
                for (int64_t j = 0; j < trail; ++j) {
                    size_t k = i * trail + j;
                    if (an->requires_grad) an->grad[k] += on->grad[k] * wn->data[i];
                    acc += on->grad[k] * an->data[k];
                }
                if (wn->requires_grad) wn->grad[i] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    auto out = Tensor<T>::from(std::move(shape), a.data(), a.requires_grad());
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on] {
            on->ensure_grad();
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose2d expects 2-D, got " + shape_str(a.shape()));
    int64_t p = a.dim(0), q = a.dim(1);
    auto out = detail::make_out<T>({q, p}, a.requires_grad());
    for (int64_t i = 0; i < p; ++i)
        for (int64_t j = 0; j < q; ++j) out.data()[j * p + i] = a.data()[i * q + j];
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, p, q] {
            on->ensure_grad();
            an->ensure_grad();
            for (int64_t i = 0; i < p; ++i)
                for (int64_t j = 0; j < q; ++j) an->grad[i * q + j] += on->grad[j * p + i];
        });
    }
    return out;
}

// (B, p, q) -> (B, q, p)
template <class T>
Tensor<T> btranspose(const Tensor<T>& a) {
    if (a.ndim() != 3) throw ShapeError("btranspose expects 3-D, got " + shape_str(a.shape()));
    int64_t B = a.dim(0), p = a.dim(1), q = a.dim(2);
    auto out = detail::make_out<T>({B, q, p}, a.requires_grad());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < p; ++i)
            for (int64_t j = 0; j < q; ++j)
                out.data()[(b * q + j) * p + i] = a.data()[(b * p + i) * q + j];
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, B, p, q] {
            on->ensure_grad();
            an->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < p; ++i)
                    for (int64_t j = 0; j < q; ++j)
                        an->grad[(b * p + i) * q + j] += on->grad[(b * q + j) * p + i];
        });
    }
    return out;
}

// (..., L) -> (...), picking index `idx` of the last axis.
template <class T>
Tensor<T> select_last(const Tensor<T>& a, int64_t idx) {
    if (a.ndim() < 1) throw ShapeError("select_last on scalar");
    int64_t L = a.dim(-1);
    if (idx < 0 || idx >= L)
        throw ShapeError("select_last: index " + std::to_string(idx) + " out of range for axis " +
                         std::to_string(L));
    Shape os(a.shape().begin(), a.shape().end() - 1);
    auto out = detail::make_out<T>(os, a.requires_grad());
    for (int64_t i = 0; i < out.size(); ++i) out.data()[size_t(i)] = a.data()[size_t(i * L + idx)];
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, L, idx] {
            on->ensure_grad();
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i * size_t(L) + size_t(idx)] += on->grad[i];
        });
    }
    return out;
}

// k tensors of identical shape S -> (S..., k)
template <class T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("stack_last of zero tensors");
    const Shape& s = parts[0].shape();
    bool rg = false;
    for (const auto& p : parts) {
        if (!same_shape(p.shape(), s))
            throw ShapeError("stack_last: mismatched part shapes " + shape_str(s) + " vs " +
                             shape_str(p.shape()));
        rg = rg || p.requires_grad();
    }
    int64_t k = int64_t(parts.size());
    Shape os = s;
    os.push_back(k);
    auto out = detail::make_out<T>(os, rg);
    int64_t n = parts[0].size();
    for (int64_t j = 0; j < k; ++j)
        for (int64_t i = 0; i < n; ++i)
            out.data()[size_t(i * k + j)] = parts[size_t(j)].data()[size_t(i)];
    if (detail::taping(out)) {
        std::vector<std::shared_ptr<Node<T>>> pn;
        for (const auto& p : parts) pn.push_back(p.node());
        auto on = out.node();
        Tape<T>::current()->record(on, [pn, on, k, n] {
            on->ensure_grad();
            for (int64_t j = 0; j < k; ++j) {
                auto& nd = pn[size_t(j)];
                if (!nd->requires_grad) continue;
                nd->ensure_grad();
                for (int64_t i = 0; i < n; ++i) nd->grad[size_t(i)] += on->grad[size_t(i * k + j)];
            }
        });
    }
    return out;
}

// Row gather: (n, rest...) -> (#idx, rest...)
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int64_t>& idx) {
    if (a.ndim() < 1) throw ShapeError("gather_rows on scalar");
    int64_t n = a.dim(0);
    int64_t row = a.size() / std::max<int64_t>(n, 1);
    for (int64_t i : idx)
        if (i < 0 || i >= n)
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range " +
                             std::to_string(n));
    Shape os = a.shape();
    os[0] = int64_t(idx.size());
    auto out = detail::make_out<T>(os, a.requires_grad());
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.data().begin() + idx[r] * row, row, out.data().begin() + int64_t(r) * row);
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, idx, row] {
            on->ensure_grad();
            an->ensure_grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t j = 0; j < row; ++j)
                    an->grad[size_t(idx[r] * row + j)] += on->grad[r * size_t(row) + size_t(j)];
        });
    }
    return out;
}

// (...) -> (..., k), repeating each element k times.
template <class T>
Tensor<T> broadcast_last(const Tensor<T>& a, int64_t k) {
    Shape os = a.shape();
    os.push_back(k);
    auto out = detail::make_out<T>(os, a.requires_grad());
    for (int64_t i = 0; i < a.size(); ++i)
        for (int64_t j = 0; j < k; ++j) out.data()[size_t(i * k + j)] = a.data()[size_t(i)];
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, k] {
            on->ensure_grad();
            an->ensure_grad();
            for (size_t i = 0; i < an->data.size(); ++i) {
                T acc = T(0);
                for (int64_t j = 0; j < k; ++j) acc += on->grad[i * size_t(k) + size_t(j)];
                an->grad[i] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    auto out = Tensor<T>::scalar(acc, a.requires_grad());
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on] {
            on->ensure_grad();
            an->ensure_grad();
            for (auto& g : an->grad) g += on->grad[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / T(a.size()));
}

namespace detail {
inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
    len = s[size_t(axis)];
    for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
inline int norm_axis(int axis, int ndim, const char* name) {
    if (axis < 0) axis += ndim;
    if (axis < 0 || axis >= ndim)
        throw ShapeError(std::string(name) + ": axis out of range for " + std::to_string(ndim) +
                         "-D tensor");
    return axis;
}
}  // namespace detail

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
    axis = detail::norm_axis(axis, a.ndim(), "sum_axis");
    int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    Shape os;
    for (int i = 0; i < a.ndim(); ++i)
        if (i != axis) os.push_back(a.shape()[size_t(i)]);
    auto out = detail::make_out<T>(os, a.requires_grad());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T acc = T(0);
            for (int64_t l = 0; l < len; ++l) acc += a.data()[size_t((o * len + l) * inner + i)];
            out.data()[size_t(o * inner + i)] = acc;
        }
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, outer, len, inner] {
            on->ensure_grad();
            an->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t l = 0; l < len; ++l)
                    for (int64_t i = 0; i < inner; ++i)
                        an->grad[size_t((o * len + l) * inner + i)] +=
                            on->grad[size_t(o * inner + i)];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
    int ax = detail::norm_axis(axis, a.ndim(), "mean_axis");
    return mul_scalar(sum_axis(a, ax), T(1) / T(a.shape()[size_t(ax)]));
}

// ---------------------------------------------------------------------------
// matmul / linear / softmax / layer_norm / conv
// ---------------------------------------------------------------------------

namespace detail {
// C[p,r] += A[p,q] * B[q,r]
template <class T>
inline void gemm_acc(const T* A, const T* B, T* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t i = 0; i < p; ++i) {
        const T* a = A + i * q;
        T* c = C + i * r;
        for (int64_t k = 0; k < q; ++k) {
            T av = a[k];
            if (av == T(0)) continue;
            const T* b = B + k * r;
            for (int64_t j = 0; j < r; ++j) c[j] += av * b[j];
        }
    }
}
// C[p,r] += A[p,q] * B^T where Bt is [r,q]
template <class T>
inline void gemm_bt_acc(const T* A, const T* Bt, T* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t i = 0; i < p; ++i) {
        const T* a = A + i * q;
        T* c = C + i * r;
        for (int64_t j = 0; j < r; ++j) {
            const T* b = Bt + j * q;
            T acc = T(0);
            for (int64_t k = 0; k < q; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}
// C[q,r] += A^T * B with A [p,q], B [p,r]
template <class T>
inline void gemm_at_acc(const T* A, const T* B, T* C, int64_t p, int64_t q, int64_t r) {
    for (int64_t i = 0; i < p; ++i) {
        const T* a = A + i * q;
        const T* b = B + i * r;
        for (int64_t k = 0; k < q; ++k) {
            T av = a[k];
            if (av == T(0)) continue;
            T* c = C + k * r;
            for (int64_t j = 0; j < r; ++j) c[j] += av * b[j];
        }
    }
}
}  // namespace detail

// Matrix product with optional leading batch dimension on either side:
// (p,q)x(q,r), (B,p,q)x(B,q,r), (B,p,q)x(q,r), (p,q)x(B,q,r).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    int an = a.ndim(), bn = b.ndim();
    if ((an != 2 && an != 3) || (bn != 2 && bn != 3))
        throw ShapeError("matmul: operands must be 2-D or 3-D, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    int64_t Ba = an == 3 ? a.dim(0) : 1, Bb = bn == 3 ? b.dim(0) : 1;
    int64_t p = a.dim(an - 2), q = a.dim(an - 1);
    int64_t q2 = b.dim(bn - 2), r = b.dim(bn - 1);
    if (q != q2 || (an == 3 && bn == 3 && Ba != Bb))
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int64_t B = std::max(Ba, Bb);
    Shape os = (an == 3 || bn == 3) ? Shape{B, p, r} : Shape{p, r};
    auto out = detail::make_out<T>(os, a.requires_grad() || b.requires_grad());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.data().data();
    for (int64_t i = 0; i < B; ++i)
        detail::gemm_acc(ad + (Ba == 1 ? 0 : i * p * q), bd + (Bb == 1 ? 0 : i * q * r),
                         od + i * p * r, p, q, r);
    detail::check_finite(out, "matmul");
    if (detail::taping(out)) {
        auto anode = a.node(), bnode = b.node(), onode = out.node();
        Tape<T>::current()->record(onode, [anode, bnode, onode, B, Ba, Bb, p, q, r] {
            onode->ensure_grad();
            const T* g = onode->grad.data();
            if (anode->requires_grad) {
                anode->ensure_grad();
                // dA = G * B^T
                for (int64_t i = 0; i < B; ++i)
                    detail::gemm_bt_acc(g + i * p * r,
                                        bnode->data.data() + (Bb == 1 ? 0 : i * q * r),
                                        anode->grad.data() + (Ba == 1 ? 0 : i * p * q), p, r, q);
            }
            if (bnode->requires_grad) {
                bnode->ensure_grad();
                // dB = A^T * G
                for (int64_t i = 0; i < B; ++i)
                    detail::gemm_at_acc(anode->data.data() + (Ba == 1 ? 0 : i * p * q),
                                        g + i * p * r,
                                        bnode->grad.data() + (Bb == 1 ? 0 : i * q * r), p, q, r);
            }
        });
    }
    return out;
}

// x (..., in) * W (in, out) + b (out)
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
    if (x.ndim() < 1 || W.ndim() != 2 || b.ndim() != 1)
        throw ShapeError("linear: bad operand ranks " + shape_str(x.shape()) + ", " +
                         shape_str(W.shape()) + ", " + shape_str(b.shape()));
    int64_t in = W.dim(0), outw = W.dim(1);
    if (x.dim(-1) != in || b.dim(0) != outw)
        throw ShapeError("linear: shape mismatch x" + shape_str(x.shape()) + " W" +
                         shape_str(W.shape()) + " b" + shape_str(b.shape()));
    int64_t rows = x.size() / in;
    Shape os = x.shape();
    os.back() = outw;
    auto out = detail::make_out<T>(os, x.requires_grad() || W.requires_grad() || b.requires_grad());
    T* od = out.data().data();
    for (int64_t rw = 0; rw < rows; ++rw)
        std::copy_n(b.data().begin(), outw, od + rw * outw);
    detail::gemm_acc(x.data().data(), W.data().data(), od, rows, in, outw);
    detail::check_finite(out, "linear");
    if (detail::taping(out)) {
        auto xn = x.node(), wn = W.node(), bn2 = b.node(), on = out.node();
        Tape<T>::current()->record(on, [xn, wn, bn2, on, rows, in, outw] {
            on->ensure_grad();
            const T* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                detail::gemm_bt_acc(g, wn->data.data(), xn->grad.data(), rows, outw, in);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                detail::gemm_at_acc(xn->data.data(), g, wn->grad.data(), rows, in, outw);
            }
            if (bn2->requires_grad) {
                bn2->ensure_grad();
                for (int64_t rw = 0; rw < rows; ++rw)
                    for (int64_t j = 0; j < outw; ++j) bn2->grad[size_t(j)] += g[rw * outw + j];
            }
        });
    }
    return out;
}

// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    axis = detail::norm_axis(axis, a.ndim(), "softmax");
    int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    auto out = detail::make_out<T>(a.shape(), a.requires_grad());
    const auto& ad = a.data();
    auto& od = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T mx = ad[size_t(o * len * inner + i)];
            for (int64_t l = 1; l < len; ++l)
                mx = std::max(mx, ad[size_t((o * len + l) * inner + i)]);
            T z = T(0);
            for (int64_t l = 0; l < len; ++l) {
                T e = std::exp(ad[size_t((o * len + l) * inner + i)] - mx);
                od[size_t((o * len + l) * inner + i)] = e;
                z += e;
            }
            for (int64_t l = 0; l < len; ++l) od[size_t((o * len + l) * inner + i)] /= z;
        }
    detail::check_finite(out, "softmax");
    if (detail::taping(out)) {
        auto an = a.node(), on = out.node();
        Tape<T>::current()->record(on, [an, on, outer, len, inner] {
            on->ensure_grad();
            an->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    T dot = T(0);
                    for (int64_t l = 0; l < len; ++l) {
                        size_t k = size_t((o * len + l) * inner + i);
                        dot += on->grad[k] * on->data[k];
                    }
                    for (int64_t l = 0; l < len; ++l) {
                        size_t k = size_t((o * len + l) * inner + i);
                        an->grad[k] += on->data[k] * (on->grad[k] - dot);
                    }
                }
        });
    }
    return out;
}

// Normalizes over one axis with population variance floored by eps, then
// applies gain/bias of the axis length. Zero-variance slices map to zeros
// before the affine part.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, int axis,
                     T eps = T(1e-5)) {
    axis = detail::norm_axis(axis, x.ndim(), "layer_norm");
    int64_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    if (len == 0) throw ShapeError("layer_norm: zero-length axis");
    if (gain.size() != len || bias.size() != len)
        throw ShapeError("layer_norm: gain/bias length must equal axis length " +
                         std::to_string(len));
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be > 0");
    auto out =
        detail::make_out<T>(x.shape(), x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    // cache per-slice mean and inverse sigma for backward
    auto stats = std::make_shared<std::vector<T>>(size_t(outer * inner * 2));
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T mean = T(0);
            for (int64_t l = 0; l < len; ++l) mean += xd[size_t((o * len + l) * inner + i)];
            mean /= T(len);
            T var = T(0);
            for (int64_t l = 0; l < len; ++l) {
                T d = xd[size_t((o * len + l) * inner + i)] - mean;
                var += d * d;
            }
            var /= T(len);
            T inv = T(1) / std::sqrt(var + eps);
            (*stats)[size_t((o * inner + i) * 2)] = mean;
            (*stats)[size_t((o * inner + i) * 2 + 1)] = inv;
            for (int64_t l = 0; l < len; ++l) {
                size_t k = size_t((o * len + l) * inner + i);
                od[k] = (xd[k] - mean) * inv * gain.data()[size_t(l)] + bias.data()[size_t(l)];
            }
        }
    detail::check_finite(out, "layer_norm");
    if (detail::taping(out)) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape<T>::current()->record(on, [xn, gn, bn, on, stats, outer, len, inner] {
            on->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    T mean = (*stats)[size_t((o * inner + i) * 2)];
                    T inv = (*stats)[size_t((o * inner + i) * 2 + 1)];
                    T sum_gg = T(0), sum_ggx = T(0);
                    for (int64_t l = 0; l < len; ++l) {
                        size_t k = size_t((o * len + l) * inner + i);
                        T xhat = (xn->data[k] - mean) * inv;
                        T gg = on->grad[k] * gn->data[size_t(l)];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        if (gn->requires_grad) gn->grad[size_t(l)] += on->grad[k] * xhat;
                        if (bn->requires_grad) bn->grad[size_t(l)] += on->grad[k];
                    }
                    if (xn->requires_grad)
                        for (int64_t l = 0; l < len; ++l) {
                            size_t k = size_t((o * len + l) * inner + i);
                            T xhat = (xn->data[k] - mean) * inv;
                            T gg = on->grad[k] * gn->data[size_t(l)];
                            xn->grad[k] +=
                                inv * (gg - sum_gg / T(len) - xhat * sum_ggx / T(len));
                        }
                }
        });
    }
    return out;
}

// Direct 2-D convolution on a single image: x (Cin,H,W), k (Cout,Cin,kh,kw).
// H' = floor((H + 2 pad - kh)/stride) + 1 and likewise for W'.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
    if (x.ndim() != 3 || k.ndim() != 4)
        throw ShapeError("conv2d: expected x (Cin,H,W) and k (Cout,Cin,kh,kw), got " +
                         shape_str(x.shape()) + " and " + shape_str(k.shape()));
    int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    int64_t Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != Cin)
        throw ShapeError("conv2d: channel mismatch x" + shape_str(x.shape()) + " k" +
                         shape_str(k.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("conv2d: kernel dims must be odd");
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    if (bias.size() != Cout) throw ShapeError("conv2d: bias length must equal Cout");
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    auto out = detail::make_out<T>({Cout, Ho, Wo},
                                   x.requires_grad() || k.requires_grad() || bias.requires_grad());
    const T* xd = x.data().data();
    const T* kd = k.data().data();
    T* od = out.data().data();
    for (int64_t co = 0; co < Cout; ++co)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T acc = bias.data()[size_t(co)];
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += xd[(ci * H + iy) * W + ix] *
                                   kd[((co * Cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                od[(co * Ho + oy) * Wo + ox] = acc;
            }
    detail::check_finite(out, "conv2d");
    if (detail::taping(out)) {
        auto xn = x.node(), kn = k.node(), bn = bias.node(), on = out.node();
        Tape<T>::current()->record(on, [xn, kn, bn, on, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad] {
            on->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            const T* g = on->grad.data();
            for (int64_t co = 0; co < Cout; ++co)
                for (int64_t oy = 0; oy < Ho; ++oy)
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        T go = g[(co * Ho + oy) * Wo + ox];
                        if (go == T(0)) continue;
                        if (bn->requires_grad) bn->grad[size_t(co)] += go;
                        for (int64_t ci = 0; ci < Cin; ++ci)
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                int64_t iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    int64_t ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    size_t xi = size_t((ci * H + iy) * W + ix);
                                    size_t kidx = size_t(((co * Cin + ci) * kh + ky) * kw + kx);
                                    if (xn->requires_grad) xn->grad[xi] += go * kn->data[kidx];
                                    if (kn->requires_grad) kn->grad[kidx] += go * xn->data[xi];
                                }
                            }
                    }
        });
    }
    return out;
}

// Nearest-neighbor 2x upsampling of (C,H,W).
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x) {
    if (x.ndim() != 3) throw ShapeError("upsample2x expects (C,H,W), got " + shape_str(x.shape()));
    int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto out = detail::make_out<T>({C, 2 * H, 2 * W}, x.requires_grad());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                T v = x.data()[size_t((c * H + y) * W + xx)];
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        out.data()[size_t((c * 2 * H + 2 * y + dy) * 2 * W + 2 * xx + dx)] = v;
            }
    if (detail::taping(out)) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record(on, [xn, on, C, H, W] {
            on->ensure_grad();
            xn->ensure_grad();
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xx = 0; xx < W; ++xx) {
                        T acc = T(0);
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx)
                                acc += on->grad[size_t((c * 2 * H + 2 * y + dy) * 2 * W + 2 * xx +
                                                       dx)];
                        xn->grad[size_t((c * H + y) * W + xx)] += acc;
                    }
        });
    }
    return out;
}

}  // namespace golo
