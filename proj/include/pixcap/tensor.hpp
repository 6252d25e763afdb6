#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Tensors are cheap handles onto shared nodes. Every op builds a node that
// remembers its parents and a backward rule; backward(loss) topologically
// orders the reachable graph and runs the rules in reverse. Inner dense
// GEMM is delegated to CBLAS; all other kernels and every backward rule
// live here.
//
// Only float and double are instantiated. Default compute is float;
// gradient-check oracles run the double path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <cblas.h>

#include "pixcap/error.hpp"

namespace pixcap {

using Shape = std::vector<int>;

inline int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace autograd {

// Thread-local switches. Ops record the graph only while grad is enabled.
namespace detail {
inline thread_local int no_grad_depth = 0;
inline thread_local bool finite_checks = false;
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Debug-mode NaN/Inf scan after each forward op. Defaults on in debug
// builds, runtime-togglable either way.
inline void set_finite_checks(bool on) { detail::finite_checks = on; }
inline bool finite_checks_enabled() {
#ifndef NDEBUG
    return true;
#else
    return detail::finite_checks;
#endif
}

}  // namespace autograd

namespace detail {

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

template <typename T>
class Tensor {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "Tensor supports float and double");

public:
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // allocated on first use, same length as data
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_rule;

        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        }
    };

    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_size(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(shape_size(shape)), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    template <typename Rng>
    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<T> d(static_cast<size_t>(shape_size(shape)));
        for (auto& v : d) v = static_cast<T>(dist(rng)) * stddev;
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(n_->data.size()); }
    bool is_scalar() const { return size() == 1; }

    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& mutable_data() { return n_->data; }
    T item() const {
        if (!is_scalar()) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return n_->data[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }
    std::vector<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }

    std::shared_ptr<Node> node() const { return n_; }
    bool same_storage(const Tensor& o) const { return n_ == o.n_; }

    // Detached leaf with copied values.
    Tensor detach() const { return from_data(n_->shape, n_->data, false); }

private:
    std::shared_ptr<Node> n_;

    template <typename U>
    friend Tensor<U> make_op(Shape shape, std::vector<Tensor<U>> parents,
                             std::function<void(typename Tensor<U>::Node&)> backward_rule);
};

template <typename T>
void check_finite_debug(const Tensor<T>& t, const char* op) {
    if (!autograd::finite_checks_enabled()) return;
    for (T v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value after op ") + op);
}

// Builds the output node of an op. The backward rule receives the output
// node and accumulates into parent grads; it is only attached while grad
// recording is on and some parent requires grad.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<Tensor<T>> parents,
                  std::function<void(typename Tensor<T>::Node&)> backward_rule) {
    Tensor<T> out;
    out.n_ = std::make_shared<typename Tensor<T>::Node>();
    out.n_->shape = std::move(shape);
    out.n_->data.resize(static_cast<size_t>(shape_size(out.n_->shape)));
    bool track = false;
    if (autograd::grad_enabled()) {
        for (const auto& p : parents)
            if (p.requires_grad()) track = true;
    }
    if (track) {
        out.n_->requires_grad = true;
        for (const auto& p : parents) out.n_->parents.push_back(p.node());
        out.n_->backward_rule = std::move(backward_rule);
    }
    return out;
}

// ---------------------------------------------------------------------------
// ComputationRecord: topological order over the graph reachable from a root.
// ---------------------------------------------------------------------------

template <typename T>
class ComputationRecord {
public:
    using Node = typename Tensor<T>::Node;

    static ComputationRecord from(const Tensor<T>& root) {
        ComputationRecord rec;
        rec.root_ = root.node();
        if (!rec.root_) throw ContractError("backward on an undefined tensor");
        // Iterative post-order DFS; every node appears once, parents first.
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({rec.root_.get(), 0});
        visited.insert(rec.root_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (!visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                rec.order_.push_back(node);
                stack.pop_back();
            }
        }
        return rec;
    }

    size_t size() const { return order_.size(); }

    // Seeds d(root)/d(root) = 1 and sweeps the rules in reverse order.
    void backward() {
        if (shape_size(root_->shape) != 1)
            throw ContractError("backward requires a scalar loss, got " + shape_str(root_->shape));
        root_->ensure_grad();
        root_->grad[0] += T(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node* n = *it;
            if (n->backward_rule) n->backward_rule(*n);
        }
    }

private:
    std::shared_ptr<Node> root_;
    std::vector<Node*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    ComputationRecord<T>::from(loss).backward();
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

// b broadcasts onto a iff b.shape is a suffix of a.shape.
inline bool is_suffix(const Shape& suffix, const Shape& full) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace detail

// Elementwise sum. b may broadcast over leading axes of a (bias add,
// positional add, per-frame embedding add).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape() == b.shape();
    if (!same && !detail::is_suffix(b.shape(), a.shape()))
        throw ShapeError("add: shape " + shape_str(b.shape()) + " does not match or suffix-broadcast onto " +
                         shape_str(a.shape()));
    auto* an = a.node().get();
    auto* bn = b.node().get();
    const size_t bs = static_cast<size_t>(b.size());
    Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn, bs](typename Tensor<T>::Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t base = 0; base < o.grad.size(); base += bs)
                for (size_t i = 0; i < bs; ++i) bn->grad[i] += o.grad[base + i];
        }
    });
    auto& od = out.mutable_data();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t base = 0; base < od.size(); base += bs)
        for (size_t i = 0; i < bs; ++i) od[base + i] = ad[base + i] + bd[i];
    check_finite_debug(out, "add");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto* an = a.node().get();
    auto* bn = b.node().get();
    Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn](typename Tensor<T>::Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
    });
    auto& od = out.mutable_data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] - b.data()[i];
    check_finite_debug(out, "sub");
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto* an = a.node().get();
    auto* bn = b.node().get();
    Tensor<T> out = make_op<T>(a.shape(), {a, b}, [an, bn](typename Tensor<T>::Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
        }
    });
    auto& od = out.mutable_data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] * b.data()[i];
    check_finite_debug(out, "mul");
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(a.shape(), {a}, [an, s](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
    });
    auto& od = out.mutable_data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] * s;
    check_finite_debug(out, "scale");
    return out;
}

// Matrix product. 2D [m,k]x[k,n] -> [m,n], or batched 3D [B,m,k]x[B,k,n].
// Backward: dA += dC.B^T, dB += A^T.dC (per batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    const bool batched = as.size() == 3;
    if (!((as.size() == 2 && bs.size() == 2) || (as.size() == 3 && bs.size() == 3)))
        throw ShapeError("matmul: expected both 2D or both 3D, got " + shape_str(as) + " and " + shape_str(bs));
    if (batched && as[0] != bs[0])
        throw ShapeError("matmul: batch dims disagree, " + shape_str(as) + " vs " + shape_str(bs));
    const int B = batched ? as[0] : 1;
    const int m = batched ? as[1] : as[0];
    const int k = batched ? as[2] : as[1];
    const int kb = batched ? bs[1] : bs[0];
    const int n = batched ? bs[2] : bs[1];
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(as) + " vs " + shape_str(bs));

    Shape os = batched ? Shape{B, m, n} : Shape{m, n};
    auto* an = a.node().get();
    auto* bn = b.node().get();
    Tensor<T> out = make_op<T>(os, {a, b}, [an, bn, B, m, k, n](typename Tensor<T>::Node& o) {
        const int64_t ao = int64_t(m) * k, bo = int64_t(k) * n, co = int64_t(m) * n;
        if (an->requires_grad) {
            an->ensure_grad();
            for (int bi = 0; bi < B; ++bi)
                detail::gemm(false, true, m, k, n, T(1), o.grad.data() + bi * co, n,
                             bn->data.data() + bi * bo, n, T(1), an->grad.data() + bi * ao, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int bi = 0; bi < B; ++bi)
                detail::gemm(true, false, k, n, m, T(1), an->data.data() + bi * ao, k,
                             o.grad.data() + bi * co, n, T(1), bn->grad.data() + bi * bo, n);
        }
    });
    const int64_t ao = int64_t(m) * k, bo = int64_t(k) * n, co = int64_t(m) * n;
    for (int bi = 0; bi < B; ++bi)
        detail::gemm(false, false, m, n, k, T(1), a.data().data() + bi * ao, k,
                     b.data().data() + bi * bo, n, T(0), out.mutable_data().data() + bi * co, n);
    check_finite_debug(out, "matmul");
    return out;
}

// Axis permutation, materialized.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<int>& perm) {
    const auto& as = a.shape();
    if (perm.size() != as.size())
        throw ShapeError("transpose: perm rank " + std::to_string(perm.size()) + " vs tensor rank " +
                         std::to_string(as.size()));
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<size_t>(p)])
            throw ShapeError("transpose: invalid permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    const int nd = static_cast<int>(as.size());
    Shape os(as.size());
    for (int i = 0; i < nd; ++i) os[i] = as[perm[i]];

    // strides of the source, gathered in output order
    std::vector<int64_t> src_stride(as.size()), gather_stride(as.size());
    int64_t s = 1;
    for (int i = nd - 1; i >= 0; --i) {
        src_stride[i] = s;
        s *= as[i];
    }
    for (int i = 0; i < nd; ++i) gather_stride[i] = src_stride[perm[i]];

    // Trailing axes that the permutation leaves in place move as one
    // contiguous chunk; the remaining outer axes walk with an incremental
    // source offset.
    int chunk_axes = 0;
    int64_t chunk = 1;
    while (chunk_axes < nd && perm[nd - 1 - chunk_axes] == nd - 1 - chunk_axes) {
        chunk *= as[nd - 1 - chunk_axes];
        ++chunk_axes;
    }
    const int outer_nd = nd - chunk_axes;
    Shape outer_shape(os.begin(), os.begin() + outer_nd);
    std::vector<int64_t> outer_stride(gather_stride.begin(), gather_stride.begin() + outer_nd);
    const size_t total = static_cast<size_t>(shape_size(os));
    auto copy_permuted = [outer_nd, outer_shape, outer_stride, chunk, total](const std::vector<T>& src,
                                                                             std::vector<T>& dst,
                                                                             bool accumulate) {
        std::vector<int64_t> idx(static_cast<size_t>(outer_nd), 0);
        for (size_t off = 0; off < total; off += static_cast<size_t>(chunk)) {
            int64_t so = 0;
            for (int i = 0; i < outer_nd; ++i) so += idx[static_cast<size_t>(i)] * outer_stride[static_cast<size_t>(i)];
            if (accumulate)
                for (int64_t c = 0; c < chunk; ++c) dst[static_cast<size_t>(so + c)] += src[off + static_cast<size_t>(c)];
            else
                for (int64_t c = 0; c < chunk; ++c) dst[off + static_cast<size_t>(c)] = src[static_cast<size_t>(so + c)];
            for (int i = outer_nd - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < outer_shape[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
    };

    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(os, {a}, [an, copy_permuted](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        copy_permuted(o.grad, an->grad, true);
    });
    copy_permuted(a.data(), out.mutable_data(), false);
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose(a): expects 2D, got " + shape_str(a.shape()));
    return transpose(a, {1, 0});
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_size(new_shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(std::move(new_shape), {a}, [an](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
    out.mutable_data() = a.data();
    return out;
}

// Concatenation along axis 0; all inputs share trailing dims.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int rows = 0;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) throw ShapeError("concat0: trailing dims disagree");
        rows += p.dim(0);
    }
    Shape os = parts[0].shape();
    os[0] = rows;
    std::vector<typename Tensor<T>::Node*> nodes;
    std::vector<int64_t> sizes;
    for (const auto& p : parts) {
        nodes.push_back(p.node().get());
        sizes.push_back(p.size());
    }
    Tensor<T> out = make_op<T>(os, parts, [nodes, sizes](typename Tensor<T>::Node& o) {
        int64_t off = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
            if (nodes[pi]->requires_grad) {
                nodes[pi]->ensure_grad();
                for (int64_t i = 0; i < sizes[pi]; ++i) nodes[pi]->grad[i] += o.grad[off + i];
            }
            off += sizes[pi];
        }
    });
    auto& od = out.mutable_data();
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), od.begin() + off);
        off += p.size();
    }
    return out;
}

// Row slice [begin, end) along axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int begin, int end) {
    if (begin < 0 || end > a.dim(0) || begin >= end)
        throw ShapeError("slice0: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
    Shape os = a.shape();
    os[0] = end - begin;
    const int64_t row = a.size() / a.dim(0);
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(os, {a}, [an, begin, row](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        const int64_t off = begin * row;
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[off + i] += o.grad[i];
    });
    std::copy(a.data().begin() + begin * row, a.data().begin() + end * row, out.mutable_data().begin());
    return out;
}

// gelu, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
// The forward tanh values are kept for the backward pass.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    static constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
    static constexpr T kCubic = T(0.044715);
    auto* an = a.node().get();
    auto saved_t = std::make_shared<std::vector<T>>();
    const bool need_save = autograd::grad_enabled() && a.requires_grad();
    Tensor<T> out = make_op<T>(a.shape(), {a}, [an, saved_t](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const T x = an->data[i];
            const T t = (*saved_t)[i];
            const T du = kAlpha * (T(1) + T(3) * kCubic * x * x);
            const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
            an->grad[i] += o.grad[i] * d;
        }
    });
    auto& od = out.mutable_data();
    if (need_save) saved_t->resize(od.size());
    for (size_t i = 0; i < od.size(); ++i) {
        const T x = a.data()[i];
        const T t = std::tanh(kAlpha * (x + kCubic * x * x * x));
        if (need_save) (*saved_t)[i] = t;
        od[i] = T(0.5) * x * (T(1) + t);
    }
    check_finite_debug(out, "gelu");
    return out;
}

namespace detail {

template <typename T>
void softmax_rows(const std::vector<T>& in, std::vector<T>& out, int64_t rows, int64_t cols, bool log_form) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = in.data() + r * cols;
        T* y = out.data() + r * cols;
        T mx = x[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T sum = 0;
        for (int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        if (log_form) {
            const T lse = std::log(sum) + mx;
            for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
        } else {
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
        }
    }
}

}  // namespace detail

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    const int64_t cols = a.dim(a.ndim() - 1);
    const int64_t rows = a.size() / cols;
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(a.shape(), {a}, [an, rows, cols](typename Tensor<T>::Node& o) {
        // dx = (dy - sum(dy*y)) * y per row
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = o.data.data() + r * cols;
            const T* dy = o.grad.data() + r * cols;
            T dot = 0;
            for (int64_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
            T* dx = an->grad.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) dx[c] += (dy[c] - dot) * y[c];
        }
    });
    detail::softmax_rows(a.data(), out.mutable_data(), rows, cols, false);
    check_finite_debug(out, "softmax");
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const int64_t cols = a.dim(a.ndim() - 1);
    const int64_t rows = a.size() / cols;
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>(a.shape(), {a}, [an, rows, cols](typename Tensor<T>::Node& o) {
        // dx = dy - softmax(x) * sum(dy) per row; softmax = exp(y)
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = o.data.data() + r * cols;
            const T* dy = o.grad.data() + r * cols;
            T sum = 0;
            for (int64_t c = 0; c < cols; ++c) sum += dy[c];
            T* dx = an->grad.data() + r * cols;
            for (int64_t c = 0; c < cols; ++c) dx[c] += dy[c] - std::exp(y[c]) * sum;
        }
    });
    detail::softmax_rows(a.data(), out.mutable_data(), rows, cols, true);
    check_finite_debug(out, "log_softmax");
    return out;
}

// Softmax over the last axis restricted to positions the mask allows.
// Disallowed outputs are exactly zero, so no probability mass and no
// gradient ever crosses a masked edge. scores is [S,S] or [H,S,S]; mask
// is row-major S*S bytes.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, const std::vector<uint8_t>& mask) {
    const int nd = a.ndim();
    if (nd != 2 && nd != 3) throw ShapeError("masked_softmax: expects 2D or 3D scores");
    const int64_t s_q = a.dim(nd - 2);
    const int64_t s_k = a.dim(nd - 1);
    if (static_cast<int64_t>(mask.size()) != s_q * s_k)
        throw ShapeError("masked_softmax: mask size " + std::to_string(mask.size()) + " vs scores " +
                         shape_str(a.shape()));
    const int64_t rows = a.size() / s_k;
    auto* an = a.node().get();
    auto forward = [rows, s_q, s_k, mask](const std::vector<T>& in, std::vector<T>& out) {
        for (int64_t r = 0; r < rows; ++r) {
            const uint8_t* mrow = mask.data() + (r % s_q) * s_k;
            const T* x = in.data() + r * s_k;
            T* y = out.data() + r * s_k;
            bool any_allowed = false;
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t c = 0; c < s_k; ++c)
                if (mrow[c]) {
                    any_allowed = true;
                    mx = std::max(mx, x[c]);
                }
            if (!any_allowed) throw ContractError("masked_softmax: mask row with no allowed entries");
            if (!std::isfinite(mx)) throw NumericError("masked_softmax: non-finite attention scores");
            T sum = 0;
            for (int64_t c = 0; c < s_k; ++c) {
                y[c] = mrow[c] ? std::exp(x[c] - mx) : T(0);
                sum += y[c];
            }
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < s_k; ++c) y[c] *= inv;
        }
    };
    Tensor<T> out = make_op<T>(a.shape(), {a}, [an, rows, s_q, s_k, mask](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const uint8_t* mrow = mask.data() + (r % s_q) * s_k;
            const T* y = o.data.data() + r * s_k;
            const T* dy = o.grad.data() + r * s_k;
            T dot = 0;
            for (int64_t c = 0; c < s_k; ++c) dot += dy[c] * y[c];
            T* dx = an->grad.data() + r * s_k;
            for (int64_t c = 0; c < s_k; ++c)
                if (mrow[c]) dx[c] += (dy[c] - dot) * y[c];
        }
    });
    forward(a.data(), out.mutable_data());
    check_finite_debug(out, "masked_softmax");
    return out;
}

// LayerNorm over the last axis, then affine by gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (eps <= T(0)) throw ParamError("layer_norm: eps must be > 0");
    const int64_t cols = x.dim(x.ndim() - 1);
    const int64_t rows = x.size() / cols;
    if (gamma.size() != cols || beta.size() != cols)
        throw ShapeError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " vs feature dim " + std::to_string(cols));
    auto* xn = x.node().get();
    auto* gn = gamma.node().get();
    auto* bn = beta.node().get();
    // Saved per-row statistics for backward.
    auto mean = std::make_shared<std::vector<T>>(rows);
    auto rstd = std::make_shared<std::vector<T>>(rows);
    Tensor<T> out = make_op<T>(x.shape(), {x, gamma, beta},
                               [xn, gn, bn, rows, cols, mean, rstd](typename Tensor<T>::Node& o) {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xn->data.data() + r * cols;
            const T* dy = o.grad.data() + r * cols;
            const T mu = (*mean)[r], rs = (*rstd)[r];
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                for (int64_t c = 0; c < cols; ++c) {
                    const T xhat = (xr[c] - mu) * rs;
                    gn->grad[c] += dy[c] * xhat;
                    bn->grad[c] += dy[c];
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dxhat = dy * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    const T xhat = (xr[c] - mu) * rs;
                    const T dxhat = dy[c] * gn->data[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                const T inv_n = T(1) / T(cols);
                T* dx = xn->grad.data() + r * cols;
                for (int64_t c = 0; c < cols; ++c) {
                    const T xhat = (xr[c] - mu) * rs;
                    const T dxhat = dy[c] * gn->data[c];
                    dx[c] += rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                }
            }
        }
    });
    auto& od = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * cols;
        T mu = 0;
        for (int64_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= T(cols);
        T var = 0;
        for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= T(cols);
        const T rs = T(1) / std::sqrt(var + eps);
        (*mean)[r] = mu;
        (*rstd)[r] = rs;
        T* y = od.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) y[c] = (xr[c] - mu) * rs * gamma.data()[c] + beta.data()[c];
    }
    check_finite_debug(out, "layer_norm");
    return out;
}

// Row gather from an embedding table [V,D]; backward scatter-adds.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be 2D, got " + shape_str(table.shape()));
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw InputError("embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
    auto* tn = table.node().get();
    Tensor<T> out = make_op<T>({static_cast<int>(ids.size()), d}, {table},
                               [tn, ids, d](typename Tensor<T>::Node& o) {
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const int64_t src = static_cast<int64_t>(i) * d;
            const int64_t dst = static_cast<int64_t>(ids[i]) * d;
            for (int c = 0; c < d; ++c) tn->grad[dst + c] += o.grad[src + c];
        }
    });
    auto& od = out.mutable_data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.data().begin() + static_cast<int64_t>(ids[i]) * d,
                  table.data().begin() + static_cast<int64_t>(ids[i] + 1) * d, od.begin() + static_cast<int64_t>(i) * d);
    return out;
}

// Full reduction to a scalar of shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    auto* an = a.node().get();
    Tensor<T> out = make_op<T>({1}, {a}, [an](typename Tensor<T>::Node& o) {
        an->ensure_grad();
        for (auto& g : an->grad) g += o.grad[0];
    });
    T s = 0;
    for (T v : a.data()) s += v;
    out.mutable_data()[0] = s;
    check_finite_debug(out, "sum");
    return out;
}

}  // namespace pixcap
