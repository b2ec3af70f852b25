#pragma once

// Dense row-major tensor with reverse-mode gradients.
//
// Scope is deliberately narrow: exactly the primitives the model needs, with
// broadcasting restricted to two patterns (trailing-dim affine in mlp_apply,
// channel vector over a grid in channel_mul). Every op is single-threaded and
// deterministic; gradient accumulation runs in a fixed topological order
// (descending node creation id), so identical inputs give bitwise identical
// outputs and gradients within one precision.
//
// matmul and mlp_apply accumulate over the inner index in ascending order
// with the bias added last; tests hold them bitwise equal to naive loops
// written the same way.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/rng.hpp"

namespace schnet {

using Shape = std::vector<std::size_t>;

enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Scoped "inference mode": ops built inside record no graph.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward;
};

template <typename T>
class Tensor {
  public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_vector(std::move(shape), {});
    }

    static Tensor full(Shape shape, T value) {
        std::size_t n = shape_numel(shape);
        return from_vector(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor from_vector(Shape shape, std::vector<T> data) {
        std::size_t n = shape_numel(shape);
        if (data.empty()) data.assign(n, T(0));
        if (data.size() != n)
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->id = detail::next_node_id();
        return Tensor(std::move(node));
    }

    // Seeded Gaussian init. Draws in double then casts, so f32 and f64 models
    // built from the same seed hold the same values up to the cast.
    static Tensor gaussian(Shape shape, Rng& rng, double scale) {
        std::size_t n = shape_numel(shape);
        std::vector<T> data(n);
        for (std::size_t i = 0; i < n; ++i)
            data[i] = static_cast<T>(rng.gaussian() * scale);
        return from_vector(std::move(shape), std::move(data));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->data.size(); }

    T* data() { return node_->data.data(); }
    const T* data() const { return node_->data.data(); }
    std::vector<T>& vec() { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    T item() const {
        if (numel() != 1)
            throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad_mut() { return node_->grad; }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Leaf copy of the values; no graph link.
    Tensor clone() const {
        return from_vector(node_->shape, node_->data);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> data(node_->data.size());
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] = static_cast<U>(node_->data[i]);
        return Tensor<U>::from_vector(node_->shape, std::move(data));
    }

    std::uint64_t node_id() const { return node_->id; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    // Reverse pass from a scalar. Processes reachable grad-requiring nodes in
    // descending creation id, a topological order fixed by construction.
    void backward() const {
        if (numel() != 1)
            throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
        if (!node_->requires_grad)
            throw std::logic_error("backward() on a tensor that requires no grad");
        std::vector<TensorNode<T>*> order;
        std::unordered_set<TensorNode<T>*> seen;
        std::vector<TensorNode<T>*> stack{node_.get()};
        seen.insert(node_.get());
        while (!stack.empty()) {
            TensorNode<T>* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (auto& p : n->parents) {
                if (p->requires_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->id > b->id; });
        node_->grad.assign(1, T(1));
        for (TensorNode<T>* n : order) {
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
    }

    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
std::vector<T>& ensure_grad(TensorNode<T>& node) {
    if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
    return node.grad;
}

template <typename T, typename F>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                  F&& backward_fn) {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->id = next_node_id();
    bool track = grad_mode_flag();
    if (track) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        track = any;
    }
    if (track) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::forward<F>(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

// dst[p x r] = a[p x q] . b[q x r] in ikj order: every dst element
// accumulates over k ascending, exactly the sequence of the naive i-j-k
// triple loop, but the inner j loop is a vectorizable independent update.
template <typename T>
void matmul_kernel(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ dst,
                   std::size_t p, std::size_t q, std::size_t r) {
    std::fill(dst, dst + p * r, T(0));
    for (std::size_t i = 0; i < p; ++i) {
        T* di = dst + i * r;
        const T* ai = a + i * q;
        for (std::size_t k = 0; k < q; ++k) {
            const T aik = ai[k];
            const T* bk = b + k * r;
            for (std::size_t j = 0; j < r; ++j) di[j] += aik * bk[j];
        }
    }
}

template <typename T>
std::vector<T> transpose_copy(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
    return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ----- elementwise -----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        if (a.requires_grad()) {
            auto& ga = detail::ensure_grad(*a.node());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::ensure_grad(*b.node());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        if (a.requires_grad()) {
            auto& ga = detail::ensure_grad(*a.node());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::ensure_grad(*b.node());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        if (a.requires_grad()) {
            auto& ga = detail::ensure_grad(*a.node());
            const T* pb2 = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::ensure_grad(*b.node());
            const T* pa2 = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
        }
    });
}

// Elementwise quotient; callers keep the denominator bounded away from zero
// (softmax sums, IoU unions).
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        const T* pa2 = a.data();
        const T* pb2 = b.data();
        if (a.requires_grad()) {
            auto& ga = detail::ensure_grad(*a.node());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pb2[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::ensure_grad(*b.node());
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i] * pa2[i] / (pb2[i] * pb2[i]);
        }
    });
}

// y = scale*x + shift
template <typename T>
Tensor<T> scale_add(const Tensor<T>& x, T scale, T shift = T(0)) {
    std::vector<T> out(x.numel());
    const T* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * px[i] + shift;
    return detail::make_op(x.shape(), std::move(out), {x}, [x, scale](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::ensure_grad(*x.node());
        const std::vector<T>& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    });
}

// Exact Gaussian-CDF GELU: y = x * Phi(x). Finite for all finite x.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const T* px = x.data();
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = px[i];
        out[i] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [x, inv_sqrt2](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::ensure_grad(*x.node());
        const std::vector<T>& g = self.grad;
        const T* px2 = x.data();
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
        for (std::size_t i = 0; i < g.size(); ++i) {
            T v = px2[i];
            T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

namespace detail {

template <typename T>
void axis_strides(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                  std::size_t& inner) {
    if (axis >= shape.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    len = shape[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// Max-subtracted softmax along `axis`. Outputs are in (0,1) and each slice
// sums to 1 up to rounding; shift invariance follows from the max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_strides<T>(x.shape(), axis, outer, len, inner);
    std::vector<T> out(x.numel());
    const T* px = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = px[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
            T sum = T(0);
            for (std::size_t k = 0; k < len; ++k) {
                T e = std::exp(px[base + k * inner] - mx);
                out[base + k * inner] = e;
                sum += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= sum;
        }
    }
    return detail::make_op(
        x.shape(), std::move(out), {x}, [x, outer, len, inner](TensorNode<T>& self) {
            if (!x.requires_grad()) return;
            auto& gx = detail::ensure_grad(*x.node());
            const std::vector<T>& g = self.grad;
            const std::vector<T>& y = self.data;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = T(0);
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t idx = base + k * inner;
                        dot += g[idx] * y[idx];
                    }
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t idx = base + k * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_strides<T>(x.shape(), axis, outer, len, inner);
    std::vector<T> out(x.numel());
    const T* px = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = px[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
            T sum = T(0);
            for (std::size_t k = 0; k < len; ++k) sum += std::exp(px[base + k * inner] - mx);
            T lse = mx + std::log(sum);
            for (std::size_t k = 0; k < len; ++k)
                out[base + k * inner] = px[base + k * inner] - lse;
        }
    }
    return detail::make_op(
        x.shape(), std::move(out), {x}, [x, outer, len, inner](TensorNode<T>& self) {
            if (!x.requires_grad()) return;
            auto& gx = detail::ensure_grad(*x.node());
            const std::vector<T>& g = self.grad;
            const std::vector<T>& y = self.data;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T gsum = T(0);
                    for (std::size_t k = 0; k < len; ++k) gsum += g[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t idx = base + k * inner;
                        gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
                    }
                }
            }
        });
}

// ----- linear algebra -----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
    std::vector<T> out(p * r);
    detail::matmul_kernel(a.data(), b.data(), out.data(), p, q, r);
    return detail::make_op(Shape{p, r}, std::move(out), {a, b}, [a, b, p, q, r](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        if (a.requires_grad()) {
            // da[i,k] += sum_j g[i,j] * b[k,j]; iterate bt rows for contiguity
            auto& ga = detail::ensure_grad(*a.node());
            std::vector<T> bt = detail::transpose_copy(b.data(), q, r);
            for (std::size_t i = 0; i < p; ++i) {
                T* gai = ga.data() + i * q;
                const T* gi = g.data() + i * r;
                for (std::size_t j = 0; j < r; ++j) {
                    const T gij = gi[j];
                    const T* btj = bt.data() + j * q;
                    for (std::size_t k = 0; k < q; ++k) gai[k] += gij * btj[k];
                }
            }
        }
        if (b.requires_grad()) {
            // db[k,j] += sum_i a[i,k] * g[i,j]
            auto& gb = detail::ensure_grad(*b.node());
            const T* pa = a.data();
            for (std::size_t i = 0; i < p; ++i) {
                const T* gi = g.data() + i * r;
                for (std::size_t k = 0; k < q; ++k) {
                    const T aik = pa[i * q + k];
                    T* gbk = gb.data() + k * r;
                    for (std::size_t j = 0; j < r; ++j) gbk[j] += aik * gi[j];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    if (x.rank() != 2)
        throw ShapeError("transpose2d: rank-2 tensor required, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out = detail::transpose_copy(x.data(), rows, cols);
    return detail::make_op(Shape{cols, rows}, std::move(out), {x},
                           [x, rows, cols](TensorNode<T>& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::ensure_grad(*x.node());
                               const std::vector<T>& g = self.grad;
                               for (std::size_t i = 0; i < cols; ++i)
                                   for (std::size_t j = 0; j < rows; ++j)
                                       gx[j * cols + i] += g[i * rows + j];
                           });
}

// Learnable affine map, Eq. "W x + b" applied to the trailing dimension.
template <typename T>
struct MlpParams {
    Tensor<T> W;  // out_dim x in_dim
    Tensor<T> b;  // out_dim

    std::size_t in_dim() const { return W.dim(1); }
    std::size_t out_dim() const { return W.dim(0); }

    static MlpParams seeded(std::size_t out_dim, std::size_t in_dim, Rng& rng, double scale) {
        MlpParams p;
        p.W = Tensor<T>::gaussian({out_dim, in_dim}, rng, scale);
        p.b = Tensor<T>::zeros({out_dim});
        return p;
    }

    // Zero weights and bias: the residual-branch init that makes SRM/FTM
    // start as exact identities.
    static MlpParams zeros(std::size_t out_dim, std::size_t in_dim) {
        MlpParams p;
        p.W = Tensor<T>::zeros({out_dim, in_dim});
        p.b = Tensor<T>::zeros({out_dim});
        return p;
    }

    void set_trainable(bool v) {
        W.set_requires_grad(v);
        b.set_requires_grad(v);
    }
};

// Affine map over the trailing dim at every leading position:
// y[l,o] = sum_i W[o,i] x[l,i] + b[o], inner sum ascending, bias added last.
template <typename T>
Tensor<T> mlp_apply(const MlpParams<T>& p, const Tensor<T>& x) {
    if (x.rank() < 1 || x.shape().back() != p.in_dim())
        throw ShapeError("mlp_apply: trailing dim of " + shape_str(x.shape()) +
                         " does not match weight shape " + shape_str(p.W.shape()));
    const std::size_t in = p.in_dim(), out_dim = p.out_dim();
    const std::size_t L = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    std::vector<T> out(L * out_dim, T(0));
    {
        // y[l,o] accumulates over i ascending against W^T rows, then bias:
        // the same per-element sequence as the per-position loop oracle.
        std::vector<T> wt = detail::transpose_copy(p.W.data(), out_dim, in);
        const T* px = x.data();
        const T* pb = p.b.data();
        for (std::size_t l = 0; l < L; ++l) {
            T* yl = out.data() + l * out_dim;
            const T* xl = px + l * in;
            for (std::size_t i = 0; i < in; ++i) {
                const T xi = xl[i];
                const T* wti = wt.data() + i * out_dim;
                for (std::size_t o = 0; o < out_dim; ++o) yl[o] += xi * wti[o];
            }
            for (std::size_t o = 0; o < out_dim; ++o) yl[o] += pb[o];
        }
    }
    Tensor<T> W = p.W, b = p.b;
    return detail::make_op(std::move(out_shape), std::move(out), {x, W, b},
                           [x, W, b, L, in, out_dim](TensorNode<T>& self) {
                               const std::vector<T>& g = self.grad;
                               const T* px2 = x.data();
                               const T* pw2 = W.data();
                               if (x.requires_grad()) {
                                   auto& gx = detail::ensure_grad(*x.node());
                                   for (std::size_t l = 0; l < L; ++l) {
                                       T* gxl = gx.data() + l * in;
                                       const T* gl = g.data() + l * out_dim;
                                       for (std::size_t o = 0; o < out_dim; ++o) {
                                           const T go = gl[o];
                                           const T* wo = pw2 + o * in;
                                           for (std::size_t i = 0; i < in; ++i) gxl[i] += go * wo[i];
                                       }
                                   }
                               }
                               if (W.requires_grad()) {
                                   auto& gw = detail::ensure_grad(*W.node());
                                   for (std::size_t l = 0; l < L; ++l) {
                                       const T* xl = px2 + l * in;
                                       const T* gl = g.data() + l * out_dim;
                                       for (std::size_t o = 0; o < out_dim; ++o) {
                                           const T go = gl[o];
                                           T* gwo = gw.data() + o * in;
                                           for (std::size_t i = 0; i < in; ++i) gwo[i] += go * xl[i];
                                       }
                                   }
                               }
                               if (b.requires_grad()) {
                                   auto& gb = detail::ensure_grad(*b.node());
                                   for (std::size_t l = 0; l < L; ++l) {
                                       const T* gl = g.data() + l * out_dim;
                                       for (std::size_t o = 0; o < out_dim; ++o) gb[o] += gl[o];
                                   }
                               }
                           });
}

// Channel vector broadcast over a grid: y[.., c] = x[.., c] * v[c].
// One of the two sanctioned broadcast patterns.
template <typename T>
Tensor<T> channel_mul(const Tensor<T>& x, const Tensor<T>& v) {
    if (v.rank() != 1 || x.rank() < 1 || x.shape().back() != v.dim(0))
        throw ShapeError("channel_mul: shapes " + shape_str(x.shape()) + " and " +
                         shape_str(v.shape()) + " incompatible");
    const std::size_t c = v.dim(0);
    const std::size_t L = x.numel() / c;
    std::vector<T> out(x.numel());
    const T* px = x.data();
    const T* pv = v.data();
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t i = 0; i < c; ++i) out[l * c + i] = px[l * c + i] * pv[i];
    return detail::make_op(x.shape(), std::move(out), {x, v}, [x, v, L, c](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        const T* px2 = x.data();
        const T* pv2 = v.data();
        if (x.requires_grad()) {
            auto& gx = detail::ensure_grad(*x.node());
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t i = 0; i < c; ++i) gx[l * c + i] += g[l * c + i] * pv2[i];
        }
        if (v.requires_grad()) {
            auto& gv = detail::ensure_grad(*v.node());
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t i = 0; i < c; ++i) gv[i] += g[l * c + i] * px2[l * c + i];
        }
    });
}

// y = s[0] * x with a 1-element gate tensor (the FTM rho path).
template <typename T>
Tensor<T> scalar_gate(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1)
        throw ShapeError("scalar_gate: gate must have one element, got " + shape_str(s.shape()));
    const T sv = s.data()[0];
    std::vector<T> out(x.numel());
    const T* px = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * px[i];
    return detail::make_op(x.shape(), std::move(out), {x, s}, [x, s, sv](TensorNode<T>& self) {
        const std::vector<T>& g = self.grad;
        if (x.requires_grad()) {
            auto& gx = detail::ensure_grad(*x.node());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
        }
        if (s.requires_grad()) {
            auto& gs = detail::ensure_grad(*s.node());
            const T* px2 = x.data();
            T acc = T(0);
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * px2[i];
            gs[0] += acc;
        }
    });
}

// ----- slicing / stitching -----

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::size_t row0, std::size_t nrows) {
    if (x.rank() != 2 || row0 + nrows > x.dim(0))
        throw ShapeError("take_rows: rows [" + std::to_string(row0) + "," +
                         std::to_string(row0 + nrows) + ") out of " + shape_str(x.shape()));
    const std::size_t cols = x.dim(1);
    std::vector<T> out(nrows * cols);
    std::copy(x.data() + row0 * cols, x.data() + (row0 + nrows) * cols, out.begin());
    return detail::make_op(Shape{nrows, cols}, std::move(out), {x},
                           [x, row0, nrows, cols](TensorNode<T>& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::ensure_grad(*x.node());
                               const std::vector<T>& g = self.grad;
                               for (std::size_t i = 0; i < nrows * cols; ++i)
                                   gx[row0 * cols + i] += g[i];
                           });
}

template <typename T>
Tensor<T> take_cols(const Tensor<T>& x, std::size_t col0, std::size_t ncols) {
    if (x.rank() != 2 || col0 + ncols > x.dim(1))
        throw ShapeError("take_cols: cols [" + std::to_string(col0) + "," +
                         std::to_string(col0 + ncols) + ") out of " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(rows * ncols);
    for (std::size_t i = 0; i < rows; ++i)
        std::copy(x.data() + i * cols + col0, x.data() + i * cols + col0 + ncols,
                  out.begin() + i * ncols);
    return detail::make_op(Shape{rows, ncols}, std::move(out), {x},
                           [x, col0, ncols, rows, cols](TensorNode<T>& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::ensure_grad(*x.node());
                               const std::vector<T>& g = self.grad;
                               for (std::size_t i = 0; i < rows; ++i)
                                   for (std::size_t j = 0; j < ncols; ++j)
                                       gx[i * cols + col0 + j] += g[i * ncols + j];
                           });
}

// 1-element view of a vector entry (per-layer rho lookup).
template <typename T>
Tensor<T> take_element(const Tensor<T>& x, std::size_t index) {
    if (index >= x.numel())
        throw ShapeError("take_element: index " + std::to_string(index) + " out of " +
                         shape_str(x.shape()));
    std::vector<T> out{x.data()[index]};
    return detail::make_op(Shape{1}, std::move(out), {x}, [x, index](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::ensure_grad(*x.node());
        gx[index] += self.grad[0];
    });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0].dim(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols)
            throw ShapeError("concat_rows: shape " + shape_str(p.shape()) + " incompatible");
        rows += p.dim(0);
    }
    std::vector<T> out(rows * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.begin() + off);
        off += p.numel();
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = Shape{rows, cols};
    node->data = std::move(out);
    node->id = detail::next_node_id();
    bool track = detail::grad_mode_flag();
    if (track) {
        bool any = false;
        for (const auto& p : parts) any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        std::vector<Tensor<T>> held = parts;
        node->backward = [held](TensorNode<T>& self) {
            const std::vector<T>& g = self.grad;
            std::size_t off2 = 0;
            for (const auto& p : held) {
                if (p.requires_grad()) {
                    auto& gp = detail::ensure_grad(*p.node());
                    for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off2 + i];
                }
                off2 += p.numel();
            }
        };
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw ShapeError("concat_cols: shape " + shape_str(p.shape()) + " incompatible");
        cols += p.dim(1);
    }
    std::vector<T> out(rows * cols);
    std::size_t coff = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(p.data() + i * pc, p.data() + (i + 1) * pc, out.begin() + i * cols + coff);
        coff += pc;
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = Shape{rows, cols};
    node->data = std::move(out);
    node->id = detail::next_node_id();
    bool track = detail::grad_mode_flag();
    if (track) {
        bool any = false;
        for (const auto& p : parts) any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        std::vector<Tensor<T>> held = parts;
        node->backward = [held, rows, cols](TensorNode<T>& self) {
            const std::vector<T>& g = self.grad;
            std::size_t coff2 = 0;
            for (const auto& p : held) {
                const std::size_t pc = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = detail::ensure_grad(*p.node());
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            gp[i * pc + j] += g[i * cols + coff2 + j];
                }
                coff2 += pc;
            }
        };
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                         " changes element count");
    std::vector<T> out(x.data(), x.data() + x.numel());
    return detail::make_op(std::move(new_shape), std::move(out), {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::ensure_grad(*x.node());
        const std::vector<T>& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

// ----- reductions -----

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    const T* px = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) s += px[i];
    return detail::make_op(Shape{1}, std::vector<T>{s}, {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        auto& gx = detail::ensure_grad(*x.node());
        const T g = self.grad[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale_add(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ----- resampling -----

namespace detail {

// Half-pixel-center bilinear kernel shared by the autodiff op, TTA and the
// augmentation pipeline. Same-size resize reduces to an exact copy.
template <typename T>
void bilinear_weights(std::size_t src, std::size_t dst, std::size_t d,
                      std::size_t& i0, std::size_t& i1, T& w1) {
    const T pos = (static_cast<T>(d) + T(0.5)) * static_cast<T>(src) / static_cast<T>(dst) - T(0.5);
    T clamped = std::min(std::max(pos, T(0)), static_cast<T>(src - 1));
    T fl = std::floor(clamped);
    i0 = static_cast<std::size_t>(fl);
    i1 = std::min(i0 + 1, src - 1);
    w1 = clamped - fl;
}

template <typename T>
void bilinear_kernel(const T* src, std::size_t h, std::size_t w, std::size_t c, T* dst,
                     std::size_t ho, std::size_t wo) {
    if (h == ho && w == wo) {
        std::copy(src, src + h * w * c, dst);
        return;
    }
    for (std::size_t y = 0; y < ho; ++y) {
        std::size_t y0, y1;
        T wy;
        bilinear_weights<T>(h, ho, y, y0, y1, wy);
        for (std::size_t x = 0; x < wo; ++x) {
            std::size_t x0, x1;
            T wx;
            bilinear_weights<T>(w, wo, x, x0, x1, wx);
            const T* p00 = src + (y0 * w + x0) * c;
            const T* p01 = src + (y0 * w + x1) * c;
            const T* p10 = src + (y1 * w + x0) * c;
            const T* p11 = src + (y1 * w + x1) * c;
            T* out = dst + (y * wo + x) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
                T top = p00[ch] + wx * (p01[ch] - p00[ch]);
                T bot = p10[ch] + wx * (p11[ch] - p10[ch]);
                out[ch] = top + wy * (bot - top);
            }
        }
    }
}

}  // namespace detail

// Bilinear spatial resize of an H x W x C map, channels independent.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t ho, std::size_t wo) {
    if (x.rank() != 3)
        throw ShapeError("bilinear_resize: H x W x C tensor required, got " +
                         shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<T> out(ho * wo * c);
    detail::bilinear_kernel(x.data(), h, w, c, out.data(), ho, wo);
    return detail::make_op(Shape{ho, wo, c}, std::move(out), {x},
                           [x, h, w, c, ho, wo](TensorNode<T>& self) {
                               if (!x.requires_grad()) return;
                               auto& gx = detail::ensure_grad(*x.node());
                               const std::vector<T>& g = self.grad;
                               if (h == ho && w == wo) {
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                   return;
                               }
                               for (std::size_t y = 0; y < ho; ++y) {
                                   std::size_t y0, y1;
                                   T wy;
                                   detail::bilinear_weights<T>(h, ho, y, y0, y1, wy);
                                   for (std::size_t xx = 0; xx < wo; ++xx) {
                                       std::size_t x0, x1;
                                       T wx;
                                       detail::bilinear_weights<T>(w, wo, xx, x0, x1, wx);
                                       const T* go = g.data() + (y * wo + xx) * c;
                                       for (std::size_t ch = 0; ch < c; ++ch) {
                                           const T gv = go[ch];
                                           gx[(y0 * w + x0) * c + ch] += gv * (T(1) - wy) * (T(1) - wx);
                                           gx[(y0 * w + x1) * c + ch] += gv * (T(1) - wy) * wx;
                                           gx[(y1 * w + x0) * c + ch] += gv * wy * (T(1) - wx);
                                           gx[(y1 * w + x1) * c + ch] += gv * wy * wx;
                                       }
                                   }
                               }
                           });
}

// ----- normalization -----

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back())
        throw ShapeError("layer_norm: shapes " + shape_str(x.shape()) + ", " +
                         shape_str(gamma.shape()) + ", " + shape_str(beta.shape()) +
                         " incompatible");
    const std::size_t c = x.shape().back();
    const std::size_t L = x.numel() / c;
    std::vector<T> out(x.numel());
    std::vector<T> inv_std(L), xhat(x.numel());
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    for (std::size_t l = 0; l < L; ++l) {
        const T* xl = px + l * c;
        T mean = T(0);
        for (std::size_t i = 0; i < c; ++i) mean += xl[i];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t i = 0; i < c; ++i) {
            T d = xl[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[l] = is;
        for (std::size_t i = 0; i < c; ++i) {
            T xh = (xl[i] - mean) * is;
            xhat[l * c + i] = xh;
            out[l * c + i] = pg[i] * xh + pb[i];
        }
    }
    return detail::make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, L, c, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](TensorNode<T>& self) {
            const std::vector<T>& g = self.grad;
            const T* pg2 = gamma.data();
            if (x.requires_grad()) {
                auto& gx = detail::ensure_grad(*x.node());
                for (std::size_t l = 0; l < L; ++l) {
                    T sum_gg = T(0), sum_ggx = T(0);
                    for (std::size_t i = 0; i < c; ++i) {
                        const T gg = g[l * c + i] * pg2[i];
                        sum_gg += gg;
                        sum_ggx += gg * xhat[l * c + i];
                    }
                    const T inv_c = T(1) / static_cast<T>(c);
                    for (std::size_t i = 0; i < c; ++i) {
                        const T gg = g[l * c + i] * pg2[i];
                        gx[l * c + i] += inv_std[l] * (gg - inv_c * sum_gg -
                                                       xhat[l * c + i] * inv_c * sum_ggx);
                    }
                }
            }
            if (gamma.requires_grad()) {
                auto& gg = detail::ensure_grad(*gamma.node());
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t i = 0; i < c; ++i) gg[i] += g[l * c + i] * xhat[l * c + i];
            }
            if (beta.requires_grad()) {
                auto& gb = detail::ensure_grad(*beta.node());
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t i = 0; i < c; ++i) gb[i] += g[l * c + i];
            }
        });
}

// ----- raw (graph-free) helpers -----

// Graph-free bilinear resize for eval-time plumbing.
template <typename T>
Tensor<T> resize_bilinear_raw(const Tensor<T>& x, std::size_t ho, std::size_t wo) {
    if (x.rank() != 3)
        throw ShapeError("resize_bilinear_raw: H x W x C required, got " + shape_str(x.shape()));
    std::vector<T> out(ho * wo * x.dim(2));
    detail::bilinear_kernel(x.data(), x.dim(0), x.dim(1), x.dim(2), out.data(), ho, wo);
    return Tensor<T>::from_vector({ho, wo, x.dim(2)}, std::move(out));
}

// Graph-free horizontal mirror of an H x W x C map.
template <typename T>
Tensor<T> hflip_raw(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("hflip_raw: H x W x C required, got " + shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<T> out(x.numel());
    const T* px = x.data();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
            for (std::size_t ch = 0; ch < c; ++ch)
                out[(y * w + xx) * c + ch] = px[(y * w + (w - 1 - xx)) * c + ch];
    return Tensor<T>::from_vector(x.shape(), std::move(out));
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
    const T* p = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

}  // namespace schnet
