#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records nodes in creation order, which is a topological order, and
// backward() replays them in reverse. Ops are free functions taking Var
// handles; every op checks its operands and names itself and the offending
// shapes on failure.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pyreid/errors.hpp"
#include "pyreid/tensor.hpp"

namespace pyreid {

enum class Mode { train, eval };

// A learnable tensor owned outside any graph. Gradients from every backward
// pass that touched it accumulate into `grad` until zero_grad().
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool decay = true; // false for batch-norm affine parameters

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool apply_decay = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape(), T{0}), decay(apply_decay) {}

    void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;

    BatchNormStats() = default;
    explicit BatchNormStats(std::size_t channels)
        : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.1;
};

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

template <typename T>
class Graph;

template <typename T>
class Var {
public:
    Var() = default;

    Graph<T>* graph() const noexcept { return g_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return g_ != nullptr; }

    const Tensor<T>& value() const { return g_->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return g_->requires_grad(*this); }

private:
    friend class Graph<T>;
    Var(Graph<T>* g, std::size_t id) : g_(g), id_(id) {}

    Graph<T>* g_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = delete;
    Graph& operator=(Graph&&) = delete;

    Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), {}, false, nullptr); }

    Var<T> input(Tensor<T> value, bool requires_grad = true) {
        return push("input", std::move(value), {}, requires_grad, nullptr);
    }

    // Leaf bound to an external parameter; backward() adds into p.grad.
    Var<T> parameter(Parameter<T>& p, bool requires_grad = true) {
        auto v = push("parameter", p.value, {}, requires_grad, nullptr);
        nodes_[v.id_].param = requires_grad ? &p : nullptr;
        return v;
    }

    // Records an op output. `fn` is dropped when no input requires grad.
    Var<T> record(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn fn) {
        bool rg = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& in : inputs) {
            if (in.g_ != this) throw GraphError(std::string(op) + ": operand belongs to a different graph");
            rg = rg || nodes_[in.id_].requires_grad;
            ids.push_back(in.id_);
        }
        if (consumed_) throw GraphError(std::string(op) + ": graph already consumed by backward()");
        return push(op, std::move(value), std::move(ids), rg, rg ? std::move(fn) : BackwardFn{});
    }

    const Tensor<T>& value(const Var<T>& v) const { return node(v).value; }
    bool requires_grad(const Var<T>& v) const { return node(v).requires_grad; }
    std::string_view op_name(const Var<T>& v) const { return node(v).op; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Gradient of a leaf after backward(); null when the leaf received none.
    const Tensor<T>* grad(const Var<T>& v) const {
        const auto& n = node(v);
        return n.has_grad ? &n.grad : nullptr;
    }

    // Accumulation target for backward functions; null if `v` needs no gradient.
    Tensor<T>* grad_target(const Var<T>& v) {
        auto& n = nodes_[v.id_];
        if (!n.requires_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor<T>(n.value.shape(), T{0});
            n.has_grad = true;
        }
        return &n.grad;
    }

    void backward(const Var<T>& loss) {
        if (loss.g_ != this) throw GraphError("backward: loss belongs to a different graph");
        if (consumed_) throw GraphError("backward: called twice on the same graph; re-run forward first");
        auto& root = nodes_[loss.id_];
        if (root.value.size() != 1) {
            throw GraphError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
        }
        if (!root.requires_grad) {
            throw GraphError("backward: loss is detached (no differentiable leaf reaches it)");
        }
        consumed_ = true;
        root.grad = Tensor<T>(root.value.shape(), T{1});
        root.has_grad = true;
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.backward) {
                n.backward(*this, n.grad);
                n.backward = nullptr;
            }
            if (n.param != nullptr) {
                auto dst = n.param->grad.data();
                auto src = n.grad.data();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
            if (!n.inputs.empty()) {
                // Intermediate gradients are not retained.
                n.grad = Tensor<T>();
                n.has_grad = false;
            }
        }
    }

    bool consumed() const noexcept { return consumed_; }

private:
    struct Node {
        std::string_view op;
        Tensor<T> value;
        Tensor<T> grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    const Node& node(const Var<T>& v) const {
        if (v.g_ != this || v.id_ >= nodes_.size()) throw GraphError("var does not belong to this graph");
        return nodes_[v.id_];
    }

    Var<T> push(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, bool rg, BackwardFn fn) {
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.requires_grad = rg;
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

inline std::string mismatch(std::string_view op, const Shape& a, const Shape& b) {
    return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

template <typename T>
void require_same_shape(std::string_view op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError(mismatch(op, a.shape(), b.shape()));
}

template <typename T>
void require_rank(std::string_view op, const Var<T>& a, std::size_t rank) {
    if (a.value().rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
    }
}

template <typename T>
void axpy(Tensor<T>* dst, const Tensor<T>& src, T alpha = T{1}) {
    if (!dst) return;
    auto d = dst->data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("add", a, b);
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return a.graph()->record("add", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        detail::axpy(g.grad_target(a), go);
        detail::axpy(g.grad_target(b), go);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return a.graph()->record("sub", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        detail::axpy(g.grad_target(a), go);
        detail::axpy(g.grad_target(b), go, T{-1});
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("mul", a, b);
    Tensor<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return a.graph()->record("mul", std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
        auto gd = go.data();
        if (auto* ga = g.grad_target(a)) {
            auto bv = b.value().data();
            auto d = ga->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * bv[i];
        }
        if (auto* gb = g.grad_target(b)) {
            auto av = a.value().data();
            auto d = gb->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= c;
    return a.graph()->record("scale", std::move(out), {a}, [a, c](Graph<T>& g, const Tensor<T>& go) {
        detail::axpy(g.grad_target(a), go, c);
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v += c;
    return a.graph()->record("add_scalar", std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& go) {
        detail::axpy(g.grad_target(a), go);
    });
}

// Sum of equally shaped operands.
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("add_n: no operands");
    Tensor<T> out = xs.front().value();
    for (std::size_t k = 1; k < xs.size(); ++k) {
        detail::require_same_shape("add_n", xs.front(), xs[k]);
        auto o = out.data();
        auto x = xs[k].value().data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += x[i];
    }
    return xs.front().graph()->record("add_n", std::move(out), xs, [xs](Graph<T>& g, const Tensor<T>& go) {
        for (const auto& x : xs) detail::axpy(g.grad_target(x), go);
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return a.graph()->record("relu", std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& go) {
        auto* ga = g.grad_target(a);
        if (!ga) return;
        auto x = a.value().data();
        auto gd = go.data();
        auto d = ga->data();
        // Gradient at exactly zero is zero.
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (x[i] > T{0}) d[i] += gd[i];
        }
    });
}

// max(x, 0); the triplet hinge.
template <typename T>
Var<T> hinge(const Var<T>& a) {
    return relu(a);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    double acc = 0.0;
    for (auto v : a.value().data()) acc += static_cast<double>(v);
    return a.graph()->record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a},
                             [a](Graph<T>& g, const Tensor<T>& go) {
                                 auto* ga = g.grad_target(a);
                                 if (!ga) return;
                                 const T s = go[0];
                                 for (auto& d : ga->data()) d += s;
                             });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const auto n = static_cast<T>(a.value().size());
    return scale(sum(a), T{1} / n);
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (shape_size(shape) != a.value().size()) {
        throw ShapeError(detail::mismatch("reshape", a.shape(), shape));
    }
    return a.graph()->record("reshape", a.value().reshaped(std::move(shape)), {a},
                             [a](Graph<T>& g, const Tensor<T>& go) {
                                 auto* ga = g.grad_target(a);
                                 if (!ga) return;
                                 auto d = ga->data();
                                 auto s = go.data();
                                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [M x K] * [K x N] -> [M x N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    if (b.shape()[0] != K) throw ShapeError(detail::mismatch("matmul", a.shape(), b.shape()));
    Tensor<T> out(Shape{M, N}, T{0});
    {
        auto A = a.value().data();
        auto B = b.value().data();
        auto C = out.data();
        for (std::size_t i = 0; i < M; ++i) {
            for (std::size_t k = 0; k < K; ++k) {
                const T aik = A[i * K + k];
                const T* brow = &B[k * N];
                T* crow = &C[i * N];
                for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
            }
        }
    }
    return a.graph()->record("matmul", std::move(out), {a, b}, [a, b, M, K, N](Graph<T>& g, const Tensor<T>& go) {
        auto G = go.data();
        if (auto* ga = g.grad_target(a)) {
            auto B = b.value().data();
            auto d = ga->data();
            for (std::size_t i = 0; i < M; ++i) {
                for (std::size_t k = 0; k < K; ++k) {
                    T acc{0};
                    for (std::size_t j = 0; j < N; ++j) acc += G[i * N + j] * B[k * N + j];
                    d[i * K + k] += acc;
                }
            }
        }
        if (auto* gb = g.grad_target(b)) {
            auto A = a.value().data();
            auto d = gb->data();
            for (std::size_t i = 0; i < M; ++i) {
                for (std::size_t k = 0; k < K; ++k) {
                    const T aik = A[i * K + k];
                    for (std::size_t j = 0; j < N; ++j) d[k * N + j] += aik * G[i * N + j];
                }
            }
        }
    });
}

// [N x K] + bias[K] broadcast over rows.
template <typename T>
Var<T> add_rowwise(const Var<T>& x, const Var<T>& bias) {
    detail::require_rank("add_rowwise", x, 2);
    detail::require_rank("add_rowwise", bias, 1);
    const std::size_t N = x.shape()[0], K = x.shape()[1];
    if (bias.shape()[0] != K) throw ShapeError(detail::mismatch("add_rowwise", x.shape(), bias.shape()));
    Tensor<T> out = x.value();
    auto o = out.data();
    auto bv = bias.value().data();
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < K; ++j) o[i * K + j] += bv[j];
    return x.graph()->record("add_rowwise", std::move(out), {x, bias},
                             [x, bias, N, K](Graph<T>& g, const Tensor<T>& go) {
                                 detail::axpy(g.grad_target(x), go);
                                 if (auto* gb = g.grad_target(bias)) {
                                     auto d = gb->data();
                                     auto s = go.data();
                                     for (std::size_t i = 0; i < N; ++i)
                                         for (std::size_t j = 0; j < K; ++j) d[j] += s[i * K + j];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Convolution: x [N x C x H x W], w [O x C x KH x KW] -> [N x O x OH x OW]

namespace detail {

struct ConvGeometry {
    std::size_t N, C, H, W, O, KH, KW, OH, OW;
    std::ptrdiff_t stride, pad;

    // Output columns ox for which ox*stride + kx - pad lies in [0, W).
    std::pair<std::ptrdiff_t, std::ptrdiff_t> col_range(std::ptrdiff_t kx) const {
        std::ptrdiff_t lo = 0;
        if (pad > kx) lo = (pad - kx + stride - 1) / stride;
        const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(W) - 1 + pad - kx;
        if (last < 0) return {0, 0};
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(OW), last / stride + 1);
        return {lo, std::max(lo, hi)};
    }
};

} // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dOptions opt = {}) {
    detail::require_rank("conv2d", x, 4);
    detail::require_rank("conv2d", w, 4);
    if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs[1] != ws[1]) throw ShapeError(detail::mismatch("conv2d", xs, ws));
    if (xs[2] + 2 * opt.pad < ws[2] || xs[3] + 2 * opt.pad < ws[3]) {
        throw ShapeError("conv2d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
    }
    detail::ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3],
                             (xs[2] + 2 * opt.pad - ws[2]) / opt.stride + 1,
                             (xs[3] + 2 * opt.pad - ws[3]) / opt.stride + 1,
                             static_cast<std::ptrdiff_t>(opt.stride), static_cast<std::ptrdiff_t>(opt.pad)};

    Tensor<T> out(Shape{geo.N, geo.O, geo.OH, geo.OW}, T{0});
    {
        auto X = x.value().data();
        auto Wt = w.value().data();
        auto Y = out.data();
        for (std::size_t n = 0; n < geo.N; ++n)
            for (std::size_t o = 0; o < geo.O; ++o) {
                T* yplane = &Y[(n * geo.O + o) * geo.OH * geo.OW];
                for (std::size_t c = 0; c < geo.C; ++c) {
                    const T* xplane = &X[(n * geo.C + c) * geo.H * geo.W];
                    for (std::size_t ky = 0; ky < geo.KH; ++ky)
                        for (std::size_t kx = 0; kx < geo.KW; ++kx) {
                            const T wv = Wt[((o * geo.C + c) * geo.KH + ky) * geo.KW + kx];
                            const auto [lo, hi] = geo.col_range(static_cast<std::ptrdiff_t>(kx));
                            for (std::size_t oy = 0; oy < geo.OH; ++oy) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy) * geo.stride +
                                                static_cast<std::ptrdiff_t>(ky) - geo.pad;
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.H)) continue;
                                const T* xrow = xplane + iy * static_cast<std::ptrdiff_t>(geo.W) +
                                                static_cast<std::ptrdiff_t>(kx) - geo.pad;
                                T* yrow = yplane + oy * geo.OW;
                                for (auto ox = lo; ox < hi; ++ox) yrow[ox] += wv * xrow[ox * geo.stride];
                            }
                        }
                }
            }
    }

    return x.graph()->record("conv2d", std::move(out), {x, w}, [x, w, geo](Graph<T>& g, const Tensor<T>& go) {
        auto* gx = g.grad_target(x);
        auto* gw = g.grad_target(w);
        auto X = x.value().data();
        auto Wt = w.value().data();
        auto G = go.data();
        for (std::size_t n = 0; n < geo.N; ++n)
            for (std::size_t o = 0; o < geo.O; ++o) {
                const T* gplane = &G[(n * geo.O + o) * geo.OH * geo.OW];
                for (std::size_t c = 0; c < geo.C; ++c) {
                    const std::size_t xoff = (n * geo.C + c) * geo.H * geo.W;
                    for (std::size_t ky = 0; ky < geo.KH; ++ky)
                        for (std::size_t kx = 0; kx < geo.KW; ++kx) {
                            const std::size_t widx = ((o * geo.C + c) * geo.KH + ky) * geo.KW + kx;
                            const T wv = Wt[widx];
                            const auto [lo, hi] = geo.col_range(static_cast<std::ptrdiff_t>(kx));
                            T wacc{0};
                            for (std::size_t oy = 0; oy < geo.OH; ++oy) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy) * geo.stride +
                                                static_cast<std::ptrdiff_t>(ky) - geo.pad;
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.H)) continue;
                                const std::ptrdiff_t rowoff = static_cast<std::ptrdiff_t>(xoff) +
                                                              iy * static_cast<std::ptrdiff_t>(geo.W) +
                                                              static_cast<std::ptrdiff_t>(kx) - geo.pad;
                                const T* grow = gplane + oy * geo.OW;
                                if (gx) {
                                    T* dxrow = gx->data().data() + rowoff;
                                    for (auto ox = lo; ox < hi; ++ox) dxrow[ox * geo.stride] += wv * grow[ox];
                                }
                                if (gw) {
                                    const T* xrow = X.data() + rowoff;
                                    for (auto ox = lo; ox < hi; ++ox) wacc += grow[ox] * xrow[ox * geo.stride];
                                }
                            }
                            if (gw) gw->data()[widx] += wacc;
                        }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization over axis 1 of [N x C] or [N x C x H x W].
// `stats` may be null in train mode (no running update); eval mode needs it.

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>* stats, Mode mode,
                  BatchNormOptions opt = {}) {
    const auto& xs = x.shape();
    if (xs.size() != 2 && xs.size() != 4) {
        throw ShapeError("batch_norm: expected rank 2 or 4 input, got " + shape_str(xs));
    }
    const std::size_t N = xs[0], C = xs[1];
    const std::size_t inner = xs.size() == 4 ? xs[2] * xs[3] : 1;
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError(detail::mismatch("batch_norm", xs, gamma.shape()));
    }
    if (mode == Mode::eval && stats == nullptr) throw GraphError("batch_norm: eval mode requires running stats");
    if (stats && stats->running_mean.shape() != Shape{C}) {
        throw ShapeError(detail::mismatch("batch_norm", xs, stats->running_mean.shape()));
    }

    const std::size_t m = N * inner;
    auto X = x.value().data();
    auto gm = gamma.value().data();
    auto bt = beta.value().data();
    auto xhat = std::make_shared<std::vector<T>>(X.size());
    auto invstd = std::make_shared<std::vector<T>>(C);
    Tensor<T> out(xs, T{0});
    auto Y = out.data();

    for (std::size_t c = 0; c < C; ++c) {
        double mu, var;
        if (mode == Mode::train) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < inner; ++i) s += X[(n * C + c) * inner + i];
            mu = s / static_cast<double>(m);
            double ss = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double d = X[(n * C + c) * inner + i] - mu;
                    ss += d * d;
                }
            var = ss / static_cast<double>(m);
            if (stats) {
                const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
                auto& rm = stats->running_mean[c];
                auto& rv = stats->running_var[c];
                rm = static_cast<T>((1.0 - opt.momentum) * rm + opt.momentum * mu);
                rv = static_cast<T>((1.0 - opt.momentum) * rv + opt.momentum * unbiased);
            }
        } else {
            mu = stats->running_mean[c];
            var = stats->running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + opt.eps);
        (*invstd)[c] = static_cast<T>(is);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (n * C + c) * inner + i;
                const T xh = static_cast<T>((X[idx] - mu) * is);
                (*xhat)[idx] = xh;
                Y[idx] = gm[c] * xh + bt[c];
            }
    }

    return x.graph()->record(
        "batch_norm", std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, invstd, N, C, inner, m, mode](Graph<T>& g, const Tensor<T>& go) {
            auto G = go.data();
            auto gm = gamma.value().data();
            auto* gx = g.grad_target(x);
            auto* gg = g.grad_target(gamma);
            auto* gb = g.grad_target(beta);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (n * C + c) * inner + i;
                        sum_dy += G[idx];
                        sum_dy_xh += static_cast<double>(G[idx]) * (*xhat)[idx];
                    }
                if (gg) gg->data()[c] += static_cast<T>(sum_dy_xh);
                if (gb) gb->data()[c] += static_cast<T>(sum_dy);
                if (!gx) continue;
                const double k = static_cast<double>(gm[c]) * (*invstd)[c];
                auto D = gx->data();
                if (mode == Mode::train) {
                    const double md = static_cast<double>(m);
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = (n * C + c) * inner + i;
                            D[idx] += static_cast<T>(k * (G[idx] - sum_dy / md - (*xhat)[idx] * sum_dy_xh / md));
                        }
                } else {
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = (n * C + c) * inner + i;
                            D[idx] += static_cast<T>(k * G[idx]);
                        }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Spatial ops on the last two axes (height, width).

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
    const auto& xs = x.shape();
    if (xs.size() < 3) throw ShapeError("global_max_pool: expected rank >= 3, got " + shape_str(xs));
    const std::size_t plane = xs[xs.size() - 2] * xs[xs.size() - 1];
    Shape os(xs.begin(), xs.end() - 2);
    Tensor<T> out(os, T{0});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    auto X = x.value().data();
    for (std::size_t p = 0; p < out.size(); ++p) {
        const T* base = &X[p * plane];
        std::size_t best = 0;
        for (std::size_t i = 1; i < plane; ++i)
            if (base[i] > base[best]) best = i;
        (*argmax)[p] = p * plane + best;
        out[p] = base[best];
    }
    return x.graph()->record("global_max_pool", std::move(out), {x}, [x, argmax](Graph<T>& g, const Tensor<T>& go) {
        auto* gx = g.grad_target(x);
        if (!gx) return;
        for (std::size_t p = 0; p < argmax->size(); ++p) gx->data()[(*argmax)[p]] += go[p];
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& xs = x.shape();
    if (xs.size() < 3) throw ShapeError("global_avg_pool: expected rank >= 3, got " + shape_str(xs));
    const std::size_t plane = xs[xs.size() - 2] * xs[xs.size() - 1];
    Shape os(xs.begin(), xs.end() - 2);
    Tensor<T> out(os, T{0});
    auto X = x.value().data();
    for (std::size_t p = 0; p < out.size(); ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += X[p * plane + i];
        out[p] = static_cast<T>(s / static_cast<double>(plane));
    }
    return x.graph()->record("global_avg_pool", std::move(out), {x}, [x, plane](Graph<T>& g, const Tensor<T>& go) {
        auto* gx = g.grad_target(x);
        if (!gx) return;
        const T inv = T{1} / static_cast<T>(plane);
        auto D = gx->data();
        for (std::size_t p = 0; p < go.size(); ++p)
            for (std::size_t i = 0; i < plane; ++i) D[p * plane + i] += go[p] * inv;
    });
}

// Rows [begin, end) of the height axis (second to last).
template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
    const auto& xs = x.shape();
    if (xs.size() < 2) throw ShapeError("slice_rows: expected rank >= 2, got " + shape_str(xs));
    const std::size_t H = xs[xs.size() - 2], W = xs.back();
    if (begin >= end || end > H) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for shape " + shape_str(xs));
    }
    const std::size_t outer = x.value().size() / (H * W);
    const std::size_t rows = end - begin;
    Shape os = xs;
    os[os.size() - 2] = rows;
    Tensor<T> out(os, T{0});
    auto X = x.value().data();
    auto Y = out.data();
    for (std::size_t p = 0; p < outer; ++p)
        std::copy_n(&X[(p * H + begin) * W], rows * W, &Y[p * rows * W]);
    return x.graph()->record("slice_rows", std::move(out), {x},
                             [x, outer, H, W, begin, rows](Graph<T>& g, const Tensor<T>& go) {
                                 auto* gx = g.grad_target(x);
                                 if (!gx) return;
                                 auto D = gx->data();
                                 auto G = go.data();
                                 for (std::size_t p = 0; p < outer; ++p)
                                     for (std::size_t i = 0; i < rows * W; ++i)
                                         D[(p * H + begin) * W + i] += G[p * rows * W + i];
                             });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no operands");
    const Shape& first = xs.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(first));
    std::size_t total = 0;
    for (const auto& v : xs) {
        const Shape& s = v.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw ShapeError(detail::mismatch("concat", first, s));
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    Shape os = first;
    os[axis] = total;
    Tensor<T> out(os, T{0});
    auto Y = out.data();
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& v : xs) {
        offsets.push_back(off);
        const std::size_t chunk = v.shape()[axis] * inner;
        auto X = v.value().data();
        for (std::size_t p = 0; p < outer; ++p) std::copy_n(&X[p * chunk], chunk, &Y[p * total * inner + off * inner]);
        off += v.shape()[axis];
    }
    return xs.front().graph()->record("concat", std::move(out), xs,
                                      [xs, offsets, outer, inner, total, axis](Graph<T>& g, const Tensor<T>& go) {
                                          auto G = go.data();
                                          for (std::size_t k = 0; k < xs.size(); ++k) {
                                              auto* gx = g.grad_target(xs[k]);
                                              if (!gx) continue;
                                              const std::size_t chunk = xs[k].shape()[axis] * inner;
                                              auto D = gx->data();
                                              for (std::size_t p = 0; p < outer; ++p)
                                                  for (std::size_t i = 0; i < chunk; ++i)
                                                      D[p * chunk + i] += G[p * total * inner + offsets[k] * inner + i];
                                          }
                                      });
}

// ---------------------------------------------------------------------------
// Losses and distances

// Per-row softmax cross-entropy. logits [N x K] -> [N]; logits [K] -> scalar.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> labels) {
    const auto& ls = logits.shape();
    if (ls.size() != 1 && ls.size() != 2) {
        throw ShapeError("softmax_cross_entropy: expected rank 1 or 2 logits, got " + shape_str(ls));
    }
    const std::size_t N = ls.size() == 2 ? ls[0] : 1;
    const std::size_t K = ls.back();
    if (labels.size() != N) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(ls));
    }
    for (auto y : labels) {
        if (y >= K) {
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " out of range for " +
                             std::to_string(K) + " classes");
        }
    }
    auto L = logits.value().data();
    auto probs = std::make_shared<std::vector<T>>(L.size());
    Tensor<T> out = ls.size() == 2 ? Tensor<T>(Shape{N}, T{0}) : Tensor<T>::scalar(T{0});
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = &L[n * K];
        double mx = row[0];
        for (std::size_t k = 1; k < K; ++k) mx = std::max<double>(mx, row[k]);
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] = static_cast<T>(std::exp(row[k] - lse));
        out[n] = static_cast<T>(lse - row[labels[n]]);
    }
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.graph()->record("softmax_cross_entropy", std::move(out), {logits},
                                  [logits, probs, lab, N, K](Graph<T>& g, const Tensor<T>& go) {
                                      auto* gl = g.grad_target(logits);
                                      if (!gl) return;
                                      auto D = gl->data();
                                      for (std::size_t n = 0; n < N; ++n) {
                                          const T gn = go[n];
                                          for (std::size_t k = 0; k < K; ++k) {
                                              const T onehot = k == lab[n] ? T{1} : T{0};
                                              D[n * K + k] += gn * ((*probs)[n * K + k] - onehot);
                                          }
                                      }
                                  });
}

// Added under the square root in distance gradients; keeps d(x, x) differentiable.
inline constexpr double kDistanceGradEps = 1e-12;

template <typename T>
Var<T> euclidean_distance(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("euclidean_distance", a, b);
    auto A = a.value().data();
    auto B = b.value().data();
    double s = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) {
        const double d = static_cast<double>(A[i]) - B[i];
        s += d * d;
    }
    return a.graph()->record("euclidean_distance", Tensor<T>::scalar(static_cast<T>(std::sqrt(s))), {a, b},
                             [a, b, s](Graph<T>& g, const Tensor<T>& go) {
                                 const double k = go[0] / std::sqrt(s + kDistanceGradEps);
                                 auto A = a.value().data();
                                 auto B = b.value().data();
                                 auto* ga = g.grad_target(a);
                                 auto* gb = g.grad_target(b);
                                 for (std::size_t i = 0; i < A.size(); ++i) {
                                     const T d = static_cast<T>(k * (static_cast<double>(A[i]) - B[i]));
                                     if (ga) ga->data()[i] += d;
                                     if (gb) gb->data()[i] -= d;
                                 }
                             });
}

// Row-wise distance between equally shaped [N x E] matrices -> [N].
template <typename T>
Var<T> row_distances(const Var<T>& x, const Var<T>& y, bool squared = false) {
    detail::require_rank("row_distances", x, 2);
    detail::require_same_shape("row_distances", x, y);
    const std::size_t N = x.shape()[0], E = x.shape()[1];
    auto X = x.value().data();
    auto Y = y.value().data();
    auto sq = std::make_shared<std::vector<double>>(N);
    Tensor<T> out(Shape{N}, T{0});
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t e = 0; e < E; ++e) {
            const double d = static_cast<double>(X[n * E + e]) - Y[n * E + e];
            s += d * d;
        }
        (*sq)[n] = s;
        out[n] = static_cast<T>(squared ? s : std::sqrt(s));
    }
    return x.graph()->record("row_distances", std::move(out), {x, y},
                             [x, y, sq, N, E, squared](Graph<T>& g, const Tensor<T>& go) {
                                 auto X = x.value().data();
                                 auto Y = y.value().data();
                                 auto* gx = g.grad_target(x);
                                 auto* gy = g.grad_target(y);
                                 for (std::size_t n = 0; n < N; ++n) {
                                     const double k = squared ? 2.0 * go[n]
                                                              : go[n] / std::sqrt((*sq)[n] + kDistanceGradEps);
                                     for (std::size_t e = 0; e < E; ++e) {
                                         const std::size_t i = n * E + e;
                                         const T d = static_cast<T>(k * (static_cast<double>(X[i]) - Y[i]));
                                         if (gx) gx->data()[i] += d;
                                         if (gy) gy->data()[i] -= d;
                                     }
                                 }
                             });
}

// Rows of x [N x E] selected by index -> [M x E].
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> rows) {
    detail::require_rank("gather_rows", x, 2);
    const std::size_t N = x.shape()[0], E = x.shape()[1];
    if (rows.empty()) throw ShapeError("gather_rows: empty index list");
    for (auto r : rows) {
        if (r >= N) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    }
    Tensor<T> out(Shape{rows.size(), E}, T{0});
    auto X = x.value().data();
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(&X[rows[i] * E], E, &out.data()[i * E]);
    return x.graph()->record("gather_rows", std::move(out), {x}, [x, rows, E](Graph<T>& g, const Tensor<T>& go) {
        auto* gx = g.grad_target(x);
        if (!gx) return;
        auto D = gx->data();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t e = 0; e < E; ++e) D[rows[i] * E + e] += go[i * E + e];
    });
}

} // namespace pyreid
