#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ccad/core/tensor.hpp"

// Reverse-mode tape over Tensor<T>. Ops build a DAG of shared nodes;
// backward() walks it once in reverse topological order. Accumulation
// order is fixed, so repeated runs are bit-identical.
namespace ccad::ag {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_ref() {
        if (!has_grad) {
            grad = Tensor<T>::zeros(value.shape);
            has_grad = true;
        }
        return grad;
    }
};

// Inference guard: while disabled, ops record no parents and no backward
// closures, so graphs stay flat during sampling loops.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

template <typename T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> v, bool requires_grad = false) {
        Var out;
        out.n_ = std::make_shared<Node<T>>();
        out.n_->value = std::move(v);
        out.n_->requires_grad = requires_grad;
        return out;
    }

    static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& val() const { return n_->value; }
    Tensor<T>& mutable_val() { return n_->value; }
    bool requires_grad() const { return n_->requires_grad; }
    Tensor<T>& grad() { return n_->grad_ref(); }
    bool has_grad() const { return n_->has_grad; }

    void zero_grad() {
        if (n_->has_grad) std::fill(n_->grad.data.begin(), n_->grad.data.end(), T(0));
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& p : parents) rg = rg || p.node()->requires_grad;
    }
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Var<T>::from_node(std::move(n));
}

// Seeds d(root)/d(root) = 1 and propagates. root must be scalar.
template <typename T>
void backward(const Var<T>& root) {
    if (root.val().numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node().get()};
    std::vector<Node<T>*> path;
    // iterative post-order DFS
    struct Frame {
        Node<T>* n;
        size_t next_child;
    };
    std::vector<Frame> frames{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!frames.empty()) {
        Frame& f = frames.back();
        if (f.next_child < f.n->parents.size()) {
            Node<T>* c = f.n->parents[f.next_child++].get();
            if (c->requires_grad && !seen.count(c)) {
                seen.insert(c);
                frames.push_back({c, 0});
            }
        } else {
            topo.push_back(f.n);
            frames.pop_back();
        }
    }

    root.node()->grad_ref().data[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->has_grad) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.val().data[i] + b.val().data[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (int p = 0; p < 2; ++p) {
            if (!n.parents[static_cast<size_t>(p)]->requires_grad) continue;
            auto& g = n.parents[static_cast<size_t>(p)]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.val().data[i] - b.val().data[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.val().data[i] * b.val().data[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const auto& av = n.parents[0]->value;
        const auto& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * bv.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * av.data[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a.val().data[i] * c;
    return make_op<T>(std::move(out), {a}, [c](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (size_t i = 0; i < g.numel(); ++i) g.data[i] += c * n.grad.data[i];
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) {
        const T x = a.val().data[i];
        out.data[i] = x / (T(1) + std::exp(-x));
    }
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        const auto& xv = n.parents[0]->value;
        auto& g = n.parents[0]->grad_ref();
        for (size_t i = 0; i < g.numel(); ++i) {
            const T x = xv.data[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            g.data[i] += n.grad.data[i] * (s + x * s * (T(1) - s));
        }
    });
}

// y = 1 / sqrt(x + eps); inputs must keep x + eps > 0
template <typename T>
Var<T> rsqrt_eps(const Var<T>& a, T eps) {
    Tensor<T> out(a.val().shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = T(1) / std::sqrt(a.val().data[i] + eps);
    return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (size_t i = 0; i < g.numel(); ++i) {
            const T y = n.value.data[i];
            g.data[i] += n.grad.data[i] * T(-0.5) * y * y * y;
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.val().ndim() != 2 || b.val().ndim() != 2 || a.val().dim(1) != b.val().dim(0))
        throw ShapeError("matmul: need (M,K)x(K,N), got " + a.val().shape_str() + " x " + b.val().shape_str());
    const int M = a.val().dim(0), K = a.val().dim(1), N = b.val().dim(1);
    Tensor<T> out({M, N});
    const T* A = a.val().data.data();
    const T* B = b.val().data.data();
    T* C = out.data.data();
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            const T av = A[static_cast<size_t>(i) * K + k];
            const T* brow = B + static_cast<size_t>(k) * N;
            T* crow = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    return make_op<T>(std::move(out), {a, b}, [M, K, N](Node<T>& n) {
        const T* G = n.grad.data.data();
        const T* A = n.parents[0]->value.data.data();
        const T* B = n.parents[1]->value.data.data();
        if (n.parents[0]->requires_grad) {
            T* dA = n.parents[0]->grad_ref().data.data();
            // dA = G * B^T
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) {
                    const T gv = G[static_cast<size_t>(i) * N + j];
                    const T* brow = B + j;  // column j of B, stride N
                    T* darow = dA + static_cast<size_t>(i) * K;
                    for (int k = 0; k < K; ++k) darow[k] += gv * brow[static_cast<size_t>(k) * N];
                }
        }
        if (n.parents[1]->requires_grad) {
            T* dB = n.parents[1]->grad_ref().data.data();
            // dB = A^T * G
            for (int k = 0; k < K; ++k)
                for (int i = 0; i < M; ++i) {
                    const T av = A[static_cast<size_t>(i) * K + k];
                    const T* grow = G + static_cast<size_t>(i) * N;
                    T* dbrow = dB + static_cast<size_t>(k) * N;
                    for (int j = 0; j < N; ++j) dbrow[j] += av * grow[j];
                }
        }
    });
}

// Batched (G,M,K) x (Gb,K,N) -> (G,M,N); Gb == G, or Gb divides G and
// group g reads b[g % Gb] (shared keys/values across a batch).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    if (a.val().ndim() != 3 || b.val().ndim() != 3)
        throw ShapeError("bmm: need 3-D operands, got " + a.val().shape_str() + " x " + b.val().shape_str());
    const int G = a.val().dim(0), M = a.val().dim(1), K = a.val().dim(2);
    const int Gb = b.val().dim(0), N = b.val().dim(2);
    if (b.val().dim(1) != K || (G % Gb) != 0)
        throw ShapeError("bmm: incompatible " + a.val().shape_str() + " x " + b.val().shape_str());
    Tensor<T> out({G, M, N});
    for (int g = 0; g < G; ++g) {
        const T* A = a.val().data.data() + static_cast<size_t>(g) * M * K;
        const T* B = b.val().data.data() + static_cast<size_t>(g % Gb) * K * N;
        T* C = out.data.data() + static_cast<size_t>(g) * M * N;
        for (int i = 0; i < M; ++i)
            for (int k = 0; k < K; ++k) {
                const T av = A[static_cast<size_t>(i) * K + k];
                const T* brow = B + static_cast<size_t>(k) * N;
                T* crow = C + static_cast<size_t>(i) * N;
                for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
    }
    return make_op<T>(std::move(out), {a, b}, [G, Gb, M, K, N](Node<T>& n) {
        for (int g = 0; g < G; ++g) {
            const T* G_ = n.grad.data.data() + static_cast<size_t>(g) * M * N;
            const T* A = n.parents[0]->value.data.data() + static_cast<size_t>(g) * M * K;
            const T* B = n.parents[1]->value.data.data() + static_cast<size_t>(g % Gb) * K * N;
            if (n.parents[0]->requires_grad) {
                T* dA = n.parents[0]->grad_ref().data.data() + static_cast<size_t>(g) * M * K;
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const T gv = G_[static_cast<size_t>(i) * N + j];
                        T* darow = dA + static_cast<size_t>(i) * K;
                        const T* bcol = B + j;
                        for (int k = 0; k < K; ++k) darow[k] += gv * bcol[static_cast<size_t>(k) * N];
                    }
            }
            if (n.parents[1]->requires_grad) {
                T* dB = n.parents[1]->grad_ref().data.data() + static_cast<size_t>(g % Gb) * K * N;
                for (int k = 0; k < K; ++k)
                    for (int i = 0; i < M; ++i) {
                        const T av = A[static_cast<size_t>(i) * K + k];
                        const T* grow = G_ + static_cast<size_t>(i) * N;
                        T* dbrow = dB + static_cast<size_t>(k) * N;
                        for (int j = 0; j < N; ++j) dbrow[j] += av * grow[j];
                    }
            }
        }
    });
}

// x (..., N) + bias (N)
template <typename T>
Var<T> add_bias_last(const Var<T>& x, const Var<T>& bias) {
    const int N = x.val().shape.back();
    if (bias.val().ndim() != 1 || bias.val().dim(0) != N)
        throw ShapeError("add_bias_last: bias must be (" + std::to_string(N) + ")");
    Tensor<T> out(x.val().shape);
    const size_t rows = out.numel() / static_cast<size_t>(N);
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < N; ++j)
            out.data[r * N + j] = x.val().data[r * N + j] + bias.val().data[static_cast<size_t>(j)];
    return make_op<T>(std::move(out), {x, bias}, [N, rows](Node<T>& n) {
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->grad_ref();
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < N; ++j) g.data[static_cast<size_t>(j)] += n.grad.data[r * N + j];
        }
    });
}

// softmax over the last dimension, max-subtracted for stability
template <typename T>
Var<T> softmax_last(const Var<T>& x) {
    const int N = x.val().shape.back();
    Tensor<T> out(x.val().shape);
    const size_t rows = out.numel() / static_cast<size_t>(N);
    for (size_t r = 0; r < rows; ++r) {
        const T* in = x.val().data.data() + r * N;
        T* o = out.data.data() + r * N;
        T mx = in[0];
        for (int j = 1; j < N; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (int j = 0; j < N; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (int j = 0; j < N; ++j) o[j] /= sum;
    }
    return make_op<T>(std::move(out), {x}, [N, rows](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (size_t r = 0; r < rows; ++r) {
            const T* y = n.value.data.data() + r * N;
            const T* gy = n.grad.data.data() + r * N;
            T dot = T(0);
            for (int j = 0; j < N; ++j) dot += gy[j] * y[j];
            T* gx = g.data.data() + r * N;
            for (int j = 0; j < N; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> new_shape) {
    if (Tensor<T>::count(new_shape) != x.val().numel())
        throw ShapeError("reshape: element count mismatch " + x.val().shape_str());
    Tensor<T> out(std::move(new_shape), x.val().data);
    return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i];
    });
}

namespace detail {
inline std::vector<size_t> strides_of(const std::vector<int>& shape) {
    std::vector<size_t> st(shape.size());
    size_t s = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = s;
        s *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
    }
    return st;
}
}  // namespace detail

namespace detail {

// Walks the output index space in row-major order while tracking the
// source offset incrementally; visit(out_index, src_index).
template <typename Fn>
void for_each_permuted(const std::vector<int>& out_shape, const std::vector<size_t>& src_stride, Fn&& visit) {
    const size_t rank = out_shape.size();
    std::vector<size_t> idx(rank, 0);
    size_t src = 0;
    const size_t total = Tensor<float>::count(out_shape);
    for (size_t o = 0; o < total; ++o) {
        visit(o, src);
        for (size_t i = rank; i-- > 0;) {
            ++idx[i];
            src += src_stride[i];
            if (idx[i] < static_cast<size_t>(out_shape[i])) break;
            src -= src_stride[i] * idx[i];
            idx[i] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    const auto& sh = x.val().shape;
    if (perm.size() != sh.size()) throw ShapeError("permute: rank mismatch");
    std::vector<int> osh(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) osh[i] = sh[static_cast<size_t>(perm[i])];
    const auto in_st = detail::strides_of(sh);
    std::vector<size_t> src_stride(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_st[static_cast<size_t>(perm[i])];

    Tensor<T> out(osh);
    const T* in = x.val().data.data();
    T* o = out.data.data();
    detail::for_each_permuted(osh, src_stride, [&](size_t oi, size_t si) { o[oi] = in[si]; });
    return make_op<T>(std::move(out), {x}, [osh, src_stride](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        const T* gd = n.grad.data.data();
        T* gp = g.data.data();
        detail::for_each_permuted(osh, src_stride, [&](size_t oi, size_t si) { gp[si] += gd[oi]; });
    });
}

// concat along dim 1 of 4-D NCHW (skip connections) or dim 1 of 2-D
template <typename T>
Var<T> concat_dim1(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    if (sa.size() != sb.size() || sa.size() < 2) throw ShapeError("concat_dim1: rank mismatch");
    for (size_t i = 0; i < sa.size(); ++i)
        if (i != 1 && sa[i] != sb[i]) throw ShapeError("concat_dim1: non-concat dims differ");
    std::vector<int> osh = sa;
    osh[1] = sa[1] + sb[1];
    Tensor<T> out(osh);
    const size_t outer = static_cast<size_t>(sa[0]);
    size_t inner = 1;
    for (size_t i = 2; i < sa.size(); ++i) inner *= static_cast<size_t>(sa[i]);
    const size_t ca = static_cast<size_t>(sa[1]) * inner, cb = static_cast<size_t>(sb[1]) * inner;
    for (size_t o = 0; o < outer; ++o) {
        std::copy_n(a.val().data.data() + o * ca, ca, out.data.data() + o * (ca + cb));
        std::copy_n(b.val().data.data() + o * cb, cb, out.data.data() + o * (ca + cb) + ca);
    }
    return make_op<T>(std::move(out), {a, b}, [outer, ca, cb](Node<T>& n) {
        for (size_t o = 0; o < outer; ++o) {
            if (n.parents[0]->requires_grad) {
                auto& g = n.parents[0]->grad_ref();
                const T* src = n.grad.data.data() + o * (ca + cb);
                T* dst = g.data.data() + o * ca;
                for (size_t i = 0; i < ca; ++i) dst[i] += src[i];
            }
            if (n.parents[1]->requires_grad) {
                auto& g = n.parents[1]->grad_ref();
                const T* src = n.grad.data.data() + o * (ca + cb) + ca;
                T* dst = g.data.data() + o * cb;
                for (size_t i = 0; i < cb; ++i) dst[i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const size_t n = x.val().numel();
    T s = T(0);
    for (T v : x.val().data) s += v;
    Tensor<T> out({1});
    out.data[0] = s / static_cast<T>(n);
    return make_op<T>(std::move(out), {x}, [n](Node<T>& node) {
        if (!node.parents[0]->requires_grad) return;
        auto& g = node.parents[0]->grad_ref();
        const T gv = node.grad.data[0] / static_cast<T>(n);
        for (size_t i = 0; i < g.numel(); ++i) g.data[i] += gv;
    });
}

// mean over the last dim, replicated back to the input shape
template <typename T>
Var<T> lastdim_mean_bcast(const Var<T>& x) {
    const int N = x.val().shape.back();
    const size_t rows = x.val().numel() / static_cast<size_t>(N);
    Tensor<T> out(x.val().shape);
    for (size_t r = 0; r < rows; ++r) {
        T s = T(0);
        const T* in = x.val().data.data() + r * N;
        for (int j = 0; j < N; ++j) s += in[j];
        s /= static_cast<T>(N);
        T* o = out.data.data() + r * N;
        for (int j = 0; j < N; ++j) o[j] = s;
    }
    return make_op<T>(std::move(out), {x}, [N, rows](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (size_t r = 0; r < rows; ++r) {
            T s = T(0);
            const T* gr = n.grad.data.data() + r * N;
            for (int j = 0; j < N; ++j) s += gr[j];
            s /= static_cast<T>(N);
            T* go = g.data.data() + r * N;
            for (int j = 0; j < N; ++j) go[j] += s;
        }
    });
}

// per-(sample, group) mean over NCHW, replicated back
template <typename T>
Var<T> group_mean_bcast(const Var<T>& x, int groups) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4 || sh[1] % groups != 0) throw ShapeError("group_mean_bcast: bad shape/groups");
    const int N = sh[0], C = sh[1], HW = sh[2] * sh[3];
    const int cpg = C / groups;
    const size_t gsz = static_cast<size_t>(cpg) * HW;
    Tensor<T> out(sh);
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const size_t base = (static_cast<size_t>(n) * C + static_cast<size_t>(g) * cpg) * HW;
            T s = T(0);
            for (size_t i = 0; i < gsz; ++i) s += x.val().data[base + i];
            s /= static_cast<T>(gsz);
            for (size_t i = 0; i < gsz; ++i) out.data[base + i] = s;
        }
    return make_op<T>(std::move(out), {x}, [N, C, HW, cpg, groups, gsz](Node<T>& node) {
        if (!node.parents[0]->requires_grad) return;
        auto& gr = node.parents[0]->grad_ref();
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const size_t base = (static_cast<size_t>(n) * C + static_cast<size_t>(g) * cpg) * HW;
                T s = T(0);
                for (size_t i = 0; i < gsz; ++i) s += node.grad.data[base + i];
                s /= static_cast<T>(gsz);
                for (size_t i = 0; i < gsz; ++i) gr.data[base + i] += s;
            }
    });
}

// out[n,c,h,w] = x[n,c,h,w] * gamma[c] + beta[c]
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4) throw ShapeError("channel_affine: expected NCHW");
    const int N = sh[0], C = sh[1], HW = sh[2] * sh[3];
    if (gamma.val().numel() != static_cast<size_t>(C) || beta.val().numel() != static_cast<size_t>(C))
        throw ShapeError("channel_affine: gamma/beta must be (C)");
    Tensor<T> out(sh);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * HW;
            const T gm = gamma.val().data[static_cast<size_t>(c)];
            const T bt = beta.val().data[static_cast<size_t>(c)];
            for (int i = 0; i < HW; ++i) out.data[base + i] = x.val().data[base + i] * gm + bt;
        }
    return make_op<T>(std::move(out), {x, gamma, beta}, [N, C, HW](Node<T>& node) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * HW;
                if (node.parents[0]->requires_grad) {
                    auto& gx = node.parents[0]->grad_ref();
                    const T gm = node.parents[1]->value.data[static_cast<size_t>(c)];
                    for (int i = 0; i < HW; ++i) gx.data[base + i] += node.grad.data[base + i] * gm;
                }
                if (node.parents[1]->requires_grad) {
                    auto& gg = node.parents[1]->grad_ref();
                    T s = T(0);
                    for (int i = 0; i < HW; ++i)
                        s += node.grad.data[base + i] * node.parents[0]->value.data[base + i];
                    gg.data[static_cast<size_t>(c)] += s;
                }
                if (node.parents[2]->requires_grad) {
                    auto& gb = node.parents[2]->grad_ref();
                    T s = T(0);
                    for (int i = 0; i < HW; ++i) s += node.grad.data[base + i];
                    gb.data[static_cast<size_t>(c)] += s;
                }
            }
    });
}

// out[..., j] = x[..., j] * gamma[j] + beta[j] (token/layer-norm affine)
template <typename T>
Var<T> affine_last(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    const int N = x.val().shape.back();
    if (gamma.val().numel() != static_cast<size_t>(N) || beta.val().numel() != static_cast<size_t>(N))
        throw ShapeError("affine_last: gamma/beta must match last dim");
    const size_t rows = x.val().numel() / static_cast<size_t>(N);
    Tensor<T> out(x.val().shape);
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < N; ++j)
            out.data[r * N + j] =
                x.val().data[r * N + j] * gamma.val().data[static_cast<size_t>(j)] + beta.val().data[static_cast<size_t>(j)];
    return make_op<T>(std::move(out), {x, gamma, beta}, [N, rows](Node<T>& node) {
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < N; ++j) {
                const size_t i = r * N + j;
                if (node.parents[0]->requires_grad)
                    node.parents[0]->grad_ref().data[i] +=
                        node.grad.data[i] * node.parents[1]->value.data[static_cast<size_t>(j)];
                if (node.parents[1]->requires_grad)
                    node.parents[1]->grad_ref().data[static_cast<size_t>(j)] +=
                        node.grad.data[i] * node.parents[0]->value.data[i];
                if (node.parents[2]->requires_grad)
                    node.parents[2]->grad_ref().data[static_cast<size_t>(j)] += node.grad.data[i];
            }
    });
}

// x NCHW + per-sample channel vector v (N,C), broadcast over H,W.
// Carries time-embedding injections into ResBlocks.
template <typename T>
Var<T> add_chan(const Var<T>& x, const Var<T>& v) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4 || v.val().ndim() != 2 || v.val().dim(0) != sh[0] || v.val().dim(1) != sh[1])
        throw ShapeError("add_chan: need NCHW + (N,C)");
    const int N = sh[0], C = sh[1], HW = sh[2] * sh[3];
    Tensor<T> out(sh);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * HW;
            const T vv = v.val().at(n, c);
            for (int i = 0; i < HW; ++i) out.data[base + i] = x.val().data[base + i] + vv;
        }
    return make_op<T>(std::move(out), {x, v}, [N, C, HW](Node<T>& node) {
        if (node.parents[0]->requires_grad) {
            auto& g = node.parents[0]->grad_ref();
            for (size_t i = 0; i < g.numel(); ++i) g.data[i] += node.grad.data[i];
        }
        if (node.parents[1]->requires_grad) {
            auto& g = node.parents[1]->grad_ref();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t base = (static_cast<size_t>(n) * C + c) * HW;
                    T s = T(0);
                    for (int i = 0; i < HW; ++i) s += node.grad.data[base + i];
                    g.at(n, c) += s;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// spatial ops

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int pad) {
    const auto& xs = x.val().shape;
    const auto& ws = w.val().shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw ShapeError("conv2d: need NCHW x (Co,Ci,kh,kw) with matching Ci, got " + x.val().shape_str() +
                         " and " + w.val().shape_str());
    const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
    const int Co = ws[0], kh = ws[2], kw = ws[3];
    const int OH = H + 2 * pad - kh + 1, OW = W + 2 * pad - kw + 1;
    if (OH < 1 || OW < 1) throw ShapeError("conv2d: kernel larger than padded input");
    const bool has_bias = bias.defined();
    if (has_bias && bias.val().numel() != static_cast<size_t>(Co)) throw ShapeError("conv2d: bias must be (Co)");

    Tensor<T> out({N, Co, OH, OW});
    const T* X = x.val().data.data();
    const T* Wt = w.val().data.data();
    T* O = out.data.data();
    // each (n, co) output plane is owned by exactly one thread
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * Co; ++nc) {
        const int n = nc / Co, co = nc % Co;
        T* oplane = O + (static_cast<size_t>(n) * Co + co) * OH * OW;
        if (has_bias) {
            const T b = bias.val().data[static_cast<size_t>(co)];
            for (int i = 0; i < OH * OW; ++i) oplane[i] = b;
        }
        for (int ci = 0; ci < Ci; ++ci) {
            const T* xplane = X + (static_cast<size_t>(n) * Ci + ci) * H * W;
            const T* wk = Wt + ((static_cast<size_t>(co) * Ci + ci) * kh) * kw;
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx) {
                    const T wv = wk[static_cast<size_t>(dy) * kw + dx];
                    if (wv == T(0)) continue;
                    for (int oh = 0; oh < OH; ++oh) {
                        const int ih = oh + dy - pad;
                        if (ih < 0 || ih >= H) continue;
                        const T* xrow = xplane + static_cast<size_t>(ih) * W;
                        T* orow = oplane + static_cast<size_t>(oh) * OW;
                        const int lo = std::max(0, pad - dx);
                        const int hi = std::min(OW, W + pad - dx);
                        for (int ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow + dx - pad];
                    }
                }
        }
    }
    std::vector<Var<T>> parents = has_bias ? std::vector<Var<T>>{x, w, bias} : std::vector<Var<T>>{x, w};
    return make_op<T>(std::move(out), std::move(parents),
                      [N, Ci, H, W, Co, kh, kw, OH, OW, pad, has_bias](Node<T>& node) {
        const T* G = node.grad.data.data();
        const T* X = node.parents[0]->value.data.data();
        const T* Wt = node.parents[1]->value.data.data();
        if (node.parents[0]->requires_grad) {
            T* dX = node.parents[0]->grad_ref().data.data();
            // each (n, ci) input-gradient plane is owned by one thread
#pragma omp parallel for schedule(static)
            for (int nci = 0; nci < N * Ci; ++nci) {
                const int n = nci / Ci, ci = nci % Ci;
                T* dxplane = dX + (static_cast<size_t>(n) * Ci + ci) * H * W;
                for (int co = 0; co < Co; ++co) {
                    const T* gplane = G + (static_cast<size_t>(n) * Co + co) * OH * OW;
                    const T* wk = Wt + ((static_cast<size_t>(co) * Ci + ci) * kh) * kw;
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            const T wv = wk[static_cast<size_t>(dy) * kw + dx];
                            if (wv == T(0)) continue;
                            for (int oh = 0; oh < OH; ++oh) {
                                const int ih = oh + dy - pad;
                                if (ih < 0 || ih >= H) continue;
                                T* dxrow = dxplane + static_cast<size_t>(ih) * W;
                                const T* grow = gplane + static_cast<size_t>(oh) * OW;
                                const int lo = std::max(0, pad - dx);
                                const int hi = std::min(OW, W + pad - dx);
                                for (int ow = lo; ow < hi; ++ow) dxrow[ow + dx - pad] += wv * grow[ow];
                            }
                        }
                }
            }
        }
        if (node.parents[1]->requires_grad) {
            T* dW = node.parents[1]->grad_ref().data.data();
#pragma omp parallel for schedule(static)
            for (int co = 0; co < Co; ++co)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            T acc = T(0);
                            for (int n = 0; n < N; ++n) {
                                const T* gplane = G + (static_cast<size_t>(n) * Co + co) * OH * OW;
                                const T* xplane = X + (static_cast<size_t>(n) * Ci + ci) * H * W;
                                for (int oh = 0; oh < OH; ++oh) {
                                    const int ih = oh + dy - pad;
                                    if (ih < 0 || ih >= H) continue;
                                    const T* grow = gplane + static_cast<size_t>(oh) * OW;
                                    const T* xrow = xplane + static_cast<size_t>(ih) * W;
                                    const int lo = std::max(0, pad - dx);
                                    const int hi = std::min(OW, W + pad - dx);
                                    for (int ow = lo; ow < hi; ++ow) acc += grow[ow] * xrow[ow + dx - pad];
                                }
                            }
                            dW[((static_cast<size_t>(co) * Ci + ci) * kh + dy) * kw + dx] += acc;
                        }
        }
        if (has_bias && node.parents[2]->requires_grad) {
            auto& db = node.parents[2]->grad_ref();
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Co; ++co) {
                    const T* gplane = G + (static_cast<size_t>(n) * Co + co) * OH * OW;
                    T s = T(0);
                    for (int i = 0; i < OH * OW; ++i) s += gplane[i];
                    db.data[static_cast<size_t>(co)] += s;
                }
        }
    });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0) throw ShapeError("avg_pool2: need even NCHW");
    const int N = sh[0], C = sh[1], H = sh[2], W = sh[3];
    Tensor<T> out({N, C, H / 2, W / 2});
    for (int nc = 0; nc < N * C; ++nc) {
        const T* in = x.val().data.data() + static_cast<size_t>(nc) * H * W;
        T* o = out.data.data() + static_cast<size_t>(nc) * (H / 2) * (W / 2);
        for (int i = 0; i < H / 2; ++i)
            for (int j = 0; j < W / 2; ++j)
                o[static_cast<size_t>(i) * (W / 2) + j] =
                    (in[static_cast<size_t>(2 * i) * W + 2 * j] + in[static_cast<size_t>(2 * i) * W + 2 * j + 1] +
                     in[static_cast<size_t>(2 * i + 1) * W + 2 * j] +
                     in[static_cast<size_t>(2 * i + 1) * W + 2 * j + 1]) /
                    T(4);
    }
    return make_op<T>(std::move(out), {x}, [N, C, H, W](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (int nc = 0; nc < N * C; ++nc) {
            T* gi = g.data.data() + static_cast<size_t>(nc) * H * W;
            const T* go = n.grad.data.data() + static_cast<size_t>(nc) * (H / 2) * (W / 2);
            for (int i = 0; i < H / 2; ++i)
                for (int j = 0; j < W / 2; ++j) {
                    const T v = go[static_cast<size_t>(i) * (W / 2) + j] / T(4);
                    gi[static_cast<size_t>(2 * i) * W + 2 * j] += v;
                    gi[static_cast<size_t>(2 * i) * W + 2 * j + 1] += v;
                    gi[static_cast<size_t>(2 * i + 1) * W + 2 * j] += v;
                    gi[static_cast<size_t>(2 * i + 1) * W + 2 * j + 1] += v;
                }
        }
    });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4) throw ShapeError("upsample_nearest2: need NCHW");
    const int N = sh[0], C = sh[1], H = sh[2], W = sh[3];
    Tensor<T> out({N, C, H * 2, W * 2});
    for (int nc = 0; nc < N * C; ++nc) {
        const T* in = x.val().data.data() + static_cast<size_t>(nc) * H * W;
        T* o = out.data.data() + static_cast<size_t>(nc) * 4 * H * W;
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j)
                o[static_cast<size_t>(i) * 2 * W + j] = in[static_cast<size_t>(i / 2) * W + j / 2];
    }
    return make_op<T>(std::move(out), {x}, [N, C, H, W](Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_ref();
        for (int nc = 0; nc < N * C; ++nc) {
            T* gi = g.data.data() + static_cast<size_t>(nc) * H * W;
            const T* go = n.grad.data.data() + static_cast<size_t>(nc) * 4 * H * W;
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j)
                    gi[static_cast<size_t>(i / 2) * W + j / 2] += go[static_cast<size_t>(i) * 2 * W + j];
        }
    });
}

// ---------------------------------------------------------------------------
// composites

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias = Var<T>()) {
    Var<T> h;
    if (x.val().ndim() == 2) {
        h = matmul(x, w);
    } else {
        const auto sh = x.val().shape;
        int rows = 1;
        for (size_t i = 0; i + 1 < sh.size(); ++i) rows *= sh[i];
        auto flat = reshape(x, {rows, sh.back()});
        h = matmul(flat, w);
        std::vector<int> osh(sh.begin(), sh.end() - 1);
        osh.push_back(w.val().dim(1));
        h = reshape(h, osh);
    }
    if (bias.defined()) h = add_bias_last(h, bias);
    return h;
}

// Reference compositions, kept as an independent route for the fused
// implementations below to be checked against.
template <typename T>
Var<T> layer_norm_composed(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    auto mu = lastdim_mean_bcast(x);
    auto xc = sub(x, mu);
    auto var = lastdim_mean_bcast(mul(xc, xc));
    auto inv = rsqrt_eps(var, eps);
    return affine_last(mul(xc, inv), gamma, beta);
}

template <typename T>
Var<T> group_norm_composed(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta,
                           T eps = T(1e-5)) {
    auto mu = group_mean_bcast(x, groups);
    auto xc = sub(x, mu);
    auto var = group_mean_bcast(mul(xc, xc), groups);
    auto inv = rsqrt_eps(var, eps);
    return channel_affine(mul(xc, inv), gamma, beta);
}

namespace detail {

// Shared normalization kernel: `blocks` contiguous-slice views, each
// normalized over `span` elements; affine indexed by a caller-provided map.
// dx = inv * (dy*gamma - mean(dy*gamma) - xhat * mean(dy*gamma * xhat))
template <typename T, typename AffineIndex>
void norm_backward(Node<T>& n, size_t blocks, size_t span, const Tensor<T>& inv_store,
                   const Tensor<T>& xhat_store, AffineIndex&& affine_of) {
    const bool need_x = n.parents[0]->requires_grad;
    const bool need_g = n.parents[1]->requires_grad;
    const bool need_b = n.parents[2]->requires_grad;
    const auto& gamma = n.parents[1]->value;
    for (size_t blk = 0; blk < blocks; ++blk) {
        const size_t base = blk * span;
        const T inv = inv_store.data[blk];
        T sum_dyg = 0, sum_dyg_xhat = 0;
        for (size_t i = 0; i < span; ++i) {
            const size_t idx = base + i;
            const T dy = n.grad.data[idx];
            const T xh = xhat_store.data[idx];
            const size_t a = affine_of(idx);
            const T dyg = dy * gamma.data[a];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xh;
            if (need_g) n.parents[1]->grad_ref().data[a] += dy * xh;
            if (need_b) n.parents[2]->grad_ref().data[a] += dy;
        }
        if (!need_x) continue;
        const T mean_dyg = sum_dyg / static_cast<T>(span);
        const T mean_dyg_xhat = sum_dyg_xhat / static_cast<T>(span);
        auto& gx = n.parents[0]->grad_ref();
        for (size_t i = 0; i < span; ++i) {
            const size_t idx = base + i;
            const T dyg = n.grad.data[idx] * gamma.data[affine_of(idx)];
            gx.data[idx] += inv * (dyg - mean_dyg - xhat_store.data[idx] * mean_dyg_xhat);
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int N = x.val().shape.back();
    if (gamma.val().numel() != static_cast<size_t>(N) || beta.val().numel() != static_cast<size_t>(N))
        throw ShapeError("layer_norm: gamma/beta must match last dim");
    const size_t rows = x.val().numel() / static_cast<size_t>(N);
    Tensor<T> out(x.val().shape);
    auto inv_store = std::make_shared<Tensor<T>>(std::vector<int>{static_cast<int>(rows)});
    auto xhat_store = std::make_shared<Tensor<T>>(x.val().shape);
    for (size_t r = 0; r < rows; ++r) {
        const T* in = x.val().data.data() + r * N;
        T mu = 0;
        for (int j = 0; j < N; ++j) mu += in[j];
        mu /= static_cast<T>(N);
        T var = 0;
        for (int j = 0; j < N; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(N);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_store->data[r] = inv;
        for (int j = 0; j < N; ++j) {
            const T xh = (in[j] - mu) * inv;
            xhat_store->data[r * N + j] = xh;
            out.data[r * N + j] = xh * gamma.val().data[static_cast<size_t>(j)] +
                                  beta.val().data[static_cast<size_t>(j)];
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta}, [rows, N, inv_store, xhat_store](Node<T>& n) {
        detail::norm_backward(n, rows, static_cast<size_t>(N), *inv_store, *xhat_store,
                              [N](size_t idx) { return idx % static_cast<size_t>(N); });
    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4 || sh[1] % groups != 0) throw ShapeError("group_norm: bad shape/groups");
    const int N = sh[0], C = sh[1], HW = sh[2] * sh[3];
    if (gamma.val().numel() != static_cast<size_t>(C) || beta.val().numel() != static_cast<size_t>(C))
        throw ShapeError("group_norm: gamma/beta must be (C)");
    const int cpg = C / groups;
    const size_t span = static_cast<size_t>(cpg) * HW;
    const size_t blocks = static_cast<size_t>(N) * groups;

    Tensor<T> out(sh);
    auto inv_store = std::make_shared<Tensor<T>>(std::vector<int>{static_cast<int>(blocks)});
    auto xhat_store = std::make_shared<Tensor<T>>(sh);
    for (size_t blk = 0; blk < blocks; ++blk) {
        const size_t base = blk * span;
        const T* in = x.val().data.data() + base;
        T mu = 0;
        for (size_t i = 0; i < span; ++i) mu += in[i];
        mu /= static_cast<T>(span);
        T var = 0;
        for (size_t i = 0; i < span; ++i) var += (in[i] - mu) * (in[i] - mu);
        var /= static_cast<T>(span);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_store->data[blk] = inv;
        const int g = static_cast<int>(blk % static_cast<size_t>(groups));
        for (size_t i = 0; i < span; ++i) {
            const T xh = (in[i] - mu) * inv;
            xhat_store->data[base + i] = xh;
            const int c = g * cpg + static_cast<int>(i / static_cast<size_t>(HW));
            out.data[base + i] = xh * gamma.val().data[static_cast<size_t>(c)] +
                                 beta.val().data[static_cast<size_t>(c)];
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [blocks, span, HW, cpg, groups, inv_store, xhat_store](Node<T>& n) {
        detail::norm_backward(n, blocks, span, *inv_store, *xhat_store, [=](size_t idx) {
            const size_t blk = idx / span;
            const int g = static_cast<int>(blk % static_cast<size_t>(groups));
            return static_cast<size_t>(g * cpg) + (idx % span) / static_cast<size_t>(HW);
        });
    });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace ccad::ag
