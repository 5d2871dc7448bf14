#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "segface/kernels.hpp"
#include "segface/param.hpp"
#include "segface/tensor.hpp"

// Reverse-mode tape. Each op computes its forward value eagerly and registers
// a backward closure applying the op's vector-Jacobian products to its
// parents. backward() walks reachable nodes in reverse creation order, which
// is a valid topological order and keeps gradient accumulation deterministic.

namespace segface {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily
    bool requires_grad = false;
    int64_t seq = 0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
    }
};

namespace detail {
template <typename T>
int64_t& node_counter() {
    static int64_t counter = 0;
    return counter;
}
}  // namespace detail

template <typename T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        Var v;
        v.n_ = std::make_shared<Node<T>>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = requires_grad;
        v.n_->seq = ++detail::node_counter<T>();
        return v;
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& val() const { return n_->value; }
    const Shape& shape() const { return n_->value.shape(); }
    int64_t dim(size_t i) const { return n_->value.dim(i); }
    bool requires_grad() const { return n_->requires_grad; }

    Tensor<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
               std::function<void(Node<T>&)> backward) {
    Var<T> v = Var<T>::leaf(std::move(value), false);
    Node<T>& n = *v.node();
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    n.requires_grad = needs;
    n.parents = std::move(parents);
    if (needs) n.backward = std::move(backward);
    return v;
}

// Runs the tape backwards from a scalar root, seeding d(root)/d(root) = 1.
template <typename T>
void backward(const Var<T>& root) {
    if (root.val().numel() != 1) {
        throw ShapeError(cat("backward: root must be scalar, got ", shape_str(root.shape())));
    }
    root.node()->ensure_grad();
    root.node()->grad[0] = T(1);

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node<T>* a, Node<T>* b) { return a->seq > b->seq; });
    for (Node<T>* n : order) {
        if (n->backward && n->requires_grad) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Core ops

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> y = kern::matmul(a.val(), b.val());
    return make_op<T>(std::move(y), {a.node(), b.node()}, [](Node<T>& self) {
        Node<T>& A = *self.parents[0];
        Node<T>& B = *self.parents[1];
        int64_t m = A.value.dim(0), k = A.value.dim(1), p = B.value.dim(1);
        if (A.requires_grad) {
            A.ensure_grad();
            kern::matmul_nt(self.grad.data(), B.value.data(), A.grad.data(), m, p, k, true);
        }
        if (B.requires_grad) {
            B.ensure_grad();
            kern::matmul_tn(A.value.data(), self.grad.data(), B.grad.data(), k, m, p, true);
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> y = a.val();
    y.add_(b.val());
    return make_op<T>(std::move(y), {a.node(), b.node()}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad.add_(self.grad);
            }
        }
    });
}

// x[..., D] + bias[D]
template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& bias) {
    int64_t d = bias.val().numel();
    if (x.shape().back() != d) {
        throw ShapeError(cat("bias_add: last dim ", x.shape().back(), " != bias length ", d));
    }
    Tensor<T> y = x.val();
    int64_t rows = y.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        T* yr = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] += bias.val()[i];
    }
    return make_op<T>(std::move(y), {x.node(), bias.node()}, [d](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        Node<T>& B = *self.parents[1];
        if (X.requires_grad) {
            X.ensure_grad();
            X.grad.add_(self.grad);
        }
        if (B.requires_grad) {
            B.ensure_grad();
            int64_t rows = self.grad.numel() / d;
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = self.grad.data() + r * d;
                for (int64_t i = 0; i < d; ++i) B.grad[i] += gr[i];
            }
        }
    });
}

// x[B, rest...] + y[rest...], y broadcast over axis 0
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y) {
    int64_t inner = y.val().numel();
    if (x.val().numel() % inner != 0 || x.dim(0) != x.val().numel() / inner) {
        throw ShapeError(cat("add_broadcast: ", shape_str(x.shape()), " vs ", shape_str(y.shape())));
    }
    Tensor<T> out = x.val();
    int64_t b = x.dim(0);
    for (int64_t bi = 0; bi < b; ++bi) {
        T* dst = out.data() + bi * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += y.val()[i];
    }
    return make_op<T>(std::move(out), {x.node(), y.node()}, [inner](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        Node<T>& Y = *self.parents[1];
        if (X.requires_grad) {
            X.ensure_grad();
            X.grad.add_(self.grad);
        }
        if (Y.requires_grad) {
            Y.ensure_grad();
            int64_t b = self.grad.numel() / inner;
            for (int64_t bi = 0; bi < b; ++bi) {
                const T* src = self.grad.data() + bi * inner;
                for (int64_t i = 0; i < inner; ++i) Y.grad[i] += src[i];
            }
        }
    });
}

// y[rest...] -> [B, rest...]
template <typename T>
Var<T> broadcast_batch(const Var<T>& y, int64_t b) {
    Shape out_shape = y.shape();
    out_shape.insert(out_shape.begin(), b);
    Tensor<T> out(out_shape);
    int64_t inner = y.val().numel();
    for (int64_t bi = 0; bi < b; ++bi) {
        std::copy(y.val().data(), y.val().data() + inner, out.data() + bi * inner);
    }
    return make_op<T>(std::move(out), {y.node()}, [inner](Node<T>& self) {
        Node<T>& Y = *self.parents[0];
        if (!Y.requires_grad) return;
        Y.ensure_grad();
        int64_t b = self.grad.numel() / inner;
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* src = self.grad.data() + bi * inner;
            for (int64_t i = 0; i < inner; ++i) Y.grad[i] += src[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, double c) {
    Tensor<T> y = x.val();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = static_cast<T>(y[i] * static_cast<T>(c));
    return make_op<T>(std::move(y), {x.node()}, [c](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) X.grad[i] += static_cast<T>(c) * self.grad[i];
    });
}

template <typename T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.shape(), b.shape(), "hadamard");
    Tensor<T> y(a.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.val()[i] * b.val()[i];
    return make_op<T>(std::move(y), {a.node(), b.node()}, [](Node<T>& self) {
        Node<T>& A = *self.parents[0];
        Node<T>& B = *self.parents[1];
        if (A.requires_grad) {
            A.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) A.grad[i] += self.grad[i] * B.value[i];
        }
        if (B.requires_grad) {
            B.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) B.grad[i] += self.grad[i] * A.value[i];
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc = T(0);
    for (int64_t i = 0; i < x.val().numel(); ++i) acc += x.val()[i];
    return make_op<T>(Tensor<T>::scalar(acc), {x.node()}, [](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        T g = self.grad[0];
        for (int64_t i = 0; i < X.grad.numel(); ++i) X.grad[i] += g;
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> y = x.val().reshaped(std::move(shape));
    return make_op<T>(std::move(y), {x.node()}, [](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) X.grad[i] += self.grad[i];
    });
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
void permute_copy(const Tensor<T>& in, const std::vector<int>& perm, Tensor<T>& out, bool accumulate) {
    const Shape& os = out.shape();
    auto in_strides = strides_of(in.shape());
    size_t r = os.size();
    std::vector<int64_t> stride_for_out(r);
    for (size_t i = 0; i < r; ++i) stride_for_out[i] = in_strides[static_cast<size_t>(perm[i])];
    std::vector<int64_t> idx(r, 0);
    int64_t n = in.numel();
    int64_t src = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        if (accumulate) {
            out[flat] += in[src];
        } else {
            out[flat] = in[src];
        }
        for (int64_t axis = static_cast<int64_t>(r) - 1; axis >= 0; --axis) {
            idx[axis]++;
            src += stride_for_out[axis];
            if (idx[axis] < os[axis]) break;
            src -= stride_for_out[axis] * os[axis];
            idx[axis] = 0;
        }
    }
}
}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    if (perm.size() != x.shape().size()) throw ShapeError("permute: rank mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
    Tensor<T> y(out_shape);
    detail::permute_copy(x.val(), perm, y, false);
    return make_op<T>(std::move(y), {x.node()}, [perm](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        // inverse permutation routes the gradient back
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        detail::permute_copy(self.grad, inv, X.grad, true);
    });
}

// Concatenates [B, C_i, H, W] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input");
    int64_t b = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    int64_t ctotal = 0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& x : xs) {
        if (x.shape().size() != 4 || x.dim(0) != b || x.dim(2) != h || x.dim(3) != w) {
            throw ShapeError("concat_channels: mismatched shapes");
        }
        ctotal += x.dim(1);
        parents.push_back(x.node());
    }
    Tensor<T> y({b, ctotal, h, w});
    int64_t plane = h * w;
    for (int64_t bi = 0; bi < b; ++bi) {
        int64_t coff = 0;
        for (const auto& x : xs) {
            int64_t c = x.dim(1);
            std::copy(x.val().data() + bi * c * plane, x.val().data() + (bi + 1) * c * plane,
                      y.data() + (bi * ctotal + coff) * plane);
            coff += c;
        }
    }
    return make_op<T>(std::move(y), std::move(parents), [plane](Node<T>& self) {
        int64_t b = self.value.dim(0);
        int64_t ctotal = self.value.dim(1);
        for (int64_t bi = 0; bi < b; ++bi) {
            int64_t coff = 0;
            for (auto& p : self.parents) {
                int64_t c = p->value.dim(1);
                if (p->requires_grad) {
                    p->ensure_grad();
                    const T* src = self.grad.data() + (bi * ctotal + coff) * plane;
                    T* dst = p->grad.data() + bi * c * plane;
                    for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
                coff += c;
            }
        }
    });
}

template <typename T>
Var<T> activation(const Var<T>& x, kern::Act kind) {
    Tensor<T> y = kern::activation(x.val(), kind);
    return make_op<T>(std::move(y), {x.node()}, [kind](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        Tensor<T> dx = kern::activation_vjp(X.value, self.grad, kind);
        X.grad.add_(dx);
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    auto ctx = std::make_shared<kern::LayerNormCtx<T>>();
    Tensor<T> y = kern::layer_norm(x.val(), gamma.val(), beta.val(), eps, ctx.get());
    return make_op<T>(std::move(y), {x.node(), gamma.node(), beta.node()}, [ctx](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        Node<T>& G = *self.parents[1];
        Node<T>& B = *self.parents[2];
        X.ensure_grad();
        G.ensure_grad();
        B.ensure_grad();
        kern::layer_norm_vjp(*ctx, G.value, self.grad, X.grad, G.grad, B.grad);
    });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
    Tensor<T> p = kern::softmax(x.val(), axis);
    return make_op<T>(std::move(p), {x.node()}, [axis](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        Tensor<T> dx = kern::softmax_vjp(self.value, self.grad, axis);
        X.grad.add_(dx);
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int64_t stride, int64_t pad) {
    Tensor<T> y = kern::conv2d(x.val(), w.val(), bias.val(), stride, pad);
    return make_op<T>(std::move(y), {x.node(), w.node(), bias.node()}, [stride, pad](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        Node<T>& W = *self.parents[1];
        Node<T>& B = *self.parents[2];
        if (X.requires_grad) X.ensure_grad();
        if (W.requires_grad) W.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        kern::conv2d_vjp(X.value, W.value, stride, pad, self.grad, X.requires_grad ? &X.grad : nullptr,
                         W.requires_grad ? &W.grad : nullptr, B.requires_grad ? &B.grad : nullptr);
    });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int64_t stride) {
    Tensor<T> y = kern::conv_transpose2d(x.val(), w.val(), bias.val(), stride);
    return make_op<T>(std::move(y), {x.node(), w.node(), bias.node()}, [stride](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        Node<T>& W = *self.parents[1];
        Node<T>& B = *self.parents[2];
        if (X.requires_grad) X.ensure_grad();
        if (W.requires_grad) W.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        kern::conv_transpose2d_vjp(X.value, W.value, stride, self.grad, X.requires_grad ? &X.grad : nullptr,
                                   W.requires_grad ? &W.grad : nullptr, B.requires_grad ? &B.grad : nullptr);
    });
}

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int64_t out_h, int64_t out_w) {
    Tensor<T> y = kern::bilinear_resize(x.val(), out_h, out_w);
    return make_op<T>(std::move(y), {x.node()}, [](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        kern::bilinear_resize_vjp(X.value.shape(), self.grad, X.grad);
    });
}

// Scaled dot-product attention over [B, H, L, dh] slices. `canonical` selects
// order-invariant reductions along the key axis (used when keys are class
// tokens). `probs_out`, when set, receives the post-softmax attention maps
// with shape [B, H, Lq, Lk].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, bool canonical = false,
                 Tensor<T>* probs_out = nullptr) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    if (qs.size() != 4 || ks.size() != 4 || qs[0] != ks[0] || qs[1] != ks[1] || qs[3] != ks[3]) {
        throw ShapeError(cat("attention: bad shapes ", shape_str(qs), " vs ", shape_str(ks)));
    }
    check_same_shape(k.shape(), v.shape(), "attention k/v");
    int64_t b = qs[0], nh = qs[1], lq = qs[2], lk = ks[2], dh = qs[3];
    T sc = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));

    auto probs = std::make_shared<Tensor<T>>(Shape{b, nh, lq, lk});
    Tensor<T> out({b, nh, lq, dh});
    std::vector<T> srow(static_cast<size_t>(lk)), scratch, terms(static_cast<size_t>(lk));
    for (int64_t bh = 0; bh < b * nh; ++bh) {
        const T* qs_ = q.val().data() + bh * lq * dh;
        const T* ks_ = k.val().data() + bh * lk * dh;
        const T* vs_ = v.val().data() + bh * lk * dh;
        T* ps_ = probs->data() + bh * lq * lk;
        T* os_ = out.data() + bh * lq * dh;
        for (int64_t i = 0; i < lq; ++i) {
            const T* qrow = qs_ + i * dh;
            for (int64_t j = 0; j < lk; ++j) {
                const T* krow = ks_ + j * dh;
                T acc = T(0);
                for (int64_t d = 0; d < dh; ++d) acc += qrow[d] * krow[d];
                srow[static_cast<size_t>(j)] = acc * sc;
            }
            T* prow = ps_ + i * lk;
            kern::softmax_row(srow.data(), prow, lk, canonical, scratch);
            T* orow = os_ + i * dh;
            if (canonical) {
                for (int64_t d = 0; d < dh; ++d) {
                    for (int64_t j = 0; j < lk; ++j) terms[static_cast<size_t>(j)] = prow[j] * vs_[j * dh + d];
                    orow[d] = kern::sum_sorted(terms);
                }
            } else {
                std::fill(orow, orow + dh, T(0));
                for (int64_t j = 0; j < lk; ++j) {
                    T pj = prow[j];
                    const T* vrow = vs_ + j * dh;
                    for (int64_t d = 0; d < dh; ++d) orow[d] += pj * vrow[d];
                }
            }
        }
    }
    if (probs_out) *probs_out = *probs;

    return make_op<T>(std::move(out), {q.node(), k.node(), v.node()}, [probs, sc](Node<T>& self) {
        Node<T>& Q = *self.parents[0];
        Node<T>& K = *self.parents[1];
        Node<T>& V = *self.parents[2];
        int64_t b = Q.value.dim(0), nh = Q.value.dim(1), lq = Q.value.dim(2), dh = Q.value.dim(3);
        int64_t lk = K.value.dim(2);
        if (Q.requires_grad) Q.ensure_grad();
        if (K.requires_grad) K.ensure_grad();
        if (V.requires_grad) V.ensure_grad();

        std::vector<T> dp(static_cast<size_t>(lq * lk)), ds(static_cast<size_t>(lq * lk));
        for (int64_t bh = 0; bh < b * nh; ++bh) {
            const T* qv = Q.value.data() + bh * lq * dh;
            const T* kv = K.value.data() + bh * lk * dh;
            const T* vv = V.value.data() + bh * lk * dh;
            const T* pv = probs->data() + bh * lq * lk;
            const T* go = self.grad.data() + bh * lq * dh;
            if (V.requires_grad) {
                kern::matmul_tn(pv, go, V.grad.data() + bh * lk * dh, lk, lq, dh, true);
            }
            if (Q.requires_grad || K.requires_grad) {
                kern::matmul_nt(go, vv, dp.data(), lq, dh, lk);
                for (int64_t i = 0; i < lq; ++i) {
                    kern::softmax_row_vjp(pv + i * lk, dp.data() + i * lk, ds.data() + i * lk, lk);
                    for (int64_t j = 0; j < lk; ++j) ds[static_cast<size_t>(i * lk + j)] *= sc;
                }
                if (Q.requires_grad) {
                    kern::matmul_nn(ds.data(), kv, Q.grad.data() + bh * lq * dh, lq, lk, dh, true);
                }
                if (K.requires_grad) {
                    kern::matmul_tn(ds.data(), qv, K.grad.data() + bh * lk * dh, lk, lq, dh, true);
                }
            }
        }
    });
}

// Per-pixel inner product between a feature map and per-class channel
// weights: out[b,i,h,w] = sum_c u[b,c,h,w] * m[b,i,c].
template <typename T>
Var<T> mask_inner_product(const Var<T>& u, const Var<T>& m) {
    if (u.shape().size() != 4 || m.shape().size() != 3 || u.dim(0) != m.dim(0) || u.dim(1) != m.dim(2)) {
        throw ShapeError(cat("mask_inner_product: ", shape_str(u.shape()), " vs ", shape_str(m.shape())));
    }
    int64_t b = u.dim(0), c = u.dim(1), h = u.dim(2), w = u.dim(3), n = m.dim(1);
    int64_t plane = h * w;
    Tensor<T> y({b, n, h, w});
    // per image: y_b[N x HW] = m_b[N x C] * u_b[C x HW]
    for (int64_t bi = 0; bi < b; ++bi) {
        kern::matmul_nn(m.val().data() + bi * n * c, u.val().data() + bi * c * plane,
                        y.data() + bi * n * plane, n, c, plane);
    }
    return make_op<T>(std::move(y), {u.node(), m.node()}, [](Node<T>& self) {
        Node<T>& U = *self.parents[0];
        Node<T>& M = *self.parents[1];
        int64_t b = U.value.dim(0), c = U.value.dim(1), plane = U.value.dim(2) * U.value.dim(3);
        int64_t n = M.value.dim(1);
        if (U.requires_grad) U.ensure_grad();
        if (M.requires_grad) M.ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* g = self.grad.data() + bi * n * plane;
            if (U.requires_grad) {
                kern::matmul_tn(M.value.data() + bi * n * c, g, U.grad.data() + bi * c * plane, c, n, plane, true);
            }
            if (M.requires_grad) {
                kern::matmul_nt(g, U.value.data() + bi * c * plane, M.grad.data() + bi * n * c, n, plane, c, true);
            }
        }
    });
}

// Zeroes row `row` along axis 1 of [B, N, D]; inspection-mode intervention.
template <typename T>
Var<T> zero_row(const Var<T>& x, int64_t row) {
    if (x.shape().size() != 3 || row < 0 || row >= x.dim(1)) {
        throw ShapeError(cat("zero_row: row ", row, " invalid for ", shape_str(x.shape())));
    }
    int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    Tensor<T> y = x.val();
    for (int64_t bi = 0; bi < b; ++bi) {
        T* dst = y.data() + (bi * n + row) * d;
        std::fill(dst, dst + d, T(0));
    }
    return make_op<T>(std::move(y), {x.node()}, [row](Node<T>& self) {
        Node<T>& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        int64_t b = X.value.dim(0), n = X.value.dim(1), d = X.value.dim(2);
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t ni = 0; ni < n; ++ni) {
                if (ni == row) continue;
                const T* src = self.grad.data() + (bi * n + ni) * d;
                T* dst = X.grad.data() + (bi * n + ni) * d;
                for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Parameter binding: creates leaf Vars for parameters on demand and routes
// gradients back into the caller-owned Parameter::grad buffers.

template <typename T>
class Binder {
public:
    explicit Binder(ParamSet<T>& params) : params_(&params) {}

    Var<T> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var<T> v = Var<T>::leaf(params_->get(name).value, true);
        bound_.emplace(name, v);
        return v;
    }

    void collect_grads() {
        for (auto& [name, var] : bound_) {
            Node<T>& n = *var.node();
            if (!n.grad.empty()) params_->get(name).grad.add_(n.grad);
        }
    }

    ParamSet<T>& params() { return *params_; }

private:
    ParamSet<T>* params_;
    std::map<std::string, Var<T>> bound_;
};

}  // namespace segface
