#pragma once

#include <cmath>

#include "segface/autograd.hpp"

namespace segface {

template <typename T>
struct MhaWeights {
    Var<T> wq, bq;  // [D,D], [D]
    Var<T> wk, bk;
    Var<T> wv, bv;
    Var<T> wo, bo;
};

namespace detail {

template <typename T>
Var<T> project_heads(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t heads) {
    int64_t bs = x.dim(0), l = x.dim(1), d = x.dim(2);
    Var<T> flat = reshape(x, {bs * l, d});
    Var<T> proj = bias_add(matmul(flat, w), b);
    Var<T> split = reshape(proj, {bs, l, heads, d / heads});
    return permute(split, {0, 2, 1, 3});  // [B, H, L, dh]
}

}  // namespace detail

// Multi-head attention over batched sequences: q [B,Lq,D], k/v [B,Lk,D].
// `canonical` makes reductions along the key axis order-invariant, so that
// permuting key rows permutes nothing else (used when keys are class tokens).
template <typename T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            const MhaWeights<T>& w, int64_t heads, bool canonical = false,
                            Tensor<T>* probs_out = nullptr) {
    if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape().size() != 3) {
        throw ShapeError("multi_head_attention: expected [B, L, D] inputs");
    }
    int64_t d = q.dim(2);
    if (d % heads != 0) {
        throw ConfigError(cat("multi_head_attention: embedding dim ", d, " not divisible by ", heads, " heads"));
    }
    if (k.dim(2) != d || v.dim(2) != d || k.dim(1) != v.dim(1)) {
        throw ShapeError("multi_head_attention: q/k/v dim mismatch");
    }
    int64_t bs = q.dim(0), lq = q.dim(1);

    Var<T> qh = detail::project_heads(q, w.wq, w.bq, heads);
    Var<T> kh = detail::project_heads(k, w.wk, w.bk, heads);
    Var<T> vh = detail::project_heads(v, w.wv, w.bv, heads);

    Var<T> att = attention(qh, kh, vh, canonical, probs_out);  // [B, H, Lq, dh]
    Var<T> merged = reshape(permute(att, {0, 2, 1, 3}), {bs * lq, d});
    Var<T> out = bias_add(matmul(merged, w.wo), w.bo);
    return reshape(out, {bs, lq, d});
}

// Unbatched convenience form matching the core-op contract: q [Lq x D],
// k/v [Lk x D].
template <typename T>
Var<T> multi_head_attention_2d(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                               const MhaWeights<T>& w, int64_t heads, bool canonical = false,
                               Tensor<T>* probs_out = nullptr) {
    Var<T> q3 = reshape(q, {1, q.dim(0), q.dim(1)});
    Var<T> k3 = reshape(k, {1, k.dim(0), k.dim(1)});
    Var<T> v3 = reshape(v, {1, v.dim(0), v.dim(1)});
    Var<T> out = multi_head_attention(q3, k3, v3, w, heads, canonical, probs_out);
    return reshape(out, {out.dim(1), out.dim(2)});
}

}  // namespace segface
