#pragma once

#include "segface/autograd.hpp"
#include "segface/param.hpp"

namespace segface {

struct HeadConfig {
    int64_t mask_channels = 32;  // C'' after upscaling

    void validate() const {
        if (mask_channels < 1) throw ConfigError("head mask_channels must be >= 1");
    }
};

template <typename T>
void init_head(ParamSet<T>& ps, int64_t dim, const HeadConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(hash2(seed, 0x4EAD5ULL));
    int64_t mid = dim / 2;
    ps.add("head.up0.w", he_uniform<T>({dim, mid, 2, 2}, dim * 4, rng));
    ps.add("head.up0.b", Tensor<T>::zeros({mid}));
    ps.add("head.up1.w", he_uniform<T>({mid, cfg.mask_channels, 2, 2}, mid * 4, rng));
    ps.add("head.up1.b", Tensor<T>::zeros({cfg.mask_channels}));
    ps.add("head.token_mlp.w0", he_uniform<T>({dim, dim}, dim, rng));
    ps.add("head.token_mlp.b0", Tensor<T>::zeros({dim}));
    ps.add("head.token_mlp.w1", he_uniform<T>({dim, dim}, dim, rng));
    ps.add("head.token_mlp.b1", Tensor<T>::zeros({dim}));
    ps.add("head.token_mlp.w2", he_uniform<T>({dim, cfg.mask_channels}, dim, rng));
    ps.add("head.token_mlp.b2", Tensor<T>::zeros({cfg.mask_channels}));
}

// Two stride-2 kernel-2 transpose convs, gelu between them: the stride-4
// face map comes back to input resolution with C'' channels.
template <typename T>
Var<T> upscale(Binder<T>& params, const Var<T>& fmap) {
    Var<T> u = conv_transpose2d(fmap, params("head.up0.w"), params("head.up0.b"), 2);
    u = activation(u, kern::Act::gelu);
    return conv_transpose2d(u, params("head.up1.w"), params("head.up1.b"), 2);
}

// Per-token channel weights from a 3-layer MLP (hidden = D, gelu), combined
// with the upscaled map by a per-pixel inner product over channels. Each
// class's map reads only its own token.
template <typename T>
Var<T> predict_masks(Binder<T>& params, const Var<T>& u, const Var<T>& tokens) {
    int64_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    Var<T> m = reshape(tokens, {b * n, d});
    m = activation(bias_add(matmul(m, params("head.token_mlp.w0")), params("head.token_mlp.b0")), kern::Act::gelu);
    m = activation(bias_add(matmul(m, params("head.token_mlp.w1")), params("head.token_mlp.b1")), kern::Act::gelu);
    m = bias_add(matmul(m, params("head.token_mlp.w2")), params("head.token_mlp.b2"));
    int64_t c = m.dim(1);
    if (u.dim(1) != c) {
        throw ShapeError(cat("predict_masks: map channels ", u.dim(1), " != token channels ", c));
    }
    return mask_inner_product(u, reshape(m, {b, n, c}));
}

}  // namespace segface
