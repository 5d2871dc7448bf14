#pragma once

#include "segface/backbone.hpp"

namespace segface {

// MLP fusion: per-level 1x1 projection to a shared channel width, bilinear
// upsample to the level-1 grid, channel concat, 1x1 mix back down. The shared
// width equals the decoder embedding dim so fused tokens feed the decoder
// directly.

template <typename T>
void init_fusion(ParamSet<T>& ps, const BackboneConfig& backbone, int64_t out_channels, uint64_t seed,
                 bool bypass_only = false) {
    Rng rng(hash2(seed, 0xF05107ULL));
    for (int i = 0; i < 4; ++i) {
        Tensor<T> w = he_uniform<T>({out_channels, backbone.channels[static_cast<size_t>(i)], 1, 1},
                                    backbone.channels[static_cast<size_t>(i)], rng);
        if (bypass_only && i != 3) continue;  // rng consumed either way: keeps proj3 init comparable
        ps.add(cat("fusion.proj", i, ".w"), std::move(w));
        ps.add(cat("fusion.proj", i, ".b"), Tensor<T>::zeros({out_channels}));
    }
    if (!bypass_only) {
        ps.add("fusion.mix.w", he_uniform<T>({out_channels, 4 * out_channels, 1, 1}, 4 * out_channels, rng));
        ps.add("fusion.mix.b", Tensor<T>::zeros({out_channels}));
    }
}

template <typename T>
Var<T> fuse(const FeaturePyramid<T>& pyramid, Binder<T>& params) {
    int64_t h1 = pyramid.levels[0].dim(2);
    int64_t w1 = pyramid.levels[0].dim(3);
    std::vector<Var<T>> upsampled;
    for (int i = 0; i < 4; ++i) {
        Var<T> proj = conv2d(pyramid.levels[static_cast<size_t>(i)], params(cat("fusion.proj", i, ".w")),
                             params(cat("fusion.proj", i, ".b")), 1, 0);
        upsampled.push_back(i == 0 ? proj : bilinear_resize(proj, h1, w1));
    }
    Var<T> stacked = concat_channels(upsampled);
    return conv2d(stacked, params("fusion.mix.w"), params("fusion.mix.b"), 1, 0);
}

// Ablation path: only the coarsest level, projected and upsampled. Output
// shape matches fuse().
template <typename T>
Var<T> bypass_fuse(const FeaturePyramid<T>& pyramid, Binder<T>& params) {
    int64_t h1 = pyramid.levels[0].dim(2);
    int64_t w1 = pyramid.levels[0].dim(3);
    Var<T> proj = conv2d(pyramid.levels[3], params("fusion.proj3.w"), params("fusion.proj3.b"), 1, 0);
    return bilinear_resize(proj, h1, w1);
}

}  // namespace segface
