#pragma once

#include <array>

#include "segface/autograd.hpp"
#include "segface/param.hpp"

namespace segface {

struct BackboneConfig {
    std::array<int64_t, 4> channels{32, 64, 128, 256};
    int64_t blocks_per_stage = 2;
    uint64_t seed = 7;

    void validate() const {
        for (int64_t c : channels) {
            if (c <= 0) throw ConfigError("backbone channels must be positive");
        }
        if (blocks_per_stage < 0) throw ConfigError("blocks_per_stage must be >= 0");
    }
};

// Four feature maps at strides 4/8/16/32 relative to the input.
template <typename T>
struct FeaturePyramid {
    std::array<Var<T>, 4> levels;
    static constexpr std::array<int64_t, 4> strides{4, 8, 16, 32};
};

namespace detail {
template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& prefix, int64_t cout, int64_t cin, int64_t k, Rng& rng) {
    ps.add(prefix + ".w", he_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
    ps.add(prefix + ".b", Tensor<T>::zeros({cout}));
}
}  // namespace detail

// Small trainable conv pyramid standing in for the image encoder. Stage 0
// reaches stride 4 through two stride-2 convs; each later stage downsamples
// once. Every conv is 3x3 with relu.
template <typename T>
void init_backbone(ParamSet<T>& ps, const BackboneConfig& cfg) {
    cfg.validate();
    Rng rng(hash2(cfg.seed, 0xBACB07E));
    detail::add_conv(ps, "backbone.stage0.down0", cfg.channels[0], 3, 3, rng);
    detail::add_conv(ps, "backbone.stage0.down1", cfg.channels[0], cfg.channels[0], 3, rng);
    for (int64_t k = 0; k < cfg.blocks_per_stage; ++k) {
        detail::add_conv(ps, cat("backbone.stage0.block", k), cfg.channels[0], cfg.channels[0], 3, rng);
    }
    for (int s = 1; s < 4; ++s) {
        detail::add_conv(ps, cat("backbone.stage", s, ".down0"), cfg.channels[s], cfg.channels[s - 1], 3, rng);
        for (int64_t k = 0; k < cfg.blocks_per_stage; ++k) {
            detail::add_conv(ps, cat("backbone.stage", s, ".block", k), cfg.channels[s], cfg.channels[s], 3, rng);
        }
    }
}

template <typename T>
ParamSet<T> init_backbone(const BackboneConfig& cfg) {
    ParamSet<T> ps;
    init_backbone(ps, cfg);
    return ps;
}

template <typename T>
FeaturePyramid<T> forward_pyramid(Binder<T>& params, const Var<T>& images, const BackboneConfig& cfg) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 3) {
        throw ShapeError(cat("forward_pyramid: expected [B,3,H,W] images, got ", shape_str(s)));
    }
    if (s[2] % 32 != 0 || s[3] % 32 != 0) {
        throw ShapeError(cat("forward_pyramid: resolution ", s[2], "x", s[3], " not divisible by 32"));
    }

    auto conv_act = [&](const Var<T>& x, const std::string& prefix, int64_t stride) {
        Var<T> y = conv2d(x, params(prefix + ".w"), params(prefix + ".b"), stride, 1);
        return activation(y, kern::Act::relu);
    };

    FeaturePyramid<T> pyr;
    Var<T> x = conv_act(images, "backbone.stage0.down0", 2);
    x = conv_act(x, "backbone.stage0.down1", 2);
    for (int64_t k = 0; k < cfg.blocks_per_stage; ++k) x = conv_act(x, cat("backbone.stage0.block", k), 1);
    pyr.levels[0] = x;
    for (int s4 = 1; s4 < 4; ++s4) {
        x = conv_act(x, cat("backbone.stage", s4, ".down0"), 2);
        for (int64_t k = 0; k < cfg.blocks_per_stage; ++k) {
            x = conv_act(x, cat("backbone.stage", s4, ".block", k), 1);
        }
        pyr.levels[static_cast<size_t>(s4)] = x;
    }
    return pyr;
}

}  // namespace segface
