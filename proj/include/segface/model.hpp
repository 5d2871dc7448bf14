#pragma once

#include <string>

#include "segface/backbone.hpp"
#include "segface/decoder.hpp"
#include "segface/fusion.hpp"
#include "segface/head.hpp"

namespace segface {

enum class Variant {
    segface,        // full model
    bypass_fusion,  // only the coarsest pyramid level feeds the decoder
    conv_baseline,  // decoder replaced by a 1x1-conv per-pixel classifier on F
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::segface: return "segface";
        case Variant::bypass_fusion: return "bypass_fusion";
        case Variant::conv_baseline: return "conv_baseline";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "segface") return Variant::segface;
    if (s == "bypass_fusion") return Variant::bypass_fusion;
    if (s == "conv_baseline") return Variant::conv_baseline;
    throw ConfigError(cat("unknown model variant: ", s));
}

struct ModelConfig {
    Variant variant = Variant::segface;
    BackboneConfig backbone;
    DecoderConfig decoder;
    HeadConfig head;
    int64_t num_classes = 10;
    uint64_t seed = 7;

    void validate() const {
        backbone.validate();
        decoder.validate();
        head.validate();
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    }
};

template <typename T>
ParamSet<T> init_model(const ModelConfig& cfg) {
    cfg.validate();
    ParamSet<T> ps;
    BackboneConfig bb = cfg.backbone;
    bb.seed = cfg.seed;
    init_backbone(ps, bb);
    init_fusion(ps, cfg.backbone, cfg.decoder.dim, cfg.seed,
                /*bypass_only=*/cfg.variant == Variant::bypass_fusion);
    if (cfg.variant == Variant::conv_baseline) {
        Rng rng(hash2(cfg.seed, 0xBA5E11ULL));
        ps.add("baseline.classifier.w", he_uniform<T>({cfg.num_classes, cfg.decoder.dim, 1, 1}, cfg.decoder.dim, rng));
        ps.add("baseline.classifier.b", Tensor<T>::zeros({cfg.num_classes}));
    } else {
        init_decoder(ps, cfg.decoder, cfg.num_classes, cfg.seed);
        init_head(ps, cfg.decoder.dim, cfg.head, cfg.seed);
    }
    return ps;
}

// Full forward pass to per-class logits [B, N, H, W].
template <typename T>
Var<T> model_forward(Binder<T>& params, const Var<T>& images, const ModelConfig& cfg,
                     DecoderProbe<T>* probe = nullptr) {
    int64_t h = images.dim(2), w = images.dim(3);
    FeaturePyramid<T> pyr = forward_pyramid(params, images, cfg.backbone);
    Var<T> fused = cfg.variant == Variant::bypass_fusion ? bypass_fuse(pyr, params) : fuse(pyr, params);
    if (cfg.variant == Variant::conv_baseline) {
        Var<T> logits = conv2d(fused, params("baseline.classifier.w"), params("baseline.classifier.b"), 1, 0);
        return bilinear_resize(logits, h, w);
    }
    auto [tokens, fmap] = run_decoder(params, fused, cfg.num_classes, cfg.decoder, probe);
    Var<T> up = upscale(params, fmap);
    return predict_masks(params, up, tokens);
}

template <typename T>
Var<T> model_forward(ParamSet<T>& params, const Tensor<T>& images, const ModelConfig& cfg,
                     DecoderProbe<T>* probe = nullptr) {
    Binder<T> binder(params);
    return model_forward(binder, Var<T>::constant(images), cfg, probe);
}

}  // namespace segface
