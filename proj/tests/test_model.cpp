#include <gtest/gtest.h>

#include <cmath>

#include "segface/gradcheck.hpp"
#include "segface/model.hpp"

using namespace segface;

namespace {

Tensor<double> rand_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    Rng rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

BackboneConfig tiny_backbone() {
    BackboneConfig cfg;
    cfg.channels = {2, 3, 3, 4};
    cfg.blocks_per_stage = 1;
    cfg.seed = 5;
    return cfg;
}

DecoderConfig tiny_decoder() {
    DecoderConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_hidden = 12;
    cfg.dim = 8;
    return cfg;
}

ModelConfig tiny_model(Variant v = Variant::segface) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.backbone = tiny_backbone();
    cfg.decoder = tiny_decoder();
    cfg.head.mask_channels = 4;
    cfg.num_classes = 4;
    cfg.seed = 11;
    return cfg;
}

template <typename T>
FeaturePyramid<T> pyramid_from(const std::array<Tensor<T>, 4>& levels) {
    FeaturePyramid<T> p;
    for (int i = 0; i < 4; ++i) p.levels[static_cast<size_t>(i)] = Var<T>::constant(levels[static_cast<size_t>(i)]);
    return p;
}

double weighted_reduce_err(ParamSet<double>& ps, const std::function<Var<double>(Binder<double>&)>& out,
                           uint64_t seed, GradCheckOptions opts = {}) {
    auto fn = [&](Binder<double>& b) {
        Var<double> o = out(b);
        return sum(hadamard(o, Var<double>::constant(rand_tensor(o.shape(), seed))));
    };
    return grad_check(ps, fn, opts).max_rel_err;
}

}  // namespace

// ---------------------------------------------------------------------------
// backbone

TEST(Backbone, InitIsDeterministic) {
    BackboneConfig cfg;
    ParamSet<float> a = init_backbone<float>(cfg);
    ParamSet<float> b = init_backbone<float>(cfg);
    ASSERT_EQ(a.size(), b.size());
    auto ita = a.begin();
    auto itb = b.begin();
    for (; ita != a.end(); ++ita, ++itb) {
        EXPECT_EQ(ita->first, itb->first);
        ASSERT_EQ(ita->second.value.numel(), itb->second.value.numel());
        for (int64_t i = 0; i < ita->second.value.numel(); ++i) {
            EXPECT_EQ(ita->second.value[i], itb->second.value[i]);
        }
    }
}

TEST(Backbone, ParameterCountMatchesClosedForm) {
    BackboneConfig cfg;  // defaults: [32,64,128,256], 2 blocks per stage
    ParamSet<float> ps = init_backbone<float>(cfg);
    auto conv_params = [](int64_t cout, int64_t cin) { return cout * cin * 9 + cout; };
    int64_t expected = conv_params(32, 3) + conv_params(32, 32)  // stage0 downs
                       + 2 * conv_params(32, 32)                 // stage0 blocks
                       + conv_params(64, 32) + 2 * conv_params(64, 64)
                       + conv_params(128, 64) + 2 * conv_params(128, 128)
                       + conv_params(256, 128) + 2 * conv_params(256, 256);
    EXPECT_EQ(ps.total_elements(), expected);
}

TEST(Backbone, MinimalConfigForwardSucceeds) {
    BackboneConfig cfg;
    cfg.channels = {1, 1, 1, 1};
    cfg.blocks_per_stage = 1;
    ParamSet<float> ps = init_backbone<float>(cfg);
    Binder<float> b(ps);
    Tensor<float> img({1, 3, 32, 32});
    auto pyr = forward_pyramid(b, Var<float>::constant(img), cfg);
    EXPECT_EQ(pyr.levels[3].shape(), (Shape{1, 1, 1, 1}));
}

TEST(Backbone, DefaultShapesFollowStrideLaw) {
    BackboneConfig cfg;
    ParamSet<float> ps = init_backbone<float>(cfg);
    Binder<float> b(ps);
    Tensor<float> img = rand_tensor({1, 3, 64, 64}, 1).cast<float>();
    auto pyr = forward_pyramid(b, Var<float>::constant(img), cfg);
    EXPECT_EQ(pyr.levels[0].shape(), (Shape{1, 32, 16, 16}));
    EXPECT_EQ(pyr.levels[1].shape(), (Shape{1, 64, 8, 8}));
    EXPECT_EQ(pyr.levels[2].shape(), (Shape{1, 128, 4, 4}));
    EXPECT_EQ(pyr.levels[3].shape(), (Shape{1, 256, 2, 2}));
}

TEST(Backbone, ZeroInputGivesZeroPyramid) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps = init_backbone<float>(cfg);
    Binder<float> b(ps);
    Tensor<float> img({2, 3, 32, 32});
    auto pyr = forward_pyramid(b, Var<float>::constant(img), cfg);
    for (const auto& level : pyr.levels) {
        for (int64_t i = 0; i < level.val().numel(); ++i) EXPECT_EQ(level.val()[i], 0.0f);
    }
}

TEST(Backbone, BatchItemsDoNotInteract) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps = init_backbone<float>(cfg);
    Tensor<float> two = rand_tensor({2, 3, 32, 32}, 7).cast<float>();
    Tensor<float> one({1, 3, 32, 32});
    std::copy(two.data() + two.numel() / 2, two.data() + two.numel(), one.data());

    Binder<float> b1(ps);
    auto pyr2 = forward_pyramid(b1, Var<float>::constant(two), cfg);
    Binder<float> b2(ps);
    auto pyr1 = forward_pyramid(b2, Var<float>::constant(one), cfg);
    for (int lvl = 0; lvl < 4; ++lvl) {
        const auto& big = pyr2.levels[static_cast<size_t>(lvl)].val();
        const auto& small = pyr1.levels[static_cast<size_t>(lvl)].val();
        int64_t half = big.numel() / 2;
        for (int64_t i = 0; i < half; ++i) EXPECT_EQ(big[half + i], small[i]);  // bitwise
    }
}

TEST(Backbone, IndivisibleResolutionRejectedBeforeCompute) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps = init_backbone<float>(cfg);
    Binder<float> b(ps);
    Tensor<float> img({1, 3, 33, 32});
    EXPECT_THROW(forward_pyramid(b, Var<float>::constant(img), cfg), ShapeError);
}

TEST(Backbone, GradCheck) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<double> ps = init_backbone<double>(cfg);
    ps.add("input", rand_tensor({1, 3, 32, 32}, 13, 0.0, 1.0));
    double err = weighted_reduce_err(
        ps,
        [&cfg](Binder<double>& b) {
            auto pyr = forward_pyramid(b, b("input"), cfg);
            // reduce all four levels into one scalar-friendly output
            Var<double> acc = sum(pyr.levels[0]);
            for (int i = 1; i < 4; ++i) acc = add(acc, sum(pyr.levels[static_cast<size_t>(i)]));
            return acc;
        },
        15);
    EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// fusion

TEST(Fusion, ZeroPyramidGivesZeroMap) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps;
    init_fusion(ps, cfg, 8, 3);
    std::array<Tensor<float>, 4> levels{Tensor<float>({1, 2, 8, 8}), Tensor<float>({1, 3, 4, 4}),
                                        Tensor<float>({1, 3, 2, 2}), Tensor<float>({1, 4, 1, 1})};
    Binder<float> b(ps);
    Var<float> f = fuse(pyramid_from(levels), b);
    ASSERT_EQ(f.shape(), (Shape{1, 8, 8, 8}));
    for (int64_t i = 0; i < f.val().numel(); ++i) EXPECT_EQ(f.val()[i], 0.0f);
}

TEST(Fusion, DefaultOutputShapeFromBackboneExample) {
    BackboneConfig cfg;
    ParamSet<float> ps = init_backbone<float>(cfg);
    init_fusion(ps, cfg, 256, 3);
    Binder<float> b(ps);
    Tensor<float> img = rand_tensor({1, 3, 64, 64}, 17, 0.0, 1.0).cast<float>();
    auto pyr = forward_pyramid(b, Var<float>::constant(img), cfg);
    Var<float> f = fuse(pyr, b);
    EXPECT_EQ(f.shape(), (Shape{1, 256, 16, 16}));
}

TEST(Fusion, LinearInPyramidWithZeroBiases) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps;
    init_fusion(ps, cfg, 8, 23);  // biases init to zero
    std::array<Tensor<float>, 4> levels{rand_tensor({2, 2, 8, 8}, 31).cast<float>(),
                                        rand_tensor({2, 3, 4, 4}, 32).cast<float>(),
                                        rand_tensor({2, 3, 2, 2}, 33).cast<float>(),
                                        rand_tensor({2, 4, 1, 1}, 34).cast<float>()};
    std::array<Tensor<float>, 4> scaled = levels;
    const float a = 3.25f;
    for (auto& t : scaled) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= a;
    }
    Binder<float> b1(ps);
    Var<float> f = fuse(pyramid_from(levels), b1);
    Binder<float> b2(ps);
    Var<float> fa = fuse(pyramid_from(scaled), b2);
    for (int64_t i = 0; i < f.val().numel(); ++i) {
        EXPECT_NEAR(fa.val()[i], a * f.val()[i], 1e-5 * (1.0 + std::abs(a * f.val()[i])));
    }
}

TEST(Fusion, BypassZeroCoarseLevelGivesZero) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps;
    init_fusion(ps, cfg, 8, 23, /*bypass_only=*/true);
    std::array<Tensor<float>, 4> levels{rand_tensor({1, 2, 8, 8}, 41).cast<float>(),
                                        rand_tensor({1, 3, 4, 4}, 42).cast<float>(),
                                        rand_tensor({1, 3, 2, 2}, 43).cast<float>(),
                                        Tensor<float>({1, 4, 1, 1})};
    Binder<float> b(ps);
    Var<float> f = bypass_fuse(pyramid_from(levels), b);
    ASSERT_EQ(f.shape(), (Shape{1, 8, 8, 8}));  // same contract as fuse
    for (int64_t i = 0; i < f.val().numel(); ++i) EXPECT_EQ(f.val()[i], 0.0f);
}

TEST(Fusion, ChannelMismatchRejected) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<float> ps;
    init_fusion(ps, cfg, 8, 23);
    std::array<Tensor<float>, 4> levels{Tensor<float>({1, 5, 8, 8}), Tensor<float>({1, 3, 4, 4}),
                                        Tensor<float>({1, 3, 2, 2}), Tensor<float>({1, 4, 1, 1})};
    Binder<float> b(ps);
    EXPECT_THROW(fuse(pyramid_from(levels), b), ShapeError);
}

TEST(Fusion, GradCheck) {
    BackboneConfig cfg = tiny_backbone();
    ParamSet<double> ps;
    init_fusion(ps, cfg, 6, 23);
    ps.add("g0", rand_tensor({1, 2, 4, 4}, 51));
    ps.add("g1", rand_tensor({1, 3, 2, 2}, 52));
    ps.add("g2", rand_tensor({1, 3, 1, 1}, 53));
    ps.add("g3", rand_tensor({1, 4, 1, 1}, 54));
    double err = weighted_reduce_err(
        ps,
        [](Binder<double>& b) {
            FeaturePyramid<double> pyr;
            pyr.levels = {b("g0"), b("g1"), b("g2"), b("g3")};
            return fuse(pyr, b);
        },
        55);
    EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// positional encoding

TEST(PositionalEncoding, ZeroPhaseAtOrigin) {
    Tensor<float> pe = make_face_positional_encoding<float>(4, 4, 8);
    ASSERT_EQ(pe.shape(), (Shape{16, 8}));
    for (int64_t c = 0; c < 8; c += 2) EXPECT_EQ(pe[c], 0.0f);      // sin parts
    for (int64_t c = 1; c < 8; c += 2) EXPECT_EQ(pe[c], 1.0f);      // cos parts
}

TEST(PositionalEncoding, RowHalfIndependentOfColumn) {
    Tensor<float> pe = make_face_positional_encoding<float>(4, 4, 8);
    int64_t r = 2, c1 = 0, c2 = 3;
    for (int64_t ch = 0; ch < 4; ++ch) {
        EXPECT_EQ(pe[(r * 4 + c1) * 8 + ch], pe[(r * 4 + c2) * 8 + ch]);
    }
}

TEST(PositionalEncoding, MatchesDirectFormula) {
    int64_t h = 4, w = 4, d = 8;
    Tensor<float> pe = make_face_positional_encoding<float>(h, w, d);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const float* row = pe.data() + (r * w + c) * d;
            for (int64_t i = 0; i < d / 4; ++i) {
                double freq = std::pow(10000.0, -2.0 * i / (d / 2.0));
                EXPECT_NEAR(row[2 * i], std::sin(r * freq), 1e-6);
                EXPECT_NEAR(row[2 * i + 1], std::cos(r * freq), 1e-6);
                EXPECT_NEAR(row[d / 2 + 2 * i], std::sin(c * freq), 1e-6);
                EXPECT_NEAR(row[d / 2 + 2 * i + 1], std::cos(c * freq), 1e-6);
            }
        }
    }
}

TEST(PositionalEncoding, DimMustBeDivisibleByFour) {
    EXPECT_THROW(make_face_positional_encoding<float>(2, 2, 6), ConfigError);
}

// ---------------------------------------------------------------------------
// decoder

TEST(Decoder, LayersMustBePositive) {
    DecoderConfig cfg = tiny_decoder();
    cfg.layers = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Decoder, OutputShapesMatchContract) {
    DecoderConfig cfg = tiny_decoder();
    cfg.layers = 2;
    ParamSet<float> ps;
    init_decoder(ps, cfg, 5, 71);
    Binder<float> b(ps);
    Tensor<float> fused = rand_tensor({2, 8, 4, 4}, 72).cast<float>();
    auto [tokens, fmap] = run_decoder(b, Var<float>::constant(fused), 5, cfg);
    EXPECT_EQ(tokens.shape(), (Shape{2, 5, 8}));
    EXPECT_EQ(fmap.shape(), (Shape{2, 8, 4, 4}));
}

TEST(Decoder, SingleTokenSelfAttentionIsForced) {
    DecoderConfig cfg = tiny_decoder();
    ParamSet<float> ps;
    init_decoder(ps, cfg, 1, 81);
    Binder<float> b(ps);
    Tensor<float> fused = rand_tensor({1, 8, 2, 2}, 82).cast<float>();
    DecoderProbe<float> probe;
    probe.record_attention = true;
    run_decoder(b, Var<float>::constant(fused), 1, cfg, &probe);
    bool found = false;
    for (const auto& [site, att] : probe.attention) {
        if (site.find("self_attn") != std::string::npos) {
            found = true;
            for (int64_t i = 0; i < att.numel(); ++i) EXPECT_EQ(att[i], 1.0f);
        }
    }
    EXPECT_TRUE(found);
}

TEST(Decoder, AttentionRowsSumToOne) {
    DecoderConfig cfg = tiny_decoder();
    cfg.layers = 2;
    ParamSet<float> ps;
    init_decoder(ps, cfg, 5, 91);
    Binder<float> b(ps);
    Tensor<float> fused = rand_tensor({2, 8, 4, 4}, 92).cast<float>();
    DecoderProbe<float> probe;
    probe.record_attention = true;
    run_decoder(b, Var<float>::constant(fused), 5, cfg, &probe);
    EXPECT_EQ(probe.attention.size(), 6u);  // 3 sites x 2 layers
    for (const auto& [site, att] : probe.attention) {
        const Shape& s = att.shape();
        int64_t rows = s[0] * s[1] * s[2], lk = s[3];
        for (int64_t r = 0; r < rows; ++r) {
            double acc = 0;
            for (int64_t j = 0; j < lk; ++j) acc += att[r * lk + j];
            EXPECT_NEAR(acc, 1.0, 1e-6) << site;
        }
    }
}

TEST(Decoder, ClassPermutationEquivariantBitwise) {
    DecoderConfig cfg = tiny_decoder();
    cfg.layers = 2;
    int64_t n = 5;
    ParamSet<float> ps;
    init_decoder(ps, cfg, n, 101);
    Tensor<float> fused = rand_tensor({2, 8, 4, 4}, 102).cast<float>();

    std::vector<int64_t> perm{3, 0, 4, 1, 2};
    ParamSet<float> ps_perm;
    init_decoder(ps_perm, cfg, n, 101);
    for (const char* name : {"decoder.tokens", "decoder.token_pe"}) {
        const Tensor<float>& src = ps.get(name).value;
        Tensor<float>& dst = ps_perm.get(name).value;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t d = 0; d < cfg.dim; ++d) dst[i * cfg.dim + d] = src[perm[static_cast<size_t>(i)] * cfg.dim + d];
        }
    }

    Binder<float> b1(ps);
    auto [tok1, face1] = run_decoder(b1, Var<float>::constant(fused), n, cfg);
    Binder<float> b2(ps_perm);
    auto [tok2, face2] = run_decoder(b2, Var<float>::constant(fused), n, cfg);

    // permuted run's row i must equal base run's row perm[i], bitwise
    for (int64_t bi = 0; bi < 2; ++bi) {
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t d = 0; d < cfg.dim; ++d) {
                EXPECT_EQ(tok2.val()[(bi * n + i) * cfg.dim + d],
                          tok1.val()[(bi * n + perm[static_cast<size_t>(i)]) * cfg.dim + d]);
            }
        }
    }
    for (int64_t i = 0; i < face1.val().numel(); ++i) EXPECT_EQ(face1.val()[i], face2.val()[i]);
}

TEST(Decoder, BatchIndependence) {
    DecoderConfig cfg = tiny_decoder();
    ParamSet<float> ps;
    init_decoder(ps, cfg, 4, 111);
    Tensor<float> fused2 = rand_tensor({2, 8, 2, 2}, 112).cast<float>();
    Tensor<float> fused1({1, 8, 2, 2});
    std::copy(fused2.data(), fused2.data() + fused2.numel() / 2, fused1.data());

    Binder<float> b1(ps);
    auto [tok2, face2] = run_decoder(b1, Var<float>::constant(fused2), 4, cfg);
    Binder<float> b2(ps);
    auto [tok1, face1] = run_decoder(b2, Var<float>::constant(fused1), 4, cfg);
    for (int64_t i = 0; i < tok1.val().numel(); ++i) {
        EXPECT_NEAR(tok1.val()[i], tok2.val()[i], 1e-6);
    }
    for (int64_t i = 0; i < face1.val().numel(); ++i) {
        EXPECT_NEAR(face1.val()[i], face2.val()[i], 1e-6);
    }
}

TEST(Decoder, TokenIsolationProbe) {
    DecoderConfig cfg = tiny_decoder();  // one layer: sublayer effects are directly visible
    int64_t n = 4, zeroed = 2;
    ParamSet<float> ps;
    init_decoder(ps, cfg, n, 121);
    Tensor<float> fused = rand_tensor({1, 8, 2, 2}, 122).cast<float>();

    Binder<float> b1(ps);
    auto [tok_base, face_base] = run_decoder(b1, Var<float>::constant(fused), n, cfg);
    Binder<float> b2(ps);
    DecoderProbe<float> probe;
    probe.zero_token_update = zeroed;
    auto [tok_int, face_int] = run_decoder(b2, Var<float>::constant(fused), n, cfg, &probe);

    bool row_changed = false;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t d = 0; d < cfg.dim; ++d) {
            float a = tok_base.val()[i * cfg.dim + d];
            float b = tok_int.val()[i * cfg.dim + d];
            if (i == zeroed) {
                row_changed = row_changed || (a != b);
            } else {
                EXPECT_EQ(a, b);  // other tokens' values untouched, bitwise
            }
        }
    }
    EXPECT_TRUE(row_changed);
}

TEST(Decoder, GradCheck) {
    DecoderConfig cfg = tiny_decoder();
    cfg.layers = 2;
    ParamSet<double> ps;
    init_decoder(ps, cfg, 3, 131);
    ps.add("fused", rand_tensor({1, 8, 2, 2}, 132));
    GradCheckOptions opts;
    opts.max_coords = 24;
    double err = weighted_reduce_err(
        ps,
        [&cfg](Binder<double>& b) {
            auto [tok, face] = run_decoder(b, b("fused"), 3, cfg);
            return add(sum(tok), sum(face));
        },
        133, opts);
    EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// head

TEST(Head, UpscaleStrideArithmetic) {
    HeadConfig cfg;
    cfg.mask_channels = 4;
    ParamSet<float> ps;
    init_head(ps, 8, cfg, 141);
    Binder<float> b(ps);
    Tensor<float> fmap = rand_tensor({1, 8, 16, 16}, 142).cast<float>();
    Var<float> u = upscale(b, Var<float>::constant(fmap));
    EXPECT_EQ(u.shape(), (Shape{1, 4, 64, 64}));
}

TEST(Head, ZeroInputGivesZeroOutput) {
    HeadConfig cfg;
    cfg.mask_channels = 4;
    ParamSet<float> ps;
    init_head(ps, 8, cfg, 151);
    Binder<float> b(ps);
    Var<float> u = upscale(b, Var<float>::constant(Tensor<float>({1, 8, 4, 4})));
    for (int64_t i = 0; i < u.val().numel(); ++i) EXPECT_EQ(u.val()[i], 0.0f);
    Var<float> logits = predict_masks(b, Var<float>::constant(Tensor<float>({1, 4, 16, 16})),
                                      Var<float>::constant(rand_tensor({1, 3, 8}, 152).cast<float>()));
    for (int64_t i = 0; i < logits.val().numel(); ++i) EXPECT_EQ(logits.val()[i], 0.0f);
}

TEST(Head, OneHotChannelSelectsPlane) {
    // the combination stage with m_i = e_c must return channel c of u exactly
    Tensor<float> u = rand_tensor({1, 3, 2, 2}, 161).cast<float>();
    Tensor<float> m({1, 2, 3});
    m[0 * 3 + 1] = 1.0f;  // class 0 -> channel 1
    m[1 * 3 + 2] = 1.0f;  // class 1 -> channel 2
    Var<float> s = mask_inner_product(Var<float>::constant(u), Var<float>::constant(m));
    for (int64_t px = 0; px < 4; ++px) {
        EXPECT_EQ(s.val()[0 * 4 + px], u[1 * 4 + px]);
        EXPECT_EQ(s.val()[1 * 4 + px], u[2 * 4 + px]);
    }
}

TEST(Head, HandComputedCombination) {
    Tensor<float> u({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});       // c0 plane, c1 plane
    Tensor<float> m({1, 2, 2}, {1, 2, -1, 0.5f});                  // class 0: (1,2), class 1: (-1,0.5)
    Var<float> s = mask_inner_product(Var<float>::constant(u), Var<float>::constant(m));
    // class 0: u0 + 2*u1; class 1: -u0 + 0.5*u1 per pixel
    float expect0[4] = {11, 14, 17, 20};
    float expect1[4] = {1.5f, 1.0f, 0.5f, 0.0f};
    for (int64_t px = 0; px < 4; ++px) {
        EXPECT_FLOAT_EQ(s.val()[px], expect0[px]);
        EXPECT_FLOAT_EQ(s.val()[4 + px], expect1[px]);
    }
}

TEST(Head, BilinearInMapAndTokenWeights) {
    Tensor<float> u1 = rand_tensor({1, 3, 2, 2}, 171).cast<float>();
    Tensor<float> u2 = rand_tensor({1, 3, 2, 2}, 172).cast<float>();
    Tensor<float> m1 = rand_tensor({1, 2, 3}, 173).cast<float>();
    Tensor<float> m2 = rand_tensor({1, 2, 3}, 174).cast<float>();
    auto mip = [](const Tensor<float>& u, const Tensor<float>& m) {
        return mask_inner_product(Var<float>::constant(u), Var<float>::constant(m)).val();
    };
    Tensor<float> usum = u1;
    usum.add_(u2);
    Tensor<float> msum = m1;
    msum.add_(m2);
    Tensor<float> lhs_u = mip(usum, m1);
    Tensor<float> lhs_m = mip(u1, msum);
    Tensor<float> s11 = mip(u1, m1), s21 = mip(u2, m1), s12 = mip(u1, m2);
    for (int64_t i = 0; i < lhs_u.numel(); ++i) {
        EXPECT_NEAR(lhs_u[i], s11[i] + s21[i], 1e-6);
        EXPECT_NEAR(lhs_m[i], s11[i] + s12[i], 1e-6);
    }
}

TEST(Head, PerClassIndependenceBitwise) {
    HeadConfig cfg;
    cfg.mask_channels = 4;
    ParamSet<float> ps;
    init_head(ps, 8, cfg, 181);
    Tensor<float> u = rand_tensor({1, 4, 8, 8}, 182).cast<float>();
    Tensor<float> tokens = rand_tensor({1, 3, 8}, 183).cast<float>();
    Tensor<float> perturbed = tokens;
    int64_t j = 1;
    for (int64_t d = 0; d < 8; ++d) perturbed[j * 8 + d] += 17.5f;

    Binder<float> b1(ps);
    Var<float> s_base = predict_masks(b1, Var<float>::constant(u), Var<float>::constant(tokens));
    Binder<float> b2(ps);
    Var<float> s_pert = predict_masks(b2, Var<float>::constant(u), Var<float>::constant(perturbed));
    int64_t plane = 64;
    for (int64_t cls = 0; cls < 3; ++cls) {
        for (int64_t px = 0; px < plane; ++px) {
            if (cls == j) continue;
            EXPECT_EQ(s_base.val()[cls * plane + px], s_pert.val()[cls * plane + px]);
        }
    }
}

TEST(Head, GradCheckThroughUpscaleAndMasks) {
    HeadConfig cfg;
    cfg.mask_channels = 3;
    ParamSet<double> ps;
    init_head(ps, 8, cfg, 191);
    ps.add("fmap", rand_tensor({1, 8, 2, 2}, 192));
    ps.add("tokens", rand_tensor({1, 3, 8}, 193));
    double err = weighted_reduce_err(
        ps,
        [](Binder<double>& b) {
            Var<double> u = upscale(b, b("fmap"));
            return predict_masks(b, u, b("tokens"));
        },
        194);
    EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// assembled model

TEST(Model, ForwardShapesAllVariants) {
    for (Variant v : {Variant::segface, Variant::bypass_fusion, Variant::conv_baseline}) {
        ModelConfig cfg = tiny_model(v);
        ParamSet<float> ps = init_model<float>(cfg);
        Tensor<float> img = rand_tensor({2, 3, 32, 32}, 201, 0.0, 1.0).cast<float>();
        Var<float> logits = model_forward(ps, img, cfg);
        EXPECT_EQ(logits.shape(), (Shape{2, 4, 32, 32})) << variant_name(v);
    }
}

TEST(Model, FullPipelineGradCheck) {
    ModelConfig cfg = tiny_model();
    ParamSet<double> ps = init_model<double>(cfg);
    ps.add("images", rand_tensor({1, 3, 32, 32}, 211, 0.0, 1.0));
    GradCheckOptions opts;
    opts.max_coords = 6;
    double err = weighted_reduce_err(
        ps, [&cfg](Binder<double>& b) { return model_forward(b, b("images"), cfg); }, 212, opts);
    EXPECT_LT(err, 1e-4);
}
