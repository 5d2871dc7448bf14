#pragma once

#include <optional>
#include <utility>

#include "segface/attention.hpp"
#include "segface/pos_encoding.hpp"

namespace segface {

struct DecoderConfig {
    int64_t layers = 2;
    int64_t heads = 8;
    int64_t ffn_hidden = 1024;
    int64_t dim = 256;  // D; also the fused channel width C'

    void validate() const {
        if (layers < 1) throw ConfigError(cat("decoder layers must be >= 1, got ", layers));
        if (heads < 1 || dim % heads != 0) {
            throw ConfigError(cat("decoder dim ", dim, " must be divisible by heads ", heads));
        }
        if (dim % 4 != 0) throw ConfigError("decoder dim must be divisible by 4 for positional encodings");
        if (ffn_hidden < 1) throw ConfigError("decoder ffn_hidden must be >= 1");
    }
};

// Inspection hooks: recorded post-softmax attention maps per sublayer, and an
// optional intervention that zeroes one token's class->face cross-attention
// output before the residual add.
template <typename T>
struct DecoderProbe {
    bool record_attention = false;
    std::vector<std::pair<std::string, Tensor<T>>> attention;
    int64_t zero_token_update = -1;
};

namespace detail {

template <typename T>
void add_mha_params(ParamSet<T>& ps, const std::string& prefix, int64_t d, Rng& rng) {
    for (const char* n : {"wq", "wk", "wv", "wo"}) {
        ps.add(cat(prefix, ".", n), he_uniform<T>({d, d}, d, rng));
    }
    for (const char* n : {"bq", "bk", "bv", "bo"}) {
        ps.add(cat(prefix, ".", n), Tensor<T>::zeros({d}));
    }
}

template <typename T>
void add_ffn_params(ParamSet<T>& ps, const std::string& prefix, int64_t d, int64_t hidden, Rng& rng) {
    ps.add(prefix + ".w1", he_uniform<T>({d, hidden}, d, rng));
    ps.add(prefix + ".b1", Tensor<T>::zeros({hidden}));
    ps.add(prefix + ".w2", he_uniform<T>({hidden, d}, hidden, rng));
    ps.add(prefix + ".b2", Tensor<T>::zeros({d}));
}

template <typename T>
void add_norm_params(ParamSet<T>& ps, const std::string& prefix, int64_t d) {
    ps.add(prefix + ".gamma", Tensor<T>::full({d}, T(1)));
    ps.add(prefix + ".beta", Tensor<T>::zeros({d}));
}

template <typename T>
MhaWeights<T> bind_mha(Binder<T>& b, const std::string& prefix) {
    return MhaWeights<T>{b(prefix + ".wq"), b(prefix + ".bq"), b(prefix + ".wk"), b(prefix + ".bk"),
                         b(prefix + ".wv"), b(prefix + ".bv"), b(prefix + ".wo"), b(prefix + ".bo")};
}

template <typename T>
Var<T> ffn(Binder<T>& params, const std::string& prefix, const Var<T>& x) {
    int64_t bs = x.dim(0), l = x.dim(1), d = x.dim(2);
    Var<T> h = reshape(x, {bs * l, d});
    h = bias_add(matmul(h, params(prefix + ".w1")), params(prefix + ".b1"));
    h = activation(h, kern::Act::gelu);
    h = bias_add(matmul(h, params(prefix + ".w2")), params(prefix + ".b2"));
    return reshape(h, {bs, l, d});
}

template <typename T>
Var<T> post_norm(Binder<T>& params, const std::string& prefix, const Var<T>& x, const Var<T>& delta, int64_t d) {
    return layer_norm(add(x, delta), params(prefix + ".gamma"), params(prefix + ".beta"), T(1e-5));
}

}  // namespace detail

template <typename T>
void init_decoder(ParamSet<T>& ps, const DecoderConfig& cfg, int64_t num_classes, uint64_t seed) {
    cfg.validate();
    Rng rng(hash2(seed, 0xDEC0DE2ULL));
    ps.add("decoder.tokens", he_uniform<T>({num_classes, cfg.dim}, cfg.dim, rng));
    ps.add("decoder.token_pe", he_uniform<T>({num_classes, cfg.dim}, cfg.dim, rng));
    for (int64_t l = 0; l < cfg.layers; ++l) {
        std::string base = cat("decoder.layer", l);
        detail::add_mha_params(ps, base + ".self_attn", cfg.dim, rng);
        detail::add_mha_params(ps, base + ".cross_tf", cfg.dim, rng);
        detail::add_mha_params(ps, base + ".cross_ft", cfg.dim, rng);
        detail::add_ffn_params(ps, base + ".ffn_tok", cfg.dim, cfg.ffn_hidden, rng);
        detail::add_ffn_params(ps, base + ".ffn_face", cfg.dim, cfg.ffn_hidden, rng);
        for (int n = 1; n <= 5; ++n) detail::add_norm_params(ps, cat(base, ".norm", n), cfg.dim);
    }
}

// One decoder layer. Sublayers in order, each residual + layer norm:
//   (1) token self-attention, (2) token->face cross-attention,
//   (3) token FFN, (4) face->token cross-attention, (5) face FFN.
// Reductions whose keys are class tokens use order-invariant sums so class
// permutation commutes with the layer bitwise.
template <typename T>
std::pair<Var<T>, Var<T>> decoder_layer(Binder<T>& params, const Var<T>& face, const Var<T>& tokens,
                                        const DecoderConfig& cfg, int64_t layer_idx,
                                        DecoderProbe<T>* probe = nullptr) {
    if (face.dim(2) != cfg.dim || tokens.dim(2) != cfg.dim) {
        throw ShapeError(cat("decoder_layer: embedding dim mismatch, face ", shape_str(face.shape()),
                             " tokens ", shape_str(tokens.shape()), " expected dim ", cfg.dim));
    }
    std::string base = cat("decoder.layer", layer_idx);
    auto record = [&](const char* site) -> Tensor<T>* {
        if (!probe || !probe->record_attention) return nullptr;
        probe->attention.emplace_back(cat(base, ".", site), Tensor<T>());
        return &probe->attention.back().second;
    };

    Var<T> t_self = multi_head_attention(tokens, tokens, tokens, detail::bind_mha(params, base + ".self_attn"),
                                         cfg.heads, /*canonical=*/true, record("self_attn"));
    Var<T> t1 = detail::post_norm(params, base + ".norm1", tokens, t_self, cfg.dim);

    Var<T> t_cross = multi_head_attention(t1, face, face, detail::bind_mha(params, base + ".cross_tf"),
                                          cfg.heads, /*canonical=*/false, record("cross_tf"));
    if (probe && probe->zero_token_update >= 0) t_cross = zero_row(t_cross, probe->zero_token_update);
    Var<T> t2 = detail::post_norm(params, base + ".norm2", t1, t_cross, cfg.dim);

    Var<T> t3 = detail::post_norm(params, base + ".norm3", t2, detail::ffn(params, base + ".ffn_tok", t2), cfg.dim);

    Var<T> f_cross = multi_head_attention(face, t3, t3, detail::bind_mha(params, base + ".cross_ft"),
                                          cfg.heads, /*canonical=*/true, record("cross_ft"));
    Var<T> f1 = detail::post_norm(params, base + ".norm4", face, f_cross, cfg.dim);
    Var<T> f2 = detail::post_norm(params, base + ".norm5", f1, detail::ffn(params, base + ".ffn_face", f1), cfg.dim);

    return {f2, t3};
}

// Full decoder pass: flatten the fused map, add positional encodings, refine
// through cfg.layers decoder layers. Returns (refined tokens [B,N,D],
// refined face map [B,D,H1,W1]).
template <typename T>
std::pair<Var<T>, Var<T>> run_decoder(Binder<T>& params, const Var<T>& fused, int64_t num_classes,
                                      const DecoderConfig& cfg, DecoderProbe<T>* probe = nullptr) {
    cfg.validate();
    if (fused.shape().size() != 4 || fused.dim(1) != cfg.dim) {
        throw ShapeError(cat("run_decoder: fused map ", shape_str(fused.shape()), " must have ", cfg.dim,
                             " channels"));
    }
    int64_t b = fused.dim(0), h1 = fused.dim(2), w1 = fused.dim(3);
    int64_t l = h1 * w1;

    Var<T> face = reshape(permute(fused, {0, 2, 3, 1}), {b, l, cfg.dim});
    Var<T> face_pe = Var<T>::constant(make_face_positional_encoding<T>(h1, w1, cfg.dim));
    face = add_broadcast(face, face_pe);

    Var<T> tokens = add(params("decoder.tokens"), params("decoder.token_pe"));
    Var<T> tok = broadcast_batch(tokens, b);
    if (tok.dim(1) != num_classes) {
        throw ShapeError(cat("run_decoder: token table has ", tok.dim(1), " rows, expected ", num_classes));
    }

    for (int64_t li = 0; li < cfg.layers; ++li) {
        auto [f, t] = decoder_layer(params, face, tok, cfg, li, probe);
        face = f;
        tok = t;
    }

    Var<T> face_map = permute(reshape(face, {b, h1, w1, cfg.dim}), {0, 3, 1, 2});
    return {tok, face_map};
}

}  // namespace segface
