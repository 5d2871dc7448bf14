#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "segface/tensor.hpp"

// Raw forward kernels and their vector-Jacobian products. Everything here is
// a pure function over row-major buffers; the autograd layer wires these into
// a tape. Convolution uses the cross-correlation convention (no kernel flip).

namespace segface::kern {

// ---------------------------------------------------------------------------
// matmul: c[MxP] = a[MxK] * b[KxP]  (optionally accumulating into c)

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accumulate = false) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * p;
        if (!accumulate) std::fill(crow, crow + p, T(0));
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T aik = arow[kk];
            const T* brow = b + kk * p;
            for (int64_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[MxP] = a[MxK] * b[PxK]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accumulate = false) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * p;
        for (int64_t j = 0; j < p; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// c[MxP] = a[KxM]^T * b[KxP]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t p, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + m * p, T(0));
    for (int64_t kk = 0; kk < k; ++kk) {
        const T* arow = a + kk * m;
        const T* brow = b + kk * p;
        for (int64_t i = 0; i < m; ++i) {
            T aki = arow[i];
            T* crow = c + i * p;
            for (int64_t j = 0; j < p; ++j) crow[j] += aki * brow[j];
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError(cat("matmul: incompatible shapes ", shape_str(a.shape()), " and ", shape_str(b.shape())));
    }
    Tensor<T> c({a.dim(0), b.dim(1)});
    matmul_nn(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

// ---------------------------------------------------------------------------
// Order-invariant summation: accumulating the sorted multiset of terms makes
// the result independent of the caller's term order. Used for reductions
// along the class-token axis so class permutations commute bitwise with the
// forward pass.

template <typename T>
T sum_sorted(std::vector<T>& terms) {
    std::sort(terms.begin(), terms.end());
    T acc = T(0);
    for (T v : terms) acc += v;
    return acc;
}

// ---------------------------------------------------------------------------
// Row softmax with max subtraction. `canonical` switches the denominator and
// downstream weighted sums to sorted accumulation.

template <typename T>
void softmax_row(const T* x, T* p, int64_t n, bool canonical, std::vector<T>& scratch) {
    T mx = x[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    for (int64_t i = 0; i < n; ++i) p[i] = std::exp(x[i] - mx);
    T denom;
    if (canonical) {
        scratch.assign(p, p + n);
        denom = sum_sorted(scratch);
    } else {
        denom = T(0);
        for (int64_t i = 0; i < n; ++i) denom += p[i];
    }
    T inv = T(1) / denom;
    for (int64_t i = 0; i < n; ++i) p[i] *= inv;
}

// dx = p .* (g - sum(g .* p)) along the row
template <typename T>
void softmax_row_vjp(const T* p, const T* g, T* dx, int64_t n) {
    T dot = T(0);
    for (int64_t i = 0; i < n; ++i) dot += g[i] * p[i];
    for (int64_t i = 0; i < n; ++i) dx[i] = p[i] * (g[i] - dot);
}

// Softmax along an arbitrary axis of a dense tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= static_cast<int>(x.rank())) {
        throw ShapeError(cat("softmax: axis ", axis, " out of range for ", shape_str(x.shape())));
    }
    const Shape& s = x.shape();
    int64_t n = s[axis];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    Tensor<T> p(x.shape());
    std::vector<T> row(n), out(n), scratch;
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* base = x.data() + o * n * inner + in;
            for (int64_t i = 0; i < n; ++i) row[i] = base[i * inner];
            softmax_row(row.data(), out.data(), n, false, scratch);
            T* dst = p.data() + o * n * inner + in;
            for (int64_t i = 0; i < n; ++i) dst[i * inner] = out[i];
        }
    }
    return p;
}

template <typename T>
Tensor<T> softmax_vjp(const Tensor<T>& p, const Tensor<T>& g, int axis) {
    const Shape& s = p.shape();
    int64_t n = s[axis];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    Tensor<T> dx(p.shape());
    std::vector<T> prow(n), grow(n), drow(n);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* pb = p.data() + o * n * inner + in;
            const T* gb = g.data() + o * n * inner + in;
            for (int64_t i = 0; i < n; ++i) {
                prow[i] = pb[i * inner];
                grow[i] = gb[i * inner];
            }
            softmax_row_vjp(prow.data(), grow.data(), drow.data(), n);
            T* db = dx.data() + o * n * inner + in;
            for (int64_t i = 0; i < n; ++i) db[i * inner] = drow[i];
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Activations

enum class Act { relu, gelu };

template <typename T>
T gelu_scalar(T x) {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T a = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
T gelu_grad_scalar(T x) {
    const T c = T(0.7978845608028654);
    const T a = T(0.044715);
    T u = c * (x + a * x * x * x);
    T th = std::tanh(u);
    T sech2 = T(1) - th * th;
    return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * c * (T(1) + T(3) * a * x * x);
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
    Tensor<T> y(x.shape());
    const T* in = x.data();
    T* out = y.data();
    int64_t n = x.numel();
    if (kind == Act::relu) {
        for (int64_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
    } else {
        for (int64_t i = 0; i < n; ++i) out[i] = gelu_scalar(in[i]);
    }
    return y;
}

template <typename T>
Tensor<T> activation_vjp(const Tensor<T>& x, const Tensor<T>& g, Act kind) {
    Tensor<T> dx(x.shape());
    const T* in = x.data();
    const T* gr = g.data();
    T* out = dx.data();
    int64_t n = x.numel();
    if (kind == Act::relu) {
        for (int64_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? gr[i] : T(0);
    } else {
        for (int64_t i = 0; i < n; ++i) out[i] = gr[i] * gelu_grad_scalar(in[i]);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis (population variance), affine by gamma/beta.

template <typename T>
struct LayerNormCtx {
    Tensor<T> xhat;
    std::vector<T> rstd;
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCtx<T>* ctx = nullptr) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    int64_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError(cat("layer_norm: gamma/beta length must be ", d));
    }
    int64_t rows = x.numel() / d;
    Tensor<T> y(x.shape());
    if (ctx) {
        ctx->xhat = Tensor<T>(x.shape());
        ctx->rstd.resize(static_cast<size_t>(rows));
    }
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T* yr = y.data() + r * d;
        T mean = T(0);
        for (int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= T(d);
        T var = T(0);
        for (int64_t i = 0; i < d; ++i) {
            T c = xr[i] - mean;
            var += c * c;
        }
        var /= T(d);
        T rstd = T(1) / std::sqrt(var + eps);
        for (int64_t i = 0; i < d; ++i) {
            T xh = (xr[i] - mean) * rstd;
            yr[i] = gamma[i] * xh + beta[i];
            if (ctx) ctx->xhat[r * d + i] = xh;
        }
        if (ctx) ctx->rstd[static_cast<size_t>(r)] = rstd;
    }
    return y;
}

template <typename T>
void layer_norm_vjp(const LayerNormCtx<T>& ctx, const Tensor<T>& gamma, const Tensor<T>& g,
                    Tensor<T>& dx, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    int64_t d = gamma.numel();
    int64_t rows = g.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * d;
        const T* xh = ctx.xhat.data() + r * d;
        T rstd = ctx.rstd[static_cast<size_t>(r)];
        T mean_gg = T(0), mean_ggx = T(0);
        for (int64_t i = 0; i < d; ++i) {
            T gg = gr[i] * gamma[i];
            mean_gg += gg;
            mean_ggx += gg * xh[i];
        }
        mean_gg /= T(d);
        mean_ggx /= T(d);
        T* dxr = dx.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            T gg = gr[i] * gamma[i];
            dxr[i] += (gg - mean_gg - xh[i] * mean_ggx) * rstd;
            dgamma[i] += gr[i] * xh[i];
            dbeta[i] += gr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d, zero padding, cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,k,k].

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline void conv2d_check(const Shape& xs, const Shape& ws, int64_t stride, int64_t pad) {
    if (xs.size() != 4 || ws.size() != 4) {
        throw ShapeError(cat("conv2d: need 4-d input and weight, got ", shape_str(xs), " and ", shape_str(ws)));
    }
    if (ws[2] != ws[3]) throw ShapeError("conv2d: only square kernels supported");
    if (xs[1] != ws[1]) {
        throw ShapeError(cat("conv2d: input channels ", xs[1], " != weight channels ", ws[1]));
    }
    if (stride < 1 || pad < 0 || ws[2] < 1) throw ShapeError("conv2d: bad stride/pad/kernel");
    if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3]) {
        throw ShapeError(cat("conv2d: kernel ", ws[2], "x", ws[3], " larger than padded input ",
                             xs[2] + 2 * pad, "x", xs[3] + 2 * pad));
    }
}

// Packs patches transposed: cols[(ci*k*k + kh*k + kw) x (OH*OW)] for one image.
template <typename T>
void im2col_t(const T* x, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
              int64_t oh, int64_t ow, T* cols) {
    for (int64_t ci = 0; ci < cin; ++ci) {
        const T* plane = x + ci * h * w;
        for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
                T* row = cols + ((ci * k + kh) * k + kw) * (oh * ow);
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + kh - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = plane + iy * w;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kw - pad;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col_t: scatters cols back into the image.
template <typename T>
void col2im_t(const T* cols, int64_t cin, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
              int64_t oh, int64_t ow, T* x) {
    for (int64_t ci = 0; ci < cin; ++ci) {
        T* plane = x + ci * h * w;
        for (int64_t kh = 0; kh < k; ++kh) {
            for (int64_t kw = 0; kw < k; ++kw) {
                const T* row = cols + ((ci * k + kh) * k + kw) * (oh * ow);
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + kh - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = plane + iy * w;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kw - pad;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride, int64_t pad) {
    conv2d_check(x.shape(), w.shape(), stride, pad);
    int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0), k = w.dim(2);
    if (bias.numel() != cout) throw ShapeError(cat("conv2d: bias length ", bias.numel(), " != ", cout));
    int64_t oh = conv_out_extent(h, k, stride, pad);
    int64_t ow = conv_out_extent(wd, k, stride, pad);

    Tensor<T> y({b, cout, oh, ow});
    int64_t ckk = cin * k * k;
    bool pointwise = (k == 1 && stride == 1 && pad == 0);
    std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(ckk * oh * ow));
    for (int64_t bi = 0; bi < b; ++bi) {
        const T* patches;
        if (pointwise) {
            patches = x.data() + bi * cin * h * wd;  // already [Cin x HW]
        } else {
            im2col_t(x.data() + bi * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow, cols.data());
            patches = cols.data();
        }
        matmul_nn(w.data(), patches, y.data() + bi * cout * oh * ow, cout, ckk, oh * ow);
        for (int64_t co = 0; co < cout; ++co) {
            T* plane = y.data() + (bi * cout + co) * oh * ow;
            T bv = bias[co];
            for (int64_t i = 0; i < oh * ow; ++i) plane[i] += bv;
        }
    }
    return y;
}

template <typename T>
void conv2d_vjp(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad, const Tensor<T>& g,
                Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* dbias) {
    int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0), k = w.dim(2);
    int64_t oh = g.dim(2), ow = g.dim(3);
    int64_t ckk = cin * k * k;
    bool pointwise = (k == 1 && stride == 1 && pad == 0);

    std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(ckk * oh * ow));
    for (int64_t bi = 0; bi < b; ++bi) {
        const T* gb = g.data() + bi * cout * oh * ow;
        if (dw) {
            const T* patches;
            if (pointwise) {
                patches = x.data() + bi * cin * h * wd;
            } else {
                im2col_t(x.data() + bi * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow, cols.data());
                patches = cols.data();
            }
            matmul_nt(gb, patches, dw->data(), cout, oh * ow, ckk, /*accumulate=*/true);
        }
        if (dx) {
            if (pointwise) {
                matmul_tn(w.data(), gb, dx->data() + bi * cin * h * wd, ckk, cout, oh * ow, /*accumulate=*/true);
            } else {
                matmul_tn(w.data(), gb, cols.data(), ckk, cout, oh * ow);
                col2im_t(cols.data(), cin, h, wd, k, stride, pad, oh, ow, dx->data() + bi * cin * h * wd);
            }
        }
        if (dbias) {
            for (int64_t co = 0; co < cout; ++co) {
                const T* plane = gb + co * oh * ow;
                T acc = T(0);
                for (int64_t i = 0; i < oh * ow; ++i) acc += plane[i];
                (*dbias)[co] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d, the exact adjoint of conv2d with the same stride, pad 0.
// x: [B,Cin,H,W], w: [Cin,Cout,k,k], output [B,Cout,(H-1)s+k,(W-1)s+k].

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw ShapeError(cat("conv_transpose2d: need 4-d input and weight, got ", shape_str(x.shape()),
                             " and ", shape_str(w.shape())));
    }
    if (x.dim(1) != w.dim(0)) {
        throw ShapeError(cat("conv_transpose2d: input channels ", x.dim(1), " != weight channels ", w.dim(0)));
    }
    if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
    int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(1), k = w.dim(2);
    if (bias.numel() != cout) throw ShapeError(cat("conv_transpose2d: bias length ", bias.numel(), " != ", cout));
    int64_t oh = (h - 1) * stride + k;
    int64_t ow = (wd - 1) * stride + k;

    Tensor<T> y({b, cout, oh, ow});
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t co = 0; co < cout; ++co) {
            T* plane = y.data() + (bi * cout + co) * oh * ow;
            T bv = bias[co];
            std::fill(plane, plane + oh * ow, bv);
        }
        for (int64_t ci = 0; ci < cin; ++ci) {
            const T* xplane = x.data() + (bi * cin + ci) * h * wd;
            for (int64_t iy = 0; iy < h; ++iy) {
                for (int64_t ix = 0; ix < wd; ++ix) {
                    T xv = xplane[iy * wd + ix];
                    if (xv == T(0)) continue;
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* wk = w.data() + (ci * cout + co) * k * k;
                        T* plane = y.data() + (bi * cout + co) * oh * ow;
                        for (int64_t kh = 0; kh < k; ++kh) {
                            T* dst = plane + (iy * stride + kh) * ow + ix * stride;
                            for (int64_t kw = 0; kw < k; ++kw) dst[kw] += xv * wk[kh * k + kw];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
void conv_transpose2d_vjp(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, const Tensor<T>& g,
                          Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* dbias) {
    int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(1), k = w.dim(2);
    int64_t oh = g.dim(2), ow = g.dim(3);

    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t ci = 0; ci < cin; ++ci) {
            const T* xplane = x.data() + (bi * cin + ci) * h * wd;
            T* dxplane = dx ? dx->data() + (bi * cin + ci) * h * wd : nullptr;
            for (int64_t iy = 0; iy < h; ++iy) {
                for (int64_t ix = 0; ix < wd; ++ix) {
                    T xv = xplane[iy * wd + ix];
                    T acc = T(0);
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* wk = w.data() + (ci * cout + co) * k * k;
                        T* dwk = dw ? dw->data() + (ci * cout + co) * k * k : nullptr;
                        const T* gplane = g.data() + (bi * cout + co) * oh * ow;
                        for (int64_t kh = 0; kh < k; ++kh) {
                            const T* gsrc = gplane + (iy * stride + kh) * ow + ix * stride;
                            for (int64_t kw = 0; kw < k; ++kw) {
                                if (dxplane) acc += wk[kh * k + kw] * gsrc[kw];
                                if (dwk) dwk[kh * k + kw] += xv * gsrc[kw];
                            }
                        }
                    }
                    if (dxplane) dxplane[iy * wd + ix] += acc;
                }
            }
        }
    }
    if (dbias) {
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t co = 0; co < cout; ++co) {
                const T* plane = g.data() + (bi * cout + co) * oh * ow;
                T acc = T(0);
                for (int64_t i = 0; i < oh * ow; ++i) acc += plane[i];
                (*dbias)[co] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear resize, align-corners=false: src = (dst + 0.5) * scale - 0.5,
// clamped to the valid coordinate range.

struct ResizeTap {
    int64_t lo, hi;
    double w_hi;
};

inline ResizeTap resize_tap(int64_t dst, int64_t in_extent, int64_t out_extent) {
    double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in_extent - 1));
    ResizeTap t;
    t.lo = static_cast<int64_t>(std::floor(src));
    t.hi = std::min(t.lo + 1, in_extent - 1);
    t.w_hi = src - static_cast<double>(t.lo);
    return t;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    if (x.rank() != 4) throw ShapeError(cat("bilinear_resize: need 4-d input, got ", shape_str(x.shape())));
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output extent must be >= 1");
    int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);

    std::vector<ResizeTap> rows(static_cast<size_t>(out_h)), cols(static_cast<size_t>(out_w));
    for (int64_t i = 0; i < out_h; ++i) rows[static_cast<size_t>(i)] = resize_tap(i, h, out_h);
    for (int64_t j = 0; j < out_w; ++j) cols[static_cast<size_t>(j)] = resize_tap(j, w, out_w);

    Tensor<T> y({b, c, out_h, out_w});
    for (int64_t bc = 0; bc < b * c; ++bc) {
        const T* src = x.data() + bc * h * w;
        T* dst = y.data() + bc * out_h * out_w;
        for (int64_t i = 0; i < out_h; ++i) {
            const ResizeTap& rt = rows[static_cast<size_t>(i)];
            for (int64_t j = 0; j < out_w; ++j) {
                const ResizeTap& ct = cols[static_cast<size_t>(j)];
                T v00 = src[rt.lo * w + ct.lo], v01 = src[rt.lo * w + ct.hi];
                T v10 = src[rt.hi * w + ct.lo], v11 = src[rt.hi * w + ct.hi];
                T top = v00 + T(ct.w_hi) * (v01 - v00);
                T bot = v10 + T(ct.w_hi) * (v11 - v10);
                dst[i * out_w + j] = top + T(rt.w_hi) * (bot - top);
            }
        }
    }
    return y;
}

// Adjoint scatter with the same tap weights.
template <typename T>
void bilinear_resize_vjp(const Shape& in_shape, const Tensor<T>& g, Tensor<T>& dx) {
    int64_t b = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
    int64_t out_h = g.dim(2), out_w = g.dim(3);
    std::vector<ResizeTap> rows(static_cast<size_t>(out_h)), cols(static_cast<size_t>(out_w));
    for (int64_t i = 0; i < out_h; ++i) rows[static_cast<size_t>(i)] = resize_tap(i, h, out_h);
    for (int64_t j = 0; j < out_w; ++j) cols[static_cast<size_t>(j)] = resize_tap(j, w, out_w);

    for (int64_t bc = 0; bc < b * c; ++bc) {
        const T* gsrc = g.data() + bc * out_h * out_w;
        T* dst = dx.data() + bc * h * w;
        for (int64_t i = 0; i < out_h; ++i) {
            const ResizeTap& rt = rows[static_cast<size_t>(i)];
            T wr = T(rt.w_hi);
            for (int64_t j = 0; j < out_w; ++j) {
                const ResizeTap& ct = cols[static_cast<size_t>(j)];
                T gv = gsrc[i * out_w + j];
                T wc = T(ct.w_hi);
                dst[rt.lo * w + ct.lo] += (T(1) - wr) * (T(1) - wc) * gv;
                dst[rt.lo * w + ct.hi] += (T(1) - wr) * wc * gv;
                dst[rt.hi * w + ct.lo] += wr * (T(1) - wc) * gv;
                dst[rt.hi * w + ct.hi] += wr * wc * gv;
            }
        }
    }
}

}  // namespace segface::kern
