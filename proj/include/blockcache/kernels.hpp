#ifndef BLOCKCACHE_KERNELS_HPP
#define BLOCKCACHE_KERNELS_HPP

#include <cblas.h>

#include <bit>

#include "blockcache/tensor.hpp"

namespace bc {

// Branch-free expf core (Cephes-style polynomial, relative error < 3e-7).
// Requires x in [-87, 88]; see fast_exp/vexp for the clamped entry points.
// Unlike libm's expf this inlines and auto-vectorizes, which matters in the
// softmax and silu hot loops.
inline float fast_exp_core(float x) {
    // round x/ln2 to the nearest integer n via the 1.5*2^23 shifter trick;
    // the low mantissa bits of zn then hold n, ready to add into the exponent
    float zn = x * 1.44269504088896341f + 12582912.0f;
    float n = zn - 12582912.0f;
    float r = x - n * 0.693359375f - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    int32_t e = std::bit_cast<int32_t>(zn) << 23;
    return std::bit_cast<float>(std::bit_cast<int32_t>(p) + e);
}

inline float fast_exp(float x) {
    return fast_exp_core(std::min(std::max(x, -87.0f), 88.0f));
}

// In-place exp over a buffer. Clamp and core run as separate passes: gcc
// refuses to vectorize the select feeding the bit-cast chain in one loop.
inline void vexp(float* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i) p[i] = p[i] > -87.0f ? (p[i] < 88.0f ? p[i] : 88.0f) : -87.0f;
    for (int64_t i = 0; i < n; ++i) p[i] = fast_exp_core(p[i]);
}

// C[m,n] = A[m,k] * B[k,n] (+ C if accumulate), row-major.
inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                 const float* a, int64_t lda, const float* b, int64_t ldb,
                 float* c, int64_t ldc, float alpha = 1.0f, float beta = 0.0f) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t padding) {
    return (in + 2 * padding - k) / stride + 1;
}

// input [N,C,H,W] -> columns [C*kH*kW, H'*W'] for one sample.
inline void im2col(const float* in, int64_t C, int64_t H, int64_t W, int64_t kH, int64_t kW,
                   int64_t stride, int64_t padding, float* col) {
    int64_t Ho = conv_out_dim(H, kH, stride, padding);
    int64_t Wo = conv_out_dim(W, kW, stride, padding);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kH; ++ky)
            for (int64_t kx = 0; kx < kW; ++kx) {
                float* dst = col + ((c * kH + ky) * kW + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst + oy * Wo, 0, sizeof(float) * static_cast<size_t>(Wo));
                        continue;
                    }
                    const float* src = in + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride + kx - padding;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
                    }
                }
            }
}

// scatter-add inverse of im2col
inline void col2im(const float* col, int64_t C, int64_t H, int64_t W, int64_t kH, int64_t kW,
                   int64_t stride, int64_t padding, float* in) {
    int64_t Ho = conv_out_dim(H, kH, stride, padding);
    int64_t Wo = conv_out_dim(W, kW, stride, padding);
    std::memset(in, 0, sizeof(float) * static_cast<size_t>(C * H * W));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kH; ++ky)
            for (int64_t kx = 0; kx < kW; ++kx) {
                const float* src = col + ((c * kH + ky) * kW + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= H) continue;
                    float* dst = in + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride + kx - padding;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
}

// Cross-correlation, standard conv layer semantics.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int64_t stride = 1, int64_t padding = 0) {
    check(input.rank() == 4, "conv2d: input must be [N,C,H,W], got " + input.shape_str());
    check(kernel.rank() == 4, "conv2d: kernel must be [O,C,kH,kW], got " + kernel.shape_str());
    int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    int64_t O = kernel.dim(0), kC = kernel.dim(1), kH = kernel.dim(2), kW = kernel.dim(3);
    check(C == kC, "conv2d: channel mismatch, input " + input.shape_str() + " vs kernel " + kernel.shape_str());
    check(bias.numel() == O, "conv2d: bias size " + bias.shape_str() + " vs out channels " + std::to_string(O));
    check(kH <= H + 2 * padding && kW <= W + 2 * padding,
          "conv2d: kernel " + kernel.shape_str() + " larger than padded input " + input.shape_str());
    int64_t Ho = conv_out_dim(H, kH, stride, padding);
    int64_t Wo = conv_out_dim(W, kW, stride, padding);
    Tensor out({N, O, Ho, Wo});
    std::vector<float> col(static_cast<size_t>(C * kH * kW * Ho * Wo));
    for (int64_t n = 0; n < N; ++n) {
        im2col(input.ptr() + n * C * H * W, C, H, W, kH, kW, stride, padding, col.data());
        gemm(false, false, O, Ho * Wo, C * kH * kW, kernel.ptr(), C * kH * kW, col.data(), Ho * Wo,
             out.ptr() + n * O * Ho * Wo, Ho * Wo);
        for (int64_t o = 0; o < O; ++o) {
            float* dst = out.ptr() + (n * O + o) * Ho * Wo;
            float b = bias.data[static_cast<size_t>(o)];
            for (int64_t i = 0; i < Ho * Wo; ++i) dst[i] += b;
        }
    }
    return out;
}

// Softmax over the last dimension of logits [rows, cols], in place.
inline void softmax_rows(float* p, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        float* row = p + r * cols;
        float mx = row[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        for (int64_t c = 0; c < cols; ++c) row[c] -= mx;
        vexp(row, cols);
        float sum = 0.0f;
        for (int64_t c = 0; c < cols; ++c) sum += row[c];
        float inv = 1.0f / sum;
        for (int64_t c = 0; c < cols; ++c) row[c] *= inv;
    }
}

// Scaled dot-product attention, single head. q [B,T,D], k/v [B,S,D].
// If probs_out != nullptr it receives the softmax weights [B,T,S].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* probs_out = nullptr) {
    check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: q/k/v must be rank 3");
    int64_t B = q.dim(0), T = q.dim(1), D = q.dim(2);
    int64_t S = k.dim(1);
    check(k.dim(0) == B && v.dim(0) == B, "attention: batch mismatch");
    check(k.dim(2) == D, "attention: q/k feature mismatch " + q.shape_str() + " vs " + k.shape_str());
    check(v.dim(1) == S, "attention: k/v length mismatch " + k.shape_str() + " vs " + v.shape_str());
    check(D > 0, "attention: D must be positive");
    int64_t Dv = v.dim(2);
    float scale = 1.0f / std::sqrt(static_cast<float>(D));
    Tensor probs({B, T, S});
    Tensor out({B, T, Dv});
    for (int64_t b = 0; b < B; ++b) {
        float* p = probs.ptr() + b * T * S;
        gemm(false, true, T, S, D, q.ptr() + b * T * D, D, k.ptr() + b * S * D, D, p, S, scale);
        softmax_rows(p, T, S);
        gemm(false, false, T, Dv, S, p, S, v.ptr() + b * S * Dv, Dv, out.ptr() + b * T * Dv, Dv);
    }
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

// GroupNorm over [N,C,H,W]; moments per (sample, group).
inline Tensor group_norm(const Tensor& x, int64_t groups, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-5f, Tensor* mean_out = nullptr, Tensor* rstd_out = nullptr) {
    check(x.rank() == 4, "group_norm: input must be [N,C,H,W], got " + x.shape_str());
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(groups > 0 && C % groups == 0,
          "group_norm: C=" + std::to_string(C) + " not divisible by groups=" + std::to_string(groups));
    check(gamma.numel() == C && beta.numel() == C, "group_norm: gamma/beta must have C elements");
    int64_t cg = C / groups;
    int64_t gsize = cg * H * W;
    Tensor out(x.shape);
    Tensor mean({N, groups}), rstd({N, groups});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const float* src = x.ptr() + (n * C + g * cg) * H * W;
            double m = 0.0;
            for (int64_t i = 0; i < gsize; ++i) m += src[i];
            m /= static_cast<double>(gsize);
            double var = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                double d = src[i] - m;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            float rs = 1.0f / std::sqrt(static_cast<float>(var) + eps);
            mean.at({n, g}) = static_cast<float>(m);
            rstd.at({n, g}) = rs;
            for (int64_t c = 0; c < cg; ++c) {
                float ga = gamma.data[static_cast<size_t>(g * cg + c)];
                float be = beta.data[static_cast<size_t>(g * cg + c)];
                const float* s = src + c * H * W;
                float* d = out.ptr() + (n * C + g * cg + c) * H * W;
                for (int64_t i = 0; i < H * W; ++i)
                    d[i] = (s[i] - static_cast<float>(m)) * rs * ga + be;
            }
        }
    if (mean_out) *mean_out = std::move(mean);
    if (rstd_out) *rstd_out = std::move(rstd);
    return out;
}

inline Tensor silu(const Tensor& x) {
    Tensor out(x.shape);
    size_t n = x.data.size();
    for (size_t i = 0; i < n; ++i) out.data[i] = -x.data[i];
    vexp(out.ptr(), static_cast<int64_t>(n));
    for (size_t i = 0; i < n; ++i) out.data[i] = x.data[i] / (1.0f + out.data[i]);
    return out;
}

// x [N,Din] * w[Dout,Din]^T + b
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.rank() == 2 && w.rank() == 2, "linear: x and w must be rank 2");
    int64_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
    check(w.dim(1) == Din, "linear: dim mismatch " + x.shape_str() + " vs " + w.shape_str());
    check(b.numel() == Dout, "linear: bias size mismatch");
    Tensor out({N, Dout});
    gemm(false, true, N, Dout, Din, x.ptr(), Din, w.ptr(), Din, out.ptr(), Dout);
    const float* bp = b.ptr();
    for (int64_t n = 0; n < N; ++n) {
        float* row = out.ptr() + n * Dout;
        for (int64_t d = 0; d < Dout; ++d) row[d] += bp[d];
    }
    return out;
}

}  // namespace bc

#endif
