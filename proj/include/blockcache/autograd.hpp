#ifndef BLOCKCACHE_AUTOGRAD_HPP
#define BLOCKCACHE_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <unordered_set>

#include "blockcache/kernels.hpp"

namespace bc {

// Minimal define-by-run reverse-mode tape. Recording is off by default;
// sampling and benchmarking run value-only, training wraps work in GradGuard.
namespace ag {

inline thread_local bool g_recording = false;

struct GradGuard {
    bool prev;
    GradGuard() : prev(g_recording) { g_recording = true; }
    ~GradGuard() { g_recording = prev; }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_recording) { g_recording = false; }
    ~NoGradGuard() { g_recording = prev; }
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;

    explicit Node(Tensor v, bool ng = false) : val(std::move(v)), needs_grad(ng) {}

    Tensor& g() {
        if (!has_grad) {
            grad = Tensor(val.shape);
            has_grad = true;
        }
        return grad;
    }
    void zero_grad() {
        has_grad = false;
        grad = Tensor();
    }
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t), false); }
inline Var param(Tensor t) { return std::make_shared<Node>(std::move(t), true); }

inline bool track(std::initializer_list<Var> parents) {
    if (!g_recording) return false;
    for (const Var& p : parents)
        if (p && p->needs_grad) return true;
    return false;
}

inline Var make(Tensor val, std::initializer_list<Var> parents, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>(std::move(val));
    if (track(parents)) {
        n->needs_grad = true;
        n->parents.assign(parents);
        n->backfn = std::move(backfn);
    }
    return n;
}

inline void accum(const Var& p, const Tensor& g) {
    if (!p->needs_grad) return;
    Tensor& dst = p->g();
    for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a->val, b->val, "add");
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->val.data[i] + b->val.data[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        accum(a, self.g());
        accum(b, self.g());
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a->val, b->val, "sub");
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->val.data[i] - b->val.data[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        accum(a, self.g());
        if (b->needs_grad) {
            Tensor& dst = b->g();
            for (size_t i = 0; i < self.grad.data.size(); ++i) dst.data[i] -= self.grad.data[i];
        }
    });
}

inline Var scale(const Var& a, float s) {
    Tensor out(a->val.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->val.data[i] * s;
    return make(std::move(out), {a}, [a, s](Node& self) {
        if (!a->needs_grad) return;
        Tensor& dst = a->g();
        for (size_t i = 0; i < self.grad.data.size(); ++i) dst.data[i] += s * self.grad.data[i];
    });
}

inline Var silu(const Var& x) {
    Tensor out = bc::silu(x->val);
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        Tensor& dst = x->g();
        for (size_t i = 0; i < self.grad.data.size(); ++i) {
            float v = x->val.data[i];
            float s = 1.0f / (1.0f + fast_exp(-v));
            dst.data[i] += self.grad.data[i] * s * (1.0f + v * (1.0f - s));
        }
    });
}

inline Var view(const Var& x, std::vector<int64_t> shape) {
    Tensor out = x->val.reshaped(std::move(shape));
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        Tensor& dst = x->g();
        for (size_t i = 0; i < self.grad.data.size(); ++i) dst.data[i] += self.grad.data[i];
    });
}

// ---- dense layers ----

inline Var linear(const Var& x, const Var& w, const Var& b) {
    Tensor out = bc::linear(x->val, w->val, b->val);
    return make(std::move(out), {x, w, b}, [x, w, b](Node& self) {
        int64_t N = x->val.dim(0), Din = x->val.dim(1), Dout = w->val.dim(0);
        const Tensor& go = self.g();
        if (x->needs_grad)
            gemm(false, false, N, Din, Dout, go.ptr(), Dout, w->val.ptr(), Din, x->g().ptr(), Din, 1.0f, 1.0f);
        if (w->needs_grad)
            gemm(true, false, Dout, Din, N, go.ptr(), Dout, x->val.ptr(), Din, w->g().ptr(), Din, 1.0f, 1.0f);
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t d = 0; d < Dout; ++d) gb.data[static_cast<size_t>(d)] += go.data[static_cast<size_t>(n * Dout + d)];
        }
    });
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride = 1, int64_t padding = 0) {
    Tensor out = bc::conv2d(x->val, w->val, b->val, stride, padding);
    return make(std::move(out), {x, w, b}, [x, w, b, stride, padding](Node& self) {
        int64_t N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
        int64_t O = w->val.dim(0), kH = w->val.dim(2), kW = w->val.dim(3);
        int64_t Ho = self.val.dim(2), Wo = self.val.dim(3);
        const Tensor& go = self.g();
        std::vector<float> col(static_cast<size_t>(C * kH * kW * Ho * Wo));
        std::vector<float> gx_sample;
        if (x->needs_grad) gx_sample.resize(static_cast<size_t>(C * H * W));
        for (int64_t n = 0; n < N; ++n) {
            const float* gon = go.ptr() + n * O * Ho * Wo;
            if (w->needs_grad) {
                im2col(x->val.ptr() + n * C * H * W, C, H, W, kH, kW, stride, padding, col.data());
                gemm(false, true, O, C * kH * kW, Ho * Wo, gon, Ho * Wo, col.data(), Ho * Wo,
                     w->g().ptr(), C * kH * kW, 1.0f, 1.0f);
            }
            if (x->needs_grad) {
                gemm(true, false, C * kH * kW, Ho * Wo, O, w->val.ptr(), C * kH * kW, gon, Ho * Wo,
                     col.data(), Ho * Wo);
                col2im(col.data(), C, H, W, kH, kW, stride, padding, gx_sample.data());
                float* dst = x->g().ptr() + n * C * H * W;
                for (size_t i = 0; i < gx_sample.size(); ++i) dst[i] += gx_sample[i];
            }
        }
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t o = 0; o < O; ++o) {
                    const float* src = go.ptr() + (n * O + o) * Ho * Wo;
                    float s = 0.0f;
                    for (int64_t i = 0; i < Ho * Wo; ++i) s += src[i];
                    gb.data[static_cast<size_t>(o)] += s;
                }
        }
    });
}

inline Var group_norm(const Var& x, int64_t groups, const Var& gamma, const Var& beta, float eps = 1e-5f) {
    Tensor mean, rstd;
    Tensor out = bc::group_norm(x->val, groups, gamma->val, beta->val, eps, &mean, &rstd);
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, groups, mean, rstd](Node& self) {
        int64_t N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
        int64_t cg = C / groups, hw = H * W, gsize = cg * hw;
        const Tensor& go = self.g();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t g = 0; g < groups; ++g) {
                float m = mean.at({n, g});
                float rs = rstd.at({n, g});
                const float* xs = x->val.ptr() + (n * C + g * cg) * hw;
                const float* gs = go.ptr() + (n * C + g * cg) * hw;
                double m1 = 0.0, m2 = 0.0;
                for (int64_t c = 0; c < cg; ++c) {
                    float ga = gamma->val.data[static_cast<size_t>(g * cg + c)];
                    for (int64_t i = 0; i < hw; ++i) {
                        float xhat = (xs[c * hw + i] - m) * rs;
                        float dxh = gs[c * hw + i] * ga;
                        m1 += dxh;
                        m2 += dxh * xhat;
                    }
                }
                m1 /= static_cast<double>(gsize);
                m2 /= static_cast<double>(gsize);
                if (x->needs_grad) {
                    float* dst = x->g().ptr() + (n * C + g * cg) * hw;
                    for (int64_t c = 0; c < cg; ++c) {
                        float ga = gamma->val.data[static_cast<size_t>(g * cg + c)];
                        for (int64_t i = 0; i < hw; ++i) {
                            float xhat = (xs[c * hw + i] - m) * rs;
                            float dxh = gs[c * hw + i] * ga;
                            dst[c * hw + i] += rs * (dxh - static_cast<float>(m1) - xhat * static_cast<float>(m2));
                        }
                    }
                }
                if (gamma->needs_grad || beta->needs_grad) {
                    for (int64_t c = 0; c < cg; ++c) {
                        double dg = 0.0, db = 0.0;
                        for (int64_t i = 0; i < hw; ++i) {
                            float xhat = (xs[c * hw + i] - m) * rs;
                            dg += gs[c * hw + i] * xhat;
                            db += gs[c * hw + i];
                        }
                        if (gamma->needs_grad) gamma->g().data[static_cast<size_t>(g * cg + c)] += static_cast<float>(dg);
                        if (beta->needs_grad) beta->g().data[static_cast<size_t>(g * cg + c)] += static_cast<float>(db);
                    }
                }
            }
    });
}

// ---- attention ----

inline Var attention(const Var& q, const Var& k, const Var& v) {
    Tensor probs;
    Tensor out = bc::attention(q->val, k->val, v->val, &probs);
    return make(std::move(out), {q, k, v}, [q, k, v, probs](Node& self) {
        int64_t B = q->val.dim(0), T = q->val.dim(1), D = q->val.dim(2);
        int64_t S = k->val.dim(1), Dv = v->val.dim(2);
        float sc = 1.0f / std::sqrt(static_cast<float>(D));
        const Tensor& go = self.g();
        Tensor dP({T, S}), dL({T, S});
        for (int64_t b = 0; b < B; ++b) {
            const float* P = probs.ptr() + b * T * S;
            const float* gOb = go.ptr() + b * T * Dv;
            if (v->needs_grad)
                gemm(true, false, S, Dv, T, P, S, gOb, Dv, v->g().ptr() + b * S * Dv, Dv, 1.0f, 1.0f);
            gemm(false, true, T, S, Dv, gOb, Dv, v->val.ptr() + b * S * Dv, Dv, dP.ptr(), S);
            for (int64_t t = 0; t < T; ++t) {
                float rowdot = 0.0f;
                for (int64_t s = 0; s < S; ++s) rowdot += dP.at({t, s}) * P[t * S + s];
                for (int64_t s = 0; s < S; ++s)
                    dL.at({t, s}) = P[t * S + s] * (dP.at({t, s}) - rowdot);
            }
            if (q->needs_grad)
                gemm(false, false, T, D, S, dL.ptr(), S, k->val.ptr() + b * S * D, D,
                     q->g().ptr() + b * T * D, D, sc, 1.0f);
            if (k->needs_grad)
                gemm(true, false, S, D, T, dL.ptr(), S, q->val.ptr() + b * T * D, D,
                     k->g().ptr() + b * S * D, D, sc, 1.0f);
        }
    });
}

// [B,T,C] -> [B*heads, T, C/heads]
inline Var split_heads(const Var& x, int64_t heads) {
    int64_t B = x->val.dim(0), T = x->val.dim(1), C = x->val.dim(2);
    check(C % heads == 0, "split_heads: C not divisible by heads");
    int64_t dh = C / heads;
    Tensor out({B * heads, T, dh});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < T; ++t)
                std::memcpy(out.ptr() + ((b * heads + h) * T + t) * dh,
                            x->val.ptr() + (b * T + t) * C + h * dh, sizeof(float) * static_cast<size_t>(dh));
    return make(std::move(out), {x}, [x, heads](Node& self) {
        if (!x->needs_grad) return;
        int64_t B = x->val.dim(0), T = x->val.dim(1), C = x->val.dim(2), dh = C / heads;
        Tensor& dst = x->g();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t t = 0; t < T; ++t) {
                    const float* src = self.grad.ptr() + ((b * heads + h) * T + t) * dh;
                    float* d = dst.ptr() + (b * T + t) * C + h * dh;
                    for (int64_t i = 0; i < dh; ++i) d[i] += src[i];
                }
    });
}

// [B*heads, T, dh] -> [B, T, heads*dh]
inline Var merge_heads(const Var& x, int64_t heads) {
    int64_t Bh = x->val.dim(0), T = x->val.dim(1), dh = x->val.dim(2);
    check(Bh % heads == 0, "merge_heads: bad batch");
    int64_t B = Bh / heads, C = heads * dh;
    Tensor out({B, T, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < T; ++t)
                std::memcpy(out.ptr() + (b * T + t) * C + h * dh,
                            x->val.ptr() + ((b * heads + h) * T + t) * dh, sizeof(float) * static_cast<size_t>(dh));
    return make(std::move(out), {x}, [x, heads](Node& self) {
        if (!x->needs_grad) return;
        int64_t Bh = x->val.dim(0), T = x->val.dim(1), dh = x->val.dim(2);
        int64_t B = Bh / heads, C = heads * dh;
        Tensor& dst = x->g();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t t = 0; t < T; ++t) {
                    const float* src = self.grad.ptr() + (b * T + t) * C + h * dh;
                    float* d = dst.ptr() + ((b * heads + h) * T + t) * dh;
                    for (int64_t i = 0; i < dh; ++i) d[i] += src[i];
                }
    });
}

// ---- layout ----

// [N,C,H,W] -> [N,H*W,C]
inline Var nchw_to_tokens(const Var& x) {
    int64_t N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    int64_t hw = H * W;
    Tensor out({N, hw, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const float* src = x->val.ptr() + (n * C + c) * hw;
            float* dst = out.ptr() + n * hw * C + c;
            for (int64_t i = 0; i < hw; ++i) dst[i * C] = src[i];
        }
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        int64_t N = x->val.dim(0), C = x->val.dim(1), hw = x->val.dim(2) * x->val.dim(3);
        Tensor& dst = x->g();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const float* src = self.grad.ptr() + n * hw * C + c;
                float* d = dst.ptr() + (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) d[i] += src[i * C];
            }
    });
}

// [N,H*W,C] -> [N,C,H,W]
inline Var tokens_to_nchw(const Var& x, int64_t H, int64_t W) {
    int64_t N = x->val.dim(0), hw = x->val.dim(1), C = x->val.dim(2);
    check(hw == H * W, "tokens_to_nchw: token count mismatch");
    Tensor out({N, C, H, W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const float* src = x->val.ptr() + n * hw * C + c;
            float* dst = out.ptr() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = src[i * C];
        }
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        int64_t N = x->val.dim(0), hw = x->val.dim(1), C = x->val.dim(2);
        Tensor& dst = x->g();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const float* src = self.grad.ptr() + (n * C + c) * hw;
                float* d = dst.ptr() + n * hw * C + c;
                for (int64_t i = 0; i < hw; ++i) d[i * C] += src[i];
            }
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    check(a->val.rank() == 4 && b->val.rank() == 4, "concat_channels: rank 4 required");
    int64_t N = a->val.dim(0), Ca = a->val.dim(1), H = a->val.dim(2), W = a->val.dim(3);
    int64_t Cb = b->val.dim(1);
    check(b->val.dim(0) == N && b->val.dim(2) == H && b->val.dim(3) == W,
          "concat_channels: geometry mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    int64_t hw = H * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int64_t n = 0; n < N; ++n) {
        std::memcpy(out.ptr() + n * (Ca + Cb) * hw, a->val.ptr() + n * Ca * hw,
                    sizeof(float) * static_cast<size_t>(Ca * hw));
        std::memcpy(out.ptr() + (n * (Ca + Cb) + Ca) * hw, b->val.ptr() + n * Cb * hw,
                    sizeof(float) * static_cast<size_t>(Cb * hw));
    }
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        int64_t N = a->val.dim(0), Ca = a->val.dim(1), hw = a->val.dim(2) * a->val.dim(3);
        int64_t Cb = b->val.dim(1);
        for (int64_t n = 0; n < N; ++n) {
            if (a->needs_grad) {
                float* d = a->g().ptr() + n * Ca * hw;
                const float* s = self.grad.ptr() + n * (Ca + Cb) * hw;
                for (int64_t i = 0; i < Ca * hw; ++i) d[i] += s[i];
            }
            if (b->needs_grad) {
                float* d = b->g().ptr() + n * Cb * hw;
                const float* s = self.grad.ptr() + (n * (Ca + Cb) + Ca) * hw;
                for (int64_t i = 0; i < Cb * hw; ++i) d[i] += s[i];
            }
        }
    });
}

inline Var upsample_nearest2x(const Var& x) {
    int64_t N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({N, C, H * 2, W * 2});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* src = x->val.ptr() + nc * H * W;
        float* dst = out.ptr() + nc * 4 * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                float v = src[y * W + xx];
                dst[(2 * y) * 2 * W + 2 * xx] = v;
                dst[(2 * y) * 2 * W + 2 * xx + 1] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xx] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
            }
    }
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        int64_t N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
        Tensor& dst = x->g();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            float* d = dst.ptr() + nc * H * W;
            const float* s = self.grad.ptr() + nc * 4 * H * W;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xx = 0; xx < W; ++xx)
                    d[y * W + xx] += s[(2 * y) * 2 * W + 2 * xx] + s[(2 * y) * 2 * W + 2 * xx + 1] +
                                     s[(2 * y + 1) * 2 * W + 2 * xx] + s[(2 * y + 1) * 2 * W + 2 * xx + 1];
        }
    });
}

// ---- misc ----

inline Var embedding(const Var& table, const std::vector<int64_t>& ids) {
    int64_t K = table->val.dim(0), D = table->val.dim(1);
    Tensor out({static_cast<int64_t>(ids.size()), D});
    for (size_t n = 0; n < ids.size(); ++n) {
        check(ids[n] >= 0 && ids[n] < K, "embedding: id out of range");
        std::memcpy(out.ptr() + static_cast<int64_t>(n) * D, table->val.ptr() + ids[n] * D,
                    sizeof(float) * static_cast<size_t>(D));
    }
    return make(std::move(out), {table}, [table, ids](Node& self) {
        if (!table->needs_grad) return;
        int64_t D = table->val.dim(1);
        Tensor& dst = table->g();
        for (size_t n = 0; n < ids.size(); ++n) {
            const float* src = self.grad.ptr() + static_cast<int64_t>(n) * D;
            float* d = dst.ptr() + ids[static_cast<size_t>(n)] * D;
            for (int64_t i = 0; i < D; ++i) d[i] += src[i];
        }
    });
}

// x [N,C,H,W] + b [N,C] broadcast over spatial dims
inline Var add_channel_bias(const Var& x, const Var& b) {
    int64_t N = x->val.dim(0), C = x->val.dim(1), hw = x->val.dim(2) * x->val.dim(3);
    check(b->val.rank() == 2 && b->val.dim(0) == N && b->val.dim(1) == C,
          "add_channel_bias: bias must be [N,C]");
    Tensor out(x->val.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float bv = b->val.at({n, c});
            const float* src = x->val.ptr() + (n * C + c) * hw;
            float* dst = out.ptr() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }
    return make(std::move(out), {x, b}, [x, b](Node& self) {
        int64_t N = x->val.dim(0), C = x->val.dim(1), hw = x->val.dim(2) * x->val.dim(3);
        if (x->needs_grad) accum(x, self.g());
        if (b->needs_grad) {
            Tensor& dst = b->g();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const float* src = self.grad.ptr() + (n * C + c) * hw;
                    float s = 0.0f;
                    for (int64_t i = 0; i < hw; ++i) s += src[i];
                    dst.at({n, c}) += s;
                }
        }
    });
}

// out[n,c,:,:] = sc[n,c] * x[n,c,:,:] + sh[n,c]
inline Var channel_affine(const Var& x, const Var& sc, const Var& sh) {
    int64_t N = x->val.dim(0), C = x->val.dim(1), hw = x->val.dim(2) * x->val.dim(3);
    check(sc->val.rank() == 2 && sc->val.dim(0) == N && sc->val.dim(1) == C &&
              sh->val.same_shape(sc->val),
          "channel_affine: scale/shift must be [N,C], got " + sc->val.shape_str() + " for x " + x->val.shape_str());
    Tensor out(x->val.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float a = sc->val.at({n, c}), b = sh->val.at({n, c});
            const float* src = x->val.ptr() + (n * C + c) * hw;
            float* dst = out.ptr() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = a * src[i] + b;
        }
    return make(std::move(out), {x, sc, sh}, [x, sc, sh](Node& self) {
        int64_t N = x->val.dim(0), C = x->val.dim(1), hw = x->val.dim(2) * x->val.dim(3);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const float* go = self.grad.ptr() + (n * C + c) * hw;
                const float* xs = x->val.ptr() + (n * C + c) * hw;
                if (x->needs_grad) {
                    float a = sc->val.at({n, c});
                    float* d = x->g().ptr() + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) d[i] += a * go[i];
                }
                if (sc->needs_grad || sh->needs_grad) {
                    float dsc = 0.0f, dsh = 0.0f;
                    for (int64_t i = 0; i < hw; ++i) {
                        dsc += go[i] * xs[i];
                        dsh += go[i];
                    }
                    if (sc->needs_grad) sc->g().at({n, c}) += dsc;
                    if (sh->needs_grad) sh->g().at({n, c}) += dsh;
                }
            }
    });
}

inline Var slice_cols(const Var& x, int64_t start, int64_t len) {
    int64_t N = x->val.dim(0), D = x->val.dim(1);
    check(start >= 0 && start + len <= D, "slice_cols: out of range");
    Tensor out({N, len});
    for (int64_t n = 0; n < N; ++n)
        std::memcpy(out.ptr() + n * len, x->val.ptr() + n * D + start, sizeof(float) * static_cast<size_t>(len));
    return make(std::move(out), {x}, [x, start, len](Node& self) {
        if (!x->needs_grad) return;
        int64_t N = x->val.dim(0), D = x->val.dim(1);
        Tensor& dst = x->g();
        for (int64_t n = 0; n < N; ++n) {
            const float* src = self.grad.ptr() + n * len;
            float* d = dst.ptr() + n * D + start;
            for (int64_t i = 0; i < len; ++i) d[i] += src[i];
        }
    });
}

inline Var add_const(const Var& x, float c) {
    Tensor out(x->val.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x->val.data[i] + c;
    return make(std::move(out), {x}, [x](Node& self) { accum(x, self.g()); });
}

// mean of squared differences, scalar output [1]
inline Var mse(const Var& a, const Var& b) {
    check_same_shape(a->val, b->val, "mse");
    double s = 0.0;
    int64_t n = a->val.numel();
    for (int64_t i = 0; i < n; ++i) {
        double d = a->val.data[static_cast<size_t>(i)] - b->val.data[static_cast<size_t>(i)];
        s += d * d;
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(s / static_cast<double>(n));
    return make(std::move(out), {a, b}, [a, b, n](Node& self) {
        float g = self.g().data[0] * 2.0f / static_cast<float>(n);
        for (int64_t i = 0; i < n; ++i) {
            float d = a->val.data[static_cast<size_t>(i)] - b->val.data[static_cast<size_t>(i)];
            if (a->needs_grad) a->g().data[static_cast<size_t>(i)] += g * d;
            if (b->needs_grad) b->g().data[static_cast<size_t>(i)] -= g * d;
        }
    });
}

// ---- backward driver ----

inline void backward(const Var& loss) {
    check(loss->needs_grad, "backward: loss does not require grad (recording off?)");
    check(loss->val.numel() == 1, "backward: loss must be scalar");
    // topo order by DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->g().data[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backfn) (*it)->backfn(**it);
}

}  // namespace ag

using ag::Var;

// Adam over a fixed parameter list.
struct Adam {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t t = 0;
    std::vector<Var> params;
    std::vector<Tensor> m, v;

    explicit Adam(std::vector<Var> ps, float lr_ = 1e-3f) : lr(lr_), params(std::move(ps)) {
        for (const auto& p : params) {
            m.emplace_back(p->val.shape);
            v.emplace_back(p->val.shape);
        }
    }

    void step() {
        ++t;
        float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
        float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            if (!params[i]->has_grad) continue;
            if (lr == 0.0f) continue;
            const Tensor& g = params[i]->grad;
            for (size_t j = 0; j < g.data.size(); ++j) {
                float gj = g.data[j];
                m[i].data[j] = beta1 * m[i].data[j] + (1.0f - beta1) * gj;
                v[i].data[j] = beta2 * v[i].data[j] + (1.0f - beta2) * gj * gj;
                float mh = m[i].data[j] / bc1;
                float vh = v[i].data[j] / bc2;
                params[i]->val.data[j] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params) p->zero_grad();
    }
};

}  // namespace bc

#endif
