#ifndef BLOCKCACHE_DENOISER_HPP
#define BLOCKCACHE_DENOISER_HPP

#include <memory>

#include "blockcache/autograd.hpp"
#include "blockcache/blockid.hpp"
#include "blockcache/checkpoint.hpp"
#include "blockcache/config.hpp"

namespace bc {

using ag::Var;

// Sinusoidal embedding; frequencies geometric from 1 down to 1e-4.
inline Tensor timestep_embedding(const std::vector<float>& ts, int64_t dim) {
    check(dim % 2 == 0, "timestep_embedding: dim must be even");
    int64_t half = dim / 2;
    int64_t n = static_cast<int64_t>(ts.size());
    Tensor out({n, dim});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < half; ++j) {
            double freq = half > 1 ? std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half - 1)) : 1.0;
            double a = static_cast<double>(ts[static_cast<size_t>(i)]) * freq;
            out.at({i, j}) = static_cast<float>(std::sin(a));
            out.at({i, half + j}) = static_cast<float>(std::cos(a));
        }
    return out;
}

struct ParamRegistry {
    std::vector<std::pair<std::string, Var>> items;
    Var add(const std::string& name, Tensor t) {
        Var v = ag::param(std::move(t));
        items.emplace_back(name, v);
        return v;
    }
    std::vector<Var> vars() const {
        std::vector<Var> out;
        for (const auto& [n, v] : items) out.push_back(v);
        return out;
    }
};

inline Tensor init_weight(Rng& rng, std::vector<int64_t> shape, int64_t fan_in) {
    Tensor t = rng.normal_tensor(std::move(shape));
    float s = std::sqrt(2.0f / static_cast<float>(fan_in));
    for (auto& v : t.data) v *= s;
    return t;
}

struct ConvLayer {
    Var w, b;
    int64_t stride = 1, padding = 0;
    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t cin, int64_t cout,
              int64_t k, int64_t stride_, int64_t padding_, bool zero = false) {
        stride = stride_;
        padding = padding_;
        Tensor wt = zero ? Tensor({cout, cin, k, k}) : init_weight(rng, {cout, cin, k, k}, cin * k * k);
        w = reg.add(name + ".w", std::move(wt));
        b = reg.add(name + ".b", Tensor({cout}));
    }
    Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, padding); }
    int64_t flops(int64_t ho, int64_t wo) const {
        return 2 * w->val.dim(0) * w->val.dim(1) * w->val.dim(2) * w->val.dim(3) * ho * wo + w->val.dim(0) * ho * wo;
    }
};

struct LinearLayer {
    Var w, b;
    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t din, int64_t dout,
              bool zero = false) {
        Tensor wt = zero ? Tensor({dout, din}) : init_weight(rng, {dout, din}, din);
        w = reg.add(name + ".w", std::move(wt));
        b = reg.add(name + ".b", Tensor({dout}));
    }
    Var operator()(const Var& x) const { return ag::linear(x, w, b); }
    int64_t flops(int64_t rows) const { return rows * (2 * w->val.dim(1) + 1) * w->val.dim(0); }
};

struct NormLayer {
    Var g, b;
    int64_t groups = 1;
    void init(ParamRegistry& reg, const std::string& name, int64_t c, int64_t groups_) {
        groups = groups_;
        g = reg.add(name + ".g", full({c}, 1.0f));
        b = reg.add(name + ".b", Tensor({c}));
    }
    Var operator()(const Var& x) const { return ag::group_norm(x, groups, g, b); }
};

// LayerNorm over the channel dim of [N,T,C] tokens.
struct TokenNorm {
    Var g, b;
    void init(ParamRegistry& reg, const std::string& name, int64_t c) {
        g = reg.add(name + ".g", full({c}, 1.0f));
        b = reg.add(name + ".b", Tensor({c}));
    }
    Var operator()(const Var& x) const {
        int64_t N = x->val.dim(0), T = x->val.dim(1), C = x->val.dim(2);
        Var flat = ag::view(x, {N * T, C, 1, 1});
        Var n = ag::group_norm(flat, 1, g, b);
        return ag::view(n, {N, T, C});
    }
};

struct AttnLayer {
    LinearLayer q, k, v, o;
    int64_t heads = 1;
    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t c, int64_t ctx_dim,
              int64_t head_dim) {
        heads = c / head_dim;
        q.init(reg, name + ".q", rng, c, c);
        k.init(reg, name + ".k", rng, ctx_dim, c);
        v.init(reg, name + ".v", rng, ctx_dim, c);
        o.init(reg, name + ".o", rng, c, c);
    }
    // x [N,T,C], ctx [N,S,ctx_dim]
    Var operator()(const Var& x, const Var& ctx) const {
        int64_t N = x->val.dim(0), T = x->val.dim(1), C = x->val.dim(2);
        int64_t S = ctx->val.dim(1), D = ctx->val.dim(2);
        Var qv = ag::view(q(ag::view(x, {N * T, C})), {N, T, C});
        Var kv = ag::view(k(ag::view(ctx, {N * S, D})), {N, S, C});
        Var vv = ag::view(v(ag::view(ctx, {N * S, D})), {N, S, C});
        Var att = ag::merge_heads(
            ag::attention(ag::split_heads(qv, heads), ag::split_heads(kv, heads), ag::split_heads(vv, heads)),
            heads);
        return ag::view(o(ag::view(att, {N * T, C})), {N, T, C});
    }
    int64_t flops(int64_t t, int64_t s, int64_t c, int64_t ctx_dim) const {
        int64_t proj = q.flops(t) + k.flops(s) + v.flops(s) + o.flops(t);
        int64_t core = 2 * t * s * c + 5 * t * s + 2 * t * s * c;
        return proj + core;
    }
};

inline int64_t gn_flops(int64_t numel) { return 10 * numel; }
inline int64_t silu_flops(int64_t numel) { return 12 * numel; }

// Convolutional residual block with timestep-embedding injection.
// combined = C(x) + path(x); path is identity or a learned 1x1 projection.
struct ResBlock {
    NormLayer gn1, gn2;
    ConvLayer conv1, conv2;
    LinearLayer temb_proj;
    ConvLayer skip;
    bool has_skip_proj = false;
    int64_t cin = 0, cout = 0;

    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t cin_, int64_t cout_,
              int64_t groups, int64_t temb_dim) {
        cin = cin_;
        cout = cout_;
        gn1.init(reg, name + ".gn1", cin, groups);
        conv1.init(reg, name + ".conv1", rng, cin, cout, 3, 1, 1);
        temb_proj.init(reg, name + ".temb", rng, temb_dim, cout);
        gn2.init(reg, name + ".gn2", cout, groups);
        conv2.init(reg, name + ".conv2", rng, cout, cout, 3, 1, 1, /*zero=*/true);
        has_skip_proj = (cin != cout);
        if (has_skip_proj) skip.init(reg, name + ".skip", rng, cin, cout, 1, 1, 0);
    }

    Var compute_residual(const Var& x, const Var& temb) const {
        Var h = conv1(ag::silu(gn1(x)));
        h = ag::add_channel_bias(h, temb_proj(ag::silu(temb)));
        return conv2(ag::silu(gn2(h)));
    }

    Var path(const Var& x) const { return has_skip_proj ? skip(x) : x; }

    int64_t flops_residual(int64_t h, int64_t w, int64_t temb_dim) const {
        int64_t f = gn_flops(cin * h * w) + silu_flops(cin * h * w) + conv1.flops(h, w);
        f += silu_flops(temb_dim) + temb_proj.flops(1) + cout * h * w;
        f += gn_flops(cout * h * w) + silu_flops(cout * h * w) + conv2.flops(h, w);
        return f;
    }
    int64_t flops_path(int64_t h, int64_t w) const {
        return has_skip_proj ? skip.flops(h, w) : cout * h * w;
    }
};

struct TransformerLayer {
    TokenNorm ln1, ln2, ln3;
    AttnLayer self_attn, cross_attn;
    LinearLayer ff1, ff2;

    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t c, int64_t cond_dim,
              int64_t head_dim, int64_t ff_mult) {
        ln1.init(reg, name + ".ln1", c);
        self_attn.init(reg, name + ".self", rng, c, c, head_dim);
        ln2.init(reg, name + ".ln2", c);
        cross_attn.init(reg, name + ".cross", rng, c, cond_dim, head_dim);
        ln3.init(reg, name + ".ln3", c);
        ff1.init(reg, name + ".ff1", rng, c, c * ff_mult);
        ff2.init(reg, name + ".ff2", rng, c * ff_mult, c);
    }

    Var operator()(const Var& x, const Var& cond_tokens) const {
        Var n1 = ln1(x);
        Var h = ag::add(x, self_attn(n1, n1));
        h = ag::add(h, cross_attn(ln2(h), cond_tokens));
        int64_t N = h->val.dim(0), T = h->val.dim(1), C = h->val.dim(2);
        Var f = ag::view(ff2(ag::silu(ff1(ag::view(ln3(h), {N * T, C})))), {N, T, C});
        return ag::add(h, f);
    }

    int64_t flops(int64_t t, int64_t c, int64_t cond_dim) const {
        int64_t ln = 3 * gn_flops(t * c);
        int64_t sa = self_attn.flops(t, t, c, c);
        int64_t ca = cross_attn.flops(t, 1, c, cond_dim);
        int64_t ff = ff1.flops(t) + silu_flops(t * c * (ff1.w->val.dim(0) / c)) + ff2.flops(t);
        return ln + sa + ca + ff + 3 * t * c;
    }
};

// Self-attention, cross-attention against the conditioning, pointwise FF,
// on flattened spatial tokens. combined = C(x) + x.
struct SpatialTransformer {
    NormLayer gn;
    ConvLayer proj_in, proj_out;
    std::vector<TransformerLayer> layers;
    int64_t channels = 0;

    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t c, int64_t cond_dim,
              int64_t groups, int64_t head_dim, int64_t depth, int64_t ff_mult) {
        channels = c;
        gn.init(reg, name + ".gn", c, groups);
        proj_in.init(reg, name + ".proj_in", rng, c, c, 1, 1, 0);
        layers.resize(static_cast<size_t>(depth));
        for (int64_t d = 0; d < depth; ++d)
            layers[static_cast<size_t>(d)].init(reg, name + ".t" + std::to_string(d), rng, c, cond_dim,
                                                head_dim, ff_mult);
        proj_out.init(reg, name + ".proj_out", rng, c, c, 1, 1, 0, /*zero=*/true);
    }

    Var compute_residual(const Var& x, const Var& cond_tokens) const {
        int64_t H = x->val.dim(2), W = x->val.dim(3);
        Var h = proj_in(gn(x));
        Var t = ag::nchw_to_tokens(h);
        for (const auto& layer : layers) t = layer(t, cond_tokens);
        return proj_out(ag::tokens_to_nchw(t, H, W));
    }

    int64_t flops_residual(int64_t h, int64_t w, int64_t cond_dim) const {
        int64_t t = h * w;
        int64_t f = gn_flops(channels * t) + proj_in.flops(h, w) + proj_out.flops(h, w);
        for (const auto& layer : layers) f += layer.flops(t, channels, cond_dim);
        return f;
    }
};

struct Resample {
    bool down = true;
    ConvLayer conv;
    void init(ParamRegistry& reg, const std::string& name, Rng& rng, int64_t c, bool down_) {
        down = down_;
        conv.init(reg, name + ".conv", rng, c, c, 3, down_ ? 2 : 1, 1);
    }
    Var operator()(const Var& x) const { return down ? conv(x) : conv(ag::upsample_nearest2x(x)); }
    int64_t flops(int64_t ho, int64_t wo) const { return conv.flops(ho, wo); }
};

struct BlockResult {
    Var residual;  // null when a full-output cache bypassed the decomposition
    Var combined;
};

// Hook consulted for every block; the caching executor implements it.
struct BlockHook {
    virtual ~BlockHook() = default;
    virtual BlockResult on_block(const BlockId& id, const std::function<Var()>& compute_residual,
                                 const Var& path, const Var& t_emb) = 0;
    virtual void on_always(const BlockId& id) {}
};

struct TapEntry {
    BlockId id;
    Tensor residual;
    Tensor combined;
};

struct Tap {
    std::vector<TapEntry> entries;
};

struct Block {
    BlockId id;
    std::unique_ptr<ResBlock> res;
    std::unique_ptr<SpatialTransformer> st;
    std::unique_ptr<Resample> resample;
    bool pop_skip = false;   // decoder resblock: concat popped skip into input
    bool push_skip = false;  // encoder: push output for the decoder
    int64_t flops_c = 0;     // cost of compute_residual (the skippable part)
    int64_t flops_path = 0;  // residual path, always computed
};

struct FlopSummary {
    std::vector<std::pair<BlockId, int64_t>> block_flops;  // skippable C_i per block
    int64_t path_flops = 0;                                // residual paths, per forward
    int64_t fixed_flops = 0;                               // stem, head, embeddings
    int64_t total() const {
        int64_t t = path_flops + fixed_flops;
        for (const auto& [id, f] : block_flops) t += f;
        return t;
    }
};

// The toy U-Net: epsilon-prediction, class-conditional via cross-attention,
// per-block residual decomposition exposed for instrumentation and caching.
struct UNet {
    ModelConfig cfg;
    ParamRegistry reg;
    ConvLayer conv_in, conv_out;
    NormLayer out_gn;
    LinearLayer temb1, temb2;
    Var cond_table;
    std::vector<Block> blocks;
    FlopSummary flop_summary_;

    explicit UNet(const ModelConfig& c, uint64_t init_seed = 42) : cfg(c) {
        cfg.validate();
        Rng rng(init_seed);
        int64_t td = cfg.time_embed_dim;
        temb1.init(reg, "temb.fc1", rng, td, td);
        temb2.init(reg, "temb.fc2", rng, td, td);
        cond_table = reg.add("cond.table", init_weight(rng, {cfg.num_classes, td}, td));
        conv_in.init(reg, "conv_in", rng, cfg.in_channels, cfg.channels(0), 3, 1, 1);

        int L = cfg.levels();
        int64_t cur = cfg.channels(0);
        int64_t res = cfg.image_size;
        auto add_res = [&](Section sec, int lvl, int idx, int64_t cin, int64_t cout, bool pop, int64_t r) {
            Block b;
            b.id = {sec, lvl, idx, BlockKind::resblock};
            b.res = std::make_unique<ResBlock>();
            b.res->init(reg, b.id.str(), rng, cin, cout, cfg.norm_groups, td);
            b.pop_skip = pop;
            b.flops_c = b.res->flops_residual(r, r, td);
            b.flops_path = b.res->flops_path(r, r);
            blocks.push_back(std::move(b));
        };
        auto add_st = [&](Section sec, int lvl, int idx, int64_t c, int64_t r) {
            Block b;
            b.id = {sec, lvl, idx, BlockKind::spatial_transformer};
            b.st = std::make_unique<SpatialTransformer>();
            b.st->init(reg, b.id.str(), rng, c, td, cfg.norm_groups, cfg.head_dim,
                       cfg.transformer_depth, cfg.ff_mult);
            b.flops_c = b.st->flops_residual(r, r, td);
            b.flops_path = c * r * r;
            blocks.push_back(std::move(b));
        };

        for (int l = 0; l < L; ++l) {
            for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
                add_res(Section::input, l, static_cast<int>(i), cur, cfg.channels(l), false, res);
                cur = cfg.channels(l);
                if (cfg.has_attention(l)) add_st(Section::input, l, static_cast<int>(i), cur, res);
                blocks.back().push_skip = true;
            }
            if (l + 1 < L) {
                Block b;
                b.id = {Section::input, l, static_cast<int>(cfg.blocks_per_level), BlockKind::resample};
                b.resample = std::make_unique<Resample>();
                b.resample->init(reg, b.id.str(), rng, cur, /*down=*/true);
                res /= 2;
                b.flops_c = b.resample->flops(res, res);
                blocks.push_back(std::move(b));
            }
        }
        int ml = L - 1;
        add_res(Section::middle, ml, 0, cur, cur, false, res);
        add_st(Section::middle, ml, 1, cur, res);
        add_res(Section::middle, ml, 2, cur, cur, false, res);
        for (int l = L - 1; l >= 0; --l) {
            for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
                add_res(Section::output, l, static_cast<int>(i), cur + cfg.channels(l), cfg.channels(l),
                        /*pop=*/true, res);
                cur = cfg.channels(l);
                if (cfg.has_attention(l)) add_st(Section::output, l, static_cast<int>(i), cur, res);
            }
            if (l > 0) {
                Block b;
                b.id = {Section::output, l, static_cast<int>(cfg.blocks_per_level), BlockKind::resample};
                b.resample = std::make_unique<Resample>();
                b.resample->init(reg, b.id.str(), rng, cur, /*down=*/false);
                res *= 2;
                b.flops_c = b.resample->flops(res, res);
                blocks.push_back(std::move(b));
            }
        }
        out_gn.init(reg, "out.gn", cfg.channels(0), cfg.norm_groups);
        conv_out.init(reg, "out.conv", rng, cfg.channels(0), cfg.in_channels, 3, 1, 1, /*zero=*/true);

        // FLOP summary (per sample, one branch)
        int64_t sz = cfg.image_size;
        flop_summary_.fixed_flops = conv_in.flops(sz, sz) + conv_out.flops(sz, sz) +
                                    gn_flops(cfg.channels(0) * sz * sz) + silu_flops(cfg.channels(0) * sz * sz) +
                                    temb1.flops(1) + temb2.flops(1) + silu_flops(2 * td);
        for (const auto& b : blocks) {
            flop_summary_.block_flops.emplace_back(b.id, b.flops_c);
            flop_summary_.path_flops += b.flops_path;
        }
    }

    const FlopSummary& flops() const { return flop_summary_; }

    int64_t block_channels(const BlockId& id) const {
        for (const auto& b : blocks)
            if (b.id == id) {
                if (b.st) return b.st->channels;
                if (b.res) return b.res->cout;
                return b.resample->conv.w->val.dim(0);
            }
        throw std::runtime_error("unknown block " + id.str());
    }

    std::vector<BlockId> block_ids() const {
        std::vector<BlockId> out;
        for (const auto& b : blocks) out.push_back(b.id);
        return out;
    }

    void set_requires_grad(bool v) const {
        for (const auto& [n, p] : reg.items) p->needs_grad = v;
    }

    uint64_t weights_checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [n, p] : reg.items) {
            h = fnv1a(n, h);
            h = fnv1a(p->val.data.data(), p->val.data.size() * sizeof(float), h);
        }
        return h;
    }

    Var forward_var(const Var& x, const std::vector<float>& ts, const std::vector<int64_t>& conds,
                    Tap* tap = nullptr, BlockHook* hook = nullptr) const {
        int64_t N = x->val.dim(0);
        check(x->val.rank() == 4 && x->val.dim(1) == cfg.in_channels && x->val.dim(2) == cfg.image_size &&
                  x->val.dim(3) == cfg.image_size,
              "forward: input " + x->val.shape_str() + " does not match model geometry");
        check(static_cast<int64_t>(ts.size()) == N && static_cast<int64_t>(conds.size()) == N,
              "forward: ts/conds must have one entry per sample");
        for (int64_t c : conds) check(c >= 0 && c < cfg.num_classes, "forward: cond id out of range");

        Var temb = ag::constant(timestep_embedding(ts, cfg.time_embed_dim));
        temb = temb2(ag::silu(temb1(temb)));
        Var cond_tokens = ag::view(ag::embedding(cond_table, conds), {N, 1, cfg.time_embed_dim});

        Var h = conv_in(x);
        std::vector<Var> skips;
        for (const auto& b : blocks) {
            if (b.resample) {
                h = (*b.resample)(h);
                if (hook) hook->on_always(b.id);
                if (tap) tap->entries.push_back({b.id, h->val, h->val});
                continue;
            }
            Var input = h;
            if (b.pop_skip) {
                check(!skips.empty(), "forward: decoder block " + b.id.str() + " missing skip input");
                input = ag::concat_channels(h, skips.back());
                skips.pop_back();
            }
            Var path;
            std::function<Var()> compute;
            if (b.res) {
                path = b.res->path(input);
                compute = [&b, input, temb] { return b.res->compute_residual(input, temb); };
            } else {
                path = input;
                compute = [&b, input, cond_tokens] { return b.st->compute_residual(input, cond_tokens); };
            }
            BlockResult r;
            if (hook) {
                r = hook->on_block(b.id, compute, path, temb);
            } else {
                r.residual = compute();
                r.combined = ag::add(r.residual, path);
            }
            if (tap && r.residual) tap->entries.push_back({b.id, r.residual->val, r.combined->val});
            h = r.combined;
            if (b.push_skip) skips.push_back(h);
        }
        check(skips.empty(), "forward: unconsumed skip connections");
        return conv_out(ag::silu(out_gn(h)));
    }

    Tensor forward(const Tensor& x, const std::vector<float>& ts, const std::vector<int64_t>& conds,
                   Tap* tap = nullptr, BlockHook* hook = nullptr) const {
        return forward_var(ag::constant(x), ts, conds, tap, hook)->val;
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.header_text = cfg.canonical_text();
        for (const auto& [n, p] : reg.items) ck.add(n, p->val);
        ck.save(path);
    }

    static UNet load(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        ModelConfig mc = ModelConfig::from_kv(KvFile::parse(ck.header_text));
        UNet net(mc);
        for (auto& [n, p] : net.reg.items) {
            const Tensor& t = ck.get(n);
            check(t.shape == p->val.shape, "checkpoint: shape mismatch for '" + n + "'");
            p->val = t;
        }
        return net;
    }
};

}  // namespace bc

#endif
