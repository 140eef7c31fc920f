#ifndef BLOCKCACHE_SCALE_SHIFT_HPP
#define BLOCKCACHE_SCALE_SHIFT_HPP

#include "blockcache/cachesched.hpp"

namespace bc {

// Timestep-conditioned per-channel affine correction for cached values:
// a linear map from the timestep embedding to (scale, shift) per channel.
// Zero-initialized weights plus constant offsets give an exact identity start.
struct ScaleShiftParams {
    struct Entry {
        BlockId id;
        int64_t channels = 0;
        Var w;  // [2C, temb_dim]
        Var b;  // [2C]
    };
    std::vector<Entry> entries;
    std::string fingerprint;

    static ScaleShiftParams identity_for(const UNet& model, const CacheSchedule& schedule) {
        ScaleShiftParams ss;
        ss.fingerprint = schedule.fingerprint;
        for (const BlockId& id : schedule.block_ids) {
            if (!schedule.cacheable(id)) continue;
            Entry e;
            e.id = id;
            e.channels = model.block_channels(id);
            e.w = ag::param(Tensor({2 * e.channels, model.cfg.time_embed_dim}));
            e.b = ag::param(Tensor({2 * e.channels}));
            ss.entries.push_back(std::move(e));
        }
        return ss;
    }

    const Entry* find(const BlockId& id) const {
        for (const auto& e : entries)
            if (e.id == id) return &e;
        return nullptr;
    }

    // cached [N,C,H,W], t_emb [N,temb_dim]
    Var apply(const Entry& e, const Var& cached, const Var& t_emb) const {
        check(cached->val.dim(1) == e.channels,
              "scale_shift: channel mismatch for " + e.id.str() + ", got " + cached->val.shape_str());
        Var sb = ag::linear(t_emb, e.w, e.b);
        Var sc = ag::add_const(ag::slice_cols(sb, 0, e.channels), 1.0f);
        Var sh = ag::slice_cols(sb, e.channels, e.channels);
        return ag::channel_affine(cached, sc, sh);
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        for (const auto& e : entries) {
            out.push_back(e.w);
            out.push_back(e.b);
        }
        return out;
    }

    void set_requires_grad(bool v) const {
        for (const auto& e : entries) {
            e.w->needs_grad = v;
            e.b->needs_grad = v;
        }
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        std::ostringstream hdr;
        hdr << "fingerprint=" << fingerprint << "\n";
        ck.header_text = hdr.str();
        for (const auto& e : entries) {
            ck.add("ss." + e.id.str() + ".w", e.w->val);
            ck.add("ss." + e.id.str() + ".b", e.b->val);
        }
        ck.save(path);
    }

    static ScaleShiftParams load(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        ScaleShiftParams ss;
        ss.fingerprint = KvFile::parse(ck.header_text).get("fingerprint");
        for (const auto& [name, t] : ck.entries) {
            if (name.size() < 6 || name.rfind("ss.", 0) != 0) continue;
            if (name.substr(name.size() - 2) != ".w") continue;
            Entry e;
            e.id = parse_block_id(name.substr(3, name.size() - 5));
            e.channels = t.dim(0) / 2;
            e.w = ag::param(t);
            e.b = ag::param(ck.get("ss." + e.id.str() + ".b"));
            ss.entries.push_back(std::move(e));
        }
        return ss;
    }
};

}  // namespace bc

#endif
