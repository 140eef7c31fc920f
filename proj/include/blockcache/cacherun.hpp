#ifndef BLOCKCACHE_CACHERUN_HPP
#define BLOCKCACHE_CACHERUN_HPP

#include "blockcache/diffusion.hpp"
#include "blockcache/scale_shift.hpp"

namespace bc {

// What gets cached: the pre-residual output C_i, re-added to the current
// residual-path input (default), or the whole block output B_i.
enum class CacheTarget { residual, full };

// Per-generation caching executor. Stores pre-residual outputs at recompute
// steps and injects them at cached steps, keeping conditional and
// unconditional branches isolated.
struct CacheContext : GenerationHook {
    const CacheSchedule* schedule = nullptr;
    const ScaleShiftParams* ss = nullptr;
    CacheTarget target = CacheTarget::residual;

    struct Slot {
        Tensor stored;
        int64_t computed_at = 0;
        bool valid = false;
    };
    std::vector<Slot> slots[2];  // [branch][block]
    int64_t computed = 0;
    int64_t skipped = 0;
    std::vector<int64_t> computed_per_block;
    int64_t cur_step = 0;
    int branch = 0;
    bool in_generation = false;
    bool finished = false;

    explicit CacheContext(const CacheSchedule& sched, const ScaleShiftParams* ss_ = nullptr,
                          CacheTarget target_ = CacheTarget::residual)
        : schedule(&sched), ss(ss_), target(target_) {
        if (ss) check(ss->fingerprint == sched.fingerprint,
                      "cache: scale-shift fingerprint " + ss->fingerprint +
                          " does not match schedule " + sched.fingerprint);
        reset();
    }

    void reset() {
        size_t n = static_cast<size_t>(schedule->num_blocks());
        slots[0].assign(n, Slot{});
        slots[1].assign(n, Slot{});
        computed = 0;
        skipped = 0;
        computed_per_block.assign(n, 0);
        cur_step = 0;
        branch = 0;
        in_generation = false;
        finished = false;
    }

    void begin_step(int64_t step, int br) override {
        check(!finished, "cache: context reused across generations without reset()");
        check(step >= 1 && step <= schedule->steps, "cache: step out of schedule range");
        cur_step = step;
        branch = br;
        in_generation = true;
    }

    void end_generation() override { finished = true; }

    void on_always(const BlockId& id) override {
        ++computed;
        ++computed_per_block[static_cast<size_t>(schedule->block_index(id))];
    }

    BlockResult on_block(const BlockId& id, const std::function<Var()>& compute_residual,
                         const Var& path, const Var& t_emb) override {
        check(in_generation, "cache: on_block outside begin_step");
        int64_t idx = schedule->block_index(id);
        Slot& slot = slots[branch][static_cast<size_t>(idx)];
        BlockResult r;
        if (!schedule->cacheable(id) || schedule->is_recompute(idx, cur_step)) {
            r.residual = compute_residual();
            r.combined = ag::add(r.residual, path);
            if (schedule->cacheable(id)) {
                slot.stored = (target == CacheTarget::residual) ? r.residual->val : r.combined->val;
                slot.computed_at = cur_step;
                slot.valid = true;
            }
            ++computed;
            ++computed_per_block[static_cast<size_t>(idx)];
        } else {
            check(slot.valid, "cache: miss for block " + id.str() + " at step " + std::to_string(cur_step) +
                                  " (schedule violated)");
            Var cached = ag::constant(slot.stored);
            if (target == CacheTarget::full) {
                r.combined = cached;
            } else {
                if (ss) {
                    const ScaleShiftParams::Entry* e = ss->find(id);
                    if (e) cached = ss->apply(*e, cached, t_emb);
                }
                r.residual = cached;
                r.combined = ag::add(cached, path);
            }
            ++skipped;
        }
        return r;
    }
};

// Convenience wrapper validating the schedule against the configs.
inline Tensor sample_cached(const UNet& model, int64_t cond, const SolverConfig& cfg,
                            const NoiseSchedule& sched, uint64_t seed, CacheContext& ctx) {
    check(ctx.schedule->fingerprint == fingerprint(model.cfg, cfg),
          "cache: schedule fingerprint " + ctx.schedule->fingerprint +
              " does not match model/solver " + fingerprint(model.cfg, cfg));
    check(ctx.schedule->steps == cfg.steps, "cache: schedule step count mismatch");
    return sample(model, cond, cfg, sched, seed, &ctx, nullptr);
}

}  // namespace bc

#endif
