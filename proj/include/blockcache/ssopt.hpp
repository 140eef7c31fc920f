#ifndef BLOCKCACHE_SSOPT_HPP
#define BLOCKCACHE_SSOPT_HPP

#include "blockcache/cacherun.hpp"

namespace bc {

// Wraps the caching executor and collects the combined outputs of blocks that
// consumed a cached value at the current step (the distillation targets).
struct CollectingHook : GenerationHook {
    CacheContext* inner;
    std::vector<std::pair<BlockId, Var>> collected;

    explicit CollectingHook(CacheContext* c) : inner(c) {}

    void begin_step(int64_t step, int branch) override { inner->begin_step(step, branch); }
    void end_generation() override { inner->end_generation(); }
    void on_always(const BlockId& id) override { inner->on_always(id); }

    BlockResult on_block(const BlockId& id, const std::function<Var()>& compute_residual,
                         const Var& path, const Var& t_emb) override {
        bool cached_here = inner->schedule->cacheable(id) &&
                           !inner->schedule->is_recompute(inner->schedule->block_index(id), inner->cur_step);
        BlockResult r = inner->on_block(id, compute_residual, path, t_emb);
        if (cached_here) collected.emplace_back(id, r.combined);
        return r;
    }
};

// One branch of the per-step distillation loss: run the student (caching +
// scale-shift) on x_t with gradients, run the frozen teacher (no caching) on
// the same x_t, and penalize per-block squared error on the cached blocks.
// Returns a null Var when no block is cached at this step.
inline Var ss_branch_loss(const UNet& model, CacheContext& ctx, const Tensor& x_t, float t,
                          int64_t cond, int64_t step, int branch, Tensor* eps_out = nullptr) {
    ctx.begin_step(step, branch);
    CollectingHook hook(&ctx);
    ag::GradGuard gg;  // spans the student forward and the loss terms
    Var eps = model.forward_var(ag::constant(x_t), {t}, {cond}, nullptr, &hook);
    if (eps_out) *eps_out = eps->val;
    if (hook.collected.empty()) return nullptr;
    Tap teacher_tap;
    {
        ag::NoGradGuard ng;
        model.forward(x_t, {t}, {cond}, &teacher_tap, nullptr);
    }
    Var loss;
    for (const auto& [id, student_out] : hook.collected) {
        const Tensor* target = nullptr;
        for (const auto& e : teacher_tap.entries)
            if (e.id == id) {
                target = &e.combined;
                break;
            }
        check(target != nullptr, "ssopt: teacher tap missing block " + id.str());
        Var term = ag::mse(student_out, ag::constant(*target));
        loss = loss ? ag::add(loss, term) : term;
    }
    return ag::scale(loss, 1.0f / static_cast<float>(hook.collected.size()));
}

struct SsOptConfig {
    int64_t iterations = 400;  // one optimizer update per student unroll
    float lr = 3e-4f;
    // Decoupled decay applied to the raw parameters after each update. The
    // correction is parameterized as a delta from identity, so this shrinks
    // toward plain caching and keeps the fit from overspecializing to the
    // training trajectories.
    float weight_decay = 10.0f;
    uint64_t seed = 1234;
};

struct SsFitReport {
    int64_t iterations = 0;
    int64_t unrolls = 0;
    float first_loss = 0.0f;
    float last_loss = 0.0f;
};

// Unrolls the caching student from noise, runs the frozen teacher on the
// student's trajectory at every step, and optimizes only the scale-shift
// parameters. Base weights are never modified.
inline ScaleShiftParams fit_scale_shift(const UNet& model, const CacheSchedule& schedule,
                                        const std::vector<int64_t>& conds, const SolverConfig& scfg,
                                        const NoiseSchedule& sched, const SsOptConfig& oc,
                                        SsFitReport* report = nullptr) {
    check(schedule.fingerprint == fingerprint(model.cfg, scfg),
          "ssopt: schedule fingerprint does not match model/solver configs");
    check(!conds.empty(), "ssopt: need at least one training cond");
    model.set_requires_grad(false);  // frozen teacher and student backbone
    ScaleShiftParams params = ScaleShiftParams::identity_for(model, schedule);
    params.set_requires_grad(true);
    Adam opt(params.params(), oc.lr);
    std::vector<int64_t> sel = select_timesteps(sched, scfg.steps);
    int64_t S = scfg.steps;
    int64_t uncond = model.cfg.uncond_class();

    int64_t iters = 0, unrolls = 0;
    bool first_recorded = false;
    float first_loss = 0.0f, last_loss = 0.0f;
    while (iters < oc.iterations) {
        int64_t cond = conds[static_cast<size_t>(unrolls) % conds.size()];
        Rng rng(oc.seed + static_cast<uint64_t>(unrolls));
        Tensor x = rng.normal_tensor({1, model.cfg.in_channels, model.cfg.image_size, model.cfg.image_size});
        CacheContext ctx(schedule, &params);
        SolverState state;
        // Gradients accumulate over the whole unroll; the update optimizes the
        // loss summed over steps and branches (per-step updates proved far
        // noisier: the optimizer then chases each step's moving distribution).
        double total = 0.0;
        int64_t terms = 0;
        for (int64_t i = 1; i <= S; ++i) {
            float t = static_cast<float>(sel[static_cast<size_t>(i - 1)]);
            Tensor eps_u, eps_c;
            Var lu = ss_branch_loss(model, ctx, x, t, uncond, i, 0, &eps_u);
            Var lc = ss_branch_loss(model, ctx, x, t, cond, i, 1, &eps_c);
            for (const Var& l : {lu, lc})
                if (l) {
                    total += static_cast<double>(l->val.data[0]);
                    ++terms;
                    ag::backward(l);
                }
            Tensor eps = cfg_combine(eps_u, eps_c, scfg.guidance_scale);
            x = solver_step(x, i, eps, scfg, sched, sel, state);
        }
        ++unrolls;
        if (terms == 0) break;  // schedule caches nothing: no parameters to train
        float mean_loss = static_cast<float>(total / static_cast<double>(terms));
        if (!first_recorded) {
            first_loss = mean_loss;
            first_recorded = true;
        }
        last_loss = mean_loss;
        opt.step();
        opt.zero_grad();
        if (oc.weight_decay > 0.0f) {
            float keep = 1.0f - oc.lr * oc.weight_decay;
            for (const Var& p : params.params())
                for (float& v : p->val.data) v *= keep;
        }
        ++iters;
    }
    params.set_requires_grad(false);
    if (report) *report = {iters, unrolls, first_loss, last_loss};
    return params;
}

struct SsEvalResult {
    float mean_block_mse = 0.0f;      // teacher-matching loss averaged over steps
    float image_l1_vs_baseline = 0.0f;  // final image L1 vs uncached same-seed baseline
};

// Held-out evaluation: unroll the student with the given params and measure
// teacher-matching MSE along the trajectory plus final-image divergence.
inline SsEvalResult evaluate_scale_shift(const UNet& model, const CacheSchedule& schedule,
                                         const ScaleShiftParams* params, int64_t cond,
                                         const SolverConfig& scfg, const NoiseSchedule& sched,
                                         uint64_t seed) {
    ag::NoGradGuard ng;
    std::vector<int64_t> sel = select_timesteps(sched, scfg.steps);
    Rng rng(seed);
    Tensor x = rng.normal_tensor({1, model.cfg.in_channels, model.cfg.image_size, model.cfg.image_size});
    model.set_requires_grad(false);
    ScaleShiftParams identity;
    const ScaleShiftParams* use = params;
    if (!use) {
        identity = ScaleShiftParams::identity_for(model, schedule);
        use = &identity;
    }
    use->set_requires_grad(false);
    CacheContext ctx(schedule, use);
    SolverState state;
    int64_t uncond = model.cfg.uncond_class();
    double total = 0.0;
    int64_t terms = 0;
    for (int64_t i = 1; i <= scfg.steps; ++i) {
        float t = static_cast<float>(sel[static_cast<size_t>(i - 1)]);
        Tensor eps_u, eps_c;
        Var lu = ss_branch_loss(model, ctx, x, t, uncond, i, 0, &eps_u);
        Var lc = ss_branch_loss(model, ctx, x, t, cond, i, 1, &eps_c);
        if (lu) {
            total += lu->val.data[0];
            ++terms;
        }
        if (lc) {
            total += lc->val.data[0];
            ++terms;
        }
        Tensor eps = cfg_combine(eps_u, eps_c, scfg.guidance_scale);
        x = solver_step(x, i, eps, scfg, sched, sel, state);
    }
    for (auto& v : x.data) v = std::min(1.0f, std::max(-1.0f, v));
    Tensor baseline = sample(model, cond, scfg, sched, seed);
    SsEvalResult r;
    r.mean_block_mse = terms ? static_cast<float>(total / static_cast<double>(terms)) : 0.0f;
    r.image_l1_vs_baseline = l1_distance(x, baseline) / static_cast<float>(x.numel());
    return r;
}

}  // namespace bc

#endif
