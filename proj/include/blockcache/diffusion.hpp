#ifndef BLOCKCACHE_DIFFUSION_HPP
#define BLOCKCACHE_DIFFUSION_HPP

#include "blockcache/denoiser.hpp"

namespace bc {

// Variance-preserving schedule, linear betas.
struct NoiseSchedule {
    int64_t T = 1000;
    Tensor betas;
    Tensor alpha_bars;

    static NoiseSchedule linear(int64_t T = 1000, float beta_min = 1e-4f, float beta_max = 2e-2f) {
        NoiseSchedule s;
        s.T = T;
        s.betas = Tensor({T});
        s.alpha_bars = Tensor({T});
        double prod = 1.0;
        for (int64_t t = 0; t < T; ++t) {
            double beta = beta_min + (beta_max - beta_min) * static_cast<double>(t) / static_cast<double>(T - 1);
            s.betas.data[static_cast<size_t>(t)] = static_cast<float>(beta);
            prod *= 1.0 - beta;
            s.alpha_bars.data[static_cast<size_t>(t)] = static_cast<float>(prod);
        }
        return s;
    }

    // t in [1..T]
    float alpha_bar(int64_t t) const {
        check(t >= 1 && t <= T, "noise schedule: t=" + std::to_string(t) + " out of [1," + std::to_string(T) + "]");
        return alpha_bars.data[static_cast<size_t>(t - 1)];
    }
    float signal(int64_t t) const { return std::sqrt(alpha_bar(t)); }
    float noise(int64_t t) const { return std::sqrt(1.0f - alpha_bar(t)); }
    float lambda(int64_t t) const { return 0.5f * std::log(alpha_bar(t) / (1.0f - alpha_bar(t))); }
};

inline Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& noise, const NoiseSchedule& sched) {
    check_same_shape(x0, noise, "q_sample");
    float a = sched.signal(t), s = sched.noise(t);
    Tensor out(x0.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + s * noise.data[i];
    return out;
}

inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, float g) {
    check_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_uncond.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = eps_uncond.data[i] + g * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

// Strictly decreasing subsequence of [1..T], uniform in log-SNR space.
inline std::vector<int64_t> select_timesteps(const NoiseSchedule& sched, int64_t steps) {
    check(steps >= 1 && steps <= sched.T, "select_timesteps: bad step count");
    std::vector<int64_t> sel(static_cast<size_t>(steps));
    if (steps == 1) {
        sel[0] = sched.T;
        return sel;
    }
    float lam_hi = sched.lambda(sched.T);
    float lam_lo = sched.lambda(1);
    for (int64_t i = 0; i < steps; ++i) {
        float target = lam_hi + (lam_lo - lam_hi) * static_cast<float>(i) / static_cast<float>(steps - 1);
        // lambda(t) is decreasing in t; nearest discrete t by scan from the top
        int64_t best = 1;
        float bestd = 1e30f;
        for (int64_t t = 1; t <= sched.T; ++t) {
            float d = std::fabs(sched.lambda(t) - target);
            if (d < bestd) {
                bestd = d;
                best = t;
            }
        }
        sel[static_cast<size_t>(i)] = best;
    }
    sel[0] = sched.T;
    for (size_t i = 1; i < sel.size(); ++i)
        if (sel[i] >= sel[i - 1]) sel[i] = sel[i - 1] - 1;
    // collisions near flat lambda regions can push the tail below 1; raise it
    // back while preserving strict descent (feasible because steps <= T)
    if (sel.back() < 1) {
        sel.back() = 1;
        for (size_t i = sel.size() - 1; i-- > 0;)
            if (sel[i] <= sel[i + 1]) sel[i] = sel[i + 1] + 1;
        check(sel[0] <= sched.T, "select_timesteps: too many steps for schedule");
        sel[0] = sched.T;
        check(sel.size() < 2 || sel[1] < sched.T, "select_timesteps: too many steps for schedule");
    }
    return sel;
}

// Multistep second-order state (previous epsilon prediction).
struct SolverState {
    Tensor prev_eps;
    bool has_prev = false;
    float prev_h = 0.0f;
};

// One solver update from selection[step_index-1] toward the next timestep
// (or to the clean image for the final step). DDIM eta=0 and DPM second-order
// multistep; the first DPM step falls back to first-order.
inline Tensor solver_step(const Tensor& x_t, int64_t step_index, const Tensor& eps_hat,
                          const SolverConfig& cfg, const NoiseSchedule& sched,
                          const std::vector<int64_t>& selection, SolverState& state) {
    int64_t S = cfg.steps;
    check(step_index >= 1 && step_index <= S, "solver_step: step index out of range");
    int64_t t_cur = selection[static_cast<size_t>(step_index - 1)];
    bool last = (step_index == S);
    float a_cur = sched.signal(t_cur), s_cur = sched.noise(t_cur);
    float a_next = last ? 1.0f : sched.signal(selection[static_cast<size_t>(step_index)]);
    float s_next = last ? 0.0f : sched.noise(selection[static_cast<size_t>(step_index)]);

    Tensor eps_eff = eps_hat;
    float h = last ? 0.0f : sched.lambda(selection[static_cast<size_t>(step_index)]) - sched.lambda(t_cur);
    if (cfg.kind == SolverKind::dpm2 && state.has_prev && !last) {
        float r = state.prev_h / h;
        float c = 1.0f / (2.0f * r);
        for (size_t i = 0; i < eps_eff.data.size(); ++i)
            eps_eff.data[i] = (1.0f + c) * eps_hat.data[i] - c * state.prev_eps.data[i];
    }
    state.prev_eps = eps_hat;
    state.has_prev = true;
    state.prev_h = h;

    Tensor out(x_t.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        float x0p = (x_t.data[i] - s_cur * eps_eff.data[i]) / a_cur;
        out.data[i] = a_next * x0p + s_next * eps_eff.data[i];
    }
    return out;
}

// Hook with per-step context, implemented by the caching executor.
struct GenerationHook : BlockHook {
    // branch: 0 = unconditional, 1 = conditional
    virtual void begin_step(int64_t step, int branch) { (void)step; (void)branch; }
    virtual void end_generation() {}
};

// Per-step per-branch tap recordings, used by calibration.
struct StepTaps {
    std::vector<Tap> cond;
    std::vector<Tap> uncond;
};

// Full guided sampling loop: two denoiser forwards per step.
inline Tensor sample(const UNet& model, int64_t cond, const SolverConfig& cfg,
                     const NoiseSchedule& sched, uint64_t seed, GenerationHook* hook = nullptr,
                     StepTaps* taps = nullptr) {
    ag::NoGradGuard ng;
    Rng rng(seed);
    Tensor x = rng.normal_tensor({1, model.cfg.in_channels, model.cfg.image_size, model.cfg.image_size});
    std::vector<int64_t> sel = select_timesteps(sched, cfg.steps);
    SolverState state;
    int64_t uncond = model.cfg.uncond_class();
    for (int64_t i = 1; i <= cfg.steps; ++i) {
        float t = static_cast<float>(sel[static_cast<size_t>(i - 1)]);
        if (hook) hook->begin_step(i, 0);
        Tap tap_u;
        Tensor eps_u = model.forward(x, {t}, {uncond}, taps ? &tap_u : nullptr, hook);
        if (hook) hook->begin_step(i, 1);
        Tap tap_c;
        Tensor eps_c = model.forward(x, {t}, {cond}, taps ? &tap_c : nullptr, hook);
        if (taps) {
            taps->uncond.push_back(std::move(tap_u));
            taps->cond.push_back(std::move(tap_c));
        }
        Tensor eps = cfg_combine(eps_u, eps_c, cfg.guidance_scale);
        x = solver_step(x, i, eps, cfg, sched, sel, state);
    }
    for (auto& v : x.data) v = std::min(1.0f, std::max(-1.0f, v));
    if (hook) hook->end_generation();
    return x;
}

// One epsilon-MSE gradient step over a batch; returns the loss.
inline float train_step(UNet& model, const std::vector<Tensor>& x0s, const std::vector<int64_t>& conds,
                        const NoiseSchedule& sched, Rng& rng, Adam& opt, float uncond_prob = 0.1f) {
    check(!x0s.empty() && x0s.size() == conds.size(), "train_step: batch mismatch");
    model.set_requires_grad(true);
    int64_t N = static_cast<int64_t>(x0s.size());
    int64_t C = model.cfg.in_channels, H = model.cfg.image_size;
    Tensor xt({N, C, H, H}), noise({N, C, H, H});
    std::vector<float> ts(static_cast<size_t>(N));
    std::vector<int64_t> cs(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
        int64_t t = 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(sched.T)));
        ts[static_cast<size_t>(n)] = static_cast<float>(t);
        cs[static_cast<size_t>(n)] =
            (rng.next_uniform() < uncond_prob) ? model.cfg.uncond_class() : conds[static_cast<size_t>(n)];
        Tensor nz = rng.normal_tensor({C, H, H});
        Tensor q = q_sample(x0s[static_cast<size_t>(n)], t, nz, sched);
        std::memcpy(noise.ptr() + n * C * H * H, nz.ptr(), sizeof(float) * static_cast<size_t>(C * H * H));
        std::memcpy(xt.ptr() + n * C * H * H, q.ptr(), sizeof(float) * static_cast<size_t>(C * H * H));
    }
    ag::GradGuard gg;
    Var pred = model.forward_var(ag::constant(xt), ts, cs, nullptr, nullptr);
    Var loss = ag::mse(pred, ag::constant(noise));
    float lv = loss->val.data[0];
    ag::backward(loss);
    opt.step();
    opt.zero_grad();
    return lv;
}

}  // namespace bc

#endif
