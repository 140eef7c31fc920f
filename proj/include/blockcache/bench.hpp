#ifndef BLOCKCACHE_BENCH_HPP
#define BLOCKCACHE_BENCH_HPP

#include <chrono>

#include <nlohmann/json.hpp>

#include "blockcache/cacherun.hpp"
#include "blockcache/ssopt.hpp"

extern "C" void openblas_set_num_threads(int);

namespace bc {

// Bit-determinism requires a fixed BLAS thread count; it is recorded in
// every report.
inline int pin_threads(int n = 1) {
    openblas_set_num_threads(n);
    return n;
}

inline double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct BenchRow {
    std::string name;
    SolverKind solver = SolverKind::ddim;
    int64_t steps = 0;
    bool caching = false;
    bool ss = false;
    double images_per_second = 0.0;
    double speedup_vs_reference = 1.0;
    double computed_block_fraction = 1.0;
    double final_image_l1_vs_baseline = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<uint64_t> seeds;
    int threads = 1;
    int repetitions = 5;
    double predicted_speedup = 1.0;
    double measured_speedup = 1.0;
    double delta = 0.0;
    std::string fingerprint;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["threads"] = threads;
        j["repetitions"] = repetitions;
        j["seeds"] = seeds;
        j["predicted_speedup"] = predicted_speedup;
        j["measured_speedup"] = measured_speedup;
        j["delta"] = delta;
        j["fingerprint"] = fingerprint;
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json row;
            row["name"] = r.name;
            row["solver"] = solver_name(r.solver);
            row["steps"] = r.steps;
            row["caching"] = r.caching;
            row["ss"] = r.ss;
            row["images_per_second"] = r.images_per_second;
            row["speedup_vs_reference"] = r.speedup_vs_reference;
            row["computed_block_fraction"] = r.computed_block_fraction;
            row["final_image_l1_vs_baseline"] = r.final_image_l1_vs_baseline;
            j["rows"].push_back(row);
        }
        return j;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        check(f.good(), "bench: cannot open " + path);
        f << to_json().dump(2) << "\n";
    }

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        check(f.good(), "bench: cannot open " + path);
        f << "name,solver,steps,caching,ss,images_per_second,speedup_vs_reference,"
             "computed_block_fraction,final_image_l1_vs_baseline\n";
        for (const auto& r : rows)
            f << r.name << "," << solver_name(r.solver) << "," << r.steps << "," << r.caching << "," << r.ss
              << "," << r.images_per_second << "," << r.speedup_vs_reference << ","
              << r.computed_block_fraction << "," << r.final_image_l1_vs_baseline << "\n";
    }
};

// Median-of-k wall-clock for generating all seeds with one configuration.
template <typename F>
inline double time_generation(F&& gen, const std::vector<uint64_t>& seeds, int reps) {
    gen(seeds[0]);  // warmup, excluded
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
        double t0 = now_seconds();
        for (uint64_t s : seeds) gen(s);
        times.push_back(now_seconds() - t0);
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

// Matched-latency comparison: baseline at the full step count, baseline at a
// reduced step count chosen so its predicted cost matches the cached run,
// caching, and caching + scale-shift.
inline BenchReport run_matched_latency(const UNet& model, const ChangeTrace& trace,
                                       const SolverConfig& scfg, float delta,
                                       const std::vector<uint64_t>& seeds, const NoiseSchedule& sched,
                                       const ScaleShiftParams* ss = nullptr, int reps = 5) {
    check(reps >= 5, "bench: need at least 5 repetitions");
    BenchReport rep;
    rep.threads = pin_threads(1);
    rep.repetitions = reps;
    rep.seeds = seeds;
    rep.delta = delta;
    rep.fingerprint = trace.fingerprint;

    CacheSchedule schedule = derive_schedule(trace, delta);
    CostModel cm = CostModel::from_model(model);
    CostPrediction pred = predict_cost(schedule, cm);
    rep.predicted_speedup = pred.speedup_vs_baseline;
    int64_t reduced = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(static_cast<double>(scfg.steps) / pred.speedup_vs_baseline)));

    int64_t cond = 0;
    std::vector<Tensor> baselines;
    for (uint64_t s : seeds) baselines.push_back(sample(model, cond, scfg, sched, s));

    auto divergence = [&](const Tensor& img, size_t i) {
        return static_cast<double>(l1_distance(img, baselines[i])) / static_cast<double>(img.numel());
    };

    // reference: baseline at the full step count
    {
        BenchRow row{"baseline", scfg.kind, scfg.steps, false, false};
        double t = time_generation([&](uint64_t s) { return sample(model, cond, scfg, sched, s); }, seeds, reps);
        row.images_per_second = static_cast<double>(seeds.size()) / t;
        rep.rows.push_back(row);
    }
    {
        SolverConfig rc = scfg;
        rc.steps = reduced;
        BenchRow row{"baseline_reduced", rc.kind, reduced, false, false};
        double mean_div = 0.0;
        size_t i = 0;
        for (uint64_t s : seeds) mean_div += divergence(sample(model, cond, rc, sched, s), i++);
        row.final_image_l1_vs_baseline = mean_div / static_cast<double>(seeds.size());
        double t = time_generation([&](uint64_t s) { return sample(model, cond, rc, sched, s); }, seeds, reps);
        row.images_per_second = static_cast<double>(seeds.size()) / t;
        rep.rows.push_back(row);
    }
    auto cached_row = [&](const char* name, const ScaleShiftParams* p) {
        BenchRow row{name, scfg.kind, scfg.steps, true, p != nullptr};
        double mean_div = 0.0;
        int64_t computed = 0, total = 0;
        size_t i = 0;
        for (uint64_t s : seeds) {
            CacheContext ctx(schedule, p);
            Tensor img = sample_cached(model, cond, scfg, sched, s, ctx);
            mean_div += divergence(img, i++);
            computed += ctx.computed;
            total += ctx.computed + ctx.skipped;
        }
        row.final_image_l1_vs_baseline = mean_div / static_cast<double>(seeds.size());
        row.computed_block_fraction = static_cast<double>(computed) / static_cast<double>(total);
        double t = time_generation(
            [&](uint64_t s) {
                CacheContext ctx(schedule, p);
                return sample_cached(model, cond, scfg, sched, s, ctx);
            },
            seeds, reps);
        row.images_per_second = static_cast<double>(seeds.size()) / t;
        rep.rows.push_back(row);
    };
    cached_row("caching", nullptr);
    if (ss) cached_row("caching_ss", ss);

    double ref_ips = rep.rows[0].images_per_second;
    for (auto& r : rep.rows) r.speedup_vs_reference = r.images_per_second / ref_ips;
    rep.measured_speedup = rep.rows[2].speedup_vs_reference;
    return rep;
}

struct AblationResult {
    float budget_fraction = 0.0f;
    struct PolicyResult {
        CachePolicy policy;
        float delta = 0.0f;
        double skipped_flop_fraction = 0.0;
        double mean_divergence = 0.0;
        double stddev_divergence = 0.0;
        bool budget_reached = true;
        bool certificate_ok = false;
    } transformer, resblock;

    nlohmann::json to_json() const {
        auto pj = [](const PolicyResult& p) {
            nlohmann::json j;
            j["policy"] = policy_name(p.policy);
            j["delta"] = p.delta;
            j["skipped_flop_fraction"] = p.skipped_flop_fraction;
            j["mean_divergence"] = p.mean_divergence;
            j["stddev_divergence"] = p.stddev_divergence;
            j["budget_reached"] = p.budget_reached;
            j["certificate_ok"] = p.certificate_ok;
            return j;
        };
        nlohmann::json j;
        j["budget_fraction"] = budget_fraction;
        j["transformer"] = pj(transformer);
        j["resblock"] = pj(resblock);
        return j;
    }
};

inline double skipped_fraction(const CacheSchedule& sc, const CostModel& cm) {
    CostPrediction p = predict_cost(sc, cm);
    return 1.0 - static_cast<double>(p.total_flops) / static_cast<double>(p.baseline_flops);
}

// Derives one schedule per policy skipping an equal FLOP fraction (bisection
// on delta) and compares final-image divergence from the uncached baseline.
inline AblationResult ablate_resblock_caching(const UNet& model, const ChangeTrace& trace,
                                              const SolverConfig& scfg, float budget_fraction,
                                              const std::vector<uint64_t>& seeds,
                                              const NoiseSchedule& sched) {
    CostModel cm = CostModel::from_model(model);
    AblationResult out;
    out.budget_fraction = budget_fraction;

    int64_t cond = 0;
    std::vector<Tensor> baselines;
    for (uint64_t s : seeds) baselines.push_back(sample(model, cond, scfg, sched, s));

    auto solve_policy = [&](CachePolicy pol) {
        AblationResult::PolicyResult pr;
        pr.policy = pol;
        double max_skip = skipped_fraction(derive_schedule(trace, 1e9f, pol), cm);
        if (max_skip < budget_fraction) {
            pr.budget_reached = false;
            pr.delta = 1e9f;
        } else {
            float lo = 0.0f, hi = 1e4f;
            for (int it = 0; it < 60; ++it) {
                float mid = 0.5f * (lo + hi);
                if (skipped_fraction(derive_schedule(trace, mid, pol), cm) < budget_fraction)
                    lo = mid;
                else
                    hi = mid;
            }
            pr.delta = hi;
        }
        CacheSchedule sc = derive_schedule(trace, pr.delta, pol);
        pr.skipped_flop_fraction = skipped_fraction(sc, cm);
        pr.certificate_ok = verify_schedule_certificate(sc, trace);
        std::vector<double> divs;
        for (size_t i = 0; i < seeds.size(); ++i) {
            CacheContext ctx(sc);
            Tensor img = sample_cached(model, cond, scfg, sched, seeds[i], ctx);
            divs.push_back(static_cast<double>(l1_distance(img, baselines[i])) /
                           static_cast<double>(img.numel()));
        }
        double m = 0.0;
        for (double d : divs) m += d;
        m /= static_cast<double>(divs.size());
        double var = 0.0;
        for (double d : divs) var += (d - m) * (d - m);
        pr.mean_divergence = m;
        pr.stddev_divergence = std::sqrt(var / static_cast<double>(divs.size()));
        return pr;
    };
    out.transformer = solve_policy(CachePolicy::spatial_transformer);
    out.resblock = solve_policy(CachePolicy::resblock);
    return out;
}

}  // namespace bc

#endif
