#ifndef BLOCKCACHE_CACHESCHED_HPP
#define BLOCKCACHE_CACHESCHED_HPP

#include "blockcache/instrument.hpp"

namespace bc {

enum class CachePolicy { spatial_transformer, resblock };

inline const char* policy_name(CachePolicy p) {
    return p == CachePolicy::spatial_transformer ? "spatial_transformer" : "resblock";
}
inline CachePolicy parse_policy(const std::string& s) {
    if (s == "spatial_transformer") return CachePolicy::spatial_transformer;
    if (s == "resblock") return CachePolicy::resblock;
    throw std::runtime_error("unknown cache policy '" + s + "'");
}

// Whether the accumulated-change sum starts at the step after the recompute
// (the change arriving at the recompute step is in the cache) or at it.
enum class AccumFrom { after, at };

inline const char* accum_name(AccumFrom a) { return a == AccumFrom::after ? "after" : "at"; }
inline AccumFrom parse_accum(const std::string& s) {
    if (s == "after") return AccumFrom::after;
    if (s == "at") return AccumFrom::at;
    throw std::runtime_error("unknown accumulate_from '" + s + "'");
}

// Per-block ordered sets of recompute steps. Non-cacheable blocks carry [1..S].
struct CacheSchedule {
    float delta = 0.0f;
    CachePolicy policy = CachePolicy::spatial_transformer;
    AccumFrom accumulate_from = AccumFrom::after;
    std::string fingerprint;
    int64_t steps = 0;
    std::vector<BlockId> block_ids;
    std::vector<std::vector<int64_t>> recompute;  // sorted, per block

    int64_t num_blocks() const { return static_cast<int64_t>(block_ids.size()); }

    bool cacheable(const BlockId& id) const {
        if (id.kind == BlockKind::resample) return false;
        return (policy == CachePolicy::spatial_transformer) ? id.kind == BlockKind::spatial_transformer
                                                            : id.kind == BlockKind::resblock;
    }

    int64_t block_index(const BlockId& id) const {
        for (size_t i = 0; i < block_ids.size(); ++i)
            if (block_ids[i] == id) return static_cast<int64_t>(i);
        throw std::runtime_error("schedule: unknown block " + id.str());
    }

    bool is_recompute(int64_t block, int64_t step) const {
        const auto& r = recompute[static_cast<size_t>(block)];
        return std::binary_search(r.begin(), r.end(), step);
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        check(f.good(), "schedule: cannot open for write: " + path);
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(delta));
        f << "delta=" << buf << "\n";
        f << "policy=" << policy_name(policy) << "\n";
        f << "accumulate_from=" << accum_name(accumulate_from) << "\n";
        f << "fingerprint=" << fingerprint << "\n";
        f << "steps=" << steps << "\n";
        for (int64_t b = 0; b < num_blocks(); ++b) {
            f << block_ids[static_cast<size_t>(b)].str() << ": ";
            const auto& r = recompute[static_cast<size_t>(b)];
            for (size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << r[i];
            f << "\n";
        }
        check(f.good(), "schedule: write failed: " + path);
    }

    static CacheSchedule load(const std::string& path) {
        std::ifstream f(path);
        check(f.good(), "schedule: cannot open: " + path);
        CacheSchedule sc;
        std::string line;
        while (std::getline(f, line)) {
            line = KvFile::trim(line);
            if (line.empty() || line[0] == '#') continue;
            size_t colon = line.find(": ");
            size_t eq = line.find('=');
            if (colon != std::string::npos && (eq == std::string::npos || colon < eq)) {
                sc.block_ids.push_back(parse_block_id(line.substr(0, colon)));
                std::vector<int64_t> steps;
                std::istringstream ss(line.substr(colon + 2));
                std::string tok;
                while (std::getline(ss, tok, ',')) steps.push_back(std::stoll(KvFile::trim(tok)));
                sc.recompute.push_back(std::move(steps));
            } else {
                check(eq != std::string::npos, "schedule: bad line '" + line + "'");
                std::string k = KvFile::trim(line.substr(0, eq));
                std::string v = KvFile::trim(line.substr(eq + 1));
                if (k == "delta") sc.delta = std::stof(v);
                else if (k == "policy") sc.policy = parse_policy(v);
                else if (k == "accumulate_from") sc.accumulate_from = parse_accum(v);
                else if (k == "fingerprint") sc.fingerprint = v;
                else if (k == "steps") sc.steps = std::stoll(v);
                else throw std::runtime_error("schedule: unknown key '" + k + "'");
            }
        }
        check(sc.steps > 0 && !sc.block_ids.empty(), "schedule: incomplete file " + path);
        return sc;
    }
};

// Greedy left-to-right scan per block: refresh once the accumulated mean
// change would exceed delta.
inline CacheSchedule derive_schedule(const ChangeTrace& trace, float delta,
                                     CachePolicy policy = CachePolicy::spatial_transformer,
                                     AccumFrom accum = AccumFrom::after) {
    check(delta >= 0.0f, "derive_schedule: delta must be >= 0");
    CacheSchedule sc;
    sc.delta = delta;
    sc.policy = policy;
    sc.accumulate_from = accum;
    sc.fingerprint = trace.fingerprint;
    sc.steps = trace.steps;
    sc.block_ids = trace.block_ids;
    int64_t S = trace.steps;
    for (int64_t b = 0; b < trace.num_blocks(); ++b) {
        std::vector<int64_t> r;
        if (!sc.cacheable(trace.block_ids[static_cast<size_t>(b)])) {
            for (int64_t s = 1; s <= S; ++s) r.push_back(s);
        } else {
            r.push_back(1);
            float acc = (accum == AccumFrom::at) ? trace.mean.at({b, 0}) : 0.0f;
            for (int64_t s = 2; s <= S; ++s) {
                float inc = trace.mean.at({b, s - 1});
                if (acc + inc > delta) {
                    r.push_back(s);
                    acc = (accum == AccumFrom::at) ? inc : 0.0f;
                } else {
                    acc += inc;
                }
            }
        }
        sc.recompute.push_back(std::move(r));
    }
    return sc;
}

// Interval certificate: every consecutive recompute pair must satisfy the
// two-sided accumulated-change inequality under the active convention, and
// the trailing interval the left inequality. Enumerates intervals directly
// from the trace.
inline bool verify_schedule_certificate(const CacheSchedule& sc, const ChangeTrace& trace,
                                        std::string* why = nullptr) {
    auto fail = [&](const std::string& msg) {
        if (why) *why = msg;
        return false;
    };
    if (sc.steps != trace.steps) return fail("step count mismatch");
    if (sc.fingerprint != trace.fingerprint) return fail("fingerprint mismatch");
    int64_t S = sc.steps;
    for (int64_t b = 0; b < sc.num_blocks(); ++b) {
        const BlockId& id = sc.block_ids[static_cast<size_t>(b)];
        const auto& r = sc.recompute[static_cast<size_t>(b)];
        if (!sc.cacheable(id)) {
            if (static_cast<int64_t>(r.size()) != S) return fail(id.str() + ": non-cacheable block not computed everywhere");
            continue;
        }
        if (r.empty() || r[0] != 1) return fail(id.str() + ": schedule must recompute at step 1");
        auto interval_sum = [&](int64_t ta, int64_t tb_incl) {
            // accumulated change over the interval starting at recompute ta
            int64_t lo = (sc.accumulate_from == AccumFrom::after) ? ta + 1 : ta;
            float s = 0.0f;
            for (int64_t t = lo; t <= tb_incl; ++t) s += trace.mean.at({b, t - 1});
            return s;
        };
        for (size_t j = 0; j + 1 < r.size(); ++j) {
            int64_t ta = r[j], tb = r[j + 1];
            if (tb <= ta) return fail(id.str() + ": recompute steps not increasing");
            // the left inequality covers the cached steps (ta, tb); it is
            // vacuous when none exist (back-to-back recomputes)
            if (tb > ta + 1 && interval_sum(ta, tb - 1) > sc.delta)
                return fail(id.str() + ": left inequality violated at interval [" + std::to_string(ta) + "," +
                            std::to_string(tb) + ")");
            if (!(sc.delta < interval_sum(ta, tb)))
                return fail(id.str() + ": right inequality violated at t_b=" + std::to_string(tb));
        }
        if (r.back() < S && interval_sum(r.back(), S) > sc.delta)
            return fail(id.str() + ": trailing interval exceeds delta");
    }
    return true;
}

// Per-block skippable FLOPs plus the always-run per-step cost, derived from
// the model geometry.
struct CostModel {
    std::vector<std::pair<BlockId, int64_t>> block_flops;
    int64_t per_step_overhead = 0;  // per guidance branch

    static CostModel from_model(const UNet& model) {
        CostModel cm;
        const FlopSummary& fs = model.flops();
        cm.block_flops = fs.block_flops;
        cm.per_step_overhead = fs.fixed_flops + fs.path_flops;
        return cm;
    }

    int64_t flops_of(const BlockId& id) const {
        for (const auto& [bid, f] : block_flops)
            if (bid == id) return f;
        throw std::runtime_error("cost model: unknown block " + id.str());
    }
};

struct CostPrediction {
    int64_t total_flops = 0;
    int64_t baseline_flops = 0;
    double speedup_vs_baseline = 1.0;
    double computed_block_fraction = 1.0;
    int64_t computed_evals = 0;  // both guidance branches
    int64_t total_evals = 0;
};

inline CostPrediction predict_cost(const CacheSchedule& schedule, const CostModel& cost) {
    CostPrediction p;
    int64_t S = schedule.steps;
    int64_t sum_f = 0, cached_f = 0;
    for (int64_t b = 0; b < schedule.num_blocks(); ++b) {
        int64_t f = cost.flops_of(schedule.block_ids[static_cast<size_t>(b)]);
        int64_t n = static_cast<int64_t>(schedule.recompute[static_cast<size_t>(b)].size());
        sum_f += f;
        cached_f += f * n;
        p.computed_evals += 2 * n;
    }
    p.total_evals = 2 * S * schedule.num_blocks();
    p.baseline_flops = 2 * S * (sum_f + cost.per_step_overhead);
    p.total_flops = 2 * (cached_f + S * cost.per_step_overhead);
    p.speedup_vs_baseline = static_cast<double>(p.baseline_flops) / static_cast<double>(p.total_flops);
    p.computed_block_fraction = static_cast<double>(p.computed_evals) / static_cast<double>(p.total_evals);
    return p;
}

struct SweepRow {
    float delta;
    CostPrediction cost;
    CacheSchedule schedule;
    bool recommended = false;  // the delta = 0.5 operating point
};

inline std::vector<SweepRow> sweep_delta(const ChangeTrace& trace, const std::vector<float>& deltas,
                                         const CostModel& cost,
                                         CachePolicy policy = CachePolicy::spatial_transformer,
                                         AccumFrom accum = AccumFrom::after) {
    for (size_t i = 1; i < deltas.size(); ++i)
        check(deltas[i] >= deltas[i - 1], "sweep_delta: deltas must be sorted ascending");
    std::vector<SweepRow> rows;
    for (float d : deltas) {
        SweepRow row{d, {}, derive_schedule(trace, d, policy, accum), std::fabs(d - 0.5f) < 1e-6f};
        row.cost = predict_cost(row.schedule, cost);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace bc

#endif
