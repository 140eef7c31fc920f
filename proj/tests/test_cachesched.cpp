#include <doctest.h>

#include <unistd.h>

#include "blockcache/cachesched.hpp"

using namespace bc;

namespace {

// Synthetic trace: one row of per-step means per block (step 1 should be 0).
ChangeTrace synth(const std::vector<BlockId>& ids, const std::vector<std::vector<float>>& rows) {
    ChangeTrace tr;
    tr.block_ids = ids;
    tr.steps = static_cast<int64_t>(rows[0].size());
    tr.runs = 1;
    tr.fingerprint = "synthetic";
    tr.mean = Tensor({tr.num_blocks(), tr.steps});
    tr.stdev = Tensor({tr.num_blocks(), tr.steps});
    for (size_t b = 0; b < rows.size(); ++b)
        for (size_t s = 0; s < rows[b].size(); ++s)
            tr.mean.at({static_cast<int64_t>(b), static_cast<int64_t>(s)}) = rows[b][s];
    return tr;
}

const BlockId kSt{Section::input, 0, 0, BlockKind::spatial_transformer};
const BlockId kRes{Section::input, 0, 0, BlockKind::resblock};
const BlockId kResample{Section::input, 0, 1, BlockKind::resample};

// Independent greedy reference via prefix sums.
std::vector<int64_t> greedy_oracle(const std::vector<float>& mean, float delta, AccumFrom accum) {
    std::vector<int64_t> r{1};
    int64_t S = static_cast<int64_t>(mean.size());
    double acc = accum == AccumFrom::at ? mean[0] : 0.0;
    for (int64_t s = 2; s <= S; ++s) {
        double inc = mean[static_cast<size_t>(s - 1)];
        if (acc + inc > static_cast<double>(delta)) {
            r.push_back(s);
            acc = accum == AccumFrom::at ? inc : 0.0;
        } else {
            acc += inc;
        }
    }
    return r;
}

// Minimum number of recompute steps over all subsets containing step 1 whose
// every interval (including the trailing one) keeps its accumulated change
// at or below delta. Exhaustive, for small S.
int64_t exhaustive_min_recomputes(const std::vector<float>& mean, float delta, AccumFrom accum) {
    int64_t S = static_cast<int64_t>(mean.size());
    auto interval_ok = [&](int64_t ta, int64_t tb_incl) {
        if (tb_incl <= ta) return true;  // no cached steps in this interval
        int64_t lo = accum == AccumFrom::after ? ta + 1 : ta;
        float s = 0;
        for (int64_t t = lo; t <= tb_incl; ++t) s += mean[static_cast<size_t>(t - 1)];
        return s <= delta;
    };
    int64_t best = S + 1;
    for (uint64_t mask = 0; mask < (1ULL << (S - 1)); ++mask) {
        std::vector<int64_t> r{1};
        for (int64_t s = 2; s <= S; ++s)
            if (mask & (1ULL << (s - 2))) r.push_back(s);
        bool ok = true;
        for (size_t i = 0; ok && i < r.size(); ++i) {
            int64_t ta = r[i];
            int64_t tb = (i + 1 < r.size()) ? r[i + 1] - 1 : S;
            ok = interval_ok(ta, tb);
        }
        if (ok) best = std::min(best, static_cast<int64_t>(r.size()));
    }
    return best;
}

}  // namespace

TEST_CASE("derive_schedule hand example: constant 0.3 trace, delta 0.5, S=6") {
    ChangeTrace tr = synth({kSt}, {{0.0f, 0.3f, 0.3f, 0.3f, 0.3f, 0.3f}});
    CacheSchedule sc = derive_schedule(tr, 0.5f);
    REQUIRE(sc.recompute.size() == 1);
    CHECK(sc.recompute[0] == std::vector<int64_t>{1, 3, 5});
    std::string why;
    CHECK(verify_schedule_certificate(sc, tr, &why));
}

TEST_CASE("delta edge cases") {
    ChangeTrace tr = synth({kSt}, {{0.0f, 0.2f, 0.2f, 0.2f, 0.2f}});
    // delta 0: any positive change forces a recompute every step
    CacheSchedule all = derive_schedule(tr, 0.0f);
    CHECK(all.recompute[0] == std::vector<int64_t>{1, 2, 3, 4, 5});
    CHECK(verify_schedule_certificate(all, tr));
    // huge delta: only the mandatory first step
    CacheSchedule once = derive_schedule(tr, 1e9f);
    CHECK(once.recompute[0] == std::vector<int64_t>{1});
    CHECK(verify_schedule_certificate(once, tr));
    CHECK_THROWS(derive_schedule(tr, -0.1f));
}

TEST_CASE("accumulation conventions differ as designed") {
    ChangeTrace tr = synth({kSt}, {{0.0f, 0.4f, 0.4f, 0.4f}});
    CacheSchedule after = derive_schedule(tr, 0.5f, CachePolicy::spatial_transformer, AccumFrom::after);
    CacheSchedule at = derive_schedule(tr, 0.5f, CachePolicy::spatial_transformer, AccumFrom::at);
    CHECK(after.recompute[0] == std::vector<int64_t>{1, 3});
    CHECK(at.recompute[0] == std::vector<int64_t>{1, 3, 4});
    CHECK(verify_schedule_certificate(after, tr));
    CHECK(verify_schedule_certificate(at, tr));
}

TEST_CASE("policy gates which kinds are cacheable") {
    ChangeTrace tr = synth({kSt, kRes, kResample},
                           {{0.0f, 0.1f, 0.1f}, {0.0f, 0.1f, 0.1f}, {0.0f, 0.1f, 0.1f}});
    CacheSchedule st = derive_schedule(tr, 10.0f, CachePolicy::spatial_transformer);
    CHECK(st.recompute[0] == std::vector<int64_t>{1});        // transformer cached
    CHECK(st.recompute[1] == std::vector<int64_t>{1, 2, 3});  // resblock always computed
    CHECK(st.recompute[2] == std::vector<int64_t>{1, 2, 3});  // resample always computed
    CacheSchedule rb = derive_schedule(tr, 10.0f, CachePolicy::resblock);
    CHECK(rb.recompute[0] == std::vector<int64_t>{1, 2, 3});
    CHECK(rb.recompute[1] == std::vector<int64_t>{1});
    CHECK(verify_schedule_certificate(st, tr));
    CHECK(verify_schedule_certificate(rb, tr));
}

TEST_CASE("random synthetic traces: greedy matches independent reference and passes certificate") {
    Rng rng(500);
    for (int trial = 0; trial < 100; ++trial) {
        int64_t S = 5 + static_cast<int64_t>(rng.next_below(46));  // [5, 50]
        std::vector<float> mean(static_cast<size_t>(S), 0.0f);
        for (int64_t s = 1; s < S; ++s)
            mean[static_cast<size_t>(s)] = static_cast<float>(rng.next_uniform()) * 0.6f;
        float delta = static_cast<float>(rng.next_uniform()) * 1.2f;
        AccumFrom accum = (trial % 2 == 0) ? AccumFrom::after : AccumFrom::at;
        ChangeTrace tr = synth({kSt}, {mean});
        CacheSchedule sc = derive_schedule(tr, delta, CachePolicy::spatial_transformer, accum);
        std::string why;
        REQUIRE_MESSAGE(verify_schedule_certificate(sc, tr, &why), why);
        REQUIRE(sc.recompute[0] == greedy_oracle(mean, delta, accum));
    }
}

TEST_CASE("greedy recompute count equals exhaustive minimum for S <= 10") {
    Rng rng(501);
    for (int trial = 0; trial < 100; ++trial) {
        int64_t S = 3 + static_cast<int64_t>(rng.next_below(8));  // [3, 10]
        std::vector<float> mean(static_cast<size_t>(S), 0.0f);
        for (int64_t s = 1; s < S; ++s)
            mean[static_cast<size_t>(s)] = static_cast<float>(rng.next_uniform()) * 0.6f;
        float delta = static_cast<float>(rng.next_uniform()) * 1.2f;
        AccumFrom accum = (trial % 2 == 0) ? AccumFrom::after : AccumFrom::at;
        ChangeTrace tr = synth({kSt}, {mean});
        CacheSchedule sc = derive_schedule(tr, delta, CachePolicy::spatial_transformer, accum);
        REQUIRE(static_cast<int64_t>(sc.recompute[0].size()) ==
                exhaustive_min_recomputes(mean, delta, accum));
    }
}

TEST_CASE("certificate rejects tampered schedules") {
    ChangeTrace tr = synth({kSt}, {{0.0f, 0.3f, 0.3f, 0.3f, 0.3f, 0.3f}});
    CacheSchedule sc = derive_schedule(tr, 0.5f);  // {1,3,5}
    std::string why;

    CacheSchedule drop = sc;
    drop.recompute[0] = {1, 5};  // interval [1,5) accumulates 0.9 > 0.5
    CHECK_FALSE(verify_schedule_certificate(drop, tr, &why));
    CHECK(why.find("left inequality") != std::string::npos);

    CacheSchedule extra = sc;
    extra.recompute[0] = {1, 2, 3, 5};  // recompute at 2 not justified: 0.3 <= 0.5
    CHECK_FALSE(verify_schedule_certificate(extra, tr, &why));
    CHECK(why.find("right inequality") != std::string::npos);

    CacheSchedule nostep1 = sc;
    nostep1.recompute[0] = {2, 3, 5};
    CHECK_FALSE(verify_schedule_certificate(nostep1, tr, &why));

    CacheSchedule badfp = sc;
    badfp.fingerprint = "other";
    CHECK_FALSE(verify_schedule_certificate(badfp, tr, &why));

    CacheSchedule badsteps = sc;
    badsteps.steps = 7;
    CHECK_FALSE(verify_schedule_certificate(badsteps, tr, &why));
}

TEST_CASE("predict_cost closed form on a synthetic cost model") {
    ChangeTrace tr = synth({kSt, kRes}, {{0.0f, 0.3f, 0.3f, 0.3f, 0.3f, 0.3f},
                                         {0.0f, 0.1f, 0.1f, 0.1f, 0.1f, 0.1f}});
    CacheSchedule sc = derive_schedule(tr, 0.5f);  // st: {1,3,5}; res: all 6
    CostModel cm;
    cm.block_flops = {{kSt, 100}, {kRes, 10}};
    cm.per_step_overhead = 7;
    CostPrediction p = predict_cost(sc, cm);
    // baseline per branch: 6 * (110 + 7); cached: 3*100 + 6*10 + 6*7
    CHECK(p.baseline_flops == 2 * 6 * 117);
    CHECK(p.total_flops == 2 * (300 + 60 + 42));
    CHECK(p.speedup_vs_baseline == doctest::Approx(1404.0 / 804.0));
    CHECK(p.computed_evals == 2 * (3 + 6));
    CHECK(p.total_evals == 2 * 6 * 2);
    CHECK(p.computed_block_fraction == doctest::Approx(9.0 / 12.0));
}

TEST_CASE("sweep: speedup non-decreasing in delta, recommended point flagged") {
    Rng rng(502);
    std::vector<float> mean(20, 0.0f);
    for (int s = 1; s < 20; ++s) mean[static_cast<size_t>(s)] = static_cast<float>(rng.next_uniform()) * 0.4f;
    ChangeTrace tr = synth({kSt}, {mean});
    CostModel cm;
    cm.block_flops = {{kSt, 100}};
    cm.per_step_overhead = 10;
    std::vector<float> deltas = {0.1f, 0.3f, 0.5f, 0.7f, 1.0f};
    std::vector<SweepRow> rows = sweep_delta(tr, deltas, cm);
    REQUIRE(rows.size() == 5);
    for (size_t i = 1; i < rows.size(); ++i)
        CHECK(rows[i].cost.speedup_vs_baseline >= rows[i - 1].cost.speedup_vs_baseline);
    CHECK(rows[2].recommended);
    CHECK_FALSE(rows[0].recommended);
    CHECK_THROWS(sweep_delta(tr, {0.5f, 0.1f}, cm));  // unsorted grid
}

TEST_CASE("schedule file round-trip") {
    ChangeTrace tr = synth({kSt, kResample}, {{0.0f, 0.3f, 0.3f, 0.3f, 0.3f, 0.3f},
                                              {0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f}});
    tr.fingerprint = "0123456789abcdef";
    CacheSchedule sc = derive_schedule(tr, 0.5f, CachePolicy::spatial_transformer, AccumFrom::at);
    std::string path = "/tmp/bc_test_sched_" + std::to_string(::getpid()) + ".txt";
    sc.save(path);
    CacheSchedule back = CacheSchedule::load(path);
    CHECK(back.delta == sc.delta);
    CHECK(back.policy == sc.policy);
    CHECK(back.accumulate_from == sc.accumulate_from);
    CHECK(back.fingerprint == sc.fingerprint);
    CHECK(back.steps == sc.steps);
    REQUIRE(back.block_ids.size() == sc.block_ids.size());
    for (size_t i = 0; i < sc.block_ids.size(); ++i) CHECK(back.block_ids[i] == sc.block_ids[i]);
    CHECK(back.recompute == sc.recompute);
    std::remove(path.c_str());
    CHECK_THROWS(CacheSchedule::load("/nonexistent/schedule.txt"));
}

TEST_CASE("is_recompute agrees with the recompute lists") {
    ChangeTrace tr = synth({kSt}, {{0.0f, 0.3f, 0.3f, 0.3f, 0.3f, 0.3f}});
    CacheSchedule sc = derive_schedule(tr, 0.5f);
    for (int64_t s = 1; s <= 6; ++s)
        CHECK(sc.is_recompute(0, s) == (s == 1 || s == 3 || s == 5));
}
