#include <doctest.h>

#include <unistd.h>

#include "blockcache/instrument.hpp"

using namespace bc;

namespace {

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.image_size = 8;
    mc.base_channels = 8;
    mc.channel_multipliers = {1, 2};
    mc.attention_levels = {0, 1};
    mc.norm_groups = 4;
    mc.head_dim = 8;
    mc.transformer_depth = 1;
    mc.time_embed_dim = 16;
    mc.num_classes = 3;
    return mc;
}

void perturb(UNet& model, uint64_t seed, float scale = 0.05f) {
    Rng rng(seed);
    for (auto& [n, p] : model.reg.items)
        for (auto& v : p->val.data) v += scale * rng.normal();
}

}  // namespace

TEST_CASE("l1_rel hand values") {
    Tensor curr({4}, {1.0f, -1.0f, 0.0f, 0.0f});  // |curr|_1 = 2
    Tensor prev({4}, {0.5f, -0.5f, 0.0f, 0.0f});  // distance = 1
    CHECK(l1_rel(curr, prev) == doctest::Approx(0.5f));
    // previous all-zero, current nonzero: relative change is exactly 1
    CHECK(l1_rel(curr, Tensor({4})) == doctest::Approx(1.0f));
    // identical tensors: 0
    CHECK(l1_rel(curr, curr) == doctest::Approx(0.0f));
    // zero denominator reports 0 and flags degeneracy
    bool degen = false;
    CHECK(l1_rel(Tensor({4}), prev, &degen) == 0.0f);
    CHECK(degen);
    degen = false;
    l1_rel(curr, prev, &degen);
    CHECK_FALSE(degen);
}

TEST_CASE("calibrate: determinism, step-1 convention, aggregation math") {
    UNet model(tiny_config(), 31);
    perturb(model, 32);
    NoiseSchedule sched = NoiseSchedule::linear();
    SolverConfig scfg;
    scfg.steps = 4;

    ChangeTrace a = calibrate(model, {0, 1}, {5, 6}, scfg, sched, /*keep_runs=*/true);
    ChangeTrace b = calibrate(model, {0, 1}, {5, 6}, scfg, sched);
    CHECK(a.runs == 4);
    CHECK(a.steps == 4);
    CHECK(a.fingerprint == fingerprint(model.cfg, scfg));
    CHECK(max_abs_diff(a.mean, b.mean) == 0.0f);
    CHECK(max_abs_diff(a.stdev, b.stdev) == 0.0f);

    // step 1 has no predecessor: stored as 0 with zero spread
    for (int64_t blk = 0; blk < a.num_blocks(); ++blk) {
        CHECK(a.mean.at({blk, 0}) == 0.0f);
        CHECK(a.stdev.at({blk, 0}) == 0.0f);
    }
    // later steps see real change on a non-degenerate model
    float total = 0;
    for (int64_t blk = 0; blk < a.num_blocks(); ++blk)
        for (int64_t st = 1; st < a.steps; ++st) total += a.mean.at({blk, st});
    CHECK(total > 0.0f);

    // mean/std match a direct recomputation from the retained runs
    REQUIRE(a.run_values.size() == 4);
    for (int64_t blk = 0; blk < a.num_blocks(); ++blk)
        for (int64_t st = 0; st < a.steps; ++st) {
            double m = 0, sq = 0;
            for (const auto& run : a.run_values) {
                double v = run[static_cast<size_t>(blk * a.steps + st)];
                m += v;
                sq += v * v;
            }
            m /= 4.0;
            double sd = std::sqrt(std::max(0.0, sq / 4.0 - m * m));
            CHECK(a.mean.at({blk, st}) == doctest::Approx(m).epsilon(1e-4));
            CHECK(a.stdev.at({blk, st}) == doctest::Approx(sd).epsilon(1e-3).scale(1.0));
        }
}

TEST_CASE("calibrate traces the conditional branch; uncond differs") {
    UNet model(tiny_config(), 33);
    perturb(model, 34);
    NoiseSchedule sched = NoiseSchedule::linear();
    SolverConfig scfg;
    scfg.steps = 3;
    ChangeTrace uncond;
    ChangeTrace cond = calibrate(model, {0}, {9}, scfg, sched, false, &uncond);
    CHECK(uncond.runs == cond.runs);
    CHECK(uncond.fingerprint == cond.fingerprint);
    CHECK(max_abs_diff(cond.mean, uncond.mean) > 0.0f);
}

TEST_CASE("trace csv round-trip and byte determinism") {
    UNet model(tiny_config(), 35);
    perturb(model, 36);
    NoiseSchedule sched = NoiseSchedule::linear();
    SolverConfig scfg;
    scfg.steps = 3;
    ChangeTrace tr = calibrate(model, {0}, {1}, scfg, sched);
    std::string p1 = "/tmp/bc_test_tr1_" + std::to_string(::getpid()) + ".csv";
    std::string p2 = "/tmp/bc_test_tr2_" + std::to_string(::getpid()) + ".csv";
    tr.save_csv(p1);
    ChangeTrace back = ChangeTrace::load_csv(p1);
    CHECK(back.steps == tr.steps);
    CHECK(back.runs == tr.runs);
    CHECK(back.fingerprint == tr.fingerprint);
    REQUIRE(back.num_blocks() == tr.num_blocks());
    CHECK(max_abs_diff(back.mean, tr.mean) == 0.0f);  // %.9g is lossless for f32
    CHECK(max_abs_diff(back.stdev, tr.stdev) == 0.0f);
    back.save_csv(p2);
    std::ifstream f1(p1), f2(p2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    CHECK_THROWS(ChangeTrace::load_csv("/nonexistent/trace.csv"));
}
