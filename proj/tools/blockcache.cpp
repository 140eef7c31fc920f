// Command-line front end: train the toy model, calibrate change traces,
// derive caching schedules, fit scale-shift parameters, sample, sweep the
// delta grid, benchmark, and regenerate figures from saved artifacts.
#include <cstdio>
#include <filesystem>

#include <CLI11.hpp>

#include "blockcache/bench.hpp"
#include "blockcache/dataset.hpp"
#include "blockcache/io.hpp"
#include "blockcache/svg.hpp"

using namespace bc;

namespace {

// Exit codes: 0 ok, 2 invalid flags, 3 missing file, 4 fingerprint mismatch,
// 5 runtime failure.
struct MissingFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FingerprintError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string require_file(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path))
        throw MissingFileError(std::string(what) + " not found: " + path);
    return path;
}

void require_fingerprint(const std::string& have, const std::string& want, const char* what) {
    if (have != want)
        throw FingerprintError(std::string(what) + " fingerprint " + have +
                               " does not match model/solver " + want);
}

struct SolverFlags {
    std::string solver = "ddim";
    int64_t steps = 20;
    float guidance = 5.0f;

    void attach(CLI::App* cmd) {
        cmd->add_option("--solver", solver, "ddim or dpm2")->check(CLI::IsMember({"ddim", "dpm2"}));
        cmd->add_option("--steps", steps, "solver step count");
        cmd->add_option("--guidance", guidance, "classifier-free guidance scale");
    }
    SolverConfig to_config() const {
        SolverConfig c;
        c.kind = solver == "ddim" ? SolverKind::ddim : SolverKind::dpm2;
        c.steps = steps;
        c.guidance_scale = guidance;
        c.validate();
        return c;
    }
};

std::vector<uint64_t> seed_list(const std::vector<uint64_t>& explicit_seeds, uint64_t base, int64_t n) {
    if (!explicit_seeds.empty()) return explicit_seeds;
    std::vector<uint64_t> out;
    for (int64_t i = 0; i < n; ++i) out.push_back(base + static_cast<uint64_t>(i));
    return out;
}

std::vector<int64_t> train_classes(const ModelConfig& mc) {
    std::vector<int64_t> out;
    for (int64_t c = 0; c + 1 < mc.num_classes; ++c) out.push_back(c);
    return out;
}

int cmd_train(const std::string& config_path, const std::string& out, int64_t iterations,
              int64_t batch, float lr, uint64_t seed, int64_t log_every) {
    ModelConfig mc = config_path.empty()
                         ? ModelConfig{}
                         : ModelConfig::from_kv(KvFile::load(require_file(config_path, "model config")));
    mc.validate();
    UNet model(mc, seed);
    NoiseSchedule sched = NoiseSchedule::linear();
    Adam opt(model.reg.vars(), lr);
    Rng rng(seed + 1);
    std::vector<int64_t> classes = train_classes(mc);
    for (int64_t it = 1; it <= iterations; ++it) {
        std::vector<Tensor> xs;
        std::vector<int64_t> cs;
        for (int64_t b = 0; b < batch; ++b) {
            int64_t c = classes[rng.next_below(classes.size())];
            xs.push_back(make_sample(c, mc.image_size, rng));
            cs.push_back(c);
        }
        float loss = train_step(model, xs, cs, sched, rng, opt);
        if (log_every > 0 && (it % log_every == 0 || it == 1))
            std::printf("iter %lld loss %.6f\n", static_cast<long long>(it), loss);
    }
    model.save(out);
    std::printf("saved %s (checksum %s)\n", out.c_str(), hex64(model.weights_checksum()).c_str());
    return 0;
}

int cmd_calibrate(const std::string& model_path, const SolverFlags& sf,
                  const std::vector<int64_t>& conds_in, const std::vector<uint64_t>& seeds_in,
                  int64_t num_conds, int64_t num_seeds, uint64_t seed_base, const std::string& out,
                  const std::string& uncond_out) {
    UNet model = UNet::load(require_file(model_path, "model checkpoint"));
    SolverConfig scfg = sf.to_config();
    NoiseSchedule sched = NoiseSchedule::linear();
    std::vector<int64_t> conds = conds_in;
    if (conds.empty()) {
        std::vector<int64_t> all = train_classes(model.cfg);
        for (int64_t i = 0; i < num_conds && i < static_cast<int64_t>(all.size()); ++i)
            conds.push_back(all[static_cast<size_t>(i)]);
    }
    std::vector<uint64_t> seeds = seed_list(seeds_in, seed_base, num_seeds);
    ChangeTrace utrace;
    ChangeTrace trace = calibrate(model, conds, seeds, scfg, sched, false,
                                  uncond_out.empty() ? nullptr : &utrace);
    trace.save_csv(out);
    if (!uncond_out.empty()) utrace.save_csv(uncond_out);
    std::printf("calibrated %lld runs x %lld steps over %lld blocks -> %s\n",
                static_cast<long long>(trace.runs), static_cast<long long>(trace.steps),
                static_cast<long long>(trace.num_blocks()), out.c_str());
    return 0;
}

int cmd_schedule(const std::string& trace_path, float delta, const std::string& policy,
                 const std::string& accum, const std::string& model_path, const std::string& out) {
    ChangeTrace trace = ChangeTrace::load_csv(require_file(trace_path, "trace"));
    CacheSchedule sc = derive_schedule(trace, delta, parse_policy(policy), parse_accum(accum));
    std::string why;
    check(verify_schedule_certificate(sc, trace, &why), "schedule certificate failed: " + why);
    sc.save(out);
    std::printf("schedule delta=%g policy=%s -> %s (certificate ok)\n", static_cast<double>(delta),
                policy.c_str(), out.c_str());
    if (!model_path.empty()) {
        UNet model = UNet::load(require_file(model_path, "model checkpoint"));
        CostPrediction cp = predict_cost(sc, CostModel::from_model(model));
        std::printf("predicted speedup %.3f, computed block fraction %.3f\n", cp.speedup_vs_baseline,
                    cp.computed_block_fraction);
    }
    return 0;
}

NoiseSchedule sched_default() { return NoiseSchedule::linear(); }

int cmd_fit_ss(const std::string& model_path, const std::string& schedule_path, const SolverFlags& sf,
               int64_t iterations, float lr, float weight_decay, uint64_t seed,
               const std::string& out) {
    UNet model = UNet::load(require_file(model_path, "model checkpoint"));
    CacheSchedule sc = CacheSchedule::load(require_file(schedule_path, "schedule"));
    SolverConfig scfg = sf.to_config();
    require_fingerprint(sc.fingerprint, fingerprint(model.cfg, scfg), "schedule");
    SsOptConfig oc;
    oc.iterations = iterations;
    oc.lr = lr;
    oc.weight_decay = weight_decay;
    oc.seed = seed;
    SsFitReport rep;
    ScaleShiftParams ss = fit_scale_shift(model, sc, train_classes(model.cfg), scfg, sched_default(),
                                          oc, &rep);
    ss.save(out);
    std::printf("fit %lld iterations over %lld unrolls, loss %.6f -> %.6f, saved %s\n",
                static_cast<long long>(rep.iterations), static_cast<long long>(rep.unrolls),
                rep.first_loss, rep.last_loss, out.c_str());
    return 0;
}

int cmd_sample(const std::string& model_path, const SolverFlags& sf, int64_t cond, uint64_t seed,
               const std::string& schedule_path, const std::string& ss_path, const std::string& out) {
    UNet model = UNet::load(require_file(model_path, "model checkpoint"));
    SolverConfig scfg = sf.to_config();
    NoiseSchedule sched = sched_default();
    Tensor img;
    if (schedule_path.empty()) {
        check(ss_path.empty(), "--scale-shift requires --schedule");
        img = sample(model, cond, scfg, sched, seed);
    } else {
        CacheSchedule sc = CacheSchedule::load(require_file(schedule_path, "schedule"));
        require_fingerprint(sc.fingerprint, fingerprint(model.cfg, scfg), "schedule");
        ScaleShiftParams ss;
        const ScaleShiftParams* ssp = nullptr;
        if (!ss_path.empty()) {
            ss = ScaleShiftParams::load(require_file(ss_path, "scale-shift params"));
            require_fingerprint(ss.fingerprint, sc.fingerprint, "scale-shift params");
            ssp = &ss;
        }
        CacheContext ctx(sc, ssp);
        img = sample_cached(model, cond, scfg, sched, seed, ctx);
        std::printf("computed %lld block evals, skipped %lld\n", static_cast<long long>(ctx.computed),
                    static_cast<long long>(ctx.skipped));
    }
    write_ppm(out, img);
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

int cmd_sweep(const std::string& model_path, const std::string& trace_path, const SolverFlags& sf,
              std::vector<float> deltas, const std::vector<uint64_t>& seeds_in, int64_t num_seeds,
              uint64_t seed_base, int64_t cond, const std::string& out_csv, const std::string& out_svg) {
    UNet model = UNet::load(require_file(model_path, "model checkpoint"));
    ChangeTrace trace = ChangeTrace::load_csv(require_file(trace_path, "trace"));
    SolverConfig scfg = sf.to_config();
    require_fingerprint(trace.fingerprint, fingerprint(model.cfg, scfg), "trace");
    NoiseSchedule sched = sched_default();
    std::sort(deltas.begin(), deltas.end());
    std::vector<SweepRow> rows = sweep_delta(trace, deltas, CostModel::from_model(model));
    std::vector<uint64_t> seeds = seed_list(seeds_in, seed_base, num_seeds);
    std::vector<Tensor> baselines;
    for (uint64_t s : seeds) baselines.push_back(sample(model, cond, scfg, sched, s));
    std::ofstream f(out_csv);
    check(f.good(), "sweep: cannot open " + out_csv);
    f << "# fingerprint=" << trace.fingerprint << "\n";
    f << "delta,predicted_speedup,computed_block_fraction,mean_divergence,recommended\n";
    ChartSeries sp{"predicted speedup", "#1f77b4", {}, {}};
    ChartSeries dv{"image divergence", "#d62728", {}, {}};
    for (const auto& row : rows) {
        double div = 0.0;
        for (size_t i = 0; i < seeds.size(); ++i) {
            CacheContext ctx(row.schedule);
            Tensor img = sample_cached(model, cond, scfg, sched, seeds[i], ctx);
            div += static_cast<double>(l1_distance(img, baselines[i])) / static_cast<double>(img.numel());
        }
        div /= static_cast<double>(seeds.size());
        char buf[160];
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g,%d", static_cast<double>(row.delta),
                      row.cost.speedup_vs_baseline, row.cost.computed_block_fraction, div,
                      row.recommended ? 1 : 0);
        f << buf << "\n";
        sp.x.push_back(static_cast<double>(row.delta));
        sp.y.push_back(row.cost.speedup_vs_baseline);
        dv.x.push_back(static_cast<double>(row.delta));
        dv.y.push_back(div);
        std::printf("delta %.3g speedup %.3f divergence %.5f%s\n", static_cast<double>(row.delta),
                    row.cost.speedup_vs_baseline, div, row.recommended ? " (recommended)" : "");
    }
    check(f.good(), "sweep: write failed " + out_csv);
    if (!out_svg.empty()) write_line_chart_svg(out_svg, "delta sweep", "delta", {sp, dv});
    return 0;
}

int cmd_bench(const std::string& model_path, const std::string& trace_path, const SolverFlags& sf,
              float delta, const std::vector<uint64_t>& seeds_in, int64_t num_seeds, uint64_t seed_base,
              int64_t reps, const std::string& ss_path, float ablation_budget, const std::string& out) {
    UNet model = UNet::load(require_file(model_path, "model checkpoint"));
    ChangeTrace trace = ChangeTrace::load_csv(require_file(trace_path, "trace"));
    SolverConfig scfg = sf.to_config();
    require_fingerprint(trace.fingerprint, fingerprint(model.cfg, scfg), "trace");
    NoiseSchedule sched = sched_default();
    ScaleShiftParams ss;
    const ScaleShiftParams* ssp = nullptr;
    if (!ss_path.empty()) {
        ss = ScaleShiftParams::load(require_file(ss_path, "scale-shift params"));
        require_fingerprint(ss.fingerprint, trace.fingerprint, "scale-shift params");
        ssp = &ss;
    }
    std::vector<uint64_t> seeds = seed_list(seeds_in, seed_base, num_seeds);
    BenchReport rep = run_matched_latency(model, trace, scfg, delta, seeds, sched, ssp,
                                          static_cast<int>(reps));
    nlohmann::json j = rep.to_json();
    if (ablation_budget > 0.0f) {
        AblationResult ab = ablate_resblock_caching(model, trace, scfg, ablation_budget, seeds, sched);
        j["ablation"] = ab.to_json();
    }
    std::ofstream f(out);
    check(f.good(), "bench: cannot open " + out);
    f << j.dump(2) << "\n";
    for (const auto& row : rep.rows)
        std::printf("%-16s steps=%-3lld img/s=%-8.3f speedup=%.3f divergence=%.5f\n", row.name.c_str(),
                    static_cast<long long>(row.steps), row.images_per_second, row.speedup_vs_reference,
                    row.final_image_l1_vs_baseline);
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

// Figure regeneration from saved artifacts only; never loads or runs a model.
int cmd_report(const std::string& schedule_path, const std::string& sweep_path,
               const std::string& trace_path, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    bool wrote = false;
    if (!schedule_path.empty()) {
        CacheSchedule sc = CacheSchedule::load(require_file(schedule_path, "schedule"));
        write_schedule_svg(out_dir + "/schedule.svg", sc);
        std::printf("wrote %s/schedule.svg\n", out_dir.c_str());
        wrote = true;
    }
    if (!sweep_path.empty()) {
        std::ifstream f(require_file(sweep_path, "sweep csv"));
        std::string line;
        ChartSeries sp{"predicted speedup", "#1f77b4", {}, {}};
        ChartSeries dv{"image divergence", "#d62728", {}, {}};
        while (std::getline(f, line)) {
            if (line.empty() || line[0] == '#' || line.rfind("delta,", 0) == 0) continue;
            std::istringstream ss(line);
            std::string d, s, c, v;
            std::getline(ss, d, ',');
            std::getline(ss, s, ',');
            std::getline(ss, c, ',');
            std::getline(ss, v, ',');
            sp.x.push_back(std::stod(d));
            sp.y.push_back(std::stod(s));
            dv.x.push_back(std::stod(d));
            dv.y.push_back(std::stod(v));
        }
        check(!sp.x.empty(), "report: no rows in " + sweep_path);
        write_line_chart_svg(out_dir + "/sweep.svg", "delta sweep", "delta", {sp, dv});
        std::printf("wrote %s/sweep.svg\n", out_dir.c_str());
        wrote = true;
    }
    if (!trace_path.empty()) {
        ChangeTrace tr = ChangeTrace::load_csv(require_file(trace_path, "trace"));
        std::vector<ChartSeries> series;
        const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
        int ci = 0;
        for (int64_t b = 0; b < tr.num_blocks(); ++b) {
            const BlockId& id = tr.block_ids[static_cast<size_t>(b)];
            if (id.kind != BlockKind::spatial_transformer) continue;
            ChartSeries s{id.str(), colors[ci++ % 6], {}, {}};
            for (int64_t st = 0; st < tr.steps; ++st) {
                s.x.push_back(static_cast<double>(st + 1));
                s.y.push_back(static_cast<double>(tr.mean.at({b, st})));
            }
            series.push_back(std::move(s));
        }
        check(!series.empty(), "report: trace has no transformer blocks");
        write_line_chart_svg(out_dir + "/trace.svg", "per-block change by step", "step", series);
        std::printf("wrote %s/trace.svg\n", out_dir.c_str());
        wrote = true;
    }
    check(wrote, "report: pass at least one of --schedule, --sweep, --trace");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    pin_threads(1);
    CLI::App app{"toy diffusion engine with per-block caching"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train the toy denoiser");
    std::string train_config, train_out = "model.ckpt";
    int64_t train_iters = 1500, train_batch = 8, train_log = 100;
    float train_lr = 2e-3f;
    uint64_t train_seed = 42;
    train->add_option("--model-config", train_config, "key=value model config file");
    train->add_option("--out", train_out, "output checkpoint");
    train->add_option("--iterations", train_iters);
    train->add_option("--batch", train_batch);
    train->add_option("--lr", train_lr);
    train->add_option("--seed", train_seed);
    train->add_option("--log-every", train_log);

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "record per-block change traces");
    std::string cal_model, cal_out = "trace.csv", cal_uncond;
    SolverFlags cal_sf;
    std::vector<int64_t> cal_conds;
    std::vector<uint64_t> cal_seeds;
    int64_t cal_nconds = 4, cal_nseeds = 2;
    uint64_t cal_seed_base = 1000;
    cal->add_option("--model", cal_model)->required();
    cal_sf.attach(cal);
    cal->add_option("--conds", cal_conds, "explicit class ids");
    cal->add_option("--seeds", cal_seeds, "explicit seeds");
    cal->add_option("--num-conds", cal_nconds);
    cal->add_option("--num-seeds", cal_nseeds);
    cal->add_option("--seed-base", cal_seed_base);
    cal->add_option("--out", cal_out);
    cal->add_option("--uncond-out", cal_uncond, "also trace the unconditional branch");

    // schedule
    auto* sch = app.add_subcommand("schedule", "derive a caching schedule from a trace");
    std::string sch_trace, sch_model, sch_out = "schedule.txt";
    std::string sch_policy = "spatial_transformer", sch_accum = "after";
    float sch_delta = 0.5f;
    sch->add_option("--trace", sch_trace)->required();
    sch->add_option("--delta", sch_delta);
    sch->add_option("--policy", sch_policy)->check(CLI::IsMember({"spatial_transformer", "resblock"}));
    sch->add_option("--accumulate-from", sch_accum)->check(CLI::IsMember({"after", "at"}));
    sch->add_option("--model", sch_model, "optional: also print predicted cost");
    sch->add_option("--out", sch_out);

    // fit-ss
    auto* fit = app.add_subcommand("fit-ss", "fit scale-shift adjustments for cached blocks");
    std::string fit_model, fit_schedule, fit_out = "ss.ckpt";
    SolverFlags fit_sf;
    int64_t fit_iters = SsOptConfig{}.iterations;
    float fit_lr = SsOptConfig{}.lr;
    float fit_decay = SsOptConfig{}.weight_decay;
    uint64_t fit_seed = 1234;
    fit->add_option("--model", fit_model)->required();
    fit->add_option("--schedule", fit_schedule)->required();
    fit_sf.attach(fit);
    fit->add_option("--iterations", fit_iters);
    fit->add_option("--lr", fit_lr);
    fit->add_option("--weight-decay", fit_decay);
    fit->add_option("--seed", fit_seed);
    fit->add_option("--out", fit_out);

    // sample
    auto* smp = app.add_subcommand("sample", "generate one image");
    std::string smp_model, smp_schedule, smp_ss, smp_out = "sample.ppm";
    SolverFlags smp_sf;
    int64_t smp_cond = 0;
    uint64_t smp_seed = 7;
    smp->add_option("--model", smp_model)->required();
    smp_sf.attach(smp);
    smp->add_option("--cond", smp_cond, "class id");
    smp->add_option("--seed", smp_seed);
    smp->add_option("--schedule", smp_schedule, "enable caching with this schedule");
    smp->add_option("--scale-shift", smp_ss, "scale-shift params (requires --schedule)");
    smp->add_option("--out", smp_out);

    // sweep
    auto* swp = app.add_subcommand("sweep", "delta grid: predicted cost and measured divergence");
    std::string swp_model, swp_trace, swp_csv = "sweep.csv", swp_svg = "sweep.svg";
    SolverFlags swp_sf;
    std::vector<float> swp_deltas = {0.1f, 0.3f, 0.5f, 0.7f, 1.0f};
    std::vector<uint64_t> swp_seeds;
    int64_t swp_nseeds = 5, swp_cond = 0;
    uint64_t swp_seed_base = 2000;
    swp->add_option("--model", swp_model)->required();
    swp->add_option("--trace", swp_trace)->required();
    swp_sf.attach(swp);
    swp->add_option("--deltas", swp_deltas);
    swp->add_option("--seeds", swp_seeds);
    swp->add_option("--num-seeds", swp_nseeds);
    swp->add_option("--seed-base", swp_seed_base);
    swp->add_option("--cond", swp_cond);
    swp->add_option("--out", swp_csv);
    swp->add_option("--svg", swp_svg);

    // bench
    auto* ben = app.add_subcommand("bench", "matched-latency wall-clock benchmark");
    std::string ben_model, ben_trace, ben_ss, ben_out = "bench.json";
    SolverFlags ben_sf;
    float ben_delta = 0.5f, ben_budget = 0.0f;
    std::vector<uint64_t> ben_seeds;
    int64_t ben_nseeds = 3, ben_reps = 5;
    uint64_t ben_seed_base = 3000;
    ben->add_option("--model", ben_model)->required();
    ben->add_option("--trace", ben_trace)->required();
    ben_sf.attach(ben);
    ben->add_option("--delta", ben_delta);
    ben->add_option("--seeds", ben_seeds);
    ben->add_option("--num-seeds", ben_nseeds);
    ben->add_option("--seed-base", ben_seed_base);
    ben->add_option("--reps", ben_reps, "timing repetitions (median reported)");
    ben->add_option("--scale-shift", ben_ss);
    ben->add_option("--ablation-budget", ben_budget,
                    "also run the resblock-vs-transformer ablation at this skipped-FLOP fraction");
    ben->add_option("--out", ben_out);

    // report
    auto* rpt = app.add_subcommand("report", "regenerate figures from saved files (no model execution)");
    std::string rpt_schedule, rpt_sweep, rpt_trace, rpt_dir = "figures";
    rpt->add_option("--schedule", rpt_schedule);
    rpt->add_option("--sweep", rpt_sweep);
    rpt->add_option("--trace", rpt_trace);
    rpt->add_option("--out-dir", rpt_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int r = app.exit(e);
        return r == 0 ? 0 : 2;
    }

    try {
        if (*train)
            return cmd_train(train_config, train_out, train_iters, train_batch, train_lr, train_seed,
                             train_log);
        if (*cal)
            return cmd_calibrate(cal_model, cal_sf, cal_conds, cal_seeds, cal_nconds, cal_nseeds,
                                 cal_seed_base, cal_out, cal_uncond);
        if (*sch) return cmd_schedule(sch_trace, sch_delta, sch_policy, sch_accum, sch_model, sch_out);
        if (*fit)
            return cmd_fit_ss(fit_model, fit_schedule, fit_sf, fit_iters, fit_lr, fit_decay,
                              fit_seed, fit_out);
        if (*smp) return cmd_sample(smp_model, smp_sf, smp_cond, smp_seed, smp_schedule, smp_ss, smp_out);
        if (*swp)
            return cmd_sweep(swp_model, swp_trace, swp_sf, swp_deltas, swp_seeds, swp_nseeds,
                             swp_seed_base, swp_cond, swp_csv, swp_svg);
        if (*ben)
            return cmd_bench(ben_model, ben_trace, ben_sf, ben_delta, ben_seeds, ben_nseeds,
                             ben_seed_base, ben_reps, ben_ss, ben_budget, ben_out);
        if (*rpt) return cmd_report(rpt_schedule, rpt_sweep, rpt_trace, rpt_dir);
    } catch (const MissingFileError& e) {
        std::fprintf(stderr, "error: missing-file: %s\n", e.what());
        return 3;
    } catch (const FingerprintError& e) {
        std::fprintf(stderr, "error: fingerprint-mismatch: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: runtime: %s\n", e.what());
        return 5;
    }
    return 2;
}
