#ifndef BLOCKCACHE_INSTRUMENT_HPP
#define BLOCKCACHE_INSTRUMENT_HPP

#include "blockcache/diffusion.hpp"

namespace bc {

// Relative absolute change between consecutive per-block outputs.
// A zero denominator reports 0 and raises the degenerate flag.
inline float l1_rel(const Tensor& curr, const Tensor& prev, bool* degenerate = nullptr) {
    check_same_shape(curr, prev, "l1_rel");
    float denom = l1_norm(curr);
    if (denom == 0.0f) {
        if (degenerate) *degenerate = true;
        return 0.0f;
    }
    return l1_distance(curr, prev) / denom;
}

// Per-(block, step) change statistics aggregated over calibration runs.
// Step 1 has no predecessor and is stored as 0 by convention.
struct ChangeTrace {
    std::vector<BlockId> block_ids;
    int64_t steps = 0;
    int64_t runs = 0;
    std::string fingerprint;
    Tensor mean;  // [blocks, steps]
    Tensor stdev; // [blocks, steps]
    bool degenerate_seen = false;
    // retained per-run values (debug mode): [runs][blocks*steps]
    std::vector<std::vector<float>> run_values;

    int64_t num_blocks() const { return static_cast<int64_t>(block_ids.size()); }

    int64_t block_row(const BlockId& id) const {
        for (size_t i = 0; i < block_ids.size(); ++i)
            if (block_ids[i] == id) return static_cast<int64_t>(i);
        throw std::runtime_error("trace: unknown block " + id.str());
    }

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        check(f.good(), "trace: cannot open for write: " + path);
        f << "# fingerprint=" << fingerprint << "\n";
        f << "# runs=" << runs << "\n";
        f << "# steps=" << steps << "\n";
        f << "block_id,kind,step,mean_l1rel,std_l1rel\n";
        char buf[64];
        for (int64_t b = 0; b < num_blocks(); ++b)
            for (int64_t s = 0; s < steps; ++s) {
                f << block_ids[static_cast<size_t>(b)].str() << ","
                  << kind_name(block_ids[static_cast<size_t>(b)].kind) << "," << (s + 1) << ",";
                std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(mean.at({b, s})));
                f << buf << ",";
                std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(stdev.at({b, s})));
                f << buf << "\n";
            }
        check(f.good(), "trace: write failed: " + path);
    }

    static ChangeTrace load_csv(const std::string& path) {
        std::ifstream f(path);
        check(f.good(), "trace: cannot open: " + path);
        ChangeTrace tr;
        std::string line;
        std::vector<std::tuple<std::string, int64_t, float, float>> rows;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            if (line[0] == '#') {
                size_t eq = line.find('=');
                if (line.find("fingerprint") != std::string::npos && eq != std::string::npos)
                    tr.fingerprint = KvFile::trim(line.substr(eq + 1));
                if (line.find("runs") != std::string::npos && eq != std::string::npos)
                    tr.runs = std::stoll(line.substr(eq + 1));
                continue;
            }
            if (line.rfind("block_id,", 0) == 0) continue;
            std::istringstream ss(line);
            std::string id, kind, step, mean, stdev;
            std::getline(ss, id, ',');
            std::getline(ss, kind, ',');
            std::getline(ss, step, ',');
            std::getline(ss, mean, ',');
            std::getline(ss, stdev, ',');
            rows.emplace_back(id, std::stoll(step), std::stof(mean), std::stof(stdev));
        }
        check(!rows.empty(), "trace: empty file " + path);
        for (const auto& [id, step, m, sd] : rows) tr.steps = std::max(tr.steps, step);
        for (const auto& [id, step, m, sd] : rows)
            if (step == 1) tr.block_ids.push_back(parse_block_id(id));
        tr.mean = Tensor({tr.num_blocks(), tr.steps});
        tr.stdev = Tensor({tr.num_blocks(), tr.steps});
        int64_t row = 0;
        for (const auto& [id, step, m, sd] : rows) {
            int64_t b = row / tr.steps;
            check(tr.block_ids[static_cast<size_t>(b)].str() == id && step == row % tr.steps + 1,
                  "trace: rows out of order in " + path);
            tr.mean.at({b, step - 1}) = m;
            tr.stdev.at({b, step - 1}) = sd;
            ++row;
        }
        return tr;
    }
};

// Runs full sampling per (cond, seed), taps every block at every step, and
// aggregates l1_rel over runs. The conditional branch feeds the trace;
// pass uncond_out to also trace the unconditional branch.
inline ChangeTrace calibrate(const UNet& model, const std::vector<int64_t>& conds,
                             const std::vector<uint64_t>& seeds, const SolverConfig& scfg,
                             const NoiseSchedule& sched, bool keep_runs = false,
                             ChangeTrace* uncond_out = nullptr) {
    check(!conds.empty() && !seeds.empty(), "calibrate: conds and seeds must be non-empty");
    ChangeTrace tr;
    tr.block_ids = model.block_ids();
    tr.steps = scfg.steps;
    tr.fingerprint = bc::fingerprint(model.cfg, scfg);
    int64_t B = tr.num_blocks(), S = tr.steps;
    Tensor sum({B, S}), sumsq({B, S});
    Tensor usum({B, S}), usumsq({B, S});

    for (int64_t cond : conds)
        for (uint64_t seed : seeds) {
            StepTaps taps;
            sample(model, cond, scfg, sched, seed, nullptr, &taps);
            std::vector<float> vals(static_cast<size_t>(B * S), 0.0f);
            auto process = [&](const std::vector<Tap>& series, Tensor& dst_sum, Tensor& dst_sq,
                               std::vector<float>* keep) {
                for (int64_t s = 1; s < S; ++s)
                    for (int64_t b = 0; b < B; ++b) {
                        check(series[static_cast<size_t>(s)].entries[static_cast<size_t>(b)].id ==
                                  tr.block_ids[static_cast<size_t>(b)],
                              "calibrate: tap order mismatch");
                        bool degen = false;
                        float v = l1_rel(series[static_cast<size_t>(s)].entries[static_cast<size_t>(b)].residual,
                                         series[static_cast<size_t>(s - 1)].entries[static_cast<size_t>(b)].residual,
                                         &degen);
                        if (degen) tr.degenerate_seen = true;
                        dst_sum.at({b, s}) += v;
                        dst_sq.at({b, s}) += v * v;
                        if (keep) (*keep)[static_cast<size_t>(b * S + s)] = v;
                    }
            };
            process(taps.cond, sum, sumsq, keep_runs ? &vals : nullptr);
            if (uncond_out) process(taps.uncond, usum, usumsq, nullptr);
            if (keep_runs) tr.run_values.push_back(std::move(vals));
            ++tr.runs;
        }

    auto finish = [&](ChangeTrace& t, const Tensor& s1, const Tensor& s2) {
        float n = static_cast<float>(tr.runs);
        t.mean = Tensor({B, S});
        t.stdev = Tensor({B, S});
        for (int64_t i = 0; i < B * S; ++i) {
            float m = s1.data[static_cast<size_t>(i)] / n;
            float var = s2.data[static_cast<size_t>(i)] / n - m * m;
            t.mean.data[static_cast<size_t>(i)] = m;
            t.stdev.data[static_cast<size_t>(i)] = std::sqrt(std::max(0.0f, var));
        }
    };
    finish(tr, sum, sumsq);
    if (uncond_out) {
        uncond_out->block_ids = tr.block_ids;
        uncond_out->steps = S;
        uncond_out->runs = tr.runs;
        uncond_out->fingerprint = tr.fingerprint;
        finish(*uncond_out, usum, usumsq);
    }
    return tr;
}

}  // namespace bc

#endif
