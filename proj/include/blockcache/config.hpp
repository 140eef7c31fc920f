#ifndef BLOCKCACHE_CONFIG_HPP
#define BLOCKCACHE_CONFIG_HPP

#include <algorithm>
#include <fstream>
#include <map>

#include "blockcache/tensor.hpp"

namespace bc {

// key = value text files; '#' starts a comment.
struct KvFile {
    std::vector<std::pair<std::string, std::string>> items;

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static KvFile parse(const std::string& text) {
        KvFile kv;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            check(eq != std::string::npos, "config: expected key=value, got '" + line + "'");
            kv.items.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KvFile load(const std::string& path) {
        std::ifstream f(path);
        check(f.good(), "config: cannot open " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const {
        return std::any_of(items.begin(), items.end(), [&](const auto& p) { return p.first == key; });
    }
    std::string get(const std::string& key) const {
        for (const auto& [k, v] : items)
            if (k == key) return v;
        throw std::runtime_error("config: missing key '" + key + "'");
    }
    std::string get_or(const std::string& key, const std::string& def) const {
        return has(key) ? get(key) : def;
    }
    int64_t get_int(const std::string& key) const { return std::stoll(get(key)); }
    int64_t get_int_or(const std::string& key, int64_t def) const {
        return has(key) ? get_int(key) : def;
    }
    double get_float(const std::string& key) const { return std::stod(get(key)); }
    double get_float_or(const std::string& key, double def) const {
        return has(key) ? get_float(key) : def;
    }
    std::vector<int64_t> get_int_list(const std::string& key) const {
        std::vector<int64_t> out;
        std::istringstream ss(get(key));
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoll(trim(tok)));
        return out;
    }
};

inline std::string join_ints(const std::vector<int64_t>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

struct ModelConfig {
    int64_t image_size = 32;
    int64_t in_channels = 3;
    int64_t base_channels = 16;
    std::vector<int64_t> channel_multipliers = {1, 2, 4};
    int64_t blocks_per_level = 1;
    std::vector<int64_t> attention_levels = {1, 2};
    int64_t num_classes = 9;  // last index is the reserved unconditional token
    int64_t time_embed_dim = 64;
    int64_t norm_groups = 8;
    int64_t head_dim = 16;
    int64_t transformer_depth = 2;
    int64_t ff_mult = 4;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int64_t channels(int level) const { return base_channels * channel_multipliers[static_cast<size_t>(level)]; }
    int64_t uncond_class() const { return num_classes - 1; }
    bool has_attention(int level) const {
        return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
    }

    void validate() const {
        int64_t down = int64_t{1} << (levels() - 1);
        check(image_size % down == 0, "model config: image_size not divisible by 2^(levels-1)");
        check(!attention_levels.empty(), "model config: at least one attention level required");
        check(num_classes >= 2, "model config: need at least one class plus the unconditional token");
        check(time_embed_dim % 2 == 0, "model config: time_embed_dim must be even");
        for (int l = 0; l < levels(); ++l) {
            check(channels(l) % norm_groups == 0, "model config: channels not divisible by norm_groups");
            if (has_attention(l))
                check(channels(l) % head_dim == 0, "model config: channels not divisible by head_dim");
        }
    }

    std::string canonical_text() const {
        std::ostringstream os;
        os << "image_size=" << image_size << "\n"
           << "in_channels=" << in_channels << "\n"
           << "base_channels=" << base_channels << "\n"
           << "channel_multipliers=" << join_ints(channel_multipliers) << "\n"
           << "blocks_per_level=" << blocks_per_level << "\n"
           << "attention_levels=" << join_ints(attention_levels) << "\n"
           << "num_classes=" << num_classes << "\n"
           << "time_embed_dim=" << time_embed_dim << "\n"
           << "norm_groups=" << norm_groups << "\n"
           << "head_dim=" << head_dim << "\n"
           << "transformer_depth=" << transformer_depth << "\n"
           << "ff_mult=" << ff_mult << "\n";
        return os.str();
    }

    static ModelConfig from_kv(const KvFile& kv) {
        ModelConfig c;
        c.image_size = kv.get_int_or("image_size", c.image_size);
        c.in_channels = kv.get_int_or("in_channels", c.in_channels);
        c.base_channels = kv.get_int_or("base_channels", c.base_channels);
        if (kv.has("channel_multipliers")) c.channel_multipliers = kv.get_int_list("channel_multipliers");
        c.blocks_per_level = kv.get_int_or("blocks_per_level", c.blocks_per_level);
        if (kv.has("attention_levels")) c.attention_levels = kv.get_int_list("attention_levels");
        c.num_classes = kv.get_int_or("num_classes", c.num_classes);
        c.time_embed_dim = kv.get_int_or("time_embed_dim", c.time_embed_dim);
        c.norm_groups = kv.get_int_or("norm_groups", c.norm_groups);
        c.head_dim = kv.get_int_or("head_dim", c.head_dim);
        c.transformer_depth = kv.get_int_or("transformer_depth", c.transformer_depth);
        c.ff_mult = kv.get_int_or("ff_mult", c.ff_mult);
        c.validate();
        return c;
    }
};

enum class SolverKind { ddim, dpm2 };

inline const char* solver_name(SolverKind k) { return k == SolverKind::ddim ? "ddim" : "dpm2"; }

struct SolverConfig {
    SolverKind kind = SolverKind::ddim;
    int64_t steps = 20;
    float guidance_scale = 5.0f;

    void validate() const { check(steps >= 1, "solver config: steps must be >= 1"); }

    std::string canonical_text() const {
        std::ostringstream os;
        os << "solver=" << solver_name(kind) << "\n"
           << "steps=" << steps << "\n";
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(guidance_scale));
        os << "guidance_scale=" << buf << "\n";
        return os.str();
    }

    static SolverConfig from_kv(const KvFile& kv) {
        SolverConfig c;
        std::string s = kv.get_or("solver", "ddim");
        if (s == "ddim")
            c.kind = SolverKind::ddim;
        else if (s == "dpm2")
            c.kind = SolverKind::dpm2;
        else
            throw std::runtime_error("solver config: unknown solver '" + s + "'");
        c.steps = kv.get_int_or("steps", c.steps);
        c.guidance_scale = static_cast<float>(kv.get_float_or("guidance_scale", c.guidance_scale));
        c.validate();
        return c;
    }
};

// Content hash binding traces/schedules/params to the configs they came from.
inline std::string fingerprint(const ModelConfig& mc, const SolverConfig& sc) {
    uint64_t h = fnv1a(mc.canonical_text());
    h = fnv1a(sc.canonical_text(), h);
    return hex64(h);
}

}  // namespace bc

#endif
