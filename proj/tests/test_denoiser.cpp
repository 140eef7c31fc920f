#include <doctest.h>

#include <unistd.h>

#include "blockcache/denoiser.hpp"

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

TEST_CASE("timestep embedding closed form") {
    Tensor e = timestep_embedding({500.0f, 3.0f}, 8);
    REQUIRE((e.shape == std::vector<int64_t>{2, 8}));
    for (int64_t i = 0; i < 2; ++i) {
        float t = i == 0 ? 500.0f : 3.0f;
        for (int64_t j = 0; j < 4; ++j) {
            double freq = std::pow(10000.0, -static_cast<double>(j) / 3.0);
            CHECK(e.at({i, j}) == doctest::Approx(std::sin(t * freq)).epsilon(1e-5));
            CHECK(e.at({i, 4 + j}) == doctest::Approx(std::cos(t * freq)).epsilon(1e-5));
        }
    }
    // distinct timesteps embed differently
    Tensor a = timestep_embedding({100.0f}, 16), b = timestep_embedding({101.0f}, 16);
    CHECK(max_abs_diff(a, b) > 1e-3f);
}

TEST_CASE("forward shape, determinism, and finiteness") {
    UNet model(tiny_config(), 11);
    perturb(model, 1);
    Rng rng(2);
    Tensor x = rng.normal_tensor({2, 3, 8, 8});
    Tensor e1 = model.forward(x, {10.0f, 900.0f}, {0, 1});
    REQUIRE(e1.shape == x.shape);
    CHECK(e1.all_finite());
    Tensor e2 = model.forward(x, {10.0f, 900.0f}, {0, 1});
    CHECK(max_abs_diff(e1, e2) == 0.0f);
    CHECK_THROWS(model.forward(x, {10.0f}, {0, 1}));                       // ts length
    CHECK_THROWS(model.forward(rng.normal_tensor({1, 3, 4, 4}), {1}, {0}));  // geometry
    CHECK_THROWS(model.forward(x, {10.0f, 900.0f}, {0, 99}));              // cond range
}

TEST_CASE("block decomposition: combined = residual + path within 1e-6") {
    UNet model(tiny_config(), 11);
    perturb(model, 3);
    Rng rng(4);
    Tensor x = rng.normal_tensor({1, 3, 8, 8});

    struct CheckHook : BlockHook {
        int checked = 0;
        BlockResult on_block(const BlockId& id, const std::function<Var()>& compute_residual,
                             const Var& path, const Var&) override {
            BlockResult r;
            r.residual = compute_residual();
            r.combined = ag::add(r.residual, path);
            for (size_t i = 0; i < r.combined->val.data.size(); ++i)
                REQUIRE(std::fabs(r.combined->val.data[i] - r.residual->val.data[i] - path->val.data[i]) <=
                        1e-6f);
            ++checked;
            return r;
        }
    } hook;
    model.forward(x, {300.0f}, {0}, nullptr, &hook);
    CHECK(hook.checked > 0);
}

TEST_CASE("tap order is stable across inputs and matches block_ids") {
    UNet model(tiny_config(), 11);
    perturb(model, 5);
    Rng rng(6);
    Tap t1, t2;
    model.forward(rng.normal_tensor({1, 3, 8, 8}), {100.0f}, {0}, &t1);
    model.forward(rng.normal_tensor({1, 3, 8, 8}), {800.0f}, {1}, &t2);
    REQUIRE(t1.entries.size() == t2.entries.size());
    std::vector<BlockId> ids = model.block_ids();
    REQUIRE(t1.entries.size() == ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        CHECK(t1.entries[i].id == ids[i]);
        CHECK(t2.entries[i].id == ids[i]);
    }
}

TEST_CASE("zero residual weights make a block the identity on its path") {
    UNet model(tiny_config(), 11);
    perturb(model, 7);
    // zero the final conv of the first resblock residual branch
    for (auto& [name, p] : model.reg.items)
        if (name.rfind("input.l0.b0.resblock.conv2", 0) == 0)
            std::fill(p->val.data.begin(), p->val.data.end(), 0.0f);
    Rng rng(8);
    Tensor x = rng.normal_tensor({1, 3, 8, 8});
    Tap tap;
    model.forward(x, {200.0f}, {0}, &tap);
    const TapEntry& e = tap.entries[0];
    REQUIRE(e.id == (BlockId{Section::input, 0, 0, BlockKind::resblock}));
    CHECK(l1_norm(e.residual) == 0.0f);
}

TEST_CASE("model checkpoint round-trip preserves weights and config") {
    UNet model(tiny_config(), 11);
    perturb(model, 9);
    std::string path = "/tmp/bc_test_model_" + std::to_string(::getpid()) + ".ckpt";
    model.save(path);
    UNet back = UNet::load(path);
    CHECK(back.weights_checksum() == model.weights_checksum());
    CHECK(back.cfg.canonical_text() == model.cfg.canonical_text());
    Rng rng(10);
    Tensor x = rng.normal_tensor({1, 3, 8, 8});
    CHECK(max_abs_diff(back.forward(x, {77.0f}, {1}), model.forward(x, {77.0f}, {1})) == 0.0f);
    std::remove(path.c_str());
}

TEST_CASE("flop summary covers every block and is positive") {
    UNet model(tiny_config(), 11);
    const FlopSummary& fs = model.flops();
    CHECK(fs.block_flops.size() == model.blocks.size());
    for (const auto& [id, f] : fs.block_flops) CHECK(f > 0);
    CHECK(fs.fixed_flops > 0);
    CHECK(fs.path_flops > 0);
    CHECK(fs.total() > fs.fixed_flops);
}

TEST_CASE("block_channels matches the tensor widths blocks emit") {
    UNet model(tiny_config(), 11);
    perturb(model, 12);
    Rng rng(13);
    Tap tap;
    model.forward(rng.normal_tensor({1, 3, 8, 8}), {50.0f}, {0}, &tap);
    for (const auto& e : tap.entries)
        CHECK(model.block_channels(e.id) == e.combined.dim(1));
}
