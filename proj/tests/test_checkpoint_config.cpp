#include <doctest.h>

#include <cstdio>
#include <unistd.h>

#include "blockcache/blockid.hpp"
#include "blockcache/checkpoint.hpp"
#include "blockcache/config.hpp"

using namespace bc;

namespace {
std::string tmpfile_path(const char* name) {
    return std::string("/tmp/bc_test_") + name + "_" + std::to_string(::getpid());
}
}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly (property over random contents)") {
    Rng rng(200);
    for (int trial = 0; trial < 20; ++trial) {
        Checkpoint ck;
        ck.header_text = "trial=" + std::to_string(trial) + "\n";
        int64_t n = 1 + rng.next_below(5);
        for (int64_t i = 0; i < n; ++i) {
            std::vector<int64_t> shape;
            int64_t rank = 1 + rng.next_below(4);
            for (int64_t r = 0; r < rank; ++r) shape.push_back(1 + rng.next_below(5));
            ck.add("arr" + std::to_string(i), rng.normal_tensor(shape));
        }
        std::string path = tmpfile_path("ckpt");
        ck.save(path);
        Checkpoint back = Checkpoint::load(path);
        REQUIRE(back.header_text == ck.header_text);
        REQUIRE(back.entries.size() == ck.entries.size());
        for (size_t i = 0; i < ck.entries.size(); ++i) {
            REQUIRE(back.entries[i].first == ck.entries[i].first);
            REQUIRE(back.entries[i].second.shape == ck.entries[i].second.shape);
            REQUIRE(std::memcmp(back.entries[i].second.ptr(), ck.entries[i].second.ptr(),
                                ck.entries[i].second.data.size() * sizeof(float)) == 0);
        }
        std::remove(path.c_str());
    }
}

TEST_CASE("checkpoint rejects bad magic") {
    std::string path = tmpfile_path("badmagic");
    std::ofstream(path) << "NOTACKPT";
    CHECK_THROWS(Checkpoint::load(path));
    std::remove(path.c_str());
    CHECK_THROWS(Checkpoint::load("/nonexistent/nope.ckpt"));
}

TEST_CASE("kv file parsing") {
    KvFile kv = KvFile::parse("a = 1\n# comment\n b=hello  # trailing\n\nlist = 1, 2,3\n");
    CHECK(kv.get_int("a") == 1);
    CHECK(kv.get("b") == "hello");
    CHECK((kv.get_int_list("list") == std::vector<int64_t>{1, 2, 3}));
    CHECK(kv.get_or("missing", "d") == "d");
    CHECK_THROWS(kv.get("missing"));
    CHECK_THROWS(KvFile::parse("no equals sign"));
}

TEST_CASE("model config validation") {
    ModelConfig mc;
    CHECK_NOTHROW(mc.validate());
    mc.image_size = 30;  // not divisible by 4 with 3 levels
    CHECK_THROWS(mc.validate());
    mc = ModelConfig{};
    mc.norm_groups = 7;
    CHECK_THROWS(mc.validate());
    mc = ModelConfig{};
    mc.time_embed_dim = 63;
    CHECK_THROWS(mc.validate());
    CHECK(ModelConfig{}.uncond_class() == ModelConfig{}.num_classes - 1);
}

TEST_CASE("config round-trips through canonical text") {
    ModelConfig mc;
    mc.base_channels = 24;
    mc.channel_multipliers = {1, 3};
    mc.norm_groups = 8;
    mc.attention_levels = {0};
    mc.head_dim = 12;
    ModelConfig back = ModelConfig::from_kv(KvFile::parse(mc.canonical_text()));
    CHECK(back.canonical_text() == mc.canonical_text());
}

TEST_CASE("fingerprint is sensitive to every config field that matters") {
    ModelConfig mc;
    SolverConfig sc;
    std::string base = fingerprint(mc, sc);
    CHECK(base.size() == 16);
    SolverConfig sc2 = sc;
    sc2.steps = 21;
    CHECK(fingerprint(mc, sc2) != base);
    sc2 = sc;
    sc2.kind = SolverKind::dpm2;
    CHECK(fingerprint(mc, sc2) != base);
    sc2 = sc;
    sc2.guidance_scale = 4.5f;
    CHECK(fingerprint(mc, sc2) != base);
    ModelConfig mc2 = mc;
    mc2.base_channels = 17;  // not valid to build, but fingerprint is text-level
    CHECK(fingerprint(mc2, sc) != base);
    CHECK(fingerprint(mc, sc) == base);  // deterministic
}

TEST_CASE("block id string round-trip") {
    BlockId id{Section::output, 2, 1, BlockKind::spatial_transformer};
    CHECK(id.str() == "output.l2.b1.spatial_transformer");
    CHECK(parse_block_id(id.str()) == id);
    CHECK(parse_block_id("input.l0.b0.resblock") == (BlockId{Section::input, 0, 0, BlockKind::resblock}));
    CHECK(parse_block_id("middle.l1.b2.resample") == (BlockId{Section::middle, 1, 2, BlockKind::resample}));
    CHECK_THROWS(parse_block_id("bogus.l0.b0.resblock"));
    CHECK_THROWS(parse_block_id("input.l0.b0.bogus"));
    CHECK_THROWS(parse_block_id("input"));
}
