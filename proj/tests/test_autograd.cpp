#include <doctest.h>

#include "blockcache/autograd.hpp"

using namespace bc;

namespace {

// Central finite-difference check of d(scalar loss)/d(param) for one op.
// Builds the graph via `build` (params -> scalar Var) and probes every
// element of every param.
void gradcheck(std::vector<Var> params, const std::function<Var()>& build, float fd_eps = 1e-2f,
               float tol = 2e-2f) {
    for (auto& p : params) p->needs_grad = true;
    Var loss;
    {
        ag::GradGuard gg;
        loss = build();
    }
    ag::backward(loss);
    for (auto& p : params) {
        REQUIRE(p->has_grad);
        for (size_t i = 0; i < p->val.data.size(); ++i) {
            float orig = p->val.data[i];
            p->val.data[i] = orig + fd_eps;
            float up = build()->val.data[0];
            p->val.data[i] = orig - fd_eps;
            float dn = build()->val.data[0];
            p->val.data[i] = orig;
            float fd = (up - dn) / (2.0f * fd_eps);
            float an = p->grad.data[i];
            float denom = std::max({std::fabs(fd), std::fabs(an), 0.05f});
            REQUIRE(std::fabs(fd - an) / denom <= tol);
        }
    }
    for (auto& p : params) p->zero_grad();
}

}  // namespace

TEST_CASE("recording is off by default and guards nest") {
    Var a = ag::param(full({2}, 1.0f));
    Var b = ag::add(a, a);
    CHECK_FALSE(b->needs_grad);  // not recorded
    {
        ag::GradGuard g1;
        Var c = ag::add(a, a);
        CHECK(c->needs_grad);
        {
            ag::NoGradGuard g2;
            Var d = ag::add(a, a);
            CHECK_FALSE(d->needs_grad);
        }
        Var e = ag::add(a, a);
        CHECK(e->needs_grad);
    }
    CHECK_FALSE(ag::add(a, a)->needs_grad);
}

TEST_CASE("backward on a diamond graph accumulates both paths") {
    Var x = ag::param(Tensor({1}, {3.0f}));
    ag::GradGuard gg;
    Var y = ag::add(ag::scale(x, 2.0f), ag::scale(x, 5.0f));  // y = 7x
    ag::backward(y);
    CHECK(x->grad.data[0] == doctest::Approx(7.0f));
}

TEST_CASE("gradcheck: elementwise and shape ops") {
    Rng rng(300);
    Var a = ag::param(rng.normal_tensor({3, 4}));
    Var b = ag::param(rng.normal_tensor({3, 4}));
    Var t = ag::constant(rng.normal_tensor({3, 4}));
    gradcheck({a, b}, [&] { return ag::mse(ag::add(a, b), t); });
    gradcheck({a, b}, [&] { return ag::mse(ag::sub(a, b), t); });
    gradcheck({a}, [&] { return ag::mse(ag::scale(a, -1.7f), t); });
    gradcheck({a}, [&] { return ag::mse(ag::silu(a), t); });
    gradcheck({a}, [&] { return ag::mse(ag::view(a, {4, 3}), ag::constant(t->val.reshaped({4, 3}))); });
    gradcheck({a}, [&] { return ag::mse(ag::add_const(a, 0.3f), t); });
    Var tslice = ag::constant(rng.normal_tensor({3, 2}));
    gradcheck({a}, [&] { return ag::mse(ag::slice_cols(a, 1, 2), tslice); });
}

TEST_CASE("gradcheck: linear") {
    Rng rng(301);
    Var x = ag::param(rng.normal_tensor({2, 3}));
    Var w = ag::param(rng.normal_tensor({4, 3}));
    Var b = ag::param(rng.normal_tensor({4}));
    Var t = ag::constant(rng.normal_tensor({2, 4}));
    gradcheck({x, w, b}, [&] { return ag::mse(ag::linear(x, w, b), t); });
}

TEST_CASE("gradcheck: conv2d") {
    Rng rng(302);
    Var x = ag::param(rng.normal_tensor({2, 3, 5, 5}));
    Var w = ag::param(rng.normal_tensor({4, 3, 3, 3}));
    Var b = ag::param(rng.normal_tensor({4}));
    Var t = ag::constant(rng.normal_tensor({2, 4, 5, 5}));
    gradcheck({x, w, b}, [&] { return ag::mse(ag::conv2d(x, w, b, 1, 1), t); });
    Var t2 = ag::constant(rng.normal_tensor({2, 4, 2, 2}));
    gradcheck({x, w, b}, [&] { return ag::mse(ag::conv2d(x, w, b, 2, 0), t2); });
}

TEST_CASE("gradcheck: group_norm") {
    Rng rng(303);
    Var x = ag::param(rng.normal_tensor({2, 4, 3, 3}));
    Var g = ag::param(rng.normal_tensor({4}));
    Var b = ag::param(rng.normal_tensor({4}));
    Var t = ag::constant(rng.normal_tensor({2, 4, 3, 3}));
    gradcheck({x, g, b}, [&] { return ag::mse(ag::group_norm(x, 2, g, b), t); });
}

TEST_CASE("gradcheck: attention and head splitting") {
    Rng rng(304);
    Var q = ag::param(rng.normal_tensor({2, 3, 4}));
    Var k = ag::param(rng.normal_tensor({2, 5, 4}));
    Var v = ag::param(rng.normal_tensor({2, 5, 4}));
    Var t = ag::constant(rng.normal_tensor({2, 3, 4}));
    gradcheck({q, k, v}, [&] { return ag::mse(ag::attention(q, k, v), t); });
    Var x = ag::param(rng.normal_tensor({1, 3, 8}));
    Var t2 = ag::constant(rng.normal_tensor({1, 3, 8}));
    gradcheck({x}, [&] { return ag::mse(ag::merge_heads(ag::split_heads(x, 2), 2), t2); });
}

TEST_CASE("gradcheck: layout and broadcast ops") {
    Rng rng(305);
    Var x = ag::param(rng.normal_tensor({2, 3, 2, 2}));
    Var t = ag::constant(rng.normal_tensor({2, 4, 3}));
    gradcheck({x}, [&] { return ag::mse(ag::nchw_to_tokens(x), t); });
    Var tok = ag::param(rng.normal_tensor({2, 4, 3}));
    Var t2 = ag::constant(rng.normal_tensor({2, 3, 2, 2}));
    gradcheck({tok}, [&] { return ag::mse(ag::tokens_to_nchw(tok, 2, 2), t2); });
    Var a = ag::param(rng.normal_tensor({1, 2, 3, 3}));
    Var b = ag::param(rng.normal_tensor({1, 3, 3, 3}));
    Var t3 = ag::constant(rng.normal_tensor({1, 5, 3, 3}));
    gradcheck({a, b}, [&] { return ag::mse(ag::concat_channels(a, b), t3); });
    Var up = ag::param(rng.normal_tensor({1, 2, 3, 3}));
    Var t4 = ag::constant(rng.normal_tensor({1, 2, 6, 6}));
    gradcheck({up}, [&] { return ag::mse(ag::upsample_nearest2x(up), t4); });
    Var bias = ag::param(rng.normal_tensor({2, 3}));
    Var xb = ag::param(rng.normal_tensor({2, 3, 2, 2}));
    Var t5 = ag::constant(rng.normal_tensor({2, 3, 2, 2}));
    gradcheck({xb, bias}, [&] { return ag::mse(ag::add_channel_bias(xb, bias), t5); });
    Var sc = ag::param(rng.uniform_tensor({2, 3}, 0.5f, 1.5f));
    Var sh = ag::param(rng.normal_tensor({2, 3}));
    gradcheck({xb, sc, sh}, [&] { return ag::mse(ag::channel_affine(xb, sc, sh), t5); });
}

TEST_CASE("gradcheck: embedding") {
    Rng rng(306);
    Var table = ag::param(rng.normal_tensor({5, 4}));
    Var t = ag::constant(rng.normal_tensor({3, 4}));
    std::vector<int64_t> ids = {1, 3, 1};
    gradcheck({table}, [&] { return ag::mse(ag::embedding(table, ids), t); });
}

TEST_CASE("adam with zero lr leaves params and moments bitwise unchanged") {
    Rng rng(307);
    Var p = ag::param(rng.normal_tensor({8}));
    Tensor before = p->val;
    Adam opt({p}, 0.0f);
    for (int i = 0; i < 3; ++i) {
        ag::GradGuard gg;
        Var loss = ag::mse(p, ag::constant(Tensor({8})));
        ag::backward(loss);
        opt.step();
        opt.zero_grad();
    }
    CHECK(std::memcmp(p->val.ptr(), before.ptr(), before.data.size() * sizeof(float)) == 0);
    CHECK(l1_norm(opt.m[0]) == 0.0f);
}

TEST_CASE("adam descends a quadratic") {
    Var p = ag::param(full({4}, 5.0f));
    Adam opt({p}, 0.05f);
    for (int i = 0; i < 500; ++i) {
        ag::GradGuard gg;
        Var loss = ag::mse(p, ag::constant(full({4}, 1.0f)));
        ag::backward(loss);
        opt.step();
        opt.zero_grad();
    }
    for (float v : p->val.data) CHECK(v == doctest::Approx(1.0f).epsilon(0.05));
}

TEST_CASE("backward requires a recorded scalar") {
    Var p = ag::param(full({2}, 1.0f));
    Var loss = ag::mse(p, ag::constant(Tensor({2})));  // recording off
    CHECK_THROWS(ag::backward(loss));
    ag::GradGuard gg;
    Var vec = ag::add(p, p);
    CHECK_THROWS(ag::backward(vec));  // not scalar
}
