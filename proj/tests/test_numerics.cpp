#include <catch2/catch_amalgamated.hpp>

#include "casl/nn.hpp"
#include "casl/parallel.hpp"
#include "casl/rng.hpp"

using namespace casl;

TEST_CASE("affine_forward basic cases") {
    Array x({1, 2}, {1.0, 2.0});
    Array w_id({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Array y = affine_forward(x, w_id);
    CHECK(y.data == std::vector<double>{1.0, 2.0});

    Array x2({1, 2}, {1.0, 1.0});
    Array w2({1, 2}, {2.0, 3.0});
    Array b2({1}, {1.0});
    CHECK(affine_forward(x2, w2, &b2).data[0] == 6.0);

    Array x0({1, 2}, {0.0, 0.0});
    Array w3({2, 2}, {4.0, -1.0, 0.5, 9.0});
    Array b3({2}, {5.0, 7.0});
    Array y3 = affine_forward(x0, w3, &b3);
    CHECK(y3.data == std::vector<double>{5.0, 7.0});
}

TEST_CASE("affine_forward shape errors") {
    Array x({1, 3});
    Array w({2, 2});
    CHECK_THROWS_AS(affine_forward(x, w), dim_error);
    Array b({3});
    Array w2({2, 3});
    CHECK_THROWS_AS(affine_forward(x, w2, &b), dim_error);
}

TEST_CASE("affine_forward is linear without bias") {
    Rng rng(11);
    Array w({3, 4});
    rng.fill_normal(w);
    Array x1({2, 4}), x2({2, 4});
    rng.fill_normal(x1);
    rng.fill_normal(x2);
    const double a = 1.7, b = -0.3;
    Array lhs({2, 4});
    for (size_t i = 0; i < lhs.data.size(); ++i) lhs.data[i] = a * x1.data[i] + b * x2.data[i];
    Array y_comb = affine_forward(lhs, w);
    Array y1 = affine_forward(x1, w);
    Array y2 = affine_forward(x2, w);
    for (size_t i = 0; i < y_comb.data.size(); ++i)
        CHECK(std::fabs(y_comb.data[i] - (a * y1.data[i] + b * y2.data[i])) < 1e-12);
}

TEST_CASE("relu examples and properties") {
    Array x({3}, {-1.0, 0.0, 2.0});
    CHECK(relu(x).data == std::vector<double>{0.0, 0.0, 2.0});

    Array neg({4}, {-5.0, -0.1, -2.0, -1e-9});
    Array rneg = relu(neg);
    for (double v : rneg.data) CHECK(v == 0.0);

    Array pos({3}, {0.0, 0.5, 7.0});
    CHECK(relu(pos).data == pos.data);

    // idempotent and elementwise monotone
    Rng rng(3);
    Array r({64});
    rng.fill_normal(r);
    Array r1 = relu(r);
    CHECK(relu(r1).data == r1.data);
    Array r_shift = r;
    for (double& v : r_shift.data) v += 0.25;
    Array r2 = relu(r_shift);
    for (size_t i = 0; i < r1.data.size(); ++i) CHECK(r2.data[i] >= r1.data[i]);
}

namespace {

struct ScalarParam {
    Array v{Shape{1}};
    Array g{Shape{1}};
};

} // namespace

TEST_CASE("adam_step with zero gradients is the identity") {
    ScalarParam p;
    p.v.data[0] = 1.25;
    ParamStore ps;
    ps.add("p", p.v, p.g);
    AdamState st = AdamState::init(ps, 0.1);
    adam_step(ps, st);
    adam_step(ps, st);
    CHECK(p.v.data[0] == 1.25);
    CHECK(st.step_count == 2);
}

TEST_CASE("adam_step first-step magnitude and sign-flip damping") {
    // one step, g = 1, lr = 0.1: mhat = vhat = 1 so the step is lr/(1 + eps)
    ScalarParam p;
    p.v.data[0] = 0.0;
    p.g.data[0] = 1.0;
    ParamStore ps;
    ps.add("p", p.v, p.g);
    AdamState st = AdamState::init(ps, 0.1);
    adam_step(ps, st);
    const double expected = -0.1 / (1.0 + 1e-8);
    CHECK(std::fabs(p.v.data[0] - expected) < 1e-15);

    // independent evaluation of the recurrences for a sign-flipping gradient
    double m = 0, v = 0, theta = 0;
    double deltas[2];
    for (int t = 1; t <= 2; ++t) {
        const double g = (t == 1) ? 1.0 : -1.0;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        const double step = -0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        deltas[t - 1] = step;
        theta += step;
    }
    CHECK(std::fabs(deltas[1]) < std::fabs(deltas[0]));

    ScalarParam q;
    ParamStore qs;
    qs.add("q", q.v, q.g);
    AdamState st2 = AdamState::init(qs, 0.1);
    q.g.data[0] = 1.0;
    adam_step(qs, st2);
    const double d1 = q.v.data[0];
    q.g.data[0] = -1.0;
    adam_step(qs, st2);
    const double d2 = q.v.data[0] - d1;
    CHECK(std::fabs(d2) < std::fabs(d1));
    CHECK(std::fabs(q.v.data[0] - theta) < 1e-15);
}

TEST_CASE("adam_step contract errors") {
    ScalarParam p;
    ParamStore ps;
    ps.add("p", p.v, p.g);
    AdamState st = AdamState::init(ps, 0.1);
    ScalarParam other;
    ParamStore ps2;
    ps2.add("other", other.v, other.g);
    CHECK_THROWS_AS(adam_step(ps2, st), contract_error);
}

TEST_CASE("grad_check on a quadratic is exact to roundoff") {
    Array v({4}, {0.3, -1.2, 0.7, 2.0});
    Array g({4});
    ParamStore ps;
    ps.add("p", v, g);
    auto loss = [&]() {
        double s = 0;
        for (size_t i = 0; i < v.data.size(); ++i) {
            s += v.data[i] * v.data[i];
            g.data[i] = 2.0 * v.data[i];
        }
        return s;
    };
    CHECK(grad_check(loss, ps, 1e-5) < 1e-8);
}

TEST_CASE("grad_check flags a corrupted gradient") {
    // p = 0.25 gives central difference 0.5, doubled analytic 1.0 -> ratio 0.5
    Array v({1}, {0.25});
    Array g({1});
    ParamStore ps;
    ps.add("p", v, g);
    auto loss = [&]() {
        g.data[0] = 2.0 * (2.0 * v.data[0]); // deliberately x2
        return v.data[0] * v.data[0];
    };
    CHECK(std::fabs(grad_check(loss, ps, 1e-5) - 0.5) < 1e-6);
}

TEST_CASE("grad_check rejects bad step sizes and non-finite losses") {
    Array v({1}, {1.0});
    Array g({1});
    ParamStore ps;
    ps.add("p", v, g);
    auto loss = [&]() {
        g.data[0] = 1.0;
        return v.data[0];
    };
    CHECK_THROWS_AS(grad_check(loss, ps, 1e-3), contract_error);
    auto bad = [&]() {
        g.data[0] = 0.0;
        return std::numeric_limits<double>::quiet_NaN();
    };
    CHECK_THROWS_AS(grad_check(bad, ps, 1e-5), numeric_error);
}

TEST_CASE("conv, upsample and dense backward agree with finite differences") {
    Rng rng(17);
    Conv3x3 conv = Conv3x3::init(2, 3, 2, rng);
    Conv3x3 gconv = Conv3x3::zeros_like(conv);
    Dense head = Dense::init(3 * 4 * 4, 2, rng);
    Dense ghead = Dense::zeros_like(head);
    Array x({2, 8, 8});
    rng.fill_normal(x, 0.0, 0.8);
    Array target({1, 2}, {0.3, -0.6});

    ParamStore ps;
    store_add_conv(ps, "conv", conv, gconv);
    store_add_dense(ps, "head", head, ghead);

    auto loss = [&]() {
        ps.zero_grads();
        Array pre = conv_forward(conv, x);          // [3,4,4]
        Array up = upsample2_forward(pre);          // [3,8,8]
        Array act = relu(up);
        // mean-pool back down so upsample backward is exercised
        Array pooled = upsample2_backward(act);     // [3,4,4] (sums of 2x2)
        Array flat({1, static_cast<int>(pooled.numel())}, pooled.data);
        Array logits = affine_forward(flat, head.w, &head.b);
        Array diff = sub(logits, target);
        const double l = mean_sq(diff);

        Array dlogits = scaled(diff, 2.0 / static_cast<double>(diff.numel()));
        Array dflat = affine_backward(flat, head.w, dlogits, &ghead.w, &ghead.b);
        Array dpooled(pooled.shape, dflat.data);
        Array dact = upsample2_forward(dpooled);
        Array dup = relu_backward(up, dact);
        Array dpre = upsample2_backward(dup);
        conv_backward(conv, x, dpre, &gconv);
        return l;
    };
    CHECK(grad_check(loss, ps, 1e-5) < 1e-6);
}

TEST_CASE("conv stride-1 gradient including input path") {
    Rng rng(29);
    Conv3x3 conv = Conv3x3::init(3, 2, 1, rng);
    Conv3x3 gconv = Conv3x3::zeros_like(conv);
    Array x({3, 5, 5});
    rng.fill_normal(x);
    Array gx(x.shape);

    ParamStore ps;
    store_add_conv(ps, "c", conv, gconv);
    ps.add("x", x, gx);

    auto loss = [&]() {
        ps.zero_grads();
        Array y = conv_forward(conv, x);
        const double l = mean_sq(y);
        Array dy = scaled(y, 2.0 / static_cast<double>(y.numel()));
        Array dx = conv_backward(conv, x, dy, &gconv);
        gx = dx;
        return l;
    };
    CHECK(grad_check(loss, ps, 1e-5) < 1e-6);
}

TEST_CASE("ParamStore rejects duplicates and mismatched gradients") {
    Array v({2}), g({2}), bad({3});
    ParamStore ps;
    ps.add("a", v, g);
    CHECK_THROWS_AS(ps.add("a", v, g), contract_error);
    CHECK_THROWS_AS(ps.add("b", v, bad), dim_error);
}

TEST_CASE("rng streams are deterministic and fork independently") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c = a.fork(1), d = a.fork(2);
    CHECK(c.next_u64() != d.next_u64());
    Rng e(7);
    double mean = 0;
    for (int i = 0; i < 20000; ++i) mean += e.normal();
    mean /= 20000;
    CHECK(std::fabs(mean) < 0.05);
}

TEST_CASE("parallel_for covers every index exactly once") {
    std::vector<int> hits(1000, 0);
    parallel_for(1000, [&](int64_t i) { hits[static_cast<size_t>(i)] += 1; });
    for (int h : hits) CHECK(h == 1);
}
