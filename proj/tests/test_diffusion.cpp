#include <catch2/catch_amalgamated.hpp>

#include "casl/diffusion.hpp"

using namespace casl;

namespace {

// small denoiser with a non-degenerate (randomized) output layer
Denoiser tiny_denoiser(uint64_t seed, int image_size = 16) {
    Denoiser den;
    den.cfg = {image_size, 4, 6, 8, 8};
    den.seed = seed;
    Rng rng(seed);
    den.p = DenoiserParams::init(den.cfg, rng, /*zero_output_layer=*/false);
    // keep the untrained noise field small so inversion is well-behaved
    for (double& v : den.p.out.w.data) v *= 0.2;
    for (double& v : den.p.out.b.data) v *= 0.2;
    return den;
}

} // namespace

TEST_CASE("schedule invariants hold") {
    auto s = DiffusionSchedule::make(100, 50);
    REQUIRE(s.beta.size() == 100);
    CHECK(s.beta.front() == 1e-4);
    CHECK(std::fabs(s.beta.back() - 0.02) < 1e-15);
    for (int t = 0; t < 100; ++t) {
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] < 1.0);
        CHECK(s.alpha_bar[t] > 0.0);
        CHECK(s.alpha_bar[t] < 1.0);
        if (t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
    REQUIRE(s.grid.size() == 50);
    CHECK(s.grid.front() == 99);
    CHECK(s.grid.back() == 0);
    for (size_t i = 1; i < s.grid.size(); ++i) CHECK(s.grid[i] < s.grid[i - 1]);

    auto window = s.window(50);
    for (int t : window) CHECK(t >= 50);
    CHECK(window.front() == 99);
    CHECK(s.window(100).empty());
}

TEST_CASE("ddim step matches the scalar hand oracle") {
    Array x({1}, {1.0});
    Array ei({1}, {0.2});
    Array ep({1}, {0.1});
    Array out = ddim_step_abar(x, 0.25, 0.81, ei, ep);
    const double p_t = (1.0 - std::sqrt(0.75) * 0.2) / 0.5;
    CHECK(std::fabs(p_t - 1.6535898384862247) < 1e-12);
    const double expect = 0.9 * p_t + std::sqrt(0.19) * 0.1;
    CHECK(out.data[0] == expect);
    CHECK(std::fabs(out.data[0] - 1.5318198440730089) < 1e-9);
}

TEST_CASE("ddim step ordering and shape errors") {
    auto s = DiffusionSchedule::make(100, 50);
    Array x({2}, {1.0, 2.0});
    Array e({2}, {0.0, 0.0});
    CHECK_THROWS_AS(ddim_step(s, x, 10, 10, e, e), contract_error);
    CHECK_THROWS_AS(ddim_step(s, x, 10, 20, e, e), contract_error);
    Array wrong({3});
    CHECK_THROWS_AS(ddim_step(s, x, 20, 10, wrong, e), dim_error);
}

TEST_CASE("asymmetric update with shared eps collapses bit-exactly") {
    Rng rng(7);
    Array x({8}), e({8});
    rng.fill_normal(x);
    rng.fill_normal(e);
    Array asym = ddim_step_abar(x, 0.3, 0.7, e, e);
    Array sym = ddim_step_abar(x, 0.3, 0.7, e, e);
    CHECK(asym.data == sym.data); // same code path, tolerance zero
}

TEST_CASE("zero noise prediction reduces to pure rescaling") {
    Rng rng(8);
    Array x({16});
    rng.fill_normal(x);
    Array zero({16});
    Array out = ddim_step_abar(x, 0.25, 0.81, zero, zero);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(std::fabs(out.data[i] - std::sqrt(0.81 / 0.25) * x.data[i]) < 1e-12);
}

TEST_CASE("bottleneck interception is exactly additive") {
    auto den = tiny_denoiser(3);
    Rng rng(4);
    Array img({16, 16});
    rng.fill_uniform(img, -1, 1);
    EncCache ec;
    denoiser_encode(den, img, 7, ec);
    Array delta(ec.h.shape);
    rng.fill_normal(delta, 0.0, 0.5);

    DecCache dc_plain, dc_twice;
    Array plain = denoiser_decode(den, ec, ec.h, dc_plain);
    // inject delta, then inject -delta at a second interception
    Array shifted = add(ec.h, delta);
    Array recovered = sub(shifted, delta);
    Array twice = denoiser_decode(den, ec, recovered, dc_twice);
    CHECK(max_abs_diff(plain, twice) < 1e-12);
}

TEST_CASE("predict_x0 with zero shift equals the plain prediction") {
    auto den = tiny_denoiser(5);
    auto sched = DiffusionSchedule::make(100, 50);
    Rng rng(6);
    Array x_t({16, 16});
    rng.fill_normal(x_t, 0.0, 0.5);
    Array none = predict_x0(den, sched, x_t, 61);
    Array zero_delta({den.cfg.tokens(), den.cfg.channels});
    Array with_zero = predict_x0(den, sched, x_t, 61, &zero_delta);
    CHECK(none.data == with_zero.data);

    Array tiny_delta = zero_delta;
    tiny_delta.fill(1e-9);
    Array nudged = predict_x0(den, sched, x_t, 61, &tiny_delta);
    CHECK(max_abs_diff(none, nudged) < 1e-5);

    Array bad({3, 3});
    CHECK_THROWS_AS(predict_x0(den, sched, x_t, 61, &bad), dim_error);
}

TEST_CASE("denoiser gradients pass grad_check at 3 seeds") {
    auto sched = DiffusionSchedule::make(100, 50);
    for (uint64_t seed : {101ull, 102ull, 103ull}) {
        auto den = tiny_denoiser(seed);
        Rng rng(seed ^ 0xabc);
        Array x0({16, 16});
        rng.fill_uniform(x0, -1, 1);
        Array noise({16, 16});
        rng.fill_normal(noise);
        Array x_t = diffuse_to(sched, x0, 31, noise);

        DenoiserParams grads = DenoiserParams::zeros_like(den.p);
        ParamStore ps = den.store(grads);
        auto loss = [&]() {
            ps.zero_grads();
            EncCache ec;
            denoiser_encode(den, x_t, 31, ec);
            DecCache dc;
            Array eps = denoiser_decode(den, ec, ec.h, dc);
            Array diff = sub(eps, noise);
            const double l = mean_sq(diff);
            Array d_eps = scaled(diff, 2.0 / static_cast<double>(diff.numel()));
            denoiser_backward(den, ec, dc, d_eps, grads);
            return l;
        };
        CHECK(grad_check(loss, ps, 1e-5) < 1e-4);
    }
}

TEST_CASE("inversion round trip and determinism on an untrained field") {
    auto den = tiny_denoiser(9);
    auto sched = DiffusionSchedule::make(100, 50);
    auto corpus = generate_corpus(2, 77, 16);
    const Array& x0 = corpus[0].pixels;

    auto inv1 = ddim_invert(den, sched, x0, 50, 0);
    auto inv2 = ddim_invert(den, sched, x0, 50, 0);
    REQUIRE(inv1.x.size() == inv2.x.size());
    for (size_t i = 0; i < inv1.x.size(); ++i) CHECK(inv1.x[i].data == inv2.x[i].data);

    // activations recorded at every window grid point
    auto window = sched.window(50);
    REQUIRE(inv1.acts.size() == window.size());

    Array back = ddim_generate(den, sched, inv1.x[0]);
    CHECK(max_abs_diff(back, x0) < 1e-3);

    // a single-interval grid is strictly worse than the fine grid
    auto coarse = DiffusionSchedule::make(100, 2);
    auto inv_c = ddim_invert(den, coarse, x0, 50, 0);
    Array back_c = ddim_generate(den, coarse, inv_c.x[0]);
    CHECK(max_abs_diff(back_c, x0) > max_abs_diff(back, x0));
}

TEST_CASE("zero-epoch training returns the zero-noise predictor") {
    auto corpus = generate_corpus(40, 91, 16);
    auto sched = DiffusionSchedule::make(100, 50);
    DenoiserConfig cfg{16, 4, 6, 8, 8};
    auto den = train_backbone(corpus, sched, 0, 1e-3, 5, /*max_mse_ratio=*/0.0, 16, cfg);
    std::vector<int64_t> held;
    for (int64_t i = 0; i < 40; ++i)
        if (is_held_out(i)) held.push_back(i);
    const double mse = noise_prediction_mse(den, sched, corpus, held, 11);
    CHECK(mse > 0.8);  // zero predictor scores E||eps||^2 = 1
    CHECK(mse < 1.2);
}

TEST_CASE("backbone training is deterministic and reduces the noise MSE") {
    auto corpus = generate_corpus(60, 92, 16);
    auto sched = DiffusionSchedule::make(100, 50);
    DenoiserConfig cfg{16, 4, 6, 8, 8};
    auto d1 = train_backbone(corpus, sched, 2, 1e-3, 5, 0.0, 16, cfg);
    auto d2 = train_backbone(corpus, sched, 2, 1e-3, 5, 0.0, 16, cfg);
    CHECK(denoiser_id(d1) == denoiser_id(d2)); // bit-identical parameters

    std::vector<int64_t> held;
    for (int64_t i = 0; i < 60; ++i)
        if (is_held_out(i)) held.push_back(i);
    auto d0 = train_backbone(corpus, sched, 0, 1e-3, 5, 0.0, 16, cfg);
    const double before = noise_prediction_mse(d0, sched, corpus, held, 3);
    const double after = noise_prediction_mse(d1, sched, corpus, held, 3);
    CHECK(after < before);
}
