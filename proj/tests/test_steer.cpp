#include <catch2/catch_amalgamated.hpp>

#include "casl/steer.hpp"

using namespace casl;

namespace {

struct SteerStack {
    DiffusionSchedule sched = DiffusionSchedule::make(100, 25);
    Denoiser den;
    SaeModel sae;
    ConceptMap map;
    Array image;
};

SteerStack make_steer_stack(uint64_t seed) {
    SteerStack st;
    st.den.cfg = {16, 4, 6, 8, 8};
    Rng rng(seed);
    st.den.p = DenoiserParams::init(st.den.cfg, rng, false);
    for (double& v : st.den.p.out.w.data) v *= 0.2;

    st.sae.cfg.channels = 8;
    st.sae.cfg.expansion = 2;
    st.sae.cfg.window_grid = st.sched.window(50);
    st.sae.p = SaeParams::init(st.sae.cfg, rng);
    st.sae.p.b_lat.fill(0.1); // keep some latents active for nonzero shifts

    st.map.w = Array({8, 16});
    st.map.b = Array({8});
    rng.fill_uniform(st.map.w, -0.3, 0.3);
    rng.fill_uniform(st.map.b, -0.1, 0.1);

    st.image = generate_corpus(1, seed ^ 0x7, 16)[0].pixels;
    return st;
}

} // namespace

TEST_CASE("coordinate construction and contract") {
    Array c1 = coordinate(2.0, {1}, 3);
    CHECK(c1.data == std::vector<double>{0.0, 2.0, 0.0});

    Array c0 = coordinate(0.0, {0, 2}, 3);
    for (double v : c0.data) CHECK(v == 0.0);

    Array call = coordinate(1.0, {0, 1, 2}, 3);
    for (double v : call.data) CHECK(v == 1.0);

    CHECK_THROWS_AS(coordinate(1.0, {3}, 3), contract_error);
    CHECK_THROWS_AS(coordinate(1.0, {-1}, 3), contract_error);
}

TEST_CASE("concept_shift hand examples") {
    ConceptMap map;
    map.w = Array({1, 2}, {1.0, -1.0});
    map.b = Array({1}, {9.0}); // must be ignored
    Array z({1, 2}, {2.0, 1.0});
    CHECK(concept_shift(map, z, Array({2}, {3.0, 0.0})).data[0] == 6.0);

    Array zero_coord({2});
    CHECK(concept_shift(map, z, zero_coord).data[0] == 0.0);

    // alpha on every dimension distributes over the linear map
    Rng rng(5);
    ConceptMap big;
    big.w = Array({4, 6});
    big.b = Array({4});
    rng.fill_normal(big.w);
    Array zb({3, 6});
    rng.fill_normal(zb);
    const double alpha = 1.7;
    Array via_coord = concept_shift(big, zb, Array::full({6}, alpha));
    Array via_dir = scaled(direction(big, zb), alpha); // b = 0
    CHECK(max_abs_diff(via_coord, via_dir) < 1e-12);

    Array bad({1, 3});
    CHECK_THROWS_AS(concept_shift(map, bad, zero_coord), dim_error);
    CHECK_THROWS_AS(concept_shift(map, z, Array({3})), dim_error);
}

TEST_CASE("zero intensity reproduces the reconstruction bit-exactly") {
    SteerStack st = make_steer_stack(41);
    auto inv = ddim_invert(st.den, st.sched, st.image, st.sched.timesteps);
    Array recon = ddim_generate(st.den, st.sched, inv.x[0]);

    SteerConfig cfg;
    cfg.alpha = 0.0;
    cfg.k = 1;
    cfg.t_edit = 50;
    SteerResult res = steer(st.den, st.sae, st.map, st.sched, st.image, cfg);
    CHECK(res.steered.data == recon.data); // same code path, zero shift
    CHECK(res.trace.size() == st.sched.window(50).size());
    for (double v : res.trace) CHECK(v == 0.0);
}

TEST_CASE("gain and intensity commute through the linear shift") {
    SteerStack st = make_steer_stack(42);
    auto inv = ddim_invert(st.den, st.sched, st.image, st.sched.timesteps);

    SteerConfig a;
    a.alpha = 1.0;
    a.gamma = 2.0;
    a.k = 4;
    a.t_edit = 50;
    SteerConfig b;
    b.alpha = 2.0;
    b.gamma = 1.0;
    b.k = 4;
    b.t_edit = 50;
    SteerResult ra = steer_from_top(st.den, st.sae, st.map, st.sched, inv.x[0], a);
    SteerResult rb = steer_from_top(st.den, st.sae, st.map, st.sched, inv.x[0], b);
    CHECK(max_abs_diff(ra.steered, rb.steered) < 1e-12);
    REQUIRE(ra.trace.size() == rb.trace.size());
    for (size_t i = 0; i < ra.trace.size(); ++i)
        CHECK(std::fabs(ra.trace[i] - rb.trace[i]) < 1e-12);
}

TEST_CASE("an empty editing window is the identity on the trajectory") {
    SteerStack st = make_steer_stack(43);
    // hand-built coarse grid that never reaches the editing threshold
    DiffusionSchedule coarse = st.sched;
    coarse.grid = {40, 20, 0};
    st.sae.cfg.window_grid = {40, 20}; // embeddings exist but stay unused

    auto inv = ddim_invert(st.den, coarse, st.image, coarse.timesteps);
    Array recon = ddim_generate(st.den, coarse, inv.x[0]);

    SteerConfig cfg;
    cfg.alpha = 8.0;
    cfg.k = 4;
    cfg.t_edit = 50; // above every grid point
    SteerResult res = steer_from_top(st.den, st.sae, st.map, coarse, inv.x[0], cfg);
    CHECK(res.trace.empty());
    CHECK(res.steered.data == recon.data);
}

TEST_CASE("asymmetric and symmetric injections differ for a real shift") {
    SteerStack st = make_steer_stack(44);
    auto inv = ddim_invert(st.den, st.sched, st.image, st.sched.timesteps);
    SteerConfig cfg;
    cfg.alpha = 4.0;
    cfg.k = 4;
    cfg.t_edit = 50;
    SteerResult asym = steer_from_top(st.den, st.sae, st.map, st.sched, inv.x[0], cfg);
    cfg.symmetric = true;
    SteerResult sym = steer_from_top(st.den, st.sae, st.map, st.sched, inv.x[0], cfg);
    CHECK(max_abs_diff(asym.steered, sym.steered) > 0.0);

    cfg.symmetric = false;
    cfg.include_bias = true;
    SteerResult biased = steer_from_top(st.den, st.sae, st.map, st.sched, inv.x[0], cfg);
    CHECK(max_abs_diff(asym.steered, biased.steered) > 0.0);
}

TEST_CASE("steer validates components and config") {
    SteerStack st = make_steer_stack(45);
    SteerConfig cfg;
    cfg.k = 99;
    CHECK_THROWS_AS(steer(st.den, st.sae, st.map, st.sched, st.image, cfg), contract_error);
    cfg.k = 1;
    cfg.t_edit = 500;
    CHECK_THROWS_AS(steer(st.den, st.sae, st.map, st.sched, st.image, cfg), contract_error);
    cfg.t_edit = 50;
    cfg.alpha = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(steer(st.den, st.sae, st.map, st.sched, st.image, cfg), contract_error);

    ConceptMap stale = st.map;
    stale.sae_ref = 0xdeadbeef; // trained against some other SAE
    SteerConfig ok;
    ok.t_edit = 50;
    CHECK_THROWS_AS(steer(st.den, st.sae, stale, st.sched, st.image, ok), config_error);
}
