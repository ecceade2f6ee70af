#include <catch2/catch_amalgamated.hpp>

#include "casl/synth.hpp"

using namespace casl;

TEST_CASE("generate_corpus rejects n < 1") {
    CHECK_THROWS_AS(generate_corpus(0, 7), contract_error);
}

TEST_CASE("generate_corpus is a pure function of (n, seed)") {
    auto a = generate_corpus(200, 7);
    auto b = generate_corpus(200, 7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pixels.data == b[i].pixels.data); // bit-exact
        CHECK(a[i].labels == b[i].labels);
    }
    auto c = generate_corpus(200, 8);
    CHECK(a[0].pixels.data != c[0].pixels.data);
}

TEST_CASE("attribute positive rates stay near balanced") {
    auto corpus = generate_corpus(1000, 7);
    for (double r : attribute_positive_rates(corpus)) {
        CHECK(r >= 0.35);
        CHECK(r <= 0.65);
    }
}

TEST_CASE("pixels stay in [-1,1] and labels threshold their factors") {
    auto corpus = generate_corpus(300, 3);
    for (const auto& im : corpus) {
        for (double v : im.pixels.data) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
        REQUIRE(im.labels.size() == kNumAttributes);
        CHECK(im.labels[0] == (im.spec.radius > 0.5));
        CHECK(im.labels[1] == (im.spec.fg_intensity > 0.5));
        CHECK(im.labels[2] == (im.spec.bg_intensity > 0.5));
        CHECK(im.labels[3] == (im.spec.pos_y > 0.5));
        // thresholded factors keep a margin around 0.5
        CHECK(std::fabs(im.spec.radius - 0.5) >= 0.06 - 1e-12);
    }
}

TEST_CASE("held-out rule is a fixed 80/20 index split") {
    int held = 0;
    for (int64_t i = 0; i < 1000; ++i) held += is_held_out(i);
    CHECK(held == 200);
    CHECK(is_held_out(4));
    CHECK_FALSE(is_held_out(5));
}
