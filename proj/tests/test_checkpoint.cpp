#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "casl/checkpoint.hpp"
#include "casl/rng.hpp"

using namespace casl;

namespace {

fs::path temp_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("casl_ckpt_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("checkpoint round trip is bit exact") {
    auto dir = temp_dir("roundtrip");
    Rng rng(5);
    Checkpoint ck;
    Array a({3, 4});
    rng.fill_normal(a);
    Array b({7});
    rng.fill_uniform(b, -2, 2);
    ck.add("weights/a", a);
    ck.add("weights/b", b);
    ck.meta["kind"] = "test";
    ck.meta["lr"] = 5e-4;
    ck.save(dir / "model");

    Checkpoint rd = Checkpoint::load(dir / "model");
    CHECK(rd.get("weights/a").shape == a.shape);
    CHECK(rd.get("weights/a").data == a.data);
    CHECK(rd.get("weights/b").data == b.data);
    CHECK(rd.meta["kind"] == "test");
    CHECK(rd.payload_hash() == ck.payload_hash());

    // manifest carries the required fields
    auto manifest = nlohmann::json::parse(read_file(dir / "model.json"));
    CHECK(manifest["version"] == "casl-ckpt-v1");
    CHECK(manifest["entries"][0]["dtype"] == "f64");
    CHECK(manifest["entries"][1]["byte_offset"] == 12 * 8);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint rejects duplicates, unknown names and non-finite data") {
    Checkpoint ck;
    Array a({2}, {1.0, 2.0});
    ck.add("a", a);
    CHECK_THROWS_AS(ck.add("a", a), contract_error);
    CHECK_THROWS_AS(ck.get("missing"), io_error);

    auto dir = temp_dir("nonfinite");
    Checkpoint bad;
    Array nf({1}, {std::numeric_limits<double>::infinity()});
    bad.add("x", nf);
    CHECK_THROWS_AS(bad.save(dir / "bad"), numeric_error);
    CHECK_FALSE(Checkpoint::exists(dir / "bad"));
    fs::remove_all(dir);
}

TEST_CASE("atomic writes never leave a partial file under the final name") {
    auto dir = temp_dir("atomic");
    const fs::path target = dir / "artifact.json";
    atomic_write_file(target, std::string("{}"));
    CHECK(fs::exists(target));
    CHECK_FALSE(fs::exists(dir / "artifact.json.tmp"));
    fs::remove_all(dir);
}

TEST_CASE("fnv1a64 known vectors") {
    // reference values for the 64-bit FNV-1a test suite
    CHECK(fnv1a64(std::string("")) == 14695981039346656037ull);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ull);
}

TEST_CASE("pgm round trip within quantization error") {
    auto dir = temp_dir("pgm");
    Rng rng(9);
    Array img({16, 16});
    rng.fill_uniform(img, -1.0, 1.0);
    write_pgm(dir / "img.pgm", img);
    Array back = read_pgm(dir / "img.pgm");
    REQUIRE(back.shape == img.shape);
    CHECK(max_abs_diff(back, img) <= 1.0 / 255.0 + 1e-12);

    // out-of-range values clamp rather than wrap
    Array hot({1, 2}, {1.5, -3.0});
    write_pgm(dir / "hot.pgm", hot);
    Array hot_back = read_pgm(dir / "hot.pgm");
    CHECK(hot_back.data[0] == 1.0);
    CHECK(hot_back.data[1] == -1.0);
    fs::remove_all(dir);
}
