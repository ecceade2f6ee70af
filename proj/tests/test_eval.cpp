#include <catch2/catch_amalgamated.hpp>

#include "casl/eval.hpp"

using namespace casl;

namespace {

AttributeLogits make_logits(std::vector<double> v, int64_t id, const char* tag) {
    const int n = static_cast<int>(v.size());
    return {Array({n}, std::move(v)), id, tag};
}

LogitPair pair_of(std::vector<double> orig, std::vector<double> edit, int64_t id = 0) {
    return {make_logits(std::move(orig), id, "original"), make_logits(std::move(edit), id, "edited")};
}

} // namespace

TEST_CASE("delta_target hand examples") {
    std::vector<LogitPair> same = {pair_of({0.5, 1.0, -1.0}, {0.5, 1.0, -1.0})};
    CHECK(delta_target(same, 0) == 0.0);

    std::vector<LogitPair> one = {pair_of({0.5, 0, 0}, {2.0, 0, 0})};
    CHECK(delta_target(one, 0) == 1.5);

    std::vector<LogitPair> two = {pair_of({0, 0}, {1.0, 0}, 0), pair_of({0, 0}, {-3.0, 0}, 1)};
    CHECK(delta_target(two, 0) == 2.0);

    std::vector<LogitPair> empty;
    CHECK_THROWS_AS(delta_target(empty, 0), contract_error);
}

TEST_CASE("delta_non_target hand examples and contracts") {
    std::vector<LogitPair> same = {pair_of({1, 2, 3}, {1, 2, 3})};
    CHECK(delta_non_target(same, {1, 2}, 0) == 0.0);

    std::vector<LogitPair> one = {pair_of({0, 0, 0}, {9.0, 0.1, -0.3})};
    CHECK(std::fabs(delta_non_target(one, {1, 2}, 0) - 0.2) < 1e-15);

    // averaging order: constant per-attribute changes of 1 and 3 give 2 for any N
    for (int n : {1, 3, 7}) {
        std::vector<LogitPair> pairs;
        for (int i = 0; i < n; ++i) pairs.push_back(pair_of({0, 5, -2}, {0, 6, 1}, i));
        CHECK(delta_non_target(pairs, {1, 2}, 0) == 2.0);
    }

    CHECK_THROWS_AS(delta_non_target(same, {0, 1}, 0), contract_error);
    CHECK_THROWS_AS(delta_non_target(same, {}, 0), contract_error);
}

TEST_CASE("epr hand examples") {
    std::vector<LogitPair> same = {pair_of({1, 2, 3}, {1, 2, 3})};
    EprReport r0 = epr(same, 0, {1, 2});
    CHECK(r0.epr == 0.0);

    std::vector<LogitPair> spec_case = {pair_of({0.5, 0.0, 0.0}, {2.0, 0.1, -0.3})};
    EprReport r = epr(spec_case, 0, {1, 2});
    CHECK(std::fabs(r.d_target - 1.5) < 1e-15);
    CHECK(std::fabs(r.d_non_target - 0.2) < 1e-15);
    CHECK(std::fabs(r.epr - 1.5 / (0.2 + 1e-8)) < 1e-12);
    CHECK(std::fabs(r.epr - 7.5) < 1e-6);

    std::vector<LogitPair> floor_case = {pair_of({0, 0, 0}, {1.0, 0, 0})};
    EprReport rf = epr(floor_case, 0, {1, 2});
    CHECK(rf.epr == 1.0 / 1e-8);
}

TEST_CASE("epr properties: permutation, scaling, swap symmetry") {
    Rng rng(8);
    std::vector<LogitPair> pairs;
    for (int i = 0; i < 10; ++i) {
        std::vector<double> o(5), e(5);
        for (auto& v : o) v = rng.normal();
        for (auto& v : e) v = rng.normal();
        pairs.push_back(pair_of(o, e, i));
    }
    EprReport a = epr(pairs, 2, {0, 1, 3, 4});
    EprReport b = epr(pairs, 2, {4, 3, 1, 0});
    CHECK(a.epr == b.epr); // J order is irrelevant

    // scaling all target deltas by c scales EPR by c
    const double c = 3.5;
    std::vector<LogitPair> scaled_pairs = pairs;
    for (auto& [orig, edit] : scaled_pairs) {
        const double d = edit.logits.data[2] - orig.logits.data[2];
        edit.logits.data[2] = orig.logits.data[2] + c * d;
    }
    EprReport s = epr(scaled_pairs, 2, {0, 1, 3, 4});
    CHECK(std::fabs(s.epr - c * a.epr) < 1e-9 * std::fabs(c * a.epr));

    // |edited - original| is symmetric in the swap
    std::vector<LogitPair> swapped = pairs;
    for (auto& pr : swapped) std::swap(pr.first, pr.second);
    EprReport sw = epr(swapped, 2, {0, 1, 3, 4});
    CHECK(sw.epr == a.epr);
    CHECK(sw.d_target == a.d_target);
}

TEST_CASE("probe separates Gaussian blobs and stays at chance on noise") {
    Rng rng(21);
    const int m = 800, k = 8;
    Array latents({m, k});
    std::vector<int> labels(m);
    for (int i = 0; i < m; ++i) {
        labels[static_cast<size_t>(i)] = i % 2;
        const double mu = labels[static_cast<size_t>(i)] ? 3.0 : -3.0;
        for (int j = 0; j < k; ++j)
            latents.at(i, j) = (j < 2 ? mu : 0.0) + rng.normal();
    }
    ProbeModel sep = train_probe(latents, labels, {0, 1}, 0, 7);
    CHECK(sep.accuracy > 0.99);
    CHECK(sep.n_train == 640);
    CHECK(sep.n_test == 160);

    std::vector<int> shuffled = labels;
    Rng rng2(4);
    rng2.shuffle(shuffled);
    ProbeModel chance = train_probe(latents, shuffled, {2, 3, 4}, 0, 7);
    CHECK(chance.accuracy > 0.4);
    CHECK(chance.accuracy < 0.6);
}

TEST_CASE("probe rejects imbalanced label sets") {
    Array latents({100, 4});
    std::vector<int> labels(100, 1);
    for (int i = 0; i < 30; ++i) labels[static_cast<size_t>(i)] = 0; // 70/30
    CHECK_THROWS_AS(train_probe(latents, labels, {0}, 0, 1), data_error);
}

TEST_CASE("raw-pixel probe clears the learnability floor") {
    auto corpus = generate_corpus(800, 5);
    const int m = static_cast<int>(corpus.size());
    const int d = corpus[0].pixels.numel();
    Array feats({m, d});
    for (int i = 0; i < m; ++i)
        std::copy(corpus[static_cast<size_t>(i)].pixels.data.begin(),
                  corpus[static_cast<size_t>(i)].pixels.data.end(),
                  feats.data.begin() + static_cast<size_t>(i) * d);
    std::vector<int> all_dims(static_cast<size_t>(d));
    std::iota(all_dims.begin(), all_dims.end(), 0);
    for (int attr = 0; attr < kNumAttributes; ++attr) {
        std::vector<int> labels;
        for (const auto& im : corpus) labels.push_back(im.labels[static_cast<size_t>(attr)]);
        ProbeModel p = train_probe(feats, labels, all_dims, attr, 11);
        INFO("attribute " << attribute_name(attr));
        CHECK(p.accuracy > 0.8);
    }
}

TEST_CASE("random-direction map matches the trained column-norm scale") {
    Rng rng(77);
    ConceptMap trained;
    trained.w = Array({6, 20});
    trained.b = Array({6});
    rng.fill_normal(trained.w);
    trained.sae_ref = 123;

    ConceptMap rnd = make_random_direction_map(trained, 4, 9);
    CHECK(rnd.sae_ref == 123); // pipeline references survive
    double mean_norm = 0.0;    // over the map's own top-4 columns
    for (int q : select_topk(trained, 4)) {
        double s = 0.0;
        for (int i = 0; i < 6; ++i) s += trained.w.at(i, q) * trained.w.at(i, q);
        mean_norm += std::sqrt(s);
    }
    mean_norm /= 4;

    int nonzero_cols = 0;
    for (int q = 0; q < 20; ++q) {
        double s = 0.0;
        for (int i = 0; i < 6; ++i) s += rnd.w.at(i, q) * rnd.w.at(i, q);
        if (s > 0.0) {
            ++nonzero_cols;
            CHECK(std::fabs(std::sqrt(s) - mean_norm) < 1e-9);
        }
    }
    CHECK(nonzero_cols == 4);
    for (double v : rnd.b.data) CHECK(v == 0.0);

    ConceptMap again = make_random_direction_map(trained, 4, 9);
    CHECK(again.w.data == rnd.w.data); // seeded determinism

    // candidate restriction keeps the draw inside the given set
    ConceptMap restricted = make_random_direction_map(trained, 2, 5, {3, 8, 11});
    for (int q = 0; q < 20; ++q) {
        double s = 0.0;
        for (int i = 0; i < 6; ++i) s += restricted.w.at(i, q) * restricted.w.at(i, q);
        if (q != 3 && q != 8 && q != 11) CHECK(s == 0.0);
    }
    CHECK_THROWS_AS(make_random_direction_map(trained, 4, 5, {1, 2}), contract_error);
}

TEST_CASE("median helper") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK_THROWS_AS(median({}), contract_error);
}

TEST_CASE("csv emitters pin the documented schemas") {
    std::vector<SweepRow> rows = {{1, 2.0, 3, 1.0, 24, 0.5, 0.25, 1.999999992}};
    const std::string csv = epr_csv(rows);
    CHECK(csv.rfind("concept,alpha,k,gamma,n,delta_target,delta_non_target,epr\n", 0) == 0);
    CHECK(csv.find("1,2,3,1,24,0.5,0.25,") != std::string::npos);

    std::vector<ProbeRow> prows = {{0, 16, 0.9375, 640, 160, 42}};
    const std::string pcsv = probe_csv(prows);
    CHECK(pcsv.rfind("concept,k,accuracy,n_train,n_test,seed\n", 0) == 0);
    CHECK(pcsv.find("0,16,0.9375,640,160,42") != std::string::npos);
}
