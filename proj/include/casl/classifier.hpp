#pragma once

// Differentiable attribute classifier: two strided 3x3 convolutions and an
// affine head over the flattened features. It is both the semantic loss
// surrogate for concept alignment and the scoring function behind EPR, so its
// gradients with respect to the input image are part of the contract.

#include <atomic>
#include <cstdio>
#include <string>
#include <vector>

#include "casl/core.hpp"
#include "casl/nn.hpp"
#include "casl/parallel.hpp"
#include "casl/synth.hpp"

namespace casl {

struct ClassifierConfig {
    int image_size = 32;
    int c1 = 8;
    int c2 = 16;
    int n_attr = kNumAttributes;

    int feat_dim() const {
        const int s4 = conv_out_extent(conv_out_extent(image_size, 2), 2);
        return c2 * s4 * s4;
    }
};

struct ClassifierParams {
    Conv3x3 conv1, conv2;
    Dense head;

    static ClassifierParams init(const ClassifierConfig& cfg, Rng& rng) {
        ClassifierParams p;
        p.conv1 = Conv3x3::init(1, cfg.c1, 2, rng);
        p.conv2 = Conv3x3::init(cfg.c1, cfg.c2, 2, rng);
        p.head = Dense::init(cfg.feat_dim(), cfg.n_attr, rng);
        return p;
    }

    static ClassifierParams zeros_like(const ClassifierParams& o) {
        ClassifierParams g;
        g.conv1 = Conv3x3::zeros_like(o.conv1);
        g.conv2 = Conv3x3::zeros_like(o.conv2);
        g.head = Dense::zeros_like(o.head);
        return g;
    }
};

struct AttributeClassifier {
    ClassifierConfig cfg;
    ClassifierParams p;
    uint64_t seed = 0;

    ParamStore store(ClassifierParams& grads) {
        ParamStore ps;
        store_add_conv(ps, "conv1", p.conv1, grads.conv1);
        store_add_conv(ps, "conv2", p.conv2, grads.conv2);
        store_add_dense(ps, "head", p.head, grads.head);
        return ps;
    }
};

struct ClfCache {
    Array x;    // [1,S,S]
    Array pre1, a1, pre2, a2;
    Array flat; // [1,feat]
    Array logits;
};

inline Array clf_forward(const AttributeClassifier& clf, const Array& img, ClfCache& c) {
    require_shape(img, {clf.cfg.image_size, clf.cfg.image_size}, "classifier input");
    c.x = Array({1, clf.cfg.image_size, clf.cfg.image_size}, img.data);
    c.pre1 = conv_forward(clf.p.conv1, c.x);
    c.a1 = relu(c.pre1);
    c.pre2 = conv_forward(clf.p.conv2, c.a1);
    c.a2 = relu(c.pre2);
    c.flat = Array({1, static_cast<int>(c.a2.numel())}, c.a2.data);
    c.logits = affine_forward(c.flat, clf.p.head.w, &clf.p.head.b);
    return Array({clf.cfg.n_attr}, c.logits.data);
}

/// Backward from dlogits; accumulates into g when given, returns d(image).
inline Array clf_backward(const AttributeClassifier& clf, const ClfCache& c,
                          const Array& dlogits, ClassifierParams* g) {
    Array dl({1, clf.cfg.n_attr}, dlogits.data);
    Array dflat = affine_backward(c.flat, clf.p.head.w, dl,
                                  g ? &g->head.w : nullptr, g ? &g->head.b : nullptr);
    Array da2(c.a2.shape, dflat.data);
    Array dpre2 = relu_backward(c.pre2, da2);
    Array da1 = conv_backward(clf.p.conv2, c.a1, dpre2, g ? &g->conv2 : nullptr);
    Array dpre1 = relu_backward(c.pre1, da1);
    Array dx = conv_backward(clf.p.conv1, c.x, dpre1, g ? &g->conv1 : nullptr);
    return Array({clf.cfg.image_size, clf.cfg.image_size}, dx.data);
}

/// Raw logits; slightly out-of-range pixels are clamped (steering overshoot).
inline Array classify(const AttributeClassifier& clf, const Array& img) {
    Array clamped = img;
    bool clipped = false;
    for (double& v : clamped.data) {
        if (v < -1.0) { v = -1.0; clipped = true; }
        if (v > 1.0) { v = 1.0; clipped = true; }
    }
    if (clipped) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true))
            std::fprintf(stderr, "casl: classify clamped out-of-range pixels to [-1,1]\n");
    }
    ClfCache cache;
    return clf_forward(clf, clamped, cache);
}

// ----------------------------- training -----------------------------

// Numerically stable sigmoid cross entropy with logits:
//   loss = softplus(z) - y*z,  dloss/dz = sigmoid(z) - y
inline double sigmoid_ce(double z, double y, double& dz) {
    const double sp = z > 30.0 ? z : std::log1p(std::exp(z));
    dz = 1.0 / (1.0 + std::exp(-z)) - y;
    return sp - y * z;
}

struct ClassifierEval {
    std::vector<double> balanced_accuracy; // per attribute
    double mean_loss = 0.0;
};

inline ClassifierEval evaluate_classifier(const AttributeClassifier& clf,
                                          const std::vector<LabeledImage>& corpus,
                                          const std::vector<int64_t>& indices) {
    const int a = clf.cfg.n_attr;
    std::vector<double> tp(a, 0), tn(a, 0), pos(a, 0), neg(a, 0);
    std::vector<Array> logits(indices.size());
    parallel_for(static_cast<int64_t>(indices.size()), [&](int64_t k) {
        logits[static_cast<size_t>(k)] = classify(clf, corpus[static_cast<size_t>(indices[k])].pixels);
    });
    double loss = 0.0;
    for (size_t k = 0; k < indices.size(); ++k) {
        const auto& im = corpus[static_cast<size_t>(indices[k])];
        for (int j = 0; j < a; ++j) {
            double dz;
            loss += sigmoid_ce(logits[k].data[j], im.labels[j], dz);
            const bool pred = logits[k].data[j] > 0.0;
            if (im.labels[j]) {
                pos[j] += 1;
                tp[j] += pred;
            } else {
                neg[j] += 1;
                tn[j] += !pred;
            }
        }
    }
    ClassifierEval ev;
    ev.mean_loss = loss / (static_cast<double>(indices.size()) * a);
    for (int j = 0; j < a; ++j) {
        const double tpr = pos[j] > 0 ? tp[j] / pos[j] : 1.0;
        const double tnr = neg[j] > 0 ? tn[j] / neg[j] : 1.0;
        ev.balanced_accuracy.push_back(0.5 * (tpr + tnr));
    }
    return ev;
}

/// Sigmoid cross-entropy training on the 80% split; throws train_error with a
/// per-attribute report when held-out balanced accuracy misses min_accuracy.
inline AttributeClassifier train_classifier(const std::vector<LabeledImage>& corpus,
                                            int epochs, double lr, uint64_t seed,
                                            double min_accuracy = 0.9, int batch = 64) {
    if (corpus.empty()) throw contract_error("train_classifier: empty corpus");
    AttributeClassifier clf;
    clf.cfg.image_size = corpus.front().pixels.shape[0];
    clf.seed = seed;
    Rng rng(seed);
    clf.p = ClassifierParams::init(clf.cfg, rng);

    std::vector<int64_t> train_idx, held_idx;
    for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i)
        (is_held_out(i) ? held_idx : train_idx).push_back(i);

    ClassifierParams grads = ClassifierParams::zeros_like(clf.p);
    ParamStore ps = clf.store(grads);
    AdamState adam = AdamState::init(ps, lr);

    std::vector<ClassifierParams> shard_grads;
    for (int s = 0; s < kGradShards; ++s) shard_grads.push_back(ClassifierParams::zeros_like(clf.p));

    std::vector<int64_t> order = train_idx;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t stop = std::min(order.size(), start + batch);
            const int64_t bsz = static_cast<int64_t>(stop - start);
            std::vector<double> shard_loss(kGradShards, 0.0);
            parallel_for(kGradShards, [&](int64_t s) {
                ClassifierParams& g = shard_grads[static_cast<size_t>(s)];
                const int64_t lo = s * bsz / kGradShards, hi = (s + 1) * bsz / kGradShards;
                for (int64_t k = lo; k < hi; ++k) {
                    const auto& im = corpus[static_cast<size_t>(order[start + k])];
                    ClfCache cache;
                    Array logits = clf_forward(clf, im.pixels, cache);
                    Array dlogits({clf.cfg.n_attr});
                    for (int j = 0; j < clf.cfg.n_attr; ++j) {
                        double dz;
                        shard_loss[static_cast<size_t>(s)] += sigmoid_ce(logits.data[j], im.labels[j], dz);
                        dlogits.data[j] = dz / (static_cast<double>(bsz) * clf.cfg.n_attr);
                    }
                    clf_backward(clf, cache, dlogits, &g);
                }
            });
            ps.zero_grads();
            double loss = 0.0;
            for (int s = 0; s < kGradShards; ++s) { // fixed reduction order
                loss += shard_loss[static_cast<size_t>(s)];
                ClassifierParams& g = shard_grads[static_cast<size_t>(s)];
                add_inplace(grads.conv1.w, g.conv1.w);
                add_inplace(grads.conv1.b, g.conv1.b);
                add_inplace(grads.conv2.w, g.conv2.w);
                add_inplace(grads.conv2.b, g.conv2.b);
                add_inplace(grads.head.w, g.head.w);
                add_inplace(grads.head.b, g.head.b);
                g.conv1.w.zero(); g.conv1.b.zero();
                g.conv2.w.zero(); g.conv2.b.zero();
                g.head.w.zero(); g.head.b.zero();
            }
            if (!std::isfinite(loss)) throw train_error("train_classifier: loss diverged");
            adam_step(ps, adam);
        }
    }

    ClassifierEval ev = evaluate_classifier(clf, corpus, held_idx.empty() ? train_idx : held_idx);
    for (int j = 0; j < clf.cfg.n_attr; ++j) {
        if (ev.balanced_accuracy[j] < min_accuracy) {
            std::string report = "train_classifier: held-out balanced accuracy below " +
                                 std::to_string(min_accuracy) + ":";
            for (int k = 0; k < clf.cfg.n_attr; ++k)
                report += std::string(" ") + attribute_name(k) + "=" +
                          std::to_string(ev.balanced_accuracy[k]);
            throw train_error(report);
        }
    }
    return clf;
}

inline uint64_t classifier_id(const AttributeClassifier& clf) {
    uint64_t h = hash_array(clf.p.conv1.w);
    h = hash_array(clf.p.conv1.b, h);
    h = hash_array(clf.p.conv2.w, h);
    h = hash_array(clf.p.conv2.b, h);
    h = hash_array(clf.p.head.w, h);
    h = hash_array(clf.p.head.b, h);
    return h;
}

} // namespace casl
