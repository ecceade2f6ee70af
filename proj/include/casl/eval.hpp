#pragma once

// Evaluation suite: EPR over logit pairs, linear probing of selected latent
// dimensions, the matched-norm random-direction baseline, and the steering
// benchmark driver behind the hyperparameter sweeps.

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "casl/classifier.hpp"
#include "casl/core.hpp"
#include "casl/steer.hpp"

namespace casl {

constexpr double kEprEpsilon = 1e-8;

struct AttributeLogits {
    Array logits;
    int64_t image_id = -1;
    std::string variant; // "original" | "edited"
};

using LogitPair = std::pair<AttributeLogits, AttributeLogits>; // (original, edited)

/// Mean absolute change of the target logit over the pairs.
inline double delta_target(const std::vector<LogitPair>& pairs, int target) {
    if (pairs.empty()) throw contract_error("delta_target: no pairs");
    double s = 0.0;
    for (const auto& [orig, edit] : pairs) {
        if (!orig.logits.same_shape(edit.logits))
            throw dim_error("delta_target: logit lengths disagree");
        s += std::fabs(edit.logits.data[static_cast<size_t>(target)] -
                       orig.logits.data[static_cast<size_t>(target)]);
    }
    return s / static_cast<double>(pairs.size());
}

/// Mean over the non-target attributes of their mean absolute logit change.
inline double delta_non_target(const std::vector<LogitPair>& pairs,
                               const std::vector<int>& non_targets, int target) {
    if (pairs.empty()) throw contract_error("delta_non_target: no pairs");
    if (non_targets.empty()) throw contract_error("delta_non_target: empty attribute set");
    for (int j : non_targets)
        if (j == target) throw contract_error("delta_non_target: set contains the target");
    double s = 0.0;
    for (int j : non_targets) s += delta_target(pairs, j);
    return s / static_cast<double>(non_targets.size());
}

struct EprReport {
    double d_target = 0.0;
    double d_non_target = 0.0;
    double epr = 0.0;
    int n_pairs = 0;
    int target = 0;
    std::vector<int> non_targets;
    uint64_t classifier_ref = 0;
};

inline EprReport epr(const std::vector<LogitPair>& pairs, int target,
                     const std::vector<int>& non_targets, uint64_t classifier_ref = 0) {
    EprReport r;
    r.d_target = delta_target(pairs, target);
    r.d_non_target = delta_non_target(pairs, non_targets, target);
    r.epr = r.d_target / (r.d_non_target + kEprEpsilon);
    r.n_pairs = static_cast<int>(pairs.size());
    r.target = target;
    r.non_targets = non_targets;
    r.classifier_ref = classifier_ref;
    return r;
}

inline std::vector<int> non_target_set(int target, int n_attr) {
    std::vector<int> out;
    for (int j = 0; j < n_attr; ++j)
        if (j != target) out.push_back(j);
    return out;
}

// ----------------------------- linear probe -----------------------------

struct ProbeModel {
    Array w;                  // one weight per selected dimension
    double bias = 0.0;
    std::vector<int> dims;    // selected latent indices
    int concept_id = 0;
    uint64_t split_seed = 0;
    double accuracy = 0.0;    // held-out accuracy on the 20% split
    int n_train = 0, n_test = 0;
    Array feat_mean, feat_std; // train-split standardization
};

/// Hinge-loss linear classifier over the selected latent dimensions, trained
/// by minibatch SGD with L2 regularization on standardized features.
inline ProbeModel train_probe(const Array& latents, const std::vector<int>& labels,
                              const std::vector<int>& dims, int concept_id, uint64_t split_seed,
                              int epochs = 200, double lr = 0.05, double l2 = 1e-3) {
    if (latents.shape.size() != 2) throw dim_error("train_probe: latents must be [M,K]");
    const int m = latents.shape[0], k = latents.shape[1];
    if (static_cast<int>(labels.size()) != m) throw dim_error("train_probe: label count mismatch");
    const int d = static_cast<int>(dims.size());
    if (d < 1) throw contract_error("train_probe: empty dimension set");
    for (int q : dims)
        if (q < 0 || q >= k) throw contract_error("train_probe: dimension index out of range");

    int positives = 0;
    for (int y : labels) positives += y;
    const double rate = static_cast<double>(positives) / m;
    if (rate < 0.4 || rate > 0.6)
        throw data_error("train_probe: class imbalance beyond 60/40 (positive rate " +
                         std::to_string(rate) + ")");

    // 8:2 split on a seeded shuffle
    std::vector<int> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(split_seed);
    rng.shuffle(order);
    const int n_train = (m * 4) / 5;
    const int n_test = m - n_train;

    ProbeModel probe;
    probe.dims = dims;
    probe.concept_id = concept_id;
    probe.split_seed = split_seed;
    probe.n_train = n_train;
    probe.n_test = n_test;
    probe.feat_mean = Array({d});
    probe.feat_std = Array({d});
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n_train; ++i)
            mean += latents.at(order[static_cast<size_t>(i)], dims[static_cast<size_t>(j)]);
        mean /= n_train;
        double var = 0.0;
        for (int i = 0; i < n_train; ++i) {
            const double v = latents.at(order[static_cast<size_t>(i)], dims[static_cast<size_t>(j)]) - mean;
            var += v * v;
        }
        probe.feat_mean.data[static_cast<size_t>(j)] = mean;
        probe.feat_std.data[static_cast<size_t>(j)] = std::sqrt(var / std::max(1, n_train - 1)) + 1e-9;
    }
    auto feature = [&](int row, int j) {
        return (latents.at(row, dims[static_cast<size_t>(j)]) - probe.feat_mean.data[static_cast<size_t>(j)]) /
               probe.feat_std.data[static_cast<size_t>(j)];
    };

    probe.w = Array({d});
    std::vector<int> steps(order.begin(), order.begin() + n_train);
    const int batch = 32;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(steps);
        for (size_t start = 0; start < steps.size(); start += batch) {
            const size_t stop = std::min(steps.size(), start + batch);
            Array gw({d});
            double gb = 0.0;
            for (size_t i = start; i < stop; ++i) {
                const int row = steps[i];
                const double y = labels[static_cast<size_t>(row)] ? 1.0 : -1.0;
                double score = probe.bias;
                for (int j = 0; j < d; ++j)
                    score += probe.w.data[static_cast<size_t>(j)] * feature(row, j);
                if (y * score < 1.0) { // hinge margin violated
                    for (int j = 0; j < d; ++j) gw.data[static_cast<size_t>(j)] -= y * feature(row, j);
                    gb -= y;
                }
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (int j = 0; j < d; ++j) {
                const double g = gw.data[static_cast<size_t>(j)] * inv + 2.0 * l2 * probe.w.data[static_cast<size_t>(j)];
                probe.w.data[static_cast<size_t>(j)] -= lr * g;
            }
            probe.bias -= lr * gb * inv;
        }
    }

    int correct = 0;
    for (int i = n_train; i < m; ++i) {
        const int row = order[static_cast<size_t>(i)];
        double score = probe.bias;
        for (int j = 0; j < d; ++j) score += probe.w.data[static_cast<size_t>(j)] * feature(row, j);
        const int pred = score > 0.0;
        correct += pred == labels[static_cast<size_t>(row)];
    }
    probe.accuracy = n_test > 0 ? static_cast<double>(correct) / n_test : 0.0;
    return probe;
}

/// Mean-pooled latent features per image: z averaged over tokens and over
/// the window grid timesteps.
inline Array probe_features(const SaeModel& sae, const std::vector<ActivationMap>& maps,
                            const std::vector<int64_t>& image_ids) {
    const int k = sae.cfg.latent_dim();
    const int m = static_cast<int>(image_ids.size());
    Array feats({m, k});
    std::vector<int64_t> row_of;
    parallel_for(m, [&](int64_t r) {
        const int64_t id = image_ids[static_cast<size_t>(r)];
        double* out = &feats.data[static_cast<size_t>(r) * k];
        int64_t count = 0;
        for (const auto& map : maps) {
            if (map.image_id != id) continue;
            SparseLatent z = sae_encode(sae, map);
            const int n = z.z.shape[0];
            for (int i = 0; i < n; ++i) {
                const double* zi = &z.z.data[static_cast<size_t>(i) * k];
                for (int q = 0; q < k; ++q) out[q] += zi[q];
            }
            count += n;
        }
        if (count == 0) throw contract_error("probe_features: image has no cached maps");
        for (int q = 0; q < k; ++q) out[q] /= static_cast<double>(count);
    });
    return feats;
}

// ----------------------------- random-direction baseline -----------------------------

/// k random latent indices whose columns become random unit vectors scaled to
/// the mean norm of the trained map's selected columns; all other columns are
/// zero. Candidates default to every dimension; passing the SAE's active set
/// keeps the baseline from landing on dimensions that never fire, which would
/// make the matched-norm comparison vacuous.
inline ConceptMap make_random_direction_map(const ConceptMap& trained, int k, uint64_t seed,
                                            const std::vector<int>& candidates = {}) {
    const int c = trained.w.shape[0], kk = trained.w.shape[1];
    if (k < 1 || k > kk) throw contract_error("random direction: k out of [1, K]");
    const std::vector<int> top = select_topk(trained, k);
    double mean_norm = 0.0;
    for (int q : top) {
        double s = 0.0;
        for (int i = 0; i < c; ++i) {
            const double v = trained.w.data[static_cast<size_t>(i) * kk + q];
            s += v * v;
        }
        mean_norm += std::sqrt(s);
    }
    mean_norm /= static_cast<double>(k);

    ConceptMap rnd = trained;
    rnd.w.zero();
    rnd.b.zero();
    Rng rng(seed);
    std::vector<int> pool = candidates;
    if (pool.empty()) {
        pool.resize(static_cast<size_t>(kk));
        std::iota(pool.begin(), pool.end(), 0);
    }
    for (int q : pool)
        if (q < 0 || q >= kk) throw contract_error("random direction: candidate out of range");
    if (static_cast<int>(pool.size()) < k)
        throw contract_error("random direction: fewer candidates than k");
    rng.shuffle(pool);
    for (int j = 0; j < k; ++j) {
        const int q = pool[static_cast<size_t>(j)];
        Array dir({c});
        rng.fill_normal(dir);
        const double n2 = norm2(dir);
        for (int i = 0; i < c; ++i)
            rnd.w.data[static_cast<size_t>(i) * kk + q] = dir.data[i] / n2 * mean_norm;
    }
    return rnd;
}

/// Identical pipeline to steer, along a random direction of matched norm.
inline SteerResult baseline_random_direction(const Denoiser& den, const SaeModel& sae,
                                             const ConceptMap& trained,
                                             const DiffusionSchedule& sched, uint64_t seed,
                                             const Array& image, const SteerConfig& cfg,
                                             const std::vector<int>& candidates = {}) {
    ConceptMap rnd = make_random_direction_map(trained, cfg.k, seed, candidates);
    return steer(den, sae, rnd, sched, image, cfg);
}

// ----------------------------- steering benchmark -----------------------------

/// Shared per-image state for a sweep: inversions and reconstructions are
/// computed once, steered generations per configuration.
struct SteerBench {
    std::vector<Array> images;
    std::vector<int64_t> ids;
    std::vector<Array> x_top;
    std::vector<Array> recon;

    void prepare(const Denoiser& den, const DiffusionSchedule& sched) {
        x_top.resize(images.size());
        recon.resize(images.size());
        parallel_for(static_cast<int64_t>(images.size()), [&](int64_t i) {
            auto inv = ddim_invert(den, sched, images[static_cast<size_t>(i)], sched.timesteps);
            x_top[static_cast<size_t>(i)] = inv.x[0];
            recon[static_cast<size_t>(i)] =
                ddim_generate(den, sched, x_top[static_cast<size_t>(i)]);
        });
    }

    std::vector<SteerResult> run(const Denoiser& den, const SaeModel& sae, const ConceptMap& map,
                                 const DiffusionSchedule& sched, const SteerConfig& cfg) const {
        std::vector<SteerResult> out(images.size());
        parallel_for(static_cast<int64_t>(images.size()), [&](int64_t i) {
            out[static_cast<size_t>(i)] =
                steer_from_top(den, sae, map, sched, x_top[static_cast<size_t>(i)], cfg);
            out[static_cast<size_t>(i)].original = images[static_cast<size_t>(i)];
        });
        return out;
    }
};

// ----------------------------- sweep rows + CSV -----------------------------

struct SweepRow {
    int concept_id;
    double alpha;
    int k;
    double gamma;
    int n;
    double d_target, d_non_target, epr;
};

struct PerImageRow {
    int concept_id;
    double alpha;
    int k;
    double gamma;
    int64_t image_id;
    double d_target, d_non_target, epr;
};

/// Builds the aggregate row plus one row per image from (base, edited) image
/// pairs scored by the classifier.
inline std::pair<SweepRow, std::vector<PerImageRow>> score_pairs(
    const AttributeClassifier& clf, const std::vector<Array>& base,
    const std::vector<Array>& edited, const std::vector<int64_t>& ids, int concept_id,
    double alpha, int k, double gamma) {
    if (base.size() != edited.size() || base.empty())
        throw contract_error("score_pairs: need matching nonempty image sets");
    const std::vector<int> nt = non_target_set(concept_id, clf.cfg.n_attr);
    std::vector<LogitPair> pairs(base.size());
    parallel_for(static_cast<int64_t>(base.size()), [&](int64_t i) {
        pairs[static_cast<size_t>(i)] = {
            {classify(clf, base[static_cast<size_t>(i)]), ids[static_cast<size_t>(i)], "original"},
            {classify(clf, edited[static_cast<size_t>(i)]), ids[static_cast<size_t>(i)], "edited"}};
    });
    EprReport agg = epr(pairs, concept_id, nt, classifier_id(clf));
    SweepRow row{concept_id, alpha, k, gamma, agg.n_pairs, agg.d_target, agg.d_non_target, agg.epr};
    std::vector<PerImageRow> per;
    per.reserve(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        std::vector<LogitPair> one = {pairs[i]};
        EprReport r = epr(one, concept_id, nt);
        per.push_back({concept_id, alpha, k, gamma, ids[i], r.d_target, r.d_non_target, r.epr});
    }
    return {row, per};
}

inline std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string epr_csv(const std::vector<SweepRow>& rows) {
    std::string out = "concept,alpha,k,gamma,n,delta_target,delta_non_target,epr\n";
    for (const auto& r : rows)
        out += std::to_string(r.concept_id) + "," + csv_num(r.alpha) + "," + std::to_string(r.k) +
               "," + csv_num(r.gamma) + "," + std::to_string(r.n) + "," + csv_num(r.d_target) +
               "," + csv_num(r.d_non_target) + "," + csv_num(r.epr) + "\n";
    return out;
}

inline std::string epr_images_csv(const std::vector<PerImageRow>& rows) {
    std::string out = "concept,alpha,k,gamma,image,delta_target,delta_non_target,epr\n";
    for (const auto& r : rows)
        out += std::to_string(r.concept_id) + "," + csv_num(r.alpha) + "," + std::to_string(r.k) +
               "," + csv_num(r.gamma) + "," + std::to_string(r.image_id) + "," +
               csv_num(r.d_target) + "," + csv_num(r.d_non_target) + "," + csv_num(r.epr) + "\n";
    return out;
}

struct ProbeRow {
    int concept_id;
    int k;
    double accuracy;
    int n_train, n_test;
    uint64_t seed;
};

inline std::string probe_csv(const std::vector<ProbeRow>& rows) {
    std::string out = "concept,k,accuracy,n_train,n_test,seed\n";
    for (const auto& r : rows)
        out += std::to_string(r.concept_id) + "," + std::to_string(r.k) + "," +
               csv_num(r.accuracy) + "," + std::to_string(r.n_train) + "," +
               std::to_string(r.n_test) + "," + std::to_string(r.seed) + "\n";
    return out;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw contract_error("median: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace casl
