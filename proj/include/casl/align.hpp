#pragma once

// Stage-2 concept alignment. A per-concept affine map (W, b) turns sparse
// latents into activation-space directions; it is trained through the frozen
// denoiser decoder and the frozen attribute classifier with a margin
// logit-gain loss plus L1 image fidelity. Only (W, b) receive gradients.

#include <algorithm>
#include <numeric>
#include <vector>

#include "casl/classifier.hpp"
#include "casl/core.hpp"
#include "casl/diffusion.hpp"
#include "casl/parallel.hpp"
#include "casl/sae.hpp"

namespace casl {

struct ConceptMap {
    Array w; // [C, K]
    Array b; // [C]
    int concept_id = 0;
    double lambda_sem = 3.0;
    double lambda_recon = 1.0;
    double margin = 2.0;
    uint64_t sae_ref = 0;        // sae_id of the frozen encoder
    uint64_t denoiser_ref = 0;   // denoiser_id of the frozen backbone
    uint64_t classifier_ref = 0; // classifier_id of the frozen scorer
};

struct ConceptGrads {
    Array w, b;
};

/// Per-token affine map, Delta-h = W z + b.
inline Array direction(const ConceptMap& map, const Array& z) {
    if (z.shape.size() != 2 || z.shape[1] != map.w.shape[1])
        throw dim_error("direction: latent width must equal K");
    return affine_forward(z, map.w, &map.b);
}

/// Indices of the k most important latent dimensions. Importance is the L2
/// norm of the dimension's column of W (the absolute weight when C = 1);
/// ties break toward the smaller index.
inline std::vector<int> select_topk(const ConceptMap& map, int k) {
    const int c = map.w.shape[0], kk = map.w.shape[1];
    if (k < 1 || k > kk) throw contract_error("select_topk: k out of [1, K]");
    std::vector<double> score(static_cast<size_t>(kk), 0.0);
    for (int i = 0; i < c; ++i)
        for (int q = 0; q < kk; ++q) {
            const double v = map.w.data[static_cast<size_t>(i) * kk + q];
            score[static_cast<size_t>(q)] += v * v;
        }
    std::vector<int> idx(static_cast<size_t>(kk));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (score[static_cast<size_t>(a)] != score[static_cast<size_t>(b)])
            return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

// ----------------------------- training -----------------------------

/// One image's inversion states inside the editing window.
struct AlignSample {
    Array x0;               // original image
    int64_t image_id = -1;
    std::vector<Array> x_t; // one per window grid point, descending t
};

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Stage-2 loss and (W, b) gradients for one sample at one window timestep.
/// Frozen modules contribute no parameter gradients. grads accumulates.
inline double align_loss_grads(const ConceptMap& map, const SaeModel& sae, const Denoiser& den,
                               const AttributeClassifier& clf, const DiffusionSchedule& sched,
                               const AlignSample& sample, int window_index, double weight,
                               ConceptGrads& grads) {
    const int t = sae.cfg.window_grid[static_cast<size_t>(window_index)];
    const Array& x_t = sample.x_t[static_cast<size_t>(window_index)];
    const int n_side = den.cfg.bottleneck_extent();

    EncCache ec;
    denoiser_encode(den, x_t, t, ec);
    Array h_tok = tokens_from_map(ec.h);
    SparseLatent z = sae_encode(sae, {h_tok, t, sample.image_id});
    Array delta_tok = direction(map, z.z);
    Array h_inj = add(ec.h, map_from_tokens(delta_tok, n_side));
    DecCache dc;
    Array eps = denoiser_decode(den, ec, h_inj, dc);

    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    Array x_edit(x_t.shape);
    for (size_t i = 0; i < x_edit.data.size(); ++i)
        x_edit.data[i] = (x_t.data[i] - sb * eps.data[i]) / sa;

    ClfCache cc_edit;
    Array logits_edit = clf_forward(clf, x_edit, cc_edit);
    const int cid = map.concept_id;
    // absolute margin demand: images already carrying the attribute ask for
    // nothing, so the latent gate that minimizes the loss is the concept's
    // absence signal rather than a constant
    const double gain = logits_edit.data[cid] - map.margin;
    const double l_sem = softplus(-gain);
    const double l_rec = mean_abs(sub(x_edit, sample.x0));
    const double loss = map.lambda_sem * l_sem + map.lambda_recon * l_rec;

    // d loss / d x_edit
    Array dlogits({clf.cfg.n_attr});
    dlogits.data[cid] = -map.lambda_sem * sigmoid(-gain) * weight;
    Array dx_edit = clf_backward(clf, cc_edit, dlogits, nullptr);
    const double rec_scale = map.lambda_recon * weight / static_cast<double>(x_edit.numel());
    for (size_t i = 0; i < dx_edit.data.size(); ++i) {
        const double d = x_edit.data[i] - sample.x0.data[i];
        dx_edit.data[i] += rec_scale * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }

    // back through the x0 prediction and the frozen decoder half
    Array d_eps = scaled(dx_edit, -sb / sa);
    Array d_h_inj = denoiser_decode_backward(den, ec, dc, d_eps, nullptr);
    Array d_delta = tokens_from_map(d_h_inj); // [N, C]

    // Delta-h = W z + b per token
    const int n = d_delta.shape[0], c = d_delta.shape[1], k = map.w.shape[1];
    for (int i = 0; i < n; ++i) {
        const double* dd = &d_delta.data[static_cast<size_t>(i) * c];
        const double* zi = &z.z.data[static_cast<size_t>(i) * k];
        for (int j = 0; j < c; ++j) {
            const double g = dd[j];
            grads.b.data[j] += g;
            if (g == 0.0) continue;
            double* gw = &grads.w.data[static_cast<size_t>(j) * k];
            for (int q = 0; q < k; ++q) gw[q] += g * zi[q];
        }
    }
    return loss * weight;
}

struct AlignResult {
    ConceptMap map;
    double heldout_logit_gain = 0.0;  // mean f_c(edited) - f_c(plain) on held-out samples
    double mean_dh_norm_init = 0.0;   // mean ||Delta-h|| at initialization
    double mean_dh_norm_final = 0.0;  // same after training
};

inline double mean_direction_norm(const ConceptMap& map, const SaeModel& sae, const Denoiser& den,
                                  const std::vector<AlignSample>& samples, int window_index) {
    if (samples.empty()) return 0.0;
    std::vector<double> norms(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        const AlignSample& s = samples[static_cast<size_t>(i)];
        const int t = sae.cfg.window_grid[static_cast<size_t>(window_index)];
        EncCache ec;
        denoiser_encode(den, s.x_t[static_cast<size_t>(window_index)], t, ec);
        SparseLatent z = sae_encode(sae, {tokens_from_map(ec.h), t, s.image_id});
        norms[static_cast<size_t>(i)] = norm2(direction(map, z.z));
    });
    double m = 0.0;
    for (double v : norms) m += v;
    return m / static_cast<double>(samples.size());
}

/// Per-dimension latent statistics over the training samples at the middle
/// window timestep; the floor keeps rarely active dimensions from getting an
/// outsized preconditioning boost.
struct LatentStats {
    std::vector<double> mean, sd;
};

inline LatentStats latent_stats(const SaeModel& sae, const Denoiser& den,
                                const std::vector<AlignSample>& samples,
                                const std::vector<int64_t>& indices, double floor_frac) {
    const int k = sae.cfg.latent_dim();
    const int wi = static_cast<int>(sae.cfg.window_grid.size() / 2);
    const int t = sae.cfg.window_grid[static_cast<size_t>(wi)];
    LatentStats st;
    st.mean.assign(static_cast<size_t>(k), 0.0);
    st.sd.assign(static_cast<size_t>(k), 0.0);
    int64_t tokens = 0;
    for (int64_t i : indices) {
        const AlignSample& s = samples[static_cast<size_t>(i)];
        EncCache ec;
        denoiser_encode(den, s.x_t[static_cast<size_t>(wi)], t, ec);
        SparseLatent z = sae_encode(sae, {tokens_from_map(ec.h), t, s.image_id});
        const int n = z.z.shape[0];
        tokens += n;
        for (int tok = 0; tok < n; ++tok)
            for (int q = 0; q < k; ++q) {
                const double v = z.z.data[static_cast<size_t>(tok) * k + q];
                st.mean[static_cast<size_t>(q)] += v;
                st.sd[static_cast<size_t>(q)] += v * v;
            }
    }
    double smax = 0.0;
    for (int q = 0; q < k; ++q) {
        st.mean[static_cast<size_t>(q)] /= static_cast<double>(tokens);
        st.sd[static_cast<size_t>(q)] = std::sqrt(st.sd[static_cast<size_t>(q)] / tokens);
        smax = std::max(smax, st.sd[static_cast<size_t>(q)]);
    }
    for (int q = 0; q < k; ++q)
        st.sd[static_cast<size_t>(q)] = std::max(st.sd[static_cast<size_t>(q)], floor_frac * smax);
    return st;
}

/// Trains one ConceptMap. The optimizer is SGD with decoupled weight decay in
/// a standardized latent parameterization: the working variables see latents
/// centered and scaled per dimension, and the stored map is materialized back
/// into raw latent units after every step, so Delta-h = W z + b holds exactly
/// for the raw SAE code. Centering routes the image-independent part of the
/// edit into b; columns of W can only carry image-dependent modulation, which
/// is what top-k selection is meant to rank. Samples with index % 5 == 4 are
/// held out for the logit-gain metric; training timesteps are drawn from the
/// lower-noise half of the window where the x0 preview is sharpest.
inline AlignResult train_concept(const SaeModel& sae, const Denoiser& den,
                                 const AttributeClassifier& clf, const DiffusionSchedule& sched,
                                 int concept_id, const std::vector<AlignSample>& samples,
                                 double lambda_sem, double lambda_recon, double margin,
                                 int epochs, double lr, uint64_t seed, int batch = 16,
                                 double weight_decay = 0.03, double sigma_floor = 0.05) {
    if (samples.empty()) throw contract_error("train_concept: no samples");
    if (concept_id < 0 || concept_id >= clf.cfg.n_attr)
        throw config_error("train_concept: concept id outside the classifier's attributes");
    if (den.cfg.channels != sae.cfg.channels)
        throw config_error("train_concept: denoiser and SAE channel widths disagree");
    const size_t n_window = sae.cfg.window_grid.size();
    for (const auto& s : samples)
        if (s.x_t.size() != n_window)
            throw config_error("train_concept: sample is missing window states");

    const uint64_t frozen_sae = sae_id(sae);
    const uint64_t frozen_den = denoiser_id(den);
    const uint64_t frozen_clf = classifier_id(clf);

    ConceptMap map;
    map.concept_id = concept_id;
    map.lambda_sem = lambda_sem;
    map.lambda_recon = lambda_recon;
    map.margin = margin;
    map.sae_ref = frozen_sae;
    map.denoiser_ref = frozen_den;
    map.classifier_ref = frozen_clf;
    const int c = sae.cfg.channels, k = sae.cfg.latent_dim();
    Rng rng(seed);
    map.w = Array({c, k}); // zero: untouched dimensions stay at zero importance
    map.b = Array({c});
    rng.fill_uniform(map.b, -0.01, 0.01);

    std::vector<int64_t> train_idx, held_idx;
    for (int64_t i = 0; i < static_cast<int64_t>(samples.size()); ++i)
        (is_held_out(i) ? held_idx : train_idx).push_back(i);
    if (train_idx.empty()) train_idx = held_idx;

    std::vector<AlignSample> train_view;
    for (int64_t i : train_idx) train_view.push_back(samples[static_cast<size_t>(i)]);
    AlignResult result;
    result.mean_dh_norm_init =
        mean_direction_norm(map, sae, den, train_view, static_cast<int>(n_window / 2));

    const LatentStats stats = latent_stats(sae, den, samples, train_idx, sigma_floor);
    Array w_std({c, k}); // standardized-space master copy of W
    Array b_std = map.b;

    ConceptGrads grads{Array(map.w.shape), Array(map.b.shape)};
    std::vector<ConceptGrads> shard_grads;
    for (int s = 0; s < kGradShards; ++s)
        shard_grads.push_back({Array(map.w.shape), Array(map.b.shape)});

    std::vector<int64_t> order = train_idx;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        Rng trng = rng.fork(0x7477ull + static_cast<uint64_t>(epoch));
        std::vector<int> t_pick(order.size());
        for (size_t i = 0; i < order.size(); ++i)
            t_pick[i] = static_cast<int>(n_window / 2 +
                                         trng.below(n_window - n_window / 2));
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t stop = std::min(order.size(), start + batch);
            const int64_t bsz = static_cast<int64_t>(stop - start);
            std::vector<double> shard_loss(kGradShards, 0.0);
            parallel_for(kGradShards, [&](int64_t s) {
                ConceptGrads& g = shard_grads[static_cast<size_t>(s)];
                const int64_t lo = s * bsz / kGradShards, hi = (s + 1) * bsz / kGradShards;
                for (int64_t j = lo; j < hi; ++j) {
                    const auto& sample = samples[static_cast<size_t>(order[start + j])];
                    shard_loss[static_cast<size_t>(s)] +=
                        align_loss_grads(map, sae, den, clf, sched, sample,
                                         t_pick[start + j], 1.0 / static_cast<double>(bsz), g);
                }
            });
            grads.w.zero();
            grads.b.zero();
            double loss = 0.0;
            for (int s = 0; s < kGradShards; ++s) { // fixed reduction order
                loss += shard_loss[static_cast<size_t>(s)];
                add_inplace(grads.w, shard_grads[static_cast<size_t>(s)].w);
                add_inplace(grads.b, shard_grads[static_cast<size_t>(s)].b);
                shard_grads[static_cast<size_t>(s)].w.zero();
                shard_grads[static_cast<size_t>(s)].b.zero();
            }
            if (!std::isfinite(loss)) throw train_error("train_concept: loss diverged");

            // step in standardized space, then materialize the raw-unit map
            for (int i = 0; i < c; ++i) {
                const double gb = grads.b.data[i];
                for (int q = 0; q < k; ++q) {
                    const double gws = (grads.w.at(i, q) - stats.mean[static_cast<size_t>(q)] * gb) /
                                       stats.sd[static_cast<size_t>(q)];
                    w_std.at(i, q) -= lr * (gws + weight_decay * w_std.at(i, q));
                }
                b_std.data[i] -= lr * gb;
            }
            for (int i = 0; i < c; ++i) {
                double dot_mu = 0.0;
                for (int q = 0; q < k; ++q) {
                    map.w.at(i, q) = w_std.at(i, q) / stats.sd[static_cast<size_t>(q)];
                    dot_mu += map.w.at(i, q) * stats.mean[static_cast<size_t>(q)];
                }
                map.b.data[i] = b_std.data[i] - dot_mu;
            }
        }
    }

    if (sae_id(sae) != frozen_sae || denoiser_id(den) != frozen_den ||
        classifier_id(clf) != frozen_clf)
        throw contract_error("train_concept: a frozen component changed");

    result.mean_dh_norm_final =
        mean_direction_norm(map, sae, den, train_view, static_cast<int>(n_window / 2));

    // held-out causal check: does the full direction move the target logit?
    const std::vector<int64_t>& eval_idx = held_idx.empty() ? train_idx : held_idx;
    std::vector<double> gains(eval_idx.size());
    parallel_for(static_cast<int64_t>(eval_idx.size()), [&](int64_t j) {
        const AlignSample& s = samples[static_cast<size_t>(eval_idx[static_cast<size_t>(j)])];
        const int wi = static_cast<int>(n_window / 2);
        const int t = sae.cfg.window_grid[static_cast<size_t>(wi)];
        const Array& x_t = s.x_t[static_cast<size_t>(wi)];
        EncCache ec;
        denoiser_encode(den, x_t, t, ec);
        SparseLatent z = sae_encode(sae, {tokens_from_map(ec.h), t, s.image_id});
        Array delta = direction(map, z.z);
        Array plain = predict_x0(den, sched, x_t, t);
        Array edited = predict_x0(den, sched, x_t, t, &delta);
        gains[static_cast<size_t>(j)] = classify(clf, edited).data[concept_id] -
                                        classify(clf, plain).data[concept_id];
    });
    double gain = 0.0;
    for (double g : gains) gain += g;
    result.heldout_logit_gain = gain / static_cast<double>(eval_idx.size());

    result.map = std::move(map);
    return result;
}

} // namespace casl
