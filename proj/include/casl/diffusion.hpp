#pragma once

// Toy denoising diffusion backbone. The encoder downsamples to an n x n x C
// bottleneck (the h-space); the decoder upsamples back with skip connections
// from the shallower encoder layers only, so the bottleneck is the deepest
// activation no skip bypasses. Timestep conditioning is sinusoidal features
// through a learned projection, added at the bottleneck input. Sampling is
// deterministic DDIM with the asymmetric two-branch update.

#include <vector>

#include "casl/core.hpp"
#include "casl/nn.hpp"
#include "casl/parallel.hpp"
#include "casl/rng.hpp"
#include "casl/synth.hpp"

namespace casl {

// ----------------------------- schedule -----------------------------

struct DiffusionSchedule {
    int timesteps = 100;
    std::vector<double> beta, alpha, alpha_bar;
    std::vector<int> grid; // strictly decreasing DDIM grid, ends at 0

    static DiffusionSchedule make(int timesteps = 100, int grid_size = 50,
                                  double beta_start = 1e-4, double beta_end = 0.02) {
        if (timesteps < 2 || grid_size < 2 || grid_size > timesteps)
            throw contract_error("DiffusionSchedule: need 2 <= grid_size <= timesteps");
        DiffusionSchedule s;
        s.timesteps = timesteps;
        s.beta.resize(timesteps);
        s.alpha.resize(timesteps);
        s.alpha_bar.resize(timesteps);
        double prod = 1.0;
        for (int t = 0; t < timesteps; ++t) {
            s.beta[t] = beta_start + (beta_end - beta_start) * t / (timesteps - 1);
            if (!(s.beta[t] > 0.0 && s.beta[t] < 1.0))
                throw contract_error("DiffusionSchedule: beta out of (0,1)");
            s.alpha[t] = 1.0 - s.beta[t];
            prod *= s.alpha[t];
            s.alpha_bar[t] = prod;
        }
        s.grid.resize(grid_size);
        for (int i = 0; i < grid_size; ++i) {
            const double pos = static_cast<double>(timesteps - 1) *
                               (1.0 - static_cast<double>(i) / (grid_size - 1));
            s.grid[i] = static_cast<int>(std::lround(pos));
        }
        for (size_t i = 1; i < s.grid.size(); ++i)
            if (s.grid[i] >= s.grid[i - 1])
                throw contract_error("DiffusionSchedule: grid not strictly decreasing");
        if (s.grid.back() != 0) throw contract_error("DiffusionSchedule: grid must end at 0");
        return s;
    }

    /// Grid timesteps inside the editing window [t_edit, T-1], descending.
    std::vector<int> window(int t_edit) const {
        std::vector<int> out;
        for (int t : grid)
            if (t >= t_edit) out.push_back(t);
        return out;
    }
};

// ----------------------------- ddim update -----------------------------

/// Asymmetric DDIM update on alpha-bar values. The two noise predictions may
/// differ: the predicted-x0 branch sees the injected activation, the
/// direction branch stays plain. Passing the same array twice is the standard
/// DDIM update through the identical expression.
inline Array ddim_step_abar(const Array& x_t, double abar_t, double abar_prev,
                            const Array& eps_injected, const Array& eps_plain) {
    if (!x_t.same_shape(eps_injected) || !x_t.same_shape(eps_plain))
        throw dim_error("ddim_step: noise predictions must match x_t");
    const double sa_t = std::sqrt(abar_t);
    const double sb_t = std::sqrt(1.0 - abar_t);
    const double sa_p = std::sqrt(abar_prev);
    const double sb_p = std::sqrt(1.0 - abar_prev);
    Array out(x_t.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        const double p = (x_t.data[i] - sb_t * eps_injected.data[i]) / sa_t;
        out.data[i] = sa_p * p + sb_p * eps_plain.data[i];
    }
    return out;
}

inline Array ddim_step(const DiffusionSchedule& sched, const Array& x_t, int t, int t_prev,
                       const Array& eps_injected, const Array& eps_plain) {
    if (t_prev >= t) throw contract_error("ddim_step: t_prev must be < t");
    if (t_prev < 0 || t >= sched.timesteps) throw contract_error("ddim_step: t out of range");
    return ddim_step_abar(x_t, sched.alpha_bar[t], sched.alpha_bar[t_prev], eps_injected, eps_plain);
}

// ----------------------------- denoiser -----------------------------

struct DenoiserConfig {
    int image_size = 32;
    int c1 = 8;
    int c2 = 16;
    int channels = 32;  // bottleneck channel count C
    int temb_dim = 32;

    int bottleneck_extent() const { // n, spatial side of the bottleneck
        return conv_out_extent(conv_out_extent(conv_out_extent(image_size, 2), 2), 2);
    }
    int tokens() const {
        const int n = bottleneck_extent();
        return n * n;
    }
};

struct DenoiserParams {
    Conv3x3 enc1, enc2, enc3;
    Dense temb;
    Conv3x3 mid, dec1, dec2, out;

    static DenoiserParams init(const DenoiserConfig& cfg, Rng& rng, bool zero_output_layer = true) {
        DenoiserParams p;
        p.enc1 = Conv3x3::init(1, cfg.c1, 2, rng);
        p.enc2 = Conv3x3::init(cfg.c1, cfg.c2, 2, rng);
        p.enc3 = Conv3x3::init(cfg.c2, cfg.channels, 2, rng);
        p.temb = Dense::init(cfg.temb_dim, cfg.channels, rng);
        p.mid = Conv3x3::init(cfg.channels, cfg.channels, 1, rng);
        p.dec1 = Conv3x3::init(cfg.channels + cfg.c2, cfg.c2, 1, rng);
        p.dec2 = Conv3x3::init(cfg.c2 + cfg.c1, cfg.c1, 1, rng);
        p.out = Conv3x3::init(cfg.c1, 1, 1, rng);
        if (zero_output_layer) { // untrained net predicts zero noise
            p.out.w.zero();
            p.out.b.zero();
        }
        return p;
    }

    static DenoiserParams zeros_like(const DenoiserParams& o) {
        DenoiserParams g;
        g.enc1 = Conv3x3::zeros_like(o.enc1);
        g.enc2 = Conv3x3::zeros_like(o.enc2);
        g.enc3 = Conv3x3::zeros_like(o.enc3);
        g.temb = Dense::zeros_like(o.temb);
        g.mid = Conv3x3::zeros_like(o.mid);
        g.dec1 = Conv3x3::zeros_like(o.dec1);
        g.dec2 = Conv3x3::zeros_like(o.dec2);
        g.out = Conv3x3::zeros_like(o.out);
        return g;
    }

    template <class F>
    static void for_each(DenoiserParams& p, F&& fn) {
        fn("enc1.w", p.enc1.w); fn("enc1.b", p.enc1.b);
        fn("enc2.w", p.enc2.w); fn("enc2.b", p.enc2.b);
        fn("enc3.w", p.enc3.w); fn("enc3.b", p.enc3.b);
        fn("temb.w", p.temb.w); fn("temb.b", p.temb.b);
        fn("mid.w", p.mid.w); fn("mid.b", p.mid.b);
        fn("dec1.w", p.dec1.w); fn("dec1.b", p.dec1.b);
        fn("dec2.w", p.dec2.w); fn("dec2.b", p.dec2.b);
        fn("out.w", p.out.w); fn("out.b", p.out.b);
    }

    static std::vector<Array*> collect(DenoiserParams& p) {
        std::vector<Array*> v;
        for_each(p, [&](const char*, Array& a) { v.push_back(&a); });
        return v;
    }
};

struct Denoiser {
    DenoiserConfig cfg;
    DenoiserParams p;
    uint64_t seed = 0;

    ParamStore store(DenoiserParams& grads) {
        ParamStore ps;
        store_add_conv(ps, "enc1", p.enc1, grads.enc1);
        store_add_conv(ps, "enc2", p.enc2, grads.enc2);
        store_add_conv(ps, "enc3", p.enc3, grads.enc3);
        store_add_dense(ps, "temb", p.temb, grads.temb);
        store_add_conv(ps, "mid", p.mid, grads.mid);
        store_add_conv(ps, "dec1", p.dec1, grads.dec1);
        store_add_conv(ps, "dec2", p.dec2, grads.dec2);
        store_add_conv(ps, "out", p.out, grads.out);
        return ps;
    }
};

inline uint64_t denoiser_id(const Denoiser& den) {
    uint64_t h = 14695981039346656037ull;
    DenoiserParams::for_each(const_cast<DenoiserParams&>(den.p),
                             [&](const char*, Array& a) { h = hash_array(a, h); });
    return h;
}

// ----------------------------- token layout -----------------------------

/// Bottleneck activation as N spatial tokens of width C.
struct ActivationMap {
    Array tokens; // [N, C]
    int timestep = 0;
    int64_t image_id = -1;
};

inline Array tokens_from_map(const Array& h) { // [C,n,n] -> [N,C]
    const int c = h.shape[0], n = h.shape[1];
    Array tok({n * n, c});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < n * n; ++i)
            tok.data[static_cast<size_t>(i) * c + ch] = h.data[static_cast<size_t>(ch) * n * n + i];
    return tok;
}

inline Array map_from_tokens(const Array& tok, int n) { // [N,C] -> [C,n,n]
    const int c = tok.shape[1];
    Array h({c, n, n});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < n * n; ++i)
            h.data[static_cast<size_t>(ch) * n * n + i] = tok.data[static_cast<size_t>(i) * c + ch];
    return h;
}

// ----------------------------- forward passes -----------------------------

struct EncCache {
    Array x;                 // [1,S,S]
    Array pre1, a1;          // skip source 1
    Array pre2, a2;          // skip source 2
    Array h_pre;             // enc3 output, before timestep conditioning
    Array tfeat, temb_row;   // sinusoidal features, projected embedding
    Array h;                 // bottleneck activation [C,n,n]
    int t = 0;
};

struct DecCache {
    Array h_inj;             // what the decoder consumed
    Array m_act, pre_m, m;
    Array u1, cat1, pre_d1, d1;
    Array u2, cat2, pre_d2, d2;
    Array u3, eps;
};

inline void denoiser_encode(const Denoiser& den, const Array& x_img, int t, EncCache& c) {
    require_shape(x_img, {den.cfg.image_size, den.cfg.image_size}, "denoiser input");
    c.t = t;
    c.x = Array({1, den.cfg.image_size, den.cfg.image_size}, x_img.data);
    c.pre1 = conv_forward(den.p.enc1, c.x);
    c.a1 = relu(c.pre1);
    c.pre2 = conv_forward(den.p.enc2, c.a1);
    c.a2 = relu(c.pre2);
    c.h_pre = conv_forward(den.p.enc3, c.a2);
    c.tfeat = time_features(t, den.cfg.temb_dim);
    Array trow({1, den.cfg.temb_dim}, c.tfeat.data);
    c.temb_row = affine_forward(trow, den.p.temb.w, &den.p.temb.b); // [1,C]
    c.h = c.h_pre;
    const int n = den.cfg.bottleneck_extent();
    for (int ch = 0; ch < den.cfg.channels; ++ch) {
        const double e = c.temb_row.data[ch];
        double* plane = &c.h.data[static_cast<size_t>(ch) * n * n];
        for (int i = 0; i < n * n; ++i) plane[i] += e;
    }
}

/// Decoder half from an (optionally shifted) bottleneck activation.
inline Array denoiser_decode(const Denoiser& den, const EncCache& ec, const Array& h_inj,
                             DecCache& dc) {
    require_shape(h_inj, ec.h.shape, "bottleneck injection");
    dc.h_inj = h_inj;
    dc.m_act = relu(h_inj);
    dc.pre_m = conv_forward(den.p.mid, dc.m_act);
    dc.m = relu(dc.pre_m);
    dc.u1 = upsample2_forward(dc.m);
    dc.cat1 = concat_channels(dc.u1, ec.a2);
    dc.pre_d1 = conv_forward(den.p.dec1, dc.cat1);
    dc.d1 = relu(dc.pre_d1);
    dc.u2 = upsample2_forward(dc.d1);
    dc.cat2 = concat_channels(dc.u2, ec.a1);
    dc.pre_d2 = conv_forward(den.p.dec2, dc.cat2);
    dc.d2 = relu(dc.pre_d2);
    dc.u3 = upsample2_forward(dc.d2);
    dc.eps = conv_forward(den.p.out, dc.u3);
    return Array({den.cfg.image_size, den.cfg.image_size}, dc.eps.data);
}

/// Noise prediction with an optional token-space shift added at the
/// bottleneck. delta_h, when present, is [N, C].
inline Array denoiser_eps(const Denoiser& den, const Array& x_img, int t,
                          const Array* delta_h = nullptr) {
    EncCache ec;
    denoiser_encode(den, x_img, t, ec);
    DecCache dc;
    if (!delta_h) return denoiser_decode(den, ec, ec.h, dc);
    const int n = den.cfg.bottleneck_extent();
    require_shape(*delta_h, {den.cfg.tokens(), den.cfg.channels}, "delta_h");
    Array h_inj = add(ec.h, map_from_tokens(*delta_h, n));
    return denoiser_decode(den, ec, h_inj, dc);
}

// ----------------------------- backward passes -----------------------------

/// Decoder-half backward. Returns dL/dh_inj; skip gradients and parameter
/// gradients are accumulated only when the pointers are given.
inline Array denoiser_decode_backward(const Denoiser& den, const EncCache& ec, const DecCache& dc,
                                      const Array& d_eps_img, DenoiserParams* g,
                                      Array* d_a1 = nullptr, Array* d_a2 = nullptr) {
    Array d_eps({1, den.cfg.image_size, den.cfg.image_size}, d_eps_img.data);
    Array d_u3 = conv_backward(den.p.out, dc.u3, d_eps, g ? &g->out : nullptr);
    Array d_d2 = upsample2_backward(d_u3);
    Array d_pre_d2 = relu_backward(dc.pre_d2, d_d2);
    Array d_cat2 = conv_backward(den.p.dec2, dc.cat2, d_pre_d2, g ? &g->dec2 : nullptr);
    Array d_u2(dc.u2.shape);
    Array d_a1_local(ec.a1.shape);
    split_channels(d_cat2, d_u2, d_a1_local);
    if (d_a1) add_inplace(*d_a1, d_a1_local);
    Array d_d1 = upsample2_backward(d_u2);
    Array d_pre_d1 = relu_backward(dc.pre_d1, d_d1);
    Array d_cat1 = conv_backward(den.p.dec1, dc.cat1, d_pre_d1, g ? &g->dec1 : nullptr);
    Array d_u1(dc.u1.shape);
    Array d_a2_local(ec.a2.shape);
    split_channels(d_cat1, d_u1, d_a2_local);
    if (d_a2) add_inplace(*d_a2, d_a2_local);
    Array d_m = upsample2_backward(d_u1);
    Array d_pre_m = relu_backward(dc.pre_m, d_m);
    Array d_m_act = conv_backward(den.p.mid, dc.m_act, d_pre_m, g ? &g->mid : nullptr);
    return relu_backward(dc.h_inj, d_m_act);
}

/// Encoder-half backward given dL/dh plus the skip gradients produced by the
/// decoder. Accumulates parameter gradients; returns dL/dx if requested.
inline void denoiser_encode_backward(const Denoiser& den, const EncCache& ec, const Array& d_h,
                                     const Array& d_a1_skip, const Array& d_a2_skip,
                                     DenoiserParams& g) {
    // timestep embedding sees the spatial sum per channel
    const int n = den.cfg.bottleneck_extent();
    Array d_temb({1, den.cfg.channels});
    for (int ch = 0; ch < den.cfg.channels; ++ch) {
        const double* plane = &d_h.data[static_cast<size_t>(ch) * n * n];
        double s = 0.0;
        for (int i = 0; i < n * n; ++i) s += plane[i];
        d_temb.data[ch] = s;
    }
    Array trow({1, den.cfg.temb_dim}, ec.tfeat.data);
    affine_backward(trow, den.p.temb.w, d_temb, &g.temb.w, &g.temb.b);

    Array d_a2 = conv_backward(den.p.enc3, ec.a2, d_h, &g.enc3);
    add_inplace(d_a2, d_a2_skip);
    Array d_pre2 = relu_backward(ec.pre2, d_a2);
    Array d_a1 = conv_backward(den.p.enc2, ec.a1, d_pre2, &g.enc2);
    add_inplace(d_a1, d_a1_skip);
    Array d_pre1 = relu_backward(ec.pre1, d_a1);
    conv_backward(den.p.enc1, ec.x, d_pre1, &g.enc1);
}

/// Full backward of one noise prediction (no bottleneck shift).
inline void denoiser_backward(const Denoiser& den, const EncCache& ec, const DecCache& dc,
                              const Array& d_eps_img, DenoiserParams& g) {
    Array d_a1(ec.a1.shape), d_a2(ec.a2.shape);
    Array d_h = denoiser_decode_backward(den, ec, dc, d_eps_img, &g, &d_a1, &d_a2);
    denoiser_encode_backward(den, ec, d_h, d_a1, d_a2, g);
}

// ----------------------------- forward diffusion & training -----------------------------

inline Array diffuse_to(const DiffusionSchedule& sched, const Array& x0, int t, const Array& noise) {
    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    Array x(x0.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        x.data[i] = sa * x0.data[i] + sb * noise.data[i];
    return x;
}

/// Held-out noise-prediction MSE relative to the zero predictor, whose MSE is
/// exactly E||eps||^2 = 1 per pixel.
inline double noise_prediction_mse(const Denoiser& den, const DiffusionSchedule& sched,
                                   const std::vector<LabeledImage>& corpus,
                                   const std::vector<int64_t>& indices, uint64_t seed) {
    if (indices.empty()) return 0.0;
    std::vector<double> errs(indices.size(), 0.0);
    Rng root(seed);
    parallel_for(static_cast<int64_t>(indices.size()), [&](int64_t k) {
        Rng rng = root.fork(static_cast<uint64_t>(indices[k]));
        const auto& im = corpus[static_cast<size_t>(indices[k])];
        const int t = static_cast<int>(rng.below(static_cast<uint64_t>(sched.timesteps)));
        Array noise(im.pixels.shape);
        rng.fill_normal(noise);
        Array x_t = diffuse_to(sched, im.pixels, t, noise);
        Array eps = denoiser_eps(den, x_t, t);
        errs[static_cast<size_t>(k)] = mean_sq(sub(eps, noise));
    });
    double total = 0.0;
    for (double e : errs) total += e;
    return total / static_cast<double>(indices.size());
}

/// Standard DDPM noise-prediction training. Verifies the held-out MSE beats
/// max_mse_ratio times the zero predictor unless the check is disabled.
inline Denoiser train_backbone(const std::vector<LabeledImage>& corpus,
                               const DiffusionSchedule& sched, int epochs, double lr,
                               uint64_t seed, double max_mse_ratio = 0.5, int batch = 32,
                               DenoiserConfig cfg = {}) {
    if (corpus.empty()) throw contract_error("train_backbone: empty corpus");
    cfg.image_size = corpus.front().pixels.shape[0];
    Denoiser den;
    den.cfg = cfg;
    den.seed = seed;
    Rng rng(seed);
    den.p = DenoiserParams::init(cfg, rng);

    std::vector<int64_t> train_idx, held_idx;
    for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i)
        (is_held_out(i) ? held_idx : train_idx).push_back(i);

    DenoiserParams grads = DenoiserParams::zeros_like(den.p);
    ParamStore ps = den.store(grads);
    AdamState adam = AdamState::init(ps, lr);
    std::vector<DenoiserParams> shard_grads;
    for (int s = 0; s < kGradShards; ++s) shard_grads.push_back(DenoiserParams::zeros_like(den.p));

    std::vector<int64_t> order = train_idx;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        Rng noise_root = rng.fork(0x6e6f6973ull + static_cast<uint64_t>(epoch));
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t stop = std::min(order.size(), start + batch);
            const int64_t bsz = static_cast<int64_t>(stop - start);
            std::vector<double> shard_loss(kGradShards, 0.0);
            parallel_for(kGradShards, [&](int64_t s) {
                DenoiserParams& g = shard_grads[static_cast<size_t>(s)];
                const int64_t lo = s * bsz / kGradShards, hi = (s + 1) * bsz / kGradShards;
                for (int64_t k = lo; k < hi; ++k) {
                    Rng nrng = noise_root.fork(start + static_cast<uint64_t>(k));
                    const auto& im = corpus[static_cast<size_t>(order[start + k])];
                    const int t = static_cast<int>(nrng.below(static_cast<uint64_t>(sched.timesteps)));
                    Array noise(im.pixels.shape);
                    nrng.fill_normal(noise);
                    Array x_t = diffuse_to(sched, im.pixels, t, noise);
                    EncCache ec;
                    denoiser_encode(den, x_t, t, ec);
                    DecCache dc;
                    Array eps = denoiser_decode(den, ec, ec.h, dc);
                    Array diff = sub(eps, noise);
                    shard_loss[static_cast<size_t>(s)] += mean_sq(diff) / static_cast<double>(bsz);
                    Array d_eps = scaled(diff, 2.0 / (static_cast<double>(diff.numel()) * bsz));
                    denoiser_backward(den, ec, dc, d_eps, g);
                }
            });
            ps.zero_grads();
            auto main_arrays = DenoiserParams::collect(grads);
            double loss = 0.0;
            for (int s = 0; s < kGradShards; ++s) { // fixed reduction order
                loss += shard_loss[static_cast<size_t>(s)];
                auto shard_arrays = DenoiserParams::collect(shard_grads[static_cast<size_t>(s)]);
                for (size_t a = 0; a < main_arrays.size(); ++a) {
                    add_inplace(*main_arrays[a], *shard_arrays[a]);
                    shard_arrays[a]->zero();
                }
            }
            if (!std::isfinite(loss)) throw train_error("train_backbone: loss diverged");
            adam_step(ps, adam);
        }
    }

    if (max_mse_ratio > 0.0 && !held_idx.empty() && epochs > 0) {
        const double mse = noise_prediction_mse(den, sched, corpus, held_idx, seed ^ 0xeffull);
        if (mse >= max_mse_ratio)
            throw train_error("train_backbone: held-out noise MSE " + std::to_string(mse) +
                              " misses ratio " + std::to_string(max_mse_ratio) +
                              " of the zero predictor");
    }
    return den;
}

// ----------------------------- ddim inversion & generation -----------------------------

struct InversionResult {
    std::vector<Array> x;           // x[i] lives at schedule.grid[i]
    std::vector<ActivationMap> acts; // bottleneck tokens at window grid points
};

/// Deterministic reverse-of-DDIM recursion from x_0 up to the top of the
/// grid. Noise predictions are evaluated at the current state and its grid
/// timestep; bottleneck activations are recorded for every grid point in
/// [t_edit, T-1], including the endpoint.
inline InversionResult ddim_invert(const Denoiser& den, const DiffusionSchedule& sched,
                                   const Array& x0, int t_edit, int64_t image_id = -1) {
    const int g = static_cast<int>(sched.grid.size());
    InversionResult res;
    res.x.resize(g);
    res.x[g - 1] = x0;
    for (int i = g - 1; i >= 1; --i) {
        const int t_lo = sched.grid[i], t_hi = sched.grid[i - 1];
        EncCache ec;
        denoiser_encode(den, res.x[i], t_lo, ec);
        DecCache dc;
        Array eps = denoiser_decode(den, ec, ec.h, dc);
        if (t_lo >= t_edit)
            res.acts.push_back({tokens_from_map(ec.h), t_lo, image_id});
        // exact algebraic inverse of the DDIM step, with eps held at the
        // current state (no fixed-point refinement)
        res.x[i - 1] = ddim_step_abar(res.x[i], sched.alpha_bar[t_lo], sched.alpha_bar[t_hi],
                                      eps, eps);
    }
    { // record the endpoint activation as well
        const int t_top = sched.grid[0];
        if (t_top >= t_edit) {
            EncCache ec;
            denoiser_encode(den, res.x[0], t_top, ec);
            res.acts.push_back({tokens_from_map(ec.h), t_top, image_id});
        }
    }
    return res;
}

/// Plain DDIM generation down the grid from x at grid[0].
inline Array ddim_generate(const Denoiser& den, const DiffusionSchedule& sched, const Array& x_top) {
    Array x = x_top;
    for (size_t i = 0; i + 1 < sched.grid.size(); ++i) {
        const int t = sched.grid[i], t_prev = sched.grid[i + 1];
        Array eps = denoiser_eps(den, x, t);
        x = ddim_step_abar(x, sched.alpha_bar[t], sched.alpha_bar[t_prev], eps, eps);
    }
    return x;
}

/// Eq.-style x0 prediction from x_t, with an optional bottleneck shift.
inline Array predict_x0(const Denoiser& den, const DiffusionSchedule& sched, const Array& x_t,
                        int t, const Array* delta_h = nullptr) {
    Array eps = denoiser_eps(den, x_t, t, delta_h);
    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    Array x0(x_t.shape);
    for (size_t i = 0; i < x0.data.size(); ++i)
        x0.data[i] = (x_t.data[i] - sb * eps.data[i]) / sa;
    return x0;
}

} // namespace casl
