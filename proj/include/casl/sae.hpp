#pragma once

// Stage-1 sparse autoencoder over bottleneck tokens. Untied linear encoder
// and decoder around a shared pre-bias, a learnable per-grid-timestep
// embedding on the encoder side, ReLU latents, and an L2 + L1 objective with
// mean-over-elements reductions.
//
//   z = relu(W_enc (h + e(t) - b_pre) + b_lat)        [N,K] per map
//   h_hat = W_dec z + b_pre                           [N,C]

#include <string>
#include <vector>

#include "casl/core.hpp"
#include "casl/diffusion.hpp"
#include "casl/nn.hpp"
#include "casl/parallel.hpp"
#include "casl/rng.hpp"

namespace casl {

struct SparseLatent {
    Array z; // [N, K], nonnegative
    int timestep = 0;
    int64_t image_id = -1;
};

struct SaeConfig {
    int channels = 32;             // C
    int expansion = 8;             // gamma_sae, K = expansion * C
    double lambda_sparse = 4.0;
    std::vector<int> window_grid;  // grid timesteps with an embedding row, descending

    int latent_dim() const { return expansion * channels; }
};

struct SaeParams {
    Array w_enc; // [K, C]
    Array b_lat; // [K]
    Array w_dec; // [C, K]
    Array b_pre; // [C]
    Array temb;  // [|window_grid|, C]

    static SaeParams init(const SaeConfig& cfg, Rng& rng) {
        const int c = cfg.channels, k = cfg.latent_dim();
        SaeParams p;
        p.w_enc = Array({k, c});
        p.b_lat = Array({k});
        p.w_dec = Array({c, k});
        p.b_pre = Array({c});
        p.temb = Array({static_cast<int>(cfg.window_grid.size()), c});
        const double be = 1.0 / std::sqrt(static_cast<double>(c));
        const double bd = 1.0 / std::sqrt(static_cast<double>(k));
        rng.fill_uniform(p.w_enc, -be, be);
        rng.fill_uniform(p.w_dec, -bd, bd);
        // biases and embeddings start at zero; the data fixes their scale
        return p;
    }

    static SaeParams zeros_like(const SaeParams& o) {
        SaeParams g;
        g.w_enc = Array(o.w_enc.shape);
        g.b_lat = Array(o.b_lat.shape);
        g.w_dec = Array(o.w_dec.shape);
        g.b_pre = Array(o.b_pre.shape);
        g.temb = Array(o.temb.shape);
        return g;
    }
};

struct SaeModel {
    SaeConfig cfg;
    SaeParams p;
    uint64_t seed = 0;

    ParamStore store(SaeParams& grads) {
        ParamStore ps;
        ps.add("w_enc", p.w_enc, grads.w_enc);
        ps.add("b_lat", p.b_lat, grads.b_lat);
        ps.add("w_dec", p.w_dec, grads.w_dec);
        ps.add("b_pre", p.b_pre, grads.b_pre);
        ps.add("temb", p.temb, grads.temb);
        return ps;
    }

    int embedding_row(int timestep) const {
        for (size_t i = 0; i < cfg.window_grid.size(); ++i)
            if (cfg.window_grid[i] == timestep) return static_cast<int>(i);
        throw config_error("sae: no timestep embedding for t=" + std::to_string(timestep));
    }
};

inline uint64_t sae_id(const SaeModel& m) {
    uint64_t h = hash_array(m.p.w_enc);
    h = hash_array(m.p.b_lat, h);
    h = hash_array(m.p.w_dec, h);
    h = hash_array(m.p.b_pre, h);
    h = hash_array(m.p.temb, h);
    return h;
}

// ----------------------------- encode / decode -----------------------------

inline SparseLatent sae_encode(const SaeModel& m, const ActivationMap& h) {
    const int c = m.cfg.channels, k = m.cfg.latent_dim();
    if (h.tokens.shape.size() != 2 || h.tokens.shape[1] != c)
        throw dim_error("sae_encode: token width must equal C");
    const int n = h.tokens.shape[0];
    const int row = m.embedding_row(h.timestep);
    const double* e = &m.p.temb.data[static_cast<size_t>(row) * c];

    SparseLatent out;
    out.timestep = h.timestep;
    out.image_id = h.image_id;
    out.z = Array({n, k});
    std::vector<double> centered(static_cast<size_t>(c));
    for (int i = 0; i < n; ++i) {
        const double* hi = &h.tokens.data[static_cast<size_t>(i) * c];
        for (int j = 0; j < c; ++j) centered[static_cast<size_t>(j)] = hi[j] + e[j] - m.p.b_pre.data[j];
        double* zi = &out.z.data[static_cast<size_t>(i) * k];
        for (int q = 0; q < k; ++q) {
            const double* wq = &m.p.w_enc.data[static_cast<size_t>(q) * c];
            double s = m.p.b_lat.data[q];
            for (int j = 0; j < c; ++j) s += wq[j] * centered[static_cast<size_t>(j)];
            zi[q] = s > 0.0 ? s : 0.0;
        }
    }
    return out;
}

inline Array sae_decode_tokens(const SaeModel& m, const Array& z) {
    const int c = m.cfg.channels, k = m.cfg.latent_dim();
    if (z.shape.size() != 2 || z.shape[1] != k)
        throw dim_error("sae_decode: latent width must equal K");
    const int n = z.shape[0];
    Array h({n, c});
    for (int i = 0; i < n; ++i) {
        const double* zi = &z.data[static_cast<size_t>(i) * k];
        double* hi = &h.data[static_cast<size_t>(i) * c];
        for (int j = 0; j < c; ++j) {
            const double* wj = &m.p.w_dec.data[static_cast<size_t>(j) * k];
            double s = m.p.b_pre.data[j];
            for (int q = 0; q < k; ++q) s += wj[q] * zi[q];
            hi[j] = s;
        }
    }
    return h;
}

inline ActivationMap sae_decode(const SaeModel& m, const SparseLatent& z) {
    return {sae_decode_tokens(m, z.z), z.timestep, z.image_id};
}

/// Mean squared reconstruction error plus lambda times the mean absolute
/// latent activation, both over all elements.
inline double sae_loss(const Array& h, const Array& h_hat, const Array& z, double lambda_sparse) {
    if (!h.same_shape(h_hat)) throw dim_error("sae_loss: h and h_hat disagree");
    return mean_sq(sub(h, h_hat)) + lambda_sparse * mean_abs(z);
}

// ----------------------------- DAR -----------------------------

/// Fraction of latent dimensions whose mean activation over all rows exceeds
/// tau. Lower means sparser.
inline double dar(const Array& z_batch, double tau) {
    if (!(tau > 0.0)) throw contract_error("dar: tau must be positive");
    if (z_batch.shape.size() != 2 || z_batch.shape[0] == 0)
        throw contract_error("dar: need a nonempty [rows,K] batch");
    const int rows = z_batch.shape[0], k = z_batch.shape[1];
    int active = 0;
    for (int q = 0; q < k; ++q) {
        double s = 0.0;
        for (int i = 0; i < rows; ++i) s += z_batch.data[static_cast<size_t>(i) * k + q];
        if (s / rows > tau) ++active;
    }
    return static_cast<double>(active) / k;
}

/// Latent dimensions whose mean activation over the given maps exceeds tau,
/// the DAR activity notion as an index set.
inline std::vector<int> active_dims(const SaeModel& m, const std::vector<ActivationMap>& maps,
                                    const std::vector<int64_t>& indices, double tau) {
    const int k = m.cfg.latent_dim();
    std::vector<double> colsum(static_cast<size_t>(k), 0.0);
    int64_t tokens = 0;
    for (int64_t idx : indices) {
        SparseLatent z = sae_encode(m, maps[static_cast<size_t>(idx)]);
        const int n = z.z.shape[0];
        tokens += n;
        for (int i = 0; i < n; ++i)
            for (int q = 0; q < k; ++q)
                colsum[static_cast<size_t>(q)] += z.z.data[static_cast<size_t>(i) * k + q];
    }
    std::vector<int> out;
    for (int q = 0; q < k; ++q)
        if (colsum[static_cast<size_t>(q)] / static_cast<double>(tokens) > tau) out.push_back(q);
    return out;
}

// ----------------------------- loss + gradients for one map batch -----------------------------

/// Computes the token-wise batch loss and all parameter gradients in one
/// pass. The same routine drives training steps and the grad_check harness.
/// grads is overwritten.
inline double sae_batch_loss_grads(const SaeModel& model, const std::vector<ActivationMap>& maps,
                                   const int64_t* idx, int bmaps, SaeParams& grads) {
    const int c = model.cfg.channels, k = model.cfg.latent_dim();
    const int n_tok = maps[static_cast<size_t>(idx[0])].tokens.shape[0];
    const int rows = bmaps * n_tok;
    const double lambda_sparse = model.cfg.lambda_sparse;

    Array xc({rows, c}), zpre({rows, k}), zact({rows, k});
    Array dh({rows, c}), dzpre({rows, k}), dxc({rows, c});
    std::vector<int> embed_row(static_cast<size_t>(bmaps));

    for (int bm = 0; bm < bmaps; ++bm) {
        const ActivationMap& map = maps[static_cast<size_t>(idx[bm])];
        if (map.tokens.shape[0] != n_tok || map.tokens.shape[1] != c)
            throw dim_error("sae batch: inconsistent map shapes");
        embed_row[static_cast<size_t>(bm)] = model.embedding_row(map.timestep);
        const double* e = &model.p.temb.data[static_cast<size_t>(embed_row[static_cast<size_t>(bm)]) * c];
        for (int i = 0; i < n_tok; ++i) {
            const int r = bm * n_tok + i;
            const double* hi = &map.tokens.data[static_cast<size_t>(i) * c];
            double* xr = &xc.data[static_cast<size_t>(r) * c];
            for (int j = 0; j < c; ++j) xr[j] = hi[j] + e[j] - model.p.b_pre.data[j];
        }
    }

    parallel_for(rows, [&](int64_t r) {
        const double* xr = &xc.data[static_cast<size_t>(r) * c];
        double* zp = &zpre.data[static_cast<size_t>(r) * k];
        double* za = &zact.data[static_cast<size_t>(r) * k];
        for (int q = 0; q < k; ++q) {
            const double* wq = &model.p.w_enc.data[static_cast<size_t>(q) * c];
            double s = model.p.b_lat.data[q];
            for (int j = 0; j < c; ++j) s += wq[j] * xr[j];
            zp[q] = s;
            za[q] = s > 0.0 ? s : 0.0;
        }
    });

    const double inv_elems = 1.0 / (static_cast<double>(rows) * c);
    const double inv_latent = 1.0 / (static_cast<double>(rows) * k);
    std::vector<double> rec_err(static_cast<size_t>(rows), 0.0);
    std::vector<double> l1_part(static_cast<size_t>(rows), 0.0);
    parallel_for(rows, [&](int64_t r) {
        const int bm = static_cast<int>(r) / n_tok;
        const int i = static_cast<int>(r) - bm * n_tok;
        const ActivationMap& map = maps[static_cast<size_t>(idx[bm])];
        const double* hi = &map.tokens.data[static_cast<size_t>(i) * c];
        const double* za = &zact.data[static_cast<size_t>(r) * k];
        double* dhr = &dh.data[static_cast<size_t>(r) * c];
        double err = 0.0;
        for (int j = 0; j < c; ++j) {
            const double* wj = &model.p.w_dec.data[static_cast<size_t>(j) * k];
            double s = model.p.b_pre.data[j];
            for (int q = 0; q < k; ++q) s += wj[q] * za[q];
            const double d = s - hi[j];
            err += d * d;
            dhr[j] = 2.0 * d * inv_elems;
        }
        rec_err[static_cast<size_t>(r)] = err;
        double l1 = 0.0;
        for (int q = 0; q < k; ++q) l1 += za[q]; // z >= 0 so |z| = z
        l1_part[static_cast<size_t>(r)] = l1;
    });

    double loss = 0.0;
    for (int r = 0; r < rows; ++r)
        loss += rec_err[static_cast<size_t>(r)] * inv_elems +
                lambda_sparse * l1_part[static_cast<size_t>(r)] * inv_latent;

    parallel_for(rows, [&](int64_t r) {
        const double* dhr = &dh.data[static_cast<size_t>(r) * c];
        const double* zp = &zpre.data[static_cast<size_t>(r) * k];
        double* dz = &dzpre.data[static_cast<size_t>(r) * k];
        for (int q = 0; q < k; ++q) {
            if (zp[q] <= 0.0) { // relu gate; L1 subgradient at 0 is 0
                dz[q] = 0.0;
                continue;
            }
            double s = lambda_sparse * inv_latent; // d|z|/dz = +1 for z > 0
            for (int j = 0; j < c; ++j)
                s += dhr[j] * model.p.w_dec.data[static_cast<size_t>(j) * k + q];
            dz[q] = s;
        }
        double* dxr = &dxc.data[static_cast<size_t>(r) * c];
        for (int j = 0; j < c; ++j) dxr[j] = 0.0;
        for (int q = 0; q < k; ++q) {
            const double g = dz[q];
            if (g == 0.0) continue;
            const double* wq = &model.p.w_enc.data[static_cast<size_t>(q) * c];
            for (int j = 0; j < c; ++j) dxr[j] += g * wq[j];
        }
    });

    grads.w_enc.zero();
    grads.b_lat.zero();
    grads.w_dec.zero();
    grads.b_pre.zero();
    grads.temb.zero();
    parallel_for(k, [&](int64_t q) { // encoder weights, fixed row order inside
        double* gw = &grads.w_enc.data[static_cast<size_t>(q) * c];
        double gb = 0.0;
        for (int r = 0; r < rows; ++r) {
            const double g = dzpre.data[static_cast<size_t>(r) * k + q];
            if (g == 0.0) continue;
            const double* xr = &xc.data[static_cast<size_t>(r) * c];
            for (int j = 0; j < c; ++j) gw[j] += g * xr[j];
            gb += g;
        }
        grads.b_lat.data[q] = gb;
    });
    parallel_for(c, [&](int64_t j) { // decoder weights and the shared pre-bias
        double* gw = &grads.w_dec.data[static_cast<size_t>(j) * k];
        double gb = 0.0;
        for (int r = 0; r < rows; ++r) {
            const double g = dh.data[static_cast<size_t>(r) * c + j];
            gb += g;
            if (g == 0.0) continue;
            const double* za = &zact.data[static_cast<size_t>(r) * k];
            for (int q = 0; q < k; ++q) gw[q] += g * za[q];
        }
        double gx = 0.0;
        for (int r = 0; r < rows; ++r) gx += dxc.data[static_cast<size_t>(r) * c + j];
        grads.b_pre.data[j] = gb - gx; // added after decode, subtracted before encode
    });
    for (int r = 0; r < rows; ++r) { // timestep embeddings
        const int erow = embed_row[static_cast<size_t>(r / n_tok)];
        double* ge = &grads.temb.data[static_cast<size_t>(erow) * c];
        const double* dxr = &dxc.data[static_cast<size_t>(r) * c];
        for (int j = 0; j < c; ++j) ge[j] += dxr[j];
    }
    return loss;
}

// ----------------------------- evaluation -----------------------------

struct SaeEvalStats {
    double mse = 0.0, cosine = 0.0, dar = 0.0;
};

inline SaeEvalStats evaluate_sae(const SaeModel& m, const std::vector<ActivationMap>& maps,
                                 const std::vector<int64_t>& indices, double tau) {
    if (indices.empty()) return {};
    const int k = m.cfg.latent_dim();

    struct PerMap {
        double se = 0.0, cos = 0.0;
        std::vector<double> colsum;
        int tokens = 0;
        int64_t elems = 0;
    };
    std::vector<PerMap> acc(indices.size());
    parallel_for(static_cast<int64_t>(indices.size()), [&](int64_t j) {
        const ActivationMap& map = maps[static_cast<size_t>(indices[static_cast<size_t>(j)])];
        SparseLatent z = sae_encode(m, map);
        Array rec = sae_decode_tokens(m, z.z);
        PerMap& pm = acc[static_cast<size_t>(j)];
        pm.colsum.assign(static_cast<size_t>(k), 0.0);
        const int n = map.tokens.shape[0], c = map.tokens.shape[1];
        pm.tokens = n;
        pm.elems = static_cast<int64_t>(n) * c;
        for (int i = 0; i < n; ++i) {
            const double* hi = &map.tokens.data[static_cast<size_t>(i) * c];
            const double* ri = &rec.data[static_cast<size_t>(i) * c];
            double hh = 0, rr = 0, hr = 0;
            for (int q = 0; q < c; ++q) {
                const double d = hi[q] - ri[q];
                pm.se += d * d;
                hh += hi[q] * hi[q];
                rr += ri[q] * ri[q];
                hr += hi[q] * ri[q];
            }
            const double denom = std::sqrt(hh) * std::sqrt(rr);
            pm.cos += denom > 1e-300 ? hr / denom : 1.0;
            const double* zi = &z.z.data[static_cast<size_t>(i) * k];
            for (int q = 0; q < k; ++q) pm.colsum[static_cast<size_t>(q)] += zi[q];
        }
    });

    SaeEvalStats st;
    std::vector<double> colsum(static_cast<size_t>(k), 0.0);
    double se = 0.0;
    int64_t elems = 0, tokens = 0;
    for (const auto& pm : acc) {
        se += pm.se;
        st.cosine += pm.cos;
        elems += pm.elems;
        tokens += pm.tokens;
        for (int q = 0; q < k; ++q) colsum[static_cast<size_t>(q)] += pm.colsum[static_cast<size_t>(q)];
    }
    st.mse = se / static_cast<double>(elems);
    st.cosine /= static_cast<double>(tokens);
    int active = 0;
    for (int q = 0; q < k; ++q)
        if (colsum[static_cast<size_t>(q)] / static_cast<double>(tokens) > tau) ++active;
    st.dar = static_cast<double>(active) / k;
    return st;
}

// ----------------------------- training -----------------------------

struct SaeEpochRow {
    int epoch;
    double mse;    // held-out reconstruction MSE
    double cosine; // held-out mean per-token cosine similarity
    double dar;    // held-out DAR at the evaluation threshold
};

struct SaeTrainResult {
    SaeModel model;
    std::vector<SaeEpochRow> rows;              // one per epoch
    std::vector<double> train_mse_checkpoints;  // full train-set MSE every 10 epochs
    SaeEvalStats final_stats;
};

/// Token-wise SAE training: each step takes a minibatch of maps, expands it
/// to batch * N tokens, and applies one Adam update with fixed lambda (no
/// annealing). Maps with index % 5 == 4 are held out for the epoch metrics.
inline SaeTrainResult train_sae(const std::vector<ActivationMap>& maps, int expansion,
                                double lambda_sparse, int epochs, double lr, uint64_t seed,
                                int batch_maps = 64, double tau = 0.01) {
    if (maps.empty()) throw contract_error("train_sae: empty activation cache");
    const int c = maps.front().tokens.shape[1];

    SaeModel model;
    model.cfg.channels = c;
    model.cfg.expansion = expansion;
    model.cfg.lambda_sparse = lambda_sparse;
    model.seed = seed;
    { // embeddings indexed by position in the window grid
        std::vector<int> grid;
        for (const auto& m : maps) {
            bool seen = false;
            for (int t : grid) seen |= (t == m.timestep);
            if (!seen) grid.push_back(m.timestep);
        }
        std::sort(grid.begin(), grid.end(), std::greater<int>());
        model.cfg.window_grid = grid;
    }
    Rng rng(seed);
    model.p = SaeParams::init(model.cfg, rng);

    std::vector<int64_t> train_idx, held_idx;
    for (int64_t i = 0; i < static_cast<int64_t>(maps.size()); ++i)
        (is_held_out(i) ? held_idx : train_idx).push_back(i);
    if (train_idx.empty()) train_idx = held_idx;

    SaeParams grads = SaeParams::zeros_like(model.p);
    SaeParams step_grads = SaeParams::zeros_like(model.p);
    ParamStore ps = model.store(grads);
    AdamState adam = AdamState::init(ps, lr);

    SaeTrainResult result;
    std::vector<int64_t> order = train_idx;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += batch_maps) {
            const int bmaps = static_cast<int>(std::min(order.size(), start + batch_maps) - start);
            const double loss = sae_batch_loss_grads(model, maps, &order[start], bmaps, step_grads);
            if (!std::isfinite(loss)) throw train_error("train_sae: loss diverged");
            grads.w_enc.data = step_grads.w_enc.data;
            grads.b_lat.data = step_grads.b_lat.data;
            grads.w_dec.data = step_grads.w_dec.data;
            grads.b_pre.data = step_grads.b_pre.data;
            grads.temb.data = step_grads.temb.data;
            adam_step(ps, adam);
        }

        SaeEvalStats held = evaluate_sae(model, maps, held_idx.empty() ? train_idx : held_idx, tau);
        result.rows.push_back({epoch + 1, held.mse, held.cosine, held.dar});
        if ((epoch + 1) % 10 == 0) {
            SaeEvalStats tr = evaluate_sae(model, maps, train_idx, tau);
            result.train_mse_checkpoints.push_back(tr.mse);
        }
    }

    result.final_stats = evaluate_sae(model, maps, held_idx.empty() ? train_idx : held_idx, tau);
    result.model = std::move(model);
    return result;
}

} // namespace casl
