#pragma once

// Stage-3 latent intervention. A sparse coordinate restricted to the top-k
// dimensions of a trained ConceptMap scales the current latent, the mapped
// shift is added to the bottleneck, and only the predicted-x0 branch of the
// DDIM update sees it (a `symmetric` flag injects into both branches). The
// shift is recomputed at every window step from the current activation.

#include <vector>

#include "casl/align.hpp"
#include "casl/core.hpp"
#include "casl/diffusion.hpp"
#include "casl/sae.hpp"

namespace casl {

struct SteerConfig {
    int concept_id = 0;
    double alpha = 1.0;       // editing intensity on the selected dimensions
    int k = 1;                // top-k dimension count
    double gamma = 1.0;       // global gain on the shift
    int t_edit = 50;          // window start
    bool include_bias = false; // add b to the shift (off per the bias-free shift)
    bool symmetric = false;    // inject into both update branches
};

struct SteerResult {
    Array original;
    Array steered;
    std::vector<double> trace; // applied shift norm per window step
    SteerConfig cfg;
};

/// Sparse editing coordinate: alpha on the selected indices, zero elsewhere.
inline Array coordinate(double alpha, const std::vector<int>& indices, int latent_dim) {
    Array coord({latent_dim});
    for (int i : indices) {
        if (i < 0 || i >= latent_dim) throw contract_error("coordinate: index out of range");
        coord.data[static_cast<size_t>(i)] = alpha;
    }
    return coord;
}

/// Concept shift per token: W (coord ⊙ z). The bias is excluded.
inline Array concept_shift(const ConceptMap& map, const Array& z, const Array& coord) {
    const int k = map.w.shape[1];
    if (z.shape.size() != 2 || z.shape[1] != k)
        throw dim_error("concept_shift: latent width must equal K");
    if (coord.shape.size() != 1 || coord.shape[0] != k)
        throw dim_error("concept_shift: coordinate length must equal K");
    const int n = z.shape[0], c = map.w.shape[0];
    Array scaled_z({n, k});
    for (int i = 0; i < n; ++i)
        for (int q = 0; q < k; ++q)
            scaled_z.data[static_cast<size_t>(i) * k + q] =
                coord.data[static_cast<size_t>(q)] * z.data[static_cast<size_t>(i) * k + q];
    Array out({n, c});
    for (int i = 0; i < n; ++i) {
        const double* zi = &scaled_z.data[static_cast<size_t>(i) * k];
        double* oi = &out.data[static_cast<size_t>(i) * c];
        for (int j = 0; j < c; ++j) {
            const double* wj = &map.w.data[static_cast<size_t>(j) * k];
            double s = 0.0;
            for (int q = 0; q < k; ++q) s += wj[q] * zi[q];
            oi[j] = s;
        }
    }
    return out;
}

inline void check_steer_components(const Denoiser& den, const SaeModel& sae, const ConceptMap& map) {
    if (den.cfg.channels != sae.cfg.channels)
        throw config_error("steer: denoiser and SAE channel widths disagree");
    if (map.w.shape[1] != sae.cfg.latent_dim() || map.w.shape[0] != sae.cfg.channels)
        throw config_error("steer: concept map shape does not match the SAE");
    if (map.sae_ref != 0 && map.sae_ref != sae_id(sae))
        throw config_error("steer: concept map was trained against a different SAE");
    if (map.denoiser_ref != 0 && map.denoiser_ref != denoiser_id(den))
        throw config_error("steer: concept map was trained against a different denoiser");
}

/// Steered DDIM generation from a trajectory top. At every step with source
/// timestep t >= t_edit the bottleneck is shifted for the injected branch;
/// outside the window the plain update runs through the same code path.
inline SteerResult steer_from_top(const Denoiser& den, const SaeModel& sae, const ConceptMap& map,
                                  const DiffusionSchedule& sched, const Array& x_top,
                                  const SteerConfig& cfg) {
    check_steer_components(den, sae, map);
    if (cfg.k < 1 || cfg.k > sae.cfg.latent_dim())
        throw contract_error("steer: k out of [1, K]");
    if (!std::isfinite(cfg.alpha)) throw contract_error("steer: alpha must be finite");
    if (cfg.t_edit < 0 || cfg.t_edit >= sched.timesteps)
        throw contract_error("steer: t_edit out of [0, T-1]");

    const Array coord = coordinate(cfg.alpha, select_topk(map, cfg.k), sae.cfg.latent_dim());
    const int n_side = den.cfg.bottleneck_extent();

    SteerResult res;
    res.cfg = cfg;
    Array x = x_top;
    for (size_t i = 0; i + 1 < sched.grid.size(); ++i) {
        const int t = sched.grid[i], t_prev = sched.grid[i + 1];
        EncCache ec;
        denoiser_encode(den, x, t, ec);
        DecCache dc;
        if (t >= cfg.t_edit) {
            SparseLatent z = sae_encode(sae, {tokens_from_map(ec.h), t, -1});
            Array shift = concept_shift(map, z.z, coord);
            if (cfg.include_bias)
                for (int tok = 0; tok < shift.shape[0]; ++tok)
                    for (int j = 0; j < shift.shape[1]; ++j)
                        shift.at(tok, j) += map.b.data[j];
            Array applied = scaled(shift, cfg.gamma);
            res.trace.push_back(norm2(applied));
            Array h_inj = add(ec.h, map_from_tokens(applied, n_side));
            Array eps_inj = denoiser_decode(den, ec, h_inj, dc);
            if (cfg.symmetric) {
                x = ddim_step_abar(x, sched.alpha_bar[t], sched.alpha_bar[t_prev], eps_inj, eps_inj);
            } else {
                DecCache dc_plain;
                Array eps_plain = denoiser_decode(den, ec, ec.h, dc_plain);
                x = ddim_step_abar(x, sched.alpha_bar[t], sched.alpha_bar[t_prev], eps_inj, eps_plain);
            }
        } else {
            Array eps = denoiser_decode(den, ec, ec.h, dc);
            x = ddim_step_abar(x, sched.alpha_bar[t], sched.alpha_bar[t_prev], eps, eps);
        }
    }
    res.steered = std::move(x);
    return res;
}

/// Full pipeline for one image: invert, then steer along the grid.
inline SteerResult steer(const Denoiser& den, const SaeModel& sae, const ConceptMap& map,
                         const DiffusionSchedule& sched, const Array& image,
                         const SteerConfig& cfg) {
    InversionResult inv = ddim_invert(den, sched, image, sched.timesteps); // no activation cache
    SteerResult res = steer_from_top(den, sae, map, sched, inv.x[0], cfg);
    res.original = image;
    return res;
}

} // namespace casl
