#pragma once

// Procedurally generated attribute-labeled images: one soft-edged disc with
// optional stripes over a flat background. Four of the continuous factors are
// thresholded into binary attributes; the rest are nuisance diversity.

#include <vector>

#include "casl/core.hpp"
#include "casl/parallel.hpp"
#include "casl/rng.hpp"

namespace casl {

constexpr int kNumAttributes = 4;

// attribute index -> meaning
//   0 "big"      radius factor > 0.5
//   1 "bright"   foreground intensity factor > 0.5
//   2 "light-bg" background intensity factor > 0.5
//   3 "high"     vertical position factor > 0.5 (disc sits in the upper half)
inline const char* attribute_name(int j) {
    switch (j) {
        case 0: return "big";
        case 1: return "bright";
        case 2: return "light-bg";
        case 3: return "high";
        default: return "?";
    }
}

/// Continuous scene factors, all normalized to [0,1].
struct SceneSpec {
    int canvas = 32;
    double radius = 0.5;
    double pos_x = 0.5;
    double pos_y = 0.5;
    double rotation = 0.0;
    double fg_intensity = 0.5;
    double stripe_freq = 0.5;
    double bg_intensity = 0.5;

    std::vector<int> labels() const {
        return {radius > 0.5, fg_intensity > 0.5, bg_intensity > 0.5, pos_y > 0.5};
    }
};

struct LabeledImage {
    Array pixels;            // [S,S] in [-1,1]
    std::vector<int> labels; // length kNumAttributes
    SceneSpec spec;
};

/// Attribute factors avoid a band around the 0.5 threshold so labels have a
/// visual margin; the split stays exactly 50/50 in expectation.
inline double sample_thresholded_factor(Rng& rng, double dead_zone = 0.06) {
    const double u = rng.uniform01();
    const double span = 0.5 - dead_zone;
    return u < 0.5 ? u * 2.0 * span : (0.5 + dead_zone) + (u - 0.5) * 2.0 * span;
}

inline SceneSpec sample_scene(Rng& rng, int canvas) {
    SceneSpec s;
    s.canvas = canvas;
    s.radius = sample_thresholded_factor(rng);
    s.fg_intensity = sample_thresholded_factor(rng);
    s.bg_intensity = sample_thresholded_factor(rng);
    s.pos_y = sample_thresholded_factor(rng);
    s.pos_x = rng.uniform01();
    s.rotation = rng.uniform01();
    s.stripe_freq = rng.uniform01();
    return s;
}

inline Array render_scene(const SceneSpec& s) {
    const int n = s.canvas;
    const double scale = n / 32.0;
    const double bg = -0.95 + 0.55 * s.bg_intensity;             // [-0.95, -0.40]
    const double fg = -0.10 + 0.95 * s.fg_intensity;             // [-0.10,  0.85]
    const double radius = (4.0 + 6.0 * s.radius) * scale;
    const double cx = n * (0.38 + 0.24 * s.pos_x);
    const double cy = n * (0.64 - 0.28 * s.pos_y);               // high factor -> small row index
    const double freq = (1.5 + 4.0 * s.stripe_freq) / n;         // cycles per pixel
    const double phi = 3.141592653589793 * s.rotation;
    const double cphi = std::cos(phi), sphi = std::sin(phi);
    constexpr double kStripeAmp = 0.14;
    constexpr double kTwoPi = 6.283185307179586;

    Array img({n, n});
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double u = x + 0.5 - cx, v = y + 0.5 - cy;
            const double d = std::sqrt(u * u + v * v);
            double m = 0.5 + (radius - d); // 1-px soft edge
            m = std::min(1.0, std::max(0.0, m));
            const double stripe = kStripeAmp * std::sin(kTwoPi * freq * (u * cphi + v * sphi));
            img.at(y, x) = bg + m * (fg + stripe - bg);
        }
    }
    require_finite(img, "render_scene");
    return img;
}

/// Pure function of (n, seed); image i derives its own stream from the seed.
inline std::vector<LabeledImage> generate_corpus(int64_t n, uint64_t seed, int canvas = 32) {
    if (n < 1) throw contract_error("generate_corpus: n must be >= 1");
    std::vector<LabeledImage> corpus(static_cast<size_t>(n));
    Rng root(seed);
    parallel_for(n, [&](int64_t i) {
        Rng rng = root.fork(static_cast<uint64_t>(i));
        SceneSpec spec = sample_scene(rng, canvas);
        corpus[static_cast<size_t>(i)] = {render_scene(spec), spec.labels(), spec};
    });
    return corpus;
}

inline std::vector<double> attribute_positive_rates(const std::vector<LabeledImage>& corpus) {
    std::vector<double> rates(kNumAttributes, 0.0);
    for (const auto& im : corpus)
        for (int j = 0; j < kNumAttributes; ++j) rates[j] += im.labels[j];
    for (double& r : rates) r /= static_cast<double>(corpus.size());
    return rates;
}

/// Deterministic 80/20 split shared by every trainer: index % 5 == 4 held out.
inline bool is_held_out(int64_t index) { return index % 5 == 4; }

} // namespace casl
