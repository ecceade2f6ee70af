#pragma once

// Shared micro-scale pipeline config for integration and CLI tests.

#include "casl/pipeline.hpp"

namespace casl_test {

inline casl::PipelineConfig micro_config(const std::string& out_dir, uint64_t seed = 7) {
    casl::PipelineConfig cfg;
    cfg.seed = seed;
    cfg.out_dir = out_dir;
    cfg.corpus = {150, 16};
    cfg.classifier = {6, 1e-3, 32, 0.0};
    cfg.diffusion = {100, 50, 25, 4, 1e-3, 16, 0.0, 4, 6, 8, 8};
    cfg.cache = {100, 40};
    cfg.sae = {2, 0.5, 1e-3, 8, 16, 40, 0.01};
    cfg.align = {3.0, 1.0, 2.0, {0, 1}, 2, 1e-2, 40, 8};
    cfg.steer = {{0, 2}, {1, 4}, 1.0, 2.0, 1, false, false, 2};
    cfg.eval = {16, 6, {1, 4}};
    return cfg;
}

} // namespace casl_test
