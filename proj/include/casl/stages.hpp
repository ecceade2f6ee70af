#pragma once

// Stage bodies for the pipeline. Each stage loads its upstream artifacts,
// writes its own atomically, and finishes by writing its manifest; a stage is
// only considered complete once the manifest exists.

#include <cstdio>

#include "casl/pipeline.hpp"

namespace casl {

namespace stages {

inline void gen_data(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = generate_corpus(cfg.corpus.n, cfg.stage_seed("gen-data"), cfg.corpus.image_size);
    const auto rates = attribute_positive_rates(corpus);
    for (int j = 0; j < kNumAttributes; ++j)
        if (rates[static_cast<size_t>(j)] < 0.35 || rates[static_cast<size_t>(j)] > 0.65)
            throw data_error(std::string("gen-data: attribute ") + attribute_name(j) +
                             " positive rate out of [0.35, 0.65]");
    save_corpus(corpus, ctx.out / "corpus");
    atomic_write_file(ctx.out / "config.json", config_to_json(cfg).dump(2) + "\n");
    ctx.record("corpus.json");
    ctx.record("corpus.bin");
    ctx.record("config.json");
}

inline void train_clf(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    AttributeClassifier a = train_classifier(corpus, cfg.classifier.epochs, cfg.classifier.lr,
                                             cfg.stage_seed("train-clf-a"),
                                             cfg.classifier.min_accuracy, cfg.classifier.batch);
    AttributeClassifier b = train_classifier(corpus, cfg.classifier.epochs, cfg.classifier.lr,
                                             cfg.stage_seed("train-clf-b"),
                                             cfg.classifier.min_accuracy, cfg.classifier.batch);
    save_classifier(a, ctx.out / "clf_a");
    save_classifier(b, ctx.out / "clf_b");

    std::vector<int64_t> held;
    for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i)
        if (is_held_out(i)) held.push_back(i);
    std::string csv = "clf,attribute,balanced_accuracy\n";
    for (const char* tag : {"a", "b"}) {
        const AttributeClassifier& clf = tag[0] == 'a' ? a : b;
        auto ev = evaluate_classifier(clf, corpus, held);
        for (int j = 0; j < clf.cfg.n_attr; ++j)
            csv += std::string(tag) + "," + attribute_name(j) + "," +
                   csv_num(ev.balanced_accuracy[static_cast<size_t>(j)]) + "\n";
    }
    atomic_write_file(ctx.out / "clf_metrics.csv", csv);
    ctx.record("clf_a.json");
    ctx.record("clf_a.bin");
    ctx.record("clf_b.json");
    ctx.record("clf_b.bin");
    ctx.record("clf_metrics.csv");
}

inline void train_backbone_stage(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    auto sched = cfg.schedule();
    Denoiser den = train_backbone(corpus, sched, cfg.diffusion.epochs, cfg.diffusion.lr,
                                  cfg.stage_seed("train-backbone"), cfg.diffusion.max_mse_ratio,
                                  cfg.diffusion.batch, cfg.denoiser_config());
    save_denoiser(den, ctx.out / "denoiser");

    std::vector<int64_t> held;
    for (int64_t i = 0; i < static_cast<int64_t>(corpus.size()); ++i)
        if (is_held_out(i)) held.push_back(i);
    const double mse = noise_prediction_mse(den, sched, corpus, held,
                                            cfg.stage_seed("backbone-eval"));
    atomic_write_file(ctx.out / "backbone_metrics.csv",
                      "heldout_noise_mse,zero_predictor_ratio\n" + csv_num(mse) + "," +
                          csv_num(mse / 1.0) + "\n");
    ctx.record("denoiser.json");
    ctx.record("denoiser.bin");
    ctx.record("backbone_metrics.csv");
}

inline void cache_acts(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    Denoiser den = load_denoiser(ctx.out / "denoiser");
    auto sched = cfg.schedule();
    const int n_h = std::min<int>(cfg.cache.h_images, static_cast<int>(corpus.size()));
    const int n_x = std::min<int>(cfg.cache.x_images, n_h);
    const auto window = sched.window(cfg.diffusion.t_edit);

    struct Slot {
        std::vector<ActivationMap> acts;
        std::vector<Array> x_states; // window order (descending t)
    };
    std::vector<Slot> slots(static_cast<size_t>(n_h));
    parallel_for(n_h, [&](int64_t i) {
        auto inv = ddim_invert(den, sched, corpus[static_cast<size_t>(i)].pixels,
                               cfg.diffusion.t_edit, i);
        Slot& s = slots[static_cast<size_t>(i)];
        s.acts = std::move(inv.acts);
        if (i < n_x)
            for (size_t g = 0; g < sched.grid.size(); ++g)
                if (sched.grid[g] >= cfg.diffusion.t_edit) s.x_states.push_back(inv.x[g]);
    });

    Checkpoint hck, xck;
    hck.meta["kind"] = "hcache";
    hck.meta["n_images"] = n_h;
    hck.meta["window_grid"] = window;
    hck.meta["channels"] = den.cfg.channels;
    xck.meta["kind"] = "xcache";
    xck.meta["n_images"] = n_x;
    xck.meta["window_grid"] = window;
    for (int i = 0; i < n_h; ++i) {
        for (const auto& am : slots[static_cast<size_t>(i)].acts)
            hck.add(act_entry_name(i, am.timestep), am.tokens);
        if (i < n_x)
            for (size_t w = 0; w < window.size(); ++w)
                xck.add(act_entry_name(i, window[w]),
                        slots[static_cast<size_t>(i)].x_states[w]);
    }
    hck.save(ctx.out / "hcache");
    xck.save(ctx.out / "xcache");
    ctx.record("hcache.json");
    ctx.record("hcache.bin");
    ctx.record("xcache.json");
    ctx.record("xcache.bin");
}

/// Loads cached activation maps for images [first, last), window order
/// descending in t to match the SAE grid convention.
inline std::vector<ActivationMap> load_hcache_maps(const fs::path& out, int first, int last) {
    Checkpoint ck = Checkpoint::load(out / "hcache");
    const auto window = ck.meta.at("window_grid").get<std::vector<int>>();
    const int n = ck.meta.at("n_images");
    std::vector<ActivationMap> maps;
    for (int i = std::max(0, first); i < std::min(last, n); ++i)
        for (int t : window)
            maps.push_back({ck.get(act_entry_name(i, t)), t, i});
    return maps;
}

inline std::string sae_metrics_csv(const SaeTrainResult& res) {
    std::string csv = "epoch,mse,cosine,dar\n";
    for (const auto& row : res.rows)
        csv += std::to_string(row.epoch) + "," + csv_num(row.mse) + "," + csv_num(row.cosine) +
               "," + csv_num(row.dar) + "\n";
    return csv;
}

inline void train_sae_stage(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto maps = load_hcache_maps(ctx.out, 0, cfg.sae.cache_images);
    SaeTrainResult res = train_sae(maps, cfg.sae.expansion, cfg.sae.lambda_sparse, cfg.sae.epochs,
                                   cfg.sae.lr, cfg.stage_seed("train-sae"), cfg.sae.batch_maps,
                                   cfg.sae.tau);
    save_sae(res.model, ctx.out / "sae");
    atomic_write_file(ctx.out / "sae_metrics.csv", sae_metrics_csv(res));
    ctx.record("sae.json");
    ctx.record("sae.bin");
    ctx.record("sae_metrics.csv");
}

inline std::vector<AlignSample> load_align_samples(const fs::path& out,
                                                   const std::vector<LabeledImage>& corpus,
                                                   const std::vector<int>& window, int n) {
    Checkpoint xck = Checkpoint::load(out / "xcache");
    const int have = xck.meta.at("n_images");
    if (n > have)
        throw config_error("align: xcache holds " + std::to_string(have) +
                           " images but align.images wants " + std::to_string(n));
    std::vector<AlignSample> samples(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        AlignSample s;
        s.x0 = corpus[static_cast<size_t>(i)].pixels;
        s.image_id = i;
        for (int t : window) s.x_t.push_back(xck.get(act_entry_name(i, t)));
        samples[static_cast<size_t>(i)] = std::move(s);
    }
    return samples;
}

inline void align_stage(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    Denoiser den = load_denoiser(ctx.out / "denoiser");
    SaeModel sae = load_sae(ctx.out / "sae");
    AttributeClassifier clf = load_classifier(ctx.out / "clf_a");
    auto sched = cfg.schedule();
    auto samples = load_align_samples(ctx.out, corpus, sae.cfg.window_grid, cfg.align.images);

    std::string csv = "concept,heldout_logit_gain,dh_norm_init,dh_norm_final\n";
    for (int cid : cfg.align.concepts) {
        AlignResult res = train_concept(sae, den, clf, sched, cid, samples,
                                        cfg.align.lambda_sem, cfg.align.lambda_recon,
                                        cfg.align.margin, cfg.align.epochs, cfg.align.lr,
                                        cfg.stage_seed("align-" + std::to_string(cid)),
                                        cfg.align.batch);
        save_concept(res.map, ctx.out / ("concept_" + std::to_string(cid)));
        csv += std::to_string(cid) + "," + csv_num(res.heldout_logit_gain) + "," +
               csv_num(res.mean_dh_norm_init) + "," + csv_num(res.mean_dh_norm_final) + "\n";
        ctx.record("concept_" + std::to_string(cid) + ".json");
        ctx.record("concept_" + std::to_string(cid) + ".bin");
    }
    atomic_write_file(ctx.out / "align_metrics.csv", csv);
    ctx.record("align_metrics.csv");
}

inline std::vector<int64_t> eval_image_ids(const PipelineConfig& cfg) {
    std::vector<int64_t> ids;
    const int64_t first = cfg.corpus.n - cfg.eval.eval_images;
    for (int64_t i = std::max<int64_t>(0, first); i < cfg.corpus.n; ++i) ids.push_back(i);
    return ids;
}

inline SteerConfig default_steer_config(const PipelineConfig& cfg, int cid) {
    SteerConfig sc;
    sc.concept_id = cid;
    sc.alpha = cfg.steer.default_alpha;
    sc.k = cfg.steer.default_k;
    sc.gamma = cfg.steer.gamma;
    sc.t_edit = cfg.diffusion.t_edit;
    sc.include_bias = cfg.steer.include_bias;
    sc.symmetric = cfg.steer.symmetric;
    return sc;
}

inline void steer_stage(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    Denoiser den = load_denoiser(ctx.out / "denoiser");
    SaeModel sae = load_sae(ctx.out / "sae");
    auto sched = cfg.schedule();
    const auto ids = eval_image_ids(cfg);
    const int demo = std::min<int>(cfg.steer.demo_images, static_cast<int>(ids.size()));

    for (int cid : cfg.align.concepts) {
        ConceptMap map = load_concept(ctx.out / ("concept_" + std::to_string(cid)));
        SteerConfig sc = default_steer_config(cfg, cid);
        for (int d = 0; d < demo; ++d) {
            const int64_t id = ids[static_cast<size_t>(d)];
            SteerResult res = steer(den, sae, map, sched, corpus[static_cast<size_t>(id)].pixels, sc);
            char stem[64];
            std::snprintf(stem, sizeof(stem), "steer/c%d_img%06" PRId64, cid, id);
            write_pgm(ctx.out / (std::string(stem) + "_original.pgm"), res.original);
            write_pgm(ctx.out / (std::string(stem) + "_steered.pgm"), res.steered);
            std::string trace = "step,t,delta_h_norm\n";
            const auto window = sched.window(sc.t_edit);
            for (size_t w = 0; w < res.trace.size(); ++w)
                trace += std::to_string(w) + "," + std::to_string(window[w]) + "," +
                         csv_num(res.trace[w]) + "\n";
            atomic_write_file(ctx.out / (std::string(stem) + "_trace.csv"), trace);
            ctx.record(std::string(stem) + "_original.pgm");
            ctx.record(std::string(stem) + "_steered.pgm");
            ctx.record(std::string(stem) + "_trace.csv");
        }
    }
}

inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    int concordant = 0, discordant = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double x = (a[i] - a[j]) * (b[i] - b[j]);
            if (x > 0) ++concordant;
            else if (x < 0) ++discordant;
        }
    const int total = concordant + discordant;
    return total == 0 ? 1.0 : static_cast<double>(concordant - discordant) / total;
}

inline void eval_stage(StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    auto corpus = load_corpus(ctx.out / "corpus");
    Denoiser den = load_denoiser(ctx.out / "denoiser");
    SaeModel sae = load_sae(ctx.out / "sae");
    AttributeClassifier clf_a = load_classifier(ctx.out / "clf_a");
    AttributeClassifier clf_b = load_classifier(ctx.out / "clf_b");
    auto sched = cfg.schedule();

    std::vector<ConceptMap> maps;
    for (int cid : cfg.align.concepts)
        maps.push_back(load_concept(ctx.out / ("concept_" + std::to_string(cid))));

    // random-baseline candidates: dimensions the SAE actually uses
    std::vector<int> rnd_candidates;
    {
        auto probe_maps = load_hcache_maps(ctx.out, 0, std::min(cfg.sae.cache_images, 32));
        std::vector<int64_t> all_maps(probe_maps.size());
        std::iota(all_maps.begin(), all_maps.end(), 0);
        rnd_candidates = active_dims(sae, probe_maps, all_maps, cfg.sae.tau);
        if (static_cast<int>(rnd_candidates.size()) < cfg.steer.default_k) {
            rnd_candidates.resize(static_cast<size_t>(sae.cfg.latent_dim()));
            std::iota(rnd_candidates.begin(), rnd_candidates.end(), 0);
        }
    }

    // ---- steering sweep over the held-out tail images ----
    SteerBench bench;
    for (int64_t id : eval_image_ids(cfg)) {
        bench.ids.push_back(id);
        bench.images.push_back(corpus[static_cast<size_t>(id)].pixels);
    }
    bench.prepare(den, sched);

    std::vector<SweepRow> rows, rows_random, rows_recon, rows_clf2;
    std::vector<PerImageRow> per, per_random, per_recon;
    nlohmann::json ablation;

    for (size_t mi = 0; mi < maps.size(); ++mi) {
        const ConceptMap& map = maps[mi];
        const int cid = map.concept_id;

        std::vector<Array> steered_default;
        for (double alpha : cfg.steer.alpha_grid) {
            for (int k : cfg.steer.k_grid) {
                SteerConfig sc = default_steer_config(cfg, cid);
                sc.alpha = alpha;
                sc.k = k;
                std::vector<Array> edited;
                std::vector<double> trace_means;
                if (alpha == 0.0) {
                    edited = bench.recon; // zero shift is the reconstruction, bit-exact
                } else {
                    auto results = bench.run(den, sae, map, sched, sc);
                    for (auto& r : results) {
                        double tm = 0.0;
                        for (double v : r.trace) tm += v;
                        trace_means.push_back(r.trace.empty() ? 0.0 : tm / r.trace.size());
                        edited.push_back(std::move(r.steered));
                    }
                }
                auto [row, rows_i] = score_pairs(clf_a, bench.recon, edited, bench.ids, cid,
                                                 alpha, k, sc.gamma);
                rows.push_back(row);
                per.insert(per.end(), rows_i.begin(), rows_i.end());
                if (alpha == cfg.steer.default_alpha && k == cfg.steer.default_k) {
                    steered_default = edited;
                    double tm = 0.0;
                    for (double v : trace_means) tm += v;
                    ablation["trace_mean"][attribute_name(cid)] =
                        trace_means.empty() ? 0.0 : tm / trace_means.size();
                }
            }
        }

        // matched-norm random-direction baseline at the default operating point
        SteerConfig sc = default_steer_config(cfg, cid);
        if (steered_default.empty()) { // default point not covered by the grids
            auto results = bench.run(den, sae, map, sched, sc);
            for (auto& r : results) steered_default.push_back(std::move(r.steered));
        }
        ConceptMap rnd = make_random_direction_map(map, sc.k,
                                                   cfg.stage_seed("random-dir-" + std::to_string(cid)),
                                                   rnd_candidates);
        auto rnd_results = bench.run(den, sae, rnd, sched, sc);
        std::vector<Array> rnd_images;
        double rnd_trace = 0.0;
        int rnd_steps = 0;
        for (auto& r : rnd_results) {
            for (double v : r.trace) {
                rnd_trace += v;
                ++rnd_steps;
            }
            rnd_images.push_back(std::move(r.steered));
        }
        ablation["trace_mean_random"][attribute_name(cid)] =
            rnd_steps ? rnd_trace / rnd_steps : 0.0;
        auto [rrow, rper] = score_pairs(clf_a, bench.recon, rnd_images, bench.ids, cid,
                                        sc.alpha, sc.k, sc.gamma);
        rows_random.push_back(rrow);
        per_random.insert(per_random.end(), rper.begin(), rper.end());

        // reconstruction-only drift: original vs inverted-regenerated
        auto [crow, cper] = score_pairs(clf_a, bench.images, bench.recon, bench.ids, cid,
                                        0.0, sc.k, sc.gamma);
        rows_recon.push_back(crow);
        per_recon.insert(per_recon.end(), cper.begin(), cper.end());

        // EPR sensitivity: the same images under the second classifier
        auto [brow_steer, b1] = score_pairs(clf_b, bench.recon, steered_default, bench.ids,
                                            cid, sc.alpha, sc.k, sc.gamma);
        auto [brow_rand, b2] = score_pairs(clf_b, bench.recon, rnd_images, bench.ids, cid,
                                           sc.alpha, sc.k, sc.gamma);
        auto [brow_recon, b3] = score_pairs(clf_b, bench.images, bench.recon, bench.ids, cid,
                                            0.0, sc.k, sc.gamma);
        rows_clf2.push_back(brow_steer);
        double a_steer = 0, a_rand = rrow.epr, a_recon = crow.epr;
        for (const auto& r : rows)
            if (r.concept_id == cid && r.alpha == sc.alpha && r.k == sc.k) a_steer = r.epr;
        const std::vector<double> ranks_a = {a_steer, a_rand, a_recon};
        const std::vector<double> ranks_b = {brow_steer.epr, brow_rand.epr, brow_recon.epr};
        ablation["epr_clf_a"][attribute_name(cid)] = {{"steer", a_steer},
                                                          {"random", a_rand},
                                                          {"recon", a_recon}};
        ablation["epr_clf_b"][attribute_name(cid)] = {{"steer", brow_steer.epr},
                                                          {"random", brow_rand.epr},
                                                          {"recon", brow_recon.epr}};
        ablation["rank_agreement"][attribute_name(cid)] = kendall_tau(ranks_a, ranks_b);
    }

    fs::create_directories(ctx.out / "eval");
    atomic_write_file(ctx.out / "eval/epr.csv", epr_csv(rows));
    atomic_write_file(ctx.out / "eval/epr_images.csv", epr_images_csv(per));
    atomic_write_file(ctx.out / "eval/epr_random.csv", epr_csv(rows_random));
    atomic_write_file(ctx.out / "eval/epr_random_images.csv", epr_images_csv(per_random));
    atomic_write_file(ctx.out / "eval/epr_recon.csv", epr_csv(rows_recon));
    atomic_write_file(ctx.out / "eval/epr_recon_images.csv", epr_images_csv(per_recon));
    atomic_write_file(ctx.out / "eval/epr_clf2.csv", epr_csv(rows_clf2));

    // ---- linear probes over the pooled latent features ----
    auto pool_maps = load_hcache_maps(ctx.out, cfg.align.images, cfg.cache.h_images);
    std::vector<int64_t> pool_ids;
    for (const auto& m : pool_maps)
        if (pool_ids.empty() || pool_ids.back() != m.image_id) pool_ids.push_back(m.image_id);
    Array feats = probe_features(sae, pool_maps, pool_ids);

    std::vector<ProbeRow> probe_rows;
    Rng prng(cfg.stage_seed("probe"));
    for (size_t mi = 0; mi < maps.size(); ++mi) {
        const int cid = maps[mi].concept_id;
        // balanced sets by rejection over the pool, first-come order
        std::vector<int> rows_pos, rows_neg;
        for (size_t r = 0; r < pool_ids.size(); ++r) {
            const auto& im = corpus[static_cast<size_t>(pool_ids[r])];
            auto& bucket = im.labels[static_cast<size_t>(cid)] ? rows_pos : rows_neg;
            if (static_cast<int>(bucket.size()) < cfg.eval.probe_per_class)
                bucket.push_back(static_cast<int>(r));
        }
        if (static_cast<int>(rows_pos.size()) < cfg.eval.probe_per_class ||
            static_cast<int>(rows_neg.size()) < cfg.eval.probe_per_class)
            throw data_error("eval: probe pool cannot supply " +
                             std::to_string(cfg.eval.probe_per_class) + " per class for concept " +
                             std::to_string(cid));
        std::vector<int> chosen = rows_pos;
        chosen.insert(chosen.end(), rows_neg.begin(), rows_neg.end());
        Array sub({static_cast<int>(chosen.size()), sae.cfg.latent_dim()});
        std::vector<int> labels;
        for (size_t r = 0; r < chosen.size(); ++r) {
            std::copy(feats.data.begin() + static_cast<size_t>(chosen[r]) * sae.cfg.latent_dim(),
                      feats.data.begin() + static_cast<size_t>(chosen[r] + 1) * sae.cfg.latent_dim(),
                      sub.data.begin() + r * static_cast<size_t>(sae.cfg.latent_dim()));
            labels.push_back(r < rows_pos.size() ? 1 : 0);
        }
        for (int k : cfg.eval.probe_topk) {
            ProbeModel probe = train_probe(sub, labels, select_topk(maps[mi], k), cid,
                                           cfg.stage_seed("probe-split"));
            probe_rows.push_back({cid, k, probe.accuracy, probe.n_train, probe.n_test,
                                  cfg.stage_seed("probe-split")});
        }
        // median accuracy of 16 random dimensions over 5 draws (selection control)
        std::vector<double> rnd_acc;
        for (int draw = 0; draw < 5; ++draw) {
            std::vector<int> all(static_cast<size_t>(sae.cfg.latent_dim()));
            std::iota(all.begin(), all.end(), 0);
            prng.shuffle(all);
            all.resize(16);
            std::sort(all.begin(), all.end());
            ProbeModel probe = train_probe(sub, labels, all, cid, cfg.stage_seed("probe-split"));
            rnd_acc.push_back(probe.accuracy);
        }
        ablation["probe_random16_median"][attribute_name(cid)] = median(rnd_acc);
    }
    atomic_write_file(ctx.out / "eval/probe.csv", probe_csv(probe_rows));
    atomic_write_file(ctx.out / "eval/ablation.json", ablation.dump(2) + "\n");

    ctx.record("eval/epr.csv");
    ctx.record("eval/epr_images.csv");
    ctx.record("eval/epr_random.csv");
    ctx.record("eval/epr_random_images.csv");
    ctx.record("eval/epr_recon.csv");
    ctx.record("eval/epr_recon_images.csv");
    ctx.record("eval/epr_clf2.csv");
    ctx.record("eval/probe.csv");
    ctx.record("eval/ablation.json");
}

} // namespace stages

// ----------------------------- runner -----------------------------

enum class StageStatus { built, up_to_date };

inline StageStatus run_stage(const PipelineConfig& cfg, const std::string& stage) {
    const auto& names = stage_names();
    if (std::find(names.begin(), names.end(), stage) == names.end())
        throw contract_error("unknown stage: " + stage);
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    DirLock lock(out);

    check_upstreams(cfg, out, stage);
    if (stage_up_to_date(cfg, out, stage)) {
        std::fprintf(stderr, "casl: stage %s up-to-date\n", stage.c_str());
        return StageStatus::up_to_date;
    }

    StageContext ctx{cfg, out, config_hash(cfg)};
    if (stage == "gen-data") stages::gen_data(ctx);
    else if (stage == "train-clf") stages::train_clf(ctx);
    else if (stage == "train-backbone") stages::train_backbone_stage(ctx);
    else if (stage == "cache-acts") stages::cache_acts(ctx);
    else if (stage == "train-sae") stages::train_sae_stage(ctx);
    else if (stage == "align") stages::align_stage(ctx);
    else if (stage == "steer") stages::steer_stage(ctx);
    else if (stage == "eval") stages::eval_stage(ctx);
    write_manifest(ctx, stage);
    std::fprintf(stderr, "casl: stage %s done\n", stage.c_str());
    return StageStatus::built;
}

inline void run_all(const PipelineConfig& cfg) {
    for (const std::string& stage : stage_names()) run_stage(cfg, stage);
}

// ----------------------------- report -----------------------------

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::string cell;
    std::vector<std::string> row;
    for (char ch : text) {
        if (ch == ',') {
            row.push_back(cell);
            cell.clear();
        } else if (ch == '\n') {
            row.push_back(cell);
            cell.clear();
            rows.push_back(row);
            row.clear();
        } else {
            cell += ch;
        }
    }
    if (!cell.empty() || !row.empty()) {
        row.push_back(cell);
        rows.push_back(row);
    }
    return rows;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

} // namespace detail

/// Human-readable summary of a completed run; byte-identical for identical
/// artifacts.
inline std::string render_report(const fs::path& out) {
    using detail::fmt;
    using detail::parse_csv;
    if (!fs::exists(out / "eval" / "epr.csv"))
        throw missing_upstream_error("report: no eval artifacts under " + out.string() +
                                     "; run stage eval first");
    std::string r;
    r += "== casl report ==\n\n";

    {
        r += "-- classifier held-out balanced accuracy --\n";
        auto rows = parse_csv(read_file(out / "clf_metrics.csv"));
        for (size_t i = 1; i < rows.size(); ++i)
            if (rows[i].size() == 3)
                r += "  clf_" + rows[i][0] + " " + rows[i][1] + ": " +
                     fmt(std::stod(rows[i][2])) + "\n";
        r += "\n";
    }
    {
        auto rows = parse_csv(read_file(out / "backbone_metrics.csv"));
        if (rows.size() > 1 && rows[1].size() >= 2)
            r += "-- backbone --\n  held-out noise MSE / zero predictor: " +
                 fmt(std::stod(rows[1][1])) + "\n\n";
    }
    {
        auto rows = parse_csv(read_file(out / "sae_metrics.csv"));
        if (rows.size() > 1) {
            const auto& last = rows[rows.size() - 1].size() >= 4 ? rows[rows.size() - 1]
                                                                 : rows[rows.size() - 2];
            r += "-- sae (final epoch) --\n  mse " + fmt(std::stod(last[1])) + "  cosine " +
                 fmt(std::stod(last[2])) + "  dar " + fmt(std::stod(last[3])) + "\n\n";
        }
    }
    {
        r += "-- concept alignment (held-out logit gain) --\n";
        auto rows = parse_csv(read_file(out / "align_metrics.csv"));
        for (size_t i = 1; i < rows.size(); ++i)
            if (rows[i].size() >= 2)
                r += "  " + std::string(attribute_name(std::stoi(rows[i][0]))) + ": " +
                     fmt(std::stod(rows[i][1])) + "\n";
        r += "\n";
    }
    {
        r += "-- EPR at the default operating point --\n";
        r += "  concept        recon   random  casl-steer\n";
        auto recon = parse_csv(read_file(out / "eval/epr_recon.csv"));
        auto random = parse_csv(read_file(out / "eval/epr_random.csv"));
        auto ab = nlohmann::json::parse(read_file(out / "eval/ablation.json"));
        for (size_t i = 1; i < recon.size(); ++i) {
            if (recon[i].size() < 8 || random.size() <= i) continue;
            const int cid = std::stoi(recon[i][0]);
            const double steer_epr = ab["epr_clf_a"][attribute_name(cid)]["steer"];
            char line[128];
            std::snprintf(line, sizeof(line), "  %-12s %7.3f  %7.3f  %7.3f\n",
                          attribute_name(cid), std::stod(recon[i][7]),
                          std::stod(random[i][7]), steer_epr);
            r += line;
        }
        r += "\n";
    }
    {
        r += "-- probe accuracy by top-k --\n";
        auto rows = parse_csv(read_file(out / "eval/probe.csv"));
        std::map<int, std::vector<std::pair<int, double>>> by_concept;
        for (size_t i = 1; i < rows.size(); ++i)
            if (rows[i].size() >= 3)
                by_concept[std::stoi(rows[i][0])].push_back(
                    {std::stoi(rows[i][1]), std::stod(rows[i][2])});
        for (const auto& [cid, cells] : by_concept) {
            char head[64];
            std::snprintf(head, sizeof(head), "  %-12s", attribute_name(cid));
            r += head;
            for (const auto& [k, acc] : cells) {
                char cell[48];
                std::snprintf(cell, sizeof(cell), " top-%d %.3f", k, acc);
                r += cell;
            }
            r += "\n";
        }
        r += "\n";
    }
    {
        auto ab = nlohmann::json::parse(read_file(out / "eval/ablation.json"));
        r += "-- EPR sensitivity across classifier seeds --\n";
        for (auto it = ab["rank_agreement"].begin(); it != ab["rank_agreement"].end(); ++it)
            r += "  " + it.key() + ": rank agreement " + fmt(it.value().get<double>()) + "\n";
    }
    return r;
}

} // namespace casl
