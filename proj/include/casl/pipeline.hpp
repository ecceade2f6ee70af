#pragma once

// End-to-end orchestration: strict JSON config, stage execution with
// manifest-based resume/staleness checks, model persistence in casl-ckpt-v1
// containers, and the plain-text report.

#include <cinttypes>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "casl/align.hpp"
#include "casl/checkpoint.hpp"
#include "casl/classifier.hpp"
#include "casl/core.hpp"
#include "casl/diffusion.hpp"
#include "casl/eval.hpp"
#include "casl/sae.hpp"
#include "casl/steer.hpp"
#include "casl/synth.hpp"

namespace casl {

struct missing_upstream_error : error {
    using error::error;
};

// ----------------------------- config -----------------------------

inline constexpr const char* kConfigVersion = "casl-config-v1";

struct PipelineConfig {
    uint64_t seed = 7;
    std::string out_dir = "out";

    struct Corpus {
        int n = 2000;
        int image_size = 32;
    } corpus;

    struct Classifier {
        int epochs = 20;
        double lr = 1e-3;
        int batch = 64;
        double min_accuracy = 0.9;
    } classifier;

    struct Diffusion {
        int timesteps = 100;
        int t_edit = 50;
        int grid_size = 50;
        int epochs = 30;
        double lr = 1e-3;
        int batch = 32;
        double max_mse_ratio = 0.5;
        int c1 = 8;
        int c2 = 16;
        int channels = 32;
        int temb_dim = 32;
    } diffusion;

    struct Cache {
        int h_images = 1280; // probe + SAE pool
        int x_images = 256;  // align pool
    } cache;

    struct Sae {
        int expansion = 8;
        double lambda_sparse = 2.0;
        double lr = 5e-4;
        int epochs = 100;
        int batch_maps = 64;
        int cache_images = 256;
        double tau = 0.01;
    } sae;

    struct Align {
        double lambda_sem = 1.0;
        double lambda_recon = 3.0;
        double margin = 2.0;
        std::vector<int> concepts = {0, 1, 2};
        int epochs = 100;
        double lr = 0.1;
        int images = 256;
        int batch = 16;
    } align;

    struct Steer {
        std::vector<double> alpha_grid = {0, 1, 2, 4, 8};
        std::vector<int> k_grid = {1, 16};
        double gamma = 1.0;
        double default_alpha = 4.0;
        int default_k = 1;
        bool include_bias = false;
        bool symmetric = false;
        int demo_images = 4;
    } steer;

    struct Eval {
        int probe_per_class = 400;
        int eval_images = 24;
        std::vector<int> probe_topk = {1, 2, 4, 8, 16};
    } eval;

    DenoiserConfig denoiser_config() const {
        return {corpus.image_size, diffusion.c1, diffusion.c2, diffusion.channels,
                diffusion.temb_dim};
    }
    DiffusionSchedule schedule() const {
        return DiffusionSchedule::make(diffusion.timesteps, diffusion.grid_size);
    }
    uint64_t stage_seed(const std::string& stage) const { return fnv1a64(stage, seed); }
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                        const std::string& where) {
    if (!j.is_object()) throw config_error("config: " + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw config_error("config: unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read_into(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace detail

inline nlohmann::json config_to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["version"] = kConfigVersion;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["corpus"] = {{"n", c.corpus.n}, {"image_size", c.corpus.image_size}};
    j["classifier"] = {{"epochs", c.classifier.epochs},
                       {"lr", c.classifier.lr},
                       {"batch", c.classifier.batch},
                       {"min_accuracy", c.classifier.min_accuracy}};
    j["diffusion"] = {{"timesteps", c.diffusion.timesteps}, {"t_edit", c.diffusion.t_edit},
                      {"grid_size", c.diffusion.grid_size}, {"epochs", c.diffusion.epochs},
                      {"lr", c.diffusion.lr},               {"batch", c.diffusion.batch},
                      {"max_mse_ratio", c.diffusion.max_mse_ratio},
                      {"c1", c.diffusion.c1},               {"c2", c.diffusion.c2},
                      {"channels", c.diffusion.channels},   {"temb_dim", c.diffusion.temb_dim}};
    j["cache"] = {{"h_images", c.cache.h_images}, {"x_images", c.cache.x_images}};
    j["sae"] = {{"expansion", c.sae.expansion},   {"lambda_sparse", c.sae.lambda_sparse},
                {"lr", c.sae.lr},                 {"epochs", c.sae.epochs},
                {"batch_maps", c.sae.batch_maps}, {"cache_images", c.sae.cache_images},
                {"tau", c.sae.tau}};
    j["align"] = {{"lambda_sem", c.align.lambda_sem}, {"lambda_recon", c.align.lambda_recon},
                  {"margin", c.align.margin},         {"concepts", c.align.concepts},
                  {"epochs", c.align.epochs},         {"lr", c.align.lr},
                  {"images", c.align.images},         {"batch", c.align.batch}};
    j["steer"] = {{"alpha_grid", c.steer.alpha_grid},
                  {"k_grid", c.steer.k_grid},
                  {"gamma", c.steer.gamma},
                  {"default_alpha", c.steer.default_alpha},
                  {"default_k", c.steer.default_k},
                  {"include_bias", c.steer.include_bias},
                  {"symmetric", c.steer.symmetric},
                  {"demo_images", c.steer.demo_images}};
    j["eval"] = {{"probe_per_class", c.eval.probe_per_class},
                 {"eval_images", c.eval.eval_images},
                 {"probe_topk", c.eval.probe_topk}};
    return j;
}

/// Strict parse: the version field is required and unknown keys are errors.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
    using detail::expect_keys;
    using detail::read_into;
    expect_keys(j, {"version", "seed", "out_dir", "corpus", "classifier", "diffusion", "cache",
                    "sae", "align", "steer", "eval"},
                "top level");
    if (!j.contains("version") || j.at("version") != kConfigVersion)
        throw config_error("config: missing or unsupported version (want casl-config-v1)");
    PipelineConfig c;
    read_into(j, "seed", c.seed);
    read_into(j, "out_dir", c.out_dir);
    if (j.contains("corpus")) {
        const auto& s = j.at("corpus");
        expect_keys(s, {"n", "image_size"}, "corpus");
        read_into(s, "n", c.corpus.n);
        read_into(s, "image_size", c.corpus.image_size);
    }
    if (j.contains("classifier")) {
        const auto& s = j.at("classifier");
        expect_keys(s, {"epochs", "lr", "batch", "min_accuracy"}, "classifier");
        read_into(s, "epochs", c.classifier.epochs);
        read_into(s, "lr", c.classifier.lr);
        read_into(s, "batch", c.classifier.batch);
        read_into(s, "min_accuracy", c.classifier.min_accuracy);
    }
    if (j.contains("diffusion")) {
        const auto& s = j.at("diffusion");
        expect_keys(s, {"timesteps", "t_edit", "grid_size", "epochs", "lr", "batch",
                        "max_mse_ratio", "c1", "c2", "channels", "temb_dim"},
                    "diffusion");
        read_into(s, "timesteps", c.diffusion.timesteps);
        read_into(s, "t_edit", c.diffusion.t_edit);
        read_into(s, "grid_size", c.diffusion.grid_size);
        read_into(s, "epochs", c.diffusion.epochs);
        read_into(s, "lr", c.diffusion.lr);
        read_into(s, "batch", c.diffusion.batch);
        read_into(s, "max_mse_ratio", c.diffusion.max_mse_ratio);
        read_into(s, "c1", c.diffusion.c1);
        read_into(s, "c2", c.diffusion.c2);
        read_into(s, "channels", c.diffusion.channels);
        read_into(s, "temb_dim", c.diffusion.temb_dim);
    }
    if (j.contains("cache")) {
        const auto& s = j.at("cache");
        expect_keys(s, {"h_images", "x_images"}, "cache");
        read_into(s, "h_images", c.cache.h_images);
        read_into(s, "x_images", c.cache.x_images);
    }
    if (j.contains("sae")) {
        const auto& s = j.at("sae");
        expect_keys(s, {"expansion", "lambda_sparse", "lr", "epochs", "batch_maps",
                        "cache_images", "tau"},
                    "sae");
        read_into(s, "expansion", c.sae.expansion);
        read_into(s, "lambda_sparse", c.sae.lambda_sparse);
        read_into(s, "lr", c.sae.lr);
        read_into(s, "epochs", c.sae.epochs);
        read_into(s, "batch_maps", c.sae.batch_maps);
        read_into(s, "cache_images", c.sae.cache_images);
        read_into(s, "tau", c.sae.tau);
    }
    if (j.contains("align")) {
        const auto& s = j.at("align");
        expect_keys(s, {"lambda_sem", "lambda_recon", "margin", "concepts", "epochs", "lr",
                        "images", "batch"},
                    "align");
        read_into(s, "lambda_sem", c.align.lambda_sem);
        read_into(s, "lambda_recon", c.align.lambda_recon);
        read_into(s, "margin", c.align.margin);
        read_into(s, "concepts", c.align.concepts);
        read_into(s, "epochs", c.align.epochs);
        read_into(s, "lr", c.align.lr);
        read_into(s, "images", c.align.images);
        read_into(s, "batch", c.align.batch);
    }
    if (j.contains("steer")) {
        const auto& s = j.at("steer");
        expect_keys(s, {"alpha_grid", "k_grid", "gamma", "default_alpha", "default_k",
                        "include_bias", "symmetric", "demo_images"},
                    "steer");
        read_into(s, "alpha_grid", c.steer.alpha_grid);
        read_into(s, "k_grid", c.steer.k_grid);
        read_into(s, "gamma", c.steer.gamma);
        read_into(s, "default_alpha", c.steer.default_alpha);
        read_into(s, "default_k", c.steer.default_k);
        read_into(s, "include_bias", c.steer.include_bias);
        read_into(s, "symmetric", c.steer.symmetric);
        read_into(s, "demo_images", c.steer.demo_images);
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        expect_keys(s, {"probe_per_class", "eval_images", "probe_topk"}, "eval");
        read_into(s, "probe_per_class", c.eval.probe_per_class);
        read_into(s, "eval_images", c.eval.eval_images);
        read_into(s, "probe_topk", c.eval.probe_topk);
    }
    return c;
}

inline PipelineConfig load_config(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline uint64_t config_hash(const PipelineConfig& c) {
    return fnv1a64(config_to_json(c).dump());
}

// ----------------------------- stage bookkeeping -----------------------------

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"gen-data",  "train-clf", "train-backbone",
                                                   "cache-acts", "train-sae", "align",
                                                   "steer",      "eval"};
    return names;
}

inline std::vector<std::string> stage_upstreams(const std::string& stage) {
    if (stage == "gen-data") return {};
    if (stage == "train-clf") return {"gen-data"};
    if (stage == "train-backbone") return {"gen-data"};
    if (stage == "cache-acts") return {"gen-data", "train-backbone"};
    if (stage == "train-sae") return {"cache-acts"};
    if (stage == "align") return {"gen-data", "train-clf", "train-backbone", "cache-acts", "train-sae"};
    if (stage == "steer") return {"gen-data", "train-backbone", "train-sae", "align"};
    if (stage == "eval") return {"gen-data", "train-clf", "train-backbone", "cache-acts",
                                 "train-sae", "align"};
    throw contract_error("unknown stage: " + stage);
}

inline std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

inline fs::path manifest_path(const fs::path& out, const std::string& stage) {
    return out / ("manifest_" + stage + ".json");
}

/// RAII advisory lock on the output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& out) : path_(out / ".casl.lock") {
        fs::create_directories(out);
        if (fs::exists(path_))
            throw io_error("output directory is locked by another run; remove " + path_.string() +
                           " if that run is gone");
        atomic_write_file(path_, std::to_string(static_cast<long>(::getpid())) + "\n");
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

struct StageContext {
    const PipelineConfig& cfg;
    fs::path out;
    uint64_t cfg_hash;
    nlohmann::json artifacts = nlohmann::json::array(); // filled by the stage body

    void record(const fs::path& rel_path) {
        const fs::path full = out / rel_path;
        const std::string bytes = read_file(full);
        artifacts.push_back({{"path", rel_path.generic_string()},
                             {"fnv64", hex64(fnv1a64(bytes.data(), bytes.size()))}});
    }
};

inline void check_upstreams(const PipelineConfig& cfg, const fs::path& out,
                            const std::string& stage) {
    for (const std::string& up : stage_upstreams(stage)) {
        const fs::path mp = manifest_path(out, up);
        if (!fs::exists(mp))
            throw missing_upstream_error("stage '" + stage + "' needs artifacts from '" + up +
                                         "'; run stage " + up + " first");
        nlohmann::json m = nlohmann::json::parse(read_file(mp));
        if (m.value("config_hash", "") != hex64(config_hash(cfg)))
            throw stale_error("stage '" + up + "' artifacts were built from a different config; "
                              "use a fresh output directory or rerun the pipeline");
    }
}

inline bool stage_up_to_date(const PipelineConfig& cfg, const fs::path& out,
                             const std::string& stage) {
    const fs::path mp = manifest_path(out, stage);
    if (!fs::exists(mp)) return false;
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_file(mp));
    } catch (...) {
        return false;
    }
    return m.value("config_hash", "") == hex64(config_hash(cfg));
}

inline void write_manifest(StageContext& ctx, const std::string& stage) {
    nlohmann::json m;
    m["version"] = "casl-manifest-v1";
    m["stage"] = stage;
    m["config_hash"] = hex64(ctx.cfg_hash);
    nlohmann::json up = nlohmann::json::object();
    for (const std::string& u : stage_upstreams(stage)) {
        nlohmann::json um = nlohmann::json::parse(read_file(manifest_path(ctx.out, u)));
        up[u] = um.value("artifacts", nlohmann::json::array());
    }
    m["upstream"] = up;
    m["artifacts"] = ctx.artifacts;
    atomic_write_file(manifest_path(ctx.out, stage), m.dump(2) + "\n");
}

// ----------------------------- model persistence -----------------------------

inline void save_corpus(const std::vector<LabeledImage>& corpus, const fs::path& stem) {
    const int n = static_cast<int>(corpus.size());
    const int s = corpus.front().pixels.shape[0];
    Array pixels({n, s, s});
    Array labels({n, kNumAttributes});
    Array factors({n, 7});
    for (int i = 0; i < n; ++i) {
        const auto& im = corpus[static_cast<size_t>(i)];
        std::copy(im.pixels.data.begin(), im.pixels.data.end(),
                  pixels.data.begin() + static_cast<size_t>(i) * s * s);
        for (int j = 0; j < kNumAttributes; ++j)
            labels.data[static_cast<size_t>(i) * kNumAttributes + j] = im.labels[static_cast<size_t>(j)];
        const SceneSpec& sp = im.spec;
        const double f[7] = {sp.radius, sp.pos_x, sp.pos_y, sp.rotation,
                             sp.fg_intensity, sp.stripe_freq, sp.bg_intensity};
        for (int j = 0; j < 7; ++j) factors.data[static_cast<size_t>(i) * 7 + j] = f[j];
    }
    Checkpoint ck;
    ck.meta["kind"] = "corpus";
    ck.meta["n"] = n;
    ck.meta["image_size"] = s;
    ck.add("pixels", pixels);
    ck.add("labels", labels);
    ck.add("factors", factors);
    ck.save(stem);
}

inline std::vector<LabeledImage> load_corpus(const fs::path& stem) {
    Checkpoint ck = Checkpoint::load(stem);
    const Array& pixels = ck.get("pixels");
    const Array& labels = ck.get("labels");
    const Array& factors = ck.get("factors");
    const int n = pixels.shape[0], s = pixels.shape[1];
    std::vector<LabeledImage> corpus(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        LabeledImage im;
        im.pixels = Array({s, s});
        std::copy(pixels.data.begin() + static_cast<size_t>(i) * s * s,
                  pixels.data.begin() + static_cast<size_t>(i + 1) * s * s, im.pixels.data.begin());
        for (int j = 0; j < kNumAttributes; ++j)
            im.labels.push_back(static_cast<int>(labels.data[static_cast<size_t>(i) * kNumAttributes + j]));
        const double* f = &factors.data[static_cast<size_t>(i) * 7];
        im.spec = {s, f[0], f[1], f[2], f[3], f[4], f[5], f[6]};
        corpus[static_cast<size_t>(i)] = std::move(im);
    }
    return corpus;
}

inline void save_classifier(const AttributeClassifier& clf, const fs::path& stem) {
    Checkpoint ck;
    ck.meta["kind"] = "classifier";
    ck.meta["image_size"] = clf.cfg.image_size;
    ck.meta["c1"] = clf.cfg.c1;
    ck.meta["c2"] = clf.cfg.c2;
    ck.meta["n_attr"] = clf.cfg.n_attr;
    ck.meta["seed"] = clf.seed;
    ck.add("conv1.w", clf.p.conv1.w);
    ck.add("conv1.b", clf.p.conv1.b);
    ck.add("conv2.w", clf.p.conv2.w);
    ck.add("conv2.b", clf.p.conv2.b);
    ck.add("head.w", clf.p.head.w);
    ck.add("head.b", clf.p.head.b);
    ck.save(stem);
}

inline AttributeClassifier load_classifier(const fs::path& stem) {
    Checkpoint ck = Checkpoint::load(stem);
    AttributeClassifier clf;
    clf.cfg = {ck.meta.at("image_size"), ck.meta.at("c1"), ck.meta.at("c2"), ck.meta.at("n_attr")};
    clf.seed = ck.meta.at("seed");
    Rng rng(0);
    clf.p = ClassifierParams::init(clf.cfg, rng);
    clf.p.conv1.w = ck.get("conv1.w");
    clf.p.conv1.b = ck.get("conv1.b");
    clf.p.conv2.w = ck.get("conv2.w");
    clf.p.conv2.b = ck.get("conv2.b");
    clf.p.head.w = ck.get("head.w");
    clf.p.head.b = ck.get("head.b");
    return clf;
}

inline void save_denoiser(const Denoiser& den, const fs::path& stem) {
    Checkpoint ck;
    ck.meta["kind"] = "denoiser";
    ck.meta["image_size"] = den.cfg.image_size;
    ck.meta["c1"] = den.cfg.c1;
    ck.meta["c2"] = den.cfg.c2;
    ck.meta["channels"] = den.cfg.channels;
    ck.meta["temb_dim"] = den.cfg.temb_dim;
    ck.meta["seed"] = den.seed;
    DenoiserParams::for_each(const_cast<DenoiserParams&>(den.p),
                             [&](const char* name, Array& a) { ck.add(name, a); });
    ck.save(stem);
}

inline Denoiser load_denoiser(const fs::path& stem) {
    Checkpoint ck = Checkpoint::load(stem);
    Denoiser den;
    den.cfg = {ck.meta.at("image_size"), ck.meta.at("c1"), ck.meta.at("c2"),
               ck.meta.at("channels"), ck.meta.at("temb_dim")};
    den.seed = ck.meta.at("seed");
    Rng rng(0);
    den.p = DenoiserParams::init(den.cfg, rng);
    DenoiserParams::for_each(den.p, [&](const char* name, Array& a) { a = ck.get(name); });
    return den;
}

inline void save_sae(const SaeModel& m, const fs::path& stem) {
    Checkpoint ck;
    ck.meta["kind"] = "sae";
    ck.meta["channels"] = m.cfg.channels;
    ck.meta["expansion"] = m.cfg.expansion;
    ck.meta["lambda_sparse"] = m.cfg.lambda_sparse;
    ck.meta["window_grid"] = m.cfg.window_grid;
    ck.meta["seed"] = m.seed;
    ck.add("w_enc", m.p.w_enc);
    ck.add("b_lat", m.p.b_lat);
    ck.add("w_dec", m.p.w_dec);
    ck.add("b_pre", m.p.b_pre);
    ck.add("temb", m.p.temb);
    ck.save(stem);
}

inline SaeModel load_sae(const fs::path& stem) {
    Checkpoint ck = Checkpoint::load(stem);
    SaeModel m;
    m.cfg.channels = ck.meta.at("channels");
    m.cfg.expansion = ck.meta.at("expansion");
    m.cfg.lambda_sparse = ck.meta.at("lambda_sparse");
    m.cfg.window_grid = ck.meta.at("window_grid").get<std::vector<int>>();
    m.seed = ck.meta.at("seed");
    m.p.w_enc = ck.get("w_enc");
    m.p.b_lat = ck.get("b_lat");
    m.p.w_dec = ck.get("w_dec");
    m.p.b_pre = ck.get("b_pre");
    m.p.temb = ck.get("temb");
    return m;
}

inline void save_concept(const ConceptMap& map, const fs::path& stem) {
    Checkpoint ck;
    ck.meta["kind"] = "concept";
    ck.meta["concept_id"] = map.concept_id;
    ck.meta["lambda_sem"] = map.lambda_sem;
    ck.meta["lambda_recon"] = map.lambda_recon;
    ck.meta["margin"] = map.margin;
    ck.meta["sae_id"] = hex64(map.sae_ref);
    ck.meta["denoiser_id"] = hex64(map.denoiser_ref);
    ck.meta["classifier_id"] = hex64(map.classifier_ref);
    ck.add("w", map.w);
    ck.add("b", map.b);
    ck.save(stem);
}

inline ConceptMap load_concept(const fs::path& stem) {
    Checkpoint ck = Checkpoint::load(stem);
    ConceptMap map;
    map.concept_id = ck.meta.at("concept_id");
    map.lambda_sem = ck.meta.at("lambda_sem");
    map.lambda_recon = ck.meta.at("lambda_recon");
    map.margin = ck.meta.at("margin");
    map.sae_ref = std::stoull(ck.meta.at("sae_id").get<std::string>(), nullptr, 16);
    map.denoiser_ref = std::stoull(ck.meta.at("denoiser_id").get<std::string>(), nullptr, 16);
    map.classifier_ref = std::stoull(ck.meta.at("classifier_id").get<std::string>(), nullptr, 16);
    map.w = ck.get("w");
    map.b = ck.get("b");
    return map;
}

inline std::string act_entry_name(int64_t image, int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img%06" PRId64 "/t%03d", image, t);
    return buf;
}

} // namespace casl

#include "casl/stages.hpp"
