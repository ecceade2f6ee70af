// casl: pipeline CLI. Subcommands: run (stages), steer (single-image
// intervention), report (summary tables).
// Exit codes: 0 success, 1 usage/config, 2 stage failure, 3 stale artifacts.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "casl/pipeline.hpp"

namespace {

using namespace casl;

int concept_from_string(const std::string& s) {
    for (int j = 0; j < kNumAttributes; ++j)
        if (s == attribute_name(j)) return j;
    try {
        return std::stoi(s);
    } catch (...) {
        throw config_error("unknown concept '" + s + "'");
    }
}

struct RunArgs {
    std::string config_path;
    std::string out_dir;
    std::string stage = "all";
    uint64_t seed = 0;
    bool seed_set = false;
};

PipelineConfig resolve_config(const RunArgs& args) {
    PipelineConfig cfg;
    if (!args.config_path.empty()) cfg = load_config(args.config_path);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.seed_set) cfg.seed = args.seed;
    return cfg;
}

int cmd_run(const RunArgs& args) {
    PipelineConfig cfg = resolve_config(args);
    if (args.stage == "all") {
        run_all(cfg);
    } else {
        run_stage(cfg, args.stage);
    }
    return 0;
}

int cmd_steer_cli(const std::string& out_dir, const std::string& concept_str, double alpha,
                  int topk, double gamma, int t_edit, const std::string& in_path) {
    const fs::path out = out_dir;
    PipelineConfig cfg = config_from_json(nlohmann::json::parse(read_file(out / "config.json")));
    const int cid = concept_from_string(concept_str);

    Denoiser den = load_denoiser(out / "denoiser");
    SaeModel sae = load_sae(out / "sae");
    ConceptMap map = load_concept(out / ("concept_" + std::to_string(cid)));
    DiffusionSchedule sched = cfg.schedule();

    Array image = read_pgm(in_path);
    SteerConfig sc;
    sc.concept_id = cid;
    sc.alpha = alpha;
    sc.k = topk;
    sc.gamma = gamma;
    sc.t_edit = t_edit >= 0 ? t_edit : cfg.diffusion.t_edit;
    sc.include_bias = cfg.steer.include_bias;
    sc.symmetric = cfg.steer.symmetric;
    SteerResult res = steer(den, sae, map, sched, image, sc);

    const std::string stem = fs::path(in_path).stem().string() + "_" + attribute_name(cid);
    write_pgm(out / (stem + "_original.pgm"), res.original);
    write_pgm(out / (stem + "_steered.pgm"), res.steered);
    std::string trace = "step,t,delta_h_norm\n";
    const auto window = sched.window(sc.t_edit);
    for (size_t w = 0; w < res.trace.size(); ++w)
        trace += std::to_string(w) + "," + std::to_string(window[w]) + "," +
                 csv_num(res.trace[w]) + "\n";
    atomic_write_file(out / (stem + "_trace.csv"), trace);
    std::printf("wrote %s_{original,steered}.pgm and %s_trace.csv under %s\n", stem.c_str(),
                stem.c_str(), out_dir.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"casl: sparse-autoencoder concept alignment on a toy diffusion backbone"};
    app.require_subcommand(1);

    RunArgs run_args;
    CLI::App* run = app.add_subcommand("run", "run pipeline stages");
    run->add_option("--config", run_args.config_path, "pipeline config JSON");
    run->add_option("--out", run_args.out_dir, "output directory (overrides config)");
    run->add_option("--seed", run_args.seed, "global seed (overrides config)")
        ->each([&](const std::string&) { run_args.seed_set = true; });
    run->add_option("--stage", run_args.stage, "stage name or 'all'")
        ->check(CLI::IsMember({"gen-data", "train-clf", "train-backbone", "cache-acts",
                               "train-sae", "align", "steer", "eval", "all"}));

    std::string steer_out, steer_concept, steer_in;
    double steer_alpha = 4.0, steer_gamma = 1.0;
    int steer_topk = 1, steer_t_edit = -1;
    CLI::App* steer_cmd = app.add_subcommand("steer", "steer one image along a trained concept");
    steer_cmd->add_option("--concept", steer_concept, "attribute index or name")->required();
    steer_cmd->add_option("--alpha", steer_alpha, "editing intensity");
    steer_cmd->add_option("--topk", steer_topk, "number of latent dimensions");
    steer_cmd->add_option("--gamma", steer_gamma, "global gain");
    steer_cmd->add_option("--t-edit", steer_t_edit, "window start (default from config)");
    steer_cmd->add_option("--in", steer_in, "input image (binary PGM)")->required();
    steer_cmd->add_option("--out", steer_out, "artifact directory from a completed run")->required();

    std::string report_out;
    CLI::App* report = app.add_subcommand("report", "print summary tables for a completed run");
    report->add_option("--out", report_out, "artifact directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (run->parsed()) return cmd_run(run_args);
        if (steer_cmd->parsed())
            return cmd_steer_cli(steer_out, steer_concept, steer_alpha, steer_topk, steer_gamma,
                                 steer_t_edit, steer_in);
        if (report->parsed()) {
            std::fputs(casl::render_report(report_out).c_str(), stdout);
            return 0;
        }
    } catch (const casl::stale_error& e) {
        std::fprintf(stderr, "casl: %s\n", e.what());
        return 3;
    } catch (const casl::config_error& e) {
        std::fprintf(stderr, "casl: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "casl: %s\n", e.what());
        return 2;
    }
    return 1;
}
