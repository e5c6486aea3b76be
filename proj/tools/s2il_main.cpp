// Experiment runner CLI: dataset generation, run orchestration, and report
// printing over a finished run directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "s2il/config.hpp"
#include "s2il/dataset.hpp"
#include "s2il/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int cmd_gen_data(const std::string& config_path, std::string out_path) {
    const s2il::ExperimentConfig cfg = s2il::load_config(config_path);
    if (out_path.empty()) out_path = cfg.data_path.empty() ? "dataset.s2il" : cfg.data_path;
    const s2il::Dataset ds = s2il::generate_synthetic(
        cfg.data_classes, cfg.data_per_class, cfg.data_image_size, cfg.data_seed,
        cfg.data_channels);
    s2il::save_dataset(ds, out_path);
    std::printf("wrote %zu samples (%zu train / %zu test, %zu classes) to %s\n",
                ds.sample_count(), ds.indices(false).size(), ds.indices(true).size(),
                ds.class_count, out_path.c_str());
    return kExitOk;
}

int cmd_run(const std::string& config_path, std::uint64_t seed_override, bool has_seed,
            std::string out_dir, const std::string& mode_override, bool oracle) {
    s2il::ExperimentConfig cfg = s2il::load_config(config_path);
    if (has_seed) cfg.seeds = {seed_override};
    if (!mode_override.empty()) {
        cfg.train.mode = s2il::parse_mode(mode_override);
        cfg.sweep_modes.clear();
    }
    if (oracle) cfg.train.oracle = true;
    if (!out_dir.empty()) cfg.out_dir = out_dir;

    std::filesystem::create_directories(cfg.out_dir);
    std::string checkpoint_dir;
    if (cfg.checkpoints) {
        checkpoint_dir = cfg.out_dir + "/checkpoints";
        std::filesystem::create_directories(checkpoint_dir);
    }

    const s2il::Dataset ds = s2il::materialize_dataset(cfg);
    const s2il::ExperimentResult res = s2il::run_experiment(cfg, ds, checkpoint_dir);
    s2il::write_reports(res, cfg.out_dir);

    for (const auto& rr : res.runs)
        std::printf("%-32s seed=%llu  AIA=%6.2f  BT=%7.2f  Fgt=%6.2f  (%.1fs)\n",
                    rr.point.label.c_str(), static_cast<unsigned long long>(rr.seed), rr.aia,
                    rr.bt, rr.fgt, rr.seconds);
    if (!res.ok()) {
        std::fprintf(stderr, "run failed: %s\n", res.error.c_str());
        return kExitRuntime;
    }
    std::printf("reports written to %s\n", cfg.out_dir.c_str());
    return kExitOk;
}

int cmd_report(const std::string& out_dir) {
    const std::string path = out_dir + "/manifest.json";
    std::ifstream f(path);
    if (!f) {
        std::fprintf(stderr, "no manifest at %s\n", path.c_str());
        return kExitRuntime;
    }
    nlohmann::json m;
    f >> m;
    if (m.value("failed", false))
        std::printf("status: FAILED (%s)\n", m.value("error", std::string("?")).c_str());
    std::printf("%-32s %4s %8s %8s %8s\n", "run", "seed", "AIA", "BT", "Fgt");
    for (const auto& r : m["runs"])
        std::printf("%-32s %4llu %8.2f %8.2f %8.2f\n",
                    r["label"].get<std::string>().c_str(),
                    static_cast<unsigned long long>(r["seed"].get<std::uint64_t>()),
                    r["metrics"]["aia"].get<double>(), r["metrics"]["bt"].get<double>(),
                    r["metrics"]["fgt"].get<double>());
    std::printf("\n%-32s %5s %16s %16s %16s\n", "aggregate", "seeds", "AIA", "BT", "Fgt");
    for (const auto& a : m["aggregates"])
        std::printf("%-32s %5zu %8.2f±%-6.2f %8.2f±%-6.2f %8.2f±%-6.2f\n",
                    a["label"].get<std::string>().c_str(), a["seeds"].get<std::size_t>(),
                    a["aia_mean"].get<double>(), a["aia_std"].get<double>(),
                    a["bt_mean"].get<double>(), a["bt_std"].get<double>(),
                    a["fgt_mean"].get<double>(), a["fgt_std"].get<double>());
    bool any_dev = false;
    for (const auto& r : m["runs"]) {
        if (!r.contains("oracle_deviation")) continue;
        if (!any_dev) {
            std::printf("\nper-class deviation from Oracle (D_l):\n");
            any_dev = true;
        }
        std::printf("%-32s seed=%llu:", r["label"].get<std::string>().c_str(),
                    static_cast<unsigned long long>(r["seed"].get<std::uint64_t>()));
        for (const auto& [cls, d] : r["oracle_deviation"].items())
            std::printf("  c%s=%.3f", cls.c_str(), d["value"].get<double>());
        std::printf("\n");
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"S2IL continual-learning laboratory"};
    app.require_subcommand(1);

    std::string config_path, out, mode;
    std::uint64_t seed = 0;
    bool oracle = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    gen->add_option("--config", config_path, "experiment config file")->required();
    gen->add_option("--out", out, "output dataset path (default: data.path from config)");

    auto* run = app.add_subcommand("run", "run the configured experiment");
    run->add_option("--config", config_path, "experiment config file")->required();
    auto* seed_opt = run->add_option("--seed", seed, "override run.seeds with one seed");
    run->add_option("--out", out, "override output directory");
    run->add_option("--mode", mode, "override distillation mode (none|eq1|eq2|s2il)");
    run->add_flag("--oracle", oracle, "train with full past data and no distillation");

    auto* report = app.add_subcommand("report", "summarize a finished run directory");
    report->add_option("--out", out, "run directory containing manifest.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out);
        if (run->parsed())
            return cmd_run(config_path, seed, seed_opt->count() > 0, out, mode, oracle);
        if (report->parsed()) return cmd_report(out);
    } catch (const s2il::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitConfig;
}
