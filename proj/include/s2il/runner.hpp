#pragma once

// Experiment orchestration: sweep-grid expansion, per-seed runs (optionally in
// parallel worker threads, capped by S2IL_THREADS), Oracle baselines, and
// report emission (JSON manifest + RFC-4180 CSVs).

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "s2il/config.hpp"
#include "s2il/dataset.hpp"
#include "s2il/engine.hpp"
#include "s2il/exemplar.hpp"
#include "s2il/metrics.hpp"
#include "s2il/net.hpp"
#include "s2il/stream.hpp"

namespace s2il {

// Seed used for the pre-training model of a run; exposed so tooling can verify
// sweep isolation by recomputing the initial checksum.
inline Model seeded_initial_model(const NetConfig& net, std::uint64_t run_seed) {
    return Model::init(net, mix_seed(run_seed, 0xA110C, 0));
}

struct PointSpec {
    std::string label;
    DistillMode mode = DistillMode::s2il;
    SSIMParams ssim;
    bool oracle = false;
};

struct RunResult {
    PointSpec point;
    std::uint64_t seed = 0;
    RunRecord record;
    double aia = 0.0, bt = 0.0, fgt = 0.0;
    std::vector<double> lambdas;                  // per task
    std::vector<std::uint64_t> checkpoint_sums;   // per task, fnv1a64 of the snapshot
    std::uint64_t initial_sum = 0;
    std::map<int, OracleDeviation> deviations;    // base class -> D_l
    std::vector<int> deviation_skipped;           // classes with no usable channel
    double seconds = 0.0;
};

struct ExperimentResult {
    ExperimentConfig cfg;
    std::string error;  // empty on success
    std::uint64_t dataset_fingerprint = 0;
    std::vector<int> class_order;
    std::vector<RunResult> runs;

    bool ok() const { return error.empty(); }

    const RunResult* find(const std::string& label, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.point.label == label && r.seed == seed) return &r;
        return nullptr;
    }
};

inline std::uint64_t dataset_fingerprint(const Dataset& ds) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(ds.pixels.size() * 4 + ds.labels.size() * 3);
    for (std::uint16_t l : ds.labels) {
        bytes.push_back(static_cast<std::uint8_t>(l & 0xff));
        bytes.push_back(static_cast<std::uint8_t>(l >> 8));
    }
    bytes.insert(bytes.end(), ds.is_test.begin(), ds.is_test.end());
    const auto* raw = reinterpret_cast<const std::uint8_t*>(ds.pixels.data());
    bytes.insert(bytes.end(), raw, raw + ds.pixels.size() * sizeof(float));
    return fnv1a64(bytes);
}

namespace detail {

inline SSIMParams apply_components(SSIMParams base, const std::string& comp) {
    base.use_l = comp.find('l') != std::string::npos;
    base.use_c = comp.find('c') != std::string::npos;
    base.use_s = comp.find('s') != std::string::npos;
    return base;
}

inline std::string components_of(const SSIMParams& s) {
    std::string out;
    if (s.use_l) out += 'l';
    if (s.use_c) out += 'c';
    if (s.use_s) out += 's';
    return out;
}

inline std::string sanitize(const std::string& s) {
    std::string out;
    for (char ch : s)
        out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.')
                   ? ch
                   : '_';
    return out;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        out += ch;
        if (ch == '"') out += '"';
    }
    out += '"';
    return out;
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

// The sweep grid: distillation modes x SSIM exponents x component subsets.
// Axes left empty in the config contribute the base value only.
inline std::vector<PointSpec> expand_sweep(const ExperimentConfig& cfg) {
    const std::vector<std::string> modes =
        cfg.sweep_modes.empty() ? std::vector<std::string>{to_string(cfg.train.mode)}
                                : cfg.sweep_modes;
    const std::vector<double> ps = cfg.sweep_p.empty() ? std::vector<double>{cfg.ssim.p}
                                                       : cfg.sweep_p;
    const std::vector<double> qs = cfg.sweep_q.empty() ? std::vector<double>{cfg.ssim.q}
                                                       : cfg.sweep_q;
    const std::vector<double> rs = cfg.sweep_r.empty() ? std::vector<double>{cfg.ssim.r}
                                                       : cfg.sweep_r;
    const std::vector<std::string> comps =
        cfg.sweep_components.empty()
            ? std::vector<std::string>{detail::components_of(cfg.ssim)}
            : cfg.sweep_components;

    std::vector<PointSpec> points;
    for (const auto& mode : modes)
        for (double p : ps)
            for (double q : qs)
                for (double r : rs)
                    for (const auto& comp : comps) {
                        PointSpec pt;
                        pt.mode = parse_mode(mode);
                        pt.oracle = cfg.train.oracle;
                        pt.ssim = detail::apply_components(cfg.ssim, comp);
                        pt.ssim.p = p;
                        pt.ssim.q = q;
                        pt.ssim.r = r;
                        std::ostringstream label;
                        label << "mode=" << mode;
                        if (!cfg.sweep_p.empty()) label << ",p=" << p;
                        if (!cfg.sweep_q.empty()) label << ",q=" << q;
                        if (!cfg.sweep_r.empty()) label << ",r=" << r;
                        if (!cfg.sweep_components.empty()) label << ",comp=" << comp;
                        if (pt.oracle) label << ",oracle";
                        pt.label = label.str();
                        points.push_back(std::move(pt));
                    }
    return points;
}

inline Dataset materialize_dataset(const ExperimentConfig& cfg) {
    if (cfg.data_source == "file") {
        if (cfg.data_path.empty()) throw ConfigError("config: data.path required for file source");
        return load_dataset(cfg.data_path);
    }
    return generate_synthetic(cfg.data_classes, cfg.data_per_class, cfg.data_image_size,
                              cfg.data_seed, cfg.data_channels);
}

inline std::size_t thread_cap_from_env() {
    const char* env = std::getenv("S2IL_THREADS");
    if (env == nullptr) return 1;
    const long v = std::strtol(env, nullptr, 10);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
}

// Runs the whole experiment (every sweep point x every seed, plus the Oracle
// baseline per seed when requested). On a job failure the completed runs are
// kept and the error recorded so reports can be flushed with a failed marker.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg_in, const Dataset& ds,
                                       const std::string& checkpoint_dir = "") {
    if (ds.height != ds.width)
        throw ContractError("run_experiment: only square images are supported");
    ExperimentConfig cfg = cfg_in;
    // the dataset is authoritative for the input geometry
    cfg.net.input_size = ds.height;
    cfg.net.input_channels = ds.channels;
    ExperimentResult result;
    result.cfg = cfg_in;
    result.dataset_fingerprint = dataset_fingerprint(ds);

    const TaskStream stream =
        build_stream(ds, cfg.base_classes(), cfg.stream_increment, cfg.order_seed);
    result.class_order = stream.class_order;

    std::vector<PointSpec> points = expand_sweep(cfg);
    if (cfg.oracle_baseline && !cfg.train.oracle) {
        PointSpec oracle;
        oracle.label = "oracle";
        oracle.mode = DistillMode::none;
        oracle.oracle = true;
        oracle.ssim = cfg.ssim;
        points.push_back(std::move(oracle));
    }

    struct Job {
        PointSpec point;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& pt : points)
        for (std::uint64_t seed : cfg.seeds) jobs.push_back({pt, seed});

    std::vector<RunResult> results(jobs.size());
    std::vector<std::string> failures(jobs.size());

    auto run_job = [&](std::size_t idx) {
        const Job& job = jobs[idx];
        RunResult rr;
        rr.point = job.point;
        rr.seed = job.seed;
        const auto start = std::chrono::steady_clock::now();

        TrainConfig tc = cfg.train;
        tc.seed = job.seed;
        tc.mode = job.point.mode;
        tc.oracle = job.point.oracle;
        std::optional<FDWeights> fdw;
        if (tc.mode == DistillMode::eq2 && !cfg.fd_weights_file.empty())
            fdw = load_fd_weights(cfg.fd_weights_file, cfg.net.channels);

        rr.initial_sum = fnv1a64(model_to_bytes(seeded_initial_model(cfg.net, job.seed)));

        Trainer trainer(ds, stream, cfg.net, tc, job.point.ssim, fdw);
        trainer.collect_gradcam = cfg.gradcam;

        ExemplarStore store = cfg.exemplar_policy == "m1"
                                  ? ExemplarStore::per_class(cfg.exemplar_per_class,
                                                             cfg.exemplar_normalize)
                                  : ExemplarStore::total_budget(cfg.exemplar_budget,
                                                                cfg.exemplar_normalize);

        auto sink = [&](std::size_t t, const Model& m) {
            const auto bytes = model_to_bytes(m);
            rr.checkpoint_sums.push_back(fnv1a64(bytes));
            if (!checkpoint_dir.empty()) {
                const std::string name = detail::sanitize(job.point.label) + "_seed" +
                                         std::to_string(job.seed) + "_task" +
                                         std::to_string(t) + ".s2sn";
                std::ofstream f(checkpoint_dir + "/" + name, std::ios::binary);
                f.write(reinterpret_cast<const char*>(bytes.data()),
                        static_cast<std::streamsize>(bytes.size()));
            }
        };
        rr.record = trainer.run_stream(store, sink);
        rr.record.config_text = config_to_text(cfg);
        rr.aia = aia(rr.record);
        rr.bt = bt(rr.record);
        rr.fgt = fgt(rr.record);
        for (const auto& d : trainer.diagnostics()) rr.lambdas.push_back(d.lambda);
        rr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                         .count();
        results[idx] = std::move(rr);
    };

    const std::size_t threads = std::min(thread_cap_from_env(), jobs.size());
    if (threads <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            try {
                run_job(i);
            } catch (const std::exception& e) {
                failures[i] = e.what();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                try {
                    run_job(i);
                } catch (const std::exception& e) {
                    failures[i] = e.what();
                }
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (!failures[i].empty()) {
            result.error = "run '" + jobs[i].point.label + "' seed " +
                           std::to_string(jobs[i].seed) + ": " + failures[i];
            break;
        }
        result.runs.push_back(std::move(results[i]));
    }

    // Per-class deviation of each non-Oracle run from the same-seed Oracle.
    if (cfg.gradcam) {
        for (RunResult& rr : result.runs) {
            if (rr.point.oracle) continue;
            const RunResult* oracle = nullptr;
            for (const auto& other : result.runs)
                if (other.point.oracle && other.seed == rr.seed) oracle = &other;
            if (oracle == nullptr || rr.record.alphas.empty()) continue;
            const std::size_t T = rr.record.T();
            for (const auto& [cls, alpha_final] : rr.record.alphas[T]) {
                const auto& m0 = rr.record.alphas[0];
                const auto& o0 = oracle->record.alphas[0];
                const auto& oT = oracle->record.alphas[T];
                if (!m0.count(cls) || !o0.count(cls) || !oT.count(cls)) continue;
                try {
                    rr.deviations[cls] = oracle_deviation(alpha_final, m0.at(cls), oT.at(cls),
                                                          o0.at(cls));
                } catch (const NumericError&) {
                    rr.deviation_skipped.push_back(cls);
                }
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

inline nlohmann::json manifest_json(const ExperimentResult& res) {
    using nlohmann::json;
    json m;
    m["format"] = "s2il-manifest";
    m["version"] = 1;
    m["created_utc"] = detail::utc_now();
    m["failed"] = !res.ok();
    if (!res.ok()) m["error"] = res.error;
    m["config_text"] = config_to_text(res.cfg);
    char fp[17];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(res.dataset_fingerprint));
    m["dataset_fingerprint"] = fp;
    m["class_order"] = res.class_order;

    m["runs"] = json::array();
    for (const auto& rr : res.runs) {
        json r;
        r["label"] = rr.point.label;
        r["seed"] = rr.seed;
        r["oracle"] = rr.point.oracle;
        r["mode"] = to_string(rr.point.mode);
        r["ssim"] = {{"p", rr.point.ssim.p},
                     {"q", rr.point.ssim.q},
                     {"r", rr.point.ssim.r},
                     {"components", detail::components_of(rr.point.ssim)}};
        r["accuracy"] = rr.record.acc;
        r["overall"] = rr.record.overall;
        r["lambda"] = rr.lambdas;
        r["metrics"] = {{"aia", rr.aia}, {"bt", rr.bt}, {"fgt", rr.fgt}};
        char sum[17];
        std::snprintf(sum, sizeof(sum), "%016llx",
                      static_cast<unsigned long long>(rr.initial_sum));
        r["initial_checksum"] = sum;
        json cks = json::array();
        for (std::uint64_t c : rr.checkpoint_sums) {
            std::snprintf(sum, sizeof(sum), "%016llx", static_cast<unsigned long long>(c));
            cks.push_back(sum);
        }
        r["checkpoint_checksums"] = cks;
        if (!rr.record.alphas.empty()) {
            json alphas;
            const std::size_t T = rr.record.T();
            for (const auto& [cls, a] : rr.record.alphas[0])
                alphas["base"][std::to_string(cls)] = a;
            for (const auto& [cls, a] : rr.record.alphas[T])
                alphas["final"][std::to_string(cls)] = a;
            if (!alphas.is_null()) r["alphas"] = alphas;
        }
        if (!rr.deviations.empty()) {
            json dev;
            for (const auto& [cls, d] : rr.deviations)
                dev[std::to_string(cls)] = {{"value", d.value},
                                            {"excluded_channels", d.excluded.size()}};
            r["oracle_deviation"] = dev;
        }
        m["runs"].push_back(std::move(r));
    }

    // per-point aggregates over seeds
    std::map<std::string, std::vector<const RunResult*>> by_label;
    for (const auto& rr : res.runs) by_label[rr.point.label].push_back(&rr);
    m["aggregates"] = json::array();
    for (const auto& [label, rs] : by_label) {
        auto stat = [&rs](auto getter) {
            double mean = 0.0;
            for (const auto* r : rs) mean += getter(*r);
            mean /= static_cast<double>(rs.size());
            double var = 0.0;
            for (const auto* r : rs) {
                const double d = getter(*r) - mean;
                var += d * d;
            }
            const double std_dev =
                rs.size() > 1 ? std::sqrt(var / static_cast<double>(rs.size() - 1)) : 0.0;
            return std::pair<double, double>(mean, std_dev);
        };
        const auto [aia_m, aia_s] = stat([](const RunResult& r) { return r.aia; });
        const auto [bt_m, bt_s] = stat([](const RunResult& r) { return r.bt; });
        const auto [fgt_m, fgt_s] = stat([](const RunResult& r) { return r.fgt; });
        const auto [fin_m, fin_s] =
            stat([](const RunResult& r) { return r.record.overall.back(); });
        m["aggregates"].push_back({{"label", label},
                                   {"seeds", rs.size()},
                                   {"aia_mean", aia_m},
                                   {"aia_std", aia_s},
                                   {"bt_mean", bt_m},
                                   {"bt_std", bt_s},
                                   {"fgt_mean", fgt_m},
                                   {"fgt_std", fgt_s},
                                   {"final_overall_mean", fin_m},
                                   {"final_overall_std", fin_s}});
    }
    return m;
}

inline void write_reports(const ExperimentResult& res, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    {
        std::ofstream f(out_dir + "/manifest.json");
        if (!f) throw IoError("cannot write manifest in " + out_dir);
        f << manifest_json(res).dump(2) << "\n";
    }
    {
        std::ofstream f(out_dir + "/accuracy.csv");
        f << "run,seed,task_trained,task_evaluated,accuracy\r\n";
        for (const auto& rr : res.runs)
            for (std::size_t t = 0; t < rr.record.acc.size(); ++t)
                for (std::size_t i = 0; i <= t; ++i)
                    f << detail::csv_field(rr.point.label) << "," << rr.seed << "," << t << ","
                      << i << "," << rr.record.acc[t][i] << "\r\n";
    }
    {
        std::ofstream f(out_dir + "/metrics.csv");
        f << "run,seed,aia,bt,fgt,final_overall\r\n";
        for (const auto& rr : res.runs)
            f << detail::csv_field(rr.point.label) << "," << rr.seed << "," << rr.aia << ","
              << rr.bt << "," << rr.fgt << "," << rr.record.overall.back() << "\r\n";
        const auto m = manifest_json(res);
        f << "run,seeds,aia_mean,aia_std,bt_mean,bt_std,fgt_mean,fgt_std\r\n";
        for (const auto& agg : m["aggregates"])
            f << detail::csv_field(agg["label"].get<std::string>()) << ","
              << agg["seeds"].get<std::size_t>() << "," << agg["aia_mean"].get<double>() << ","
              << agg["aia_std"].get<double>() << "," << agg["bt_mean"].get<double>() << ","
              << agg["bt_std"].get<double>() << "," << agg["fgt_mean"].get<double>() << ","
              << agg["fgt_std"].get<double>() << "\r\n";
    }
    {
        std::ofstream f(out_dir + "/deviations.csv");
        f << "run,seed,class,deviation,excluded_channels\r\n";
        for (const auto& rr : res.runs)
            for (const auto& [cls, d] : rr.deviations)
                f << detail::csv_field(rr.point.label) << "," << rr.seed << "," << cls << ","
                  << d.value << "," << d.excluded.size() << "\r\n";
    }
}

}  // namespace s2il
