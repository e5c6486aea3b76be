#pragma once

// Experiment configuration: a flat, diff-friendly key-value text format with
// dotted section prefixes. Emission is canonical, so serialize -> parse is an
// identity on the typed config.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "s2il/distill.hpp"
#include "s2il/engine.hpp"
#include "s2il/errors.hpp"
#include "s2il/net.hpp"

namespace s2il {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ExperimentConfig {
    // data
    std::string data_source = "synthetic";  // synthetic | file
    std::string data_path;
    std::size_t data_classes = 10;
    std::size_t data_per_class = 100;
    std::size_t data_image_size = 32;
    std::size_t data_channels = 1;
    std::uint64_t data_seed = 1;

    // stream
    std::size_t stream_base = 0;  // 0 = half of the class count
    std::size_t stream_increment = 1;
    std::uint64_t order_seed = 1;

    NetConfig net;
    TrainConfig train;
    SSIMParams ssim;

    // exemplars
    std::string exemplar_policy = "m2";  // m1 | m2
    std::size_t exemplar_budget = 2000;
    std::size_t exemplar_per_class = 20;
    bool exemplar_normalize = true;

    std::string fd_weights_file;

    // run orchestration
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "out";
    bool gradcam = true;
    bool oracle_baseline = false;
    bool checkpoints = true;

    // sweep axes; empty = use the base value only
    std::vector<std::string> sweep_modes;
    std::vector<double> sweep_p, sweep_q, sweep_r;
    std::vector<std::string> sweep_components;  // subsets of "lcs"

    bool operator==(const ExperimentConfig&) const = default;

    std::size_t base_classes() const {
        return stream_base == 0 ? data_classes / 2 : stream_base;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            const std::string t = trim(cur);
            if (!t.empty()) out.push_back(t);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    const std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline DistillMode parse_mode(const std::string& v) {
    if (v == "none") return DistillMode::none;
    if (v == "eq1") return DistillMode::eq1;
    if (v == "eq2") return DistillMode::eq2;
    if (v == "s2il") return DistillMode::s2il;
    throw ConfigError("config: unknown distillation mode '" + v + "'");
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        using detail::parse_bool;
        using detail::parse_double;
        using detail::parse_uint;

        if (key == "data.source") {
            if (val != "synthetic" && val != "file")
                throw ConfigError("config: data.source must be synthetic|file");
            cfg.data_source = val;
        } else if (key == "data.path") {
            cfg.data_path = val;
        } else if (key == "data.classes") {
            cfg.data_classes = parse_uint(key, val);
        } else if (key == "data.per_class") {
            cfg.data_per_class = parse_uint(key, val);
        } else if (key == "data.image_size") {
            cfg.data_image_size = parse_uint(key, val);
        } else if (key == "data.channels") {
            cfg.data_channels = parse_uint(key, val);
        } else if (key == "data.seed") {
            cfg.data_seed = parse_uint(key, val);
        } else if (key == "stream.base") {
            cfg.stream_base = parse_uint(key, val);
        } else if (key == "stream.increment") {
            cfg.stream_increment = parse_uint(key, val);
        } else if (key == "stream.order_seed") {
            cfg.order_seed = parse_uint(key, val);
        } else if (key == "net.input_size") {
            cfg.net.input_size = parse_uint(key, val);
        } else if (key == "net.input_channels") {
            cfg.net.input_channels = parse_uint(key, val);
        } else if (key == "net.channels") {
            cfg.net.channels.clear();
            for (const auto& tok : detail::split_list(val))
                cfg.net.channels.push_back(parse_uint(key, tok));
        } else if (key == "net.kernel") {
            cfg.net.kernel = parse_uint(key, val);
        } else if (key == "net.proxies") {
            cfg.net.proxies_per_class = parse_uint(key, val);
        } else if (key == "net.margin") {
            cfg.net.margin = parse_double(key, val);
        } else if (key == "net.scale_init") {
            cfg.net.scale_init = parse_double(key, val);
        } else if (key == "net.scale_floor") {
            cfg.net.scale_floor = parse_double(key, val);
        } else if (key == "net.jitter") {
            cfg.net.imprint_jitter = parse_double(key, val);
        } else if (key == "train.epochs") {
            cfg.train.epochs = parse_uint(key, val);
        } else if (key == "train.base_epochs") {
            cfg.train.base_epochs = parse_uint(key, val);
        } else if (key == "train.base_lr") {
            cfg.train.base_lr = parse_double(key, val);
        } else if (key == "train.batch") {
            cfg.train.batch = parse_uint(key, val);
        } else if (key == "train.lr") {
            cfg.train.lr = parse_double(key, val);
        } else if (key == "train.lr_min") {
            cfg.train.lr_min = parse_double(key, val);
        } else if (key == "train.momentum") {
            cfg.train.momentum = parse_double(key, val);
        } else if (key == "train.weight_decay") {
            cfg.train.weight_decay = parse_double(key, val);
        } else if (key == "train.lambda_base") {
            cfg.train.lambda_base = parse_double(key, val);
        } else if (key == "train.finetune_epochs") {
            cfg.train.finetune_epochs = parse_uint(key, val);
        } else if (key == "train.finetune_lr") {
            cfg.train.finetune_lr = parse_double(key, val);
        } else if (key == "train.finetune_distill") {
            cfg.train.finetune_distill = parse_bool(key, val);
        } else if (key == "train.mode") {
            cfg.train.mode = parse_mode(val);
        } else if (key == "train.oracle") {
            cfg.train.oracle = parse_bool(key, val);
        } else if (key == "ssim.p") {
            cfg.ssim.p = parse_double(key, val);
        } else if (key == "ssim.q") {
            cfg.ssim.q = parse_double(key, val);
        } else if (key == "ssim.r") {
            cfg.ssim.r = parse_double(key, val);
        } else if (key == "ssim.c1") {
            cfg.ssim.c1 = parse_double(key, val);
        } else if (key == "ssim.c2") {
            cfg.ssim.c2 = parse_double(key, val);
        } else if (key == "ssim.c3") {
            cfg.ssim.c3 = parse_double(key, val);
        } else if (key == "ssim.use_l") {
            cfg.ssim.use_l = parse_bool(key, val);
        } else if (key == "ssim.use_c") {
            cfg.ssim.use_c = parse_bool(key, val);
        } else if (key == "ssim.use_s") {
            cfg.ssim.use_s = parse_bool(key, val);
        } else if (key == "ssim.power") {
            if (val == "sign")
                cfg.ssim.power = PowerMode::sign_preserving;
            else if (val == "plain")
                cfg.ssim.power = PowerMode::plain;
            else
                throw ConfigError("config: ssim.power must be sign|plain");
        } else if (key == "exemplar.policy") {
            if (val != "m1" && val != "m2")
                throw ConfigError("config: exemplar.policy must be m1|m2");
            cfg.exemplar_policy = val;
        } else if (key == "exemplar.budget") {
            cfg.exemplar_budget = parse_uint(key, val);
        } else if (key == "exemplar.per_class") {
            cfg.exemplar_per_class = parse_uint(key, val);
        } else if (key == "exemplar.normalize") {
            cfg.exemplar_normalize = parse_bool(key, val);
        } else if (key == "fd.weights_file") {
            cfg.fd_weights_file = val;
        } else if (key == "run.seeds") {
            cfg.seeds.clear();
            for (const auto& tok : detail::split_list(val))
                cfg.seeds.push_back(parse_uint(key, tok));
            if (cfg.seeds.empty()) throw ConfigError("config: run.seeds must be nonempty");
        } else if (key == "run.out") {
            cfg.out_dir = val;
        } else if (key == "run.gradcam") {
            cfg.gradcam = parse_bool(key, val);
        } else if (key == "run.oracle_baseline") {
            cfg.oracle_baseline = parse_bool(key, val);
        } else if (key == "run.checkpoints") {
            cfg.checkpoints = parse_bool(key, val);
        } else if (key == "sweep.modes") {
            cfg.sweep_modes = detail::split_list(val);
            for (const auto& m : cfg.sweep_modes) parse_mode(m);
        } else if (key == "sweep.p") {
            cfg.sweep_p.clear();
            for (const auto& tok : detail::split_list(val))
                cfg.sweep_p.push_back(parse_double(key, tok));
        } else if (key == "sweep.q") {
            cfg.sweep_q.clear();
            for (const auto& tok : detail::split_list(val))
                cfg.sweep_q.push_back(parse_double(key, tok));
        } else if (key == "sweep.r") {
            cfg.sweep_r.clear();
            for (const auto& tok : detail::split_list(val))
                cfg.sweep_r.push_back(parse_double(key, tok));
        } else if (key == "sweep.components") {
            cfg.sweep_components = detail::split_list(val);
            for (const auto& c : cfg.sweep_components)
                for (char ch : c)
                    if (ch != 'l' && ch != 'c' && ch != 's')
                        throw ConfigError("config: sweep.components entries use letters lcs");
        } else {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    return cfg;
}

inline std::string config_to_text(const ExperimentConfig& cfg) {
    using detail::fmt_double;
    std::ostringstream o;
    auto list_u = [](const auto& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    auto list_d = [](const std::vector<double>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
        return s;
    };
    auto list_s = [](const std::vector<std::string>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
        return s;
    };

    o << "data.source = " << cfg.data_source << "\n";
    o << "data.path = " << cfg.data_path << "\n";
    o << "data.classes = " << cfg.data_classes << "\n";
    o << "data.per_class = " << cfg.data_per_class << "\n";
    o << "data.image_size = " << cfg.data_image_size << "\n";
    o << "data.channels = " << cfg.data_channels << "\n";
    o << "data.seed = " << cfg.data_seed << "\n";
    o << "stream.base = " << cfg.stream_base << "\n";
    o << "stream.increment = " << cfg.stream_increment << "\n";
    o << "stream.order_seed = " << cfg.order_seed << "\n";
    o << "net.input_size = " << cfg.net.input_size << "\n";
    o << "net.input_channels = " << cfg.net.input_channels << "\n";
    o << "net.channels = " << list_u(cfg.net.channels) << "\n";
    o << "net.kernel = " << cfg.net.kernel << "\n";
    o << "net.proxies = " << cfg.net.proxies_per_class << "\n";
    o << "net.margin = " << fmt_double(cfg.net.margin) << "\n";
    o << "net.scale_init = " << fmt_double(cfg.net.scale_init) << "\n";
    o << "net.scale_floor = " << fmt_double(cfg.net.scale_floor) << "\n";
    o << "net.jitter = " << fmt_double(cfg.net.imprint_jitter) << "\n";
    o << "train.epochs = " << cfg.train.epochs << "\n";
    o << "train.base_epochs = " << cfg.train.base_epochs << "\n";
    o << "train.base_lr = " << detail::fmt_double(cfg.train.base_lr) << "\n";
    o << "train.batch = " << cfg.train.batch << "\n";
    o << "train.lr = " << fmt_double(cfg.train.lr) << "\n";
    o << "train.lr_min = " << fmt_double(cfg.train.lr_min) << "\n";
    o << "train.momentum = " << fmt_double(cfg.train.momentum) << "\n";
    o << "train.weight_decay = " << fmt_double(cfg.train.weight_decay) << "\n";
    o << "train.lambda_base = " << fmt_double(cfg.train.lambda_base) << "\n";
    o << "train.finetune_epochs = " << cfg.train.finetune_epochs << "\n";
    o << "train.finetune_lr = " << fmt_double(cfg.train.finetune_lr) << "\n";
    o << "train.finetune_distill = " << (cfg.train.finetune_distill ? "true" : "false") << "\n";
    o << "train.mode = " << to_string(cfg.train.mode) << "\n";
    o << "train.oracle = " << (cfg.train.oracle ? "true" : "false") << "\n";
    o << "ssim.p = " << fmt_double(cfg.ssim.p) << "\n";
    o << "ssim.q = " << fmt_double(cfg.ssim.q) << "\n";
    o << "ssim.r = " << fmt_double(cfg.ssim.r) << "\n";
    o << "ssim.c1 = " << fmt_double(cfg.ssim.c1) << "\n";
    o << "ssim.c2 = " << fmt_double(cfg.ssim.c2) << "\n";
    o << "ssim.c3 = " << fmt_double(cfg.ssim.c3) << "\n";
    o << "ssim.use_l = " << (cfg.ssim.use_l ? "true" : "false") << "\n";
    o << "ssim.use_c = " << (cfg.ssim.use_c ? "true" : "false") << "\n";
    o << "ssim.use_s = " << (cfg.ssim.use_s ? "true" : "false") << "\n";
    o << "ssim.power = " << (cfg.ssim.power == PowerMode::sign_preserving ? "sign" : "plain")
      << "\n";
    o << "exemplar.policy = " << cfg.exemplar_policy << "\n";
    o << "exemplar.budget = " << cfg.exemplar_budget << "\n";
    o << "exemplar.per_class = " << cfg.exemplar_per_class << "\n";
    o << "exemplar.normalize = " << (cfg.exemplar_normalize ? "true" : "false") << "\n";
    o << "fd.weights_file = " << cfg.fd_weights_file << "\n";
    o << "run.seeds = " << list_u(cfg.seeds) << "\n";
    o << "run.out = " << cfg.out_dir << "\n";
    o << "run.gradcam = " << (cfg.gradcam ? "true" : "false") << "\n";
    o << "run.oracle_baseline = " << (cfg.oracle_baseline ? "true" : "false") << "\n";
    o << "run.checkpoints = " << (cfg.checkpoints ? "true" : "false") << "\n";
    o << "sweep.modes = " << list_s(cfg.sweep_modes) << "\n";
    o << "sweep.p = " << list_d(cfg.sweep_p) << "\n";
    o << "sweep.q = " << list_d(cfg.sweep_q) << "\n";
    o << "sweep.r = " << list_d(cfg.sweep_r) << "\n";
    o << "sweep.components = " << list_s(cfg.sweep_components) << "\n";
    return o.str();
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

// Optional per-channel weights for the weighted baseline loss. Text format:
// one line per conv layer of space-separated channel weights, then a final
// line with the single pooled-feature weight.
inline FDWeights load_fd_weights(const std::string& path,
                                 const std::vector<std::size_t>& channels) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open fd weights file: " + path);
    FDWeights w;
    std::string line;
    std::vector<std::vector<double>> rows;
    while (std::getline(f, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        rows.push_back(std::move(row));
    }
    if (rows.size() != channels.size() + 1)
        throw ConfigError("fd weights: expected " + std::to_string(channels.size()) +
                          " layer lines plus a pooled line");
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (rows[i].size() != channels[i])
            throw ConfigError("fd weights: layer " + std::to_string(i) + " needs " +
                              std::to_string(channels[i]) + " values");
        w.layer.push_back(rows[i]);
    }
    if (rows.back().size() != 1) throw ConfigError("fd weights: pooled line needs one value");
    w.pooled = rows.back()[0];
    w.validate();
    return w;
}

}  // namespace s2il
