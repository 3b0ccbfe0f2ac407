#pragma once

// Run configuration: a plain-text file of `key = value` lines grouped under
// [model], [reflection], [loss], [train], [data] and [metrics] headers. Keys
// given on the command line override the file. Unknown keys are rejected.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfcn/data.hpp"
#include "sfcn/error.hpp"
#include "sfcn/loss.hpp"
#include "sfcn/metrics.hpp"
#include "sfcn/model.hpp"
#include "sfcn/optim.hpp"

namespace sfcn {

struct RunConfig {
    std::string model_preset = "desk";
    std::string train_preset = "desk";
    SfcnConfig model = SfcnConfig::desk();
    LossConfig loss;
    TrainConfig train;
    SynthSpec data;
    MetricsConfig metrics;
};

/// Ordered "section.key" -> raw value.
using KeyValues = std::map<std::string, std::string>;

namespace cfg {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    return out;
}

// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string fmt(bool b) { return b ? "true" : "false"; }
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(std::uint64_t v, int) { return std::to_string(v); }

inline double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return d;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc{} || r.ptr != v.data() + v.size())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& p : split(v, ',')) out.push_back(to_double(key, p));
    return out;
}

inline std::pair<double, double> to_range(const std::string& key, const std::string& v) {
    const auto d = to_doubles(key, v);
    if (d.size() != 2) throw ConfigError(key + ": expected 'low,high'");
    return {d[0], d[1]};
}

// "64" or "64x48" (height x width).
inline Extent2 to_extent(const std::string& key, const std::string& v) {
    const auto parts = split(v, 'x');
    if (parts.size() == 1) {
        const std::size_t n = to_size(key, parts[0]);
        return {n, n};
    }
    if (parts.size() == 2) return {to_size(key, parts[0]), to_size(key, parts[1])};
    throw ConfigError(key + ": expected HEIGHTxWIDTH, got '" + v + "'");
}

inline std::string fmt(Extent2 e) { return std::to_string(e.h) + "x" + std::to_string(e.w); }

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
    return out;
}

inline std::string shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::disk: return "disk";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::blob: return "blob";
    }
    return "?";
}

inline std::string background_name(Background b) {
    switch (b) {
        case Background::flat: return "flat";
        case Background::gradient: return "gradient";
        case Background::noise: return "noise";
    }
    return "?";
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        // Presets are applied before any other key, see apply_keys().
        t["model.preset"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.model_preset = v; },
                             [](const RunConfig& c) { return c.model_preset; }};
        t["model.input_size"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.input_size = to_extent(k, v); },
                                 [](const RunConfig& c) { return fmt(c.model.input_size); }};
        t["model.blocks"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.model.encoder_blocks.clear();
                for (const auto& b : split(v, ',')) {
                    const auto p = split(b, 'x');
                    if (p.size() != 2) throw ConfigError(k + ": expected CONVSxCHANNELS entries, got '" + b + "'");
                    c.model.encoder_blocks.push_back({to_size(k, p[0]), to_size(k, p[1])});
                }
            },
            [](const RunConfig& c) {
                return join(c.model.encoder_blocks,
                            [](const EncoderBlock& b) { return std::to_string(b.convs) + "x" + std::to_string(b.channels); });
            }};
        t["model.fusion_channels"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.fusion_channels = to_size(k, v); },
                                      [](const RunConfig& c) { return fmt(c.model.fusion_channels); }};
        t["model.head_kernel"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.head_kernel = to_size(k, v); },
                                  [](const RunConfig& c) { return fmt(c.model.head_kernel); }};
        t["model.share_weights"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.share_weights = to_bool(k, v); },
                                    [](const RunConfig& c) { return fmt(c.model.share_weights); }};
        t["model.norm"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.model.norm = parse_norm_kind(v); },
                           [](const RunConfig& c) { return to_string(c.model.norm); }};
        t["model.input"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.model.input = parse_input_mode(v); },
                            [](const RunConfig& c) { return to_string(c.model.input); }};
        t["model.bn_momentum"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.bn_momentum = to_double(k, v); },
                                  [](const RunConfig& c) { return fmt(c.model.bn_momentum); }};
        t["model.bn_epsilon"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.bn_epsilon = to_double(k, v); },
                                 [](const RunConfig& c) { return fmt(c.model.bn_epsilon); }};

        t["reflection.k"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.k = to_double(k, v); },
                             [](const RunConfig& c) { return fmt(c.model.k); }};
        t["reflection.mean"] = {
            [](RunConfig& c, const std::string&, const std::string& v) {
                c.model.mean.kind = parse_mean_kind(v);
                // An explicit reflection.mean_vector is re-applied afterwards.
                if (c.model.mean.kind != MeanKind::fixed)
                    c.model.mean.vector.reset();
                else if (c.model.mean.kind == MeanKind::fixed && !c.model.mean.vector)
                    c.model.mean.vector = kImageNetMean;
            },
            [](const RunConfig& c) { return to_string(c.model.mean.kind); }};
        t["reflection.mean_vector"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                const auto d = to_doubles(k, v);
                if (d.size() != 3) throw ConfigError(k + ": expected three comma-separated values");
                c.model.mean.vector = Rgb{d[0], d[1], d[2]};
            },
            [](const RunConfig& c) {
                if (!c.model.mean.vector) return std::string("none");
                return join(std::vector<double>(c.model.mean.vector->begin(), c.model.mean.vector->end()),
                            [](double x) { return fmt(x); });
            }};

        t["loss.mu"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.mu = to_double(k, v); },
                        [](const RunConfig& c) { return fmt(c.loss.mu); }};
        t["loss.gamma"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.gamma = to_double(k, v); },
                           [](const RunConfig& c) { return fmt(c.loss.gamma); }};
        t["loss.epsilon_s1"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.epsilon_s1 = to_double(k, v); },
                                [](const RunConfig& c) { return fmt(c.loss.epsilon_s1); }};
        t["loss.lambda"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.lambda_per_layer = to_doubles(k, v); },
                            [](const RunConfig& c) { return join(c.loss.lambda_per_layer, [](double x) { return fmt(x); }); }};
        t["loss.layers"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.loss.selected_layers.clear();
                for (const auto& p : split(v, ',')) c.loss.selected_layers.push_back(to_size(k, p));
            },
            [](const RunConfig& c) { return join(c.loss.selected_layers, [](std::size_t x) { return fmt(x); }); }};
        t["loss.complement_rho"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.complement_rho = to_bool(k, v); },
                                    [](const RunConfig& c) { return fmt(c.loss.complement_rho); }};
        t["loss.extractor_seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.extractor_seed = to_u64(k, v); },
                                    [](const RunConfig& c) { return fmt(c.loss.extractor_seed, 0); }};

        t["train.preset"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.train_preset = v; },
                             [](const RunConfig& c) { return c.train_preset; }};
        t["train.batch_size"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = to_size(k, v); },
                                 [](const RunConfig& c) { return fmt(c.train.batch_size); }};
        t["train.momentum"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.momentum = to_double(k, v); },
                               [](const RunConfig& c) { return fmt(c.train.momentum); }};
        t["train.weight_decay"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.weight_decay = to_double(k, v); },
                                   [](const RunConfig& c) { return fmt(c.train.weight_decay); }};
        t["train.base_lr"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.base_lr = to_double(k, v); },
                              [](const RunConfig& c) { return fmt(c.train.base_lr); }};
        t["train.lr_decay_factor"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr_decay_factor = to_double(k, v); },
                                      [](const RunConfig& c) { return fmt(c.train.lr_decay_factor); }};
        t["train.plateau_patience"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.plateau_patience = to_size(k, v); },
                                       [](const RunConfig& c) { return fmt(c.train.plateau_patience); }};
        t["train.ema_decay"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.ema_decay = to_double(k, v); },
                                [](const RunConfig& c) { return fmt(c.train.ema_decay); }};
        t["train.plateau_tolerance"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.plateau_tolerance = to_double(k, v); },
                                        [](const RunConfig& c) { return fmt(c.train.plateau_tolerance); }};
        t["train.max_iters"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.max_iters = to_size(k, v); },
                                [](const RunConfig& c) { return fmt(c.train.max_iters); }};
        t["train.seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = to_u64(k, v); },
                           [](const RunConfig& c) { return fmt(c.train.seed, 0); }};
        t["train.checkpoint_every"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.checkpoint_every = to_size(k, v); },
                                       [](const RunConfig& c) { return fmt(c.train.checkpoint_every); }};
        t["train.augment"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.augment = to_bool(k, v); },
                              [](const RunConfig& c) { return fmt(c.train.augment); }};

        t["data.count"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.count = to_size(k, v); },
                           [](const RunConfig& c) { return fmt(c.data.count); }};
        t["data.canvas"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.canvas = to_extent(k, v); },
                            [](const RunConfig& c) { return fmt(c.data.canvas); }};
        t["data.shapes"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                const auto [lo, hi] = to_range(k, v);
                c.data.min_shapes = static_cast<std::size_t>(lo);
                c.data.max_shapes = static_cast<std::size_t>(hi);
            },
            [](const RunConfig& c) { return fmt(c.data.min_shapes) + "," + fmt(c.data.max_shapes); }};
        t["data.kinds"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.data.kinds.clear();
                for (const auto& s : split(v, ',')) {
                    if (s == "disk") c.data.kinds.push_back(ShapeKind::disk);
                    else if (s == "rectangle") c.data.kinds.push_back(ShapeKind::rectangle);
                    else if (s == "blob") c.data.kinds.push_back(ShapeKind::blob);
                    else throw ConfigError(k + ": unknown shape kind '" + s + "'");
                }
            },
            [](const RunConfig& c) { return join(c.data.kinds, shape_kind_name); }};
        t["data.backgrounds"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.data.backgrounds.clear();
                for (const auto& s : split(v, ',')) {
                    if (s == "flat") c.data.backgrounds.push_back(Background::flat);
                    else if (s == "gradient") c.data.backgrounds.push_back(Background::gradient);
                    else if (s == "noise") c.data.backgrounds.push_back(Background::noise);
                    else throw ConfigError(k + ": unknown background '" + s + "'");
                }
            },
            [](const RunConfig& c) { return join(c.data.backgrounds, background_name); }};
        t["data.contrast"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                std::tie(c.data.min_contrast, c.data.max_contrast) = to_range(k, v);
            },
            [](const RunConfig& c) { return fmt(c.data.min_contrast) + "," + fmt(c.data.max_contrast); }};
        t["data.size"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                std::tie(c.data.min_size, c.data.max_size) = to_range(k, v);
            },
            [](const RunConfig& c) { return fmt(c.data.min_size) + "," + fmt(c.data.max_size); }};
        t["data.foreground"] = {
            [](RunConfig& c, const std::string& k, const std::string& v) {
                std::tie(c.data.min_foreground, c.data.max_foreground) = to_range(k, v);
            },
            [](const RunConfig& c) { return fmt(c.data.min_foreground) + "," + fmt(c.data.max_foreground); }};
        t["data.supersample"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.supersample = to_size(k, v); },
                                 [](const RunConfig& c) { return fmt(c.data.supersample); }};
        t["data.seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.seed = to_u64(k, v); },
                          [](const RunConfig& c) { return fmt(c.data.seed, 0); }};

        t["metrics.beta2"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.metrics.beta2 = to_double(k, v); },
                              [](const RunConfig& c) { return fmt(c.metrics.beta2); }};
        t["metrics.s_lambda"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.metrics.s_lambda = to_double(k, v); },
                                 [](const RunConfig& c) { return fmt(c.metrics.s_lambda); }};
        return t;
    }();
    return table;
}

}  // namespace cfg

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
/// Keys before any header must already be qualified as `section.key`.
inline KeyValues parse_config_text(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = cfg::trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = cfg::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        std::string key = cfg::trim(line.substr(0, eq));
        if (!section.empty()) key = section + "." + key;
        kv[key] = cfg::trim(line.substr(eq + 1));
    }
    return kv;
}

inline KeyValues read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

/// Parses one `section.key=value` override.
inline std::pair<std::string, std::string> parse_override(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || s.find('.') > eq)
        throw ConfigError("override '" + s + "' must look like section.key=value");
    return {cfg::trim(s.substr(0, eq)), cfg::trim(s.substr(eq + 1))};
}

inline void apply_preset(RunConfig& c) {
    if (c.model_preset == "desk") c.model = SfcnConfig::desk();
    else if (c.model_preset == "paper") c.model = SfcnConfig::paper();
    else if (c.model_preset == "tiny") c.model = SfcnConfig::tiny();
    else throw ConfigError("model.preset: unknown preset '" + c.model_preset + "' (desk, paper or tiny)");
    if (c.train_preset == "desk") c.train = TrainConfig{};
    else if (c.train_preset == "paper") c.train = TrainConfig::paper();
    else throw ConfigError("train.preset: unknown preset '" + c.train_preset + "' (desk or paper)");
}

/// Applies keys onto `base`. Presets named in `kv` reset their section first, then
/// every other key is applied in lexical order. Unknown keys are rejected.
inline RunConfig apply_keys(RunConfig base, const KeyValues& kv) {
    const auto& table = cfg::fields();
    for (const auto& [k, v] : kv)
        if (!table.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
    const bool presets = kv.count("model.preset") || kv.count("train.preset");
    for (const char* p : {"model.preset", "train.preset"})
        if (auto it = kv.find(p); it != kv.end()) table.at(p).set(base, it->first, it->second);
    if (presets) apply_preset(base);
    for (const auto& [k, v] : kv) {
        if (k == "model.preset" || k == "train.preset") continue;
        if (k == "reflection.mean_vector" && v == "none") continue;
        table.at(k).set(base, k, v);
    }
    // reflection.mean resets the vector for vector-free kinds; re-apply an explicit one.
    if (auto it = kv.find("reflection.mean_vector"); it != kv.end() && it->second != "none")
        table.at(it->first).set(base, it->first, it->second);
    return base;
}

inline void validate(const RunConfig& c) {
    c.model.validate();
    c.loss.validate();
    c.train.validate();
    c.data.validate();
    if (!(c.metrics.beta2 > 0.0)) throw ConfigError("metrics.beta2 must be > 0");
    if (!(c.metrics.s_lambda >= 0.0 && c.metrics.s_lambda <= 1.0)) throw ConfigError("metrics.s_lambda must lie in [0, 1]");
}

/// Fully resolved configuration, one section per header, keys sorted.
inline std::string to_text(const RunConfig& c) {
    std::string out;
    std::string section;
    for (const auto& [k, f] : cfg::fields()) {
        const std::string s = k.substr(0, k.find('.'));
        if (s != section) {
            out += (section.empty() ? "" : "\n") + std::string("[") + s + "]\n";
            section = s;
        }
        out += k.substr(k.find('.') + 1) + " = " + f.get(c) + "\n";
    }
    return out;
}

/// Model and reflection keys only; stored inside checkpoints.
inline std::string model_to_text(const SfcnConfig& m) {
    RunConfig c;
    c.model = m;
    std::string out;
    for (const auto& [k, f] : cfg::fields())
        if ((k.rfind("model.", 0) == 0 && k != "model.preset") || k.rfind("reflection.", 0) == 0)
            out += k + " = " + f.get(c) + "\n";
    return out;
}

inline SfcnConfig model_from_text(const std::string& text) {
    const KeyValues kv = parse_config_text(text, "checkpoint config");
    for (const auto& [k, v] : kv)
        if (k.rfind("model.", 0) != 0 && k.rfind("reflection.", 0) != 0)
            throw FormatError("checkpoint config carries unexpected key '" + k + "'", 0);
    return apply_keys(RunConfig{}, kv).model;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

}  // namespace sfcn
