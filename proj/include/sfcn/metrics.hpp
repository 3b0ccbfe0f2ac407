#pragma once

// Saliency evaluation: precision-recall over 256 quantized thresholds, F-measure,
// mean absolute error and the structure measure (object + region similarity).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <string>
#include <vector>

#include "sfcn/error.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

inline constexpr double kDefaultBeta2 = 0.3;
inline constexpr std::size_t kThresholds = 256;

struct PrPoint {
    double precision = 1.0;
    double recall = 0.0;
};

/// Per-threshold confusion counts, summable across images.
struct Confusion {
    std::array<std::uint64_t, kThresholds> tp{}, fp{}, fn{};

    Confusion& operator+=(const Confusion& o) {
        for (std::size_t t = 0; t < kThresholds; ++t) {
            tp[t] += o.tp[t];
            fp[t] += o.fp[t];
            fn[t] += o.fn[t];
        }
        return *this;
    }
};

namespace detail {

struct Plane {
    std::size_t h = 0, w = 0;
    std::span<const double> v;
};

inline Plane plane_of(const Tensor& t, const char* op) {
    if (t.rank() == 2) return {t.dim(0), t.dim(1), t.values()};
    if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.values()};
    throw ShapeError(std::string(op) + ": expected (height, width) or (1, height, width), got " + shape_str(t.shape()));
}

inline std::pair<Plane, Plane> plane_pair(const Tensor& map, const Tensor& truth, const char* op) {
    const Plane m = plane_of(map, op), g = plane_of(truth, op);
    if (m.h != g.h || m.w != g.w)
        throw ShapeError(std::string(op) + ": map " + shape_str(map.shape()) + " and truth " +
                         shape_str(truth.shape()) + " differ in size");
    return {m, g};
}

inline bool is_fg(double truth) { return truth >= 0.5; }

}  // namespace detail

/// Map value in [0, 1] to its 0..255 level.
inline int quantize_level(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Curve index t binarizes a map as positive where level >= t + 1. Index 255 therefore
/// predicts nothing, and a binary map equal to its truth scores P = R = 1 for t < 255.
inline Confusion confusion_counts(const Tensor& map, const Tensor& truth) {
    const auto [m, g] = detail::plane_pair(map, truth, "pr_curve");
    std::array<std::uint64_t, 257> pos_hist{}, neg_hist{};
    std::uint64_t total_pos = 0;
    for (std::size_t i = 0; i < m.v.size(); ++i) {
        const int q = quantize_level(m.v[i]);
        if (detail::is_fg(g.v[i])) {
            ++pos_hist[static_cast<std::size_t>(q)];
            ++total_pos;
        } else {
            ++neg_hist[static_cast<std::size_t>(q)];
        }
    }
    // Suffix sums: counts with level >= t + 1.
    Confusion c;
    std::uint64_t tp = 0, fp = 0;
    for (std::size_t t = kThresholds; t-- > 0;) {
        tp += pos_hist[t + 1];
        fp += neg_hist[t + 1];
        c.tp[t] = tp;
        c.fp[t] = fp;
        c.fn[t] = total_pos - tp;
    }
    return c;
}

inline std::vector<PrPoint> pr_points(const Confusion& c) {
    std::vector<PrPoint> out(kThresholds);
    for (std::size_t t = 0; t < kThresholds; ++t) {
        const double tp = static_cast<double>(c.tp[t]);
        const double predicted = tp + static_cast<double>(c.fp[t]);
        const double actual = tp + static_cast<double>(c.fn[t]);
        out[t].precision = predicted > 0 ? tp / predicted : 1.0;
        out[t].recall = actual > 0 ? tp / actual : 0.0;
    }
    return out;
}

/// Dataset-level curve: confusion counts are summed over images at each threshold.
inline std::vector<PrPoint> pr_curve(const std::vector<Tensor>& maps, const std::vector<Tensor>& truths) {
    if (maps.empty()) throw ConfigError("pr_curve: empty dataset");
    if (maps.size() != truths.size()) throw ShapeError("pr_curve: map and truth counts differ");
    Confusion total;
    for (std::size_t i = 0; i < maps.size(); ++i) total += confusion_counts(maps[i], truths[i]);
    return pr_points(total);
}

inline double f_measure(double precision, double recall, double beta2 = kDefaultBeta2) {
    const double denom = beta2 * precision + recall;
    if (precision == 0.0 && recall == 0.0) return 0.0;
    return denom > 0 ? (1.0 + beta2) * precision * recall / denom : 0.0;
}

inline double max_f(const std::vector<PrPoint>& curve, double beta2 = kDefaultBeta2) {
    double best = 0.0;
    for (const auto& p : curve) best = std::max(best, f_measure(p.precision, p.recall, beta2));
    return best;
}

/// Curve index matching the adaptive rule "positive where map >= tau".
inline std::size_t adaptive_index(double tau) {
    const double level = std::ceil(std::clamp(tau, 0.0, 1.0) * 255.0 - 1e-9);
    return static_cast<std::size_t>(std::clamp(level - 1.0, 0.0, 255.0));
}

inline double mean_value(const Tensor& map) {
    double s = 0.0;
    for (double v : map.values()) s += v;
    return map.numel() ? s / static_cast<double>(map.numel()) : 0.0;
}

inline double mae(const Tensor& map, const Tensor& truth) {
    const auto [m, g] = detail::plane_pair(map, truth, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < m.v.size(); ++i) s += std::abs(m.v[i] - g.v[i]);
    return s / static_cast<double>(m.v.size());
}

// ---------------------------------------------------------------------------
// Structure measure

namespace detail {

// MATLAB's eps, kept so scores agree with the reference implementation.
inline constexpr double kMatlabEps = 2.220446049250313e-16;

inline double object_score(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    return 2.0 * mean / (mean * mean + 1.0 + sd + kMatlabEps);
}

inline double s_object(const Plane& m, const Plane& g) {
    std::vector<double> fg, bg;
    double u = 0.0;
    for (std::size_t i = 0; i < m.v.size(); ++i) {
        if (is_fg(g.v[i])) {
            fg.push_back(m.v[i]);
            u += 1.0;
        } else {
            bg.push_back(1.0 - m.v[i]);
        }
    }
    u /= static_cast<double>(m.v.size());
    return u * object_score(fg) + (1.0 - u) * object_score(bg);
}

// SSIM-style similarity of one rectangle [y0, y1) x [x0, x1).
inline double region_ssim(const Plane& m, const Plane& g, std::size_t y0, std::size_t y1, std::size_t x0,
                          std::size_t x1) {
    const double n = static_cast<double>((y1 - y0) * (x1 - x0));
    if (n == 0) return 0.0;
    double mx = 0.0, my = 0.0;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            mx += m.v[y * m.w + x];
            my += g.v[y * g.w + x];
        }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            const double a = m.v[y * m.w + x] - mx, b = g.v[y * g.w + x] - my;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
    const double d = n - 1.0 + kMatlabEps;
    sxx /= d;
    syy /= d;
    sxy /= d;
    const double alpha = 4.0 * mx * my * sxy;
    const double beta = (mx * mx + my * my) * (sxx + syy);
    if (alpha != 0.0) return alpha / (beta + kMatlabEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

inline double s_region(const Plane& m, const Plane& g) {
    // Foreground centroid, 1-based and rounded as in the reference code.
    double total = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t y = 0; y < g.h; ++y)
        for (std::size_t x = 0; x < g.w; ++x)
            if (is_fg(g.v[y * g.w + x])) {
                total += 1.0;
                sx += static_cast<double>(x + 1);
                sy += static_cast<double>(y + 1);
            }
    std::size_t cx, cy;
    if (total == 0.0) {
        cx = static_cast<std::size_t>(std::lround(g.w / 2.0));
        cy = static_cast<std::size_t>(std::lround(g.h / 2.0));
    } else {
        cx = static_cast<std::size_t>(std::lround(sx / total));
        cy = static_cast<std::size_t>(std::lround(sy / total));
    }
    const double area = static_cast<double>(g.w * g.h);
    const double W = static_cast<double>(g.w), H = static_cast<double>(g.h);
    const double X = static_cast<double>(cx), Y = static_cast<double>(cy);
    const double w1 = X * Y / area, w2 = (W - X) * Y / area, w3 = X * (H - Y) / area;
    const double w4 = 1.0 - w1 - w2 - w3;
    double q = 0.0;
    if (w1 > 0) q += w1 * region_ssim(m, g, 0, cy, 0, cx);
    if (w2 > 0) q += w2 * region_ssim(m, g, 0, cy, cx, g.w);
    if (w3 > 0) q += w3 * region_ssim(m, g, cy, g.h, 0, cx);
    if (w4 > 0) q += w4 * region_ssim(m, g, cy, g.h, cx, g.w);
    return q;
}

}  // namespace detail

/// lambda * S_object + (1 - lambda) * S_region; all-background and all-foreground
/// truths score the mean of the complement and of the map respectively.
inline double s_measure(const Tensor& map, const Tensor& truth, double lambda = 0.5) {
    const auto [m, g] = detail::plane_pair(map, truth, "s_measure");
    double y = 0.0;
    for (double v : g.v) y += detail::is_fg(v) ? 1.0 : 0.0;
    y /= static_cast<double>(g.v.size());
    double mean_map = 0.0;
    for (double v : m.v) mean_map += v;
    mean_map /= static_cast<double>(m.v.size());
    if (y == 0.0) return 1.0 - mean_map;
    if (y == 1.0) return mean_map;
    const double q = lambda * detail::s_object(m, g) + (1.0 - lambda) * detail::s_region(m, g);
    return std::max(q, 0.0);
}

// ---------------------------------------------------------------------------
// Reports

struct ImageMetrics {
    std::string id;
    double mae = 0.0;
    double s_measure = 0.0;
    double f_max = 0.0;
    double f_adaptive = 0.0;
};

struct MetricsConfig {
    double beta2 = kDefaultBeta2;
    double s_lambda = 0.5;
};

struct MetricsReport {
    std::vector<PrPoint> pr_curve;
    double f_max = 0.0;
    double f_adaptive = 0.0;
    double adaptive_threshold = 0.0;
    double mae = 0.0;
    double s_measure = 0.0;
    std::vector<ImageMetrics> per_image;
};

/// Dataset report. The adaptive threshold is twice the mean saliency over every
/// pixel of the set (capped at 1) and is read off the pooled curve, so it never
/// exceeds f_max. Per-image rows use each image's own curve and threshold.
inline MetricsReport evaluate(const std::vector<Tensor>& maps, const std::vector<Tensor>& truths,
                              const std::vector<std::string>& ids = {}, const MetricsConfig& cfg = {}) {
    if (maps.empty()) throw ConfigError("evaluate: empty dataset");
    if (maps.size() != truths.size()) throw ShapeError("evaluate: map and truth counts differ");
    MetricsReport r;
    Confusion total;
    double sum_values = 0.0, count = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const Confusion c = confusion_counts(maps[i], truths[i]);
        total += c;
        const auto curve = pr_points(c);
        ImageMetrics row;
        row.id = i < ids.size() ? ids[i] : std::to_string(i);
        row.mae = mae(maps[i], truths[i]);
        row.s_measure = s_measure(maps[i], truths[i], cfg.s_lambda);
        row.f_max = max_f(curve, cfg.beta2);
        const auto& p = curve[adaptive_index(std::min(2.0 * mean_value(maps[i]), 1.0))];
        row.f_adaptive = f_measure(p.precision, p.recall, cfg.beta2);
        r.mae += row.mae;
        r.s_measure += row.s_measure;
        r.per_image.push_back(row);
        for (double v : maps[i].values()) sum_values += v;
        count += static_cast<double>(maps[i].numel());
    }
    const double n = static_cast<double>(maps.size());
    r.mae /= n;
    r.s_measure /= n;
    r.pr_curve = pr_points(total);
    r.f_max = max_f(r.pr_curve, cfg.beta2);
    r.adaptive_threshold = std::min(2.0 * sum_values / count, 1.0);
    const auto& p = r.pr_curve[adaptive_index(r.adaptive_threshold)];
    r.f_adaptive = f_measure(p.precision, p.recall, cfg.beta2);
    return r;
}

inline void write_report_csv(const std::filesystem::path& path, const std::string& method, const MetricsReport& r,
                             bool header = true) {
    std::ofstream out(path, header ? std::ios::trunc : std::ios::app);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(6) << std::fixed;
    if (header) out << "method,F_max,F_adaptive,MAE,S\n";
    out << method << ',' << r.f_max << ',' << r.f_adaptive << ',' << r.mae << ',' << r.s_measure << '\n';
}

inline void write_pr_csv(const std::filesystem::path& path, const std::vector<PrPoint>& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(6) << std::fixed << "precision,recall\n";
    for (const auto& p : curve) out << p.precision << ',' << p.recall << '\n';
}

inline void write_per_image_csv(const std::filesystem::path& path, const MetricsReport& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(6) << std::fixed << "id,F_max,F_adaptive,MAE,S\n";
    for (const auto& row : r.per_image)
        out << row.id << ',' << row.f_max << ',' << row.f_adaptive << ',' << row.mae << ',' << row.s_measure << '\n';
}

}  // namespace sfcn
