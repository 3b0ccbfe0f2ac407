#pragma once

// Weighted structural loss: class-balanced cross-entropy, feature matching through
// a frozen convolutional extractor, and a per-pixel smooth L1 term.
//
// Every term sums over pixels and averages over the batch.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sfcn/error.hpp"
#include "sfcn/model.hpp"
#include "sfcn/rng.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

inline constexpr double kProbabilityClamp = 1e-7;

struct LossConfig {
    double mu = 0.01;
    double gamma = 20.0;
    double epsilon_s1 = 0.1;
    std::vector<double> lambda_per_layer = std::vector<double>(9, 1.0);
    std::vector<std::size_t> selected_layers{0, 1, 2, 3, 4, 5, 6, 7, 8};
    // Use 1 - rho (the rare-class up-weighting convention) instead of rho = |Y+| / |Y|.
    bool complement_rho = false;
    std::uint64_t extractor_seed = 9;

    void validate() const {
        if (!(mu >= 0.0) || !(gamma >= 0.0)) throw ConfigError("loss: mu and gamma must be >= 0");
        if (!(epsilon_s1 > 0.0)) throw ConfigError("loss: epsilon_s1 must be > 0");
        for (double l : lambda_per_layer)
            if (!(l >= 0.0)) throw ConfigError("loss: layer weights must be >= 0");
        for (std::size_t l : selected_layers)
            if (l >= lambda_per_layer.size())
                throw ConfigError("loss: selected layer " + std::to_string(l) + " has no weight");
    }
};

/// Frozen convolutional feature extractor. Weights never require gradients.
struct FeatureExtractor {
    std::vector<ConvLayer> layers;
    std::size_t input_channels = 3;
    bool rectify = true;

    /// Nine 3x3 convolutions, widths (8,8,16,16,32,32,64,64,64), stride 2 at the
    /// first conv of stages two to four, random msra weights from `seed`.
    static FeatureExtractor light9(std::uint64_t seed) {
        static constexpr std::size_t widths[9] = {8, 8, 16, 16, 32, 32, 64, 64, 64};
        FeatureExtractor fx;
        Rng rng(seed);
        std::size_t in = fx.input_channels;
        for (std::size_t i = 0; i < 9; ++i) {
            const std::size_t stride = (i == 2 || i == 4 || i == 6) ? 2 : 1;
            ConvLayer l = detail::make_conv(ConvSpec{in, widths[i], {3, 3}, {stride, stride}, {1, 1}}, rng, false);
            l.weight.set_requires_grad(false);
            fx.layers.push_back(std::move(l));
            in = widths[i];
        }
        return fx;
    }

    /// Outputs of every layer for a (N, 1, H, W) map.
    std::vector<Tensor> features(const Tensor& map) const {
        detail::require_rank4(map, "extractor", "map");
        if (map.dim(1) != 1) throw ShapeError("extractor: maps must be single-channel, got " + shape_str(map.shape()));
        Tensor x = input_channels == 1 ? map : repeat_channels(map, input_channels);
        std::vector<Tensor> taps;
        for (const auto& l : layers) {
            x = apply_conv(x, l);
            if (rectify) x = relu(x);
            taps.push_back(x);
        }
        return taps;
    }
};

namespace detail {

inline void require_pair(const Tensor& pred, const Tensor& truth, const char* op) {
    if (pred.shape() != truth.shape())
        throw ShapeError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " and truth " +
                         shape_str(truth.shape()) + " differ in shape");
    if (pred.rank() < 2) throw ShapeError(std::string(op) + ": expected a leading batch dimension");
}

inline void require_binary(const Tensor& truth, const char* op) {
    for (double v : truth.values())
        if (v != 0.0 && v != 1.0) throw ConfigError(std::string(op) + ": ground truth must be binary");
}

inline Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0), 1.0); }

// -(sum_j wpos_j log p_j + wneg_j log(1 - p_j)) / N, with p clamped away from 0 and 1.
inline Tensor weighted_cross_entropy(const Tensor& pred, const Tensor& wpos, const Tensor& wneg) {
    const Tensor p = clamp(pred, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const Tensor terms = add(mul(wpos, log(p)), mul(wneg, log(one_minus(p))));
    return scale(sum(terms), -1.0 / static_cast<double>(pred.dim(0)));
}

}  // namespace detail

inline Tensor loss_bce(const Tensor& pred, const Tensor& truth) {
    detail::require_pair(pred, truth, "loss_bce");
    detail::require_binary(truth, "loss_bce");
    Tensor wneg(truth.shape());
    for (std::size_t i = 0; i < truth.numel(); ++i) wneg.mutable_values()[i] = 1.0 - truth.values()[i];
    return detail::weighted_cross_entropy(pred, truth, wneg);
}

/// Foreground fraction |Y+| / |Y| of each sample.
inline std::vector<double> foreground_fraction(const Tensor& truth) {
    const std::size_t N = truth.dim(0), block = truth.numel() / N;
    std::vector<double> rho(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t k = 0; k < block; ++k) s += truth.values()[n * block + k];
        rho[n] = s / static_cast<double>(block);
    }
    return rho;
}

/// -rho sum_{Y+} log p - (1 - rho) sum_{Y-} log(1 - p), rho per sample.
inline Tensor loss_wbce(const Tensor& pred, const Tensor& truth, bool complement_rho = false) {
    detail::require_pair(pred, truth, "loss_wbce");
    detail::require_binary(truth, "loss_wbce");
    const std::vector<double> rho = foreground_fraction(truth);
    const std::size_t block = truth.numel() / truth.dim(0);
    Tensor wpos(truth.shape()), wneg(truth.shape());
    for (std::size_t i = 0; i < truth.numel(); ++i) {
        const double r = complement_rho ? 1.0 - rho[i / block] : rho[i / block];
        const double y = truth.values()[i];
        wpos.mutable_values()[i] = r * y;
        wneg.mutable_values()[i] = (1.0 - r) * (1.0 - y);
    }
    return detail::weighted_cross_entropy(pred, wpos, wneg);
}

/// The same weighted cross-entropy written on log-probabilities, so no clamp is needed.
inline Tensor loss_wbce_log(const Tensor& log_fg, const Tensor& log_bg, const Tensor& truth,
                            bool complement_rho = false) {
    detail::require_pair(log_fg, truth, "loss_wbce_log");
    detail::require_pair(log_bg, truth, "loss_wbce_log");
    detail::require_binary(truth, "loss_wbce_log");
    const std::vector<double> rho = foreground_fraction(truth);
    const std::size_t block = truth.numel() / truth.dim(0);
    Tensor wpos(truth.shape()), wneg(truth.shape());
    for (std::size_t i = 0; i < truth.numel(); ++i) {
        const double r = complement_rho ? 1.0 - rho[i / block] : rho[i / block];
        const double y = truth.values()[i];
        wpos.mutable_values()[i] = r * y;
        wneg.mutable_values()[i] = (1.0 - r) * (1.0 - y);
    }
    const Tensor terms = add(mul(wpos, log_fg), mul(wneg, log_bg));
    return scale(sum(terms), -1.0 / static_cast<double>(truth.dim(0)));
}

/// sum_l lambda_l ||phi_l(Y) - phi_l(Y_hat)||_2 over the selected extractor layers.
/// Gradients reach `pred` only.
inline Tensor loss_sc(const Tensor& pred, const Tensor& truth, const FeatureExtractor& extractor,
                      const LossConfig& config) {
    detail::require_pair(pred, truth, "loss_sc");
    const auto fp = extractor.features(pred);
    const auto ft = extractor.features(truth.detach());
    const double inv_n = 1.0 / static_cast<double>(pred.dim(0));
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l : config.selected_layers) {
        if (l >= fp.size())
            throw ConfigError("loss_sc: selected layer " + std::to_string(l) + " beyond extractor depth " +
                              std::to_string(fp.size()));
        const double w = l < config.lambda_per_layer.size() ? config.lambda_per_layer[l] : 1.0;
        if (w == 0.0) continue;
        total = add(total, scale(sum(l2_norm_per_sample(sub(ft[l], fp[l]))), w * inv_n));
    }
    return total;
}

/// Per-pixel smooth L1 on d = y - y_hat: d^2 / (2 eps) + eps / 2 inside |d| < eps, |d| outside.
inline double smooth_l1_value(double d, double eps) {
    const double a = std::abs(d);
    return a < eps ? d * d / (2.0 * eps) + eps / 2.0 : a;
}

inline Tensor loss_smooth_l1(const Tensor& pred, const Tensor& truth, double epsilon) {
    detail::require_pair(pred, truth, "loss_smooth_l1");
    if (!(epsilon > 0.0)) throw ConfigError("loss_smooth_l1: epsilon must be > 0");
    const Tensor d = sub(truth.detach(), pred);
    const Tensor per_pixel = map(
        d, [epsilon](double v) { return smooth_l1_value(v, epsilon); },
        [epsilon](double v, double) {
            if (std::abs(v) < epsilon) return v / epsilon;
            return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        },
        "smooth_l1");
    return scale(sum(per_pixel), 1.0 / static_cast<double>(pred.dim(0)));
}

struct LossBreakdown {
    Tensor total;
    double wbce = 0.0;
    double sc = 0.0;
    double s1 = 0.0;
    double total_value = 0.0;
};

/// wbce + mu * sc + gamma * s1, with the unweighted components for logging.
inline LossBreakdown loss_total(const Tensor& pred, const Tensor& truth, const FeatureExtractor& extractor,
                                const LossConfig& config) {
    config.validate();
    const Tensor wbce = loss_wbce(pred, truth, config.complement_rho);
    const Tensor sc = loss_sc(pred, truth, extractor, config);
    const Tensor s1 = loss_smooth_l1(pred, truth, config.epsilon_s1);
    LossBreakdown out;
    out.total = add(add(wbce, scale(sc, config.mu)), scale(s1, config.gamma));
    out.wbce = wbce.item();
    out.sc = sc.item();
    out.s1 = s1.item();
    out.total_value = out.total.item();
    return out;
}

/// loss_total evaluated from the head scores (background z0, foreground z1). The
/// cross-entropy term uses log-softmax, so saturated pixels keep a gradient; the value
/// matches loss_total on the softmax map wherever the clamp is inactive.
inline LossBreakdown loss_total_from_scores(const Tensor& z0, const Tensor& z1, const Tensor& truth,
                                            const FeatureExtractor& extractor, const LossConfig& config) {
    config.validate();
    const Tensor pred = softmax_pairwise(z0, z1).first;
    const auto [log_fg, log_bg] = log_softmax_pairwise(z0, z1);
    const Tensor wbce = loss_wbce_log(log_fg, log_bg, truth, config.complement_rho);
    const Tensor sc = loss_sc(pred, truth, extractor, config);
    const Tensor s1 = loss_smooth_l1(pred, truth, config.epsilon_s1);
    LossBreakdown out;
    out.total = add(add(wbce, scale(sc, config.mu)), scale(s1, config.gamma));
    out.wbce = wbce.item();
    out.sc = sc.item();
    out.s1 = s1.item();
    out.total_value = out.total.item();
    return out;
}

}  // namespace sfcn
