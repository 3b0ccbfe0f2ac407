#pragma once

// Layer-wise adaptive batch normalization: one set of affine parameters per layer,
// normalization statistics kept separately for every input domain.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sfcn/error.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

enum class Mode { train, eval };

using DomainId = int;

/// Slot used by plain batch normalization, shared by all inputs.
inline constexpr DomainId kSharedStatsSlot = -1;

struct DomainStats {
    std::vector<double> mean;
    std::vector<double> var;
    std::uint64_t count = 0;

    static DomainStats fresh(std::size_t channels) { return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), 0}; }

    friend bool operator==(const DomainStats&, const DomainStats&) = default;
};

struct AdaBnLayerState {
    std::size_t channels = 0;
    Tensor alpha;  // shared across domains
    Tensor beta;
    std::map<DomainId, DomainStats> stats;
    double epsilon = 1e-5;
    double momentum = 0.1;

    AdaBnLayerState() = default;
    explicit AdaBnLayerState(std::size_t c, double eps = 1e-5, double mom = 0.1)
        : channels(c), alpha(Shape{c}, 1.0, true), beta(Shape{c}, 0.0, true), epsilon(eps), momentum(mom) {}

    bool has_domain(DomainId d) const { return stats.count(d) != 0; }
};

/// running <- (1 - momentum) * running + momentum * batch.
inline DomainStats update_running(DomainStats stats, std::span<const double> batch_mean,
                                  std::span<const double> batch_var, double momentum) {
    if (!(momentum > 0.0 && momentum <= 1.0))
        throw ConfigError("update_running: momentum must lie in (0, 1], got " + std::to_string(momentum));
    if (batch_mean.size() != stats.mean.size() || batch_var.size() != stats.var.size())
        throw ShapeError("update_running: channel count mismatch");
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * batch_mean[c];
        stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * batch_var[c];
    }
    ++stats.count;
    return stats;
}

namespace detail {

inline Tensor normalize_with_slot(const Tensor& x, AdaBnLayerState& state, DomainId slot, Mode mode,
                                  const char* op) {
    require_rank4(x, op, "input");
    const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (C != state.channels)
        throw ShapeError(std::string(op) + ": input has " + std::to_string(C) + " channels, layer expects " +
                         std::to_string(state.channels));
    const std::size_t m = N * plane;
    const auto v = x.values();

    std::vector<double> mean(C), var(C);
    if (mode == Mode::train) {
        if (m < 2)
            throw ShapeError(std::string(op) + ": train-mode batch has " + std::to_string(m) +
                             " values per channel, need at least 2");
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < plane; ++i) s += v[(n * C + c) * plane + i];
            const double mu = s / static_cast<double>(m);
            double q = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = v[(n * C + c) * plane + i] - mu;
                    q += d * d;
                }
            mean[c] = mu;
            var[c] = q / static_cast<double>(m);
        }
        auto it = state.stats.find(slot);
        DomainStats current = it == state.stats.end() ? DomainStats::fresh(C) : it->second;
        state.stats[slot] = update_running(std::move(current), mean, var, state.momentum);
    } else {
        auto it = state.stats.find(slot);
        if (it == state.stats.end())
            throw ConfigError(std::string(op) + ": no statistics for domain " + std::to_string(slot) +
                              " (evaluate only after training on it)");
        mean = it->second.mean;
        var = it->second.var;
    }

    auto inv_std = std::make_shared<std::vector<double>>(C);
    for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + state.epsilon);

    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    std::vector<double> out(x.numel());
    const auto a = state.alpha.values(), b = state.beta.values();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t j = (n * C + c) * plane + i;
                (*xhat)[j] = (v[j] - mean[c]) * (*inv_std)[c];
                out[j] = a[c] * (*xhat)[j] + b[c];
            }

    Tensor in = x, alpha = state.alpha, beta = state.beta;
    const bool batch_stats = mode == Mode::train;
    auto back = [in, alpha, beta, xhat, inv_std, N, C, plane, m, batch_stats](detail::Node& self) mutable {
        const auto& dy = self.grad;
        const auto a = alpha.values();
        for (std::size_t c = 0; c < C; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t j = (n * C + c) * plane + i;
                    sum_dy += dy[j];
                    sum_dy_xhat += dy[j] * (*xhat)[j];
                }
            if (wants_grad(beta)) beta.mutable_grad()[c] += sum_dy;
            if (wants_grad(alpha)) alpha.mutable_grad()[c] += sum_dy_xhat;
            if (!wants_grad(in)) continue;
            auto dx = in.mutable_grad();
            const double md = static_cast<double>(m);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t j = (n * C + c) * plane + i;
                    if (batch_stats)
                        dx[j] += a[c] * (*inv_std)[c] / md * (md * dy[j] - sum_dy - (*xhat)[j] * sum_dy_xhat);
                    else
                        dx[j] += a[c] * (*inv_std)[c] * dy[j];
                }
        }
    };
    return make_result(x.shape(), std::move(out), {x, state.alpha, state.beta}, std::move(back), op);
}

}  // namespace detail

/// Train mode normalizes with this batch's population statistics and folds them
/// into `domain`'s running estimate; eval mode uses the stored running estimate.
inline Tensor adabn_forward(const Tensor& x, AdaBnLayerState& state, DomainId domain, Mode mode) {
    if (domain == kSharedStatsSlot) throw ConfigError("adabn_forward: domain id -1 is reserved");
    return detail::normalize_with_slot(x, state, domain, mode, "adabn");
}

/// Regular batch normalization: every input shares one statistics slot.
inline Tensor plain_bn_forward(const Tensor& x, AdaBnLayerState& state, Mode mode) {
    return detail::normalize_with_slot(x, state, kSharedStatsSlot, mode, "batchnorm");
}

enum class NormKind { adaptive, plain };

inline Tensor normalize(const Tensor& x, AdaBnLayerState& state, NormKind kind, DomainId domain, Mode mode) {
    return kind == NormKind::adaptive ? adabn_forward(x, state, domain, mode) : plain_bn_forward(x, state, mode);
}

}  // namespace sfcn
