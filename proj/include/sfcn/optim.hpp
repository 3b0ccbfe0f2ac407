#pragma once

// SGD with momentum and decoupled-from-bias weight decay, plus the plateau rule that
// scales the learning rate down when the smoothed training loss flattens.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sfcn/error.hpp"
#include "sfcn/model.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

struct TrainConfig {
    std::size_t batch_size = 4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double base_lr = 1e-6;  // losses are pixel sums, so the step must be small
    double lr_decay_factor = 0.9;
    std::size_t plateau_patience = 500;
    double ema_decay = 0.99;
    double plateau_tolerance = 1e-3;  // relative EMA improvement counted as progress
    std::size_t max_iters = 2000;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    bool augment = true;

    /// Fine-tuning schedule of the original work (pre-trained encoder assumed).
    static TrainConfig paper() {
        TrainConfig c;
        c.batch_size = 12;
        c.base_lr = 1e-8;
        c.max_iters = 150000;
        return c;
    }

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
        if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train: base_lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
        if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
            throw ConfigError("train: lr_decay_factor must lie in (0, 1]");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1)");
        if (!(plateau_tolerance >= 0.0)) throw ConfigError("train: plateau_tolerance must be >= 0");
        if (plateau_patience == 0) throw ConfigError("train: plateau_patience must be >= 1");
    }
};

struct SgdHyper {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

/// v <- momentum * v + g + wd * p ; p <- p - lr * v. Weight decay applies only to
/// parameters flagged for it. Every gradient is checked before any parameter moves.
inline void sgd_step(std::vector<NamedParam>& params, std::vector<std::vector<double>>& velocity,
                     const SgdHyper& h) {
    if (velocity.size() != params.size()) velocity.assign(params.size(), {});
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad())
            if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient in " + p.name);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto& v = velocity[i];
        if (v.size() != t.numel()) v.assign(t.numel(), 0.0);
        const double wd = params[i].decay ? h.weight_decay : 0.0;
        auto x = t.mutable_values();
        const bool has = t.has_grad();
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double g = has ? t.grad()[j] : 0.0;
            v[j] = h.momentum * v[j] + g + wd * x[j];
            x[j] -= h.lr * v[j];
        }
    }
}

inline void zero_grads(std::vector<NamedParam>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

/// Exponential moving average of the loss with the "flat" test: when the EMA has
/// not improved by more than `tolerance` (relative) over `patience` steps, the
/// learning rate is multiplied by `factor` and the window restarts.
struct PlateauState {
    double ema = 0.0;
    bool has_ema = false;
    double window_start = 0.0;  // EMA value when the current window began
    std::size_t window_steps = 0;
    double lr = 0.0;
    std::size_t decays = 0;

    friend bool operator==(const PlateauState&, const PlateauState&) = default;

    /// Returns true when the learning rate was decayed by this observation.
    bool observe(double loss, const TrainConfig& c) {
        ema = has_ema ? c.ema_decay * ema + (1.0 - c.ema_decay) * loss : loss;
        if (!has_ema) window_start = ema;
        has_ema = true;
        if (++window_steps < c.plateau_patience) return false;
        const bool flat = ema > window_start * (1.0 - c.plateau_tolerance);
        window_start = ema;
        window_steps = 0;
        if (!flat) return false;
        lr *= c.lr_decay_factor;
        ++decays;
        return true;
    }
};

}  // namespace sfcn
