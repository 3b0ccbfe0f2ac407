#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sfcn/rng.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = true;
};

struct GradCheckOptions {
    double step = 1e-6;
    double tolerance = 1e-4;
    // Entries probed per leaf; 0 means every entry.
    std::size_t max_entries_per_leaf = 0;
    std::uint64_t seed = 7;
};

/// Compares the taped gradient of `loss()` with central finite differences for
/// every entry of `leaves`. The error measure is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                       std::vector<Tensor> leaves, const GradCheckOptions& opt = {}) {
    for (auto& l : leaves) l.zero_grad();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) {
        if (l.has_grad())
            analytic.emplace_back(l.grad().begin(), l.grad().end());
        else
            analytic.emplace_back(l.numel(), 0.0);
    }

    GradCheckResult result{name};
    Rng rng(opt.seed);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto values = leaves[li].mutable_values();
        std::vector<std::size_t> idx(values.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opt.max_entries_per_leaf && idx.size() > opt.max_entries_per_leaf) {
            for (std::size_t i = 0; i < opt.max_entries_per_leaf; ++i)
                std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
            idx.resize(opt.max_entries_per_leaf);
        }
        for (std::size_t i : idx) {
            const double saved = values[i];
            values[i] = saved + opt.step;
            const double up = loss().item();
            values[i] = saved - opt.step;
            const double down = loss().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            const double err = std::abs(analytic[li][i] - numeric) / std::max(1.0, std::abs(numeric));
            result.max_rel_error = std::max(result.max_rel_error, err);
            ++result.checked;
        }
    }
    result.passed = result.max_rel_error < opt.tolerance && std::isfinite(result.max_rel_error);
    for (auto& l : leaves) l.zero_grad();
    return result;
}

/// Random tensor with entries uniform in [lo, hi).
inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    for (double& v : t.mutable_values()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace sfcn
