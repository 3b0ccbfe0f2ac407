#pragma once

// Reciprocal input pair: origin X - M and its planar reflection -k (X - M).

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "sfcn/error.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

using Rgb = std::array<double, 3>;

enum class MeanKind { fixed, dataset, per_image, middle, zero };

inline std::string to_string(MeanKind k) {
    switch (k) {
        case MeanKind::fixed: return "fixed";
        case MeanKind::dataset: return "dataset";
        case MeanKind::per_image: return "per-image";
        case MeanKind::middle: return "middle";
        case MeanKind::zero: return "zero";
    }
    return "?";
}

inline MeanKind parse_mean_kind(const std::string& s) {
    if (s == "fixed") return MeanKind::fixed;
    if (s == "dataset") return MeanKind::dataset;
    if (s == "per-image") return MeanKind::per_image;
    if (s == "middle") return MeanKind::middle;
    if (s == "zero") return MeanKind::zero;
    throw ConfigError("unknown mean kind '" + s + "' (expected fixed, dataset, per-image, middle or zero)");
}

/// Conventional ImageNet RGB channel means on the [0, 1] scale (123.68, 116.78, 103.94 / 255).
inline constexpr Rgb kImageNetMean{123.68 / 255.0, 116.78 / 255.0, 103.94 / 255.0};

/// Where the reflection mean M comes from.
struct MeanSpec {
    MeanKind kind = MeanKind::fixed;
    // Required for fixed; filled in by the data module for dataset.
    std::optional<Rgb> vector = kImageNetMean;

    static MeanSpec fixed(Rgb v) { return {MeanKind::fixed, v}; }
    static MeanSpec dataset(Rgb v) { return {MeanKind::dataset, v}; }
    static MeanSpec per_image() { return {MeanKind::per_image, std::nullopt}; }
    static MeanSpec middle() { return {MeanKind::middle, std::nullopt}; }
    static MeanSpec zero() { return {MeanKind::zero, std::nullopt}; }

    void validate() const {
        // A dataset mean may stay unset until the training data is loaded.
        if (kind == MeanKind::fixed && !vector) throw ConfigError("fixed mean requires a 3-component vector");
        if (vector)
            for (double v : *vector)
                if (!std::isfinite(v)) throw ConfigError("mean vector components must be finite");
    }
};

namespace detail {

inline void require_image(const Tensor& image, const char* op) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError(std::string(op) + ": image must be (3, height, width), got " + shape_str(image.shape()));
}

}  // namespace detail

inline Rgb channel_means(const Tensor& image) {
    detail::require_image(image, "channel_means");
    const std::size_t plane = image.dim(1) * image.dim(2);
    Rgb m{};
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += image.values()[c * plane + i];
        m[c] = s / static_cast<double>(plane);
    }
    return m;
}

inline Rgb resolve_mean(const MeanSpec& spec, const Tensor& image) {
    spec.validate();
    switch (spec.kind) {
        case MeanKind::fixed: return *spec.vector;
        case MeanKind::dataset:
            if (!spec.vector) throw ConfigError("dataset mean has not been computed from the training data yet");
            return *spec.vector;
        case MeanKind::per_image: return channel_means(image);
        case MeanKind::middle: return {128.0 / 255.0, 128.0 / 255.0, 128.0 / 255.0};
        case MeanKind::zero: return {0.0, 0.0, 0.0};
    }
    throw ConfigError("unreachable mean kind");
}

struct ReflectionPair {
    Tensor origin;
    Tensor reflected;
    double k = 1.0;
    Rgb mean_used{};
    // False for k < 0, where both inputs are positive multiples of X - M.
    bool complementary = true;
};

/// origin = X - M (per channel), reflected = -k * origin.
inline ReflectionPair reflect(const Tensor& image, const Rgb& mean, double k) {
    detail::require_image(image, "reflect");
    if (k == 0.0 || !std::isfinite(k))
        throw ConfigError("reflect: k must be finite and non-zero (k = 0 makes the reflected input identically zero)");
    const std::size_t plane = image.dim(1) * image.dim(2);
    Tensor origin(image.shape());
    Tensor reflected(image.shape());
    auto o = origin.mutable_values();
    auto r = reflected.mutable_values();
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t j = c * plane + i;
            o[j] = image.values()[j] - mean[c];
            r[j] = -k * o[j];
        }
    return {origin, reflected, k, mean, k > 0.0};
}

}  // namespace sfcn
