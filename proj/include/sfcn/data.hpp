#pragma once

// Images, masks and datasets: PPM/PGM conversion, resampling, augmentation,
// dataset means and a synthetic salient-object generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sfcn/error.hpp"
#include "sfcn/pnm.hpp"
#include "sfcn/reflection.hpp"
#include "sfcn/rng.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

/// One training pair: image (3, H, W) in [0, 1] and binary mask (1, H, W).
struct Sample {
    Tensor image;
    Tensor mask;
    std::string id;
};

// ---------------------------------------------------------------------------
// Conversion to and from 8-bit rasters

inline std::uint8_t quantize_unit(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Tensor image_from_pnm(const PnmImage& img) {
    if (img.channels != 3) throw FormatError("image: expected a P6 (colour) file", 0);
    const std::size_t plane = img.width * img.height;
    Tensor t(Shape{3, img.height, img.width});
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = img.pixels[i * 3 + c] / 255.0;
    return t;
}

/// Single-channel map in [0, 1]; `binarize` thresholds at 0.5.
inline Tensor map_from_pnm(const PnmImage& img, bool binarize) {
    if (img.channels != 1) throw FormatError("mask: expected a P5 (grey) file", 0);
    Tensor t(Shape{1, img.height, img.width});
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = img.pixels[i] / 255.0;
        v[i] = binarize ? (x >= 0.5 ? 1.0 : 0.0) : x;
    }
    return t;
}

inline PnmImage image_to_pnm(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("save_image: expected (3, height, width), got " + shape_str(image.shape()));
    PnmImage img{3, image.dim(2), image.dim(1), {}};
    const std::size_t plane = img.width * img.height;
    img.pixels.resize(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = quantize_unit(image.values()[c * plane + i]);
    return img;
}

/// Accepts (1, H, W) or (H, W).
inline PnmImage map_to_pnm(const Tensor& map) {
    const bool ok = (map.rank() == 3 && map.dim(0) == 1) || map.rank() == 2;
    if (!ok) throw ShapeError("save_map: expected (1, height, width), got " + shape_str(map.shape()));
    const std::size_t h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
    PnmImage img{1, w, h, std::vector<std::uint8_t>(w * h)};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = quantize_unit(map.values()[i]);
    return img;
}

inline Tensor load_image(const std::filesystem::path& path) { return image_from_pnm(read_pnm(path)); }
inline Tensor load_mask(const std::filesystem::path& path) { return map_from_pnm(read_pnm(path), true); }
inline Tensor load_map(const std::filesystem::path& path) { return map_from_pnm(read_pnm(path), false); }
inline void save_image(const std::filesystem::path& path, const Tensor& image) { write_pnm(path, image_to_pnm(image)); }
inline void save_map(const std::filesystem::path& path, const Tensor& map) { write_pnm(path, map_to_pnm(map)); }

// ---------------------------------------------------------------------------
// Geometry

enum class Interp { bilinear, nearest };

/// Resamples a (C, H, W) tensor with half-pixel-centre alignment.
inline Tensor resize(const Tensor& src, Extent2 target, Interp interp = Interp::bilinear) {
    if (src.rank() != 3) throw ShapeError("resize: expected (channels, height, width), got " + shape_str(src.shape()));
    if (target.h == 0 || target.w == 0) throw ShapeError("resize: target extents must be >= 1");
    const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
    if (target.h == H && target.w == W) return src.detach();
    Tensor out(Shape{C, target.h, target.w});
    auto o = out.mutable_values();
    const auto s = src.values();
    const double sy = static_cast<double>(H) / static_cast<double>(target.h);
    const double sx = static_cast<double>(W) / static_cast<double>(target.w);
    for (std::size_t y = 0; y < target.h; ++y)
        for (std::size_t x = 0; x < target.w; ++x) {
            if (interp == Interp::nearest) {
                const auto iy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * sy));
                const auto ix = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * sx));
                for (std::size_t c = 0; c < C; ++c) o[(c * target.h + y) * target.w + x] = s[(c * H + iy) * W + ix];
                continue;
            }
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
            const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < C; ++c) {
                const double* p = s.data() + c * H * W;
                const double top = p[y0 * W + x0] * (1 - tx) + p[y0 * W + x1] * tx;
                const double bottom = p[y1 * W + x0] * (1 - tx) + p[y1 * W + x1] * tx;
                o[(c * target.h + y) * target.w + x] = top * (1 - ty) + bottom * ty;
            }
        }
    return out;
}

/// Image bilinear, mask nearest-neighbour so it stays binary.
inline Sample resize_sample(const Sample& s, Extent2 target) {
    return {resize(s.image, target, Interp::bilinear), resize(s.mask, target, Interp::nearest), s.id};
}

inline Tensor crop(const Tensor& src, std::size_t top, std::size_t left, Extent2 size) {
    const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
    if (top + size.h > H || left + size.w > W || size.h == 0 || size.w == 0)
        throw ShapeError("crop: window outside the source extent");
    Tensor out(Shape{C, size.h, size.w});
    auto o = out.mutable_values();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < size.h; ++y)
            for (std::size_t x = 0; x < size.w; ++x)
                o[(c * size.h + y) * size.w + x] = src.values()[(c * H + top + y) * W + left + x];
    return out;
}

/// Horizontal mirror of a (C, H, W) tensor.
inline Tensor mirror(const Tensor& src) {
    const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
    Tensor out(src.shape());
    auto o = out.mutable_values();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) o[(c * H + y) * W + x] = src.values()[(c * H + y) * W + (W - 1 - x)];
    return out;
}

struct AugmentSpec {
    double min_crop = 0.8;
    double max_crop = 1.0;
    double mirror_probability = 0.5;
};

struct CropDecision {
    std::size_t top = 0, left = 0;
    Extent2 size;
    bool mirror = false;
};

inline CropDecision draw_augmentation(Extent2 extent, const AugmentSpec& spec, Rng& rng) {
    if (!(spec.min_crop > 0.0 && spec.min_crop <= spec.max_crop && spec.max_crop <= 1.0))
        throw ConfigError("augment: crop fractions must satisfy 0 < min <= max <= 1");
    CropDecision d;
    const auto side = [&](std::size_t n) {
        const double f = rng.uniform(spec.min_crop, spec.max_crop);
        return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(n))), 1, n);
    };
    d.size = {side(extent.h), side(extent.w)};
    d.top = static_cast<std::size_t>(rng.below(extent.h - d.size.h + 1));
    d.left = static_cast<std::size_t>(rng.below(extent.w - d.size.w + 1));
    d.mirror = rng.coin(spec.mirror_probability);
    return d;
}

inline Sample apply_augmentation(const Sample& s, const CropDecision& d) {
    const Extent2 extent{s.image.dim(1), s.image.dim(2)};
    Sample out{resize(crop(s.image, d.top, d.left, d.size), extent, Interp::bilinear),
               resize(crop(s.mask, d.top, d.left, d.size), extent, Interp::nearest), s.id};
    if (d.mirror) {
        out.image = mirror(out.image);
        out.mask = mirror(out.mask);
    }
    return out;
}

/// Random crop (resized back to full size) and horizontal mirror, applied
/// identically to image and mask.
inline Sample augment(const Sample& s, Rng& rng, const AugmentSpec& spec = {}) {
    return apply_augmentation(s, draw_augmentation({s.image.dim(1), s.image.dim(2)}, spec, rng));
}

inline Rgb dataset_mean(const std::vector<Sample>& samples) {
    if (samples.empty()) throw ConfigError("dataset_mean: empty dataset");
    Rgb sum{};
    double count = 0.0;
    for (const auto& s : samples) {
        const std::size_t plane = s.image.dim(1) * s.image.dim(2);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i) sum[c] += s.image.values()[c * plane + i];
        count += static_cast<double>(plane);
    }
    for (double& v : sum) v /= count;
    return sum;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind { disk, rectangle, blob };
enum class Background { flat, gradient, noise };

struct SynthSpec {
    std::size_t count = 20;
    Extent2 canvas{64, 64};
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    std::vector<ShapeKind> kinds{ShapeKind::disk, ShapeKind::rectangle, ShapeKind::blob};
    std::vector<Background> backgrounds{Background::flat, Background::gradient, Background::noise};
    double min_contrast = 0.3;
    double max_contrast = 0.7;
    // Shape radius as a fraction of the shorter canvas side.
    double min_size = 0.12;
    double max_size = 0.3;
    double min_foreground = 0.05;
    double max_foreground = 0.5;
    std::size_t supersample = 4;
    std::uint64_t seed = 1;

    void validate() const {
        if (canvas.h == 0 || canvas.w == 0) throw ConfigError("synth: canvas must be non-empty");
        if (min_shapes == 0 || min_shapes > max_shapes) throw ConfigError("synth: need 1 <= min_shapes <= max_shapes");
        if (kinds.empty() || backgrounds.empty()) throw ConfigError("synth: shape kinds and backgrounds must be non-empty");
        if (!(0.0 <= min_contrast && min_contrast <= max_contrast && max_contrast <= 1.0))
            throw ConfigError("synth: contrast range must satisfy 0 <= min <= max <= 1");
        if (!(0.0 < min_size && min_size <= max_size)) throw ConfigError("synth: size range must satisfy 0 < min <= max");
        if (!(0.0 <= min_foreground && min_foreground < max_foreground && max_foreground <= 1.0))
            throw ConfigError("synth: foreground fraction bounds must satisfy 0 <= min < max <= 1");
        if (supersample == 0) throw ConfigError("synth: supersample must be >= 1");
    }
};

namespace detail {

struct ShapeInstance {
    ShapeKind kind;
    double cx, cy, radius;
    double aspect = 1.0, angle = 0.0;  // rectangles
    double harmonics[3] = {0, 0, 0};   // blobs
    double phases[3] = {0, 0, 0};
    Rgb colour{};

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        switch (kind) {
            case ShapeKind::disk: return dx * dx + dy * dy < radius * radius;
            case ShapeKind::rectangle: {
                const double c = std::cos(angle), s = std::sin(angle);
                const double u = c * dx + s * dy, v = -s * dx + c * dy;
                return std::abs(u) < radius * aspect && std::abs(v) < radius / aspect;
            }
            case ShapeKind::blob: {
                const double th = std::atan2(dy, dx);
                double r = 1.0;
                for (int m = 0; m < 3; ++m) r += harmonics[m] * std::sin((m + 2) * th + phases[m]);
                return dx * dx + dy * dy < radius * radius * r * r;
            }
        }
        return false;
    }
};

inline Rgb random_colour(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

// A colour whose every channel differs from `base` by at least `contrast` where the
// [0, 1] range allows it.
inline Rgb contrasting_colour(const Rgb& base, double contrast, Rng& rng) {
    Rgb c{};
    for (std::size_t k = 0; k < 3; ++k) {
        const bool up = base[k] + contrast <= 1.0 && (base[k] - contrast < 0.0 || rng.coin());
        const double jitter = rng.uniform(0.0, 0.1);
        c[k] = std::clamp(up ? base[k] + contrast + jitter : base[k] - contrast - jitter, 0.0, 1.0);
    }
    return c;
}

}  // namespace detail

/// Deterministic scenes of 1-3 shapes on textured backgrounds. Image pixels carry
/// anti-aliased coverage; the mask is the exact support at pixel centres.
inline std::vector<Sample> generate_synthetic(const SynthSpec& spec_in,
                                              const std::function<void(const std::string&)>& warn = {}) {
    SynthSpec spec = spec_in;
    spec.validate();
    const double shorter = static_cast<double>(std::min(spec.canvas.h, spec.canvas.w));
    if (spec.max_size > 0.5) {
        const std::string msg = "synth: max_size " + std::to_string(spec.max_size) +
                                " exceeds the canvas; clamped to 0.5 of the shorter side";
        if (warn) warn(msg); else std::cerr << "warning: " << msg << '\n';
        spec.max_size = 0.5;
        spec.min_size = std::min(spec.min_size, spec.max_size);
    }

    const std::size_t H = spec.canvas.h, W = spec.canvas.w, plane = H * W;
    std::vector<Sample> out;
    out.reserve(spec.count);
    for (std::size_t idx = 0; idx < spec.count; ++idx) {
        Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + idx + 1);
        std::vector<detail::ShapeInstance> shapes;
        Tensor mask(Shape{1, H, W});
        bool accepted = false;
        for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
            shapes.clear();
            const std::size_t n = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
            for (std::size_t k = 0; k < n; ++k) {
                detail::ShapeInstance s{};
                s.kind = spec.kinds[rng.below(spec.kinds.size())];
                s.radius = rng.uniform(spec.min_size, spec.max_size) * shorter;
                s.cx = rng.uniform(s.radius * 0.6, static_cast<double>(W) - s.radius * 0.6);
                s.cy = rng.uniform(s.radius * 0.6, static_cast<double>(H) - s.radius * 0.6);
                s.aspect = rng.uniform(0.7, 1.4);
                s.angle = rng.uniform(0.0, std::numbers::pi);
                for (int m = 0; m < 3; ++m) {
                    s.harmonics[m] = rng.uniform(0.0, 0.15);
                    s.phases[m] = rng.uniform(0.0, 2.0 * std::numbers::pi);
                }
                shapes.push_back(s);
            }
            double fg = 0.0;
            auto mv = mask.mutable_values();
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    bool inside = false;
                    for (const auto& s : shapes) inside = inside || s.contains(x + 0.5, y + 0.5);
                    mv[y * W + x] = inside ? 1.0 : 0.0;
                    fg += mv[y * W + x];
                }
            fg /= static_cast<double>(plane);
            accepted = fg >= spec.min_foreground && fg <= spec.max_foreground;
        }
        if (!accepted)
            throw ConfigError("synth: could not meet the foreground fraction bounds for sample " + std::to_string(idx));

        // Background texture.
        const Background bg_kind = spec.backgrounds[rng.below(spec.backgrounds.size())];
        const Rgb base = detail::random_colour(rng);
        const Rgb other = detail::random_colour(rng);
        const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
        Tensor image(Shape{3, H, W});
        auto iv = image.mutable_values();
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double t = 0.0;
                if (bg_kind == Background::gradient) {
                    const double u = (std::cos(dir) * (x + 0.5) / W + std::sin(dir) * (y + 0.5) / H);
                    t = 0.5 * std::clamp(0.5 + 0.5 * u, 0.0, 1.0);
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    double v = base[c] * (1.0 - t) + other[c] * t;
                    if (bg_kind == Background::noise) v += rng.normal(0.0, 0.04);
                    iv[c * plane + y * W + x] = std::clamp(v, 0.0, 1.0);
                }
            }

        const double contrast = rng.uniform(spec.min_contrast, spec.max_contrast);
        for (auto& s : shapes) s.colour = detail::contrasting_colour(base, contrast, rng);

        // Composite shapes in order with supersampled coverage.
        const std::size_t ss = spec.supersample;
        for (const auto& s : shapes)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    std::size_t hits = 0;
                    for (std::size_t a = 0; a < ss; ++a)
                        for (std::size_t b = 0; b < ss; ++b)
                            hits += s.contains(x + (b + 0.5) / static_cast<double>(ss),
                                               y + (a + 0.5) / static_cast<double>(ss));
                    if (!hits) continue;
                    const double alpha = static_cast<double>(hits) / static_cast<double>(ss * ss);
                    for (std::size_t c = 0; c < 3; ++c) {
                        double& v = iv[c * plane + y * W + x];
                        v = v * (1.0 - alpha) + s.colour[c] * alpha;
                    }
                }

        char id[32];
        std::snprintf(id, sizeof id, "synth_%05zu", idx);
        out.push_back({image, mask, id});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset folders: <root>/images/<id>.ppm, <root>/masks/<id>.pgm, optional manifest.txt

inline std::vector<std::string> list_ids(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
    std::vector<std::string> ids;
    const fs::path manifest = root / "manifest.txt";
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
            if (!line.empty()) ids.push_back(line);
        }
        return ids;
    }
    const fs::path images = root / "images";
    if (!fs::is_directory(images)) throw IoError("dataset has no images/ directory: " + root.string());
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".ppm") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Loads every listed pair, optionally resampling to `size`.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root, std::optional<Extent2> size = {}) {
    std::vector<Sample> out;
    for (const auto& id : list_ids(root)) {
        Sample s{load_image(root / "images" / (id + ".ppm")), load_mask(root / "masks" / (id + ".pgm")), id};
        if (s.image.dim(1) != s.mask.dim(1) || s.image.dim(2) != s.mask.dim(2))
            throw ShapeError("dataset: image and mask of '" + id + "' differ in size");
        if (size) s = resize_sample(s, *size);
        out.push_back(std::move(s));
    }
    return out;
}

inline void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    std::ofstream manifest(root / "manifest.txt", std::ios::binary);
    for (const auto& s : samples) {
        save_image(root / "images" / (s.id + ".ppm"), s.image);
        save_map(root / "masks" / (s.id + ".pgm"), s.mask);
        manifest << s.id << '\n';
    }
}

}  // namespace sfcn
