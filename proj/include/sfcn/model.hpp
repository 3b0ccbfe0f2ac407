#pragma once

// Symmetrical fully convolutional network: two sibling encoders over the reciprocal
// input pair (weights optionally shared, normalization statistics per domain), a
// coarse-to-fine fusion decoder and a two-channel softmax head.

#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "sfcn/adabn.hpp"
#include "sfcn/error.hpp"
#include "sfcn/reflection.hpp"
#include "sfcn/rng.hpp"
#include "sfcn/tensor.hpp"

namespace sfcn {

inline constexpr DomainId kOriginDomain = 0;
inline constexpr DomainId kReflectedDomain = 1;

enum class InputMode { paired, origin_only, reflected_only };

inline std::string to_string(InputMode m) {
    switch (m) {
        case InputMode::paired: return "paired";
        case InputMode::origin_only: return "origin";
        case InputMode::reflected_only: return "reflected";
    }
    return "?";
}

inline InputMode parse_input_mode(const std::string& s) {
    if (s == "paired") return InputMode::paired;
    if (s == "origin") return InputMode::origin_only;
    if (s == "reflected") return InputMode::reflected_only;
    throw ConfigError("unknown input mode '" + s + "' (expected paired, origin or reflected)");
}

inline std::string to_string(NormKind k) { return k == NormKind::adaptive ? "adabn" : "bn"; }

inline NormKind parse_norm_kind(const std::string& s) {
    if (s == "adabn") return NormKind::adaptive;
    if (s == "bn") return NormKind::plain;
    throw ConfigError("unknown normalization '" + s + "' (expected adabn or bn)");
}

struct EncoderBlock {
    std::size_t convs = 2;
    std::size_t channels = 16;
    friend bool operator==(const EncoderBlock&, const EncoderBlock&) = default;
};

struct SfcnConfig {
    Extent2 input_size{64, 64};
    std::vector<EncoderBlock> encoder_blocks{{2, 16}, {2, 32}, {3, 64}, {3, 64}, {3, 64}};
    std::size_t fusion_channels = 64;
    std::size_t head_kernel = 3;
    bool share_weights = true;
    double k = 1.0;
    MeanSpec mean{};
    NormKind norm = NormKind::adaptive;
    InputMode input = InputMode::paired;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    /// VGG-16 layout: 13 convolutions in 5 blocks, 384x384 input.
    static SfcnConfig paper() {
        SfcnConfig c;
        c.input_size = {384, 384};
        c.encoder_blocks = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
        return c;
    }

    /// 13 convolutions kept, narrow channels, 64x64 input.
    static SfcnConfig desk() { return SfcnConfig{}; }

    /// Two blocks on 8x8 inputs, small enough for exhaustive finite differences.
    static SfcnConfig tiny() {
        SfcnConfig c;
        c.input_size = {8, 8};
        c.encoder_blocks = {{2, 4}, {2, 8}};
        c.fusion_channels = 4;
        return c;
    }

    std::size_t pool_count() const { return encoder_blocks.empty() ? 0 : encoder_blocks.size() - 1; }

    std::size_t conv_count() const {
        std::size_t n = 0;
        for (const auto& b : encoder_blocks) n += b.convs;
        return n;
    }

    bool paired() const { return input == InputMode::paired; }

    /// Encoder parameter sets held: two only for paired inputs without sharing.
    std::size_t branch_count() const { return paired() && !share_weights ? 2 : 1; }

    void validate() const {
        if (encoder_blocks.empty()) throw ConfigError("model: at least one encoder block is required");
        for (std::size_t i = 0; i < encoder_blocks.size(); ++i)
            if (encoder_blocks[i].convs == 0 || encoder_blocks[i].channels == 0)
                throw ConfigError("model: encoder block " + std::to_string(i) + " needs >= 1 conv and channel");
        const std::size_t div = std::size_t{1} << pool_count();
        if (input_size.h == 0 || input_size.w == 0 || input_size.h % div || input_size.w % div)
            throw ConfigError("model: input size " + std::to_string(input_size.h) + "x" +
                              std::to_string(input_size.w) + " must be divisible by " + std::to_string(div));
        if (fusion_channels == 0) throw ConfigError("model: fusion_channels must be >= 1");
        if (head_kernel == 0 || head_kernel % 2 == 0) throw ConfigError("model: head_kernel must be odd");
        if (k == 0.0 || !std::isfinite(k)) throw ConfigError("model: reflection scale k must be finite and non-zero");
        if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("model: bn_momentum must lie in (0, 1]");
        if (!(bn_epsilon > 0.0)) throw ConfigError("model: bn_epsilon must be positive");
        mean.validate();
    }
};

struct ConvLayer {
    ConvSpec spec;
    Tensor weight;
    Tensor bias;  // may be undefined
};

struct EncoderBranch {
    std::vector<ConvLayer> convs;
    std::vector<AdaBnLayerState> norms;
    std::vector<std::size_t> block_ends;  // index of the last conv of each block
};

struct FusionLevel {
    ConvLayer reduce;    // 1x1 to fusion width
    ConvLayer upsample;  // x2 deconvolution; undefined weight at the finest level
};

struct SfcnParams {
    std::vector<EncoderBranch> branches;
    std::vector<FusionLevel> fusion;  // finest level first
    ConvLayer head;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = true;
};

struct PredictionMaps {
    Tensor z0, z1;  // background / foreground scores
    Tensor fg, bg;  // softmax probabilities
    Tensor saliency;
};

namespace detail {

inline Tensor msra(Shape shape, double fan_in, Rng& rng) {
    Tensor t(std::move(shape), 0.0, true);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (double& v : t.mutable_values()) v = rng.normal(0.0, stddev);
    return t;
}

inline ConvLayer make_conv(const ConvSpec& spec, Rng& rng, bool with_bias = true) {
    ConvLayer l;
    l.spec = spec;
    l.weight = msra({spec.out_channels, spec.in_channels, spec.kernel.h, spec.kernel.w},
                    static_cast<double>(spec.patch_size()), rng);
    if (with_bias) l.bias = Tensor(Shape{spec.out_channels}, 0.0, true);
    return l;
}

inline ConvLayer make_deconv(const ConvSpec& spec, Rng& rng) {
    ConvLayer l;
    l.spec = spec;
    // Each output pixel receives in * (kh / sh) * (kw / sw) contributions.
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel.h * spec.kernel.w) /
                          static_cast<double>(spec.stride.h * spec.stride.w);
    l.weight = msra({spec.in_channels, spec.out_channels, spec.kernel.h, spec.kernel.w}, fan_in, rng);
    return l;
}

inline ConvSpec same_conv(std::size_t in, std::size_t out, std::size_t k) {
    return ConvSpec{in, out, {k, k}, {1, 1}, {k / 2, k / 2}};
}

}  // namespace detail

inline SfcnParams init_params(const SfcnConfig& config, Rng& rng) {
    config.validate();
    SfcnParams p;
    for (std::size_t b = 0; b < config.branch_count(); ++b) {
        EncoderBranch br;
        std::size_t in = 3;
        for (const auto& block : config.encoder_blocks) {
            for (std::size_t j = 0; j < block.convs; ++j) {
                br.convs.push_back(detail::make_conv(detail::same_conv(in, block.channels, 3), rng));
                br.norms.emplace_back(block.channels, config.bn_epsilon, config.bn_momentum);
                in = block.channels;
            }
            br.block_ends.push_back(br.convs.size() - 1);
        }
        p.branches.push_back(std::move(br));
    }
    const std::size_t L = config.encoder_blocks.size();
    const std::size_t streams = config.paired() ? 2 : 1;
    const std::size_t F = config.fusion_channels;
    for (std::size_t i = 0; i < L; ++i) {
        FusionLevel level;
        const std::size_t in = streams * config.encoder_blocks[i].channels + (i + 1 < L ? F : 0);
        level.reduce = detail::make_conv(ConvSpec{in, F, {1, 1}, {1, 1}, {0, 0}}, rng);
        if (i > 0) level.upsample = detail::make_deconv(upsample2x_spec(F, F), rng);
        p.fusion.push_back(std::move(level));
    }
    p.head = detail::make_conv(detail::same_conv(F, 2, config.head_kernel), rng);
    return p;
}

/// Every learnable tensor with a stable name. Biases and normalization affine
/// parameters are excluded from weight decay.
// Tensors are shared handles, so copying SfcnParams aliases the weights.
// This gives an independent set that can be trained separately.
inline SfcnParams deep_copy(const SfcnParams& p) {
    auto own = [](Tensor& t) {
        if (t.defined()) t = t.clone(t.requires_grad());
    };
    auto own_conv = [&](ConvLayer& c) {
        own(c.weight);
        own(c.bias);
    };
    SfcnParams out = p;
    for (auto& b : out.branches) {
        for (auto& c : b.convs) own_conv(c);
        for (auto& n : b.norms) {
            own(n.alpha);
            own(n.beta);
        }
    }
    for (auto& f : out.fusion) {
        own_conv(f.reduce);
        own_conv(f.upsample);
    }
    own_conv(out.head);
    return out;
}

inline std::vector<NamedParam> named_parameters(const SfcnParams& p) {
    std::vector<NamedParam> out;
    for (std::size_t b = 0; b < p.branches.size(); ++b) {
        const auto& br = p.branches[b];
        const std::string pre = "enc" + std::to_string(b) + ".";
        for (std::size_t j = 0; j < br.convs.size(); ++j) {
            const std::string id = std::to_string(j);
            out.push_back({pre + "conv" + id + ".weight", br.convs[j].weight, true});
            out.push_back({pre + "conv" + id + ".bias", br.convs[j].bias, false});
            out.push_back({pre + "bn" + id + ".alpha", br.norms[j].alpha, false});
            out.push_back({pre + "bn" + id + ".beta", br.norms[j].beta, false});
        }
    }
    for (std::size_t i = 0; i < p.fusion.size(); ++i) {
        const std::string pre = "fuse" + std::to_string(i) + ".";
        out.push_back({pre + "reduce.weight", p.fusion[i].reduce.weight, true});
        out.push_back({pre + "reduce.bias", p.fusion[i].reduce.bias, false});
        if (p.fusion[i].upsample.weight.defined())
            out.push_back({pre + "upsample.weight", p.fusion[i].upsample.weight, true});
    }
    out.push_back({"head.weight", p.head.weight, true});
    out.push_back({"head.bias", p.head.bias, false});
    return out;
}

/// Learnable scalars stored for the sibling encoders (convolutions and affine terms).
inline std::size_t encoder_parameter_count(const SfcnParams& p) {
    std::size_t n = 0;
    for (const auto& br : p.branches) {
        for (const auto& c : br.convs) n += c.weight.numel() + (c.bias.defined() ? c.bias.numel() : 0);
        for (const auto& s : br.norms) n += s.alpha.numel() + s.beta.numel();
    }
    return n;
}

inline std::size_t parameter_count(const SfcnParams& p) {
    std::size_t n = 0;
    for (const auto& np : named_parameters(p)) n += np.tensor.numel();
    return n;
}

inline Tensor apply_conv(const Tensor& x, const ConvLayer& l) { return conv2d(x, l.weight, l.bias, l.spec); }

/// Runs one sibling branch: every conv is followed by normalization under
/// `domain` and ReLU; returns the output of the last conv of each block.
inline std::vector<Tensor> encode(const Tensor& input, EncoderBranch& branch, NormKind norm, DomainId domain,
                                  Mode mode) {
    std::vector<Tensor> features;
    Tensor x = input;
    std::size_t block = 0;
    for (std::size_t j = 0; j < branch.convs.size(); ++j) {
        x = relu(normalize(apply_conv(x, branch.convs[j]), branch.norms[j], norm, domain, mode));
        if (block < branch.block_ends.size() && j == branch.block_ends[block]) {
            features.push_back(x);
            if (++block < branch.block_ends.size()) x = maxpool2d(x);
        }
    }
    return features;
}

/// Hierarchical fusion: f_L = h([g_L, g*_L]), f_l = h([g_l, f_{l+1}, g*_l]) with h
/// a 1x1 conv + ReLU followed by x2 deconvolution (identity at the finest level).
/// `g_star` is empty for single-input models.
inline Tensor fuse(const std::vector<Tensor>& g, const std::vector<Tensor>& g_star, const SfcnParams& params) {
    const std::size_t L = g.size();
    if (L == 0) throw ShapeError("fuse: no feature levels");
    if (L != params.fusion.size())
        throw ShapeError("fuse: got " + std::to_string(L) + " levels, model has " +
                         std::to_string(params.fusion.size()));
    if (!g_star.empty() && g_star.size() != L)
        throw ShapeError("fuse: sibling feature lists differ in length (" + std::to_string(L) + " vs " +
                         std::to_string(g_star.size()) + ")");
    for (std::size_t l = 0; l < g_star.size(); ++l)
        if (g[l].shape() != g_star[l].shape())
            throw ShapeError("fuse: level " + std::to_string(l + 1) + " shapes differ: " + shape_str(g[l].shape()) +
                             " vs " + shape_str(g_star[l].shape()));

    Tensor f;
    for (std::size_t i = L; i-- > 0;) {
        std::vector<Tensor> parts{g[i]};
        if (f.defined()) parts.push_back(f);
        if (!g_star.empty()) parts.push_back(g_star[i]);
        const FusionLevel& level = params.fusion[i];
        f = relu(apply_conv(concat_channels(parts), level.reduce));
        if (level.upsample.weight.defined()) f = deconv2d(f, level.upsample.weight, level.upsample.spec);
    }
    return f;
}

/// Saliency readout from the two head score planes.
inline PredictionMaps readout(const Tensor& scores) {
    PredictionMaps m;
    m.z0 = slice_channels(scores, 0, 1);
    m.z1 = slice_channels(scores, 1, 1);
    std::tie(m.fg, m.bg) = softmax_pairwise(m.z0, m.z1);
    m.saliency = relu(sub(m.fg, m.bg));
    return m;
}

/// Forward pass from already reflected inputs, each (N, 3, H, W).
inline PredictionMaps forward(const Tensor& origin, const Tensor& reflected, SfcnParams& params,
                              const SfcnConfig& config, Mode mode) {
    std::vector<Tensor> g, g_star;
    switch (config.input) {
        case InputMode::paired: {
            g = encode(origin, params.branches[0], config.norm, kOriginDomain, mode);
            EncoderBranch& sibling = params.branches.size() > 1 ? params.branches[1] : params.branches[0];
            g_star = encode(reflected, sibling, config.norm, kReflectedDomain, mode);
            break;
        }
        case InputMode::origin_only:
            g = encode(origin, params.branches[0], config.norm, kOriginDomain, mode);
            break;
        case InputMode::reflected_only:
            g = encode(reflected, params.branches[0], config.norm, kReflectedDomain, mode);
            break;
    }
    return readout(apply_conv(fuse(g, g_star, params), params.head));
}

struct InputBatch {
    Tensor origin;     // (N, 3, H, W)
    Tensor reflected;  // (N, 3, H, W)
};

/// Reflects every image of a batch with its resolved mean.
inline InputBatch make_inputs(const std::vector<Tensor>& images, const SfcnConfig& config) {
    std::vector<Tensor> o, r;
    for (const auto& img : images) {
        const ReflectionPair pair = reflect(img, resolve_mean(config.mean, img), config.k);
        o.push_back(pair.origin);
        r.push_back(pair.reflected);
    }
    return {stack(o), stack(r)};
}

inline std::vector<Tensor> unstack(const Tensor& batch) {
    if (batch.rank() < 1) throw ShapeError("unstack: rank-0 input");
    Shape item(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t block = shape_numel(item);
    std::vector<Tensor> out;
    for (std::size_t n = 0; n < batch.dim(0); ++n)
        out.emplace_back(item, std::vector<double>(batch.values().begin() + static_cast<std::ptrdiff_t>(n * block),
                                                   batch.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * block)));
    return out;
}

struct SfcnModel {
    SfcnConfig config;
    SfcnParams params;

    static SfcnModel create(const SfcnConfig& config, std::uint64_t seed) {
        Rng rng(seed);
        return {config, init_params(config, rng)};
    }

    /// Full pipeline on (3, H, W) images: reflect, encode both domains, fuse, read out.
    PredictionMaps predict(const std::vector<Tensor>& images, Mode mode) {
        const std::size_t div = std::size_t{1} << config.pool_count();
        for (const auto& img : images)
            if (img.rank() != 3 || img.dim(1) % div || img.dim(2) % div)
                throw ShapeError("predict: image shape " + shape_str(img.shape()) +
                                 " needs height and width divisible by " + std::to_string(div) +
                                 "; resize to the model input size first");
        const InputBatch in = make_inputs(images, config);
        return forward(in.origin, in.reflected, params, config, mode);
    }
};

}  // namespace sfcn
