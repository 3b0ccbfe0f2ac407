#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sfcn/data.hpp"
#include "sfcn/gradcheck.hpp"

using namespace sfcn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sfcn_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> bytes(const std::string& header, std::vector<std::uint8_t> payload) {
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

double foreground(const Tensor& mask) {
    double s = 0;
    for (double v : mask.values()) s += v;
    return s;
}

Sample random_sample(Extent2 e, Rng& rng) {
    Tensor m({1, e.h, e.w});
    for (double& v : m.mutable_values()) v = rng.coin(0.3) ? 1.0 : 0.0;
    return {random_tensor({3, e.h, e.w}, rng, 0, 1), m, "x"};
}

// Bilinear sampling written as a tent-kernel sum over every source pixel.
double tent_sample(const Tensor& src, std::size_t c, double u, double v) {
    const std::size_t H = src.dim(1), W = src.dim(2);
    u = std::clamp(u, 0.0, double(H - 1));
    v = std::clamp(v, 0.0, double(W - 1));
    double acc = 0;
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            acc += std::max(0.0, 1 - std::abs(u - i)) * std::max(0.0, 1 - std::abs(v - j)) *
                   src.values()[(c * H + i) * W + j];
    return acc;
}

}  // namespace

TEST(Pnm, GreyMaskPayloadDecodesAndBinarizes) {
    const Tensor m = map_from_pnm(decode_pnm(bytes("P5\n2 2\n255\n", {0, 255, 255, 0})), true);
    EXPECT_EQ(m.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), (std::vector<double>{0, 1, 1, 0}));
    const Tensor t = map_from_pnm(decode_pnm(bytes("P5 2 1 255 ", {127, 128})), true);
    EXPECT_EQ(t.values()[0], 0.0);
    EXPECT_EQ(t.values()[1], 1.0);
}

TEST(Pnm, ColourPixelDecodesPerChannel) {
    const Tensor img = image_from_pnm(decode_pnm(bytes("P6\n1 1\n255\n", {255, 0, 0})));
    EXPECT_EQ(img.shape(), (Shape{3, 1, 1}));
    EXPECT_EQ(img.values()[0], 1.0);
    EXPECT_EQ(img.values()[1], 0.0);
    EXPECT_EQ(img.values()[2], 0.0);
}

TEST(Pnm, CommentsInHeaderAreSkipped) {
    const PnmImage p = decode_pnm(bytes("P5\n# made by hand\n3 1\n# maxval next\n255\n", {1, 2, 3}));
    EXPECT_EQ(p.width, 3u);
    EXPECT_EQ(p.pixels, (std::vector<std::uint8_t>{1, 2, 3}));
}

TEST(Pnm, MalformedInputsReportOffsets) {
    const auto offset_of = [](const std::vector<std::uint8_t>& b) -> std::size_t {
        try {
            decode_pnm(b);
        } catch (const FormatError& e) {
            return e.offset();
        }
        ADD_FAILURE() << "no error";
        return 0;
    };
    EXPECT_EQ(offset_of(bytes("P3\n1 1\n255\n", {0})), 0u);          // unsupported magic
    EXPECT_EQ(offset_of(bytes("P5\n2 2\n255\n", {1, 2, 3})), 14u);   // truncated payload ends at byte 14
    EXPECT_EQ(offset_of(bytes("P5\nx 2\n255\n", {})), 3u);           // width missing
    EXPECT_EQ(offset_of(bytes("P5\n1 1\n65535\n", {0, 0})), 7u);    // 16-bit maxval
    EXPECT_THROW(decode_pnm(bytes("P", {})), FormatError);
    EXPECT_THROW(image_from_pnm(decode_pnm(bytes("P5 1 1 255 ", {9}))), FormatError);
}

TEST(Pnm, SaveLoadRoundTripIsExactAfterQuantization) {
    Rng rng(101);
    const fs::path dir = scratch("roundtrip");
    const Tensor img = random_tensor({3, 5, 7}, rng, 0, 1);
    save_image(dir / "a.ppm", img);
    const Tensor back = load_image(dir / "a.ppm");
    ASSERT_EQ(back.shape(), img.shape());
    for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(back.values()[i], quantize_unit(img.values()[i]) / 255.0);
    // Once quantized, a second trip is the identity bit for bit.
    save_image(dir / "b.ppm", back);
    EXPECT_EQ(read_file(dir / "a.ppm"), read_file(dir / "b.ppm"));
    const Tensor again = load_image(dir / "b.ppm");
    EXPECT_TRUE(std::equal(again.values().begin(), again.values().end(), back.values().begin()));

    const Tensor map = random_tensor({1, 4, 6}, rng, 0, 1);
    save_map(dir / "m.pgm", map);
    const Tensor mb = load_map(dir / "m.pgm");
    for (std::size_t i = 0; i < map.numel(); ++i) EXPECT_NEAR(mb.values()[i], map.values()[i], 0.5 / 255 + 1e-12);
    fs::remove_all(dir);
}

TEST(Pnm, MissingFileIsIoError) { EXPECT_THROW(load_image("/nonexistent/none.ppm"), IoError); }

TEST(Resize, SameSizeIsIdentity) {
    Rng rng(102);
    const Tensor img = random_tensor({3, 6, 5}, rng, 0, 1);
    const Tensor out = resize(img, {6, 5});
    EXPECT_TRUE(std::equal(out.values().begin(), out.values().end(), img.values().begin()));
}

TEST(Resize, ConstantStaysConstant) {
    for (Interp in : {Interp::bilinear, Interp::nearest}) {
        const Tensor out = resize(Tensor({2, 3, 5}, 0.37), {7, 2}, in);
        for (double v : out.values()) EXPECT_NEAR(v, 0.37, 1e-15);
    }
}

TEST(Resize, CheckerboardUpsampleMatchesTentOracle) {
    const Tensor src({1, 2, 2}, {0, 1, 1, 0});
    const Tensor out = resize(src, {4, 4});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            EXPECT_NEAR(out.values()[y * 4 + x], tent_sample(src, 0, (y + 0.5) / 2 - 0.5, (x + 0.5) / 2 - 0.5), 1e-15);
    EXPECT_NEAR(out.values()[1 * 4 + 1], 0.375, 1e-15);
}

TEST(Resize, RandomResamplingMatchesTentOracle) {
    Rng rng(103);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t H = 1 + rng.below(6), W = 1 + rng.below(6), h = 1 + rng.below(9), w = 1 + rng.below(9);
        const Tensor src = random_tensor({2, H, W}, rng, 0, 1);
        const Tensor out = resize(src, {h, w});
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    EXPECT_NEAR(out.values()[(c * h + y) * w + x],
                                tent_sample(src, c, (y + 0.5) * H / h - 0.5, (x + 0.5) * W / w - 0.5), 1e-12);
    }
}

TEST(Resize, NearestKeepsMasksBinary) {
    Rng rng(104);
    const Sample s = resize_sample(random_sample({9, 7}, rng), {16, 16});
    for (double v : s.mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    EXPECT_EQ(s.image.dim(1), s.mask.dim(1));
}

TEST(Augment, MirrorIsAnInvolution) {
    Rng rng(105);
    const Tensor img = random_tensor({3, 4, 5}, rng);
    const Tensor twice = mirror(mirror(img));
    EXPECT_TRUE(std::equal(twice.values().begin(), twice.values().end(), img.values().begin()));
}

TEST(Augment, FullFrameWithoutMirrorIsIdentity) {
    Rng rng(106);
    const Sample s = random_sample({6, 8}, rng);
    const Sample out = apply_augmentation(s, CropDecision{0, 0, {6, 8}, false});
    EXPECT_TRUE(std::equal(out.image.values().begin(), out.image.values().end(), s.image.values().begin()));
    EXPECT_TRUE(std::equal(out.mask.values().begin(), out.mask.values().end(), s.mask.values().begin()));
    AugmentSpec none{1.0, 1.0, 0.0};
    const Sample r = augment(s, rng, none);
    EXPECT_TRUE(std::equal(r.image.values().begin(), r.image.values().end(), s.image.values().begin()));
}

TEST(Augment, MirrorPreservesForegroundCount) {
    Rng rng(107);
    for (int i = 0; i < 10; ++i) {
        const Sample s = random_sample({7, 9}, rng);
        const Sample m = apply_augmentation(s, CropDecision{0, 0, {7, 9}, true});
        EXPECT_EQ(foreground(m.mask), foreground(s.mask));
    }
}

TEST(Augment, ImageAndMaskStayAligned) {
    // Image channel 0 carries the mask itself, so any misalignment shows up.
    Rng rng(108);
    for (int i = 0; i < 20; ++i) {
        Sample s = random_sample({16, 16}, rng);
        for (std::size_t k = 0; k < 256; ++k) s.image.mutable_values()[k] = s.mask.values()[k];
        const CropDecision d = draw_augmentation({16, 16}, AugmentSpec{}, rng);
        EXPECT_GE(d.size.h, 13u);
        EXPECT_LE(d.size.h, 16u);
        const Sample a = apply_augmentation(s, d);
        const Tensor nearest = resize(crop(Tensor({1, 16, 16}, std::vector<double>(s.image.values().begin(), s.image.values().begin() + 256)),
                                           d.top, d.left, d.size),
                                      {16, 16}, Interp::nearest);
        const Tensor expect = d.mirror ? mirror(nearest) : nearest;
        EXPECT_TRUE(std::equal(expect.values().begin(), expect.values().end(), a.mask.values().begin()));
        EXPECT_EQ(a.image.shape(), s.image.shape());
    }
}

TEST(Augment, ReproducibleUnderFixedSeed) {
    Rng r0(109);
    const Sample s = random_sample({12, 12}, r0);
    Rng a(5), b(5);
    for (int i = 0; i < 5; ++i) {
        const Sample x = augment(s, a), y = augment(s, b);
        EXPECT_TRUE(std::equal(x.image.values().begin(), x.image.values().end(), y.image.values().begin()));
    }
}

TEST(DatasetMean, HandExamples) {
    std::vector<Sample> one{{Tensor({3, 2, 2}, 0.4), Tensor({1, 2, 2}), "a"}};
    for (double v : dataset_mean(one)) EXPECT_NEAR(v, 0.4, 1e-15);
    std::vector<Sample> two{{Tensor({3, 3, 3}, 0.0), Tensor({1, 3, 3}), "a"}, {Tensor({3, 3, 3}, 1.0), Tensor({1, 3, 3}), "b"}};
    for (double v : dataset_mean(two)) EXPECT_DOUBLE_EQ(v, 0.5);
    EXPECT_THROW(dataset_mean({}), ConfigError);
}

TEST(DatasetMean, MatchesStreamingOracle) {
    Rng rng(110);
    std::vector<Sample> set;
    for (int i = 0; i < 6; ++i) set.push_back(random_sample({1 + rng.below(8), 1 + rng.below(8)}, rng));
    // Welford running mean per channel.
    Rgb mean{};
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, n = 0;
        for (const auto& s : set) {
            const std::size_t plane = s.image.dim(1) * s.image.dim(2);
            for (std::size_t i = 0; i < plane; ++i) m += (s.image.values()[c * plane + i] - m) / ++n;
        }
        mean[c] = m;
    }
    const Rgb got = dataset_mean(set);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(got[c], mean[c], 1e-12);
}

TEST(Synthetic, CountZeroIsEmpty) {
    SynthSpec s;
    s.count = 0;
    EXPECT_TRUE(generate_synthetic(s).empty());
}

TEST(Synthetic, SameSeedGivesIdenticalBytes) {
    SynthSpec s;
    s.count = 4;
    const auto a = generate_synthetic(s), b = generate_synthetic(s);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(encode_pnm(image_to_pnm(a[i].image)), encode_pnm(image_to_pnm(b[i].image)));
        EXPECT_TRUE(std::equal(a[i].image.values().begin(), a[i].image.values().end(), b[i].image.values().begin()));
        EXPECT_EQ(a[i].id, b[i].id);
    }
    s.seed = 2;
    const auto c = generate_synthetic(s);
    EXPECT_FALSE(std::equal(a[0].image.values().begin(), a[0].image.values().end(), c[0].image.values().begin()));
}

TEST(Synthetic, ValuesInRangeAndMasksWithinForegroundBounds) {
    SynthSpec s;
    s.count = 25;
    s.seed = 17;
    for (const auto& smp : generate_synthetic(s)) {
        ASSERT_EQ(smp.image.shape(), (Shape{3, 64, 64}));
        ASSERT_EQ(smp.mask.shape(), (Shape{1, 64, 64}));
        for (double v : smp.image.values()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        for (double v : smp.mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
        const double frac = foreground(smp.mask) / 4096.0;
        EXPECT_GE(frac, s.min_foreground) << smp.id;
        EXPECT_LE(frac, s.max_foreground) << smp.id;
    }
}

TEST(Synthetic, OversizedShapesAreClampedWithWarning) {
    SynthSpec s;
    s.count = 2;
    s.min_size = 0.4;
    s.max_size = 0.9;
    s.max_foreground = 0.95;
    std::vector<std::string> warnings;
    const auto out = generate_synthetic(s, [&](const std::string& w) { warnings.push_back(w); });
    EXPECT_EQ(out.size(), 2u);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("clamped"), std::string::npos);
}

TEST(Synthetic, InvalidSpecsAreRejected) {
    SynthSpec s;
    s.min_shapes = 0;
    EXPECT_THROW(generate_synthetic(s), ConfigError);
    s = SynthSpec{};
    s.min_foreground = 0.6;
    s.max_foreground = 0.5;
    EXPECT_THROW(generate_synthetic(s), ConfigError);
    s = SynthSpec{};
    s.kinds.clear();
    EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(DatasetFolder, SaveAndLoadRoundTrip) {
    const fs::path dir = scratch("folder");
    SynthSpec s;
    s.count = 3;
    const auto set = generate_synthetic(s);
    save_dataset(dir, set);
    EXPECT_EQ(list_ids(dir), (std::vector<std::string>{"synth_00000", "synth_00001", "synth_00002"}));
    const auto back = load_dataset(dir);
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back[i].id, set[i].id);
        EXPECT_TRUE(std::equal(back[i].mask.values().begin(), back[i].mask.values().end(), set[i].mask.values().begin()));
        for (std::size_t k = 0; k < set[i].image.numel(); ++k)
            EXPECT_EQ(back[i].image.values()[k], quantize_unit(set[i].image.values()[k]) / 255.0);
    }
    const auto small = load_dataset(dir, Extent2{32, 32});
    EXPECT_EQ(small[0].image.shape(), (Shape{3, 32, 32}));

    // Without a manifest the ids come from images/, sorted.
    fs::remove(dir / "manifest.txt");
    EXPECT_EQ(list_ids(dir).size(), 3u);
    EXPECT_THROW(list_ids(dir / "nope"), IoError);
    fs::remove_all(dir);
}

TEST(DatasetFolder, MismatchedPairIsShapeError) {
    const fs::path dir = scratch("mismatch");
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    save_image(dir / "images" / "a.ppm", Tensor({3, 4, 4}, 0.5));
    save_map(dir / "masks" / "a.pgm", Tensor({1, 4, 5}, 1.0));
    EXPECT_THROW(load_dataset(dir), ShapeError);
    fs::remove_all(dir);
}
