#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sfcn/gradcheck.hpp"
#include "sfcn/metrics.hpp"

using namespace sfcn;

namespace {

Tensor plane(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor({1, h, w}, std::move(v)); }

Tensor random_map(std::size_t h, std::size_t w, Rng& rng) { return random_tensor({1, h, w}, rng, 0, 1); }

Tensor random_truth(std::size_t h, std::size_t w, Rng& rng, double p = 0.4) {
    Tensor t({1, h, w});
    for (double& v : t.mutable_values()) v = rng.coin(p) ? 1.0 : 0.0;
    return t;
}

// Threshold index t marks a pixel positive when its 8-bit level exceeds t.
struct Counts {
    double tp = 0, fp = 0, fn = 0;
};

Counts brute_counts(const std::vector<Tensor>& maps, const std::vector<Tensor>& truths, int t) {
    Counts c;
    for (std::size_t k = 0; k < maps.size(); ++k)
        for (std::size_t i = 0; i < maps[k].numel(); ++i) {
            const int level = static_cast<int>(std::floor(maps[k].values()[i] * 255.0 + 0.5));
            const bool pos = level > t, fg = truths[k].values()[i] == 1.0;
            c.tp += pos && fg;
            c.fp += pos && !fg;
            c.fn += !pos && fg;
        }
    return c;
}

double brute_mae(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += std::fabs(a.values()[i] - b.values()[i]);
    return s / a.numel();
}

struct SFixture {
    const char* name;
    std::size_t h, w;
    std::vector<double> map, truth;
    double expected;
};

const SFixture kSFixtures[] = {
#include "s_measure_fixtures.inc"
};

}  // namespace

TEST(PrCurve, MapEqualToBinaryTruthIsPerfectBelowTopThreshold) {
    Rng rng(81);
    const Tensor g = random_truth(6, 6, rng);
    const auto curve = pr_curve({g}, {g});
    ASSERT_EQ(curve.size(), 256u);
    for (std::size_t t = 0; t < 255; ++t) {
        EXPECT_EQ(curve[t].precision, 1.0) << t;
        EXPECT_EQ(curve[t].recall, 1.0) << t;
    }
    // Nothing is predicted at the last index: 0/0 precision is 1, recall 0.
    EXPECT_EQ(curve[255].precision, 1.0);
    EXPECT_EQ(curve[255].recall, 0.0);
}

TEST(PrCurve, AllZeroMapHasZeroRecall) {
    Rng rng(82);
    const Tensor g = random_truth(5, 5, rng);
    for (const auto& p : pr_curve({plane(5, 5, std::vector<double>(25, 0.0))}, {g})) EXPECT_EQ(p.recall, 0.0);
}

TEST(PrCurve, FourPixelExampleAtOneHalf) {
    const auto curve = pr_curve({plane(1, 4, {0.9, 0.6, 0.3, 0.1})}, {plane(1, 4, {1, 1, 0, 0})});
    // ">= 0.5" is level >= 128, curve index 127.
    EXPECT_EQ(adaptive_index(0.5), 127u);
    EXPECT_EQ(curve[127].precision, 1.0);
    EXPECT_EQ(curve[127].recall, 1.0);
    // Lower thresholds admit the 0.3 pixel (level 77) as a false positive.
    EXPECT_NEAR(curve[76].precision, 2.0 / 3.0, 1e-15);
}

TEST(PrCurve, MatchesBruteForceCountsOnSmallImages) {
    Rng rng(83);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Tensor> maps, truths;
        const std::size_t n = 1 + rng.below(3);
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4);
            Tensor m = random_map(h, w, rng);
            // Land some pixels exactly on level boundaries.
            for (double& v : m.mutable_values())
                if (rng.coin(0.3)) v = static_cast<double>(rng.below(256)) / 255.0;
            maps.push_back(m);
            truths.push_back(random_truth(h, w, rng));
        }
        const auto curve = pr_curve(maps, truths);
        for (int t = 0; t < 256; ++t) {
            const Counts c = brute_counts(maps, truths, t);
            const double p = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 1.0;
            const double r = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 0.0;
            ASSERT_DOUBLE_EQ(curve[t].precision, p) << "t=" << t;
            ASSERT_DOUBLE_EQ(curve[t].recall, r) << "t=" << t;
        }
    }
}

TEST(PrCurve, EmptyDatasetIsAnError) {
    EXPECT_THROW(pr_curve({}, {}), ConfigError);
    EXPECT_THROW(evaluate({}, {}), ConfigError);
}

TEST(PrCurve, SizeMismatchIsShapeError) {
    EXPECT_THROW(pr_curve({plane(2, 2, {0, 0, 0, 0})}, {plane(2, 1, {0, 0})}), ShapeError);
}

TEST(PrCurve, RecallNeverIncreasesWithThreshold) {
    Rng rng(84);
    const auto curve = pr_curve({random_map(8, 8, rng), random_map(8, 8, rng)}, {random_truth(8, 8, rng), random_truth(8, 8, rng)});
    for (std::size_t t = 1; t < 256; ++t) EXPECT_LE(curve[t].recall, curve[t - 1].recall);
}

TEST(FMeasure, HandValues) {
    EXPECT_DOUBLE_EQ(f_measure(1, 1), 1.0);
    EXPECT_NEAR(f_measure(0.5, 1), 1.3 * 0.5 / (0.15 + 1), 1e-15);
    EXPECT_NEAR(f_measure(0.5, 1), 0.5652, 1e-4);
    EXPECT_EQ(f_measure(0, 0.7), 0.0);
    EXPECT_EQ(f_measure(0, 0), 0.0);
    EXPECT_NEAR(f_measure(0.6, 0.3, 1.0), 2 * 0.18 / 0.9, 1e-15);
}

TEST(Mae, HandValues) {
    Rng rng(85);
    const Tensor g = random_truth(4, 4, rng);
    EXPECT_EQ(mae(g, g), 0.0);
    EXPECT_DOUBLE_EQ(mae(plane(4, 4, std::vector<double>(16, 0.5)), g), 0.5);
    EXPECT_NEAR(mae(plane(1, 2, {0.2, 0.8}), plane(1, 2, {0, 1})), 0.2, 1e-15);
    EXPECT_EQ(mae(Tensor({2, 1}, {0.25, 0.75}), Tensor({2, 1}, {0, 0})), 0.5);
}

TEST(Mae, MatchesBruteForceAndObeysTriangleInequality) {
    Rng rng(86);
    for (int i = 0; i < 50; ++i) {
        const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4);
        const Tensor a = random_map(h, w, rng), b = random_map(h, w, rng), c = random_map(h, w, rng);
        EXPECT_NEAR(mae(a, b), brute_mae(a, b), 1e-15);
        EXPECT_LE(mae(a, c), mae(a, b) + mae(b, c) + 1e-15);
        EXPECT_GE(mae(a, b), 0.0);
        EXPECT_LE(mae(a, b), 1.0);
    }
}

TEST(SMeasure, MapEqualToTruthScoresOne) {
    Rng rng(87);
    for (int i = 0; i < 10; ++i) {
        Tensor g = random_truth(7, 9, rng);
        g.mutable_values()[0] = 1;
        g.mutable_values()[1] = 0;
        EXPECT_NEAR(s_measure(g, g), 1.0, 1e-6);
    }
}

TEST(SMeasure, InvertedMapScoresBelowHalf) {
    Rng rng(88);
    for (int i = 0; i < 10; ++i) {
        Tensor g = random_truth(8, 8, rng);
        g.mutable_values()[0] = 1;
        g.mutable_values()[1] = 0;
        Tensor inv({1, 8, 8});
        for (std::size_t k = 0; k < 64; ++k) inv.mutable_values()[k] = 1.0 - g.values()[k];
        EXPECT_LT(s_measure(inv, g), 0.5);
        EXPECT_GE(s_measure(inv, g), 0.0);
    }
}

TEST(SMeasure, AgreesWithIndependentImplementation) {
    for (const SFixture& f : kSFixtures) {
        const Tensor m = plane(f.h, f.w, f.map), g = plane(f.h, f.w, f.truth);
        EXPECT_NEAR(s_measure(m, g), f.expected, 1e-12) << f.name;
    }
    EXPECT_GE(std::size(kSFixtures), 15u);
}

TEST(SMeasure, StaysInUnitIntervalOnRandomPairs) {
    Rng rng(89);
    for (int i = 0; i < 100; ++i) {
        const std::size_t h = 2 + rng.below(6), w = 2 + rng.below(6);
        const double s = s_measure(random_map(h, w, rng), random_truth(h, w, rng, rng.uniform(0, 1)));
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Evaluate, FmaxDominatesAdaptiveF) {
    Rng rng(90);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<Tensor> maps, truths;
        for (int k = 0; k < 3; ++k) {
            Tensor m = random_map(6, 6, rng);
            const double s = rng.uniform(0.05, 1.0);
            for (double& v : m.mutable_values()) v *= s;
            maps.push_back(m);
            truths.push_back(random_truth(6, 6, rng, rng.uniform(0.1, 0.6)));
        }
        const MetricsReport r = evaluate(maps, truths);
        EXPECT_GE(r.f_max, r.f_adaptive);
        for (const auto& row : r.per_image) EXPECT_GE(row.f_max, row.f_adaptive);
        for (const auto& p : r.pr_curve) {
            EXPECT_GE(p.precision, 0.0);
            EXPECT_LE(p.precision, 1.0);
            EXPECT_GE(p.recall, 0.0);
            EXPECT_LE(p.recall, 1.0);
        }
    }
}

TEST(Evaluate, InvariantUnderDatasetPermutation) {
    Rng rng(91);
    std::vector<Tensor> maps, truths;
    for (int k = 0; k < 5; ++k) {
        maps.push_back(random_map(5, 4, rng));
        truths.push_back(random_truth(5, 4, rng));
    }
    const MetricsReport a = evaluate(maps, truths);
    std::vector<std::size_t> order{3, 0, 4, 2, 1};
    std::vector<Tensor> pm, pt;
    for (std::size_t i : order) {
        pm.push_back(maps[i]);
        pt.push_back(truths[i]);
    }
    const MetricsReport b = evaluate(pm, pt);
    EXPECT_EQ(a.f_max, b.f_max);
    EXPECT_EQ(a.f_adaptive, b.f_adaptive);
    EXPECT_NEAR(a.mae, b.mae, 1e-15);
    EXPECT_NEAR(a.s_measure, b.s_measure, 1e-15);
    const MetricsReport c = evaluate(maps, truths);
    EXPECT_EQ(a.mae, c.mae);
    EXPECT_EQ(a.s_measure, c.s_measure);
}

TEST(Evaluate, AdaptiveThresholdIsTwiceTheDatasetMean) {
    const std::vector<Tensor> maps{plane(1, 4, {0.1, 0.1, 0.2, 0.0}), plane(1, 4, {0.3, 0.1, 0.0, 0.0})};
    const std::vector<Tensor> truths{plane(1, 4, {0, 0, 1, 0}), plane(1, 4, {1, 0, 0, 0})};
    const MetricsReport r = evaluate(maps, truths, {"a", "b"});
    EXPECT_NEAR(r.adaptive_threshold, 0.2, 1e-15);
    // Pixels >= 0.2: 0.2 (fg) and 0.3 (fg); precision 1, recall 1.
    EXPECT_NEAR(r.f_adaptive, 1.0, 1e-15);
    EXPECT_EQ(r.per_image[1].id, "b");
    EXPECT_NEAR(r.mae, (brute_mae(maps[0], truths[0]) + brute_mae(maps[1], truths[1])) / 2, 1e-15);
}

TEST(Evaluate, AdaptiveIndexFollowsGreaterOrEqualRule) {
    EXPECT_EQ(adaptive_index(0.0), 0u);
    EXPECT_EQ(adaptive_index(1.0), 254u);
    EXPECT_EQ(adaptive_index(2.0), 254u);
    EXPECT_EQ(adaptive_index(100.0 / 255.0), 99u);
    EXPECT_EQ(adaptive_index(100.5 / 255.0), 100u);
}

TEST(Evaluate, CsvWritersEmitHeadersAndRows) {
    Rng rng(92);
    const auto dir = std::filesystem::temp_directory_path() / "sfcn_metrics_csv";
    std::filesystem::create_directories(dir);
    const MetricsReport r = evaluate({random_map(4, 4, rng)}, {random_truth(4, 4, rng)}, {"img0"});
    write_report_csv(dir / "report.csv", "sfcn", r);
    write_report_csv(dir / "report.csv", "other", r, false);
    write_pr_csv(dir / "pr.csv", r.pr_curve);
    write_per_image_csv(dir / "per.csv", r);
    const auto lines = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        std::vector<std::string> out;
        for (std::string l; std::getline(in, l);) out.push_back(l);
        return out;
    };
    const auto report = lines(dir / "report.csv");
    ASSERT_EQ(report.size(), 3u);
    EXPECT_EQ(report[0], "method,F_max,F_adaptive,MAE,S");
    EXPECT_EQ(report[2].substr(0, 6), "other,");
    EXPECT_EQ(lines(dir / "pr.csv").size(), 257u);
    EXPECT_EQ(lines(dir / "per.csv")[1].substr(0, 5), "img0,");
    std::filesystem::remove_all(dir);
}
