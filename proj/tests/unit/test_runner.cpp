#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sfcn/sfcn.hpp"

using namespace sfcn;
namespace fs = std::filesystem;

namespace {

class RunnerTest : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("sfcn_runner_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    // Tiny model over a handful of small synthetic images.
    static RunConfig small_config() {
        RunConfig c = apply_keys(RunConfig{}, {{"model.preset", "tiny"}});
        c.model.input_size = {16, 16};
        c.model.mean = MeanSpec::fixed(kImageNetMean);
        c.train.batch_size = 2;
        c.train.base_lr = 1e-4;
        c.train.max_iters = 4;
        c.data.count = 4;
        c.data.canvas = {20, 24};
        c.data.seed = 5;
        return c;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

std::string bytes(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_F(RunnerTest, GenDataCountZeroWritesEmptyDataset) {
    RunConfig c = small_config();
    c.data.count = 0;
    std::ostringstream log;
    EXPECT_EQ(cmd_gen_data(c, dir / "d", log), 0u);
    EXPECT_TRUE(fs::is_directory(dir / "d" / "images"));
    EXPECT_TRUE(fs::is_directory(dir / "d" / "masks"));
    EXPECT_TRUE(fs::is_empty(dir / "d" / "images"));
    EXPECT_TRUE(list_ids(dir / "d").empty());
}

TEST_F(RunnerTest, GenDataIsDeterministicAndLoadsBack) {
    const RunConfig c = small_config();
    std::ostringstream log;
    cmd_gen_data(c, dir / "a", log);
    cmd_gen_data(c, dir / "b", log);
    EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
    EXPECT_TRUE(fs::exists(dir / "a" / kResolvedConfigName));

    const auto data = load_dataset(dir / "a");
    ASSERT_EQ(data.size(), 4u);
    for (const auto& s : data) {
        EXPECT_EQ(s.image.dim(1), 20u);
        EXPECT_EQ(s.image.dim(2), 24u);
        for (double v : s.mask.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    }

    RunConfig other = c;
    other.data.seed = 6;
    cmd_gen_data(other, dir / "c", log);
    EXPECT_NE(tree(dir / "a").at("images/" + data[0].id + ".ppm"), tree(dir / "c").at("images/" + data[0].id + ".ppm"));
}

TEST_F(RunnerTest, TrainZeroItersReturnsInitialCheckpoint) {
    RunConfig c = small_config();
    c.train.max_iters = 0;
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    const TrainOutcome t = cmd_train(c, {dir / "d", dir / "run", std::nullopt}, log);
    EXPECT_TRUE(t.log.empty());
    EXPECT_EQ(t.final.state.step, 0u);
    EXPECT_EQ(bytes(encode_checkpoint(t.final)), bytes(encode_checkpoint(initial_checkpoint(c.model, c.loss, c.train))));
    EXPECT_EQ(slurp(dir / "run" / "final.sfcn"), bytes(encode_checkpoint(t.final)));
    EXPECT_EQ(slurp(dir / "run" / "train_log.csv"), log_header());
}

TEST_F(RunnerTest, TrainResolvesDatasetMeanFromData) {
    RunConfig c = small_config();
    c.train.max_iters = 0;
    c.model.mean = MeanSpec{MeanKind::dataset, std::nullopt};
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    const TrainOutcome t = cmd_train(c, {dir / "d", dir / "run", std::nullopt}, log);
    ASSERT_TRUE(t.final.config.mean.vector.has_value());
    const Rgb want = dataset_mean(load_dataset(dir / "d", c.model.input_size));
    for (int ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ((*t.final.config.mean.vector)[ch], want[ch]);
}

TEST_F(RunnerTest, TrainWritesLogAndPeriodicCheckpoints) {
    RunConfig c = small_config();
    c.train.checkpoint_every = 2;
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    const TrainOutcome t = cmd_train(c, {dir / "d", dir / "run", std::nullopt}, log);
    EXPECT_EQ(t.final.state.step, 4u);
    ASSERT_EQ(t.log.size(), 4u);
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint_00000002.sfcn"));
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint_00000004.sfcn"));
    std::string expect = log_header();
    for (const auto& r : t.log) expect += log_line(r);
    EXPECT_EQ(slurp(dir / "run" / "train_log.csv"), expect);
}

TEST_F(RunnerTest, ResumeMatchesUninterruptedRun) {
    RunConfig c = small_config();
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    cmd_train(c, {dir / "d", dir / "straight", std::nullopt}, log);

    RunConfig first = c;
    first.train.max_iters = 2;
    cmd_train(first, {dir / "d", dir / "split", std::nullopt}, log);
    // Resuming into the same directory keeps the first two log rows.
    cmd_train(c, {dir / "d", dir / "split", dir / "split" / "final.sfcn"}, log);

    EXPECT_EQ(slurp(dir / "straight" / "final.sfcn"), slurp(dir / "split" / "final.sfcn"));
    EXPECT_EQ(slurp(dir / "straight" / "train_log.csv"), slurp(dir / "split" / "train_log.csv"));
}

TEST_F(RunnerTest, TrainRejectsMissingOrEmptyData) {
    std::ostringstream log;
    EXPECT_THROW(cmd_train(small_config(), {dir / "nope", dir / "run", std::nullopt}, log), ConfigError);
    RunConfig c = small_config();
    c.data.count = 0;
    cmd_gen_data(c, dir / "empty", log);
    EXPECT_THROW(cmd_train(small_config(), {dir / "empty", dir / "run", std::nullopt}, log), ConfigError);
}

TEST_F(RunnerTest, InferWritesFullResolutionMapsDeterministically) {
    RunConfig c = small_config();
    c.train.max_iters = 2;
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    cmd_train(c, {dir / "d", dir / "run", std::nullopt}, log);

    // A second folder with a size the model never saw.
    fs::create_directories(dir / "odd");
    Rng rng(11);
    save_image(dir / "odd" / "x.ppm", random_tensor({3, 13, 29}, rng, 0, 1));

    for (const auto* out : {"m1", "m2"}) {
        EXPECT_EQ(cmd_infer({dir / "run" / "final.sfcn", dir / "d", dir / out}), 4u);
        EXPECT_EQ(cmd_infer({dir / "run" / "final.sfcn", dir / "odd", dir / (std::string(out) + "odd")}), 1u);
    }
    EXPECT_EQ(tree(dir / "m1"), tree(dir / "m2"));
    EXPECT_EQ(tree(dir / "m1odd"), tree(dir / "m2odd"));

    for (const auto& id : list_ids(dir / "d")) {
        const Tensor m = load_map(dir / "m1" / (id + ".pgm"));
        EXPECT_EQ(m.dim(1), 20u);
        EXPECT_EQ(m.dim(2), 24u);
        for (double v : m.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    }
    const Tensor odd = load_map(dir / "m1odd" / "x.pgm");
    EXPECT_EQ(odd.dim(1), 13u);
    EXPECT_EQ(odd.dim(2), 29u);
}

TEST_F(RunnerTest, EvalOfTruthAgainstItselfIsPerfect) {
    RunConfig c = small_config();
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    const MetricsReport r = cmd_eval(c, {dir / "d" / "masks", dir / "d", dir / "rep" / "report.csv", "truth"});
    EXPECT_DOUBLE_EQ(r.f_max, 1.0);
    EXPECT_DOUBLE_EQ(r.mae, 0.0);
    EXPECT_NEAR(r.s_measure, 1.0, 1e-9);
    EXPECT_EQ(r.per_image.size(), 4u);
    EXPECT_TRUE(fs::exists(dir / "rep" / "report_pr.csv"));
    EXPECT_TRUE(fs::exists(dir / "rep" / "report_per_image.csv"));
    EXPECT_EQ(slurp(dir / "rep" / "report.csv").rfind("method,F_max,F_adaptive,MAE,S\ntruth,", 0), 0u);
}

TEST_F(RunnerTest, EvalHandSet) {
    // Four 2x2 masks with 1, 2, 0 and 4 foreground pixels scored against all-zero maps.
    fs::create_directories(dir / "maps");
    fs::create_directories(dir / "truth");
    const std::vector<std::vector<double>> masks{{1, 0, 0, 0}, {1, 1, 0, 0}, {0, 0, 0, 0}, {1, 1, 1, 1}};
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const std::string id = "im" + std::to_string(i);
        save_map(dir / "truth" / (id + ".pgm"), Tensor({1, 2, 2}, masks[i]));
        save_map(dir / "maps" / (id + ".pgm"), Tensor({1, 2, 2}, 0.0));
    }
    // An unmatched map is ignored.
    save_map(dir / "maps" / "stray.pgm", Tensor({1, 2, 2}, 0.5));

    const MetricsReport r = cmd_eval(RunConfig{}, {dir / "maps", dir / "truth", dir / "r.csv", "zero"});
    ASSERT_EQ(r.per_image.size(), 4u);
    EXPECT_DOUBLE_EQ(r.mae, (0.25 + 0.5 + 0.0 + 1.0) / 4.0);
    // A zero map never predicts foreground, so precision and F stay at zero.
    EXPECT_DOUBLE_EQ(r.f_max, 0.0);
    // Blank truth scores 1 - mean(map) = 1; full truth scores mean(map) = 0.
    EXPECT_DOUBLE_EQ(r.per_image[2].s_measure, 1.0);
    EXPECT_DOUBLE_EQ(r.per_image[3].s_measure, 0.0);
}

TEST_F(RunnerTest, EvalErrors) {
    fs::create_directories(dir / "maps");
    fs::create_directories(dir / "truth");
    save_map(dir / "maps" / "a.pgm", Tensor({1, 2, 2}, 0.0));
    save_map(dir / "truth" / "b.pgm", Tensor({1, 2, 2}, 0.0));
    EXPECT_THROW(cmd_eval(RunConfig{}, {dir / "maps", dir / "truth", dir / "r.csv"}), ConfigError);

    save_map(dir / "truth" / "a.pgm", Tensor({1, 3, 2}, 0.0));
    EXPECT_THROW(cmd_eval(RunConfig{}, {dir / "maps", dir / "truth", dir / "r.csv"}), ShapeError);
    EXPECT_THROW(cmd_eval(RunConfig{}, {dir / "none", dir / "truth", dir / "r.csv"}), ConfigError);
}

TEST_F(RunnerTest, GradcheckPassesOnTinyModel) {
    RunConfig c = apply_keys(RunConfig{}, {{"model.preset", "tiny"}});
    std::ostringstream out;
    const GradcheckReport rep = cmd_gradcheck(c, {false, 3, dir / "gc"}, out);
    EXPECT_TRUE(rep.passed) << out.str();
    EXPECT_NE(out.str().find("all gradient checks passed"), std::string::npos);
    bool saw_model = false;
    for (const auto& r : rep.rows) {
        EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
        saw_model = saw_model || r.name == "sfcn_loss_total";
    }
    EXPECT_TRUE(saw_model);
    const std::string csv = slurp(dir / "gc" / "gradcheck.csv");
    EXPECT_EQ(csv.rfind("op,entries,max_rel_error,passed\n", 0), 0u);
}

TEST(RunnerGradcheck, NegativeControlIsCaught) {
    Rng rng(3);
    Tensor x = random_tensor({2, 3}, rng, 0.5, 1.5, true);
    const auto r = check_gradients("negative_control", [&] { return sum(detail::corrupted_square(x)); }, {x});
    EXPECT_FALSE(r.passed);
    // Registered slope x against true 2x: relative error is 1/2 at every entry.
    EXPECT_NEAR(r.max_rel_error, 0.5, 1e-4);
}

TEST(RunnerAblation, VariantCounts) {
    const RunConfig base;
    EXPECT_EQ(ablation_variants("input", base).size(), 3u);
    EXPECT_EQ(ablation_variants("mean", base).size(), 5u);
    EXPECT_EQ(ablation_variants("k", base).size(), 5u);
    EXPECT_EQ(ablation_variants("share", base).size(), 2u);
    EXPECT_EQ(ablation_variants("bn", base).size(), 10u);
    EXPECT_THROW(ablation_variants("bogus", base), ConfigError);
    for (const auto& s : ablation_suites()) EXPECT_NO_THROW(ablation_variants(s, base));
}

TEST(RunnerAblation, VariantsOnlyTouchTheirAxis) {
    RunConfig base;
    base.train.max_iters = 17;
    base.train.seed = 9;
    for (const auto& v : ablation_variants("k", base)) {
        EXPECT_EQ(v.config.train.max_iters, 17u);
        EXPECT_EQ(v.config.train.seed, 9u);
        EXPECT_EQ(v.config.model.share_weights, base.model.share_weights);
    }
    const auto bn = ablation_variants("bn", base);
    EXPECT_EQ(bn.front().config.model.norm, NormKind::plain);
    EXPECT_EQ(bn.back().config.model.norm, NormKind::adaptive);
    EXPECT_EQ(bn.back().config.train.batch_size, 12u);
}

TEST_F(RunnerTest, AblateShareRunsEachVariant) {
    RunConfig c = small_config();
    c.train.max_iters = 1;
    std::ostringstream log;
    cmd_gen_data(c, dir / "d", log);
    const auto rows = cmd_ablate(c, {"share", dir / "d", std::nullopt, dir / "ab"}, log);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].variant, "shared");
    EXPECT_EQ(rows[1].variant, "separate");
    EXPECT_EQ(rows[1].encoder_parameters, 2 * rows[0].encoder_parameters);
    EXPECT_TRUE(fs::exists(dir / "ab" / "ablation_share.csv"));
    EXPECT_TRUE(fs::exists(dir / "ab" / "shared" / "final.sfcn"));
}

#ifdef SFCN_CLI_PATH
namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SFCN_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(RunnerTest, CliExitCodes) {
    EXPECT_EQ(run_cli(""), kExitUsage);
    EXPECT_EQ(run_cli("train --bogus"), kExitUsage);
    EXPECT_EQ(run_cli("gen-data --out " + (dir / "g").string() + " --set model.bogus=1"), kExitUsage);
    EXPECT_EQ(run_cli("gen-data --out " + (dir / "g").string() + " --count 2 --set data.canvas=12"), kExitOk);
    EXPECT_EQ(run_cli("eval --maps " + (dir / "nope").string() + " --truth " + (dir / "g").string() + " --out " +
                      (dir / "r.csv").string()),
              kExitUsage);
    // A corrupt checkpoint is a runtime failure, not a usage error.
    std::ofstream(dir / "bad.sfcn") << "garbage";
    EXPECT_EQ(run_cli("infer --ckpt " + (dir / "bad.sfcn").string() + " --images " + (dir / "g").string() + " --out " +
                      (dir / "o").string()),
              kExitFailure);
}

TEST_F(RunnerTest, CliGenDataMatchesLibrary) {
    RunConfig c;
    c.data.count = 2;
    c.data.canvas = {12, 12};
    c.data.seed = 4;
    std::ostringstream log;
    cmd_gen_data(c, dir / "lib", log);
    ASSERT_EQ(run_cli("gen-data --out " + (dir / "cli").string() + " --count 2 --seed 4 --set data.canvas=12"), kExitOk);
    EXPECT_EQ(tree(dir / "lib"), tree(dir / "cli"));
}
#endif
