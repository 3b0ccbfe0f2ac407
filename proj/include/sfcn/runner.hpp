#pragma once

// Command implementations behind the sfcn CLI. Each command writes its resolved
// configuration next to its outputs and is deterministic given seed and config.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sfcn/checkpoint.hpp"
#include "sfcn/config.hpp"
#include "sfcn/data.hpp"
#include "sfcn/gradcheck.hpp"
#include "sfcn/loss.hpp"
#include "sfcn/metrics.hpp"
#include "sfcn/model.hpp"
#include "sfcn/trainer.hpp"

namespace sfcn {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kResolvedConfigName = "config.resolved.txt";

namespace detail {

inline void require_dir(const fs::path& p, const std::string& what) {
    if (p.empty() || !fs::is_directory(p)) throw ConfigError(what + " directory not found: " + p.string());
}

inline void write_resolved(const fs::path& dir, const RunConfig& c) {
    fs::create_directories(dir);
    write_text_file(dir / kResolvedConfigName, to_text(c));
}

// Dataset mean is taken from the data when the config asks for it without a vector.
inline void resolve_dataset_mean(SfcnConfig& m, const std::vector<Sample>& data) {
    if (m.mean.kind == MeanKind::dataset && !m.mean.vector) m.mean.vector = dataset_mean(data);
}

// *.ppm / *.pgm files of a directory, or of its images/ / masks/ subdirectory.
inline std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext, const std::string& sub) {
    fs::path root = dir;
    if (fs::is_directory(dir / sub)) root = dir / sub;
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data

inline std::size_t cmd_gen_data(const RunConfig& c, const fs::path& out, std::ostream& log = std::cerr) {
    validate(c);
    const auto samples = generate_synthetic(c.data, [&](const std::string& m) { log << "warning: " << m << '\n'; });
    save_dataset(out, samples);
    detail::write_resolved(out, c);
    return samples.size();
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    fs::path data;
    fs::path out;
    std::optional<fs::path> resume;
};

struct TrainOutcome {
    Checkpoint final;
    std::vector<LogRow> log;  // rows produced by this invocation
};

inline std::vector<Sample> load_training_data(const fs::path& dir, const SfcnConfig& m) {
    detail::require_dir(dir, "data");
    auto data = load_dataset(dir, m.input_size);
    if (data.empty()) throw ConfigError("data directory holds no samples: " + dir.string());
    return data;
}

/// Keeps log rows with step <= `keep` (used when resuming into an existing directory).
inline void truncate_log(const fs::path& path, std::uint64_t keep) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string header, line, kept;
    std::getline(in, header);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) <= keep) kept += line + '\n';
    }
    in.close();
    write_text_file(path, header + '\n' + kept);
}

inline TrainOutcome cmd_train(RunConfig c, const TrainOptions& opt, std::ostream& log = std::cerr) {
    validate(c);
    const auto data = load_training_data(opt.data, c.model);
    fs::create_directories(opt.out);

    Checkpoint start;
    if (opt.resume) {
        start = load_checkpoint(*opt.resume);
        // The stored run wins for everything but the step budget and checkpoint cadence.
        const std::size_t max_iters = c.train.max_iters, every = c.train.checkpoint_every;
        c.model = start.config;
        c.loss = start.loss;
        c.train = start.train;
        c.train.max_iters = max_iters;
        c.train.checkpoint_every = every;
        start.train = c.train;
    } else {
        detail::resolve_dataset_mean(c.model, data);
        start = initial_checkpoint(c.model, c.loss, c.train);
    }
    detail::write_resolved(opt.out, c);

    const fs::path log_path = opt.out / "train_log.csv";
    const fs::path events_path = opt.out / "lr_events.csv";
    if (opt.resume) {
        truncate_log(log_path, start.state.step);
        truncate_log(events_path, start.state.step);
    }
    if (!opt.resume || !fs::exists(log_path)) write_text_file(log_path, log_header());
    if (!opt.resume || !fs::exists(events_path)) write_text_file(events_path, "step,old_lr,new_lr\n");
    std::ofstream log_out(log_path, std::ios::app);
    std::ofstream events(events_path, std::ios::app);

    Trainer trainer(std::move(start), data);
    TrainOutcome outcome;
    outcome.log = trainer.run(c.train.max_iters, [&](const LogRow& r, Trainer& t) {
        log_out << log_line(r);
        if (r.decayed) {
            events << r.step << ',' << std::setprecision(17) << r.lr << ',' << t.checkpoint().state.plateau.lr << '\n';
            log << "step " << r.step << ": loss plateau, lr " << r.lr << " -> " << t.checkpoint().state.plateau.lr << '\n';
        }
        if (c.train.checkpoint_every && r.step % c.train.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_%08llu.sfcn", static_cast<unsigned long long>(r.step));
            save_checkpoint(opt.out / name, t.checkpoint());
        }
    });
    outcome.final = trainer.checkpoint();
    save_checkpoint(opt.out / "final.sfcn", outcome.final);
    return outcome;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
    fs::path checkpoint;
    fs::path images;
    fs::path out;
};

/// Writes <id>.pgm saliency maps at each image's own resolution.
inline std::size_t cmd_infer(const InferOptions& opt, std::ostream& = std::cerr) {
    Checkpoint ck = load_checkpoint(opt.checkpoint);
    detail::require_dir(opt.images, "images");
    const auto files = detail::list_files(opt.images, ".ppm", "images");
    fs::create_directories(opt.out);
    RunConfig resolved;
    resolved.model = ck.config;
    resolved.loss = ck.loss;
    resolved.train = ck.train;
    detail::write_resolved(opt.out, resolved);
    for (const auto& f : files) {
        const Tensor image = load_image(f);
        const Extent2 native{image.dim(1), image.dim(2)};
        const Tensor input = resize(image, ck.config.input_size, Interp::bilinear);
        Tensor map = predict_saliency(ck.params, ck.config, {input}, 1).front();
        map = resize(map, native, Interp::bilinear);
        save_map(opt.out / (f.stem().string() + ".pgm"), map);
    }
    return files.size();
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    fs::path maps;
    fs::path truth;
    fs::path out;  // report CSV; PR curve and per-image tables are written beside it
    std::string method = "sfcn";
};

inline MetricsReport cmd_eval(const RunConfig& c, const EvalOptions& opt, std::ostream& = std::cerr) {
    detail::require_dir(opt.maps, "maps");
    detail::require_dir(opt.truth, "truth");
    std::map<std::string, fs::path> maps, truths;
    for (const auto& p : detail::list_files(opt.maps, ".pgm", "maps")) maps[p.stem().string()] = p;
    for (const auto& p : detail::list_files(opt.truth, ".pgm", "masks")) truths[p.stem().string()] = p;
    std::vector<Tensor> m, t;
    std::vector<std::string> ids;
    for (const auto& [id, path] : maps) {
        auto it = truths.find(id);
        if (it == truths.end()) continue;
        Tensor map = load_map(path), truth = load_mask(it->second);
        if (map.shape() != truth.shape())
            throw ShapeError("eval: map and truth of '" + id + "' differ in size (" + shape_str(map.shape()) + " vs " +
                             shape_str(truth.shape()) + ")");
        m.push_back(std::move(map));
        t.push_back(std::move(truth));
        ids.push_back(id);
    }
    if (ids.empty()) throw ConfigError("eval: no map id matches a ground-truth id");
    const MetricsReport r = evaluate(m, t, ids, c.metrics);
    const fs::path dir = opt.out.has_parent_path() ? opt.out.parent_path() : fs::path(".");
    fs::create_directories(dir);
    write_report_csv(opt.out, opt.method, r);
    const std::string stem = opt.out.stem().string();
    write_pr_csv(dir / (stem + "_pr.csv"), r.pr_curve);
    write_per_image_csv(dir / (stem + "_per_image.csv"), r);
    detail::write_resolved(dir, c);
    return r;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
    bool negative_control = false;  // adds an op whose gradient rule is deliberately wrong
    std::uint64_t seed = 3;
    std::optional<fs::path> out;
};

struct GradcheckReport {
    std::vector<GradCheckResult> rows;
    bool passed = true;
};

namespace detail {

// x^2 whose registered derivative is x instead of 2x.
inline Tensor corrupted_square(const Tensor& x) {
    return map(
        x, [](double v) { return v * v; }, [](double v, double) { return v; }, "corrupted_square");
}

}  // namespace detail

/// Finite-difference checks per op, per loss term and through the whole model
/// (built from the configured model, normally the tiny preset).
inline GradcheckReport cmd_gradcheck(const RunConfig& c, const GradcheckOptions& opt = {},
                                     std::ostream& out = std::cout) {
    validate(c);
    Rng rng(opt.seed);
    GradCheckOptions go;
    GradcheckReport rep;
    const auto record = [&](GradCheckResult r) {
        rep.passed = rep.passed && r.passed;
        rep.rows.push_back(std::move(r));
    };
    // Weighted sums keep every output entry in play without symmetric cancellation.
    const auto probe = [&](Shape s) { return random_tensor(std::move(s), rng, -1.0, 1.0); };
    const auto wsum = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

    {
        Tensor x = random_tensor({2, 3, 5, 5}, rng, -1, 1, true), w = random_tensor({6, 3, 3, 3}, rng, -1, 1, true),
               b = random_tensor({6}, rng, -1, 1, true);
        const ConvSpec s{3, 6, {3, 3}, {1, 1}, {1, 1}};
        const Tensor p = probe({2, 6, 5, 5});
        record(check_gradients("conv2d", [&] { return wsum(conv2d(x, w, b, s), p); }, {x, w, b}, go));
    }
    {
        Tensor x = random_tensor({2, 4, 6, 5}, rng, -1, 1, true), w = random_tensor({2, 4, 3, 3}, rng, -1, 1, true),
               b = random_tensor({2}, rng, -1, 1, true);
        const ConvSpec s{4, 2, {3, 3}, {1, 1}, {1, 1}};
        const Tensor p = probe({2, 2, 6, 5});
        record(check_gradients("conv2d_narrow", [&] { return wsum(conv2d(x, w, b, s), p); }, {x, w, b}, go));
    }
    {
        Tensor x = random_tensor({1, 3, 7, 7}, rng, -1, 1, true), w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
        const ConvSpec s{3, 4, {3, 3}, {2, 2}, {1, 1}};
        const Tensor p = probe({1, 4, 4, 4});
        record(check_gradients("conv2d_strided", [&] { return wsum(conv2d(x, w, Tensor{}, s), p); }, {x, w}, go));
    }
    {
        Tensor x = random_tensor({2, 5, 3, 4}, rng, -1, 1, true), w = random_tensor({3, 5, 1, 1}, rng, -1, 1, true),
               b = random_tensor({3}, rng, -1, 1, true);
        const ConvSpec s{5, 3, {1, 1}, {1, 1}, {0, 0}};
        const Tensor p = probe({2, 3, 3, 4});
        record(check_gradients("conv2d_pointwise", [&] { return wsum(conv2d(x, w, b, s), p); }, {x, w, b}, go));
    }
    {
        Tensor x = random_tensor({2, 3, 3, 4}, rng, -1, 1, true), w = random_tensor({3, 2, 4, 4}, rng, -1, 1, true);
        const ConvSpec s = upsample2x_spec(3, 2);
        const Tensor p = probe({2, 2, 6, 8});
        record(check_gradients("deconv2d", [&] { return wsum(deconv2d(x, w, s), p); }, {x, w}, go));
    }
    {
        Tensor x = random_tensor({2, 3, 6, 4}, rng, -1, 1, true);
        const Tensor p = probe({2, 3, 3, 2});
        record(check_gradients("maxpool2d", [&] { return wsum(maxpool2d(x), p); }, {x}, go));
    }
    {
        Tensor a = random_tensor({2, 2, 3, 3}, rng, -1, 1, true), b = random_tensor({2, 3, 3, 3}, rng, -1, 1, true);
        const Tensor p = probe({2, 5, 3, 3});
        record(check_gradients("concat_channels", [&] { return wsum(concat_channels({a, b}), p); }, {a, b}, go));
        const Tensor q = probe({2, 2, 3, 3});
        record(check_gradients("slice_channels", [&] { return wsum(slice_channels(b, 1, 2), q); }, {b}, go));
    }
    {
        Tensor z0 = random_tensor({2, 1, 3, 3}, rng, -2, 2, true), z1 = random_tensor({2, 1, 3, 3}, rng, -2, 2, true);
        const Tensor p = probe({2, 1, 3, 3}), q = probe({2, 1, 3, 3});
        record(check_gradients("softmax_pairwise",
                            [&] {
                                auto [fg, bg] = softmax_pairwise(z0, z1);
                                return add(wsum(fg, p), wsum(bg, q));
                            },
                            {z0, z1}, go));
        record(check_gradients("log_softmax_pairwise",
                            [&] {
                                auto [lfg, lbg] = log_softmax_pairwise(z0, z1);
                                return add(wsum(lfg, p), wsum(lbg, q));
                            },
                            {z0, z1}, go));
    }
    {
        Tensor x = random_tensor({2, 3, 4}, rng, -1, 1, true), y = random_tensor({2, 3, 4}, rng, 0.2, 1, true);
        const Tensor p = probe({2, 3, 4});
        record(check_gradients("relu", [&] { return wsum(relu(x), p); }, {x}, go));
        record(check_gradients("log", [&] { return wsum(log(y), p); }, {y}, go));
        record(check_gradients("mul", [&] { return wsum(mul(x, y), p); }, {x, y}, go));
        record(check_gradients("l2_norm_per_sample", [&] { return sum(l2_norm_per_sample(x)); }, {x}, go));
        const Tensor q = probe({2});
        record(check_gradients("sum_per_sample", [&] { return wsum(sum_per_sample(x), q); }, {x}, go));
    }
    {
        Tensor x = random_tensor({3, 4, 3, 3}, rng, -2, 2, true);
        AdaBnLayerState st(4);
        st.alpha = random_tensor({4}, rng, 0.5, 1.5, true);
        st.beta = random_tensor({4}, rng, -0.5, 0.5, true);
        const Tensor p = probe({3, 4, 3, 3});
        record(check_gradients("adabn_forward", [&] { return wsum(adabn_forward(x, st, 1, Mode::train), p); },
                            {x, st.alpha, st.beta}, go));
        record(check_gradients("plain_bn_forward", [&] { return wsum(plain_bn_forward(x, st, Mode::train), p); },
                            {x, st.alpha, st.beta}, go));
    }

    // Loss terms with respect to the predicted map.
    const std::size_t H = 8, W = 8;
    Tensor truth({2, 1, H, W});
    for (double& v : truth.mutable_values()) v = rng.coin(0.4) ? 1.0 : 0.0;
    Tensor pred = random_tensor({2, 1, H, W}, rng, 0.05, 0.95, true);
    const FeatureExtractor fx = FeatureExtractor::light9(c.loss.extractor_seed);
    record(check_gradients("loss_bce", [&] { return loss_bce(pred, truth); }, {pred}, go));
    record(check_gradients("loss_wbce", [&] { return loss_wbce(pred, truth, c.loss.complement_rho); }, {pred}, go));
    record(check_gradients("loss_sc", [&] { return loss_sc(pred, truth, fx, c.loss); }, {pred}, go));
    record(check_gradients("loss_smooth_l1", [&] { return loss_smooth_l1(pred, truth, c.loss.epsilon_s1); }, {pred}, go));
    record(check_gradients("loss_total", [&] { return loss_total(pred, truth, fx, c.loss).total; }, {pred}, go));
    {
        Tensor z0 = random_tensor({2, 1, H, W}, rng, -3, 3, true), z1 = random_tensor({2, 1, H, W}, rng, -3, 3, true);
        record(check_gradients(
            "loss_total_from_scores", [&] { return loss_total_from_scores(z0, z1, truth, fx, c.loss).total; },
            {z0, z1}, go));
    }

    // Whole network: reflect, both encoders, fusion, head, softmax, loss.
    {
        SfcnConfig m = c.model;
        if (m.mean.kind == MeanKind::dataset && !m.mean.vector) m.mean.vector = kImageNetMean;
        Rng init(opt.seed + 1);
        SfcnParams params = init_params(m, init);
        std::vector<Tensor> images;
        for (int i = 0; i < 2; ++i) images.push_back(random_tensor({3, m.input_size.h, m.input_size.w}, rng, 0, 1));
        Tensor masks({2, 1, m.input_size.h, m.input_size.w});
        for (double& v : masks.mutable_values()) v = rng.coin(0.4) ? 1.0 : 0.0;
        const InputBatch in = make_inputs(images, m);
        std::vector<Tensor> leaves;
        for (const auto& np : named_parameters(params)) leaves.push_back(np.tensor);
        record(check_gradients(
            "sfcn_loss_total",
            [&] {
                const PredictionMaps pm = forward(in.origin, in.reflected, params, m, Mode::train);
                return loss_total_from_scores(pm.z0, pm.z1, masks, fx, c.loss).total;
            },
            leaves, go));
    }

    if (opt.negative_control) {
        Tensor x = random_tensor({2, 3}, rng, 0.5, 1.5, true);
        record(check_gradients("negative_control", [&] { return sum(detail::corrupted_square(x)); }, {x}, go));
    }

    out << std::left << std::setw(22) << "op" << std::right << std::setw(10) << "entries" << std::setw(16)
        << "max_rel_error" << "  result\n";
    for (const auto& r : rep.rows)
        out << std::left << std::setw(22) << r.name << std::right << std::setw(10) << r.checked << std::setw(16)
            << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "  "
            << (r.passed ? "PASS" : "FAIL") << '\n';
    out << (rep.passed ? "all gradient checks passed\n" : "gradient check FAILED\n");

    if (opt.out) {
        fs::create_directories(*opt.out);
        std::ostringstream csv;
        csv << "op,entries,max_rel_error,passed\n" << std::setprecision(6) << std::scientific;
        for (const auto& r : rep.rows)
            csv << r.name << ',' << r.checked << ',' << r.max_rel_error << ',' << (r.passed ? "true" : "false") << '\n';
        write_text_file(*opt.out / "gradcheck.csv", csv.str());
        detail::write_resolved(*opt.out, c);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationVariant {
    std::string name;
    RunConfig config;
};

struct AblationRow {
    std::string variant;
    MetricsReport report;
    std::size_t encoder_parameters = 0;
    double final_ema = 0.0;
};

inline std::vector<std::string> ablation_suites() { return {"input", "mean", "k", "share", "bn"}; }

/// Variants of one suite built on `base`; every variant keeps the base budget and seed.
inline std::vector<AblationVariant> ablation_variants(const std::string& suite, const RunConfig& base) {
    std::vector<AblationVariant> v;
    const auto with = [&](std::string name, auto edit) {
        RunConfig c = base;
        edit(c);
        v.push_back({std::move(name), std::move(c)});
    };
    if (suite == "input") {
        with("origin", [](RunConfig& c) { c.model.input = InputMode::origin_only; });
        with("reflected", [](RunConfig& c) { c.model.input = InputMode::reflected_only; });
        with("paired", [](RunConfig& c) { c.model.input = InputMode::paired; });
    } else if (suite == "mean") {
        with("imagenet", [](RunConfig& c) { c.model.mean = MeanSpec::fixed(kImageNetMean); });
        with("dataset", [](RunConfig& c) { c.model.mean = MeanSpec{MeanKind::dataset, std::nullopt}; });
        with("per-image", [](RunConfig& c) { c.model.mean = MeanSpec::per_image(); });
        with("middle", [](RunConfig& c) { c.model.mean = MeanSpec::middle(); });
        with("zero", [](RunConfig& c) { c.model.mean = MeanSpec::zero(); });
    } else if (suite == "k") {
        for (double k : {-2.0, -1.0, 1.0, 2.0, 4.0})
            with("k=" + cfg::fmt(k), [k](RunConfig& c) { c.model.k = k; });
    } else if (suite == "share") {
        with("shared", [](RunConfig& c) { c.model.share_weights = true; });
        with("separate", [](RunConfig& c) { c.model.share_weights = false; });
    } else if (suite == "bn") {
        for (NormKind n : {NormKind::plain, NormKind::adaptive})
            for (std::size_t b : {1, 2, 4, 8, 12})
                with(to_string(n) + "/batch=" + std::to_string(b), [n, b](RunConfig& c) {
                    c.model.norm = n;
                    c.train.batch_size = b;
                });
    } else {
        throw ConfigError("ablate: unknown suite '" + suite + "' (input, mean, k, share or bn)");
    }
    return v;
}

struct AblateOptions {
    std::string suite;
    fs::path data;
    std::optional<fs::path> eval_data;  // defaults to the training data
    fs::path out;
};

inline std::vector<AblationRow> cmd_ablate(const RunConfig& base, const AblateOptions& opt,
                                           std::ostream& log = std::cerr) {
    validate(base);
    const auto variants = ablation_variants(opt.suite, base);
    detail::require_dir(opt.data, "data");
    if (opt.eval_data) detail::require_dir(*opt.eval_data, "evaluation data");
    fs::create_directories(opt.out);
    detail::write_resolved(opt.out, base);

    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        log << "ablate " << opt.suite << ": " << v.name << '\n';
        std::string dir_name = v.name;
        std::replace(dir_name.begin(), dir_name.end(), '/', '_');
        const fs::path vdir = opt.out / dir_name;
        const TrainOutcome t = cmd_train(v.config, {opt.data, vdir, std::nullopt}, log);

        const auto eval_set = load_training_data(opt.eval_data ? *opt.eval_data : opt.data, t.final.config);
        std::vector<Tensor> images, truths;
        std::vector<std::string> ids;
        for (const auto& s : eval_set) {
            images.push_back(s.image);
            truths.push_back(s.mask);
            ids.push_back(s.id);
        }
        Checkpoint ck = t.final;
        const auto maps = predict_saliency(ck.params, ck.config, images);
        AblationRow row{v.name, evaluate(maps, truths, ids, v.config.metrics), encoder_parameter_count(ck.params),
                        ck.state.plateau.ema};
        write_report_csv(vdir / "report.csv", v.name, row.report);
        rows.push_back(std::move(row));
    }

    std::ostringstream csv;
    csv << "variant,F_max,F_adaptive,MAE,S,encoder_params,final_ema_loss\n" << std::fixed << std::setprecision(6);
    for (const auto& r : rows)
        csv << r.variant << ',' << r.report.f_max << ',' << r.report.f_adaptive << ',' << r.report.mae << ','
            << r.report.s_measure << ',' << r.encoder_parameters << ',' << r.final_ema << '\n';
    write_text_file(opt.out / ("ablation_" + opt.suite + ".csv"), csv.str());
    return rows;
}

}  // namespace sfcn
