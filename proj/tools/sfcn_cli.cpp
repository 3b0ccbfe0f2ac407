// sfcn: data generation, training, inference, evaluation, gradient checking and
// ablation suites. Exit codes: 0 success, 1 internal failure, 2 usage error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sfcn/sfcn.hpp"

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_file, "key=value run configuration file");
    cmd->add_option("--set", c.overrides, "override, e.g. --set train.max_iters=500 (repeatable)");
}

// File keys first, then --set overrides, then dedicated flags: later wins.
sfcn::RunConfig resolve(const Common& c, sfcn::RunConfig base, const sfcn::KeyValues& flags) {
    sfcn::KeyValues kv;
    if (!c.config_file.empty()) kv = sfcn::read_config_file(c.config_file);
    for (const auto& o : c.overrides) {
        auto [k, v] = sfcn::parse_override(o);
        kv[k] = v;
    }
    for (const auto& [k, v] : flags) kv[k] = v;
    sfcn::RunConfig out = sfcn::apply_keys(std::move(base), kv);
    sfcn::validate(out);
    return out;
}

template <class T>
void flag_into(sfcn::KeyValues& kv, const std::string& key, const std::optional<T>& v) {
    if (!v) return;
    if constexpr (std::is_same_v<T, std::string>)
        kv[key] = *v;
    else if constexpr (std::is_floating_point_v<T>)
        kv[key] = sfcn::cfg::fmt(static_cast<double>(*v));
    else
        kv[key] = std::to_string(*v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Symmetrical fully convolutional network for salient object detection"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, grad_c, ablate_c;
    std::string out_dir, data_dir, ckpt, images_dir, maps_dir, truth_dir, report, method = "sfcn", suite;
    std::optional<std::string> resume, eval_data;
    std::optional<std::size_t> count, max_iters, batch_size, budget;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr;
    bool negative_control = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    add_common(gen, gen_c);
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_option("--count", count, "number of samples");
    gen->add_option("--seed", seed, "generator seed");

    auto* train = app.add_subcommand("train", "train a model");
    add_common(train, train_c);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--resume", resume, "continue from a checkpoint");
    train->add_option("--max-iters", max_iters, "total step budget");
    train->add_option("--batch-size", batch_size, "images per step");
    train->add_option("--lr", lr, "base learning rate");
    train->add_option("--seed", seed, "run seed");

    auto* infer = app.add_subcommand("infer", "write saliency maps for a folder of PPM images");
    infer->add_option("--ckpt", ckpt, "checkpoint file")->required();
    infer->add_option("--images", images_dir, "image directory")->required();
    infer->add_option("--out", out_dir, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "score saliency maps against ground truth");
    add_common(eval, eval_c);
    eval->add_option("--maps", maps_dir, "directory of <id>.pgm maps")->required();
    eval->add_option("--truth", truth_dir, "directory of <id>.pgm masks (or a dataset root)")->required();
    eval->add_option("--out", report, "report CSV path")->required();
    eval->add_option("--method", method, "method label in the report");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_common(grad, grad_c);
    grad->add_flag("--negative-control", negative_control, "include an op with a deliberately wrong gradient");
    grad->add_option("--out", out_dir, "directory for gradcheck.csv");
    grad->add_option("--seed", seed, "seed for random probes");

    auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
    add_common(ablate, ablate_c);
    ablate->add_option("--suite", suite, "input, mean, k, share or bn")->required();
    ablate->add_option("--data", data_dir, "training dataset directory")->required();
    ablate->add_option("--eval-data", eval_data, "evaluation dataset (default: training data)");
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_option("--budget", budget, "training steps per variant");
    ablate->add_option("--seed", seed, "run seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? sfcn::kExitOk : sfcn::kExitUsage;
    }

    try {
        if (*gen) {
            sfcn::KeyValues f;
            flag_into(f, "data.count", count);
            flag_into(f, "data.seed", seed);
            const auto n = sfcn::cmd_gen_data(resolve(gen_c, {}, f), out_dir);
            std::cout << "wrote " << n << " samples to " << out_dir << '\n';
        } else if (*train) {
            sfcn::KeyValues f;
            flag_into(f, "train.max_iters", max_iters);
            flag_into(f, "train.batch_size", batch_size);
            flag_into(f, "train.base_lr", lr);
            flag_into(f, "train.seed", seed);
            const sfcn::RunConfig c = resolve(train_c, {}, f);
            std::optional<std::filesystem::path> r;
            if (resume) r = *resume;
            const auto t = sfcn::cmd_train(c, {data_dir, out_dir, r});
            std::cout << "trained to step " << t.final.state.step << "; checkpoint " << out_dir << "/final.sfcn\n";
        } else if (*infer) {
            const auto n = sfcn::cmd_infer({ckpt, images_dir, out_dir});
            std::cout << "wrote " << n << " maps to " << out_dir << '\n';
        } else if (*eval) {
            const auto r = sfcn::cmd_eval(resolve(eval_c, {}, {}), {maps_dir, truth_dir, report, method});
            std::cout << "F_max " << r.f_max << "  F_adaptive " << r.f_adaptive << "  MAE " << r.mae << "  S "
                      << r.s_measure << '\n';
        } else if (*grad) {
            sfcn::RunConfig base;
            base.model_preset = "tiny";
            base.model = sfcn::SfcnConfig::tiny();
            sfcn::GradcheckOptions o;
            o.negative_control = negative_control;
            if (seed) o.seed = *seed;
            if (!out_dir.empty()) o.out = out_dir;
            const auto rep = sfcn::cmd_gradcheck(resolve(grad_c, base, {}), o);
            return rep.passed ? sfcn::kExitOk : sfcn::kExitFailure;
        } else if (*ablate) {
            sfcn::KeyValues f;
            flag_into(f, "train.max_iters", budget);
            flag_into(f, "train.seed", seed);
            sfcn::AblateOptions o{suite, data_dir, std::nullopt, out_dir};
            if (eval_data) o.eval_data = *eval_data;
            const auto rows = sfcn::cmd_ablate(resolve(ablate_c, {}, f), o);
            for (const auto& r : rows)
                std::cout << r.variant << "  F_max " << r.report.f_max << "  MAE " << r.report.mae << "  S "
                          << r.report.s_measure << '\n';
        }
    } catch (const sfcn::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return sfcn::kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return sfcn::kExitFailure;
    }
    return sfcn::kExitOk;
}
