#pragma once

// Training loop: sample a batch, reflect, run both domains, weighted structural
// loss on the foreground probability map, backward, SGD step, plateau decay.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include "sfcn/checkpoint.hpp"
#include "sfcn/data.hpp"
#include "sfcn/loss.hpp"
#include "sfcn/model.hpp"
#include "sfcn/optim.hpp"

namespace sfcn {

struct LogRow {
    std::uint64_t step = 0;
    double lr = 0.0;
    double wbce = 0.0;
    double sc = 0.0;
    double s1 = 0.0;
    double total = 0.0;
    double ema = 0.0;
    bool decayed = false;  // lr was reduced after this step
};

/// Fresh run: parameters drawn from the train seed, sampler seeded independently.
inline Checkpoint initial_checkpoint(const SfcnConfig& model, const LossConfig& loss, const TrainConfig& train) {
    model.validate();
    loss.validate();
    train.validate();
    Checkpoint c;
    c.config = model;
    c.loss = loss;
    c.train = train;
    Rng init(train.seed);
    c.params = init_params(model, init);
    c.state.rng = Rng(train.seed ^ 0x5DEECE66Dull);
    c.state.plateau.lr = train.base_lr;
    return c;
}

class Trainer {
public:
    Trainer(Checkpoint c, std::vector<Sample> data)
        : ck_(std::move(c)), data_(std::move(data)), extractor_(FeatureExtractor::light9(ck_.loss.extractor_seed)) {
        if (data_.empty()) throw ConfigError("train: dataset is empty");
        for (const auto& s : data_)
            if (s.image.dim(1) != ck_.config.input_size.h || s.image.dim(2) != ck_.config.input_size.w)
                throw ShapeError("train: sample '" + s.id + "' is " + shape_str(s.image.shape()) +
                                 ", model expects " + cfg::fmt(ck_.config.input_size) + "; resize on load");
        for (auto v : ck_.state.order)
            if (v >= data_.size()) throw ConfigError("train: checkpoint sampler refers to a larger dataset");
        ck_.params = deep_copy(ck_.params);
        params_ = named_parameters(ck_.params);
        if (ck_.state.velocity.size() != params_.size()) ck_.state.velocity.assign(params_.size(), {});
    }

    std::uint64_t step_count() const { return ck_.state.step; }
    const Checkpoint& checkpoint() const { return ck_; }
    SfcnParams& params() { return ck_.params; }
    const FeatureExtractor& extractor() const { return extractor_; }

    /// Indices of the next batch; a new shuffled pass starts whenever one is used up.
    std::vector<std::size_t> next_batch() {
        auto& st = ck_.state;
        std::vector<std::size_t> out;
        while (out.size() < ck_.train.batch_size) {
            if (st.cursor >= st.order.size()) {
                st.order.resize(data_.size());
                for (std::size_t i = 0; i < data_.size(); ++i) st.order[i] = i;
                for (std::size_t i = data_.size(); i > 1; --i) std::swap(st.order[i - 1], st.order[st.rng.below(i)]);
                st.cursor = 0;
            }
            out.push_back(static_cast<std::size_t>(st.order[st.cursor++]));
        }
        return out;
    }

    LogRow step() {
        auto& st = ck_.state;
        std::vector<Tensor> images, masks;
        for (std::size_t idx : next_batch()) {
            const Sample s = ck_.train.augment ? augment(data_[idx], st.rng) : data_[idx];
            images.push_back(s.image);
            masks.push_back(s.mask);
        }
        const InputBatch in = make_inputs(images, ck_.config);
        const PredictionMaps pm = forward(in.origin, in.reflected, ck_.params, ck_.config, Mode::train);
        const LossBreakdown loss = loss_total_from_scores(pm.z0, pm.z1, stack(masks), extractor_, ck_.loss);
        if (!std::isfinite(loss.total_value))
            throw NumericError("train: non-finite loss at step " + std::to_string(st.step + 1));

        zero_grads(params_);
        backward(loss.total);
        sgd_step(params_, st.velocity, {st.plateau.lr, ck_.train.momentum, ck_.train.weight_decay});
        zero_grads(params_);

        LogRow row;
        row.step = ++st.step;
        row.lr = st.plateau.lr;
        row.wbce = loss.wbce;
        row.sc = loss.sc;
        row.s1 = loss.s1;
        row.total = loss.total_value;
        row.decayed = st.plateau.observe(loss.total_value, ck_.train);
        row.ema = st.plateau.ema;
        return row;
    }

    /// Steps until `until` (absolute step count); `on_step` sees every row.
    std::vector<LogRow> run(std::uint64_t until, const std::function<void(const LogRow&, Trainer&)>& on_step = {}) {
        std::vector<LogRow> log;
        while (ck_.state.step < until) {
            log.push_back(step());
            if (on_step) on_step(log.back(), *this);
        }
        return log;
    }

private:
    Checkpoint ck_;
    std::vector<Sample> data_;
    FeatureExtractor extractor_;
    std::vector<NamedParam> params_;
};

/// Saliency maps (1, H, W) for every sample, evaluated in inference mode.
inline std::vector<Tensor> predict_saliency(SfcnParams& params, const SfcnConfig& config,
                                            const std::vector<Tensor>& images, std::size_t batch = 4) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < images.size(); i += batch) {
        const std::vector<Tensor> chunk(images.begin() + static_cast<std::ptrdiff_t>(i),
                                        images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), i + batch)));
        const InputBatch in = make_inputs(chunk, config);
        const PredictionMaps pm = forward(in.origin, in.reflected, params, config, Mode::eval);
        for (auto& m : unstack(pm.saliency)) out.push_back(std::move(m));
    }
    return out;
}

inline std::string log_header() { return "step,lr,wbce,sc,s1,total\n"; }

inline std::string log_line(const LogRow& r) {
    std::ostringstream os;
    os << std::setprecision(17) << r.step << ',' << r.lr << ',' << r.wbce << ',' << r.sc << ',' << r.s1 << ','
       << r.total << '\n';
    return os.str();
}

}  // namespace sfcn
