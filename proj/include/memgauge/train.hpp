#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "seeding.hpp"

namespace memgauge {

enum class CheckpointSelection { best_eval_accuracy, final };

inline const char* to_string(CheckpointSelection c) {
    return c == CheckpointSelection::final ? "final" : "best_eval_accuracy";
}

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    CheckpointSelection checkpoint_selection = CheckpointSelection::best_eval_accuracy;

    void validate() const {
        if (epochs == 0)
            throw ConfigError("epochs must be positive");
        if (batch_size == 0)
            throw ConfigError("batch_size must be positive");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("momentum must lie in [0, 1)");
    }
};

struct EpochLog {
    std::size_t epoch = 0; // 1-based
    double loss = 0.0;
    double eval_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Keeps the parameters of the epoch with the highest eval accuracy; the earliest epoch wins ties.
/// In `final` mode every offer replaces the previous one.
class CheckpointTracker {
public:
    explicit CheckpointTracker(CheckpointSelection mode) : mode_(mode) {}

    void offer(std::size_t epoch, double accuracy, const Params& params) {
        if (mode_ == CheckpointSelection::final || !best_ || accuracy > best_accuracy_) {
            best_ = params;
            best_epoch_ = epoch;
            best_accuracy_ = accuracy;
        }
    }

    bool has_checkpoint() const noexcept { return best_.has_value(); }
    std::size_t epoch() const noexcept { return best_epoch_; }
    double accuracy() const noexcept { return best_accuracy_; }
    Params take() && { return std::move(*best_); }

private:
    CheckpointSelection mode_;
    std::optional<Params> best_;
    std::size_t best_epoch_ = 0;
    double best_accuracy_ = std::numeric_limits<double>::quiet_NaN();
};

struct TrainedModel {
    ModelSpec spec;
    Params params;
    std::vector<EpochLog> train_log;
    std::size_t checkpoint_epoch = 0;
    double checkpoint_eval_accuracy = std::numeric_limits<double>::quiet_NaN();

    std::vector<Label> predict(const Matrix<float>& features) const {
        return argmax_rows(logits(spec, params, features));
    }
};

inline std::vector<Label> predict(const TrainedModel& model, const Matrix<float>& features) {
    return model.predict(features);
}

inline BoolVector correctness(std::span<const Label> predictions, std::span<const Label> labels) {
    if (predictions.size() != labels.size())
        throw DimensionError("predictions and labels differ in length");
    BoolVector out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        out[i] = predictions[i] == labels[i] ? 1 : 0;
    return out;
}

inline BoolVector correctness(const TrainedModel& model, const LabeledDataset& data) {
    return correctness(model.predict(data.features), data.labels);
}

inline double mean_of(std::span<const std::uint8_t> flags) {
    if (flags.empty())
        return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(std::accumulate(flags.begin(), flags.end(), std::size_t{0})) /
           static_cast<double>(flags.size());
}

inline double accuracy(const TrainedModel& model, const LabeledDataset& data) {
    return mean_of(correctness(model, data));
}

namespace detail {

struct SgdSettings {
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 0;
};

/// Mini-batch SGD with momentum (v <- mu v + g; w <- w - lr v). Batch order is reshuffled
/// every epoch from the seed and the last partial batch is kept.
///
/// `loss_grad(rows, logits, dlogits) -> double` returns the batch loss and fills dlogits.
/// `epoch_begin(epoch)` runs before and `epoch_end(epoch, mean_loss)` after each epoch.
/// Entries flagged in `frozen` are held at their initial values.
template <class LossGrad, class EpochBegin, class EpochEnd>
void run_sgd(const ModelSpec& spec, Params& params, const LabeledDataset& data, const SgdSettings& s,
             LossGrad&& loss_grad, EpochBegin&& epoch_begin, EpochEnd&& epoch_end,
             const BasicParams<std::uint8_t>* frozen = nullptr) {
    const std::size_t n = data.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(s.seed, SeedStream::shuffle));

    auto velocity = zero_params<float>(spec);
    auto grads = zero_params<float>(spec);
    const auto lr = static_cast<float>(s.learning_rate);
    const auto mu = static_cast<float>(s.momentum);
    ForwardCache<float> cache;
    Matrix<float> dlogits;

    for (std::size_t epoch = 1; epoch <= s.epochs; ++epoch) {
        epoch_begin(epoch);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += s.batch_size) {
            const std::size_t stop = std::min(n, start + s.batch_size);
            std::span<const std::size_t> rows(order.data() + start, stop - start);
            forward(spec, params, gather_rows<float>(data.features, rows), cache);
            const double loss = loss_grad(rows, cache.logits(), dlogits);
            if (!std::isfinite(loss))
                throw DivergenceError(epoch);
            loss_sum += loss * static_cast<double>(rows.size());

            grads.fill(0.0f);
            backward(spec, params, cache, std::move(dlogits), grads);
            for (std::size_t t = 0; t < params.tensors.size(); ++t) {
                auto& p = params.tensors[t].values;
                auto& v = velocity.tensors[t].values;
                const auto& g = grads.tensors[t].values;
                const std::uint8_t* fz = frozen ? frozen->tensors[t].values.data() : nullptr;
                for (std::size_t i = 0; i < p.size(); ++i) {
                    if (fz && fz[i])
                        continue;
                    v[i] = mu * v[i] + g[i];
                    p[i] -= lr * v[i];
                }
            }
        }
        const double mean_loss = loss_sum / static_cast<double>(n);
        if (!std::isfinite(mean_loss))
            throw DivergenceError(epoch);
        epoch_end(epoch, mean_loss);
    }
}

} // namespace detail

/// Trains from the given initial parameters with softmax cross-entropy.
inline TrainedModel train_from(const ModelSpec& spec, Params initial, const LabeledDataset& train_set,
                               const LabeledDataset& eval_set, const TrainConfig& config) {
    spec.validate();
    config.validate();
    validate_params(spec, initial);
    if (train_set.empty())
        throw EmptyTrainingSetError();
    if (train_set.n_features() != spec.n_features || train_set.n_classes != spec.n_classes)
        throw DimensionError("training set does not match the model spec");
    if (config.batch_size > train_set.size())
        throw ConfigError("batch_size " + std::to_string(config.batch_size) + " exceeds training set size " +
                          std::to_string(train_set.size()));
    const bool select_best = config.checkpoint_selection == CheckpointSelection::best_eval_accuracy;
    if (select_best && eval_set.empty())
        throw ConfigError("best_eval_accuracy checkpointing needs a non-empty eval set");
    if (!eval_set.empty() && eval_set.n_features() != spec.n_features)
        throw DimensionError("eval set does not match the model spec");

    TrainedModel model{spec, std::move(initial), {}, 0, std::numeric_limits<double>::quiet_NaN()};
    CheckpointTracker tracker(config.checkpoint_selection);
    detail::SgdSettings s{config.epochs, config.batch_size, config.learning_rate, config.momentum, config.seed};

    auto loss_grad = [&](std::span<const std::size_t> rows, const Matrix<float>& z, Matrix<float>& dz) {
        std::vector<Label> y(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
            y[r] = train_set.labels[rows[r]];
        return softmax_cross_entropy(z, std::span<const Label>(y), &dz);
    };
    auto epoch_end = [&](std::size_t epoch, double mean_loss) {
        EpochLog log{epoch, mean_loss, std::numeric_limits<double>::quiet_NaN()};
        if (!eval_set.empty())
            log.eval_accuracy = accuracy(model, eval_set);
        model.train_log.push_back(log);
        tracker.offer(epoch, log.eval_accuracy, model.params);
    };
    detail::run_sgd(spec, model.params, train_set, s, loss_grad, [](std::size_t) {}, epoch_end);

    model.checkpoint_epoch = tracker.epoch();
    model.checkpoint_eval_accuracy = tracker.accuracy();
    model.params = std::move(tracker).take();
    return model;
}

/// Trains from a fresh initialization drawn from `config.seed`.
inline TrainedModel train(const ModelSpec& spec, const LabeledDataset& train_set, const LabeledDataset& eval_set,
                          const TrainConfig& config) {
    spec.validate();
    return train_from(spec, init_params(spec, config.seed), train_set, eval_set, config);
}

} // namespace memgauge
