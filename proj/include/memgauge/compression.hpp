#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "train.hpp"

namespace memgauge {

// ---------------------------------------------------------------------------
// Magnitude pruning

enum class PruneScope { global, per_tensor };

inline const char* to_string(PruneScope s) { return s == PruneScope::global ? "global" : "per_tensor"; }

/// Number of entries zeroed to reach `sparsity` out of `n`: ceil(sparsity * n).
inline std::size_t prune_count(double sparsity, std::size_t n) {
    const double exact = sparsity * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
    return std::min(k, n);
}

/// Zeroes the `sparsity` fraction of weight entries (biases exempt) with the smallest
/// magnitude. Ties break by (tensor order, flat index); survivors are untouched.
inline Params prune_magnitude(const Params& params, double sparsity, PruneScope scope = PruneScope::global) {
    if (!(sparsity >= 0.0 && sparsity < 1.0))
        throw ConfigError("sparsity must lie in [0, 1)");
    Params out = params;

    struct Entry {
        float magnitude;
        std::size_t tensor;
        std::size_t index;
    };
    auto smallest_first = [](const Entry& a, const Entry& b) {
        return std::tie(a.magnitude, a.tensor, a.index) < std::tie(b.magnitude, b.tensor, b.index);
    };
    auto zero_smallest = [&](std::vector<Entry>& entries) {
        const std::size_t k = prune_count(sparsity, entries.size());
        if (k == 0)
            return;
        std::ranges::nth_element(entries, entries.begin() + static_cast<std::ptrdiff_t>(k - 1), smallest_first);
        std::ranges::sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), smallest_first);
        for (std::size_t e = 0; e < k; ++e)
            out.tensors[entries[e].tensor].values[entries[e].index] = 0.0f;
    };

    std::vector<Entry> pool;
    for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        const auto& tensor = params.tensors[t];
        if (tensor.is_bias())
            continue;
        if (scope == PruneScope::per_tensor)
            pool.clear();
        for (std::size_t i = 0; i < tensor.values.size(); ++i)
            pool.push_back({std::abs(tensor.values[i]), t, i});
        if (scope == PruneScope::per_tensor)
            zero_smallest(pool);
    }
    if (scope == PruneScope::global)
        zero_smallest(pool);
    return out;
}

/// Fraction of weight entries (biases excluded) that are exactly zero.
inline double weight_sparsity(const Params& params) {
    std::size_t zeros = 0, total = 0;
    for (const auto& t : params.tensors) {
        if (t.is_bias())
            continue;
        total += t.values.size();
        zeros += static_cast<std::size_t>(std::ranges::count(t.values, 0.0f));
    }
    return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

/// 1 where a weight entry is exactly zero; bias tensors are all 0.
inline BasicParams<std::uint8_t> zero_pattern(const Params& params) {
    BasicParams<std::uint8_t> mask;
    for (const auto& t : params.tensors) {
        std::vector<std::uint8_t> v(t.values.size(), 0);
        if (!t.is_bias())
            for (std::size_t i = 0; i < v.size(); ++i)
                v[i] = t.values[i] == 0.0f ? 1 : 0;
        mask.tensors.push_back({t.name, t.shape, std::move(v)});
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Uniform quantization

/// Maps every entry to the nearest of 2^bits levels spread uniformly over the tensor's
/// [min, max], rounding half away from zero. Constant tensors are left unchanged.
inline Params quantize_uniform(const Params& params, int bits) {
    if (bits < 1 || bits > 16)
        throw ConfigError("bits must lie in [1, 16]");
    const double top = static_cast<double>((1u << bits) - 1u);
    Params out = params;
    for (auto& t : out.tensors) {
        if (t.values.empty())
            continue;
        const auto [lo_it, hi_it] = std::ranges::minmax_element(t.values);
        const double lo = *lo_it, hi = *hi_it;
        if (!(hi > lo))
            continue;
        const double step = (hi - lo) / top;
        for (auto& v : t.values) {
            const double level = std::min(top, std::round((static_cast<double>(v) - lo) / step));
            // the top level is pinned to max so that re-quantizing sees the same range
            v = level == top ? static_cast<float>(hi) : static_cast<float>(lo + level * step);
        }
    }
    return out;
}

inline std::vector<std::size_t> distinct_values_per_tensor(const Params& params) {
    std::vector<std::size_t> out;
    for (const auto& t : params.tensors)
        out.push_back(std::set<float>(t.values.begin(), t.values.end()).size());
    return out;
}

// ---------------------------------------------------------------------------
// Distillation fine-tuning

struct FixedWeighting {
    double w_ce = 1.0;
    double w_kd = 1.0;
};

/// Loss-slope softmax weighting recomputed every epoch.
struct AdaptiveWeighting {
    std::size_t window = 3;
    double beta = 0.1;
};

using Weighting = std::variant<FixedWeighting, AdaptiveWeighting>;

struct DistillConfig {
    double temperature = 2.0;
    Weighting weighting = FixedWeighting{};
    std::size_t epochs = 10;
    double learning_rate = 0.01;
    std::size_t batch_size = 32;
    double momentum = 0.9;

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature))
            throw ConfigError("temperature must be positive");
        if (epochs == 0)
            throw ConfigError("distillation epochs must be positive");
        if (!(learning_rate > 0.0))
            throw ConfigError("distillation learning rate must be positive");
        if (batch_size == 0)
            throw ConfigError("distillation batch size must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("distillation momentum must lie in [0, 1)");
        if (const auto* f = std::get_if<FixedWeighting>(&weighting)) {
            if (f->w_ce < 0.0 || f->w_kd < 0.0)
                throw ConfigError("fixed loss weights must be non-negative");
            if (f->w_ce == 0.0 && f->w_kd == 0.0)
                throw ConfigError("fixed loss weights must not both be zero");
        } else {
            const auto& a = std::get<AdaptiveWeighting>(weighting);
            if (a.window < 2)
                throw ConfigError("adaptive window must be at least 2 epochs");
            if (a.window > epochs)
                throw ConfigError("adaptive window (" + std::to_string(a.window) + ") exceeds epochs (" +
                                  std::to_string(epochs) + ")");
            if (!(a.beta > 0.0))
                throw ConfigError("adaptive sensitivity beta must be positive");
        }
    }
};

/// Least-squares slope of `ys` against 0, 1, 2, ...
inline double least_squares_slope(std::span<const double> ys) {
    const double n = static_cast<double>(ys.size());
    if (ys.size() < 2)
        return 0.0;
    const double xbar = (n - 1.0) / 2.0;
    const double ybar = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const double dx = static_cast<double>(i) - xbar;
        num += dx * (ys[i] - ybar);
        den += dx * dx;
    }
    return num / den;
}

/// softmax(beta * slope) over the loss components: a component whose loss is falling
/// fastest (most negative slope) gets the smallest weight. Weights are positive and sum to 1.
inline std::vector<double> adaptive_loss_weights(std::span<const std::vector<double>> histories, std::size_t window,
                                                 double beta) {
    std::vector<double> scores;
    for (const auto& h : histories) {
        const std::size_t take = std::min(window, h.size());
        scores.push_back(beta * least_squares_slope(std::span(h).subspan(h.size() - take)));
    }
    const double top = *std::ranges::max_element(scores);
    double total = 0.0;
    for (auto& s : scores) {
        s = std::exp(s - top);
        total += s;
    }
    for (auto& s : scores)
        s /= total;
    return scores;
}

struct DistillTerms {
    double ce = 0.0; // mean cross-entropy against labels
    double kd = 0.0; // mean tau^2 * KL(teacher_tau || student_tau)
};

/// Loss terms of L = w_ce CE + w_kd tau^2 KL(soft(teacher) || soft(student)) on one batch,
/// and dL/dLogits (mean over the batch) written to `dlogits`.
template <class T>
DistillTerms distill_loss(const Matrix<T>& student_logits, const Matrix<T>& teacher_logits,
                          std::span<const Label> labels, double w_ce, double w_kd, double temperature,
                          std::type_identity_t<Matrix<T>>* dlogits) {
    DistillTerms terms;
    Matrix<T> dce;
    terms.ce = softmax_cross_entropy(student_logits, labels, dlogits ? &dce : nullptr);

    const auto ps = softmax_rows(student_logits, temperature);
    const auto pt = softmax_rows(teacher_logits, temperature);
    const std::size_t batch = student_logits.rows(), classes = student_logits.cols();
    double kl = 0.0;
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = pt(r, c);
            if (p > 0.0)
                kl += p * (std::log(p) - std::log(std::max<double>(ps(r, c), 1e-300)));
        }
    const double tau2 = temperature * temperature;
    terms.kd = tau2 * kl / static_cast<double>(batch);

    if (dlogits) {
        dlogits->resize(batch, classes);
        // d/dz [tau^2 KL] = tau (p_student - p_teacher)
        const T kd_scale = static_cast<T>(w_kd * temperature / static_cast<double>(batch));
        const T ce_scale = static_cast<T>(w_ce);
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < classes; ++c)
                (*dlogits)(r, c) = ce_scale * dce(r, c) + kd_scale * (ps(r, c) - pt(r, c));
    }
    return terms;
}

struct DistillEpoch {
    std::size_t epoch = 0;
    double w_ce = 0.0;
    double w_kd = 0.0;
    double ce = 0.0;
    double kd = 0.0;
};

struct DistillResult {
    Params params;
    std::vector<DistillEpoch> log;
};

/// Fine-tunes `student` toward the teacher's softened outputs and the labels of `data`.
/// Weight entries that are exactly zero in `student` stay zero.
inline DistillResult distill_finetune(Params student, const ModelSpec& spec, const TrainedModel& teacher,
                                      const LabeledDataset& data, const DistillConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    spec.validate();
    validate_params(spec, student);
    if (spec.n_classes != teacher.spec.n_classes)
        throw DimensionError("student and teacher output dimensions differ");
    if (data.empty())
        throw EmptyTrainingSetError();
    if (data.n_features() != spec.n_features || data.n_features() != teacher.spec.n_features)
        throw DimensionError("distillation data does not match the models");
    if (cfg.batch_size > data.size())
        throw ConfigError("distillation batch_size exceeds dataset size");

    const auto teacher_logits = logits(teacher.spec, teacher.params, data.features);
    const auto frozen = zero_pattern(student);

    DistillResult result;
    std::vector<std::vector<double>> history(2); // per-epoch CE, KD
    double w_ce = 0.5, w_kd = 0.5;
    if (const auto* f = std::get_if<FixedWeighting>(&cfg.weighting)) {
        w_ce = f->w_ce;
        w_kd = f->w_kd;
    }
    double ce_sum = 0.0, kd_sum = 0.0;

    auto epoch_begin = [&](std::size_t) {
        ce_sum = kd_sum = 0.0;
        if (const auto* a = std::get_if<AdaptiveWeighting>(&cfg.weighting); a && history[0].size() >= 2) {
            const auto w = adaptive_loss_weights(history, a->window, a->beta);
            w_ce = w[0];
            w_kd = w[1];
        }
    };
    auto loss_grad = [&](std::span<const std::size_t> rows, const Matrix<float>& z, Matrix<float>& dz) {
        Matrix<float> zt(rows.size(), teacher_logits.cols());
        std::vector<Label> y(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::ranges::copy(teacher_logits.row(rows[r]), zt.row(r).begin());
            y[r] = data.labels[rows[r]];
        }
        const auto terms = distill_loss(z, zt, std::span<const Label>(y), w_ce, w_kd, cfg.temperature, &dz);
        ce_sum += terms.ce * static_cast<double>(rows.size());
        kd_sum += terms.kd * static_cast<double>(rows.size());
        return w_ce * terms.ce + w_kd * terms.kd;
    };
    auto epoch_end = [&](std::size_t epoch, double) {
        const double n = static_cast<double>(data.size());
        history[0].push_back(ce_sum / n);
        history[1].push_back(kd_sum / n);
        result.log.push_back({epoch, w_ce, w_kd, ce_sum / n, kd_sum / n});
    };

    detail::SgdSettings s{cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum, seed};
    detail::run_sgd(spec, student, data, s, loss_grad, epoch_begin, epoch_end, &frozen);
    result.params = std::move(student);
    return result;
}

// ---------------------------------------------------------------------------
// Compression specs and results

enum class CompressionMethod { prune, quantize, distill, prune_then_distill };

inline const char* to_string(CompressionMethod m) {
    switch (m) {
    case CompressionMethod::prune: return "prune";
    case CompressionMethod::quantize: return "quantize";
    case CompressionMethod::distill: return "distill";
    case CompressionMethod::prune_then_distill: return "prune_then_distill";
    }
    return "?";
}

struct CompressionSpec {
    CompressionMethod method = CompressionMethod::prune;
    std::optional<double> sparsity;
    std::optional<int> bits;
    std::optional<DistillConfig> distill;
    PruneScope scope = PruneScope::global;
    /// Hidden widths of a smaller student for `distill`; empty keeps the teacher's architecture.
    std::vector<std::size_t> student_widths;

    bool prunes() const { return method == CompressionMethod::prune || method == CompressionMethod::prune_then_distill; }
    bool distills() const {
        return method == CompressionMethod::distill || method == CompressionMethod::prune_then_distill;
    }

    /// Exactly the fields of the chosen method must be present.
    void validate() const {
        if (prunes() != sparsity.has_value())
            throw ConfigError(std::string("sparsity is ") + (prunes() ? "required" : "not allowed") + " for " +
                              to_string(method));
        if ((method == CompressionMethod::quantize) != bits.has_value())
            throw ConfigError(std::string("bits is ") +
                              (method == CompressionMethod::quantize ? "required" : "not allowed") + " for " +
                              to_string(method));
        if (distills() != distill.has_value())
            throw ConfigError(std::string("distillation settings are ") + (distills() ? "required" : "not allowed") +
                              " for " + to_string(method));
        if (!student_widths.empty() && method != CompressionMethod::distill)
            throw ConfigError("student widths only apply to distill");
        if (sparsity && !(*sparsity >= 0.0 && *sparsity < 1.0))
            throw ConfigError("sparsity must lie in [0, 1)");
        if (bits && (*bits < 1 || *bits > 16))
            throw ConfigError("bits must lie in [1, 16]");
        if (distill)
            distill->validate();
    }
};

struct CompressedModel {
    std::string base_model_id;
    ModelSpec spec;
    Params params;
    CompressionSpec compression;
    double achieved_sparsity = 0.0;
    std::vector<std::size_t> distinct_values;
    std::vector<DistillEpoch> distill_log;

    std::vector<Label> predict(const Matrix<float>& x) const { return argmax_rows(logits(spec, params, x)); }
};

/// Applies `cs` to the reference model. Distillation uses `train_set` only.
inline CompressedModel compress(const TrainedModel& reference, const std::string& reference_id,
                                const CompressionSpec& cs, const LabeledDataset& train_set, std::uint64_t seed) {
    cs.validate();
    CompressedModel out;
    out.base_model_id = reference_id;
    out.spec = reference.spec;
    out.compression = cs;

    switch (cs.method) {
    case CompressionMethod::prune:
        out.params = prune_magnitude(reference.params, *cs.sparsity, cs.scope);
        break;
    case CompressionMethod::quantize:
        out.params = quantize_uniform(reference.params, *cs.bits);
        break;
    case CompressionMethod::distill: {
        if (!cs.student_widths.empty()) {
            out.spec.architecture = Architecture::mlp;
            out.spec.layer_widths = cs.student_widths;
        }
        auto r = distill_finetune(init_params(out.spec, seed), out.spec, reference, train_set, *cs.distill, seed);
        out.params = std::move(r.params);
        out.distill_log = std::move(r.log);
        break;
    }
    case CompressionMethod::prune_then_distill: {
        auto pruned = prune_magnitude(reference.params, *cs.sparsity, cs.scope);
        auto r = distill_finetune(std::move(pruned), out.spec, reference, train_set, *cs.distill, seed);
        out.params = std::move(r.params);
        out.distill_log = std::move(r.log);
        break;
    }
    }
    out.achieved_sparsity = weight_sparsity(out.params);
    out.distinct_values = distinct_values_per_tensor(out.params);
    return out;
}

} // namespace memgauge
