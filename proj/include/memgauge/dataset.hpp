#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "matrix.hpp"

namespace memgauge {

using Label = std::uint32_t;

/// Ordered examples with class labels. `ids` are positions in the dataset the
/// examples were first loaded or generated into; restriction keeps them.
struct LabeledDataset {
    Matrix<float> features;
    std::vector<Label> labels;
    std::size_t n_classes = 0;
    std::vector<std::size_t> ids;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t n_features() const noexcept { return features.cols(); }
    bool empty() const noexcept { return labels.empty(); }

    /// Builds a dataset whose ids are 0..n-1.
    static LabeledDataset make(Matrix<float> features, std::vector<Label> labels, std::size_t n_classes) {
        LabeledDataset d;
        d.features = std::move(features);
        d.labels = std::move(labels);
        d.n_classes = n_classes;
        d.ids.resize(d.labels.size());
        std::iota(d.ids.begin(), d.ids.end(), std::size_t{0});
        d.validate();
        return d;
    }

    void validate() const {
        if (n_classes == 0)
            throw ConfigError("dataset must have at least one class");
        if (features.rows() != labels.size())
            throw DimensionError("feature rows (" + std::to_string(features.rows()) + ") != labels (" +
                                 std::to_string(labels.size()) + ")");
        if (ids.size() != labels.size())
            throw DimensionError("ids length != labels length");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] >= n_classes)
                throw InvalidLabelError(i, labels[i]);
    }

    friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Sub-dataset of the examples whose flag is set, in original order and with original ids.
inline LabeledDataset restrict(const LabeledDataset& data, std::span<const std::uint8_t> keep) {
    if (keep.size() != data.size())
        throw DimensionError("mask length " + std::to_string(keep.size()) + " != dataset size " +
                             std::to_string(data.size()));
    const auto n = static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(), [](auto k) { return k != 0; }));
    LabeledDataset out;
    out.n_classes = data.n_classes;
    out.features.resize(n, data.n_features());
    out.labels.reserve(n);
    out.ids.reserve(n);
    std::size_t r = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!keep[i])
            continue;
        std::ranges::copy(data.features.row(i), out.features.row(r).begin());
        out.labels.push_back(data.labels[i]);
        out.ids.push_back(data.ids[i]);
        ++r;
    }
    return out;
}

/// Per-feature standardization to zero mean and unit variance; constant features are only centered.
/// Per-feature shift and scale; constant features keep scale 1.
struct FeatureScaling {
    std::vector<double> mean;
    std::vector<double> inv_sd;
};

inline FeatureScaling fit_standardization(const LabeledDataset& data) {
    const std::size_t n = data.size(), d = data.n_features();
    FeatureScaling s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    if (n == 0)
        return s;
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r)
            mean += data.features(r, c);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double diff = data.features(r, c) - mean;
            var += diff * diff;
        }
        const double sd = std::sqrt(var / static_cast<double>(n));
        s.mean[c] = mean;
        s.inv_sd[c] = sd > 0.0 ? 1.0 / sd : 1.0;
    }
    return s;
}

inline void apply_standardization(LabeledDataset& data, const FeatureScaling& s) {
    if (s.mean.size() != data.n_features())
        throw DimensionError("scaling has " + std::to_string(s.mean.size()) + " features, data has " +
                             std::to_string(data.n_features()));
    for (std::size_t r = 0; r < data.size(); ++r)
        for (std::size_t c = 0; c < data.n_features(); ++c)
            data.features(r, c) = static_cast<float>((data.features(r, c) - s.mean[c]) * s.inv_sd[c]);
}

/// Standardizes in place with the dataset's own statistics and returns them for reuse on other splits.
inline FeatureScaling standardize_features(LabeledDataset& data) {
    auto s = fit_standardization(data);
    apply_standardization(data, s);
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic long-tail mixtures

struct LongTailConfig {
    std::size_t n_subpopulations = 8;
    double frequency_exponent = 1.5;
    std::size_t n_classes = 4;
    std::size_t n_features = 16;
    double cluster_spread = 0.1;
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    double label_noise = 0.0;

    void validate() const {
        if (n_classes == 0 || n_features == 0)
            throw ConfigError("n_classes and n_features must be positive");
        if (n_subpopulations < n_classes)
            throw ConfigError("n_subpopulations (" + std::to_string(n_subpopulations) +
                              ") must be >= n_classes (" + std::to_string(n_classes) + ")");
        if (train_size < n_classes || test_size < n_classes)
            throw ConfigError("train_size and test_size must be >= n_classes");
        if (!(frequency_exponent >= 0.0) || !std::isfinite(frequency_exponent))
            throw ConfigError("frequency_exponent must be finite and >= 0");
        if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread))
            throw ConfigError("cluster_spread must be finite and >= 0");
        if (!(label_noise >= 0.0 && label_noise < 1.0))
            throw ConfigError("label_noise must lie in [0, 1)");
    }

    /// Normalized Zipf weights: subpopulation k (1-based) has weight k^-exponent.
    std::vector<double> subpopulation_weights() const {
        std::vector<double> w(n_subpopulations);
        for (std::size_t k = 0; k < n_subpopulations; ++k)
            w[k] = std::pow(static_cast<double>(k + 1), -frequency_exponent);
        const double total = std::accumulate(w.begin(), w.end(), 0.0);
        for (auto& x : w)
            x /= total;
        return w;
    }

    /// Subpopulation k always carries class k mod n_classes.
    Label subpopulation_label(std::size_t k) const { return static_cast<Label>(k % n_classes); }
};

struct LongTailData {
    LabeledDataset train;
    LabeledDataset test;
    Matrix<float> centers;
    std::vector<std::size_t> train_subpopulation;
    std::vector<std::size_t> test_subpopulation;
};

/// Draws train and test i.i.d. from one Zipf mixture of Gaussian clusters.
/// Cluster centers are uniform in the unit cube and samples are clamped to [0, 1].
inline LongTailData generate_longtail(const LongTailConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    LongTailData out;
    out.centers.resize(cfg.n_subpopulations, cfg.n_features);
    for (auto& c : out.centers.flat())
        c = static_cast<float>(unit(rng));

    const auto weights = cfg.subpopulation_weights();
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_int_distribution<Label> any_label(0, static_cast<Label>(cfg.n_classes - 1));

    auto draw = [&](std::size_t n, std::vector<std::size_t>& subpop) {
        Matrix<float> x(n, cfg.n_features);
        std::vector<Label> y(n);
        subpop.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = pick(rng);
            subpop[i] = k;
            for (std::size_t f = 0; f < cfg.n_features; ++f) {
                const double v = out.centers(k, f) + cfg.cluster_spread * noise(rng);
                x(i, f) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
            y[i] = cfg.subpopulation_label(k);
            if (cfg.label_noise > 0.0 && unit(rng) < cfg.label_noise)
                y[i] = any_label(rng);
        }
        return LabeledDataset::make(std::move(x), std::move(y), cfg.n_classes);
    };

    out.train = draw(cfg.train_size, out.train_subpopulation);
    out.test = draw(cfg.test_size, out.test_subpopulation);
    return out;
}

// ---------------------------------------------------------------------------
// MGDS serialization: "MGDS", u32 n_examples, u32 n_features, u32 n_classes,
// u32 labels[n], f32 features[n * n_features] (row-major, little-endian).

inline Bytes encode_dataset(const LabeledDataset& data) {
    ByteWriter w;
    w.put_bytes("MGDS");
    w.put_u32(static_cast<std::uint32_t>(data.size()));
    w.put_u32(static_cast<std::uint32_t>(data.n_features()));
    w.put_u32(static_cast<std::uint32_t>(data.n_classes));
    for (auto y : data.labels)
        w.put_u32(y);
    for (float v : data.features.flat())
        w.put_f32(v);
    return std::move(w).bytes();
}

inline LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("MGDS");
    const std::size_t n = r.get_u32(), d = r.get_u32(), classes = r.get_u32();
    if (r.remaining() != n * 4 + n * d * 4)
        throw MalformedFileError("MGDS payload size does not match header");
    std::vector<Label> labels(n);
    for (auto& y : labels)
        y = r.get_u32();
    Matrix<float> x(n, d);
    for (auto& v : x.flat())
        v = r.get_f32();
    return LabeledDataset::make(std::move(x), std::move(labels), classes);
}

inline void save_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
    write_file(path, encode_dataset(data));
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

} // namespace memgauge
