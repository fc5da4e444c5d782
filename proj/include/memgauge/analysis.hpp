#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "influence.hpp"
#include "special_functions.hpp"

namespace memgauge {

// ---------------------------------------------------------------------------
// Compression-impacted exemplars

/// Partition of test indices by how the reference and compressed predictions compare.
/// cie_u: reference right, compressed wrong. cie_c: compressed right, reference wrong.
/// cie_w: both wrong with different predictions.
struct CieReport {
    std::vector<std::size_t> cie;
    std::vector<std::size_t> cie_u;
    std::vector<std::size_t> cie_c;
    std::vector<std::size_t> cie_w;
    std::vector<std::size_t> non_cie;
    std::string ref_model_id;
    std::string comp_model_id;

    std::size_t n_examples() const noexcept { return cie.size() + non_cie.size(); }
    friend bool operator==(const CieReport&, const CieReport&) = default;
};

inline CieReport find_cies(std::span<const Label> ref_preds, std::span<const Label> comp_preds,
                           std::span<const Label> labels) {
    if (ref_preds.size() != comp_preds.size() || ref_preds.size() != labels.size())
        throw DimensionError("prediction and label vectors differ in length");
    CieReport r;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (ref_preds[i] == comp_preds[i]) {
            r.non_cie.push_back(i);
            continue;
        }
        r.cie.push_back(i);
        if (ref_preds[i] == labels[i])
            r.cie_u.push_back(i);
        else if (comp_preds[i] == labels[i])
            r.cie_c.push_back(i);
        else
            r.cie_w.push_back(i);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Two-sample t-test

enum class TTestVariant { student_pooled, welch };

inline const char* to_string(TTestVariant v) { return v == TTestVariant::welch ? "welch" : "student_pooled"; }

struct TTestResult {
    double t_statistic = 0.0;
    double degrees_of_freedom = 0.0;
    double p_value = 1.0; // two-sided
    TTestVariant variant = TTestVariant::student_pooled;
    std::size_t n_a = 0;
    std::size_t n_b = 0;
    double mean_a = 0.0;
    double mean_b = 0.0;
    bool significant_at_005 = false;
};

namespace detail {

struct Moments {
    double mean;
    double var; // unbiased
};

inline Moments moments(std::span<const double> x) {
    double mean = 0.0;
    for (double v : x)
        mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x)
        ss += (v - mean) * (v - mean);
    return {mean, ss / static_cast<double>(x.size() - 1)};
}

} // namespace detail

/// Two-sided two-sample t-test; t > 0 when mean(a) > mean(b).
inline TTestResult ttest_two_sample(std::span<const double> a, std::span<const double> b,
                                    TTestVariant variant = TTestVariant::student_pooled) {
    if (a.size() < 2 || b.size() < 2)
        throw DegenerateTestError("t-test needs at least 2 values per group (got " + std::to_string(a.size()) +
                                  " and " + std::to_string(b.size()) + ")");
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::ranges::all_of(a, finite) || !std::ranges::all_of(b, finite))
        throw DegenerateTestError("t-test inputs must be finite");

    const auto ma = detail::moments(a), mb = detail::moments(b);
    if (ma.var == 0.0 && mb.var == 0.0)
        throw DegenerateTestError("both groups have zero variance");

    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    TTestResult r;
    r.variant = variant;
    r.n_a = a.size();
    r.n_b = b.size();
    r.mean_a = ma.mean;
    r.mean_b = mb.mean;
    double se = 0.0;
    if (variant == TTestVariant::student_pooled) {
        r.degrees_of_freedom = na + nb - 2.0;
        const double pooled = ((na - 1.0) * ma.var + (nb - 1.0) * mb.var) / r.degrees_of_freedom;
        se = std::sqrt(pooled * (1.0 / na + 1.0 / nb));
    } else {
        const double qa = ma.var / na, qb = mb.var / nb;
        se = std::sqrt(qa + qb);
        r.degrees_of_freedom = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    }
    r.t_statistic = (ma.mean - mb.mean) / se;
    r.p_value = special::student_t_two_sided(r.t_statistic, r.degrees_of_freedom);
    r.significant_at_005 = r.p_value <= 0.05;
    return r;
}

enum class CieSubset { all_cie, cie_u, cie_c };

inline const char* to_string(CieSubset s) {
    switch (s) {
    case CieSubset::cie_u: return "cie_u";
    case CieSubset::cie_c: return "cie_c";
    default: return "all_cie";
    }
}

inline const std::vector<std::size_t>& subset_indices(const CieReport& report, CieSubset s) {
    switch (s) {
    case CieSubset::cie_u: return report.cie_u;
    case CieSubset::cie_c: return report.cie_c;
    default: return report.cie;
    }
}

/// Mean received influence of the chosen CIE subset (group a) against non-CIEs (group b).
/// Rows whose mean is undefined are dropped from both groups.
inline TTestResult cie_influence_test(const InfluenceMatrix& I, const CieReport& report, CieSubset subset,
                                      TTestVariant variant = TTestVariant::student_pooled) {
    if (I.row_role != Role::test)
        throw ShapeError("CIE influence test needs a test-role influence matrix");
    if (I.rows() != report.n_examples())
        throw DimensionError("influence matrix has " + std::to_string(I.rows()) + " rows but the report covers " +
                             std::to_string(report.n_examples()) + " test examples");
    const auto means = mean_received_influence(I);
    auto collect = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> out;
        for (auto i : idx)
            if (!std::isnan(means[i]))
                out.push_back(means[i]);
        return out;
    };
    const auto a = collect(subset_indices(report, subset));
    const auto b = collect(report.non_cie);
    if (a.size() < 2)
        throw DegenerateTestError(std::string(to_string(subset)) + " has " + std::to_string(a.size()) +
                                  " defined rows; at least 2 are required");
    if (b.size() < 2)
        throw DegenerateTestError("non_cie has " + std::to_string(b.size()) + " defined rows; at least 2 are required");
    return ttest_two_sample(a, b, variant);
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
    std::vector<double> bin_edges;
    std::vector<std::size_t> counts;
    std::size_t non_finite = 0;
    bool log_scale_hint = true;

    std::size_t total() const {
        std::size_t n = 0;
        for (auto c : counts)
            n += c;
        return n;
    }
};

/// Equal-width bins over [min, max] of the finite values; the last bin is closed on the right.
/// A zero-width range produces a single bin.
inline Histogram histogram(std::span<const double> values, std::size_t n_bins) {
    if (n_bins == 0)
        throw ConfigError("histogram needs at least one bin");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    Histogram h;
    for (double v : values) {
        if (!std::isfinite(v)) {
            ++h.non_finite;
            continue;
        }
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(lo <= hi))
        throw EmptyDataError("histogram has no finite values");
    if (hi == lo) {
        h.bin_edges = {lo, hi};
        h.counts = {values.size() - h.non_finite};
        return h;
    }
    const double width = (hi - lo) / static_cast<double>(n_bins);
    h.bin_edges.resize(n_bins + 1);
    for (std::size_t k = 0; k <= n_bins; ++k)
        h.bin_edges[k] = lo + width * static_cast<double>(k);
    h.bin_edges.back() = hi;
    h.counts.assign(n_bins, 0);
    for (double v : values) {
        if (!std::isfinite(v))
            continue;
        auto k = static_cast<std::size_t>((v - lo) / width);
        ++h.counts[std::min(k, n_bins - 1)];
    }
    return h;
}

} // namespace memgauge
