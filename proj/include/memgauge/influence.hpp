#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "binary_io.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "seeding.hpp"
#include "train.hpp"

namespace memgauge {

// ---------------------------------------------------------------------------
// Masks

/// t x n inclusion masks; row k selects the training subset of trial k.
struct MaskMatrix {
    Matrix<std::uint8_t> rows;
    double inclusion_prob = 0.0;
    std::uint64_t seed = 0;
    std::size_t resampled_rows = 0; // rows redrawn because they came out all-false

    std::size_t n_trials() const noexcept { return rows.rows(); }
    std::size_t n_examples() const noexcept { return rows.cols(); }
    std::span<const std::uint8_t> row(std::size_t k) const { return rows.row(k); }

    friend bool operator==(const MaskMatrix&, const MaskMatrix&) = default;
};

/// i.i.d. Bernoulli(p) masks. Rows without any included example are redrawn.
inline MaskMatrix sample_masks(std::size_t t, std::size_t n, double p, std::uint64_t seed) {
    if (t < 2)
        throw ConfigError("need at least 2 trials, got " + std::to_string(t));
    if (n == 0)
        throw ConfigError("mask width must be positive");
    if (!(p > 0.0 && p < 1.0))
        throw ConfigError("inclusion probability must lie in (0, 1)");
    MaskMatrix m{Matrix<std::uint8_t>(t, n), p, seed, 0};
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(p);
    for (std::size_t k = 0; k < t; ++k) {
        auto row = m.rows.row(k);
        for (;;) {
            bool any = false;
            for (auto& v : row) {
                v = coin(rng) ? 1 : 0;
                any = any || v;
            }
            if (any)
                break;
            ++m.resampled_rows;
        }
    }
    return m;
}

// "MGMK", u32 t, u32 n, f64 p, u64 seed, u32 resampled_rows, then t bit-packed rows.
inline Bytes encode_masks(const MaskMatrix& m) {
    ByteWriter w;
    w.put_bytes("MGMK");
    w.put_u32(static_cast<std::uint32_t>(m.n_trials()));
    w.put_u32(static_cast<std::uint32_t>(m.n_examples()));
    w.put_f64(m.inclusion_prob);
    w.put_u64(m.seed);
    w.put_u32(static_cast<std::uint32_t>(m.resampled_rows));
    for (std::size_t k = 0; k < m.n_trials(); ++k)
        w.put_bytes(pack_bits(m.row(k)));
    return std::move(w).bytes();
}

inline MaskMatrix decode_masks(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("MGMK");
    const std::size_t t = r.get_u32(), n = r.get_u32();
    MaskMatrix m{Matrix<std::uint8_t>(t, n), r.get_f64(), r.get_u64(), r.get_u32()};
    for (std::size_t k = 0; k < t; ++k) {
        auto bits = unpack_bits(r.get_bytes((n + 7) / 8), n);
        std::ranges::copy(bits, m.rows.row(k).begin());
    }
    r.expect_end();
    return m;
}

// ---------------------------------------------------------------------------
// Learners

template <class C>
concept Classifier = requires(const C& c, const Matrix<float>& x) {
    { c.predict(x) } -> std::convertible_to<std::vector<Label>>;
};

/// fit(train, eval, seed) produces a classifier; eval is the set used for checkpoint selection.
template <class L>
concept Learner = requires(const L& learner, const LabeledDataset& train, const LabeledDataset& eval, std::uint64_t seed) {
    { learner.fit(train, eval, seed) } -> Classifier;
};

/// Trains a network with the configured trainer, replacing its seed with the trial seed.
struct NetworkLearner {
    ModelSpec spec;
    TrainConfig config;

    TrainedModel fit(const LabeledDataset& train_set, const LabeledDataset& eval_set, std::uint64_t seed) const {
        auto c = config;
        c.seed = seed;
        return train(spec, train_set, eval_set, c);
    }
};

/// 1-nearest-neighbour (squared Euclidean); ties go to the earliest training example.
class NearestNeighborClassifier {
public:
    explicit NearestNeighborClassifier(LabeledDataset train_set) : train_(std::move(train_set)) {
        if (train_.empty())
            throw EmptyTrainingSetError();
    }

    std::vector<Label> predict(const Matrix<float>& x) const {
        if (x.cols() != train_.n_features())
            throw DimensionError("feature width mismatch");
        std::vector<Label> out(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto q = x.row(r);
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t i = 0; i < train_.size(); ++i) {
                auto s = train_.features.row(i);
                double d = 0.0;
                for (std::size_t f = 0; f < q.size(); ++f) {
                    const double diff = static_cast<double>(q[f]) - static_cast<double>(s[f]);
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    arg = i;
                }
            }
            out[r] = train_.labels[arg];
        }
        return out;
    }

private:
    LabeledDataset train_;
};

/// Deterministic in the data alone; the seed is ignored.
struct NearestNeighborLearner {
    NearestNeighborClassifier fit(const LabeledDataset& train_set, const LabeledDataset&, std::uint64_t) const {
        return NearestNeighborClassifier(train_set);
    }
};

// ---------------------------------------------------------------------------
// Trials

enum class TrialStatus { ok, failed };

struct TrialRecord {
    std::size_t trial_index = 0;
    std::uint64_t seed = 0;
    TrialStatus status = TrialStatus::ok;
    std::string failure_reason;
    BoolVector train_correct; // C_k over all of S
    BoolVector test_correct;  // D_k over all of T
    double eval_accuracy_at_checkpoint = std::numeric_limits<double>::quiet_NaN();

    bool ok() const noexcept { return status == TrialStatus::ok; }
    friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

inline std::uint64_t trial_seed(std::uint64_t master, std::size_t k) {
    return derive_seed(master, SeedStream::trial, k);
}

struct TrialOptions {
    std::uint64_t master_seed = 0;
    std::size_t jobs = 1;
    /// Returns a previously completed record for trial k, if any; it is used instead of retraining.
    std::function<std::optional<TrialRecord>(std::size_t)> lookup;
    /// Called (possibly concurrently) after a trial is trained.
    std::function<void(const TrialRecord&)> on_complete;
};

/// Runs one trial: fit on the masked subset of S, then record correctness on all of S and T.
template <Learner L>
TrialRecord run_trial(const LabeledDataset& S, const LabeledDataset& T, std::span<const std::uint8_t> mask,
                      const L& learner, std::size_t k, std::uint64_t master_seed) {
    TrialRecord rec;
    rec.trial_index = k;
    rec.seed = trial_seed(master_seed, k);
    try {
        const auto subset = restrict(S, mask);
        const auto fitted = learner.fit(subset, T, rec.seed);
        rec.train_correct = correctness(fitted.predict(S.features), S.labels);
        rec.test_correct = correctness(fitted.predict(T.features), T.labels);
        rec.eval_accuracy_at_checkpoint = mean_of(rec.test_correct);
    } catch (const DivergenceError& e) {
        rec = TrialRecord{k, rec.seed, TrialStatus::failed, e.what(), {}, {}, rec.eval_accuracy_at_checkpoint};
    } catch (const EmptyTrainingSetError& e) {
        rec = TrialRecord{k, rec.seed, TrialStatus::failed, e.what(), {}, {}, rec.eval_accuracy_at_checkpoint};
    }
    return rec;
}

/// Runs every trial of the mask matrix on up to `jobs` threads. Records come back ordered by
/// trial index and depend only on (data, masks, learner, master seed), never on scheduling.
template <Learner L>
std::vector<TrialRecord> run_trials(const LabeledDataset& S, const LabeledDataset& T, const MaskMatrix& masks,
                                    const L& learner, const TrialOptions& opts = {}) {
    if (masks.n_examples() != S.size())
        throw DimensionError("mask width " + std::to_string(masks.n_examples()) + " != |S| " +
                             std::to_string(S.size()));
    const std::size_t t = masks.n_trials();
    std::vector<TrialRecord> records(t);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&] {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= t)
                return;
            try {
                if (opts.lookup) {
                    if (auto found = opts.lookup(k)) {
                        records[k] = std::move(*found);
                        continue;
                    }
                }
                records[k] = run_trial(S, T, masks.row(k), learner, k, opts.master_seed);
                if (opts.on_complete)
                    opts.on_complete(records[k]);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
                next.store(t);
                return;
            }
        }
    };

    const std::size_t jobs = std::clamp<std::size_t>(opts.jobs, 1, t);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t j = 0; j < jobs; ++j)
            pool.emplace_back(worker);
    }
    if (failure)
        std::rethrow_exception(failure);

    const auto ok = std::ranges::count_if(records, [](const auto& r) { return r.ok(); });
    if (ok < 2)
        throw EstimationError("only " + std::to_string(ok) + " of " + std::to_string(t) +
                              " trials succeeded; at least 2 are required");
    return records;
}

// Trial record file: "MGTR", u32 trial_index, u32 |S|, u32 |T|, bit-packed C_k, bit-packed D_k.
inline Bytes encode_trial_bits(const TrialRecord& r) {
    ByteWriter w;
    w.put_bytes("MGTR");
    w.put_u32(static_cast<std::uint32_t>(r.trial_index));
    w.put_u32(static_cast<std::uint32_t>(r.train_correct.size()));
    w.put_u32(static_cast<std::uint32_t>(r.test_correct.size()));
    w.put_bytes(pack_bits(r.train_correct));
    w.put_bytes(pack_bits(r.test_correct));
    return std::move(w).bytes();
}

inline void decode_trial_bits(std::span<const std::uint8_t> bytes, TrialRecord& r) {
    ByteReader rd(bytes);
    rd.expect_magic("MGTR");
    r.trial_index = rd.get_u32();
    const std::size_t ns = rd.get_u32(), nt = rd.get_u32();
    r.train_correct = unpack_bits(rd.get_bytes((ns + 7) / 8), ns);
    r.test_correct = unpack_bits(rd.get_bytes((nt + 7) / 8), nt);
    rd.expect_end();
}

// ---------------------------------------------------------------------------
// Influence estimation

enum class Role : std::uint8_t { test = 0, train = 1 };

inline const char* to_string(Role r) { return r == Role::train ? "train" : "test"; }

/// rows x cols influence estimates; entry (i, j) is the influence of training example j on
/// target example i. NaN marks columns that were never included or never excluded.
struct InfluenceMatrix {
    Matrix<float> values;
    Role row_role = Role::test;
    std::vector<std::uint32_t> counts_included;
    std::vector<std::uint32_t> counts_excluded;

    std::size_t rows() const noexcept { return values.rows(); }
    std::size_t cols() const noexcept { return values.cols(); }
    bool column_defined(std::size_t j) const { return counts_included[j] > 0 && counts_excluded[j] > 0; }

    friend bool operator==(const InfluenceMatrix& a, const InfluenceMatrix& b) {
        // NaN-aware bitwise comparison
        if (a.row_role != b.row_role || a.counts_included != b.counts_included ||
            a.counts_excluded != b.counts_excluded || a.values.rows() != b.values.rows() ||
            a.values.cols() != b.values.cols())
            return false;
        return std::ranges::equal(a.values.flat(), b.values.flat(), [](float x, float y) {
            return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
        });
    }
};

inline constexpr float missing_influence = std::numeric_limits<float>::quiet_NaN();

/// Difference of conditional means, computed from integer co-occurrence counts:
/// I = (C^T M) / n_in - (C^T (1 - M)) / n_out, with C the target correctness rows
/// (D for the test role, C for the train role) of the successful trials.
inline InfluenceMatrix estimate_influence(std::span<const TrialRecord> records, const MaskMatrix& masks, Role target) {
    std::vector<const TrialRecord*> good;
    for (const auto& r : records)
        if (r.ok())
            good.push_back(&r);
    if (good.size() < 2)
        throw EstimationError("need at least 2 successful trials, got " + std::to_string(good.size()));

    const std::size_t n_train = masks.n_examples();
    auto targets = [target](const TrialRecord& r) -> const BoolVector& {
        return target == Role::test ? r.test_correct : r.train_correct;
    };
    const std::size_t n_rows = targets(*good.front()).size();

    InfluenceMatrix out;
    out.row_role = target;
    out.counts_included.assign(n_train, 0);
    out.counts_excluded.assign(n_train, 0);
    std::vector<std::uint32_t> row_total(n_rows, 0);   // C^T 1
    Matrix<std::uint32_t> hits_in(n_rows, n_train, 0); // C^T M

    for (const TrialRecord* rec : good) {
        if (rec->trial_index >= masks.n_trials())
            throw DimensionError("trial index " + std::to_string(rec->trial_index) + " has no mask row");
        const auto& d = targets(*rec);
        if (d.size() != n_rows)
            throw DimensionError("trial " + std::to_string(rec->trial_index) + " has inconsistent correctness length");
        const auto m = masks.row(rec->trial_index);
        for (std::size_t j = 0; j < n_train; ++j)
            ++(m[j] ? out.counts_included[j] : out.counts_excluded[j]);
        for (std::size_t i = 0; i < n_rows; ++i) {
            if (!d[i])
                continue;
            ++row_total[i];
            auto h = hits_in.row(i);
            for (std::size_t j = 0; j < n_train; ++j)
                h[j] += m[j];
        }
    }

    bool any_defined = false;
    out.values.resize(n_rows, n_train);
    for (std::size_t i = 0; i < n_rows; ++i) {
        for (std::size_t j = 0; j < n_train; ++j) {
            const std::uint32_t n_in = out.counts_included[j], n_out = out.counts_excluded[j];
            if (n_in == 0 || n_out == 0) {
                out.values(i, j) = missing_influence;
                continue;
            }
            any_defined = true;
            const std::uint32_t in_hits = hits_in(i, j);
            const std::uint32_t out_hits = row_total[i] - in_hits;
            out.values(i, j) = static_cast<float>(static_cast<double>(in_hits) / n_in -
                                                  static_cast<double>(out_hits) / n_out);
        }
    }
    if (!any_defined)
        throw EstimationError("every training example was either always included or always excluded");
    return out;
}

/// Self-influence: the diagonal of the train-on-train matrix.
inline std::vector<double> memorization(const InfluenceMatrix& train_influence) {
    if (train_influence.row_role != Role::train)
        throw ShapeError("memorization needs a train-role influence matrix");
    if (train_influence.rows() != train_influence.cols())
        throw ShapeError("memorization needs a square matrix, got " + std::to_string(train_influence.rows()) + "x" +
                         std::to_string(train_influence.cols()));
    std::vector<double> out(train_influence.rows());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = train_influence.values(i, i);
    return out;
}

/// Per row: mean influence received from all training examples, skipping missing entries.
/// Rows with no defined entry are NaN.
inline std::vector<double> mean_received_influence(const InfluenceMatrix& I) {
    std::vector<double> out(I.rows(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < I.rows(); ++i) {
        double sum = 0.0;
        std::size_t n = 0;
        for (float v : I.values.row(i)) {
            if (std::isnan(v))
                continue;
            sum += v;
            ++n;
        }
        if (n > 0)
            out[i] = sum / static_cast<double>(n);
    }
    return out;
}

/// Per column: mean influence a training example exerts over all target rows.
inline std::vector<double> mean_exerted_influence(const InfluenceMatrix& I) {
    std::vector<double> sum(I.cols(), 0.0);
    std::vector<std::size_t> n(I.cols(), 0);
    for (std::size_t i = 0; i < I.rows(); ++i) {
        auto row = I.values.row(i);
        for (std::size_t j = 0; j < I.cols(); ++j) {
            if (std::isnan(row[j]))
                continue;
            sum[j] += row[j];
            ++n[j];
        }
    }
    std::vector<double> out(I.cols(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t j = 0; j < I.cols(); ++j)
        if (n[j] > 0)
            out[j] = sum[j] / static_cast<double>(n[j]);
    return out;
}

// "INFL", u8 row_role, u32 rows, u32 cols, f32 values (row-major, NaN = missing),
// u32 counts_included[cols], u32 counts_excluded[cols].
inline Bytes encode_influence(const InfluenceMatrix& I) {
    ByteWriter w;
    w.put_bytes("INFL");
    w.put_u8(static_cast<std::uint8_t>(I.row_role));
    w.put_u32(static_cast<std::uint32_t>(I.rows()));
    w.put_u32(static_cast<std::uint32_t>(I.cols()));
    for (float v : I.values.flat())
        w.put_f32(v);
    for (auto c : I.counts_included)
        w.put_u32(c);
    for (auto c : I.counts_excluded)
        w.put_u32(c);
    return std::move(w).bytes();
}

inline InfluenceMatrix decode_influence(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("INFL");
    InfluenceMatrix I;
    const auto role = r.get_u8();
    if (role > 1)
        throw MalformedFileError("unknown row role " + std::to_string(role));
    I.row_role = static_cast<Role>(role);
    const std::size_t rows = r.get_u32(), cols = r.get_u32();
    if (r.remaining() != rows * cols * 4 + cols * 8)
        throw MalformedFileError("INFL payload size does not match header");
    I.values.resize(rows, cols);
    for (auto& v : I.values.flat())
        v = r.get_f32();
    I.counts_included.resize(cols);
    I.counts_excluded.resize(cols);
    for (auto& c : I.counts_included)
        c = r.get_u32();
    for (auto& c : I.counts_excluded)
        c = r.get_u32();
    return I;
}

inline void save_influence(const std::filesystem::path& path, const InfluenceMatrix& I) {
    write_file(path, encode_influence(I));
}

inline InfluenceMatrix load_influence(const std::filesystem::path& path) { return decode_influence(read_file(path)); }

} // namespace memgauge
