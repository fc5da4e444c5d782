#pragma once

// End-to-end runs: estimate -> compress -> analyze -> report, with every intermediate
// artifact persisted under <out>/<run_id>/ and recorded in manifest.json.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "cifar10.hpp"
#include "compression.hpp"
#include "dataset.hpp"
#include "influence.hpp"
#include "model.hpp"
#include "serialization.hpp"
#include "train.hpp"

namespace memgauge::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* tool_version = "0.1.0";

enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_failure = 3, exit_missing = 4 };

class MissingArtifactsError : public Error {
public:
    explicit MissingArtifactsError(std::vector<std::string> missing)
        : Error("missing artifacts: " + join(missing)), missing_(std::move(missing)) {}
    const char* kind() const noexcept override { return "missing_artifacts"; }
    const std::vector<std::string>& missing() const noexcept { return missing_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v)
            s += (s.empty() ? "" : ", ") + x;
        return s;
    }
    std::vector<std::string> missing_;
};

// ---------------------------------------------------------------------------
// Configuration

inline json default_config() {
    return json::parse(R"({
        "seed": 1,
        "dataset": {
            "source": "synthetic",
            "n_subpopulations": 8,
            "frequency_exponent": 1.5,
            "n_classes": 4,
            "n_features": 16,
            "cluster_spread": 0.2,
            "train_size": 2000,
            "test_size": 500,
            "label_noise": 0.02
        },
        "model": {
            "architecture": "mlp",
            "layer_widths": [64],
            "activation": "relu"
        },
        "estimator": {
            "trials": 100,
            "mask_prob": 0.7,
            "target_std": null,
            "train_influence": true,
            "trainer": {
                "epochs": 30,
                "batch_size": 32,
                "learning_rate": 0.05,
                "momentum": 0.9,
                "checkpoint_selection": "best_eval_accuracy"
            }
        },
        "compression": {
            "method": "prune",
            "sparsity": 0.9,
            "scope": "global"
        },
        "analysis": {
            "histogram_bins": 30
        }
    })");
}

/// Parses a scalar override: JSON literals (numbers, booleans, null, arrays) are taken as such,
/// anything else as a string.
inline json parse_override_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return json(text);
    }
}

/// Sets `config[a][b]...` from a dot path such as "estimator.trials".
inline void apply_override(json& config, const std::string& dotted, const json& value) {
    json* node = &config;
    std::stringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.'))
        parts.push_back(part);
    if (parts.empty() || std::ranges::any_of(parts, [](const auto& p) { return p.empty(); }))
        throw ConfigError("bad override path \"" + dotted + "\"");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object())
            throw ConfigError("override path \"" + dotted + "\" crosses a non-object");
        node = &(*node)[parts[i]];
    }
    if (!node->is_object() && !node->is_null())
        throw ConfigError("override path \"" + dotted + "\" crosses a non-object");
    (*node)[parts.back()] = value;
}

/// Defaults, merged with the config file (if any), then dot-path overrides, then MEMGAUGE_SEED.
inline json resolve_config(const std::optional<fs::path>& config_path,
                           const std::vector<std::pair<std::string, json>>& overrides) {
    json cfg = default_config();
    if (config_path) {
        json file;
        try {
            file = json::parse(read_text(*config_path));
        } catch (const IoError& e) {
            throw ConfigError(std::string("cannot read config: ") + e.what());
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + config_path->string() + " is not valid JSON: " + e.what());
        }
        if (!file.is_object())
            throw ConfigError("config must be a JSON object");
        cfg.merge_patch(file);
        // method-specific sections are taken whole so default keys of another variant cannot leak in
        if (file.contains("compression"))
            cfg["compression"] = file["compression"];
        if (file.contains("dataset") && file["dataset"].value("source", "synthetic") != "synthetic")
            cfg["dataset"] = file["dataset"];
    }
    for (const auto& [path, value] : overrides)
        apply_override(cfg, path, value);
    if (const char* env = std::getenv("MEMGAUGE_SEED"); env && *env) {
        try {
            cfg["seed"] = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("MEMGAUGE_SEED is not an unsigned integer: ") + env);
        }
    }
    return cfg;
}

template <class T>
T config_get(const json& section, const char* key, const char* where) {
    if (!section.contains(key))
        throw ConfigError(std::string("missing ") + where + "." + key);
    try {
        return section.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("bad value for ") + where + "." + key);
    }
}

inline std::uint64_t master_seed(const json& cfg) { return config_get<std::uint64_t>(cfg, "seed", "config"); }

/// FNV-1a of the canonical config dump; names the run directory when no run_id is given.
inline std::string derive_run_id(const json& cfg) {
    if (cfg.contains("run_id") && cfg["run_id"].is_string())
        return cfg["run_id"].get<std::string>();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : cfg.dump()) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct EstimatorSettings {
    std::size_t trials = 100;
    double mask_prob = 0.7;
    std::optional<double> target_std;
    bool train_influence = true;
    TrainConfig trainer;
};

inline EstimatorSettings estimator_settings(const json& cfg) {
    const auto& e = cfg.at("estimator");
    EstimatorSettings s;
    const auto trials = config_get<long long>(e, "trials", "estimator");
    if (trials < 2)
        throw ConfigError("estimator.trials must be >= 2, got " + std::to_string(trials));
    s.trials = static_cast<std::size_t>(trials);
    s.mask_prob = config_get<double>(e, "mask_prob", "estimator");
    if (!(s.mask_prob > 0.0 && s.mask_prob < 1.0))
        throw ConfigError("estimator.mask_prob must lie in (0, 1)");
    if (e.contains("target_std") && !e["target_std"].is_null())
        s.target_std = e["target_std"].get<double>();
    s.train_influence = e.value("train_influence", true);
    try {
        s.trainer = train_config_from_json(e.value("trainer", json::object()));
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("bad estimator.trainer: ") + ex.what());
    }
    s.trainer.validate();
    return s;
}

struct Datasets {
    LabeledDataset train;
    LabeledDataset test;
};

inline Datasets materialize_datasets(const json& cfg) {
    const auto& d = cfg.at("dataset");
    const auto source = config_get<std::string>(d, "source", "dataset");
    try {
        if (source == "synthetic") {
            LongTailConfig lc;
            lc.n_subpopulations = d.value("n_subpopulations", lc.n_subpopulations);
            lc.frequency_exponent = d.value("frequency_exponent", lc.frequency_exponent);
            lc.n_classes = d.value("n_classes", lc.n_classes);
            lc.n_features = d.value("n_features", lc.n_features);
            lc.cluster_spread = d.value("cluster_spread", lc.cluster_spread);
            lc.train_size = d.value("train_size", lc.train_size);
            lc.test_size = d.value("test_size", lc.test_size);
            lc.label_noise = d.value("label_noise", lc.label_noise);
            const auto seed = d.value("seed", derive_seed(master_seed(cfg), SeedStream::data));
            auto g = generate_longtail(lc, seed);
            return {std::move(g.train), std::move(g.test)};
        }
        if (source == "cifar10") {
            const auto files = config_get<std::vector<std::string>>(d, "train_files", "dataset");
            const auto test_file = config_get<std::string>(d, "test_file", "dataset");
            std::vector<fs::path> paths(files.begin(), files.end());
            std::optional<std::size_t> train_limit, test_limit;
            if (d.contains("train_limit") && !d["train_limit"].is_null())
                train_limit = d["train_limit"].get<std::size_t>();
            if (d.contains("test_limit") && !d["test_limit"].is_null())
                test_limit = d["test_limit"].get<std::size_t>();
            Datasets out{cifar10::load_batches(paths, train_limit), cifar10::load(test_file, test_limit)};
            if (d.value("standardize", false))
                apply_standardization(out.test, standardize_features(out.train)); // test reuses train statistics
            return out;
        }
        if (source == "mgds")
            return {load_dataset(config_get<std::string>(d, "train", "dataset")),
                    load_dataset(config_get<std::string>(d, "test", "dataset"))};
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad dataset section: ") + e.what());
    } catch (const IoError& e) {
        throw ConfigError(std::string("cannot read dataset: ") + e.what());
    }
    throw ConfigError("unknown dataset.source \"" + source + "\"");
}

inline ModelSpec model_spec(const json& cfg, const LabeledDataset& train_set) {
    ModelSpec spec;
    try {
        spec = model_spec_from_json(cfg.at("model"));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad model section: ") + e.what());
    }
    spec.n_features = train_set.n_features();
    spec.n_classes = train_set.n_classes;
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Run directory and manifest

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Prediction file: "MGPR", u32 n, u32 labels[n].
inline Bytes encode_predictions(std::span<const Label> preds) {
    ByteWriter w;
    w.put_bytes("MGPR");
    w.put_u32(static_cast<std::uint32_t>(preds.size()));
    for (auto p : preds)
        w.put_u32(p);
    return std::move(w).bytes();
}

inline std::vector<Label> decode_predictions(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("MGPR");
    std::vector<Label> out(r.get_u32());
    for (auto& p : out)
        p = r.get_u32();
    r.expect_end();
    return out;
}

/// Artifacts are written once; a rerun that produces identical bytes is a no-op and a
/// conflicting rewrite is refused.
inline void write_once(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (fs::exists(path)) {
        const auto existing = read_file(path);
        if (std::ranges::equal(existing, bytes))
            return;
        throw EstimationError("refusing to overwrite existing artifact " + path.string());
    }
    write_file(path, bytes);
}

inline void write_once_text(const fs::path& path, const std::string& text) {
    write_once(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

class Run {
public:
    /// Opens (or creates) the run directory for a resolved config.
    static Run for_config(const json& cfg, const fs::path& out_root) {
        Run r;
        r.dir_ = out_root / derive_run_id(cfg);
        if (fs::exists(r.manifest_path())) {
            r.manifest_ = json::parse(read_text(r.manifest_path()));
            if (r.manifest_.at("config") != cfg)
                throw ConfigError("run directory " + r.dir_.string() + " belongs to a different config");
        } else {
            r.manifest_ = {
                {"run_id", derive_run_id(cfg)},
                {"tool_version", tool_version},
                {"master_seed", master_seed(cfg)},
                {"config", cfg},
                {"created_at", utc_timestamp()},
                {"stages", json::array()},
                {"artifacts", json::object()},
            };
        }
        return r;
    }

    static Run open(const fs::path& manifest_path) {
        if (!fs::exists(manifest_path))
            throw MissingArtifactsError({manifest_path.string()});
        Run r;
        r.dir_ = manifest_path.parent_path();
        r.manifest_ = json::parse(read_text(manifest_path));
        return r;
    }

    const fs::path& dir() const noexcept { return dir_; }
    fs::path manifest_path() const { return dir_ / "manifest.json"; }
    const json& config() const { return manifest_.at("config"); }
    std::uint64_t seed() const { return master_seed(config()); }
    json& artifacts() { return manifest_["artifacts"]; }
    const json& artifacts() const { return manifest_.at("artifacts"); }

    fs::path path(const std::string& relative) const { return dir_ / relative; }

    /// Relative path of a recorded artifact, or nullopt.
    std::optional<std::string> artifact(const std::string& key) const {
        const auto& a = artifacts();
        if (a.contains(key) && a[key].is_string())
            return a[key].get<std::string>();
        return std::nullopt;
    }

    /// Adds a stage entry and persists the manifest. Existing keys are never removed.
    void record_stage(const std::string& command, const std::string& started, json details) {
        details["command"] = command;
        details["started_at"] = started;
        details["finished_at"] = utc_timestamp();
        manifest_["stages"].push_back(std::move(details));
        write_text(manifest_path(), manifest_.dump(2) + "\n");
    }

    Datasets load_datasets() const {
        std::vector<std::string> missing;
        for (const char* key : {"train_data", "test_data"})
            if (!artifact(key) || !fs::exists(path(*artifact(key))))
                missing.push_back(key);
        if (!missing.empty())
            throw MissingArtifactsError(missing);
        return {load_dataset(path(*artifact("train_data"))), load_dataset(path(*artifact("test_data")))};
    }

private:
    fs::path dir_;
    json manifest_;
};

inline void store_datasets(Run& run, const Datasets& data) {
    write_once(run.path("data/train.mgds"), encode_dataset(data.train));
    write_once(run.path("data/test.mgds"), encode_dataset(data.test));
    run.artifacts()["train_data"] = "data/train.mgds";
    run.artifacts()["test_data"] = "data/test.mgds";
}

/// Loads the run's stored datasets, materializing them from the config first if absent.
inline Datasets ensure_datasets(Run& run) {
    const auto have = [&](const char* key) { return run.artifact(key) && fs::exists(run.path(*run.artifact(key))); };
    if (!have("train_data") || !have("test_data"))
        store_datasets(run, materialize_datasets(run.config()));
    return run.load_datasets();
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateOptions {
    std::size_t jobs = 1;
};

struct EstimateSummary {
    fs::path manifest;
    std::size_t trained = 0;
    std::size_t reused = 0;
    std::size_t failed = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

inline std::string trial_stem(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "trials/trial_%05zu", k);
    return buf;
}

inline std::optional<TrialRecord> load_trial(const Run& run, std::size_t k, std::size_t n_train, std::size_t n_test) {
    const auto stem = trial_stem(k);
    const auto bits = run.path(stem + ".bin"), meta = run.path(stem + ".json");
    if (!fs::exists(bits) || !fs::exists(meta))
        return std::nullopt;
    try {
        const auto j = json::parse(read_text(meta));
        TrialRecord r;
        r.trial_index = j.at("trial_index").get<std::size_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.status = j.at("status").get<std::string>() == "ok" ? TrialStatus::ok : TrialStatus::failed;
        r.failure_reason = j.value("failure_reason", std::string());
        if (!j.at("checkpoint_accuracy").is_null())
            r.eval_accuracy_at_checkpoint = j["checkpoint_accuracy"].get<double>();
        decode_trial_bits(read_file(bits), r);
        if (r.trial_index != k || (r.ok() && (r.train_correct.size() != n_train || r.test_correct.size() != n_test)))
            return std::nullopt;
        return r;
    } catch (const std::exception&) {
        return std::nullopt; // unreadable or partial: retrain
    }
}

inline void save_trial(const Run& run, const TrialRecord& r) {
    const auto stem = trial_stem(r.trial_index);
    write_file(run.path(stem + ".bin"), encode_trial_bits(r));
    write_text(run.path(stem + ".json"), to_json(r).dump(2) + "\n");
}

inline std::string format_memorization_csv(std::span<const double> mem) {
    std::ostringstream os;
    os << "index,memorization\n";
    os << std::setprecision(9);
    for (std::size_t i = 0; i < mem.size(); ++i) {
        os << i << ',';
        if (std::isnan(mem[i]))
            os << "nan";
        else
            os << mem[i];
        os << '\n';
    }
    return os.str();
}

inline EstimateSummary run_estimate(const json& cfg, const fs::path& out_root, const EstimateOptions& opts = {}) {
    const auto started = utc_timestamp();
    const auto settings = estimator_settings(cfg);
    auto data = materialize_datasets(cfg);
    const auto spec = model_spec(cfg, data.train);
    if (settings.trainer.batch_size > data.train.size())
        throw ConfigError("batch_size exceeds the training set size");

    auto run = Run::for_config(cfg, out_root);
    fs::create_directories(run.path("trials"));
    const std::uint64_t seed = run.seed();

    store_datasets(run, data);

    const auto masks =
        sample_masks(settings.trials, data.train.size(), settings.mask_prob, derive_seed(seed, SeedStream::masks));
    write_once(run.path("masks.bin"), encode_masks(masks));
    run.artifacts()["masks"] = "masks.bin";

    EstimateSummary summary;
    std::mutex count_mutex;
    TrialOptions topts;
    topts.master_seed = seed;
    topts.jobs = opts.jobs;
    topts.lookup = [&](std::size_t k) {
        auto r = load_trial(run, k, data.train.size(), data.test.size());
        if (r) {
            std::lock_guard lock(count_mutex);
            ++summary.reused;
        }
        return r;
    };
    topts.on_complete = [&](const TrialRecord& r) {
        save_trial(run, r);
        std::lock_guard lock(count_mutex);
        ++summary.trained;
    };
    const auto records = run_trials(data.train, data.test, masks, NetworkLearner{spec, settings.trainer}, topts);
    summary.failed = static_cast<std::size_t>(std::ranges::count_if(records, [](const auto& r) { return !r.ok(); }));
    run.artifacts()["trials"] = "trials/";

    const auto test_infl = estimate_influence(records, masks, Role::test);
    write_once(run.path("influence_test.infl"), encode_influence(test_infl));
    run.artifacts()["influence_test"] = "influence_test.infl";
    summary.rows = test_infl.rows();
    summary.cols = test_infl.cols();

    if (settings.train_influence) {
        const auto train_infl = estimate_influence(records, masks, Role::train);
        write_once(run.path("influence_train.infl"), encode_influence(train_infl));
        run.artifacts()["influence_train"] = "influence_train.infl";
        write_once_text(run.path("memorization.csv"), format_memorization_csv(memorization(train_infl)));
        run.artifacts()["memorization"] = "memorization.csv";
    }

    json failed = json::array();
    for (const auto& r : records)
        if (!r.ok())
            failed.push_back({{"trial_index", r.trial_index}, {"reason", r.failure_reason}});
    run.record_stage("estimate", started,
                     {{"trials_trained", summary.trained},
                      {"trials_reused", summary.reused},
                      {"trials_failed", failed},
                      {"mask_resampled_rows", masks.resampled_rows}});
    summary.manifest = run.manifest_path();
    return summary;
}

// ---------------------------------------------------------------------------
// compress

/// Stable directory name for a compression, e.g. "prune-s0.9-global".
inline std::string compression_tag(const CompressionSpec& cs) {
    std::ostringstream os;
    os << to_string(cs.method);
    if (cs.sparsity)
        os << "-s" << *cs.sparsity << '-' << to_string(cs.scope);
    if (cs.bits)
        os << "-b" << *cs.bits;
    if (cs.distill) {
        if (const auto* f = std::get_if<FixedWeighting>(&cs.distill->weighting))
            os << "-fixed" << f->w_ce << '_' << f->w_kd;
        else {
            const auto& a = std::get<AdaptiveWeighting>(cs.distill->weighting);
            os << "-adaptive" << a.window << '_' << a.beta;
        }
        os << "-T" << cs.distill->temperature << "-e" << cs.distill->epochs;
    }
    if (!cs.student_widths.empty()) {
        os << "-w";
        for (auto w : cs.student_widths)
            os << '_' << w;
    }
    return os.str();
}

/// Builds a CompressionSpec from the "compression" config section. Keys that do not belong to
/// the chosen method are rejected.
inline CompressionSpec compression_spec_from_json(const json& c) {
    CompressionSpec cs;
    const auto method = config_get<std::string>(c, "method", "compression");
    if (method == "prune")
        cs.method = CompressionMethod::prune;
    else if (method == "quantize")
        cs.method = CompressionMethod::quantize;
    else if (method == "distill")
        cs.method = CompressionMethod::distill;
    else if (method == "prune_then_distill")
        cs.method = CompressionMethod::prune_then_distill;
    else
        throw ConfigError("unknown compression method \"" + method + "\"");

    auto present = [&](const char* key) { return c.contains(key) && !c[key].is_null(); };
    try {
        if (present("sparsity"))
            cs.sparsity = c["sparsity"].get<double>();
        if (present("bits"))
            cs.bits = c["bits"].get<int>();
        if (present("scope")) {
            const auto scope = c["scope"].get<std::string>();
            if (scope == "global")
                cs.scope = PruneScope::global;
            else if (scope == "per_tensor")
                cs.scope = PruneScope::per_tensor;
            else
                throw ConfigError("unknown pruning scope \"" + scope + "\"");
        }
        if (present("student_widths"))
            cs.student_widths = c["student_widths"].get<std::vector<std::size_t>>();
        if (present("distill")) {
            const auto& d = c["distill"];
            DistillConfig dc;
            dc.temperature = d.value("temperature", dc.temperature);
            dc.epochs = d.value("epochs", dc.epochs);
            dc.learning_rate = d.value("learning_rate", dc.learning_rate);
            dc.batch_size = d.value("batch_size", dc.batch_size);
            dc.momentum = d.value("momentum", dc.momentum);
            const auto w = d.value("weighting", json::object());
            const auto kind = w.value("kind", std::string("fixed"));
            if (kind == "fixed")
                dc.weighting = FixedWeighting{w.value("w_ce", 1.0), w.value("w_kd", 1.0)};
            else if (kind == "adaptive")
                dc.weighting = AdaptiveWeighting{w.value("window", std::size_t{3}), w.value("beta", 0.1)};
            else
                throw ConfigError("unknown distillation weighting \"" + kind + "\"");
            cs.distill = dc;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad compression section: ") + e.what());
    }
    cs.validate();
    return cs;
}

struct CompressSummary {
    fs::path manifest;
    std::string tag;
    double achieved_sparsity = 0.0;
    std::vector<std::size_t> distinct_values;
    bool trained_reference = false;
};

inline void ensure_reference(Run& run, const Datasets& data, bool& trained) {
    trained = false;
    const auto& cfg = run.config();
    if (run.artifact("reference_model") && fs::exists(run.path(*run.artifact("reference_model"))) &&
        run.artifact("reference_predictions") && fs::exists(run.path(*run.artifact("reference_predictions"))))
        return;
    const auto spec = model_spec(cfg, data.train);
    auto tc = estimator_settings(cfg).trainer;
    tc.seed = derive_seed(run.seed(), SeedStream::reference);
    const auto ref = train(spec, data.train, data.test, tc);
    write_once(run.path("models/reference.mgpm"), encode_params(ref.params));
    json meta{{"model_id", "reference"},
              {"spec", to_json(spec)},
              {"trainer", to_json(tc)},
              {"checkpoint_epoch", ref.checkpoint_epoch},
              {"checkpoint_eval_accuracy", number_or_null(ref.checkpoint_eval_accuracy)},
              {"train_accuracy", accuracy(ref, data.train)}};
    write_once_text(run.path("models/reference.json"), meta.dump(2) + "\n");
    write_once(run.path("models/reference_predictions.bin"), encode_predictions(ref.predict(data.test.features)));
    run.artifacts()["reference_model"] = "models/reference.mgpm";
    run.artifacts()["reference_predictions"] = "models/reference_predictions.bin";
    trained = true;
}

inline TrainedModel load_reference(const Run& run, const Datasets& data) {
    TrainedModel ref;
    ref.spec = model_spec(run.config(), data.train);
    ref.params = load_params(run.path(*run.artifact("reference_model")));
    validate_params(ref.spec, ref.params);
    return ref;
}

inline CompressSummary run_compress(Run& run, const CompressionSpec& cs) {
    const auto started = utc_timestamp();
    cs.validate();
    const auto data = ensure_datasets(run);
    CompressSummary summary;
    ensure_reference(run, data, summary.trained_reference);
    const auto ref = load_reference(run, data);

    const auto compressed = compress(ref, "reference", cs, data.train, derive_seed(run.seed(), SeedStream::distill));
    summary.tag = compression_tag(cs);
    const std::string dir = "models/" + summary.tag + "/";
    write_once(run.path(dir + "compressed.mgpm"), encode_params(compressed.params));
    write_once_text(run.path(dir + "compressed.json"), to_json(compressed).dump(2) + "\n");
    write_once(run.path(dir + "predictions.bin"), encode_predictions(compressed.predict(data.test.features)));

    auto& entry = run.artifacts()["compressed"][summary.tag];
    entry = {{"params", dir + "compressed.mgpm"},
             {"sidecar", dir + "compressed.json"},
             {"predictions", dir + "predictions.bin"},
             {"method", to_string(cs.method)}};
    run.artifacts()["latest_compressed"] = summary.tag;
    summary.achieved_sparsity = compressed.achieved_sparsity;
    summary.distinct_values = compressed.distinct_values;
    run.record_stage("compress", started,
                     {{"tag", summary.tag},
                      {"trained_reference", summary.trained_reference},
                      {"achieved_sparsity", compressed.achieved_sparsity}});
    summary.manifest = run.manifest_path();
    return summary;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeSummary {
    fs::path manifest;
    std::string tag;
    json analysis;
};

inline json analyze_influence(const InfluenceMatrix& I, const CieReport& report, std::size_t bins) {
    json out;
    json tests = json::array();
    for (auto subset : {CieSubset::all_cie, CieSubset::cie_u, CieSubset::cie_c}) {
        for (auto variant : {TTestVariant::student_pooled, TTestVariant::welch}) {
            try {
                auto t = to_json(cie_influence_test(I, report, subset, variant));
                t["subset"] = to_string(subset);
                tests.push_back(std::move(t));
            } catch (const DegenerateTestError& e) {
                tests.push_back({{"subset", to_string(subset)}, {"variant", to_string(variant)}, {"error", e.what()}});
            }
        }
    }
    out["ttests"] = std::move(tests);

    const auto received = mean_received_influence(I);
    const auto exerted = mean_exerted_influence(I);
    auto pick = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> v;
        for (auto i : idx)
            v.push_back(received[i]);
        return v;
    };
    auto hist_or_null = [&](std::span<const double> values) {
        try {
            return to_json(histogram(values, bins));
        } catch (const EmptyDataError&) {
            return json(nullptr);
        }
    };
    out["histograms"] = {
        {"cie", hist_or_null(pick(report.cie))},
        {"non_cie", hist_or_null(pick(report.non_cie))},
        {"all_test", hist_or_null(received)},
        {"train_exerted", hist_or_null(exerted)},
    };

    auto undefined = [](std::span<const double> v) {
        return static_cast<std::size_t>(std::ranges::count_if(v, [](double x) { return std::isnan(x); }));
    };
    auto near_zero = [](std::span<const double> v) {
        std::size_t n = 0, small = 0;
        for (double x : v) {
            if (std::isnan(x))
                continue;
            ++n;
            small += std::abs(x) < 1e-3 ? 1 : 0;
        }
        return n == 0 ? 0.0 : static_cast<double>(small) / static_cast<double>(n);
    };
    out["undefined_rows"] = {{"cie", undefined(pick(report.cie))}, {"non_cie", undefined(pick(report.non_cie))}};
    out["near_zero_fraction"] = {{"received", near_zero(received)}, {"exerted", near_zero(exerted)}};
    return out;
}

inline AnalyzeSummary run_analyze(Run& run, std::optional<std::string> tag = {}) {
    const auto started = utc_timestamp();
    if (!tag) {
        if (!run.artifact("latest_compressed"))
            throw MissingArtifactsError({"compressed model (run compress first)"});
        tag = *run.artifact("latest_compressed");
    }
    std::vector<std::string> missing;
    auto need = [&](const std::optional<std::string>& rel, const std::string& name) {
        if (!rel || !fs::exists(run.path(*rel)))
            missing.push_back(rel ? *rel : name);
    };
    need(run.artifact("influence_test"), "influence_test");
    need(run.artifact("reference_predictions"), "reference_predictions");
    need(run.artifact("test_data"), "test_data");
    const auto& comp = run.artifacts().contains("compressed") && run.artifacts()["compressed"].contains(*tag)
                           ? run.artifacts()["compressed"][*tag]
                           : json(nullptr);
    if (comp.is_null())
        missing.push_back("models/" + *tag + "/predictions.bin");
    else
        need(comp.at("predictions").get<std::string>(), "compressed predictions");
    if (!missing.empty())
        throw MissingArtifactsError(missing);

    const auto I = load_influence(run.path(*run.artifact("influence_test")));
    const auto test = load_dataset(run.path(*run.artifact("test_data")));
    const auto ref_preds = decode_predictions(read_file(run.path(*run.artifact("reference_predictions"))));
    const auto comp_preds = decode_predictions(read_file(run.path(comp.at("predictions").get<std::string>())));

    auto report = find_cies(ref_preds, comp_preds, test.labels);
    report.ref_model_id = "reference";
    report.comp_model_id = *tag;
    const auto bins = run.config().at("analysis").value("histogram_bins", std::size_t{30});

    json analysis = analyze_influence(I, report, bins);
    analysis["compressed"] = *tag;
    analysis["method"] = comp.at("method");
    analysis["cie_report"] = to_json(report);

    const std::string rel = "reports/" + *tag + "/analysis.json";
    write_once_text(run.path(rel), analysis.dump(2) + "\n");
    run.artifacts()["analyses"][*tag] = rel;
    run.record_stage("analyze", started, {{"tag", *tag}, {"cie_count", report.cie.size()}});
    return {run.manifest_path(), *tag, std::move(analysis)};
}

// ---------------------------------------------------------------------------
// report

enum class ReportFormat { text, json, csv, svg };

inline ReportFormat parse_report_format(const std::string& s) {
    if (s == "text")
        return ReportFormat::text;
    if (s == "json")
        return ReportFormat::json;
    if (s == "csv")
        return ReportFormat::csv;
    if (s == "svg")
        return ReportFormat::svg;
    throw ConfigError("unknown report format \"" + s + "\" (expected text, json, csv or svg)");
}

inline std::vector<json> collect_analyses(const Run& run) {
    if (!run.artifacts().contains("analyses") || run.artifacts()["analyses"].empty())
        throw MissingArtifactsError({"analysis (run analyze first)"});
    std::vector<json> out;
    std::vector<std::string> missing;
    for (const auto& [tag, rel] : run.artifacts()["analyses"].items()) {
        const auto p = run.path(rel.get<std::string>());
        if (!fs::exists(p)) {
            missing.push_back(rel.get<std::string>());
            continue;
        }
        out.push_back(json::parse(read_text(p)));
    }
    if (!missing.empty())
        throw MissingArtifactsError(missing);
    return out;
}

inline std::string fmt_num(const json& v, const char* spec = "%.4g") {
    if (v.is_null())
        return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v.get<double>());
    return buf;
}

/// Plain-text table; rows whose p-value is at most 0.05 are marked with '*'.
inline std::string render_text(const json& run_info, const std::vector<json>& analyses) {
    std::ostringstream os;
    os << "run " << run_info.value("run_id", std::string("?")) << "\n\n";
    os << "CIE counts\n";
    char line[256];
    std::snprintf(line, sizeof line, "  %-44s %6s %6s %6s %6s %8s\n", "compressed", "CIE", "CIE-U", "CIE-C", "CIE-W",
                  "non-CIE");
    os << line;
    for (const auto& a : analyses) {
        const auto& c = a.at("cie_report").at("counts");
        std::snprintf(line, sizeof line, "  %-44s %6zu %6zu %6zu %6zu %8zu\n", a.at("compressed").get<std::string>().c_str(),
                      c.at("cie").get<std::size_t>(), c.at("cie_u").get<std::size_t>(), c.at("cie_c").get<std::size_t>(),
                      c.at("cie_w").get<std::size_t>(), c.at("non_cie").get<std::size_t>());
        os << line;
    }
    os << "\nMean received influence: CIE subset vs non-CIE (two-sided; * = p <= 0.05)\n";
    std::snprintf(line, sizeof line, "  %-44s %-8s %-15s %10s %10s %12s %s\n", "compressed", "subset", "variant", "t", "df",
                  "p", "");
    os << line;
    for (const auto& a : analyses) {
        for (const auto& t : a.at("ttests")) {
            const auto name = a.at("compressed").get<std::string>();
            if (t.contains("error")) {
                std::snprintf(line, sizeof line, "  %-44s %-8s %-15s  n/a (%s)\n", name.c_str(),
                              t.at("subset").get<std::string>().c_str(), t.at("variant").get<std::string>().c_str(),
                              t.at("error").get<std::string>().c_str());
            } else {
                std::snprintf(line, sizeof line, "  %-44s %-8s %-15s %10s %10s %12s %s\n", name.c_str(),
                              t.at("subset").get<std::string>().c_str(), t.at("variant").get<std::string>().c_str(),
                              fmt_num(t.at("t_statistic")).c_str(), fmt_num(t.at("degrees_of_freedom")).c_str(),
                              fmt_num(t.at("p_value")).c_str(), t.at("significant_at_005").get<bool>() ? "*" : "");
            }
            os << line;
        }
    }
    return os.str();
}

inline std::string render_histogram_csv(const json& h) {
    std::ostringstream os;
    os << "bin_left,bin_right,count\n" << std::setprecision(9);
    const auto& edges = h.at("bin_edges");
    const auto& counts = h.at("counts");
    for (std::size_t k = 0; k < counts.size(); ++k)
        os << edges[k].get<double>() << ',' << edges[k + 1].get<double>() << ',' << counts[k].get<std::size_t>() << '\n';
    return os.str();
}

/// Bar chart with a log10 vertical axis (bins with zero count are left empty).
inline std::string render_histogram_svg(const json& h, const std::string& title) {
    const auto& edges = h.at("bin_edges");
    const auto& counts = h.at("counts");
    const double width = 640, height = 360, left = 60, bottom = 40, top = 30;
    double max_log = 1.0;
    for (const auto& c : counts)
        max_log = std::max(max_log, std::log10(static_cast<double>(c.get<std::size_t>()) + 1.0));
    const double plot_w = width - left - 20, plot_h = height - top - bottom;
    const double bar_w = plot_w / static_cast<double>(std::max<std::size_t>(counts.size(), 1));
    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << title
       << " (log vertical scale)</text>\n";
    for (std::size_t k = 0; k < counts.size(); ++k) {
        const auto c = counts[k].get<std::size_t>();
        if (c == 0)
            continue;
        const double bar_h = plot_h * std::log10(static_cast<double>(c) + 1.0) / max_log;
        os << "<rect x=\"" << left + bar_w * static_cast<double>(k) << "\" y=\"" << top + plot_h - bar_h << "\" width=\""
           << bar_w * 0.9 << "\" height=\"" << bar_h << "\" fill=\"#4c72b0\"><title>[" << edges[k].get<double>() << ", "
           << edges[k + 1].get<double>() << "]: " << c << "</title></rect>\n";
    }
    os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\"" << top + plot_h
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << left << "\" y=\"" << height - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << edges.front().get<double>() << "</text>\n";
    os << "<text x=\"" << left + plot_w - 60 << "\" y=\"" << height - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << edges.back().get<double>() << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

struct ReportOutput {
    std::vector<fs::path> files;
    std::string text; // text rendering, also printed by the CLI for --format text
};

inline ReportOutput run_report(Run& run, ReportFormat format) {
    const auto analyses = collect_analyses(run);
    ReportOutput out;
    const json run_info{{"run_id", run.config().value("run_id", run.dir().filename().string())}};
    switch (format) {
    case ReportFormat::text: {
        out.text = render_text(run_info, analyses);
        write_text(run.path("reports/summary.txt"), out.text);
        out.files.push_back(run.path("reports/summary.txt"));
        break;
    }
    case ReportFormat::json: {
        json doc{{"run_id", run_info["run_id"]}, {"master_seed", run.seed()}, {"analyses", analyses}};
        write_text(run.path("reports/report.json"), doc.dump(2) + "\n");
        out.files.push_back(run.path("reports/report.json"));
        break;
    }
    case ReportFormat::csv:
    case ReportFormat::svg: {
        for (const auto& a : analyses) {
            const auto tag = a.at("compressed").get<std::string>();
            for (const auto& [name, h] : a.at("histograms").items()) {
                if (h.is_null())
                    continue;
                const auto base = run.path("reports/" + tag + "/histogram_" + name);
                if (format == ReportFormat::csv) {
                    write_text(fs::path(base.string() + ".csv"), render_histogram_csv(h));
                    out.files.emplace_back(base.string() + ".csv");
                } else {
                    write_text(fs::path(base.string() + ".svg"),
                               render_histogram_svg(h, "mean influence: " + name + " (" + tag + ")"));
                    out.files.emplace_back(base.string() + ".svg");
                }
            }
        }
        break;
    }
    }
    return out;
}

} // namespace memgauge::pipeline
