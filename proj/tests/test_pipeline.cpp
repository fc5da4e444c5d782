#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "memgauge/memgauge.hpp"
#include "memgauge/pipeline.hpp"

using namespace memgauge;
namespace pl = memgauge::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("memgauge_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

json tiny_config() {
    auto cfg = pl::default_config();
    cfg.merge_patch(json::parse(R"({
        "seed": 3,
        "dataset": {"n_subpopulations": 4, "n_classes": 2, "n_features": 4, "cluster_spread": 0.25,
                    "train_size": 120, "test_size": 40},
        "model": {"layer_widths": [8]},
        "estimator": {"trials": 6, "trainer": {"epochs": 3, "batch_size": 16}},
        "analysis": {"histogram_bins": 5}
    })"));
    return cfg;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(MEMGAUGE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) { return read_text(p); }

} // namespace

TEST(Config, OverridesAndEnvironmentSeed) {
    auto cfg = pl::default_config();
    pl::apply_override(cfg, "estimator.trials", 7);
    EXPECT_EQ(cfg["estimator"]["trials"], 7);
    pl::apply_override(cfg, "dataset.extra.deep", "x");
    EXPECT_EQ(cfg["dataset"]["extra"]["deep"], "x");
    EXPECT_THROW(pl::apply_override(cfg, "estimator.trials.sub", 1), ConfigError);
    EXPECT_THROW(pl::apply_override(cfg, "a..b", 1), ConfigError);
    EXPECT_EQ(pl::parse_override_value("0.5"), json(0.5));
    EXPECT_EQ(pl::parse_override_value("[8,4]"), json::parse("[8,4]"));
    EXPECT_EQ(pl::parse_override_value("prune"), json("prune"));

    ::setenv("MEMGAUGE_SEED", "77", 1);
    EXPECT_EQ(pl::resolve_config(std::nullopt, {})["seed"], 77);
    ::setenv("MEMGAUGE_SEED", "abc", 1);
    EXPECT_THROW(pl::resolve_config(std::nullopt, {}), ConfigError);
    ::unsetenv("MEMGAUGE_SEED");
}

TEST(Config, FileSectionsReplaceMethodSpecificDefaults) {
    const auto dir = scratch("cfg");
    write_text(dir / "c.json", R"({"compression": {"method": "quantize", "bits": 4}})");
    const auto cfg = pl::resolve_config(dir / "c.json", {});
    EXPECT_FALSE(cfg["compression"].contains("sparsity"));
    EXPECT_NO_THROW(pl::compression_spec_from_json(cfg["compression"]));
    write_text(dir / "bad.json", "{not json");
    EXPECT_THROW(pl::resolve_config(dir / "bad.json", {}), ConfigError);
    EXPECT_THROW(pl::resolve_config(dir / "missing.json", {}), ConfigError);
}

TEST(Config, RunIdIsStableAndConfigSensitive) {
    auto a = tiny_config(), b = tiny_config();
    EXPECT_EQ(pl::derive_run_id(a), pl::derive_run_id(b));
    b["seed"] = 4;
    EXPECT_NE(pl::derive_run_id(a), pl::derive_run_id(b));
    a["run_id"] = "named";
    EXPECT_EQ(pl::derive_run_id(a), "named");
}

TEST(Config, EstimatorValidation) {
    auto cfg = tiny_config();
    cfg["estimator"]["trials"] = 1;
    EXPECT_THROW(pl::estimator_settings(cfg), ConfigError);
    cfg["estimator"]["trials"] = 5;
    cfg["estimator"]["mask_prob"] = 1.0;
    EXPECT_THROW(pl::estimator_settings(cfg), ConfigError);
}

TEST(Config, CompressionTagsAreDistinct) {
    CompressionSpec a, b;
    a.sparsity = 0.9;
    b.sparsity = 0.5;
    EXPECT_NE(pl::compression_tag(a), pl::compression_tag(b));
    EXPECT_EQ(pl::compression_tag(a), "prune-s0.9-global");
}

TEST(Pipeline, EndToEndResumeAndReports) {
    const auto out = scratch("e2e");
    const auto cfg = tiny_config();
    const auto first = pl::run_estimate(cfg, out, {2});
    EXPECT_EQ(first.trained, 6u);
    EXPECT_EQ(first.reused, 0u);
    EXPECT_EQ(first.rows, 40u);
    EXPECT_EQ(first.cols, 120u);
    const auto run_dir = first.manifest.parent_path();
    const auto infl_before = read_file(run_dir / "influence_test.infl");

    fs::remove(run_dir / "trials" / "trial_00002.bin");
    const auto second = pl::run_estimate(cfg, out, {1});
    EXPECT_EQ(second.trained, 1u);
    EXPECT_EQ(second.reused, 5u);
    EXPECT_EQ(read_file(run_dir / "influence_test.infl"), infl_before);

    auto run = pl::Run::open(first.manifest);
    CompressionSpec cs;
    cs.sparsity = 0.9;
    const auto comp = pl::run_compress(run, cs);
    EXPECT_TRUE(comp.trained_reference);
    EXPECT_GE(comp.achieved_sparsity, 0.9);

    const auto analysis = pl::run_analyze(run);
    EXPECT_EQ(analysis.tag, comp.tag);
    EXPECT_EQ(analysis.analysis["ttests"].size(), 6u);
    EXPECT_TRUE(analysis.analysis["histograms"]["all_test"].is_object());

    for (auto f : {pl::ReportFormat::text, pl::ReportFormat::json, pl::ReportFormat::csv, pl::ReportFormat::svg}) {
        const auto rep = pl::run_report(run, f);
        EXPECT_FALSE(rep.files.empty());
        for (const auto& p : rep.files)
            EXPECT_TRUE(fs::exists(p)) << p;
    }
    const auto csv = slurp(run_dir / "reports" / comp.tag / "histogram_all_test.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "bin_left,bin_right,count");
    EXPECT_NE(slurp(run_dir / "reports" / comp.tag / "histogram_all_test.svg").find("log vertical scale"),
              std::string::npos);

    // every artifact the manifest names exists
    const auto manifest = json::parse(slurp(first.manifest));
    for (const auto& [key, value] : manifest["artifacts"].items())
        if (value.is_string() && key != "latest_compressed") {
            EXPECT_TRUE(fs::exists(run_dir / value.get<std::string>())) << key;
        }
    EXPECT_EQ(manifest["stages"].size(), 4u);
}

TEST(Pipeline, AnalyzeWithoutArtifactsListsWhatIsMissing) {
    const auto out = scratch("missing");
    auto run = pl::Run::for_config(tiny_config(), out);
    try {
        pl::run_analyze(run, std::string("prune-s0.9-global"));
        FAIL() << "expected MissingArtifactsError";
    } catch (const pl::MissingArtifactsError& e) {
        EXPECT_GE(e.missing().size(), 3u);
    }
}

TEST(Pipeline, PredictionFilesRoundTrip) {
    const std::vector<Label> p{3, 0, 9};
    EXPECT_EQ(pl::decode_predictions(pl::encode_predictions(p)), p);
}

TEST(Cli, ExitCodesAndErrorLines) {
    const auto dir = scratch("cli");
    const auto log = dir / "log.txt";
    write_text(dir / "tiny.json", tiny_config().dump());
    const std::string base = "--config " + (dir / "tiny.json").string() + " --out " + (dir / "runs").string();

    EXPECT_EQ(run_cli("estimate " + base + " --trials 1", log), 2);
    const auto err = slurp(log);
    const auto line = err.substr(err.rfind('{'));
    EXPECT_EQ(json::parse(line)["error"], "config");

    EXPECT_EQ(run_cli("analyze " + base, log), 4);
    EXPECT_NE(slurp(log).find("missing_artifacts"), std::string::npos);

    EXPECT_EQ(run_cli("frobnicate", log), 2);
    EXPECT_EQ(run_cli("estimate " + base + " --jobs 2", log), 0);
    EXPECT_NE(slurp(log).find("trained 6, reused 0"), std::string::npos);
    EXPECT_EQ(run_cli("estimate " + base, log), 0);
    EXPECT_NE(slurp(log).find("trained 0, reused 6"), std::string::npos);

    EXPECT_EQ(run_cli("compress " + base + " --method prune --bits 4", log), 2);
    EXPECT_EQ(run_cli("compress " + base + " --method quantize --bits 4", log), 0);
    EXPECT_EQ(run_cli("compress " + base + " --method prune --sparsity 0.5 --scope per_tensor", log), 0);
    EXPECT_EQ(run_cli("compress " + base + " --method prune_then_distill --sparsity 0.9 --adaptive --window 2 --epochs 2",
                      log),
              0);
    EXPECT_EQ(run_cli("analyze " + base, log), 0);
    EXPECT_EQ(run_cli("analyze " + base + " --compressed quantize-b4", log), 0);
    EXPECT_EQ(run_cli("report " + base + " --format text", log), 0);
    EXPECT_NE(slurp(log).find("quantize-b4"), std::string::npos);
    EXPECT_EQ(run_cli("report " + base + " --format pdf", log), 2);
    EXPECT_EQ(run_cli("report " + base + " --format csv", log), 0);

    EXPECT_EQ(run_cli("estimate " + base + " --estimator.trials=5", log), 0); // new config, new run
    EXPECT_NE(slurp(log).find("trained 5"), std::string::npos);
}

TEST(DeskBenchmark, CieCountGrowsWithSparsityOnAverage) {
    // statistical property: averaged over 5 seeds, never per instance
    const std::vector<double> sparsities{0.5, 0.7, 0.9};
    std::vector<double> mean_cies(sparsities.size(), 0.0);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto cfg = pl::resolve_config(fs::path(MEMGAUGE_DESK_CONFIG), {{"seed", seed}});
        const auto data = pl::materialize_datasets(cfg);
        auto trainer = pl::estimator_settings(cfg).trainer;
        trainer.seed = derive_seed(seed, SeedStream::reference, 0);
        const auto reference = train(pl::model_spec(cfg, data.train), data.train, data.test, trainer);
        const auto ref_preds = predict(reference, data.test.features);
        for (std::size_t k = 0; k < sparsities.size(); ++k) {
            CompressionSpec cs;
            cs.sparsity = sparsities[k];
            const auto c = compress(reference, "reference", cs, data.train, derive_seed(seed, SeedStream::distill, 0));
            mean_cies[k] += find_cies(ref_preds, c.predict(data.test.features), data.test.labels).cie.size() / 5.0;
        }
    }
    EXPECT_LE(mean_cies[0], mean_cies[1]);
    EXPECT_LE(mean_cies[1], mean_cies[2]);
}
