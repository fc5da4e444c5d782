// memgauge <estimate|compress|analyze|report> [--config PATH] [--out DIR] [flags...]
//
// Exit codes: 0 success, 2 usage or config error, 3 runtime failure, 4 missing artifacts.
// Failures also print one JSON line on stderr: {"error": kind, "exit_code": n, "message": ...}.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "memgauge/memgauge.hpp"
#include "memgauge/pipeline.hpp"

namespace mg = memgauge;
namespace pl = memgauge::pipeline;
using mg::json;

namespace {

int fail(int code, const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << std::endl;
    return code;
}

/// Pulls "--section.key value" and "--section.key=value" tokens (any long option containing a
/// dot) out of argv; CLI11 sees the rest.
std::vector<std::pair<std::string, json>> extract_dot_overrides(std::vector<std::string>& args) {
    std::vector<std::pair<std::string, json>> out;
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos || a.find('.') > a.find('=')) {
            kept.push_back(a);
            continue;
        }
        if (const auto eq = a.find('='); eq != std::string::npos) {
            out.emplace_back(a.substr(2, eq - 2), pl::parse_override_value(a.substr(eq + 1)));
        } else {
            if (i + 1 >= args.size())
                throw mg::ConfigError("override " + a + " needs a value");
            out.emplace_back(a.substr(2), pl::parse_override_value(args[++i]));
        }
    }
    args = std::move(kept);
    return out;
}

struct Common {
    std::optional<std::string> config;
    std::string out = "runs";
    std::optional<std::string> manifest;
    std::optional<std::string> run_id;
    std::optional<long long> trials;
    std::optional<double> mask_prob;
    std::optional<unsigned long long> seed;
};

void add_common(CLI::App& sub, Common& c) {
    sub.add_option("--config", c.config, "JSON config file (defaults apply to absent keys)");
    sub.add_option("--out", c.out, "root directory for run outputs")->capture_default_str();
    sub.add_option("--manifest", c.manifest, "existing run manifest (instead of --config/--out)");
    sub.add_option("--run-id", c.run_id, "run directory name (default: hash of the config)");
    sub.add_option("--trials", c.trials, "shorthand for --estimator.trials");
    sub.add_option("--mask-prob", c.mask_prob, "shorthand for --estimator.mask_prob");
    sub.add_option("--seed", c.seed, "master seed (MEMGAUGE_SEED overrides)");
}

json resolve(const Common& c, std::vector<std::pair<std::string, json>> overrides) {
    if (c.trials)
        overrides.emplace_back("estimator.trials", *c.trials);
    if (c.mask_prob)
        overrides.emplace_back("estimator.mask_prob", *c.mask_prob);
    if (c.seed)
        overrides.emplace_back("seed", *c.seed);
    if (c.run_id)
        overrides.emplace_back("run_id", *c.run_id);
    std::optional<std::filesystem::path> path;
    if (c.config)
        path = *c.config;
    return pl::resolve_config(path, overrides);
}

pl::Run open_run(const Common& c, const std::vector<std::pair<std::string, json>>& overrides) {
    if (c.manifest)
        return pl::Run::open(*c.manifest);
    return pl::Run::for_config(resolve(c, overrides), c.out);
}

struct CompressFlags {
    std::optional<std::string> method, scope;
    std::optional<double> sparsity, beta, temperature, w_ce, w_kd, lr;
    std::optional<int> bits;
    std::optional<std::size_t> window, epochs;
    std::optional<std::vector<std::size_t>> student_widths;
    bool adaptive = false;
};

json compression_section(const json& config, const CompressFlags& f) {
    json c = config.value("compression", json::object());
    if (f.method && c.value("method", std::string()) != *f.method)
        c = json::object();
    if (f.method)
        c["method"] = *f.method;
    if (f.sparsity)
        c["sparsity"] = *f.sparsity;
    if (f.bits)
        c["bits"] = *f.bits;
    if (f.scope)
        c["scope"] = *f.scope;
    if (f.student_widths)
        c["student_widths"] = *f.student_widths;
    auto distill = [&]() -> json& {
        if (!c.contains("distill") || c["distill"].is_null())
            c["distill"] = json::object();
        return c["distill"];
    };
    if (f.temperature)
        distill()["temperature"] = *f.temperature;
    if (f.epochs)
        distill()["epochs"] = *f.epochs;
    if (f.lr)
        distill()["learning_rate"] = *f.lr;
    if (f.adaptive || f.window || f.beta) {
        auto& w = distill()["weighting"];
        w["kind"] = "adaptive";
        if (f.window)
            w["window"] = *f.window;
        if (f.beta)
            w["beta"] = *f.beta;
    }
    if (f.w_ce || f.w_kd) {
        auto& w = distill()["weighting"];
        if (w.value("kind", std::string("fixed")) == "adaptive")
            throw mg::ConfigError("--w-ce/--w-kd cannot be combined with adaptive weighting");
        w["kind"] = "fixed";
        if (f.w_ce)
            w["w_ce"] = *f.w_ce;
        if (f.w_kd)
            w["w_kd"] = *f.w_kd;
    }
    return c;
}

} // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::vector<std::pair<std::string, json>> overrides;
    try {
        overrides = extract_dot_overrides(args);
    } catch (const mg::Error& e) {
        return fail(pl::exit_usage, e.kind(), e.what());
    }

    CLI::App app{"Training-data influence and compression-impacted exemplar analysis", "memgauge"};
    app.require_subcommand(1);
    app.set_version_flag("--version", pl::tool_version);

    Common common;
    std::size_t jobs = 1;
    auto* estimate = app.add_subcommand("estimate", "run (or resume) subsampled trials and estimate influence");
    add_common(*estimate, common);
    estimate->add_option("--jobs", jobs, "parallel trial workers")->check(CLI::PositiveNumber);

    auto* compress = app.add_subcommand("compress", "compress the reference model (training it if absent)");
    add_common(*compress, common);
    CompressFlags cf;
    compress->add_option("--method", cf.method, "prune | quantize | distill | prune_then_distill");
    compress->add_option("--sparsity", cf.sparsity, "fraction of weights to zero");
    compress->add_option("--bits", cf.bits, "quantization bit width");
    compress->add_option("--scope", cf.scope, "pruning scope: global | per_tensor");
    compress->add_option("--student-widths", cf.student_widths, "hidden widths of a smaller distillation student");
    compress->add_option("--temperature", cf.temperature, "distillation temperature");
    compress->add_option("--epochs", cf.epochs, "distillation epochs");
    compress->add_option("--lr", cf.lr, "distillation learning rate");
    compress->add_option("--w-ce", cf.w_ce, "fixed weight of the label loss");
    compress->add_option("--w-kd", cf.w_kd, "fixed weight of the teacher-matching loss");
    compress->add_flag("--adaptive", cf.adaptive, "weight the loss terms by their recent trend");
    compress->add_option("--window", cf.window, "adaptive weighting window (epochs)");
    compress->add_option("--beta", cf.beta, "adaptive weighting sharpness");

    auto* analyze = app.add_subcommand("analyze", "find CIEs and test their mean received influence");
    add_common(*analyze, common);
    std::optional<std::string> tag;
    analyze->add_option("--compressed", tag, "compressed model tag (default: most recent)");

    auto* report = app.add_subcommand("report", "render analyses as text, json, csv or svg");
    add_common(*report, common);
    std::string format = "text";
    report->add_option("--format", format, "text | json | csv | svg")->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << std::endl;
        return fail(pl::exit_usage, "usage", e.what());
    }

    try {
        if (estimate->parsed()) {
            const auto cfg = resolve(common, overrides);
            const auto s = pl::run_estimate(cfg, common.out, {jobs});
            std::cout << "estimate: trained " << s.trained << ", reused " << s.reused << " (" << s.failed
                      << " failed); influence " << s.rows << "x" << s.cols << "\n"
                      << "manifest: " << s.manifest.string() << "\n";
        } else if (compress->parsed()) {
            auto run = open_run(common, overrides);
            const auto cs = pl::compression_spec_from_json(compression_section(run.config(), cf));
            const auto s = pl::run_compress(run, cs);
            std::cout << "compress: " << s.tag << (s.trained_reference ? " (trained reference)" : "")
                      << "; achieved sparsity " << s.achieved_sparsity << "\n"
                      << "manifest: " << s.manifest.string() << "\n";
        } else if (analyze->parsed()) {
            auto run = open_run(common, overrides);
            const auto s = pl::run_analyze(run, tag);
            const auto& counts = s.analysis.at("cie_report").at("counts");
            std::cout << "analyze: " << s.tag << "; " << counts.at("cie") << " CIEs (" << counts.at("cie_u")
                      << " CIE-U, " << counts.at("cie_c") << " CIE-C, " << counts.at("cie_w") << " CIE-W)\n";
            for (const auto& t : s.analysis.at("ttests")) {
                std::cout << "  " << t.at("subset").get<std::string>() << " / " << t.at("variant").get<std::string>()
                          << ": ";
                if (t.contains("error"))
                    std::cout << "not testable (" << t.at("error").get<std::string>() << ")\n";
                else
                    std::cout << "t=" << t.at("t_statistic") << " p=" << t.at("p_value") << "\n";
            }
            std::cout << "manifest: " << s.manifest.string() << "\n";
        } else if (report->parsed()) {
            const auto fmt = pl::parse_report_format(format);
            auto run = open_run(common, overrides);
            const auto out = pl::run_report(run, fmt);
            if (fmt == pl::ReportFormat::text)
                std::cout << out.text;
            for (const auto& f : out.files)
                std::cout << "wrote " << f.string() << "\n";
        }
    } catch (const pl::MissingArtifactsError& e) {
        return fail(pl::exit_missing, e.kind(), e.what());
    } catch (const mg::ConfigError& e) {
        return fail(pl::exit_usage, e.kind(), e.what());
    } catch (const mg::Error& e) {
        return fail(pl::exit_failure, e.kind(), e.what());
    } catch (const std::exception& e) {
        return fail(pl::exit_failure, "internal", e.what());
    }
    return pl::exit_ok;
}
