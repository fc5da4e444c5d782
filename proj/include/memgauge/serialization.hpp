#pragma once

// JSON encodings of the report types (nlohmann/json). Index sets are sorted arrays.

#include <cmath>
#include <json.hpp> // nlohmann/json, vendored

#include "analysis.hpp"
#include "compression.hpp"
#include "influence.hpp"
#include "model.hpp"
#include "train.hpp"

namespace memgauge {

using nlohmann::json;

/// NaN and infinities become null.
inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const CieReport& r) {
    return json{
        {"cie", r.cie},
        {"cie_u", r.cie_u},
        {"cie_c", r.cie_c},
        {"cie_w", r.cie_w},
        {"non_cie", r.non_cie},
        {"counts",
         {{"cie", r.cie.size()},
          {"cie_u", r.cie_u.size()},
          {"cie_c", r.cie_c.size()},
          {"cie_w", r.cie_w.size()},
          {"non_cie", r.non_cie.size()}}},
        {"ref_model_id", r.ref_model_id},
        {"comp_model_id", r.comp_model_id},
    };
}

inline CieReport cie_report_from_json(const json& j) {
    CieReport r;
    j.at("cie").get_to(r.cie);
    j.at("cie_u").get_to(r.cie_u);
    j.at("cie_c").get_to(r.cie_c);
    j.at("cie_w").get_to(r.cie_w);
    j.at("non_cie").get_to(r.non_cie);
    j.at("ref_model_id").get_to(r.ref_model_id);
    j.at("comp_model_id").get_to(r.comp_model_id);
    return r;
}

inline json to_json(const TTestResult& t) {
    return json{
        {"t_statistic", number_or_null(t.t_statistic)},
        {"degrees_of_freedom", number_or_null(t.degrees_of_freedom)},
        {"p_value", number_or_null(t.p_value)},
        {"variant", to_string(t.variant)},
        {"n_a", t.n_a},
        {"n_b", t.n_b},
        {"mean_a", number_or_null(t.mean_a)},
        {"mean_b", number_or_null(t.mean_b)},
        {"significant_at_005", t.significant_at_005},
    };
}

inline json to_json(const Histogram& h) {
    return json{
        {"bin_edges", h.bin_edges},
        {"counts", h.counts},
        {"non_finite", h.non_finite},
        {"log_scale_hint", h.log_scale_hint},
    };
}

inline json to_json(const ModelSpec& s) {
    return json{
        {"architecture", to_string(s.architecture)},
        {"layer_widths", s.layer_widths},
        {"activation", to_string(s.activation)},
        {"n_features", s.n_features},
        {"n_classes", s.n_classes},
    };
}

inline ModelSpec model_spec_from_json(const json& j) {
    ModelSpec s;
    const auto arch = j.value("architecture", std::string("mlp"));
    if (arch == "mlp")
        s.architecture = Architecture::mlp;
    else if (arch == "softmax_linear")
        s.architecture = Architecture::softmax_linear;
    else
        throw ConfigError("unknown architecture \"" + arch + "\"");
    if (s.architecture == Architecture::mlp)
        s.layer_widths = j.value("layer_widths", std::vector<std::size_t>{64});
    const auto act = j.value("activation", std::string("relu"));
    if (act == "relu")
        s.activation = Activation::relu;
    else if (act == "tanh")
        s.activation = Activation::tanh;
    else
        throw ConfigError("unknown activation \"" + act + "\"");
    s.n_features = j.value("n_features", std::size_t{0});
    s.n_classes = j.value("n_classes", std::size_t{0});
    return s;
}

inline json to_json(const TrainConfig& c) {
    return json{
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"momentum", c.momentum},
        {"seed", c.seed},
        {"checkpoint_selection", to_string(c.checkpoint_selection)},
    };
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    const auto sel = j.value("checkpoint_selection", std::string("best_eval_accuracy"));
    if (sel == "best_eval_accuracy")
        c.checkpoint_selection = CheckpointSelection::best_eval_accuracy;
    else if (sel == "final")
        c.checkpoint_selection = CheckpointSelection::final;
    else
        throw ConfigError("unknown checkpoint_selection \"" + sel + "\"");
    return c;
}

inline json to_json(const DistillConfig& d) {
    json j{
        {"temperature", d.temperature},
        {"epochs", d.epochs},
        {"learning_rate", d.learning_rate},
        {"batch_size", d.batch_size},
        {"momentum", d.momentum},
    };
    if (const auto* f = std::get_if<FixedWeighting>(&d.weighting))
        j["weighting"] = {{"kind", "fixed"}, {"w_ce", f->w_ce}, {"w_kd", f->w_kd}};
    else {
        const auto& a = std::get<AdaptiveWeighting>(d.weighting);
        j["weighting"] = {{"kind", "adaptive"}, {"window", a.window}, {"beta", a.beta}};
    }
    return j;
}

/// Sidecar of a compressed model.
inline json to_json(const CompressedModel& m) {
    const auto& cs = m.compression;
    json log = json::array();
    for (const auto& e : m.distill_log)
        log.push_back({{"epoch", e.epoch}, {"w_ce", e.w_ce}, {"w_kd", e.w_kd}, {"ce", e.ce}, {"kd", e.kd}});
    return json{
        {"method", to_string(cs.method)},
        {"sparsity", cs.sparsity ? json(*cs.sparsity) : json(nullptr)},
        {"bits", cs.bits ? json(*cs.bits) : json(nullptr)},
        {"distill", cs.distill ? to_json(*cs.distill) : json(nullptr)},
        {"scope", to_string(cs.scope)},
        {"student_widths", cs.student_widths},
        {"achieved_sparsity", m.achieved_sparsity},
        {"distinct_values_per_tensor", m.distinct_values},
        {"base_model_id", m.base_model_id},
        {"spec", to_json(m.spec)},
        {"distill_log", log},
    };
}

inline json to_json(const TrialRecord& r) {
    return json{
        {"trial_index", r.trial_index},
        {"seed", r.seed},
        {"checkpoint_accuracy", number_or_null(r.eval_accuracy_at_checkpoint)},
        {"status", r.ok() ? "ok" : "failed"},
        {"failure_reason", r.failure_reason},
    };
}

} // namespace memgauge
