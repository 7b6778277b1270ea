#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "unidistill/config.hpp"
#include "unidistill/engine.hpp"
#include "unidistill/report.hpp"
#include "unidistill/rng.hpp"
#include "unidistill/verify.hpp"

#ifndef UNIDISTILL_BUILD_ID
#define UNIDISTILL_BUILD_ID "unknown"
#endif

namespace unidistill {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitModule = 3;

struct ExpansionCase {
    GaussianMixture q0, p0;
};

inline GaussianMixture normal1(double mean, double var) { return GaussianMixture::normal({mean}, {var}); }
inline GaussianMixture mix1(double w, double m1, double v1, double m2, double v2) {
    return GaussianMixture({{w, {m1}, {v1}}, {1.0 - w, {m2}, {v2}}});
}

// Six Gaussian pairs and six pairs with a two-component mixture on one side.
// Every pair keeps the chi-square divergence finite at t = 0.
inline std::vector<ExpansionCase> expansion_battery() {
    return {
        {normal1(1.0, 1.0), normal1(0.0, 1.0)},
        {normal1(0.0, 1.0), normal1(0.0, 2.0)},
        {normal1(0.5, 0.5), normal1(0.0, 1.0)},
        {normal1(-1.0, 1.5), normal1(0.5, 1.2)},
        {normal1(2.0, 0.8), normal1(0.0, 1.0)},
        {normal1(0.0, 1.0), normal1(0.3, 0.7)},
        {mix1(0.5, -0.8, 0.36, 0.8, 0.36), normal1(0.0, 1.0)},
        {mix1(0.3, -1.0, 0.5, 1.0, 0.5), normal1(0.0, 1.5)},
        {normal1(0.0, 1.0), mix1(0.5, -1.0, 1.0, 1.0, 1.0)},
        {mix1(0.5, -1.0, 0.5, 1.5, 0.8), normal1(0.0, 2.0)},
        {normal1(0.5, 1.0), mix1(0.4, -1.0, 0.8, 1.0, 1.2)},
        {mix1(0.6, 0.0, 0.4, 2.0, 0.6), mix1(0.5, 0.0, 1.0, 1.0, 1.0)},
    };
}

inline GaussianMixture gradient_battery_teacher() { return mix1(0.5, -0.8, 0.36, 0.8, 0.36); }

// Affine parameters for the gradient battery: scale in [0.5, 2], shift in [-1, 1].
inline std::vector<AffineGenerator> gradient_battery_draws(std::uint64_t seed, std::size_t n) {
    CounterRng rng(seed, "verify.gradient.draws");
    std::vector<AffineGenerator> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double sc = rng.uniform(0.5, 2.0);
        const double sh = rng.uniform(-1.0, 1.0);
        out.push_back({sc, sh});
    }
    return out;
}

inline std::function<double(double)> named_weight(const std::string& name) {
    if (name == "one") return [](double) { return 1.0; };
    if (name == "linear") return [](double t) { return 2.0 * t; };
    throw ValidationError("verify.weights", "unknown weight '" + name + "'");
}

struct RunOutcome {
    int exit_code = kExitOk;
    nlohmann::json report;
    std::filesystem::path report_path;
};

namespace runner_detail {

struct Assertions {
    nlohmann::json list = nlohmann::json::array();
    bool all = true;
    void check(const std::string& name, double value, double threshold, bool passed) {
        list.push_back({{"name", name}, {"value", value}, {"threshold", threshold}, {"passed", passed}});
        all = all && passed;
    }
    void below(const std::string& name, double value, double threshold) {
        check(name, value, threshold, std::isfinite(value) && value < threshold);
    }
};

inline std::vector<DivergenceKind> kinds_of(const RunConfig& c) {
    if (c.verify.all_divergences) return {all_divergences.begin(), all_divergences.end()};
    return {parse_divergence(c.divergence)};
}

inline double tolerance(const RunConfig& c, double fallback) { return c.verify.tolerance > 0 ? c.verify.tolerance : fallback; }

inline void run_verify_expansion(const RunConfig& c, nlohmann::json& rep, Assertions& as) {
    std::vector<ExpansionCase> cases;
    if (c.verify.battery) cases = expansion_battery();
    else cases.push_back({c.teacher.build("teacher"), c.reference.build("reference")});
    const double tol = tolerance(c, 1e-3);
    std::size_t index = 0;
    for (auto kind : kinds_of(c))
        for (const auto& cs : cases) {
            const auto r = verify_expansion(c.schedule, cs.q0, cs.p0, {kind}, c.grid);
            auto j = to_json(r);
            j["index"] = index;
            j["divergence"] = to_string(kind);
            j["q0"] = to_json(cs.q0);
            j["p0"] = to_json(cs.p0);
            rep["cases"].push_back(j);
            as.below("case " + std::to_string(index) + " rel_residual", r.rel_residual, tol);
            ++index;
        }
}

inline void run_verify_gradient(const RunConfig& c, nlohmann::json& rep, Assertions& as) {
    const double tol = tolerance(c, 1e-2);
    SurrogateOptions opt;
    opt.c1_x_gradient = c.verify.c1_x_gradient;
    std::vector<std::pair<GaussianMixture, AffineGenerator>> cases;
    if (c.verify.battery) {
        for (const auto& g : gradient_battery_draws(c.seed, c.verify.draws)) cases.emplace_back(gradient_battery_teacher(), g);
    } else {
        cases.emplace_back(c.teacher.build("teacher"), AffineGenerator{c.verify.generator_scale, c.verify.generator_shift});
    }
    std::size_t index = 0;
    for (auto kind : kinds_of(c))
        for (const auto& [q0, g] : cases) {
            const auto r = verify_gradient_equality(c.schedule, q0, g, {kind}, c.grid, opt);
            auto j = to_json(r);
            j["index"] = index;
            j["divergence"] = to_string(kind);
            j["q0"] = to_json(q0);
            j["generator"] = {{"scale", g.scale}, {"shift", g.shift}};
            rep["cases"].push_back(j);
            as.below("case " + std::to_string(index) + " rel_err", r.rel_err, tol);
            ++index;
        }
    if (c.verify.battery) {
        // d/d scale of KL(N(0, s^2) || N(0, 1)) = s - 1/s, at s = 2.
        const auto r = verify_gradient_equality(c.schedule, normal1(0.0, 1.0), {2.0, 0.0}, {DivergenceKind::RKL}, c.grid, opt);
        auto j = to_json(r);
        j["index"] = index;
        j["divergence"] = "rkl";
        j["q0"] = to_json(normal1(0.0, 1.0));
        j["generator"] = {{"scale", 2.0}, {"shift", 0.0}};
        j["anchor"] = 1.5;
        rep["cases"].push_back(j);
        as.below("anchor rhs scale gradient", std::abs(r.rhs_grad[0] - 1.5) / 1.5, 1e-3);
    }
}

inline void run_verify_weighting(const RunConfig& c, nlohmann::json& rep, Assertions& as) {
    const double tol = tolerance(c, 1e-3);
    const auto q0 = c.teacher.build("teacher"), p0 = c.reference.build("reference");
    std::size_t index = 0;
    for (auto kind : kinds_of(c))
        for (const auto& w : c.verify.weights) {
            const auto r = verify_weighting_equivalence(c.schedule, q0, p0, {kind}, named_weight(w), c.grid);
            auto j = to_json(r);
            j["index"] = index;
            j["divergence"] = to_string(kind);
            j["weight"] = w;
            rep["cases"].push_back(j);
            as.below("case " + std::to_string(index) + " rel_residual", r.rel_residual, tol);
            ++index;
        }
}

inline void run_verify_ratio(const RunConfig& c, nlohmann::json& rep, Assertions& as) {
    const auto q = c.teacher.build("teacher"), p = c.reference.build("reference");
    if (q.dim() != 1) throw ContractError("verify-ratio: the evaluation grid is one-dimensional");
    const double t = c.schedule.t_min;
    const auto fit = fit_ratio_discriminator(q, p, c.schedule, t, c.verify.ratio_steps, c.train.batch_size, c.seed,
                                             c.train.lr_discriminator, c.train.discriminator_hidden);
    const auto n = static_cast<Eigen::Index>(c.verify.ratio_grid_points);
    Eigen::MatrixXd x(n, 1);
    for (Eigen::Index i = 0; i < n; ++i)
        x(i, 0) = c.verify.ratio_grid_lo + (c.verify.ratio_grid_hi - c.verify.ratio_grid_lo) * static_cast<double>(i) /
                                               static_cast<double>(n - 1);
    const auto logits = ratio_logits(fit, x, t);
    const auto qt = q.diffused(c.schedule, t), pt = p.diffused(c.schedule, t);
    std::vector<double> err(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double xi = x(i, 0);
        const double truth = std::exp(qt.log_density(std::span<const double>(&xi, 1)) - pt.log_density(std::span<const double>(&xi, 1)));
        err[static_cast<std::size_t>(i)] = std::abs(std::exp(logits(i)) - truth);
    }
    const double med = median_of(err);
    Eigen::MatrixXd mid(1, 1);
    mid(0, 0) = c.verify.midpoint;
    const double d_mid = ad::sigmoid_scalar(ratio_logits(fit, mid, t)(0));
    rep["cases"].push_back({{"index", 0},
                            {"t", t},
                            {"steps", c.verify.ratio_steps},
                            {"final_loss", fit.final_loss},
                            {"median_abs_ratio_error", med},
                            {"midpoint", c.verify.midpoint},
                            {"midpoint_discriminator", d_mid}});
    as.below("median absolute ratio error", med, tolerance(c, 0.1));
    as.below("midpoint |D - 0.5|", std::abs(d_mid - 0.5), 0.05);
}

inline void run_distill(const RunConfig& c, const std::filesystem::path& out, nlohmann::json& rep) {
    const auto teacher = c.teacher.build("teacher");
    Distiller d(teacher, c.schedule, c.train);
    auto res = d.train();
    rep["series"] = nlohmann::json::array();
    for (const auto& m : res.series) rep["series"].push_back(to_json(m));
    for (const auto& w : res.warnings) rep["warnings"].push_back(w);
    write_text(out / "metrics.csv", metrics_csv(res.series));
    write_text(out / "samples.csv", samples_csv(res.samples));
    emit_svg_scatter(res.samples, teacher, out / "samples.svg");
    rep["samples_file"] = "samples.csv";
    write_text(out / "state.json", canonical_dump({{"iteration", res.state.iteration},
                                                   {"generator", to_json(res.state.generator)},
                                                   {"fake_score", to_json(res.state.fake_score)},
                                                   {"discriminator", to_json(res.state.discriminator)}}));
    if (!res.error.empty()) throw NumericError(res.error);
}

// Re-emits an existing report canonically and redraws its scatter plot.
inline void run_report(const RunConfig& c, const std::filesystem::path& out, nlohmann::json& rep, Assertions& as) {
    const std::filesystem::path input = c.report_input.empty() ? out / "report.json" : std::filesystem::path(c.report_input);
    const std::string text = read_text(input);
    nlohmann::json loaded;
    try {
        loaded = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        const auto [line, col] = config_detail::line_column(text, e.byte > 0 ? e.byte - 1 : 0);
        throw ParseError(line, col, "report: malformed JSON");
    }
    const bool canonical = canonical_dump(loaded) == text;
    as.check("input is canonical", canonical ? 1.0 : 0.0, 1.0, canonical);
    rep["source"] = input.string();
    rep["source_command"] = loaded.value("command", "");
    if (loaded.contains("series")) rep["series"] = loaded["series"];
    if (loaded.contains("cases")) rep["cases"] = loaded["cases"];
    const auto samples = input.parent_path() / "samples.csv";
    if (loaded.contains("samples_file") && loaded["samples_file"].is_string() && std::filesystem::exists(samples)) {
        const auto teacher = parse_config(loaded.at("config")).teacher.build("teacher");
        emit_svg_scatter(parse_samples_csv(read_text(samples)), teacher, out / "samples.svg");
        rep["samples_file"] = "samples.svg";
    }
}

}  // namespace runner_detail

// Runs one command and writes report.json (and the distill artifacts) into
// cfg.output_dir. Module errors produce a partial report with an error record.
inline RunOutcome run(const RunConfig& cfg) {
    using namespace runner_detail;
    const auto start = std::chrono::steady_clock::now();
    const std::filesystem::path out = cfg.output_dir;
    RunOutcome res;
    nlohmann::json rep = {{"build", UNIDISTILL_BUILD_ID},
                          {"command", cfg.command},
                          {"config", to_json(cfg)},
                          {"cases", nlohmann::json::array()},
                          {"series", nullptr},
                          {"samples_file", nullptr},
                          {"warnings", nlohmann::json::array()},
                          {"error", nullptr}};
    Assertions as;
    bool failed = false;
    try {
        if (cfg.command == "verify-expansion") run_verify_expansion(cfg, rep, as);
        else if (cfg.command == "verify-gradient") run_verify_gradient(cfg, rep, as);
        else if (cfg.command == "verify-weighting") run_verify_weighting(cfg, rep, as);
        else if (cfg.command == "verify-ratio") run_verify_ratio(cfg, rep, as);
        else if (cfg.command == "distill") run_distill(cfg, out, rep);
        else if (cfg.command == "report") run_report(cfg, out, rep, as);
        else throw ValidationError("command", "unknown command '" + cfg.command + "'");
    } catch (const Error& e) {
        rep["error"] = {{"kind", e.kind()}, {"message", e.what()}};
        failed = true;
    } catch (const std::exception& e) {
        rep["error"] = {{"kind", "internal"}, {"message", e.what()}};
        failed = true;
    }
    if (cfg.command == "verify-expansion" || cfg.command == "verify-weighting") {
        write_text(out / "integrands.csv", integrands_csv(rep["cases"]));
        rep["integrands_file"] = "integrands.csv";
    }
    if (!cfg.verify.assert_results) {
        for (auto& a : as.list) a["enforced"] = false;
        as.all = true;
    }
    rep["assertions"] = as.list;
    rep["passed"] = !failed && as.all;
    rep["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.exit_code = failed ? kExitModule : (as.all ? kExitOk : kExitAssertion);
    res.report_path = out / "report.json";
    write_text(res.report_path, canonical_dump(rep));
    res.report = std::move(rep);
    return res;
}

// Drops the wall-time field so two runs can be compared byte for byte.
inline std::string report_without_wall_time(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    j.erase("wall_time_seconds");
    return canonical_dump(j);
}

}  // namespace unidistill
