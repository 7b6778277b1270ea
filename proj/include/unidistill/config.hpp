#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "unidistill/engine.hpp"
#include "unidistill/error.hpp"
#include "unidistill/fdivergence.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/quadrature.hpp"
#include "unidistill/sde.hpp"

namespace unidistill {

using json = nlohmann::json;

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"verify-expansion", "verify-gradient", "verify-weighting",
                                                "verify-ratio",     "distill",         "report"};
    return names;
}

struct MixtureConfig {
    // Either explicit components or the ring preset.
    std::string preset;  // "" or "ring"
    std::size_t modes = 8;
    double radius = 2.0;
    double stddev = 0.1;
    std::vector<MixtureComponent> components;

    GaussianMixture build(const std::string& field) const {
        try {
            if (preset == "ring") return GaussianMixture::ring(modes, radius, stddev);
            return GaussianMixture(components);
        } catch (const ValidationError& e) {
            // re-root the field path under the section being parsed
            std::string f = e.field();
            if (f.rfind("teacher", 0) == 0) f = field + f.substr(7);
            throw ValidationError(f, std::string(e.what()).substr(e.field().size() + 2));
        }
    }
};

struct VerifyConfig {
    bool battery = true;  // expansion and gradient checks: fixed battery instead of teacher vs reference
    bool all_divergences = false;
    double tolerance = -1.0;  // < 0: per-command default
    bool assert_results = true;
    double generator_scale = 1.0;
    double generator_shift = 0.0;
    std::size_t draws = 10;
    std::vector<std::string> weights{"one", "linear"};
    std::size_t ratio_steps = 2000;
    double ratio_grid_lo = -2.0;
    double ratio_grid_hi = 3.0;
    std::size_t ratio_grid_points = 1000;
    double midpoint = 0.5;
    bool c1_x_gradient = true;
};

struct RunConfig {
    std::string command = "verify-expansion";
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    std::string divergence = "rkl";
    SdeSchedule schedule;
    MixtureConfig teacher;
    MixtureConfig reference;
    QuadratureGrid grid;
    TrainConfig train;
    VerifyConfig verify;
    std::string report_input;  // report command: report file to re-emit

    RunConfig() {
        teacher.components = {{1.0, {1.0}, {1.0}}};
        reference.components = {{1.0, {0.0}, {1.0}}};
    }
};

namespace config_detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void reject_unknown(const json& obj, const std::string& path, const std::vector<std::string>& allowed) {
    if (!obj.is_object()) throw ValidationError(path.empty() ? "config" : path, "expected an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
        std::string best;
        std::size_t best_d = 1000;
        for (const auto& a : allowed) {
            const auto d = edit_distance(key, a);
            if (d < best_d) {
                best_d = d;
                best = a;
            }
        }
        std::string msg = "unknown key '" + key + "'";
        if (!best.empty() && best_d <= std::max<std::size_t>(2, best.size() / 3)) msg += "; did you mean '" + best + "'?";
        throw ValidationError(join(path, key), msg);
    }
}

template <typename T>
void read(const json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(join(path, key), "wrong type");
    }
}

inline void read_count(const json& obj, const std::string& path, const char* key, std::size_t& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ValidationError(join(path, key), "expected a non-negative integer");
    out = v.get<std::size_t>();
}

inline void read_counts(const json& obj, const std::string& path, const char* key, std::vector<std::size_t>& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_array()) throw ValidationError(join(path, key), "expected an array of counts");
    out.clear();
    for (const auto& e : v) {
        if (!e.is_number_integer() || e.get<long long>() < 1) throw ValidationError(join(path, key), "counts must be >= 1");
        out.push_back(e.get<std::size_t>());
    }
}

template <typename E>
E read_enum(const json& obj, const std::string& path, const char* key, E current,
            const std::vector<std::pair<std::string, E>>& names) {
    if (!obj.contains(key)) return current;
    const auto& v = obj.at(key);
    if (v.is_string())
        for (const auto& [n, e] : names)
            if (n == v.get<std::string>()) return e;
    std::string opts;
    for (const auto& [n, _] : names) opts += (opts.empty() ? "" : "|") + n;
    throw ValidationError(join(path, key), "expected one of " + opts);
}

template <typename E>
std::string enum_name(E value, const std::vector<std::pair<std::string, E>>& names) {
    for (const auto& [n, e] : names)
        if (e == value) return n;
    return "?";
}

inline const std::vector<std::pair<std::string, SdeKind>> sde_names{{"vp", SdeKind::VP}, {"ve", SdeKind::VE}};
inline const std::vector<std::pair<std::string, DsmWeight>> dsm_names{{"sigma2", DsmWeight::Sigma2}, {"one", DsmWeight::One}};
inline const std::vector<std::pair<std::string, TimeSampler>> sampler_names{{"uniform", TimeSampler::Uniform},
                                                                           {"lognormal", TimeSampler::LogNormal}};
inline const std::vector<std::pair<std::string, RatioSource>> ratio_names{{"discriminator", RatioSource::Discriminator},
                                                                         {"analytic", RatioSource::Analytic}};
inline const std::vector<std::pair<std::string, FakeScoreSource>> fake_names{{"network", FakeScoreSource::Network},
                                                                            {"analytic", FakeScoreSource::Analytic}};
inline const std::vector<std::pair<std::string, GeneratorKind>> generator_names{
    {"mlp", GeneratorKind::Mlp}, {"affine", GeneratorKind::Affine}, {"mixture_affine", GeneratorKind::MixtureAffine}};

inline std::vector<std::pair<std::string, DivergenceKind>> divergence_names() {
    std::vector<std::pair<std::string, DivergenceKind>> v;
    for (auto k : all_divergences) v.emplace_back(to_string(k), k);
    return v;
}

inline MixtureConfig parse_mixture(const json& j, const std::string& path) {
    reject_unknown(j, path, {"preset", "modes", "radius", "std", "components"});
    MixtureConfig m;
    m.components.clear();
    read(j, path, "preset", m.preset);
    if (!m.preset.empty() && m.preset != "ring") throw ValidationError(path + ".preset", "only 'ring' is available");
    read_count(j, path, "modes", m.modes);
    read(j, path, "radius", m.radius);
    read(j, path, "std", m.stddev);
    if (m.preset == "ring") {
        if (j.contains("components")) throw ValidationError(path + ".components", "not allowed together with a preset");
        if (m.modes < 1 || !(m.stddev > 0.0)) throw ValidationError(path + ".std", "ring needs modes >= 1 and std > 0");
    } else {
        if (!j.contains("components") || !j.at("components").is_array() || j.at("components").empty())
            throw ValidationError(path + ".components", "expected a non-empty array");
        const std::string cp = path + ".components";
        for (const auto& c : j.at("components")) {
            reject_unknown(c, cp, {"weight", "mean", "diag_cov"});
            MixtureComponent mc;
            read(c, cp, "weight", mc.weight);
            read(c, cp, "mean", mc.mean);
            read(c, cp, "diag_cov", mc.diag_cov);
            m.components.push_back(std::move(mc));
        }
    }
    m.build(path);  // validates
    return m;
}

inline json mixture_to_json(const MixtureConfig& m) {
    if (m.preset == "ring") return {{"preset", "ring"}, {"modes", m.modes}, {"radius", m.radius}, {"std", m.stddev}};
    json comps = json::array();
    for (const auto& c : m.components) comps.push_back({{"weight", c.weight}, {"mean", c.mean}, {"diag_cov", c.diag_cov}});
    return {{"components", comps}};
}

// 1-based line and column of a byte offset.
inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t offset) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(offset, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

}  // namespace config_detail

inline json to_json(const RunConfig& c) {
    using namespace config_detail;
    const auto& t = c.train;
    json train = {
        {"divergence", to_string(t.divergence)},
        {"stage2_divergence", t.stage2_divergence ? json(to_string(*t.stage2_divergence)) : json(nullptr)},
        {"stage2_step", t.stage2_step},
        {"gan_weight", t.gan_weight},
        {"dsm_weight", enum_name(t.dsm_weight, dsm_names)},
        {"time_sampler", enum_name(t.time_sampler, sampler_names)},
        {"lognormal_mean", t.lognormal_mean},
        {"lognormal_std", t.lognormal_std},
        {"batch_size", t.batch_size},
        {"steps", t.steps},
        {"updates", {t.n_discriminator, t.n_fake_score, t.n_generator}},
        {"ratio_source", enum_name(t.ratio_source, ratio_names)},
        {"fake_score_source", enum_name(t.fake_score_source, fake_names)},
        {"c_normalize", t.c_normalize},
        {"c1_x_gradient", t.c1_x_gradient},
        {"clean_discriminator", t.clean_discriminator},
        {"ratio_clamp", {t.ratio_lo, t.ratio_hi}},
        {"lr_generator", t.lr_generator},
        {"lr_fake_score", t.lr_fake_score},
        {"lr_discriminator", t.lr_discriminator},
        {"cosine_decay", t.cosine_decay},
        {"lr_floor", t.lr_floor},
        {"eval_interval", t.eval_interval},
        {"n_eval", t.n_eval},
        {"sw_projections", t.sw_projections},
        {"generator", enum_name(t.generator, generator_names)},
        {"latent_dim", t.latent_dim},
        {"generator_hidden", t.generator_hidden},
        {"fake_score_hidden", t.fake_score_hidden},
        {"discriminator_hidden", t.discriminator_hidden},
        {"time_frequencies", t.time_frequencies},
        {"mixture_components", t.mixture_components},
        {"init_from_teacher", t.init_from_teacher},
    };
    const auto& s = c.schedule;
    const auto& v = c.verify;
    json j = {
        {"command", c.command},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"divergence", c.divergence},
        {"schedule",
         {{"kind", enum_name(s.kind, sde_names)},
          {"beta_min", s.beta_min},
          {"beta_max", s.beta_max},
          {"sigma_min", s.sigma_min},
          {"sigma_max", s.sigma_max},
          {"T", s.horizon_T},
          {"t_min", s.t_min}}},
        {"teacher", mixture_to_json(c.teacher)},
        {"reference", mixture_to_json(c.reference)},
        {"grid",
         {{"space_points", c.grid.space_points},
          {"space_points_2d", c.grid.space_points_2d},
          {"space_extent", c.grid.space_extent},
          {"time_points", c.grid.time_points},
          {"cutoff_points", c.grid.cutoff_points}}},
        {"train", train},
        {"verify",
         {{"battery", v.battery},
          {"all_divergences", v.all_divergences},
          {"tolerance", v.tolerance},
          {"assert", v.assert_results},
          {"generator", {{"scale", v.generator_scale}, {"shift", v.generator_shift}}},
          {"draws", v.draws},
          {"weights", v.weights},
          {"ratio_steps", v.ratio_steps},
          {"ratio_grid", {v.ratio_grid_lo, v.ratio_grid_hi}},
          {"ratio_grid_points", v.ratio_grid_points},
          {"midpoint", v.midpoint},
          {"c1_x_gradient", v.c1_x_gradient}}},
        {"report_input", c.report_input},
    };
    return j;
}

inline RunConfig parse_config(const json& j) {
    using namespace config_detail;
    RunConfig c;
    reject_unknown(j, "", {"command", "seed", "output_dir", "divergence", "schedule", "teacher", "reference", "grid",
                           "train", "verify", "report_input"});
    read(j, "", "command", c.command);
    if (std::find(command_names().begin(), command_names().end(), c.command) == command_names().end())
        throw ValidationError("command", "unknown command '" + c.command + "'");
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0) {
            if (!j.at("seed").is_number_unsigned()) throw ValidationError("seed", "expected a non-negative integer");
        }
        c.seed = j.at("seed").get<std::uint64_t>();
    }
    read(j, "", "output_dir", c.output_dir);
    read(j, "", "divergence", c.divergence);
    read(j, "", "report_input", c.report_input);
    const auto kind = parse_divergence(c.divergence);
    c.train.divergence = kind;
    c.train.seed = c.seed;

    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        reject_unknown(s, "schedule", {"kind", "beta_min", "beta_max", "sigma_min", "sigma_max", "T", "t_min"});
        c.schedule.kind = read_enum(s, "schedule", "kind", c.schedule.kind, sde_names);
        read(s, "schedule", "beta_min", c.schedule.beta_min);
        read(s, "schedule", "beta_max", c.schedule.beta_max);
        read(s, "schedule", "sigma_min", c.schedule.sigma_min);
        read(s, "schedule", "sigma_max", c.schedule.sigma_max);
        read(s, "schedule", "T", c.schedule.horizon_T);
        read(s, "schedule", "t_min", c.schedule.t_min);
    }
    c.schedule.validate();
    if (j.contains("teacher")) c.teacher = parse_mixture(j.at("teacher"), "teacher");
    if (j.contains("reference")) c.reference = parse_mixture(j.at("reference"), "reference");
    // only the teacher-vs-reference commands read the reference
    const bool uses_reference = c.command == "verify-expansion" || c.command == "verify-weighting" || c.command == "verify-ratio";
    if (uses_reference && c.teacher.build("teacher").dim() != c.reference.build("reference").dim())
        throw ValidationError("reference", "dimension differs from the teacher");

    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        reject_unknown(g, "grid", {"space_points", "space_points_2d", "space_extent", "time_points", "cutoff_points"});
        read_count(g, "grid", "space_points", c.grid.space_points);
        read_count(g, "grid", "space_points_2d", c.grid.space_points_2d);
        read(g, "grid", "space_extent", c.grid.space_extent);
        read_count(g, "grid", "time_points", c.grid.time_points);
        read_count(g, "grid", "cutoff_points", c.grid.cutoff_points);
    }
    c.grid.validate();

    if (j.contains("train")) {
        const auto& t = j.at("train");
        const std::string p = "train";
        reject_unknown(t, p, {"divergence", "stage2_divergence", "stage2_step", "gan_weight", "dsm_weight", "time_sampler",
                              "lognormal_mean", "lognormal_std", "batch_size", "steps", "updates", "ratio_source",
                              "fake_score_source", "c_normalize", "c1_x_gradient", "clean_discriminator", "ratio_clamp",
                              "lr_generator", "lr_fake_score", "lr_discriminator", "cosine_decay", "lr_floor",
                              "eval_interval", "n_eval", "sw_projections", "generator", "latent_dim", "generator_hidden", "fake_score_hidden",
                              "discriminator_hidden", "time_frequencies", "mixture_components", "init_from_teacher"});
        auto& tc = c.train;
        tc.divergence = read_enum(t, p, "divergence", tc.divergence, divergence_names());
        if (t.contains("stage2_divergence") && !t.at("stage2_divergence").is_null())
            tc.stage2_divergence = read_enum(t, p, "stage2_divergence", DivergenceKind::FKL, divergence_names());
        read_count(t, p, "stage2_step", tc.stage2_step);
        read(t, p, "gan_weight", tc.gan_weight);
        tc.dsm_weight = read_enum(t, p, "dsm_weight", tc.dsm_weight, dsm_names);
        tc.time_sampler = read_enum(t, p, "time_sampler", tc.time_sampler, sampler_names);
        read(t, p, "lognormal_mean", tc.lognormal_mean);
        read(t, p, "lognormal_std", tc.lognormal_std);
        read_count(t, p, "batch_size", tc.batch_size);
        read_count(t, p, "steps", tc.steps);
        if (t.contains("updates")) {
            std::vector<std::size_t> u;
            read_counts(t, p, "updates", u);
            if (u.size() != 3) throw ValidationError("train.updates", "expected [discriminator, fake_score, generator]");
            tc.n_discriminator = u[0];
            tc.n_fake_score = u[1];
            tc.n_generator = u[2];
        }
        tc.ratio_source = read_enum(t, p, "ratio_source", tc.ratio_source, ratio_names);
        tc.fake_score_source = read_enum(t, p, "fake_score_source", tc.fake_score_source, fake_names);
        read(t, p, "c_normalize", tc.c_normalize);
        read(t, p, "c1_x_gradient", tc.c1_x_gradient);
        read(t, p, "clean_discriminator", tc.clean_discriminator);
        if (t.contains("ratio_clamp")) {
            std::vector<double> rc;
            read(t, p, "ratio_clamp", rc);
            if (rc.size() != 2) throw ValidationError("train.ratio_clamp", "expected [lo, hi]");
            tc.ratio_lo = rc[0];
            tc.ratio_hi = rc[1];
        }
        read(t, p, "lr_generator", tc.lr_generator);
        read(t, p, "lr_fake_score", tc.lr_fake_score);
        read(t, p, "lr_discriminator", tc.lr_discriminator);
        read(t, p, "cosine_decay", tc.cosine_decay);
        read(t, p, "lr_floor", tc.lr_floor);
        read_count(t, p, "eval_interval", tc.eval_interval);
        read_count(t, p, "n_eval", tc.n_eval);
        read_count(t, p, "sw_projections", tc.sw_projections);
        tc.generator = read_enum(t, p, "generator", tc.generator, generator_names);
        read_count(t, p, "latent_dim", tc.latent_dim);
        read_counts(t, p, "generator_hidden", tc.generator_hidden);
        read_counts(t, p, "fake_score_hidden", tc.fake_score_hidden);
        read_counts(t, p, "discriminator_hidden", tc.discriminator_hidden);
        read_count(t, p, "time_frequencies", tc.time_frequencies);
        read_count(t, p, "mixture_components", tc.mixture_components);
        read(t, p, "init_from_teacher", tc.init_from_teacher);
        if (t.contains("divergence") && to_string(tc.divergence) != c.divergence)
            throw ValidationError("train.divergence", "disagrees with the top-level divergence");
    }
    c.train.validate();

    if (j.contains("verify")) {
        const auto& v = j.at("verify");
        const std::string p = "verify";
        reject_unknown(v, p, {"battery", "all_divergences", "tolerance", "assert", "generator", "draws", "weights",
                              "ratio_steps", "ratio_grid", "ratio_grid_points", "midpoint", "c1_x_gradient"});
        auto& vc = c.verify;
        read(v, p, "battery", vc.battery);
        read(v, p, "all_divergences", vc.all_divergences);
        read(v, p, "tolerance", vc.tolerance);
        read(v, p, "assert", vc.assert_results);
        if (v.contains("generator")) {
            const auto& g = v.at("generator");
            reject_unknown(g, "verify.generator", {"scale", "shift"});
            read(g, "verify.generator", "scale", vc.generator_scale);
            read(g, "verify.generator", "shift", vc.generator_shift);
        }
        read_count(v, p, "draws", vc.draws);
        read(v, p, "weights", vc.weights);
        for (const auto& w : vc.weights)
            if (w != "one" && w != "linear")
                throw ValidationError("verify.weights", "unknown weight '" + w + "' (expected one|linear)");
        read_count(v, p, "ratio_steps", vc.ratio_steps);
        if (v.contains("ratio_grid")) {
            std::vector<double> g;
            read(v, p, "ratio_grid", g);
            if (g.size() != 2 || !(g[1] > g[0])) throw ValidationError("verify.ratio_grid", "expected [lo, hi] with lo < hi");
            vc.ratio_grid_lo = g[0];
            vc.ratio_grid_hi = g[1];
        }
        read_count(v, p, "ratio_grid_points", vc.ratio_grid_points);
        read(v, p, "midpoint", vc.midpoint);
        read(v, p, "c1_x_gradient", vc.c1_x_gradient);
        if (!(vc.generator_scale > 0.0)) throw ValidationError("verify.generator.scale", "must be > 0");
        if (vc.ratio_grid_points < 2) throw ValidationError("verify.ratio_grid_points", "must be >= 2");
    }
    return c;
}

inline RunConfig parse_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = config_detail::line_column(text, e.byte > 0 ? e.byte - 1 : 0);
        std::string what = e.what();
        const auto pos = what.find("syntax error");
        throw ParseError(line, col, pos == std::string::npos ? what : what.substr(pos));
    }
    return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace unidistill
