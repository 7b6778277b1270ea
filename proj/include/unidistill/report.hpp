#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "unidistill/engine.hpp"
#include "unidistill/error.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/verify.hpp"

namespace unidistill {

// Sorted keys, two-space indent, trailing newline. NaN and inf become null.
inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw FileError("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Shortest representation that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline nlohmann::json to_json(const VerificationReport& r) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& [t, v] : r.per_time_integrand) pts.push_back({t, v});
    return {{"lhs", r.lhs},
            {"rhs", r.rhs},
            {"terminal_term", r.terminal_term},
            {"cutoff_term", r.cutoff_term},
            {"residual", r.residual},
            {"rel_residual", r.rel_residual},
            {"per_time_integrand", pts}};
}

inline nlohmann::json to_json(const GradientReport& r) {
    return {{"lhs_grad", r.lhs_grad},
            {"rhs_grad", r.rhs_grad},
            {"exact_grad", r.exact_grad},
            {"rel_err", r.rel_err},
            {"exact_rel_err", r.exact_rel_err}};
}

inline nlohmann::json to_json(const GaussianMixture& m) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : m.components()) comps.push_back({{"weight", c.weight}, {"mean", c.mean}, {"diag_cov", c.diag_cov}});
    return {{"components", comps}};
}

inline nlohmann::json to_json(const MetricRow& m) {
    return {{"iteration", m.iteration},
            {"l_sim", m.losses.l_sim},
            {"l_di", m.losses.l_di},
            {"l_gan", m.losses.l_gan},
            {"l_dsm", m.losses.l_dsm},
            {"l_disc", m.losses.l_disc},
            {"sw_distance", m.sw_distance},
            {"modes_covered", m.modes_covered},
            {"ratio_median", m.losses.ratio_median}};
}

inline nlohmann::json to_json(const ParamStore& p) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : p.segments()) {
        const auto v = p.segment_values(s.name);
        segs.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"values", std::vector<double>(v.begin(), v.end())}});
    }
    return segs;
}

inline std::string metrics_csv(const std::vector<MetricRow>& series) {
    std::string out = "iteration,l_sim,l_di,l_gan,l_dsm,l_disc,sw_distance,modes_covered,ratio_median\n";
    for (const auto& m : series) {
        out += std::to_string(m.iteration);
        for (double v : {m.losses.l_sim, m.losses.l_di, m.losses.l_gan, m.losses.l_dsm, m.losses.l_disc, m.sw_distance,
                         m.modes_covered, m.losses.ratio_median})
            out += "," + format_double(v);
        out += "\n";
    }
    return out;
}

// One row per (case, time node) from verification case records.
inline std::string integrands_csv(const nlohmann::json& cases) {
    std::string out = "case,divergence,t,integrand\n";
    for (const auto& c : cases) {
        if (!c.contains("per_time_integrand")) continue;
        const std::string head = std::to_string(c.at("index").get<std::size_t>()) + "," + c.at("divergence").get<std::string>();
        for (const auto& p : c.at("per_time_integrand"))
            out += head + "," + format_double(p.at(0).get<double>()) + "," + format_double(p.at(1).get<double>()) + "\n";
    }
    return out;
}

inline std::string samples_csv(const Eigen::MatrixXd& x) {
    std::string out;
    for (Eigen::Index j = 0; j < x.cols(); ++j) out += (j ? ",x" : "x") + std::to_string(j);
    out += "\n";
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) out += (j ? "," : "") + format_double(x(i, j));
        out += "\n";
    }
    return out;
}

inline Eigen::MatrixXd parse_samples_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FileError("samples csv: missing header");
    const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
    std::vector<double> vals;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        Eigen::Index n = 0;
        while (std::getline(ls, cell, ',')) {
            vals.push_back(std::strtod(cell.c_str(), nullptr));
            ++n;
        }
        if (n != cols) throw ParseError(row, 1, "samples csv: expected " + std::to_string(cols) + " columns");
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(vals.size()) / cols, cols);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < cols; ++j) x(i, j) = vals[static_cast<std::size_t>(i * cols + j)];
    return x;
}

namespace svg_detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace svg_detail

// 800x800 scatter (2-D) or histogram polyline (1-D) on symmetric extents
// centred at the origin; teacher mode centres are drawn as crosses.
inline std::string svg_scatter(const Eigen::MatrixXd& samples, const GaussianMixture& teacher) {
    using svg_detail::num;
    const auto d = samples.size() ? samples.cols() : static_cast<Eigen::Index>(teacher.dim());
    if (d != 1 && d != 2) throw ContractError("svg_scatter: dimension must be 1 or 2");
    if (samples.size() && static_cast<std::size_t>(samples.cols()) != teacher.dim())
        throw ShapeError("svg_scatter: samples and teacher differ in dimension");
    constexpr double size = 800.0, margin = 40.0, half = (size - 2 * margin) / 2, centre = size / 2;
    double extent = 0.0;
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
        for (Eigen::Index j = 0; j < samples.cols(); ++j)
            if (std::isfinite(samples(i, j))) extent = std::max(extent, std::abs(samples(i, j)));
    for (const auto& c : teacher.components())
        for (double m : c.mean) extent = std::max(extent, std::abs(m));
    extent = extent > 0.0 ? 1.1 * extent : 1.0;
    auto px = [&](double v) { return centre + v / extent * half; };
    auto py = [&](double v) { return centre - v / extent * half; };

    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n";
    out += "<rect x=\"0\" y=\"0\" width=\"800\" height=\"800\" fill=\"white\"/>\n";
    out += "<g stroke=\"#888888\" stroke-width=\"1\">\n";
    out += "<line x1=\"" + num(margin) + "\" y1=\"400.00\" x2=\"" + num(size - margin) + "\" y2=\"400.00\"/>\n";
    out += "<line x1=\"400.00\" y1=\"" + num(margin) + "\" x2=\"400.00\" y2=\"" + num(size - margin) + "\"/>\n";
    out += "</g>\n";
    out += "<text x=\"" + num(size - margin) + "\" y=\"392.00\" font-size=\"12\" text-anchor=\"end\">" + num(extent) + "</text>\n";

    if (d == 2) {
        out += "<g fill=\"#1f77b4\" fill-opacity=\"0.5\">\n";
        for (Eigen::Index i = 0; i < samples.rows(); ++i) {
            if (!std::isfinite(samples(i, 0)) || !std::isfinite(samples(i, 1))) continue;
            out += "<circle cx=\"" + num(px(samples(i, 0))) + "\" cy=\"" + num(py(samples(i, 1))) + "\" r=\"2\"/>\n";
        }
        out += "</g>\n";
    } else if (samples.rows() > 0) {
        constexpr int bins = 80;
        std::vector<double> h(bins, 0.0);
        for (Eigen::Index i = 0; i < samples.rows(); ++i) {
            const double u = (samples(i, 0) + extent) / (2 * extent);
            if (!std::isfinite(u)) continue;
            h[static_cast<std::size_t>(std::clamp(static_cast<int>(u * bins), 0, bins - 1))] += 1.0;
        }
        const double peak = *std::max_element(h.begin(), h.end());
        out += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
        for (int b = 0; b < bins; ++b) {
            const double x = -extent + (b + 0.5) * 2 * extent / bins;
            out += (b ? " " : "") + num(px(x)) + "," + num(centre - (peak > 0 ? h[b] / peak : 0.0) * half);
        }
        out += "\"/>\n";
    }

    out += "<g stroke=\"#d62728\" stroke-width=\"2\">\n";
    for (const auto& c : teacher.components()) {
        const double cx = px(c.mean[0]), cy = d == 2 ? py(c.mean[1]) : centre;
        out += "<line x1=\"" + num(cx - 6) + "\" y1=\"" + num(cy - 6) + "\" x2=\"" + num(cx + 6) + "\" y2=\"" + num(cy + 6) + "\"/>\n";
        out += "<line x1=\"" + num(cx - 6) + "\" y1=\"" + num(cy + 6) + "\" x2=\"" + num(cx + 6) + "\" y2=\"" + num(cy - 6) + "\"/>\n";
    }
    out += "</g>\n</svg>\n";
    return out;
}

inline void emit_svg_scatter(const Eigen::MatrixXd& samples, const GaussianMixture& teacher,
                             const std::filesystem::path& path) {
    write_text(path, svg_scatter(samples, teacher));
}

}  // namespace unidistill
