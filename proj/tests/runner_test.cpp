#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "unidistill/config.hpp"
#include "unidistill/report.hpp"
#include "unidistill/runner.hpp"

using namespace unidistill;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("unidistill_runner_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

template <typename E>
std::string error_text(const std::string& config) {
    try {
        parse_config_text(config);
    } catch (const E& e) {
        return e.what();
    }
    return "<no error>";
}

// Minimal well-formedness check: balanced, properly nested tags, quoted
// attributes, a single root element, nothing but whitespace outside it.
bool well_formed_xml(const std::string& s, std::string& why) {
    std::vector<std::string> stack;
    std::size_t i = 0, roots = 0;
    const std::regex attr(R"(\s+[A-Za-z_:][-A-Za-z0-9_:.]*\s*=\s*("[^"<&]*"|'[^'<&]*'))");
    const std::regex name(R"([A-Za-z_:][-A-Za-z0-9_:.]*)");
    while (i < s.size()) {
        if (s[i] != '<') {
            if (stack.empty() && !std::isspace(static_cast<unsigned char>(s[i]))) return why = "text outside root", false;
            if (s[i] == '&') {
                const auto semi = s.find(';', i);
                if (semi == std::string::npos) return why = "bare ampersand", false;
            }
            ++i;
            continue;
        }
        const auto close = s.find('>', i);
        if (close == std::string::npos) return why = "unterminated tag", false;
        std::string tag = s.substr(i + 1, close - i - 1);
        i = close + 1;
        if (tag.starts_with("?")) {
            if (!tag.ends_with("?")) return why = "bad declaration", false;
            continue;
        }
        if (tag.starts_with("/")) {
            if (stack.empty() || stack.back() != tag.substr(1)) return why = "mismatched </" + tag.substr(1) + ">", false;
            stack.pop_back();
            continue;
        }
        const bool self = tag.ends_with("/");
        if (self) tag.pop_back();
        std::smatch m;
        if (!std::regex_search(tag, m, name) || m.position(0) != 0) return why = "bad tag name in <" + tag + ">", false;
        const std::string n = m.str(0);
        std::string rest = tag.substr(n.size());
        std::string stripped = std::regex_replace(rest, attr, "");
        if (stripped.find_first_not_of(" \t\r\n") != std::string::npos) return why = "bad attributes in <" + n + ">", false;
        if (stack.empty()) ++roots;
        if (!self) stack.push_back(n);
    }
    if (!stack.empty()) return why = "unclosed <" + stack.back() + ">", false;
    if (roots != 1) return why = "expected one root element", false;
    return true;
}

std::vector<std::pair<double, double>> circles(const std::string& svg) {
    std::vector<std::pair<double, double>> out;
    const std::regex re(R"re(<circle cx="([-0-9.]+)" cy="([-0-9.]+)")re");
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator(); ++it)
        out.emplace_back(std::stod((*it)[1]), std::stod((*it)[2]));
    return out;
}

}  // namespace

TEST(Config, MinimalConfigFillsDefaults) {
    const auto c = parse_config_text(R"({"command": "verify-expansion", "divergence": "rkl"})");
    EXPECT_EQ(c.command, "verify-expansion");
    EXPECT_EQ(c.train.divergence, DivergenceKind::RKL);
    const auto q = c.teacher.build("teacher"), p = c.reference.build("reference");
    ASSERT_EQ(q.size(), 1u);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_EQ(q.components()[0].mean[0], 1.0);
    EXPECT_EQ(q.components()[0].diag_cov[0], 1.0);
    EXPECT_EQ(p.components()[0].mean[0], 0.0);
    EXPECT_EQ(p.components()[0].diag_cov[0], 1.0);
    EXPECT_EQ(c.schedule.kind, SdeKind::VP);
    EXPECT_EQ(c.schedule.beta_min, 0.1);
    EXPECT_EQ(c.schedule.beta_max, 20.0);
    EXPECT_EQ(c.schedule.horizon_T, 1.0);
    EXPECT_EQ(c.schedule.t_min, 1e-3);
    EXPECT_EQ(c.train.steps, 20000u);
    EXPECT_EQ(c.train.gan_weight, 0.0);
    EXPECT_EQ(c.train.n_discriminator, 1u);
    EXPECT_EQ(c.train.n_fake_score, 2u);
    EXPECT_EQ(c.train.n_generator, 1u);
}

TEST(Config, RoundTripIsIdentity) {
    const std::string full = R"({
      "command": "distill", "seed": 17, "divergence": "js", "output_dir": "somewhere",
      "schedule": {"kind": "ve", "sigma_min": 0.02, "sigma_max": 30.0, "T": 1.0, "t_min": 0.002},
      "teacher": {"preset": "ring", "modes": 6, "radius": 3.0, "std": 0.2},
      "train": {"steps": 12, "batch_size": 8, "updates": [2, 3, 1], "ratio_clamp": [0.001, 1000.0],
                "time_sampler": "lognormal", "gan_weight": 0.1, "cosine_decay": true, "lr_floor": 0.2,
                "stage2_divergence": "fkl", "stage2_step": 5, "generator_hidden": [16, 8]},
      "grid": {"space_points": 512, "time_points": 32},
      "verify": {"all_divergences": true, "weights": ["linear"], "tolerance": 0.01}
    })";
    for (const std::string& text : {std::string(R"({"command": "verify-ratio"})"), full}) {
        const auto a = parse_config_text(text);
        const auto ja = to_json(a);
        const auto b = parse_config(ja);
        EXPECT_EQ(to_json(b), ja);
        EXPECT_EQ(canonical_dump(to_json(parse_config(nlohmann::json::parse(canonical_dump(ja))))), canonical_dump(ja));
    }
    const auto c = parse_config_text(full);
    EXPECT_EQ(c.train.divergence, DivergenceKind::JS);
    EXPECT_EQ(c.train.n_fake_score, 3u);
    EXPECT_TRUE(c.train.cosine_decay);
    EXPECT_EQ(c.teacher.build("teacher").size(), 6u);
}

TEST(Config, WeightsMustSumToOne) {
    const auto msg = error_text<ValidationError>(R"({"command": "verify-expansion",
        "teacher": {"components": [{"weight": 0.25, "mean": [0.0], "diag_cov": [1.0]},
                                   {"weight": 0.25, "mean": [1.0], "diag_cov": [1.0]}]}})");
    EXPECT_NE(msg.find("teacher.components.weight"), std::string::npos) << msg;
}

TEST(Config, UnknownKeySuggestsNearest) {
    const auto msg = error_text<ValidationError>(R"({"command": "verify-expansion", "divergnce": "rkl"})");
    EXPECT_NE(msg.find("divergnce"), std::string::npos) << msg;
    EXPECT_NE(msg.find("did you mean 'divergence'"), std::string::npos) << msg;
    const auto nested = error_text<ValidationError>(R"({"command": "distill", "train": {"stpes": 3}})");
    EXPECT_NE(nested.find("train.stpes"), std::string::npos) << nested;
    EXPECT_NE(nested.find("'steps'"), std::string::npos) << nested;
}

TEST(Config, ParseErrorHasLineAndColumn) {
    try {
        parse_config_text("{\n  \"command\": ,\n}");
        FAIL() << "no parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_EQ(e.column(), 14u);
    }
}

TEST(Config, FieldValidation) {
    EXPECT_NE(error_text<ValidationError>(R"({"command": "distill", "train": {"batch_size": 1}})").find("train.batch_size"),
              std::string::npos);
    EXPECT_NE(error_text<ValidationError>(R"({"command": "distill", "divergence": "kl"})").find("divergence"),
              std::string::npos);
    EXPECT_NE(error_text<ValidationError>(R"({"command": "launch"})").find("command"), std::string::npos);
    EXPECT_NE(error_text<ValidationError>(R"({"command": "verify-expansion", "grid": {"space_points": 0}})")
                  .find("grid.space_points"),
              std::string::npos);
    EXPECT_NE(error_text<ValidationError>(R"({"command": "verify-expansion", "seed": -4})").find("seed"),
              std::string::npos);
}

TEST(Config, SampleConfigsLoad) {
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(UNIDISTILL_CONFIGS)) {
        if (e.path().extension() != ".json") continue;
        SCOPED_TRACE(e.path().string());
        RunConfig c;
        EXPECT_NO_THROW(c = load_config(e.path().string()));
        EXPECT_EQ(to_json(parse_config(to_json(c))), to_json(c));
        ++n;
    }
    EXPECT_GE(n, 6u);
}

TEST(Config, LoadMissingFile) { EXPECT_THROW(load_config("/nonexistent/config.json"), FileError); }

TEST(Run, ExpansionBatteryPasses) {
    auto c = parse_config_text(R"({"command": "verify-expansion", "divergence": "rkl"})");
    c.output_dir = scratch("battery").string();
    const auto res = run(c);
    EXPECT_EQ(res.exit_code, kExitOk);
    ASSERT_EQ(res.report["cases"].size(), 12u);
    for (const auto& cs : res.report["cases"]) EXPECT_LT(cs["rel_residual"].get<double>(), 1e-3);
    EXPECT_TRUE(res.report["passed"].get<bool>());
    const auto csv = read_text(fs::path(c.output_dir) / "integrands.csv");
    EXPECT_TRUE(csv.starts_with("case,divergence,t,integrand\n"));
}

TEST(Run, DistillWithZeroStepsWritesArtifacts) {
    auto c = parse_config_text(R"({"command": "distill", "teacher": {"preset": "ring"}, "train": {"steps": 0, "n_eval": 200}})");
    const auto dir = scratch("zero");
    c.output_dir = dir.string();
    const auto res = run(c);
    EXPECT_EQ(res.exit_code, kExitOk);
    EXPECT_TRUE(res.report["series"].is_array());
    EXPECT_TRUE(res.report["series"].empty());
    EXPECT_EQ(read_text(dir / "metrics.csv"),
              "iteration,l_sim,l_di,l_gan,l_dsm,l_disc,sw_distance,modes_covered,ratio_median\n");
    const auto samples = parse_samples_csv(read_text(dir / "samples.csv"));
    EXPECT_EQ(samples.rows(), 200);
    EXPECT_EQ(samples.cols(), 2);
    std::string why;
    EXPECT_TRUE(well_formed_xml(read_text(dir / "samples.svg"), why)) << why;
    EXPECT_TRUE(fs::exists(dir / "state.json"));
}

TEST(Run, ReportIsCanonicalAndReloadStable) {
    auto c = parse_config_text(R"({"command": "verify-weighting", "divergence": "fkl"})");
    const auto dir = scratch("canonical");
    c.output_dir = dir.string();
    run(c);
    const auto text = read_text(dir / "report.json");
    EXPECT_EQ(canonical_dump(nlohmann::json::parse(text)), text);
    // the echoed config alone reproduces the run
    auto again = parse_config(nlohmann::json::parse(text).at("config"));
    const auto dir2 = scratch("canonical2");
    again.output_dir = dir2.string();
    run(again);
    auto a = nlohmann::json::parse(text), b = nlohmann::json::parse(read_text(dir2 / "report.json"));
    for (auto* j : {&a, &b}) {
        j->erase("wall_time_seconds");
        (*j)["config"].erase("output_dir");
    }
    EXPECT_EQ(a, b);
}

TEST(Run, RepeatedRunsAreByteIdentical) {
    for (const std::string& text :
         {std::string(R"({"command": "verify-weighting", "divergence": "js"})"),
          std::string(R"({"command": "distill", "teacher": {"preset": "ring"}, "seed": 4,
             "train": {"steps": 6, "batch_size": 16, "eval_interval": 3, "n_eval": 300}})")}) {
        auto c = parse_config_text(text);
        c.output_dir = scratch("det").string();
        run(c);
        const auto first = read_text(fs::path(c.output_dir) / "report.json");
        const auto first_samples = fs::exists(fs::path(c.output_dir) / "samples.csv")
                                       ? read_text(fs::path(c.output_dir) / "samples.csv")
                                       : std::string();
        run(c);
        EXPECT_EQ(report_without_wall_time(first), report_without_wall_time(read_text(fs::path(c.output_dir) / "report.json")));
        if (!first_samples.empty()) {
            EXPECT_EQ(first_samples, read_text(fs::path(c.output_dir) / "samples.csv"));
        }
    }
}

TEST(Run, ModuleErrorLeavesPartialReport) {
    auto c = parse_config_text(R"({"command": "report", "report_input": "/nonexistent/report.json"})");
    const auto dir = scratch("moderr");
    c.output_dir = dir.string();
    const auto res = run(c);
    EXPECT_EQ(res.exit_code, kExitModule);
    EXPECT_EQ(res.report["error"]["kind"], "file");
    EXPECT_FALSE(res.report["passed"].get<bool>());
    EXPECT_TRUE(fs::exists(dir / "report.json"));
}

TEST(Run, FailedAssertionExitCode) {
    auto c = parse_config_text(R"({"command": "verify-weighting", "verify": {"tolerance": 1e-300}})");
    c.output_dir = scratch("assert").string();
    EXPECT_EQ(run(c).exit_code, kExitAssertion);
    c.verify.assert_results = false;
    EXPECT_EQ(run(c).exit_code, kExitOk);
}

TEST(Run, ReportCommandRedrawsAndReEmits) {
    auto c = parse_config_text(R"({"command": "distill", "teacher": {"preset": "ring"}, "train": {"steps": 0, "n_eval": 100}})");
    const auto dir = scratch("redraw");
    c.output_dir = dir.string();
    run(c);
    fs::remove(dir / "samples.svg");
    auto r = parse_config_text(R"({"command": "report"})");
    r.output_dir = dir.string();
    r.report_input = (dir / "report.json").string();
    const auto res = run(r);
    EXPECT_EQ(res.exit_code, kExitOk);
    EXPECT_TRUE(fs::exists(dir / "samples.svg"));
    EXPECT_EQ(res.report["source_command"], "distill");
}

TEST(Svg, EmptySampleSetHasAxesOnly) {
    const auto svg = svg_scatter(Eigen::MatrixXd(0, 2), GaussianMixture({{1.0, {0.0, 0.0}, {1.0, 1.0}}}));
    std::string why;
    EXPECT_TRUE(well_formed_xml(svg, why)) << why;
    EXPECT_TRUE(circles(svg).empty());
    EXPECT_NE(svg.find("width=\"800\" height=\"800\""), std::string::npos);
    EXPECT_NE(svg.find("<line x1=\"40.00\" y1=\"400.00\" x2=\"760.00\" y2=\"400.00\"/>"), std::string::npos);
}

TEST(Svg, OriginSampleAtCanvasCentre) {
    const auto svg = svg_scatter(Eigen::MatrixXd::Zero(1, 2), GaussianMixture::ring(8, 2.0, 0.1));
    const auto c = circles(svg);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].first, 400.0);
    EXPECT_EQ(c[0].second, 400.0);
}

TEST(Svg, RingSamplesFormEightClusters) {
    const auto ring = GaussianMixture::ring(8, 2.0, 0.1);
    CounterRng rng(8, "svg");
    const auto svg = svg_scatter(ring.sample(rng, 2000), ring);
    std::string why;
    ASSERT_TRUE(well_formed_xml(svg, why)) << why;
    const auto pts = circles(svg);
    ASSERT_EQ(pts.size(), 2000u);
    // recover the extent from the drawn points: every circle lies near a mode
    // centre mapped with the same transform as the crosses
    const std::regex cross(R"re(<line x1="([-0-9.]+)" y1="([-0-9.]+)" x2="[-0-9.]+" y2="[-0-9.]+"/>)re");
    std::vector<std::pair<double, double>> centres;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cross); it != std::sregex_iterator(); ++it)
        if (std::stod((*it)[1]) != 40.0 && std::stod((*it)[1]) != 400.0) centres.emplace_back(std::stod((*it)[1]), std::stod((*it)[2]));
    // each centre contributes two lines; the first starts at (cx-6, cy-6)
    std::vector<std::pair<double, double>> modes;
    for (std::size_t k = 0; k < centres.size(); k += 2) modes.emplace_back(centres[k].first + 6, centres[k].second + 6);
    ASSERT_EQ(modes.size(), 8u);
    std::map<std::size_t, int> hits;
    for (const auto& [x, y] : pts)
        for (std::size_t k = 0; k < modes.size(); ++k)
            if (std::hypot(x - modes[k].first, y - modes[k].second) < 30.0) ++hits[k];
    EXPECT_EQ(hits.size(), 8u);
    for (const auto& [k, n] : hits) EXPECT_GT(n, 150) << "mode " << k;
}

TEST(Svg, OneDimensionalHistogram) {
    CounterRng rng(9, "svg");
    const auto q = GaussianMixture::normal(0.0, 1.0);
    const auto svg = svg_scatter(q.sample(rng, 500), q);
    std::string why;
    EXPECT_TRUE(well_formed_xml(svg, why)) << why;
    EXPECT_NE(svg.find("<polyline"), std::string::npos);
    EXPECT_THROW(svg_scatter(Eigen::MatrixXd::Zero(2, 3), GaussianMixture({{1.0, {0, 0, 0}, {1, 1, 1}}})), ContractError);
}

TEST(Svg, CheckerRejectsMalformed) {
    std::string why;
    EXPECT_FALSE(well_formed_xml("<svg><g></svg></g>", why));
    EXPECT_FALSE(well_formed_xml("<svg a=b/>", why));
    EXPECT_FALSE(well_formed_xml("<svg/><svg/>", why));
    EXPECT_TRUE(well_formed_xml("<?xml version=\"1.0\"?>\n<svg a=\"1\"><g/></svg>\n", why));
}

TEST(Csv, SamplesRoundTrip) {
    Eigen::MatrixXd x(3, 2);
    x << 0.1, -2.5, 1e-300, 3.0, -0.0, 7.25;
    const auto text = samples_csv(x);
    EXPECT_TRUE(text.starts_with("x0,x1\n"));
    EXPECT_EQ(parse_samples_csv(text), x);
}

#ifdef UNIDISTILL_CLI
namespace {

int cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " " + std::string(UNIDISTILL_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
    const auto dir = scratch("cli");
    const auto cfg = dir / "c.json";
    write_text(cfg, R"({"command": "verify-weighting", "divergence": "rkl"})");
    EXPECT_EQ(cli("verify-weighting --config " + cfg.string() + " --out " + (dir / "a").string()), kExitOk);
    EXPECT_TRUE(fs::exists(dir / "a" / "report.json"));
    EXPECT_EQ(cli("verify-weighting"), kExitUsage);
    EXPECT_EQ(cli("frobnicate --config " + cfg.string()), kExitUsage);
    EXPECT_EQ(cli("verify-ratio --config " + cfg.string() + " --out " + (dir / "b").string()), kExitUsage);

    const auto typo = dir / "typo.json";
    write_text(typo, R"({"command": "verify-weighting", "divergnce": "rkl"})");
    EXPECT_EQ(cli("verify-weighting --config " + typo.string()), kExitUsage);

    const auto strict = dir / "strict.json";
    write_text(strict, R"({"command": "verify-weighting", "verify": {"tolerance": 1e-300}})");
    EXPECT_EQ(cli("verify-weighting --config " + strict.string() + " --out " + (dir / "c").string()), kExitAssertion);

    const auto missing = dir / "missing.json";
    write_text(missing, R"({"command": "report", "report_input": "/nonexistent/report.json"})");
    EXPECT_EQ(cli("report --config " + missing.string() + " --out " + (dir / "d").string()), kExitModule);
}

TEST(Cli, OutputDirectoryPrecedence) {
    const auto dir = scratch("cli_out");
    const auto cfg = dir / "c.json";
    write_text(cfg, R"({"command": "verify-weighting", "output_dir": ")" + (dir / "from_config").string() + R"("})");
    EXPECT_EQ(cli("verify-weighting --config " + cfg.string()), kExitOk);
    EXPECT_TRUE(fs::exists(dir / "from_config" / "report.json"));
    EXPECT_EQ(cli("verify-weighting --config " + cfg.string(), "UNI_DISTILL_OUT=" + (dir / "from_env").string()), kExitOk);
    EXPECT_TRUE(fs::exists(dir / "from_env" / "report.json"));
    EXPECT_EQ(cli("verify-weighting --config " + cfg.string() + " --out " + (dir / "from_flag").string(),
                  "UNI_DISTILL_OUT=" + (dir / "ignored").string()),
              kExitOk);
    EXPECT_TRUE(fs::exists(dir / "from_flag" / "report.json"));
    EXPECT_FALSE(fs::exists(dir / "ignored"));
}

TEST(Cli, SeedOverrideIsEchoed) {
    const auto dir = scratch("cli_seed");
    const auto cfg = dir / "c.json";
    write_text(cfg, R"({"command": "distill", "teacher": {"preset": "ring"}, "train": {"steps": 0, "n_eval": 50}})");
    EXPECT_EQ(cli("distill --config " + cfg.string() + " --seed 42 --out " + dir.string()), kExitOk);
    const auto rep = nlohmann::json::parse(read_text(dir / "report.json"));
    EXPECT_EQ(rep["config"]["seed"], 42);
}
#endif
