#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "unidistill/config.hpp"
#include "unidistill/runner.hpp"

int main(int argc, char** argv) {
    using namespace unidistill;
    CLI::App app{"One-step distillation of analytic diffusion teachers with f-divergence expansions"};
    app.require_subcommand(1, 1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    for (const auto& name : command_names()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "run config (JSON)")->required();
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--out", out, "override the output directory");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    RunConfig cfg;
    try {
        auto j = nlohmann::json::parse(read_text(config_path), nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("command") && j["command"] != command)
            throw ValidationError("command", "config says '" + j["command"].get<std::string>() + "' but '" + command +
                                                 "' was requested");
        cfg = load_config(config_path);
        cfg.command = command;
        if (seed) {
            cfg.seed = *seed;
            cfg.train.seed = *seed;
        }
        if (const char* env = std::getenv("UNI_DISTILL_OUT"); env && *env) cfg.output_dir = env;
        if (out) cfg.output_dir = *out;
    } catch (const Error& e) {
        std::cerr << "uni-distill: " << e.kind() << " error: " << e.what() << "\n";
        return kExitUsage;
    }

    const auto res = run(cfg);
    if (!res.report["error"].is_null())
        std::cerr << "uni-distill: " << res.report["error"]["kind"].get<std::string>()
                  << " error: " << res.report["error"]["message"].get<std::string>() << "\n";
    std::size_t failed = 0;
    for (const auto& a : res.report["assertions"])
        if (!a["passed"].get<bool>()) ++failed;
    std::cout << command << ": " << (res.exit_code == kExitOk ? "ok" : "FAILED") << ", "
              << res.report["assertions"].size() - failed << "/" << res.report["assertions"].size()
              << " assertions passed, report " << res.report_path.string() << "\n";
    return res.exit_code;
}
