#include "fwdperf/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Forward-performance contracts: simulation, SPDE solver and Monte-Carlo verification"};
    app.require_subcommand(1, 1);

    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    std::optional<std::string> out;
    bool overwrite = false;

    for (const char* name : {"simulate", "solve-spde", "bs-closed-form", "verify", "all"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config, "scenario file (key = value)");
        sub->add_option("--seed", seed, "master seed, overrides the config");
        sub->add_option("--paths", paths, "Monte-Carlo ensemble size, overrides the config");
        sub->add_option("--out", out, "output directory, overrides the config");
        sub->add_flag("--force-overwrite", overwrite, "replace existing output files");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        fwdperf::Scenario s = config.empty() ? fwdperf::Scenario{} : fwdperf::load_scenario(config);
        if (seed) s.seed = *seed;
        if (paths) s.paths = *paths;
        if (out) s.out = *out;
        s.validate();
        return fwdperf::run_scenario(s, command, overwrite, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
