#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 usage/config error.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ulab/experiment.hpp"

namespace ulab {

inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"unlearn-lab: multilingual unlearning laboratory"};
    app.require_subcommand(0, 1);

    std::string config_path;
    bool force = false;
    bool print_schema = false;
    std::optional<std::size_t> jobs_override;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> out_override;

    app.add_flag("--print-schema", print_schema, "print the config JSON schema and exit");

    for (const char* name : {"gen-data", "finetune", "unlearn", "eval", "analyze", "report"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "experiment config JSON")->required();
        sub->add_flag("--force", force, "re-run even if the stage is up to date");
        sub->add_option("--jobs", jobs_override, "max concurrent jobs");
        sub->add_option("--seed", seed_override, "override the global seed");
        sub->add_option("--out", out_override, "override the workspace directory");
    }

    // CLI11 wants argv-style reversed input
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        std::ostringstream os;
        int code = app.exit(e, os, os);
        std::cerr << os.str();
        return code == 0 ? 0 : 2;
    }

    if (print_schema) {
        std::cout << experiment_config_schema() << '\n';
        return 0;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help() << '\n';
        return 2;
    }
    std::string stage = app.get_subcommands().front()->get_name();

    try {
        std::ifstream in(config_path);
        if (!in) {
            std::cerr << "error: cannot open config file: " << config_path << '\n';
            return 2;
        }
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            std::cerr << "error: config " << config_path << " is not valid JSON: " << e.what()
                      << '\n';
            return 2;
        }
        ExperimentConfig cfg = parse_experiment_config(j);
        if (jobs_override) cfg.jobs = *jobs_override;
        if (seed_override) cfg.seed = *seed_override;
        if (out_override) cfg.workspace = *out_override;
        return run_stage(stage, cfg, force);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const vocab_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace ulab
