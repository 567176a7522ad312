#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "massl/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Shared-encoder dual-decoder semi-supervised segmentation experiments"};
    app.require_subcommand(1);
    std::string config_path;
    std::string name;

    const std::pair<const char*, const char*> commands[] = {
        {"synth", "generate the synthetic dataset"},
        {"train", "train one strategy on one fold"},
        {"eval", "score a checkpoint on the fold's test set"},
        {"probe", "linear probe of encoder features on the test set"},
        {"compare", "summarize a sweep table with t-tests"},
        {"sweep", "train and evaluate every strategy on every fold"},
    };
    for (const auto& [cmd, help] : commands) {
        auto* sub = app.add_subcommand(cmd, help);
        sub->add_option("-c,--config", config_path, "JSON config file (defaults when omitted)");
        sub->add_option("-n,--name", name, "override the run name");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : massl::cli::usage;
    }

    massl::RunConfig cfg;
    try {
        if (!config_path.empty()) cfg = massl::parse_config(config_path);
        if (!name.empty()) cfg.name = name;
    } catch (const massl::ConfigError& e) {
        std::cerr << "[massl] config error: " << e.what() << '\n';
        return massl::cli::usage;
    }
    return massl::cli::run(app.get_subcommands().front()->get_name(), cfg);
}
