// ssmdyn: experiment runner. See README.md for subcommands and config keys.

#include <iostream>

#include <CLI11.hpp>

#include "ssmdyn/cli.hpp"

int main(int argc, char** argv) {
    using ssmdyn::cli::RunSpec;
    CLI::App app{"Selective state space dynamics lab"};
    app.set_version_flag("--version", ssmdyn::cli::kVersion);
    app.require_subcommand(1);

    RunSpec spec;
    std::string config, output;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::vector<std::string> overrides;
    std::string checkpoint, runs;
    bool compare = false, require_faster = false;

    const auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config, "config file")->check(CLI::ExistingFile);
        sub->add_option("-o,--output", output, "output directory")->required();
        sub->add_option("--seed", seed, "random seed (overrides config and SSMDYNLAB_SEED)");
        sub->add_option("--workers", workers, "worker threads");
        sub->add_option("--set", overrides, "config override key=value")->allow_extra_args(false);
    };
    for (const auto& name : ssmdyn::cli::subcommands()) {
        auto* sub = app.add_subcommand(name);
        common(sub);
        if (name == "train") {
            sub->add_flag("--compare", compare, "run Full-FP32 and LoRA-mixed from the same init");
            sub->add_flag("--require-faster", require_faster, "fail when the LoRA run has lower ATPS");
        }
        if (name == "lora-verify") sub->add_option("--checkpoint", checkpoint, "checkpoint with an adapter");
        if (name == "report") sub->add_option("--runs", runs, "directory holding run directories");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    spec.subcommand = app.get_subcommands().front()->get_name();
    spec.config_path = config;
    spec.output_dir = output;
    spec.seed = seed;
    spec.workers = workers;
    spec.overrides = overrides;
    if (compare) spec.overrides.push_back("compare=true");
    if (require_faster) spec.overrides.push_back("require_faster=true");
    if (!checkpoint.empty()) spec.overrides.push_back("checkpoint=" + checkpoint);
    if (!runs.empty()) spec.overrides.push_back("runs=" + runs);

    try {
        return ssmdyn::cli::run(spec);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
