#include "histotype/io.hpp"
#include "histotype/pipeline.hpp"
#include "histotype/synthetic.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>

using namespace histotype;

namespace {

struct StageArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string scorer_cmd;
    bool force = false;
};

void add_stage_options(CLI::App* cmd, StageArgs& args) {
    cmd->add_option("-c,--config", args.config, "Pipeline configuration file")->required();
    cmd->add_option("--override", args.overrides, "Override a configuration key (key=value)");
    cmd->add_option("--scorer-cmd", args.scorer_cmd, "External scorer command; implies scorer.kind=process");
    cmd->add_flag("--force", args.force, "Rerun even when the recorded provenance is up to date");
}

pipeline::Config load_config(const StageArgs& args) {
    auto cfg = pipeline::Config::load(args.config);
    for (const auto& o : args.overrides) cfg.apply_override(o);
    if (!args.scorer_cmd.empty()) {
        cfg.set("scorer.kind", "process");
        cfg.set("scorer.command", args.scorer_cmd);
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_st("histotype"));
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

    CLI::App app{"Molecular subtyping of H&E whole-slide images"};
    app.require_subcommand(1);
    app.fallthrough();
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

    std::map<std::string, StageArgs> stage_args;
    std::vector<std::string> names = pipeline::stage_names();
    names.push_back("run-all");
    for (const auto& name : names) {
        auto* cmd = app.add_subcommand(name, name == "run-all" ? "Run every stage in order" : "Run the " + name + " stage");
        add_stage_options(cmd, stage_args[name]);
    }

    SyntheticCohortConfig gen;
    std::string gen_out;
    bool no_artifacts = false;
    auto* generate = app.add_subcommand("generate", "Write a synthetic cohort with ground truth");
    generate->add_option("-o,--out", gen_out, "Output directory")->required();
    generate->add_option("--wsis-per-class", gen.wsis_per_class, "Slides per class")->check(CLI::PositiveNumber);
    generate->add_option("--slide-size", gen.slide_size, "Slide side length at the working resolution");
    generate->add_option("--signal", gen.signal, "Synthetic scorer signal strength")->check(CLI::Range(0.0, 1.0));
    generate->add_option("--seed", gen.seed, "Generator and pipeline seed");
    generate->add_option("--classes", gen.classes, "Subtypes to include");
    generate->add_flag("--no-artifacts", no_artifacts, "Omit ink, fold and hole artifacts");

    std::string default_out;
    auto* defaults = app.add_subcommand("default-config", "Write the default configuration");
    defaults->add_option("-o,--out", default_out, "Output file (standard output when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::Validation);
    }
    spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        if (generate->parsed()) {
            gen.artifacts = !no_artifacts;
            generate_synthetic_cohort(gen, gen_out);
            return 0;
        }
        if (defaults->parsed()) {
            if (default_out.empty())
                std::cout << pipeline::Config::default_text();
            else
                io::write_file(default_out, pipeline::Config::default_text());
            return 0;
        }
        for (auto& [name, args] : stage_args) {
            if (!app.got_subcommand(name)) continue;
            const auto cfg = load_config(args);
            const pipeline::RunOptions opts{args.force};
            if (name == "run-all")
                pipeline::run_all(cfg, opts);
            else
                pipeline::run_stage(name, cfg, opts);
        }
        return 0;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return static_cast<int>(ErrorKind::Runtime);
    }
}
