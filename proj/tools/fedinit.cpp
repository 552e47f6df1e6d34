#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedinit/commands.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool resume = false;
    bool allow_negative_beta = false;
    std::optional<std::size_t> jobs;
    std::optional<std::size_t> stop_after;
};

void add_flags(CLI::App* cmd, Flags& f, fedinit::Mode mode) {
    cmd->add_option("--config", f.config, "JSON configuration file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "Override the configuration seed");
    cmd->add_option("--out", f.out, "Output directory (also FEDINIT_OUT_DIR)");
    cmd->add_option("--jobs", f.jobs, "Worker threads (also FEDINIT_JOBS; default: all cores)")
        ->check(CLI::PositiveNumber);
    cmd->add_flag("--allow-negative-beta", f.allow_negative_beta, "Permit beta < 0 for ablations");
    if (mode == fedinit::Mode::run) {
        cmd->add_flag("--resume", f.resume, "Continue from <out>/checkpoint.bin");
        cmd->add_option("--stop-after", f.stop_after, "Stop after this round, leaving a checkpoint");
    }
}

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with relaxed client initialization"};
    app.require_subcommand(1);
    Flags flags;
    struct Sub {
        const char* name;
        const char* help;
        fedinit::Mode mode;
    };
    const Sub subs[] = {
        {"run", "Train one configuration and write rounds.csv and summary.json", fedinit::Mode::run},
        {"sweep", "Run an axis x seed grid and write sweep.csv", fedinit::Mode::sweep},
        {"verify-bounds", "Check the convergence and divergence bounds on a quadratic family",
         fedinit::Mode::verify_bounds},
        {"stability", "Paired runs on datasets differing in one sample", fedinit::Mode::stability},
        {"partition-report", "Label histograms and heterogeneity statistics of the partition",
         fedinit::Mode::partition_report},
    };
    std::optional<fedinit::Mode> chosen;
    for (const auto& s : subs) {
        auto* cmd = app.add_subcommand(s.name, s.help);
        add_flags(cmd, flags, s.mode);
        cmd->callback([&chosen, mode = s.mode] { chosen = mode; });
    }
    CLI11_PARSE(app, argc, argv);

    try {
        fedinit::ExperimentConfig cfg = fedinit::parse_config(fedinit::read_json_file(flags.config), *chosen);
        if (flags.seed) cfg.hp.seed = *flags.seed;
        if (auto dir = env("FEDINIT_OUT_DIR")) cfg.out_dir = *dir;
        if (flags.out) cfg.out_dir = *flags.out;
        if (flags.allow_negative_beta) cfg.hp.allow_negative_beta = true;

        fedinit::CommandOptions opts;
        opts.jobs = fedinit::default_jobs();
        if (auto j = env("FEDINIT_JOBS")) {
            try {
                opts.jobs = std::stoul(*j);
            } catch (const std::exception&) {
                throw fedinit::ConfigError("FEDINIT_JOBS: expected a positive integer, got '" + *j + "'");
            }
            if (opts.jobs == 0) throw fedinit::ConfigError("FEDINIT_JOBS: must be >= 1");
        }
        if (flags.jobs) opts.jobs = *flags.jobs;
        opts.resume = flags.resume;
        opts.stop_after = flags.stop_after;
        return fedinit::dispatch(cfg, opts);
    } catch (const fedinit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return fedinit::kExitConfig;
    } catch (const fedinit::AssumptionError& e) {
        std::cerr << "refused: " << e.what() << "\n";
        return fedinit::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return fedinit::kExitRuntime;
    }
}
