#include <cstdio>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "ntklab/acceptance.hpp"
#include "ntklab/lab.hpp"

namespace {

// Flags collect raw (key, value) pairs in the order given and are replayed
// through the config parser after the file loads, so precedence is simply:
// defaults, then file, then flags.
struct Overrides {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> entries;
};

void add_common_options(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_path, "flat key = value config file");
    const auto push = [&ov](const char* key) {
        return [&ov, key](const std::string& value) { ov.entries.emplace_back(key, value); };
    };
    cmd->add_option_function<std::string>("--seed", push("seeds"), "seed list N[,N...]");
    cmd->add_option_function<std::string>("--m", push("m"), "width list N[,N...]");
    cmd->add_option_function<std::string>("--eta", push("eta"), "step size, a number or auto");
    cmd->add_option_function<std::string>("--steps", push("steps"), "descent steps");
    cmd->add_option_function<std::string>("--out", push("out"), "output directory");
    cmd->add_option_function<std::string>("--mc-samples", push("mc_samples"),
                                          "samples for the width-limit oracle");
    cmd->add_option_function<std::string>("--cadence", push("cadence"), "logging cadence");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ntklab: a laboratory for shallow neural operators"};
    app.require_subcommand(1);
    Overrides ov;

    CLI::App* kernel =
        app.add_subcommand("kernel", "width-limit Gram matrices and least eigenvalues");
    CLI::App* train = app.add_subcommand("train", "supervised descent with envelope diagnostics");
    CLI::App* pinn_train_cmd =
        app.add_subcommand("pinn-train", "physics-informed descent on the ball problem");
    CLI::App* sweep = app.add_subcommand("sweep-m", "width sweep with fitted scaling slopes");
    CLI::App* report = app.add_subcommand("report", "consolidate summaries in the output dir");
    for (CLI::App* cmd : {kernel, train, pinn_train_cmd, sweep, report})
        add_common_options(cmd, ov);

    CLI::App* selftest = app.add_subcommand("selftest", "run the acceptance criteria");
    std::string filter;
    selftest->add_option("name", filter, "run only criteria whose name contains this");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (selftest->parsed()) {
            const std::vector<ntklab::CriterionResult> results =
                ntklab::run_acceptance(filter, &std::cout);
            int failed = 0;
            for (const ntklab::CriterionResult& r : results)
                if (!r.pass) ++failed;
            std::cout << "selftest: " << results.size() - failed << "/" << results.size()
                      << " criteria passed\n";
            return failed == 0 ? 0 : 3;
        }

        ntklab::ExperimentConfig cfg;
        if (!ov.config_path.empty()) cfg = ntklab::load_config_file(ov.config_path);
        if (train->parsed()) cfg.mode = ntklab::LabMode::Supervised;
        if (pinn_train_cmd->parsed()) cfg.mode = ntklab::LabMode::Pinn;
        for (const auto& [key, value] : ov.entries)
            ntklab::apply_config_entry(cfg, key, value);

        if (report->parsed()) {
            std::cout << ntklab::run_report(cfg);
            return 0;
        }
        nlohmann::ordered_json summary;
        if (kernel->parsed())
            summary = ntklab::run_kernel(cfg);
        else if (train->parsed())
            summary = ntklab::run_train(cfg);
        else if (pinn_train_cmd->parsed())
            summary = ntklab::run_pinn_train(cfg);
        else
            summary = ntklab::run_sweep(cfg);
        std::cout << summary.dump(2) << "\n";
        return 0;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
