#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "svg.hpp"
#include "tag/experiments.hpp"
#include "tag/sampler.hpp"

namespace {

using json = nlohmann::json;

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kDiverged = 3 };

json load_config_file(const std::string& path, const std::string& experiment)
{
    std::ifstream f(path);
    if (!f) {
        throw tag::ConfigError("cannot open config file: " + path);
    }
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw tag::ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    // a manifest from an earlier run replays its config
    if (j.is_object() && j.contains("code_version") && j.contains("config")) {
        j = j.at("config");
    }
    if (j.is_object() && j.contains("experiment") && j.at("experiment") != experiment) {
        throw tag::ConfigError("config is for experiment " + j.at("experiment").dump() + ", not " + experiment);
    }
    return j;
}

void write_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream f(path);
    if (!f) {
        throw std::runtime_error("cannot write " + path.string());
    }
    f << text;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Temporal alignment guidance laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    int workers = 1;
    std::vector<double> omega, sigma;
    bool plot = false, trajectories = false, quiet = false, corrupt_gamma = false;

    for (const auto& name : tag::experiment_names()) {
        auto* sub = app.add_subcommand(name, "Run the " + name + " experiment");
        sub->add_option("--config", config_path, "JSON configuration file (or a manifest to replay)");
        sub->add_option("--seed", seed, "Master seed");
        sub->add_option("--out", out_dir, "Output directory (default: out/<experiment>)");
        sub->add_option("--workers", workers, "Worker threads for trajectory batches")->check(CLI::PositiveNumber);
        sub->add_option("--omega", omega, "Comma-separated TAG strengths")->delimiter(',');
        sub->add_option("--sigma", sigma, "Comma-separated corruption strengths (corrupted only)")->delimiter(',');
        sub->add_flag("--plot", plot, "Write SVG line plots");
        sub->add_flag("--trajectories", trajectories, "Write per-cell trajectory CSVs");
        sub->add_flag("--quiet", quiet, "No progress output");
        if (name == "verify") {
            sub->add_flag("--debug-corrupt-gamma", corrupt_gamma, "Perturb posterior weights in the decomposition check");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }
    const std::string experiment = app.get_subcommands().front()->get_name();
    const auto* sub = app.get_subcommands().front();

    json config;
    try {
        config = tag::default_config(experiment);
        if (!config_path.empty()) {
            config = tag::merge_config(config, load_config_file(config_path, experiment));
        }
        json overrides = json::object();
        if (sub->count("--seed")) {
            overrides["seed"] = seed;
        }
        if (sub->count("--workers")) {
            overrides["workers"] = workers;
        }
        if (sub->count("--omega")) {
            overrides["omega"] = omega;
        }
        if (sub->count("--sigma")) {
            if (experiment != "corrupted") {
                throw tag::ConfigError("--sigma applies only to the corrupted experiment");
            }
            overrides["sigma"] = sigma;
        }
        if (corrupt_gamma) {
            overrides["debug_corrupt_gamma"] = true;
        }
        config = tag::merge_config(config, overrides);
        tag::validate_config(config);
    } catch (const tag::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfigError;
    }

    const std::filesystem::path out = out_dir.empty() ? std::filesystem::path("out") / experiment : std::filesystem::path(out_dir);
    tag::RunContext ctx;
    ctx.log = quiet ? nullptr : &std::cerr;
    if (trajectories) {
        ctx.trajectory_dir = out / "trajectories";
    }

    tag::ExperimentOutput result;
    try {
        std::filesystem::create_directories(out);
        result = tag::run_experiment(config, ctx);
    } catch (const tag::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfigError;
    } catch (const tag::NumericalError& e) {
        std::cerr << "numerical divergence: " << e.what() << '\n';
        return kDiverged;
    } catch (const tag::TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }

    std::vector<std::string> outputs{"results.csv", "report.json", "manifest.json"};
    try {
        std::ostringstream csv;
        result.results.write_csv(csv);
        write_file(out / "results.csv", csv.str());
        write_file(out / "report.json", result.report_json().dump(2) + "\n");
        if (plot) {
            for (const auto& p : result.plots) {
                std::ostringstream svg;
                tag::write_svg(svg, p);
                write_file(out / (p.name + ".svg"), svg.str());
                outputs.push_back(p.name + ".svg");
            }
        }
        const json manifest = {{"code_version", tag::kCodeVersion},
                               {"experiment", experiment},
                               {"config", config},
                               {"config_hash", tag::experiment_hash(config)},
                               {"seed", config.at("seed")},
                               {"outputs", outputs}};
        write_file(out / "manifest.json", manifest.dump(2) + "\n");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }

    for (const auto& c : result.checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.value << ' ' << c.relation << ' '
                  << c.threshold << '\n';
    }
    for (const auto& e : result.errors) {
        std::cout << "ERROR " << e << '\n';
    }
    if (result.diverged) {
        return kDiverged;
    }
    return result.passed() ? kOk : kCheckFailed;
}
