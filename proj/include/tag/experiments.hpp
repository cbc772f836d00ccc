#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tag/metrics.hpp"

namespace tag {

/// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kCodeVersion = "tag 0.1.0";

const std::vector<std::string>& experiment_names();

/// Every key an experiment accepts, with its default value.
nlohmann::json default_config(const std::string& experiment);

/// Overlays `overrides` on `base`; nested objects merge key by key and keys
/// absent from `base` are rejected.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides);

/// Range and shape checks beyond what merging enforces.
void validate_config(const nlohmann::json& config);

/// config_hash with "workers" dropped, since the pool size never changes results.
std::string experiment_hash(const nlohmann::json& config);

struct Check {
    std::string name;
    /// Measured quantity and the bound it is compared against.
    double value = 0.0;
    std::string relation;
    double threshold = 0.0;
    bool passed = false;
    nlohmann::json detail = nlohmann::json::object();

    nlohmann::json to_json() const;
};

Check make_check(std::string name, double value, const std::string& relation, double threshold,
                 nlohmann::json detail = nlohmann::json::object());

/// A CSV ledger with fixed columns; cells are formatted from JSON values.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    void add(const nlohmann::json& row);
    void write_csv(std::ostream& out) const;
};

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct Plot {
    std::string name;
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
};

struct ExperimentOutput {
    std::string experiment;
    nlohmann::json config;
    std::vector<Check> checks;
    Table results;
    std::vector<RunSummary> summaries;
    /// Experiment-specific summary for report.json.
    nlohmann::json report = nlohmann::json::object();
    std::vector<Plot> plots;
    /// Cells or stages that raised; the rest of the grid still ran.
    std::vector<std::string> errors;
    bool diverged = false;

    bool passed() const;
    nlohmann::json report_json() const;
};

struct RunContext {
    /// When set, trajectory CSVs are written here, one file per sampled cell.
    std::filesystem::path trajectory_dir;
    /// Progress lines; null silences them.
    std::ostream* log = nullptr;
};

/// Dispatches on config["experiment"]; `config` must already be merged with defaults.
ExperimentOutput run_experiment(const nlohmann::json& config, const RunContext& ctx = {});

ExperimentOutput run_verify(const nlohmann::json& config, const RunContext& ctx = {});
ExperimentOutput run_toy(const nlohmann::json& config, const RunContext& ctx = {});
ExperimentOutput run_corrupted(const nlohmann::json& config, const RunContext& ctx = {});
ExperimentOutput run_multicond(const nlohmann::json& config, const RunContext& ctx = {});
ExperimentOutput run_escape(const nlohmann::json& config, const RunContext& ctx = {});
ExperimentOutput run_fewstep(const nlohmann::json& config, const RunContext& ctx = {});

// Individual identity and property checks run by `verify`.

/// |tls_analytic - tls_decomposed| over random instances. With `corrupt_gamma`
/// the decomposition is recomputed with perturbed posterior weights.
Check check_tls_decomposition(int instances, std::uint64_t seed, bool corrupt_gamma = false);
/// modified_score against s_k - sum_i gamma_i s_i from independently built marginals.
Check check_modified_score(int instances, std::uint64_t seed);
/// Discrete TLS error against the continuous-time limit over T in {25, 50, 100, 200}.
Check check_continuous_limit(int instances, std::uint64_t seed);
/// Tweedie estimate with the exact score against the closed-form posterior mean.
Check check_tweedie(int instances, std::uint64_t seed);
/// MLP parameter and input gradients against central differences.
Check check_mlp_gradients(int instances, std::uint64_t seed);
/// Guidance loss gradients against central differences.
Check check_guidance_gradients(int instances, std::uint64_t seed);
/// Zero-strength samplers against their base samplers, bitwise.
Check check_reductions(std::uint64_t seed);
/// bound(0) = 0 and bound(2v) = 4 bound(v) under matched seeds.
Check check_drift_bound(std::uint64_t seed);

} // namespace tag
