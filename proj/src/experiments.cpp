#include "tag/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tag/guidance.hpp"

namespace tag {

namespace {

using json = nlohmann::json;

json toy_mixture_json()
{
    return {{"weights", {0.5, 0.5}}, {"means", {{10.0, 10.0}, {-10.0, -10.0}}}, {"variances", {1.0, 1.0}}};
}

json default_schedule_json()
{
    return {{"steps", 100}, {"beta_min", 1e-3}, {"beta_max", 0.2}};
}

json arch_json()
{
    return {{"hidden", {64, 64, 64}},
            {"activation", "tanh"},
            {"epochs", 100},
            {"batch_size", 128},
            {"learning_rate", 1e-3}};
}

Mixture mixture_from(const json& config)
{
    try {
        return Mixture::from_json(config.at("mixture"));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("mixture: ") + e.what());
    }
}

NoiseSchedule schedule_from(const json& config)
{
    const auto& s = config.at("schedule");
    try {
        return linear_beta_schedule(s.at("steps").get<int>(), s.at("beta_min").get<double>(),
                                    s.at("beta_max").get<double>());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
}

std::string format_number(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string csv_cell(const json& v)
{
    if (v.is_null()) {
        return "";
    }
    if (v.is_boolean()) {
        return v.get<bool>() ? "true" : "false";
    }
    if (v.is_number_integer() || v.is_number_unsigned()) {
        return v.dump();
    }
    if (v.is_number()) {
        return format_number(v.get<double>());
    }
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    if (s.find_first_of(",\"\n") != std::string::npos) {
        std::string quoted = "\"";
        for (char c : s) {
            quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
        }
        return quoted + "\"";
    }
    return s;
}

/// json(NaN) dumps as null; keep metrics that way rather than crashing the dump.
json number(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

std::string label(double v)
{
    return format_number(v);
}

MlpArch arch_from(const json& j)
{
    return {j.at("hidden").get<std::vector<int>>(), parse_activation(j.at("activation").get<std::string>())};
}

TrainConfig train_from(const json& j)
{
    return {j.at("epochs").get<int>(), j.at("learning_rate").get<double>(), j.at("batch_size").get<int>()};
}

void log_line(const RunContext& ctx, const std::string& line)
{
    if (ctx.log) {
        *ctx.log << line << '\n';
    }
}

void maybe_write_trajectories(const RunContext& ctx, const TrajectorySet& set, const std::string& run_id,
                              const std::vector<TrajectoryColumn>& extra = {})
{
    if (ctx.trajectory_dir.empty()) {
        return;
    }
    std::filesystem::create_directories(ctx.trajectory_dir);
    std::ofstream f(ctx.trajectory_dir / ("trajectories-" + run_id + ".csv"));
    write_trajectory_csv(f, set, run_id, extra);
}

std::string cell_hash(const json& config, const json& cell)
{
    json c = config;
    c.erase("workers");
    return config_hash({{"config", c}, {"cell", cell}});
}

/// Runs one grid cell; numerical failures are recorded and the grid goes on.
template <typename Fn>
bool guarded(ExperimentOutput& out, const std::string& run_id, Fn&& fn)
{
    try {
        fn();
        return true;
    } catch (const NumericalError& e) {
        out.diverged = true;
        out.errors.push_back(run_id + ": " + e.what());
    } catch (const TrainingDiverged& e) {
        out.diverged = true;
        out.errors.push_back(run_id + ": " + e.what());
    }
    return false;
}

std::vector<std::string> summary_columns()
{
    return {"run_id", "time_gap_mean", "sliced_w1", "nll", "config_hash", "seed", "projections", "subsample_cap"};
}

json summary_row(const RunSummary& s)
{
    return {{"run_id", s.run_id},           {"time_gap_mean", number(s.time_gap_mean)},
            {"sliced_w1", number(s.sliced_w1)}, {"nll", number(s.nll)},
            {"config_hash", s.config_hash}, {"seed", s.seed},
            {"projections", s.projections}, {"subsample_cap", s.subsample_cap}};
}

RunSummary summarize(const std::string& run_id, const TrajectorySet& set, const Matrix* reference, const Mixture* data,
                     std::uint64_t proj_seed, const std::string& hash)
{
    RunSummary s;
    s.run_id = run_id;
    s.seed = set.seed;
    s.config_hash = hash;
    s.time_gap_mean = NAN;
    if (!set.predicted_times.empty()) {
        s.time_gap_mean = time_gap(set);
        const std::size_t steps = set.times.size() - 1;
        s.time_gap_profile.assign(steps, 0.0);
        for (std::size_t i = 0; i < steps; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < set.predicted_times[i].size(); ++j) {
                sum += std::abs(set.predicted_times[i][j] - set.times[i]);
            }
            s.time_gap_profile[i] = sum / static_cast<double>(set.predicted_times[i].size());
        }
    }
    s.sliced_w1 = reference ? sliced_w1(set.terminal(), *reference, kSlicedProjections, proj_seed) : NAN;
    s.nll = data ? mixture_nll(*data, set.terminal()) : NAN;
    return s;
}

json omega_list(const json& config, const char* key = "omega")
{
    return config.at(key);
}

} // namespace

const std::vector<std::string>& experiment_names()
{
    static const std::vector<std::string> names{"verify", "toy", "corrupted", "multicond", "escape", "fewstep"};
    return names;
}

json default_config(const std::string& experiment)
{
    json c = {{"experiment", experiment}, {"seed", 0}, {"workers", 1}};
    if (experiment == "verify") {
        c["instances"] = 1000;
        c["continuous_instances"] = 100;
        c["gradient_instances"] = 50;
        c["debug_corrupt_gamma"] = false;
    } else if (experiment == "toy") {
        c["mixture"] = toy_mixture_json();
        c["schedule"] = default_schedule_json();
        c["train_samples"] = 40000;
        c["score_model"] = arch_json();
        c["time_predictor"] = arch_json();
        c["drift"] = -0.01;
        c["omega_kind"] = "one_minus_abar";
        c["omega"] = {0.5, 1.0, 2.0, 4.0};
        c["samples"] = 2000;
        c["reference_samples"] = 4000;
        c["monitor"] = true;
        c["no_tag_min_w1"] = 4.0;
        c["tag_max_w1"] = 2.8;
        c["noise_band"] = 0.5;
    } else if (experiment == "corrupted") {
        c["mixture"] = toy_mixture_json();
        c["schedule"] = default_schedule_json();
        c["sigma"] = {0.1, 0.2, 0.5};
        c["omega_kind"] = "one_minus_abar";
        c["omega"] = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};
        c["check_sigma"] = 0.2;
        c["samples"] = 500;
        c["reference_samples"] = 2000;
    } else if (experiment == "multicond") {
        c["mixture"] = toy_mixture_json();
        c["schedule"] = default_schedule_json();
        c["conditions"] = {
            {{"kind", "coordinate"}, {"params", {{"index", 0}}}, {"target", 10.0}, {"loss", "squared"}},
            {{"kind", "coordinate"}, {"params", {{"index", 1}}}, {"target", 10.0}, {"loss", "squared"}}};
        c["rho_kind"] = "one_minus_abar";
        c["rho"] = 0.2;
        c["omega_kind"] = "one_minus_abar";
        c["omega"] = {1.0};
        c["variants"] = {"single_predictor", "uncond_predictor"};
        c["eta_sq"] = nullptr;
        c["eta_tilde_sq"] = nullptr;
        c["tolerance"] = 1.0;
        c["samples"] = 400;
        c["ddim_steps"] = 100;
        c["equivalence_instances"] = 100;
    } else if (experiment == "escape") {
        const double trap = 2e-4;
        c["mixture"] = {{"weights", {(1.0 - trap) / 2.0, trap, (1.0 - trap) / 2.0}},
                        {"means", {{-7.0}, {0.0}, {7.0}}},
                        {"variances", {1.0, 1.0, 1.0}}};
        c["schedule"] = default_schedule_json();
        c["k"] = 1;
        c["h"] = 0.01;
        c["max_steps"] = 20000;
        c["trials"] = 500;
        c["epsilon"] = 0.0;
        c["init_mean"] = {0.0};
        c["init_std"] = 0.1;
        c["alpha"] = 0.05;
    } else if (experiment == "fewstep") {
        c["mixture"] = toy_mixture_json();
        c["schedule"] = default_schedule_json();
        c["steps"] = {1, 3, 5, 10, 50};
        c["omega_kind"] = "constant";
        c["omega"] = {0.25, 0.5, 1.0, 2.0};
        c["clamp_final_target"] = true;
        c["samples"] = 1000;
        c["reference_samples"] = 2000;
        c["check_max_steps"] = 5;
    } else {
        throw ConfigError("unknown experiment: " + experiment);
    }
    return c;
}

json merge_config(json base, const json& overrides)
{
    if (!overrides.is_object()) {
        throw ConfigError("configuration must be a JSON object");
    }
    for (const auto& [key, value] : overrides.items()) {
        if (!base.contains(key)) {
            throw ConfigError("unknown configuration key: " + key);
        }
        auto& slot = base[key];
        if (slot.is_object() && value.is_object() && key != "mixture") {
            slot = merge_config(slot, value);
        } else {
            slot = value;
        }
    }
    return base;
}

std::string experiment_hash(const json& config)
{
    json c = config;
    c.erase("workers");
    return config_hash(c);
}

void validate_config(const json& c)
{
    const auto fail = [](const std::string& what) { throw ConfigError(what); };
    try {
        const auto exp = c.at("experiment").get<std::string>();
        if (std::find(experiment_names().begin(), experiment_names().end(), exp) == experiment_names().end()) {
            fail("unknown experiment: " + exp);
        }
        c.at("seed").get<std::uint64_t>();
        if (c.at("workers").get<int>() < 1) {
            fail("workers must be >= 1");
        }
        if (c.contains("mixture")) {
            mixture_from(c);
        }
        if (c.contains("schedule")) {
            schedule_from(c);
        }
        for (const char* key : {"samples", "reference_samples", "train_samples", "instances", "continuous_instances",
                                "gradient_instances", "trials", "max_steps", "equivalence_instances"}) {
            if (c.contains(key) && c.at(key).get<int>() < 1) {
                fail(std::string(key) + " must be >= 1");
            }
        }
        for (const char* key : {"omega", "sigma", "steps", "variants"}) {
            if (c.contains(key) && (!c.at(key).is_array() || c.at(key).empty())) {
                fail(std::string(key) + " must be a nonempty list");
            }
        }
        if (c.contains("omega_kind")) {
            parse_omega_kind(c.at("omega_kind").get<std::string>());
        }
        if (c.contains("rho_kind")) {
            parse_omega_kind(c.at("rho_kind").get<std::string>());
        }
        for (const char* key : {"score_model", "time_predictor"}) {
            if (c.contains(key)) {
                const auto& a = c.at(key);
                arch_from(a);
                if (a.at("epochs").get<int>() < 1 || !(a.at("learning_rate").get<double>() > 0.0)) {
                    fail(std::string(key) + ": epochs and learning_rate must be positive");
                }
            }
        }
        if (exp == "corrupted") {
            const auto sig = c.at("sigma").get<std::vector<double>>();
            if (std::any_of(sig.begin(), sig.end(), [](double s) { return !(s >= 0.0); })) {
                fail("sigma values must be >= 0");
            }
            if (std::find(sig.begin(), sig.end(), c.at("check_sigma").get<double>()) == sig.end()) {
                fail("check_sigma must be one of the sigma values");
            }
            const auto om = c.at("omega").get<std::vector<double>>();
            if (std::find(om.begin(), om.end(), 0.0) == om.end()) {
                fail("corrupted: the omega grid must contain 0");
            }
        }
        if (exp == "multicond") {
            if (c.at("conditions").size() != 2) {
                fail("multicond needs exactly two conditions");
            }
            const int dim = static_cast<int>(mixture_from(c).dim());
            for (const auto& cond : c.at("conditions")) {
                ConditionSpec::from_json(cond, dim);
            }
            for (const auto& v : c.at("variants")) {
                parse_multicond_variant(v.get<std::string>());
            }
            const int steps = c.at("ddim_steps").get<int>();
            if (steps < 1 || steps > schedule_from(c).steps()) {
                fail("ddim_steps must lie in [1, T]");
            }
        }
        if (exp == "fewstep") {
            const int T = schedule_from(c).steps();
            for (int s : c.at("steps").get<std::vector<int>>()) {
                if (s < 1 || s > T) {
                    fail("fewstep: step counts must lie in [1, T]");
                }
            }
        }
        if (exp == "escape") {
            const int k = c.at("k").get<int>();
            if (k < 1 || k > schedule_from(c).steps()) {
                fail("escape: k must lie in [1, T]");
            }
            if (static_cast<Eigen::Index>(c.at("init_mean").size()) != mixture_from(c).dim()) {
                fail("escape: init_mean must have the data dimension");
            }
            if (!(c.at("h").get<double>() > 0.0)) {
                fail("escape: h must be positive");
            }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

json Check::to_json() const
{
    return {{"name", name}, {"value", number(value)}, {"relation", relation}, {"threshold", threshold},
            {"passed", passed}, {"detail", detail}};
}

Check make_check(std::string name, double value, const std::string& relation, double threshold, json detail)
{
    Check c;
    c.name = std::move(name);
    c.value = value;
    c.relation = relation;
    c.threshold = threshold;
    c.detail = std::move(detail);
    if (relation == "<") {
        c.passed = value < threshold;
    } else if (relation == "<=") {
        c.passed = value <= threshold;
    } else if (relation == ">") {
        c.passed = value > threshold;
    } else if (relation == ">=") {
        c.passed = value >= threshold;
    } else if (relation == "==") {
        c.passed = value == threshold;
    } else {
        throw std::invalid_argument("make_check: unknown relation " + relation);
    }
    return c;
}

void Table::add(const json& row)
{
    std::vector<std::string> cells;
    for (const auto& col : columns) {
        cells.push_back(row.contains(col) ? csv_cell(row.at(col)) : "");
    }
    rows.push_back(std::move(cells));
}

void Table::write_csv(std::ostream& out) const
{
    for (std::size_t i = 0; i < columns.size(); ++i) {
        out << (i ? "," : "") << columns[i];
    }
    out << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            out << (i ? "," : "") << row[i];
        }
        out << '\n';
    }
}

bool ExperimentOutput::passed() const
{
    return !diverged && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

json ExperimentOutput::report_json() const
{
    json checks_json = json::array();
    for (const auto& c : checks) {
        checks_json.push_back(c.to_json());
    }
    json runs = json::array();
    for (const auto& s : summaries) {
        runs.push_back(s.to_json());
    }
    return {{"experiment", experiment}, {"config_hash", experiment_hash(config)}, {"seed", config.at("seed")},
            {"passed", passed()},       {"diverged", diverged},               {"errors", errors},
            {"checks", checks_json},    {"runs", runs},                        {"results", report}};
}

ExperimentOutput run_experiment(const json& config, const RunContext& ctx)
{
    const auto exp = config.at("experiment").get<std::string>();
    if (exp == "verify") {
        return run_verify(config, ctx);
    }
    if (exp == "toy") {
        return run_toy(config, ctx);
    }
    if (exp == "corrupted") {
        return run_corrupted(config, ctx);
    }
    if (exp == "multicond") {
        return run_multicond(config, ctx);
    }
    if (exp == "escape") {
        return run_escape(config, ctx);
    }
    if (exp == "fewstep") {
        return run_fewstep(config, ctx);
    }
    throw ConfigError("unknown experiment: " + exp);
}

ExperimentOutput run_toy(const json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "toy";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const int workers = config.at("workers").get<int>();
    const auto gm = mixture_from(config);
    const auto sched = schedule_from(config);
    const auto fam = std::make_shared<const Family>(gm, sched);
    const int n = config.at("samples").get<int>();

    Rng data_rng(derive_seed(seed, 10));
    const Matrix data = sample(gm, config.at("train_samples").get<int>(), data_rng);
    Rng ref_rng(derive_seed(seed, 11));
    const Matrix reference = sample(gm, config.at("reference_samples").get<int>(), ref_rng);

    TrainResult<float> score_fit, time_fit;
    json training;
    const bool trained = guarded(out, "training", [&] {
        log_line(ctx, "toy: training score model");
        score_fit = train_score_model<float>(data, sched, arch_from(config.at("score_model")),
                                             train_from(config.at("score_model")), derive_seed(seed, 12));
        log_line(ctx, "toy: training time predictor");
        time_fit = train_time_predictor<float>(data, sched, arch_from(config.at("time_predictor")),
                                               train_from(config.at("time_predictor")), derive_seed(seed, 13));
    });
    if (!trained) {
        out.report["training"] = {{"diverged", true}};
        return out;
    }
    const double mean_acc = std::accumulate(time_fit.step_accuracy.begin(), time_fit.step_accuracy.end(), 0.0) /
                            static_cast<double>(time_fit.step_accuracy.size());
    training = {{"score_final_loss", score_fit.loss_history.back()},
                {"score_first_loss", score_fit.loss_history.front()},
                {"time_final_loss", time_fit.loss_history.back()},
                {"time_first_loss", time_fit.loss_history.front()},
                {"time_mean_step_accuracy", mean_acc}};
    out.report["training"] = training;

    const auto learned = ScoreSource::learned(std::move(score_fit.model), sched);
    const auto predictor = TimeSource::predictor(std::move(time_fit.model));
    const auto oracle = TimeSource::analytic(fam);
    const double drift_coef = config.at("drift").get<double>();
    const PointDrift drift = [drift_coef](const Vector& x, int) -> Vector { return drift_coef * x; };
    const auto kind = parse_omega_kind(config.at("omega_kind").get<std::string>());
    const bool monitor = config.at("monitor").get<bool>();
    const auto sample_seed = derive_seed(seed, 20);

    auto cols = summary_columns();
    cols.insert(cols.begin() + 1, {"drift", "tls", "omega"});
    cols.push_back("error");
    out.results.columns = cols;

    const auto run_cell = [&](const std::string& run_id, bool with_drift, const TimeSource* tls, double omega) {
        json cell = {{"run_id", run_id}, {"drift", with_drift ? drift_coef : 0.0},
                     {"tls", tls == nullptr ? "none" : (tls == &oracle ? "analytic" : "predictor")}, {"omega", omega}};
        double w1 = NAN;
        const bool ok = guarded(out, run_id, [&] {
            log_line(ctx, "toy: " + run_id);
            SampleOptions o;
            o.workers = workers;
            if (with_drift) {
                o.drift = drift;
            }
            o.tls = tls;
            o.omega = {kind, omega};
            o.monitor = monitor ? &oracle : nullptr;
            const auto set = sample(learned, o, n, sample_seed);
            maybe_write_trajectories(ctx, set, run_id);
            auto s = summarize(run_id, set, &reference, &gm, seed, cell_hash(config, cell));
            w1 = s.sliced_w1;
            cell.update(summary_row(s));
            out.summaries.push_back(std::move(s));
        });
        if (!ok) {
            cell["error"] = out.errors.back();
        }
        out.results.add(cell);
        return w1;
    };

    const double clean = run_cell("clean", false, nullptr, 0.0);
    const double no_tag = run_cell("drift-notag", true, nullptr, 0.0);
    const auto omegas = omega_list(config).get<std::vector<double>>();
    Series pred_series{"TAG (time predictor)", {}, {}}, oracle_series{"TAG (analytic TLS)", {}, {}};
    double best_pred = INFINITY, best_oracle = INFINITY, best_omega = NAN;
    for (double w : omegas) {
        const double a = run_cell("drift-tag-predictor-" + label(w), true, &predictor, w);
        const double b = run_cell("drift-tag-analytic-" + label(w), true, &oracle, w);
        pred_series.x.push_back(w);
        pred_series.y.push_back(a);
        oracle_series.x.push_back(w);
        oracle_series.y.push_back(b);
        if (a < best_pred) {
            best_pred = a;
            best_omega = w;
        }
        best_oracle = std::min(best_oracle, b);
    }
    out.report["clean_w1"] = number(clean);
    out.report["no_tag_w1"] = number(no_tag);
    out.report["best_omega"] = number(best_omega);
    out.report["best_tag_w1"] = number(best_pred);
    out.report["best_analytic_tag_w1"] = number(best_oracle);

    out.checks.push_back(make_check("no_tag_w1", no_tag, ">=", config.at("no_tag_min_w1").get<double>()));
    out.checks.push_back(make_check("best_tag_w1", best_pred, "<=", config.at("tag_max_w1").get<double>(),
                                    {{"omega", number(best_omega)}}));
    const double band = config.at("noise_band").get<double>();
    out.checks.push_back(make_check("analytic_tls_vs_predictor", best_oracle, "<=", best_pred + band,
                                    {{"noise_band", band}}));

    Plot p{"toy_w1", "Terminal sliced W1 under drift", "omega", "sliced W1", {pred_series, oracle_series}};
    p.series.push_back({"no TAG", {omegas.front(), omegas.back()}, {no_tag, no_tag}});
    p.series.push_back({"no drift", {omegas.front(), omegas.back()}, {clean, clean}});
    out.plots.push_back(std::move(p));
    return out;
}

ExperimentOutput run_corrupted(const json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "corrupted";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const auto gm = mixture_from(config);
    const auto fam = std::make_shared<const Family>(gm, schedule_from(config));
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const int n = config.at("samples").get<int>();
    Rng ref_rng(derive_seed(seed, 11));
    const Matrix reference = sample(gm, config.at("reference_samples").get<int>(), ref_rng);
    const auto kind = parse_omega_kind(config.at("omega_kind").get<std::string>());
    auto omegas = config.at("omega").get<std::vector<double>>();
    std::sort(omegas.begin(), omegas.end());
    const auto sigmas = config.at("sigma").get<std::vector<double>>();
    const double check_sigma = config.at("check_sigma").get<double>();

    auto cols = summary_columns();
    cols.insert(cols.begin() + 1, {"sigma", "omega"});
    cols.push_back("error");
    out.results.columns = cols;

    Plot tg_plot{"corrupted_time_gap", "Time-Gap under corrupted reverse steps", "omega", "mean Time-Gap", {}};
    Plot w1_plot{"corrupted_w1", "Terminal sliced W1 under corrupted reverse steps", "omega", "sliced W1", {}};
    json grid = json::array();
    std::vector<double> check_tg;
    for (double sigma : sigmas) {
        Series tg{"sigma=" + label(sigma), {}, {}}, w1{"sigma=" + label(sigma), {}, {}};
        std::vector<double> gaps;
        for (double w : omegas) {
            const std::string run_id = "sigma" + label(sigma) + "-omega" + label(w);
            json cell = {{"run_id", run_id}, {"sigma", sigma}, {"omega", w}};
            double gap = NAN;
            const bool ok = guarded(out, run_id, [&] {
                log_line(ctx, "corrupted: " + run_id);
                SampleOptions o;
                o.workers = config.at("workers").get<int>();
                o.sigma = sigma;
                o.omega = {kind, w};
                o.tls = &tls;
                o.monitor = &tls;
                const auto set = sample(src, o, n, derive_seed(seed, 20));
                maybe_write_trajectories(ctx, set, run_id);
                auto s = summarize(run_id, set, &reference, &gm, seed, cell_hash(config, cell));
                gap = s.time_gap_mean;
                tg.x.push_back(w);
                tg.y.push_back(s.time_gap_mean);
                w1.x.push_back(w);
                w1.y.push_back(s.sliced_w1);
                cell.update(summary_row(s));
                out.summaries.push_back(std::move(s));
            });
            if (!ok) {
                cell["error"] = out.errors.back();
            }
            gaps.push_back(gap);
            out.results.add(cell);
        }
        grid.push_back({{"sigma", sigma}, {"omega", omegas}, {"time_gap", [&] {
                            json a = json::array();
                            for (double g : gaps) {
                                a.push_back(number(g));
                            }
                            return a;
                        }()}});
        if (sigma == check_sigma) {
            check_tg = gaps;
        }
        tg_plot.series.push_back(std::move(tg));
        w1_plot.series.push_back(std::move(w1));
    }
    out.report["grid"] = grid;

    // trend at the check sigma: best grid omega versus omega = 0, and the rank
    // correlation over omegas up to the Time-Gap minimum
    std::size_t best = 0;
    for (std::size_t i = 1; i < check_tg.size(); ++i) {
        if (check_tg[i] < check_tg[best]) {
            best = i;
        }
    }
    const auto zero = static_cast<std::size_t>(std::find(omegas.begin(), omegas.end(), 0.0) - omegas.begin());
    const double tg0 = check_tg.empty() ? NAN : check_tg[zero];
    const double tg_best = check_tg.empty() ? NAN : check_tg[best];
    out.checks.push_back(make_check("time_gap_best_vs_zero", tg_best, "<", tg0,
                                    {{"sigma", check_sigma}, {"best_omega", omegas[best]}}));
    double rho = NAN;
    if (best + 1 >= 2) {
        const std::vector<double> w(omegas.begin(), omegas.begin() + static_cast<std::ptrdiff_t>(best) + 1);
        const std::vector<double> g(check_tg.begin(), check_tg.begin() + static_cast<std::ptrdiff_t>(best) + 1);
        rho = spearman(w, g);
    }
    out.checks.push_back(make_check("spearman_pre_saturation", rho, "<", 0.0,
                                    {{"sigma", check_sigma}, {"omega_range", {omegas.front(), omegas[best]}}}));
    out.report["check_sigma"] = check_sigma;
    out.report["best_omega"] = omegas[best];
    out.report["spearman_pre_saturation"] = number(rho);
    out.plots.push_back(std::move(tg_plot));
    out.plots.push_back(std::move(w1_plot));
    return out;
}

ExperimentOutput run_multicond(const json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "multicond";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const auto gm = mixture_from(config);
    const auto sched = schedule_from(config);
    const auto fam = std::make_shared<const Family>(gm, sched);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const int dim = static_cast<int>(gm.dim());
    const auto c1 = ConditionSpec::from_json(config.at("conditions")[0], dim);
    const auto c2 = ConditionSpec::from_json(config.at("conditions")[1], dim);
    const double tol = config.at("tolerance").get<double>();
    const int n = config.at("samples").get<int>();

    MulticondOptions base;
    base.rho = {parse_omega_kind(config.at("rho_kind").get<std::string>()), config.at("rho").get<double>()};
    if (!config.at("eta_sq").is_null()) {
        base.reparam.eta_sq = config.at("eta_sq").get<double>();
    }
    if (!config.at("eta_tilde_sq").is_null()) {
        base.reparam.eta_tilde_sq = config.at("eta_tilde_sq").get<double>();
    }
    base.times = ddim_time_grid(sched.steps(), config.at("ddim_steps").get<int>());
    base.workers = config.at("workers").get<int>();
    const auto omega_kind = parse_omega_kind(config.at("omega_kind").get<std::string>());

    auto cols = summary_columns();
    cols.insert(cols.begin() + 1, {"variant", "rho", "omega"});
    for (const char* extra : {"loss1_mean", "loss2_mean", "satisfied1", "satisfied2", "joint_rate", "error"}) {
        cols.push_back(extra);
    }
    out.results.columns = cols;

    const auto run_cell = [&](const std::string& run_id, const MulticondOptions& o) {
        json cell = {{"run_id", run_id}, {"variant", o.omega.omega0 == 0.0 ? "naive" : to_string(o.variant)},
                     {"rho", o.rho.omega0}, {"omega", o.omega.omega0}};
        double rate = NAN;
        const bool ok = guarded(out, run_id, [&] {
            log_line(ctx, "multicond: " + run_id);
            const auto set = sample_multicond(src, &tls, c1, c2, o, n, derive_seed(seed, 20));
            maybe_write_trajectories(
                ctx, set, run_id,
                {{"loss1", [&](const Vector& x) { return c1.loss_value(x); }},
                 {"loss2", [&](const Vector& x) { return c2.loss_value(x); }}});
            auto s = summarize(run_id, set, nullptr, nullptr, seed, cell_hash(config, cell));
            const Matrix& x = set.terminal();
            double l1 = 0.0, l2 = 0.0;
            int s1 = 0, s2 = 0, joint = 0;
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                l1 += c1.loss_value(x.col(j)) / static_cast<double>(x.cols());
                l2 += c2.loss_value(x.col(j)) / static_cast<double>(x.cols());
                const bool a = (c1.property(x.col(j)) - c1.target).cwiseAbs().maxCoeff() < tol;
                const bool b = (c2.property(x.col(j)) - c2.target).cwiseAbs().maxCoeff() < tol;
                s1 += a;
                s2 += b;
                joint += a && b;
            }
            const double m = static_cast<double>(x.cols());
            rate = joint / m;
            cell.update(summary_row(s));
            cell.update({{"loss1_mean", l1}, {"loss2_mean", l2}, {"satisfied1", s1 / m}, {"satisfied2", s2 / m},
                         {"joint_rate", rate}});
            out.summaries.push_back(std::move(s));
        });
        if (!ok) {
            cell["error"] = out.errors.back();
        }
        out.results.add(cell);
        return rate;
    };

    const double naive = run_cell("naive", base);
    out.report["naive_joint_rate"] = number(naive);
    json variants = json::object();
    for (const auto& name : config.at("variants")) {
        MulticondOptions o = base;
        o.variant = parse_multicond_variant(name.get<std::string>());
        double best = -1.0, best_omega = NAN;
        for (double w : omega_list(config).get<std::vector<double>>()) {
            o.omega = {omega_kind, w};
            const double r = run_cell(name.get<std::string>() + "-omega" + label(w), o);
            if (r > best) {
                best = r;
                best_omega = w;
            }
        }
        variants[name.get<std::string>()] = {{"best_joint_rate", best}, {"best_omega", number(best_omega)}};
        out.checks.push_back(make_check("joint_rate_" + name.get<std::string>(), best, ">", naive,
                                        {{"omega", number(best_omega)}, {"tolerance", tol}}));
    }
    out.report["variants"] = variants;

    // temporal alignment identities with the analytic oracle
    Rng rng(derive_seed(seed, 30));
    const auto flat = ConditionSpec::linear(Vector::Zero(dim), 0.0);
    double oracle_err = 0.0, equiv_err = 0.0;
    for (int i = 0, m = config.at("equivalence_instances").get<int>(); i < m; ++i) {
        const int t = rng.uniform_int(1, sched.steps());
        const Vector x = forward_perturb(sample(gm, 1, rng).col(0), t, sched, rng);
        const double eta = 0.5 * rng.uniform();
        const Vector single = temporal_alignment(MulticondVariant::SinglePredictor, src, tls, c1, c2, x, t, eta, eta);
        const Vector expected = tls_analytic(*fam, reparam_single(x, c1, eta, src, t), t);
        const double scale = std::max(expected.cwiseAbs().maxCoeff(), 1.0);
        oracle_err = std::max(oracle_err, (single - expected).cwiseAbs().maxCoeff() / scale);
        const Vector uncond_zero =
            temporal_alignment(MulticondVariant::UncondPredictor, src, tls, c1, c2, x, t, eta, 0.0);
        const Vector uncond_flat =
            temporal_alignment(MulticondVariant::UncondPredictor, src, tls, c1, flat, x, t, eta, eta);
        equiv_err = std::max({equiv_err, (uncond_zero - single).cwiseAbs().maxCoeff() / scale,
                              (uncond_flat - single).cwiseAbs().maxCoeff() / scale});
    }
    out.checks.push_back(make_check("alignment_matches_analytic_tls", oracle_err, "<", 1e-8));
    out.checks.push_back(make_check("variants_agree_where_equivalent", equiv_err, "<", 1e-8));
    return out;
}

ExperimentOutput run_escape(const json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "escape";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const Family fam(mixture_from(config), schedule_from(config));
    const auto mean = config.at("init_mean").get<std::vector<double>>();
    const Vector init_mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    const double init_std = config.at("init_std").get<double>();

    out.results.columns = {"run_id", "dynamics", "k", "h", "epsilon", "trials", "censored", "mean_exit_step",
                           "median_exit_step", "config_hash", "seed", "error"};
    EscapeResult results[2];
    Plot survival{"escape_survival", "Fraction of trials not yet escaped", "step", "fraction remaining", {}};
    for (auto kind : {LangevinKind::Plain, LangevinKind::Modified}) {
        const std::string run_id = kind == LangevinKind::Plain ? "plain" : "modified";
        json cell = {{"run_id", run_id}, {"dynamics", run_id}, {"k", config.at("k")}, {"h", config.at("h")}};
        guarded(out, run_id, [&] {
            log_line(ctx, "escape: " + run_id);
            EscapeConfig ec;
            ec.kind = kind;
            ec.k = config.at("k").get<int>();
            ec.epsilon = config.at("epsilon").get<double>();
            ec.h = config.at("h").get<double>();
            ec.max_steps = config.at("max_steps").get<int>();
            ec.trials = config.at("trials").get<int>();
            ec.seed = derive_seed(seed, 40);
            ec.workers = config.at("workers").get<int>();
            ec.init = [&](Rng& rng) -> Vector { return init_mean + init_std * rng.normal_vector(init_mean.size()); };
            auto& r = results[kind == LangevinKind::Modified];
            r = estimate_escape_time(fam, ec);
            cell.update({{"epsilon", r.epsilon},
                         {"trials", r.trials},
                         {"censored", r.censored},
                         {"mean_exit_step", number(r.mean)},
                         {"median_exit_step", number(r.median)},
                         {"config_hash", cell_hash(config, cell)},
                         {"seed", ec.seed}});
            auto sorted = r.exit_steps;
            std::sort(sorted.begin(), sorted.end());
            Series s{run_id, {}, {}};
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                s.x.push_back(sorted[i]);
                s.y.push_back(1.0 - static_cast<double>(i + 1) / r.trials);
            }
            survival.series.push_back(std::move(s));
        });
        out.results.add(cell);
    }
    const auto to_double = [](const std::vector<int>& v) { return std::vector<double>(v.begin(), v.end()); };
    const auto& plain = results[0];
    const auto& modified = results[1];
    double p = NAN;
    if (!plain.exit_steps.empty() && !modified.exit_steps.empty()) {
        p = mann_whitney_less(to_double(modified.exit_steps), to_double(plain.exit_steps)).p_less;
    }
    const bool flagged = plain.all_censored() || modified.all_censored();
    if (flagged) {
        out.errors.push_back("escape: every trial censored for at least one dynamics");
    }
    out.report = {{"plain_mean", number(plain.mean)},         {"modified_mean", number(modified.mean)},
                  {"plain_median", number(plain.median)},     {"modified_median", number(modified.median)},
                  {"plain_censored", plain.censored},         {"modified_censored", modified.censored},
                  {"epsilon", plain.epsilon},                 {"mann_whitney_p", number(p)}};
    out.checks.push_back(make_check("modified_mean_below_plain", modified.mean, "<", plain.mean));
    out.checks.push_back(
        make_check("mann_whitney_p", p, "<", config.at("alpha").get<double>(), {{"all_censored", flagged}}));
    out.plots.push_back(std::move(survival));
    return out;
}

ExperimentOutput run_fewstep(const json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "fewstep";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const auto gm = mixture_from(config);
    const auto sched = schedule_from(config);
    const auto fam = std::make_shared<const Family>(gm, sched);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const int n = config.at("samples").get<int>();
    Rng ref_rng(derive_seed(seed, 11));
    const Matrix reference = sample(gm, config.at("reference_samples").get<int>(), ref_rng);
    const auto kind = parse_omega_kind(config.at("omega_kind").get<std::string>());
    const auto omegas = config.at("omega").get<std::vector<double>>();
    auto steps_grid = config.at("steps").get<std::vector<int>>();
    std::sort(steps_grid.begin(), steps_grid.end());

    auto cols = summary_columns();
    cols.insert(cols.begin() + 1, {"ddim_steps", "omega"});
    cols.push_back("error");
    out.results.columns = cols;

    Series no_tag_series{"no TAG", {}, {}}, tag_series{"TAG (best omega)", {}, {}};
    json sweep = json::array();
    for (int steps : steps_grid) {
        const auto run = [&](double w) {
            const std::string run_id = "steps" + std::to_string(steps) + "-omega" + label(w);
            json cell = {{"run_id", run_id}, {"ddim_steps", steps}, {"omega", w}};
            double w1 = NAN;
            const bool ok = guarded(out, run_id, [&] {
                log_line(ctx, "fewstep: " + run_id);
                SampleOptions o;
                o.kind = SamplerKind::Ddim;
                o.ddim_times = ddim_time_grid(sched.steps(), steps);
                o.omega = {kind, w};
                o.tls = &tls;
                o.clamp_final_target = config.at("clamp_final_target").get<bool>();
                o.workers = config.at("workers").get<int>();
                const auto set = sample(src, o, n, derive_seed(seed, 20));
                maybe_write_trajectories(ctx, set, run_id);
                auto s = summarize(run_id, set, &reference, &gm, seed, cell_hash(config, cell));
                w1 = s.sliced_w1;
                cell.update(summary_row(s));
                out.summaries.push_back(std::move(s));
            });
            if (!ok) {
                cell["error"] = out.errors.back();
            }
            out.results.add(cell);
            return w1;
        };
        const double base = run(0.0);
        double best = INFINITY, best_omega = NAN;
        for (double w : omegas) {
            const double v = run(w);
            if (v < best) {
                best = v;
                best_omega = w;
            }
        }
        no_tag_series.x.push_back(steps);
        no_tag_series.y.push_back(base);
        tag_series.x.push_back(steps);
        tag_series.y.push_back(best);
        sweep.push_back({{"ddim_steps", steps}, {"no_tag_w1", number(base)}, {"best_tag_w1", number(best)},
                         {"best_omega", number(best_omega)}});
        if (steps <= config.at("check_max_steps").get<int>()) {
            out.checks.push_back(make_check("tag_improves_w1_steps" + std::to_string(steps), best, "<", base,
                                            {{"omega", number(best_omega)}}));
        }
    }
    out.report["sweep"] = sweep;
    out.plots.push_back({"fewstep_w1", "Terminal sliced W1 against DDIM step count", "DDIM steps", "sliced W1",
                         {no_tag_series, tag_series}});
    return out;
}

} // namespace tag
