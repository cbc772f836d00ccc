#include <algorithm>
#include <cmath>

#include "tag/experiments.hpp"
#include "tag/guidance.hpp"

namespace tag {

namespace {

Mixture random_mixture(Rng& rng, int dim, int components, double spread)
{
    Vector w(components);
    for (int i = 0; i < components; ++i) {
        w(i) = 0.2 + rng.uniform();
    }
    w /= w.sum();
    Matrix means(dim, components);
    for (int i = 0; i < components; ++i) {
        means.col(i) = spread * rng.normal_vector(dim);
    }
    Vector var(components);
    for (int i = 0; i < components; ++i) {
        var(i) = 0.2 + 1.5 * rng.uniform();
    }
    return Mixture(w, means, var);
}

NoiseSchedule random_schedule(Rng& rng, int steps)
{
    const double lo = 1e-3 + 0.05 * rng.uniform();
    const double hi = std::min(0.6, lo + 0.4 * rng.uniform());
    return linear_beta_schedule(steps, lo, hi);
}

double rel(const Vector& a, const Vector& b, double floor)
{
    return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

double max_abs(const Matrix& a, const Matrix& b)
{
    return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x, double h)
{
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        g(i) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
}

double set_difference(const TrajectorySet& a, const TrajectorySet& b)
{
    if (a.states.size() != b.states.size()) {
        return INFINITY;
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.states.size(); ++i) {
        worst = std::max(worst, max_abs(a.states[i], b.states[i]));
    }
    return worst;
}

} // namespace

Check check_tls_decomposition(int instances, std::uint64_t seed, bool corrupt_gamma)
{
    Rng rng(seed);
    double worst_abs = 0.0, worst_rel = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int d = 1 + rng.uniform_int(0, 3);
        const auto gm = random_mixture(rng, d, 1 + rng.uniform_int(0, 3), 4.0);
        const Family fam(gm, random_schedule(rng, 1 + rng.uniform_int(0, 39)));
        const Vector x = 6.0 * rng.normal_vector(d);
        const int t = rng.uniform_int(1, fam.steps());
        const Vector exact = tls_analytic(fam, x, t);
        Vector decomposed = tls_decomposed(fam, x, t);
        if (corrupt_gamma) {
            Vector gamma = detail::normalized_weights<double>(fam.log_marginals(x));
            for (Eigen::Index k = 0; k < gamma.size(); ++k) {
                gamma(k) *= 1.0 + 0.05 * static_cast<double>(k + 1);
            }
            gamma /= gamma.sum();
            const Matrix s = fam.scores(x);
            decomposed.setZero();
            for (int k = 1; k <= fam.steps(); ++k) {
                if (k != t) {
                    decomposed += gamma(k - 1) * (s.col(t - 1) - s.col(k - 1));
                }
            }
        }
        const double abs_err = (decomposed - exact).cwiseAbs().maxCoeff();
        worst_abs = std::max(worst_abs, abs_err);
        worst_rel = std::max(worst_rel, abs_err / std::max(exact.cwiseAbs().maxCoeff(), 1.0));
    }
    auto c = make_check("tls_decomposition", worst_abs, "<", 1e-10,
                        {{"instances", instances}, {"max_rel_err", worst_rel}, {"rel_threshold", 1e-8},
                         {"corrupt_gamma", corrupt_gamma}});
    c.passed = c.passed && worst_rel < 1e-8;
    return c;
}

Check check_modified_score(int instances, std::uint64_t seed)
{
    Rng rng(seed);
    double worst = 0.0, worst_sum = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int d = 1 + rng.uniform_int(0, 3);
        const auto gm = random_mixture(rng, d, 1 + rng.uniform_int(0, 3), 4.0);
        const auto sched = random_schedule(rng, 1 + rng.uniform_int(0, 39));
        const Family fam(gm, sched);
        const Vector x = 6.0 * rng.normal_vector(d);
        const int k = rng.uniform_int(1, fam.steps());
        const auto ms = modified_score(fam, x, k);
        // independent marginals and weights
        const int T = sched.steps();
        Vector logp(T);
        Matrix s(d, T);
        for (int j = 1; j <= T; ++j) {
            const auto pj = perturbed_mixture(gm, sched.alpha_bar(j));
            logp(j - 1) = log_density(pj, x);
            s.col(j - 1) = score(pj, x);
        }
        const Vector gamma = (logp.array() - logp.maxCoeff()).exp().matrix() / (logp.array() - logp.maxCoeff()).exp().sum();
        const Vector expected = s.col(k - 1) - s * gamma;
        worst = std::max(worst, rel(ms.value, expected, 1.0));
        worst = std::max(worst, rel(ms.gamma, gamma, 1.0));
        worst_sum = std::max(worst_sum, std::abs(ms.gamma.sum() - 1.0));
    }
    auto c = make_check("modified_score", std::max(worst, worst_sum), "<", 1e-12,
                        {{"instances", instances}, {"max_err", worst}, {"max_weight_sum_err", worst_sum}});
    return c;
}

Check check_continuous_limit(int instances, std::uint64_t seed)
{
    const auto beta = [](double s) { return 0.5 + 4.0 * s; };
    const std::vector<int> grid{25, 50, 100, 200};
    Rng rng(seed);
    // x ~ p_t (noisy points at the queried time) drives the check; points next to
    // a clean mean, where the missing [0, 1/n] slice weighs most, are reported too
    double worst_final = 0.0, worst_final_near_mean = 0.0;
    int non_monotone = 0;
    std::vector<double> mean_err(grid.size(), 0.0), mean_err_near_mean(grid.size(), 0.0);
    for (int i = 0; i < instances; ++i) {
        const auto gm = random_mixture(rng, 2, 2, 1.5);
        const double t = 0.2 * rng.uniform_int(1, 4);
        const double abar_t = alpha_bar_continuous(beta, t);
        const Vector noisy =
            std::sqrt(abar_t) * sample(gm, 1, rng).col(0) + std::sqrt(1.0 - abar_t) * rng.normal_vector(2);
        const Vector near_mean = gm.means().col(rng.uniform_int(0, 1)) + 0.5 * rng.normal_vector(2);
        for (const Vector* x : {&noisy, &near_mean}) {
            const Vector limit = tls_continuous(gm, beta, *x, t, 8192);
            std::vector<double> errs;
            for (int n : grid) {
                std::vector<double> abar;
                for (int k = 1; k <= n; ++k) {
                    abar.push_back(alpha_bar_continuous(beta, static_cast<double>(k) / n));
                }
                const Family fam(gm, NoiseSchedule::from_alpha_bars(abar));
                errs.push_back((tls_decomposed(fam, *x, static_cast<int>(std::lround(t * n))) - limit).norm());
            }
            auto& means = x == &noisy ? mean_err : mean_err_near_mean;
            for (std::size_t j = 0; j < errs.size(); ++j) {
                means[j] += errs[j] / instances;
                if (j > 0 && !(errs[j] < errs[j - 1])) {
                    ++non_monotone;
                }
            }
            auto& worst = x == &noisy ? worst_final : worst_final_near_mean;
            worst = std::max(worst, errs.back());
        }
    }
    auto c = make_check("continuous_limit", worst_final, "<", 1e-3,
                        {{"instances", instances},
                         {"steps", grid},
                         {"mean_error", mean_err},
                         {"near_mean_error", mean_err_near_mean},
                         {"near_mean_max_final", worst_final_near_mean},
                         {"non_monotone", non_monotone}});
    c.passed = c.passed && non_monotone == 0;
    return c;
}

Check check_tweedie(int instances, std::uint64_t seed)
{
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int d = 1 + rng.uniform_int(0, 3);
        const auto gm = random_mixture(rng, d, 1 + rng.uniform_int(0, 3), 4.0);
        const auto sched = random_schedule(rng, 1 + rng.uniform_int(0, 39));
        const auto src = ScoreSource::analytic(std::make_shared<const Family>(gm, sched));
        const int t = rng.uniform_int(1, sched.steps());
        const Vector x = forward_perturb(sample(gm, 1, rng).col(0), t, sched, rng);
        worst = std::max(worst, rel(tweedie_x0hat(src, x, t), posterior_mean_x0(gm, x, sched.alpha_bar(t)), 1.0));
    }
    return make_check("tweedie", worst, "<", 1e-8, {{"instances", instances}});
}

Check check_mlp_gradients(int instances, std::uint64_t seed)
{
    Rng rng(seed);
    const double h = 1e-6;
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const int in = 1 + rng.uniform_int(0, 3);
        const int out = 1 + rng.uniform_int(0, 3);
        std::vector<int> dims{in};
        for (int l = rng.uniform_int(0, 2); l > 0; --l) {
            dims.push_back(2 + rng.uniform_int(0, 4));
        }
        dims.push_back(out);
        auto net = Mlp<double>::init(dims, i % 2 ? Activation::Identity : Activation::Tanh, rng);
        const Matrix input = rng.normal_vector(in * 3).reshaped(in, 3);
        const Matrix g = rng.normal_vector(out * 3).reshaped(out, 3);
        const auto objective = [&](const Mlp<double>& m, const Matrix& a) { return m.forward(a).cwiseProduct(g).sum(); };
        Mlp<double>::Cache cache;
        net.forward(input, &cache);
        const auto grads = net.backward(cache, g);
        for (std::size_t l = 0; l < net.layers(); ++l) {
            Matrix fd_w(net.weight(l).rows(), net.weight(l).cols());
            for (Eigen::Index r = 0; r < fd_w.rows(); ++r) {
                for (Eigen::Index c = 0; c < fd_w.cols(); ++c) {
                    const double orig = net.weight(l)(r, c);
                    net.weight_mut(l)(r, c) = orig + h;
                    const double up = objective(net, input);
                    net.weight_mut(l)(r, c) = orig - h;
                    const double down = objective(net, input);
                    net.weight_mut(l)(r, c) = orig;
                    fd_w(r, c) = (up - down) / (2.0 * h);
                }
            }
            worst = std::max(worst, rel(grads.weights[l].reshaped(), fd_w.reshaped(), 1e-3));
            Vector fd_b(net.bias(l).size());
            for (Eigen::Index r = 0; r < fd_b.size(); ++r) {
                const double orig = net.bias(l)(r);
                net.bias_mut(l)(r) = orig + h;
                const double up = objective(net, input);
                net.bias_mut(l)(r) = orig - h;
                const double down = objective(net, input);
                net.bias_mut(l)(r) = orig;
                fd_b(r) = (up - down) / (2.0 * h);
            }
            worst = std::max(worst, rel(grads.biases[l], fd_b, 1e-3));
        }
        const Vector fd_in = central_difference(
            [&](const Vector& v) { return objective(net, v.reshaped(in, 3)); }, input.reshaped(), h);
        worst = std::max(worst, rel(grads.input.reshaped(), fd_in, 1e-3));

        // softmax cross-entropy and the predictor TLS built on it
        if (out >= 2) {
            const std::vector<int> labels{0, out - 1, rng.uniform_int(0, out - 1)};
            Matrix ce_grad;
            const Matrix logits = net.forward(input);
            softmax_cross_entropy<double>(logits, labels, &ce_grad);
            const Vector fd_ce = central_difference(
                [&](const Vector& v) { return softmax_cross_entropy<double>(v.reshaped(out, 3), labels); },
                logits.reshaped(), h);
            worst = std::max(worst, rel(ce_grad.reshaped(), fd_ce, 1e-3));
            const int t = rng.uniform_int(1, out);
            const Vector x = input.col(0);
            const Vector fd_tls = central_difference(
                [&](const Vector& v) {
                    const Vector z = net.forward(Matrix(v)).col(0);
                    return z(t - 1) - z.maxCoeff() - std::log((z.array() - z.maxCoeff()).exp().sum());
                },
                x, h);
            worst = std::max(worst, rel(predictor_tls(net, Matrix(x), t).col(0), fd_tls, 1e-3));
        }
    }
    return make_check("mlp_gradients", worst, "<", 1e-4, {{"instances", instances}});
}

Check check_guidance_gradients(int instances, std::uint64_t seed)
{
    Rng rng(seed);
    double worst = 0.0;
    int skipped = 0;
    for (int i = 0; i < instances; ++i) {
        const int d = 1 + rng.uniform_int(0, 2);
        const auto gm = random_mixture(rng, d, 1 + rng.uniform_int(0, 3), 3.0);
        const auto sched = random_schedule(rng, 10);
        const auto src = ScoreSource::analytic(std::make_shared<const Family>(gm, sched));
        const int t = rng.uniform_int(1, 10);
        const auto loss = i % 2 ? LossKind::Absolute : LossKind::Squared;
        const auto cond = i % 3 ? ConditionSpec::coordinate(d, rng.uniform_int(0, d - 1), rng.normal(), loss)
                                : ConditionSpec::linear(rng.normal_vector(d), rng.normal(), loss);
        const Vector x = forward_perturb(sample(gm, 1, rng).col(0), t, sched, rng);
        const Vector x0 = tweedie_x0hat(src, x, t);
        if (loss == LossKind::Absolute && (cond.property(x0) - cond.target).cwiseAbs().minCoeff() < 1e-3) {
            ++skipped;
            continue;
        }
        const Vector fd_loss = central_difference([&](const Vector& y) { return cond.loss_value(y); }, x0, 1e-6);
        worst = std::max(worst, rel(cond.loss_gradient(x0), fd_loss, 1e-3));
        const Vector fd_tfg = central_difference(
            [&](const Vector& y) { return cond.loss_value(tweedie_x0hat(src, y, t)); }, x, 1e-6);
        worst = std::max(worst, rel(tfg_gradient(src, cond, x, t), fd_tfg, 1e-3));
    }
    return make_check("guidance_gradients", worst, "<", 1e-4, {{"instances", instances}, {"skipped_at_kink", skipped}});
}

Check check_reductions(std::uint64_t seed)
{
    const auto sched = linear_beta_schedule(30, 1e-3, 0.3);
    Matrix means(2, 2);
    means << 10.0, -10.0, 10.0, -10.0;
    const auto fam = std::make_shared<const Family>(Mixture(Vector::Constant(2, 0.5), means, Vector::Ones(2)), sched);
    const auto src = ScoreSource::analytic(fam);
    const auto tls = TimeSource::analytic(fam);
    const int n = 40;
    nlohmann::json detail;

    SampleOptions plain;
    SampleOptions zero_tag;
    zero_tag.tls = &tls;
    zero_tag.omega = {OmegaKind::OneMinusAlphaBar, 0.0};
    detail["ddpm_tag_omega0"] = set_difference(sample(src, plain, n, seed), sample(src, zero_tag, n, seed));

    SampleOptions ddim;
    ddim.kind = SamplerKind::Ddim;
    ddim.ddim_times = ddim_time_grid(30, 10);
    SampleOptions ddim_tag = ddim;
    ddim_tag.tls = &tls;
    ddim_tag.clamp_final_target = true;
    detail["ddim_tag_omega0"] = set_difference(sample(src, ddim, n, seed), sample(src, ddim_tag, n, seed));

    detail["corrupted_sigma0"] = set_difference(sample(src, plain, n, seed),
                                                sample_corrupted(src, tls, 0.0, OmegaConfig{}, n, seed));
    const PointDrift zero_drift = [](const Vector& x, int) -> Vector { return Vector::Zero(x.size()); };
    detail["drift_zero"] = set_difference(sample(src, plain, n, seed), sample_with_drift(src, zero_drift, n, seed));

    const auto c1 = ConditionSpec::coordinate(2, 0, 10.0);
    const auto c2 = ConditionSpec::coordinate(2, 1, 10.0);
    for (auto variant : {MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor}) {
        MulticondOptions mo;
        mo.variant = variant;
        mo.times = ddim.ddim_times;
        detail["multicond_zero_" + to_string(variant)] =
            set_difference(sample(src, ddim, n, seed), sample_multicond(src, &tls, c1, c2, mo, n, seed));
    }
    Rng rng(seed);
    double score_diff = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Vector x = 5.0 * rng.normal_vector(2);
        const int t = rng.uniform_int(1, 30);
        score_diff = std::max(score_diff, max_abs(conditional_tag_score(src, c1, &tls, x, t, 0.0, 0.0), src.score_one(x, t)));
    }
    detail["conditional_score_zero"] = score_diff;

    double worst = 0.0;
    for (const auto& [key, value] : detail.items()) {
        worst = std::max(worst, value.get<double>());
    }
    return make_check("reductions", worst, "==", 0.0, detail);
}

Check check_drift_bound(std::uint64_t seed)
{
    Matrix means(2, 2);
    means << 10.0, -10.0, 10.0, -10.0;
    const Family fam(Mixture(Vector::Constant(2, 0.5), means, Vector::Ones(2)), linear_beta_schedule(100, 1e-3, 0.2));
    const DriftFn zero = [](const Vector& x, int) -> Vector { return Vector::Zero(x.size()); };
    const DriftFn v = [](const Vector& x, int) -> Vector { return -0.01 * x; };
    const DriftFn v2 = [](const Vector& x, int) -> Vector { return -0.02 * x; };
    const double b0 = drift_energy_bound(fam, zero, 200, seed);
    const double b1 = drift_energy_bound(fam, v, 200, seed);
    const double b2 = drift_energy_bound(fam, v2, 200, seed);
    return make_check("drift_bound", std::abs(b0) + std::abs(b2 - 4.0 * b1), "==", 0.0,
                      {{"bound_zero", b0}, {"bound_v", b1}, {"bound_2v", b2}});
}

ExperimentOutput run_verify(const nlohmann::json& config, const RunContext& ctx)
{
    ExperimentOutput out;
    out.experiment = "verify";
    out.config = config;
    const auto seed = config.at("seed").get<std::uint64_t>();
    const int instances = config.at("instances").get<int>();
    const auto log = [&](const std::string& name) {
        if (ctx.log) {
            *ctx.log << "verify: " << name << '\n';
        }
    };
    const std::vector<std::pair<std::string, std::function<Check()>>> suite{
        {"tls_decomposition",
         [&] { return check_tls_decomposition(instances, derive_seed(seed, 1), config.at("debug_corrupt_gamma").get<bool>()); }},
        {"modified_score", [&] { return check_modified_score(instances, derive_seed(seed, 2)); }},
        {"continuous_limit",
         [&] { return check_continuous_limit(config.at("continuous_instances").get<int>(), derive_seed(seed, 3)); }},
        {"tweedie", [&] { return check_tweedie(instances, derive_seed(seed, 4)); }},
        {"mlp_gradients",
         [&] { return check_mlp_gradients(config.at("gradient_instances").get<int>(), derive_seed(seed, 5)); }},
        {"guidance_gradients",
         [&] { return check_guidance_gradients(config.at("gradient_instances").get<int>(), derive_seed(seed, 6)); }},
        {"reductions", [&] { return check_reductions(derive_seed(seed, 7)); }},
        {"drift_bound", [&] { return check_drift_bound(derive_seed(seed, 8)); }},
    };
    out.results.columns = {"check", "value", "relation", "threshold", "passed"};
    for (const auto& [name, run] : suite) {
        log(name);
        Check c;
        try {
            c = run();
        } catch (const std::exception& e) {
            c = make_check(name, NAN, "<", 0.0, {{"error", e.what()}});
            c.passed = false;
            out.errors.push_back(name + ": " + e.what());
        }
        out.results.add({{"check", c.name}, {"value", c.value}, {"relation", c.relation}, {"threshold", c.threshold},
                         {"passed", c.passed}});
        out.checks.push_back(std::move(c));
    }
    return out;
}

} // namespace tag
