#include "tag/guidance.hpp"

#include <cmath>

#include "tag/parallel.hpp"

namespace tag {

LossKind parse_loss_kind(const std::string& name)
{
    if (name == "squared") {
        return LossKind::Squared;
    }
    if (name == "absolute") {
        return LossKind::Absolute;
    }
    throw std::invalid_argument("unknown loss kind: " + name);
}

std::string to_string(LossKind kind)
{
    return kind == LossKind::Squared ? "squared" : "absolute";
}

ConditionSpec ConditionSpec::coordinate(int dim, int index, double target, LossKind loss)
{
    if (index < 0 || index >= dim) {
        throw std::invalid_argument("ConditionSpec::coordinate: index outside [0, dim)");
    }
    ConditionSpec c;
    c.kind = "coordinate";
    c.projection = Matrix::Zero(1, dim);
    c.projection(0, index) = 1.0;
    c.target = Vector::Constant(1, target);
    c.loss = loss;
    return c;
}

ConditionSpec ConditionSpec::linear(const Vector& weights, double target, LossKind loss)
{
    if (weights.size() == 0 || !weights.allFinite()) {
        throw std::invalid_argument("ConditionSpec::linear: weights must be nonempty and finite");
    }
    ConditionSpec c;
    c.kind = "linear";
    c.projection = weights.transpose();
    c.target = Vector::Constant(1, target);
    c.loss = loss;
    return c;
}

ConditionSpec ConditionSpec::identity(const Vector& target, LossKind loss)
{
    ConditionSpec c;
    c.kind = "identity";
    c.projection = Matrix::Identity(target.size(), target.size());
    c.target = target;
    c.loss = loss;
    return c;
}

Vector ConditionSpec::property(const Vector& x) const
{
    if (x.size() != projection.cols()) {
        throw std::invalid_argument("ConditionSpec: point dimension mismatch");
    }
    return projection * x;
}

double ConditionSpec::loss_value(const Vector& x) const
{
    const Vector r = property(x) - target;
    return loss == LossKind::Squared ? 0.5 * r.squaredNorm() : r.cwiseAbs().sum();
}

Vector ConditionSpec::loss_gradient(const Vector& x) const
{
    const Vector r = property(x) - target;
    if (loss == LossKind::Squared) {
        return projection.transpose() * r;
    }
    return projection.transpose() * r.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

nlohmann::json ConditionSpec::to_json() const
{
    nlohmann::json params;
    if (kind == "coordinate") {
        Eigen::Index idx = 0;
        projection.row(0).maxCoeff(&idx);
        params = {{"index", idx}};
    } else {
        params = {{"weights", std::vector<double>(projection.data(), projection.data() + projection.size())}};
    }
    return {{"kind", kind},
            {"params", params},
            {"target", std::vector<double>(target.data(), target.data() + target.size())},
            {"loss", to_string(loss)}};
}

ConditionSpec ConditionSpec::from_json(const nlohmann::json& j, int dim)
{
    const auto kind = j.at("kind").get<std::string>();
    const auto loss = parse_loss_kind(j.value("loss", std::string("squared")));
    const auto& target = j.at("target");
    const double c = target.is_array() ? target.at(0).get<double>() : target.get<double>();
    if (kind == "coordinate") {
        return coordinate(dim, j.at("params").at("index").get<int>(), c, loss);
    }
    if (kind == "linear") {
        const auto w = j.at("params").at("weights").get<std::vector<double>>();
        if (static_cast<int>(w.size()) != dim) {
            throw std::invalid_argument("ConditionSpec: linear weights must have the data dimension");
        }
        return linear(Eigen::Map<const Vector>(w.data(), dim), c, loss);
    }
    throw std::invalid_argument("unknown condition kind: " + kind);
}

Matrix tweedie_jacobian(const ScoreSource& src, const Vector& x, int t, double fd_step)
{
    const double abar = src.schedule().alpha_bar(t);
    const auto d = x.size();
    Matrix ds;
    if (src.oracle() != nullptr) {
        ds = score_jacobian(src.oracle()->at(t), x);
    } else {
        Matrix probes(d, 2 * d);
        for (Eigen::Index i = 0; i < d; ++i) {
            probes.col(2 * i) = x;
            probes.col(2 * i + 1) = x;
            probes(i, 2 * i) += fd_step;
            probes(i, 2 * i + 1) -= fd_step;
        }
        const Matrix s = src.score(probes, t);
        ds.resize(d, d);
        for (Eigen::Index i = 0; i < d; ++i) {
            ds.col(i) = (s.col(2 * i) - s.col(2 * i + 1)) / (2.0 * fd_step);
        }
    }
    return (Matrix::Identity(d, d) + (1.0 - abar) * ds) / std::sqrt(abar);
}

Vector tfg_gradient(const ScoreSource& src, const ConditionSpec& cond, const Vector& x, int t)
{
    const Vector x0 = tweedie_x0hat(src, x, t);
    return tweedie_jacobian(src, x, t).transpose() * cond.loss_gradient(x0);
}

Vector conditional_tag_score(const ScoreSource& src, const ConditionSpec& cond, const TimeSource* tls, const Vector& x,
                             int t, double rho, double omega)
{
    Vector out = src.score_one(x, t);
    if (rho != 0.0) {
        out -= rho * tfg_gradient(src, cond, x, t);
    }
    if (omega != 0.0) {
        if (tls == nullptr) {
            throw std::invalid_argument("conditional_tag_score: omega set without a TLS source");
        }
        out += omega * tls->tls_one(x, t);
    }
    return out;
}

Vector reparam_single(const Vector& x, const ConditionSpec& cond1, double eta_sq, const ScoreSource& src, int t)
{
    if (!(eta_sq >= 0.0)) {
        throw std::invalid_argument("reparam_single: eta^2 must be nonnegative");
    }
    if (eta_sq == 0.0) {
        return x;
    }
    return x - eta_sq * tfg_gradient(src, cond1, x, t);
}

Vector reparam_unconditional(const Vector& x, const ConditionSpec& cond1, const ConditionSpec& cond2, double eta_sq,
                             double eta_tilde_sq, const ScoreSource& src, int t)
{
    if (!(eta_tilde_sq >= 0.0)) {
        throw std::invalid_argument("reparam_unconditional: eta~^2 must be nonnegative");
    }
    const Vector shifted = reparam_single(x, cond1, eta_sq, src, t);
    if (eta_tilde_sq == 0.0) {
        return shifted;
    }
    return shifted - eta_tilde_sq * tfg_gradient(src, cond2, shifted, t);
}

MulticondVariant parse_multicond_variant(const std::string& name)
{
    if (name == "single_predictor") {
        return MulticondVariant::SinglePredictor;
    }
    if (name == "uncond_predictor") {
        return MulticondVariant::UncondPredictor;
    }
    throw std::invalid_argument("unknown multicondition variant: " + name);
}

std::string to_string(MulticondVariant variant)
{
    return variant == MulticondVariant::SinglePredictor ? "single_predictor" : "uncond_predictor";
}

Vector temporal_alignment(MulticondVariant variant, const ScoreSource& src, const TimeSource& tls,
                          const ConditionSpec& cond1, const ConditionSpec& cond2, const Vector& x, int t,
                          double eta_sq, double eta_tilde_sq)
{
    const Vector shifted = variant == MulticondVariant::SinglePredictor
                               ? reparam_single(x, cond1, eta_sq, src, t)
                               : reparam_unconditional(x, cond1, cond2, eta_sq, eta_tilde_sq, src, t);
    return tls.tls_one(shifted, t);
}

TrajectorySet sample_multicond(const ScoreSource& src, const TimeSource* tls, const ConditionSpec& cond1,
                               const ConditionSpec& cond2, const MulticondOptions& options, int n, std::uint64_t seed)
{
    const auto& sched = src.schedule();
    const int T = sched.steps();
    const Eigen::Index dim = src.dim();
    if (n < 1) {
        throw std::invalid_argument("sample_multicond: need n >= 1");
    }
    if (options.omega.omega0 != 0.0 && tls == nullptr) {
        throw std::invalid_argument("sample_multicond: omega set without a TLS source");
    }
    std::vector<int> times = options.times;
    if (times.empty()) {
        for (int t = T; t >= 0; --t) {
            times.push_back(t);
        }
    }
    if (times.front() != T || times.back() != 0) {
        throw std::invalid_argument("sample_multicond: times must run from T to 0");
    }
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (times[i] >= times[i - 1]) {
            throw std::invalid_argument("sample_multicond: times must strictly decrease");
        }
    }

    TrajectorySet set;
    set.seed = seed;
    set.times = times;
    for (int j = 0; j < n; ++j) {
        set.seeds.push_back(derive_seed(seed, static_cast<std::uint64_t>(j)));
    }
    for (std::size_t i = 0; i < times.size(); ++i) {
        set.states.push_back(Matrix(dim, n));
        set.guidance.push_back(Matrix::Zero(dim, n));
    }
    parallel_for(static_cast<std::size_t>(n), options.workers, [&](std::size_t j) {
        const auto col = static_cast<Eigen::Index>(j);
        Rng rng(set.seeds[j]);
        Vector x = rng.normal_vector(dim);
        set.states[0].col(col) = x;
        for (std::size_t i = 0; i + 1 < times.size(); ++i) {
            const int t = times[i];
            const int tp = times[i + 1];
            const double rho = omega_schedule(options.rho.kind, options.rho.omega0, t, sched);
            const double omega = omega_schedule(options.omega.kind, options.omega.omega0, t, sched);
            const Vector s = src.score_one(x, t);
            const double abar = sched.alpha_bar(t);
            const double abar_prev = sched.alpha_bar(tp);
            const Vector x0 = (x + (1.0 - abar) * s) / std::sqrt(abar);
            Vector next = x0;
            if (tp != 0) {
                next = std::sqrt(abar_prev) * x0 - std::sqrt(1.0 - abar_prev) * std::sqrt(1.0 - abar) * s;
            }
            Vector g = Vector::Zero(dim);
            if (rho != 0.0) {
                g -= rho * (tfg_gradient(src, cond1, x, t) + tfg_gradient(src, cond2, x, t));
            }
            if (omega != 0.0) {
                const double eta = options.reparam.eta_sq.value_or(rho);
                const double eta_tilde = options.reparam.eta_tilde_sq.value_or(rho);
                g += omega * temporal_alignment(options.variant, src, *tls, cond1, cond2, x, t, eta, eta_tilde);
            }
            if (rho != 0.0 || omega != 0.0) {
                next += g;
            }
            if (!next.allFinite()) {
                throw NumericalError("sample_multicond: non-finite state at step " + std::to_string(t));
            }
            x = std::move(next);
            set.states[i + 1].col(col) = x;
            set.guidance[i + 1].col(col) = g;
        }
    });
    return set;
}

} // namespace tag
