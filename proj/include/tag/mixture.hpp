#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "tag/random.hpp"
#include "tag/schedule.hpp"

namespace tag {

/// Weighted isotropic Gaussian components: sum_i w_i N(mu_i, sigma_i^2 I).
///
/// Means are stored as the columns of a d x K matrix.
template <typename Scalar>
class GaussianMixture {
public:
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    GaussianMixture() = default;

    GaussianMixture(VectorS weights, MatrixS means, VectorS variances)
        : weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances))
    {
        const auto k = weights_.size();
        if (k == 0 || means_.cols() != k || variances_.size() != k) {
            throw std::invalid_argument("GaussianMixture: component count mismatch");
        }
        if (means_.rows() == 0) {
            throw std::invalid_argument("GaussianMixture: zero dimension");
        }
        if ((weights_.array() < Scalar(0)).any()) {
            throw std::invalid_argument("GaussianMixture: negative weight");
        }
        if (std::abs(static_cast<double>(weights_.sum()) - 1.0) > 1e-12) {
            throw std::invalid_argument("GaussianMixture: weights must sum to 1");
        }
        if (!((variances_.array() > Scalar(0)).all())) {
            throw std::invalid_argument("GaussianMixture: variances must be positive");
        }
        if (!means_.allFinite()) {
            throw std::invalid_argument("GaussianMixture: non-finite mean");
        }
    }

    Eigen::Index dim() const { return means_.rows(); }
    Eigen::Index components() const { return weights_.size(); }

    const VectorS& weights() const { return weights_; }
    const MatrixS& means() const { return means_; }
    const VectorS& variances() const { return variances_; }

    nlohmann::json to_json() const
    {
        nlohmann::json means = nlohmann::json::array();
        for (Eigen::Index i = 0; i < components(); ++i) {
            std::vector<double> m(static_cast<std::size_t>(dim()));
            for (Eigen::Index r = 0; r < dim(); ++r) {
                m[static_cast<std::size_t>(r)] = static_cast<double>(means_(r, i));
            }
            means.push_back(m);
        }
        std::vector<double> w(weights_.data(), weights_.data() + weights_.size());
        std::vector<double> v(variances_.data(), variances_.data() + variances_.size());
        return {{"weights", w}, {"means", means}, {"variances", v}};
    }

    static GaussianMixture from_json(const nlohmann::json& j)
    {
        const auto w = j.at("weights").get<std::vector<double>>();
        const auto v = j.at("variances").get<std::vector<double>>();
        const auto m = j.at("means").get<std::vector<std::vector<double>>>();
        if (m.empty()) {
            throw std::invalid_argument("GaussianMixture: no means");
        }
        const auto d = static_cast<Eigen::Index>(m.front().size());
        MatrixS means(d, static_cast<Eigen::Index>(m.size()));
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (static_cast<Eigen::Index>(m[i].size()) != d) {
                throw std::invalid_argument("GaussianMixture: ragged means");
            }
            for (Eigen::Index r = 0; r < d; ++r) {
                means(r, static_cast<Eigen::Index>(i)) = static_cast<Scalar>(m[i][static_cast<std::size_t>(r)]);
            }
        }
        return GaussianMixture(Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())).cast<Scalar>(),
                               std::move(means),
                               Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())).cast<Scalar>());
    }

private:
    VectorS weights_;
    MatrixS means_;
    VectorS variances_;
};

using Mixture = GaussianMixture<double>;

namespace detail {

template <typename Scalar>
void check_dim(const GaussianMixture<Scalar>& gm, Eigen::Index n)
{
    if (gm.dim() != n) {
        throw std::invalid_argument("mixture: point dimension " + std::to_string(n) + " does not match " +
                                    std::to_string(gm.dim()));
    }
}

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v)
{
    const Scalar m = v.maxCoeff();
    if (!std::isfinite(static_cast<double>(m))) {
        return m;
    }
    return m + std::log((v.array() - m).exp().sum());
}

} // namespace detail

/// log(w_i) + log N(x; mu_i, sigma_i^2 I) for every component.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> component_log_densities(const GaussianMixture<Scalar>& gm,
                                                                 const Eigen::MatrixBase<Derived>& x)
{
    detail::check_dim(gm, x.size());
    const auto d = static_cast<Scalar>(gm.dim());
    const Scalar log_two_pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(gm.components());
    for (Eigen::Index i = 0; i < gm.components(); ++i) {
        const Scalar var = gm.variances()(i);
        const Scalar sq = (x - gm.means().col(i)).squaredNorm();
        out(i) = std::log(gm.weights()(i)) - Scalar(0.5) * (d * (log_two_pi + std::log(var)) + sq / var);
    }
    return out;
}

template <typename Scalar, typename Derived>
Scalar log_density(const GaussianMixture<Scalar>& gm, const Eigen::MatrixBase<Derived>& x)
{
    return detail::log_sum_exp<Scalar>(component_log_densities(gm, x));
}

/// Posterior component probabilities r_i(x).
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> responsibilities(const GaussianMixture<Scalar>& gm,
                                                          const Eigen::MatrixBase<Derived>& x)
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> l = component_log_densities(gm, x);
    l = (l.array() - l.maxCoeff()).exp();
    return l / l.sum();
}

/// grad_x log p(x) = sum_i r_i(x) (mu_i - x) / sigma_i^2.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> score(const GaussianMixture<Scalar>& gm, const Eigen::MatrixBase<Derived>& x)
{
    const auto r = responsibilities(gm, x);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(gm.dim());
    for (Eigen::Index i = 0; i < gm.components(); ++i) {
        s += r(i) * (gm.means().col(i) - x) / gm.variances()(i);
    }
    return s;
}

/// Hessian of log p(x); the Jacobian of `score`.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> score_jacobian(const GaussianMixture<Scalar>& gm,
                                                                     const Eigen::MatrixBase<Derived>& x)
{
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const auto r = responsibilities(gm, x);
    const auto d = gm.dim();
    VectorS s = VectorS::Zero(d);
    MatrixS second = MatrixS::Zero(d, d);
    Scalar precision = 0;
    for (Eigen::Index i = 0; i < gm.components(); ++i) {
        const VectorS a = (gm.means().col(i) - x) / gm.variances()(i);
        s += r(i) * a;
        second.noalias() += r(i) * a * a.transpose();
        precision += r(i) / gm.variances()(i);
    }
    MatrixS jac = second - s * s.transpose();
    jac.diagonal().array() -= precision;
    return jac;
}

/// Marginal of the VP forward process at signal level alpha_bar.
template <typename Scalar>
GaussianMixture<Scalar> perturbed_mixture(const GaussianMixture<Scalar>& gm0, double alpha_bar)
{
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) {
        throw std::invalid_argument("perturbed_mixture: alpha_bar outside [0, 1]");
    }
    const auto a = static_cast<Scalar>(alpha_bar);
    typename GaussianMixture<Scalar>::VectorS var = (a * gm0.variances().array() + (Scalar(1) - a)).matrix();
    return GaussianMixture<Scalar>(gm0.weights(), std::sqrt(a) * gm0.means(), std::move(var));
}

/// Exact draws; samples are the columns of the result.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> sample(const GaussianMixture<Scalar>& gm, Eigen::Index n, Rng& rng)
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(gm.dim(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double u = rng.uniform();
        Eigen::Index comp = gm.components() - 1;
        double acc = 0.0;
        for (Eigen::Index i = 0; i < gm.components(); ++i) {
            acc += static_cast<double>(gm.weights()(i));
            if (u < acc) {
                comp = i;
                break;
            }
        }
        const Scalar sd = std::sqrt(gm.variances()(comp));
        out.col(j) = gm.means().col(comp) + sd * rng.normal_vector<Scalar>(gm.dim());
    }
    return out;
}

/// Posterior of the clean point under an isotropic Gaussian observation
/// c ~ N(x, noise_var I); stays an isotropic mixture.
template <typename Scalar, typename Derived>
GaussianMixture<Scalar> observe(const GaussianMixture<Scalar>& gm, const Eigen::MatrixBase<Derived>& c, Scalar noise_var)
{
    detail::check_dim(gm, c.size());
    if (!(noise_var > Scalar(0))) {
        throw std::invalid_argument("observe: noise variance must be positive");
    }
    const auto k = gm.components();
    typename GaussianMixture<Scalar>::VectorS logw(k), var(k);
    typename GaussianMixture<Scalar>::MatrixS means(gm.dim(), k);
    const Scalar d = static_cast<Scalar>(gm.dim());
    for (Eigen::Index i = 0; i < k; ++i) {
        const Scalar vi = gm.variances()(i);
        const Scalar total = vi + noise_var;
        var(i) = vi * noise_var / total;
        means.col(i) = (noise_var * gm.means().col(i) + vi * c) / total;
        logw(i) = std::log(gm.weights()(i)) - Scalar(0.5) * (d * std::log(total) + (c - gm.means().col(i)).squaredNorm() / total);
    }
    logw = (logw.array() - logw.maxCoeff()).exp();
    logw /= logw.sum();
    return GaussianMixture<Scalar>(std::move(logw), std::move(means), std::move(var));
}

/// The forward marginals p_1..p_T of a data mixture, built once.
template <typename Scalar>
class MixtureMarginals {
public:
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MatrixS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    MixtureMarginals(GaussianMixture<Scalar> data, NoiseSchedule schedule)
        : data_(std::move(data)), schedule_(std::move(schedule))
    {
        marginals_.reserve(static_cast<std::size_t>(schedule_.steps()));
        for (int t = 1; t <= schedule_.steps(); ++t) {
            marginals_.push_back(perturbed_mixture(data_, schedule_.alpha_bar(t)));
        }
    }

    /// A family given directly by its members p_1..p_T (no data mixture or schedule).
    explicit MixtureMarginals(std::vector<GaussianMixture<Scalar>> marginals) : marginals_(std::move(marginals))
    {
        if (marginals_.empty()) {
            throw std::invalid_argument("MixtureMarginals: empty family");
        }
        for (const auto& m : marginals_) {
            detail::check_dim(m, marginals_.front().dim());
        }
        data_ = marginals_.front();
    }

    const GaussianMixture<Scalar>& data() const { return data_; }
    const NoiseSchedule& schedule() const
    {
        if (schedule_.steps() == 0) {
            throw std::logic_error("MixtureMarginals: family has no schedule");
        }
        return schedule_;
    }
    int steps() const { return static_cast<int>(marginals_.size()); }
    Eigen::Index dim() const { return data_.dim(); }

    /// p_t for t in [1, T]; t = 0 gives the data mixture.
    const GaussianMixture<Scalar>& at(int t) const
    {
        check_step(t, 0);
        return t == 0 ? data_ : marginals_[static_cast<std::size_t>(t - 1)];
    }

    void check_step(int t, int lo = 1) const
    {
        if (t < lo || t > steps()) {
            throw std::out_of_range("time index " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                                    std::to_string(steps()) + "]");
        }
    }

    /// log p_t(x) for t = 1..T (entry t-1).
    template <typename Derived>
    VectorS log_marginals(const Eigen::MatrixBase<Derived>& x) const
    {
        VectorS out(steps());
        for (int t = 1; t <= steps(); ++t) {
            out(t - 1) = log_density(marginals_[static_cast<std::size_t>(t - 1)], x);
        }
        return out;
    }

    /// Scores s_1..s_T as the columns of a d x T matrix.
    template <typename Derived>
    MatrixS scores(const Eigen::MatrixBase<Derived>& x) const
    {
        MatrixS out(dim(), steps());
        for (int t = 1; t <= steps(); ++t) {
            out.col(t - 1) = score(marginals_[static_cast<std::size_t>(t - 1)], x);
        }
        return out;
    }

private:
    GaussianMixture<Scalar> data_;
    NoiseSchedule schedule_;
    std::vector<GaussianMixture<Scalar>> marginals_;
};

/// p(t | x) under a uniform prior over steps 1..T.
template <typename Scalar>
struct TimePosterior {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> probs;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> log_marginals;

    /// Most probable step; ties go to the smaller index.
    int argmax() const
    {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < probs.size(); ++i) {
            if (probs(i) > probs(best)) {
                best = i;
            }
        }
        return static_cast<int>(best) + 1;
    }
};

namespace detail {

/// gamma_k = p_k / sum_j p_j computed in log space.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> normalized_weights(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& log_p)
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> g = (log_p.array() - log_p.maxCoeff()).exp();
    return g / g.sum();
}

} // namespace detail

template <typename Scalar, typename Derived>
TimePosterior<Scalar> time_posterior(const MixtureMarginals<Scalar>& fam, const Eigen::MatrixBase<Derived>& x)
{
    TimePosterior<Scalar> post;
    post.log_marginals = fam.log_marginals(x);
    post.probs = detail::normalized_weights<Scalar>(post.log_marginals);
    return post;
}

/// TLS(x, t) = grad_x log p(t | x) = s_t - sum_k gamma_k s_k.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tls_analytic(const MixtureMarginals<Scalar>& fam,
                                                      const Eigen::MatrixBase<Derived>& x, int t)
{
    fam.check_step(t);
    const auto gamma = detail::normalized_weights<Scalar>(fam.log_marginals(x));
    const auto s = fam.scores(x);
    return s.col(t - 1) - s * gamma;
}

/// The same quantity as the literal pairwise sum sum_{k != t} gamma_k (s_t - s_k).
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tls_decomposed(const MixtureMarginals<Scalar>& fam,
                                                        const Eigen::MatrixBase<Derived>& x, int t)
{
    fam.check_step(t);
    const auto gamma = detail::normalized_weights<Scalar>(fam.log_marginals(x));
    const auto s = fam.scores(x);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(fam.dim());
    for (int k = 1; k <= fam.steps(); ++k) {
        if (k != t) {
            out += gamma(k - 1) * (s.col(t - 1) - s.col(k - 1));
        }
    }
    return out;
}

/// TAG-modified score at step k, s_k - sum_i gamma_i s_i, with its weights.
template <typename Scalar>
struct ModifiedScore {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> value;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gamma;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> scores;
};

template <typename Scalar, typename Derived>
ModifiedScore<Scalar> modified_score(const MixtureMarginals<Scalar>& fam, const Eigen::MatrixBase<Derived>& x, int k)
{
    fam.check_step(k);
    ModifiedScore<Scalar> out;
    out.gamma = detail::normalized_weights<Scalar>(fam.log_marginals(x));
    out.scores = fam.scores(x);
    out.value = out.scores.col(k - 1);
    for (int i = 1; i <= fam.steps(); ++i) {
        out.value -= out.gamma(i - 1) * out.scores.col(i - 1);
    }
    return out;
}

/// Continuous-time TLS on [0, horizon]:
/// grad log p_t(x) - int gamma_s grad log p_s(x) ds, gamma_s = p_s / int p_k dk,
/// with the integral by composite trapezoid over `panels` panels.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> tls_continuous(const GaussianMixture<Scalar>& gm0,
                                                        const std::function<double(double)>& beta_fn,
                                                        const Eigen::MatrixBase<Derived>& x, double t, int panels,
                                                        double horizon = 1.0)
{
    using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    if (panels < 2) {
        throw std::invalid_argument("tls_continuous: need at least 2 panels");
    }
    if (!(t >= 0.0 && t <= horizon)) {
        throw std::invalid_argument("tls_continuous: t outside [0, horizon]");
    }
    detail::check_dim(gm0, x.size());
    const double h = horizon / panels;
    // abar at the nodes from a cumulative trapezoid of beta (1024 sub-panels per unit time).
    const int sub = std::max(1, static_cast<int>(std::ceil(h * 1024.0)));
    std::vector<double> abar(static_cast<std::size_t>(panels) + 1);
    double integral = 0.0;
    abar[0] = 1.0;
    for (int n = 0; n < panels; ++n) {
        const double a = n * h;
        const double dh = h / sub;
        double piece = 0.5 * (beta_fn(a) + beta_fn(a + h));
        for (int j = 1; j < sub; ++j) {
            piece += beta_fn(a + j * dh);
        }
        integral += piece * dh;
        abar[static_cast<std::size_t>(n) + 1] = std::exp(-0.5 * integral);
    }
    VectorS logw(panels + 1);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> s(gm0.dim(), panels + 1);
    for (int n = 0; n <= panels; ++n) {
        const auto pn = perturbed_mixture(gm0, abar[static_cast<std::size_t>(n)]);
        const double node_weight = (n == 0 || n == panels) ? 0.5 : 1.0;
        logw(n) = log_density(pn, x) + static_cast<Scalar>(std::log(node_weight));
        s.col(n) = score(pn, x);
    }
    const auto gamma = detail::normalized_weights<Scalar>(logw);
    const auto pt = perturbed_mixture(gm0, alpha_bar_continuous(beta_fn, t));
    return score(pt, x) - s * gamma;
}

/// E[x0 | x_t] under data mixture gm0 at signal level alpha_bar.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> posterior_mean_x0(const GaussianMixture<Scalar>& gm0,
                                                           const Eigen::MatrixBase<Derived>& x_t, double alpha_bar)
{
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw std::invalid_argument("posterior_mean_x0: alpha_bar must lie in (0, 1]");
    }
    detail::check_dim(gm0, x_t.size());
    const auto a = static_cast<Scalar>(alpha_bar);
    const Scalar root = std::sqrt(a);
    const auto noisy = perturbed_mixture(gm0, alpha_bar);
    const auto r = responsibilities(noisy, x_t);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(gm0.dim());
    for (Eigen::Index i = 0; i < gm0.components(); ++i) {
        const Scalar gain = gm0.variances()(i) * root / noisy.variances()(i);
        out += r(i) * (gm0.means().col(i) + gain * (x_t - root * gm0.means().col(i)));
    }
    return out;
}

using DriftFn = std::function<Vector(const Vector& x, int t)>;

/// Monte-Carlo value of 1/2 int int beta(t)^{-1} p_t(x) |v(x, t)|^2 dx dt.
///
/// The time integral is the trapezoid rule over steps 1..T with unit spacing;
/// the space integral averages n_mc exact draws from each marginal, using
/// one random stream per step so matched seeds reuse the same points.
double drift_energy_bound(const MixtureMarginals<double>& fam, const DriftFn& drift, int n_mc, std::uint64_t seed);

} // namespace tag
