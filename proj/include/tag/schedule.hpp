#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "tag/random.hpp"

namespace tag {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Discrete VP forward-process coefficients over steps 1..T.
///
/// Arrays are stored zero-based (entry t-1 holds step t). By convention
/// step 0 is the clean data with alpha_bar = 1 and beta = 0.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// Builds from per-step rates; alpha_bars become the cumulative product of (1 - beta).
    explicit NoiseSchedule(std::vector<double> betas);

    /// Builds from explicit arrays (used by deserialization); validated.
    NoiseSchedule(std::vector<double> betas, std::vector<double> alpha_bars);

    /// Schedule whose cumulative coefficients are exactly `alpha_bars`.
    static NoiseSchedule from_alpha_bars(const std::vector<double>& alpha_bars);

    int steps() const { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

    /// beta at step t in [1, T]; beta(0) = 0.
    double beta(int t) const;
    /// alpha_bar at step t in [0, T]; alpha_bar(0) = 1.
    double alpha_bar(int t) const;

    nlohmann::json to_json() const;
    static NoiseSchedule from_json(const nlohmann::json& j);

private:
    void check_index(int t, int lo) const;

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

NoiseSchedule linear_beta_schedule(int steps, double beta_min, double beta_max);

/// exp(-1/2 int_0^t beta(s) ds) by composite trapezoid at 1024 panels per unit time.
double alpha_bar_continuous(const std::function<double(double)>& beta_fn, double t);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with eps drawn from `rng`.
Vector forward_perturb(const Vector& x0, int t, const NoiseSchedule& schedule, Rng& rng);

/// Same map with the noise supplied by the caller.
Vector forward_perturb_with_noise(const Vector& x0, double alpha_bar, const Vector& eps);

/// grad log p_t = -eps / sqrt(1 - abar).
template <typename Derived>
auto eps_to_score(const Eigen::MatrixBase<Derived>& eps, double alpha_bar)
{
    if (!(alpha_bar >= 0.0 && alpha_bar < 1.0)) {
        throw std::invalid_argument("eps_to_score: alpha_bar must lie in [0, 1)");
    }
    return (-eps / std::sqrt(1.0 - alpha_bar)).eval();
}

template <typename Derived>
auto score_to_eps(const Eigen::MatrixBase<Derived>& score, double alpha_bar)
{
    if (!(alpha_bar >= 0.0 && alpha_bar < 1.0)) {
        throw std::invalid_argument("score_to_eps: alpha_bar must lie in [0, 1)");
    }
    return (-std::sqrt(1.0 - alpha_bar) * score).eval();
}

enum class OmegaKind { SqrtOneMinusAlphaBar, OneMinusAlphaBar, Constant };

OmegaKind parse_omega_kind(std::string_view name);
std::string to_string(OmegaKind kind);

/// TAG strength at step t: omega0 * {sqrt(1 - abar_t), 1 - abar_t, 1}.
double omega_schedule(OmegaKind kind, double omega0, int t, const NoiseSchedule& schedule);

} // namespace tag
