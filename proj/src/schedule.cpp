#include "tag/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace tag {

namespace {

constexpr int kPanelsPerUnitTime = 1024;

std::vector<double> cumulative_alpha_bars(const std::vector<double>& betas)
{
    std::vector<double> out(betas.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas.size(); ++i) {
        prod *= 1.0 - betas[i];
        out[i] = prod;
    }
    return out;
}

} // namespace

NoiseSchedule::NoiseSchedule(std::vector<double> betas)
    : NoiseSchedule(betas, cumulative_alpha_bars(betas))
{
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas, std::vector<double> alpha_bars)
    : betas_(std::move(betas)), alpha_bars_(std::move(alpha_bars))
{
    if (betas_.empty()) {
        throw std::invalid_argument("NoiseSchedule: at least one step required");
    }
    if (betas_.size() != alpha_bars_.size()) {
        throw std::invalid_argument("NoiseSchedule: betas and alpha_bars differ in length");
    }
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) {
            throw std::invalid_argument("NoiseSchedule: beta outside (0, 1)");
        }
        if (!(alpha_bars_[i] > 0.0 && alpha_bars_[i] <= 1.0)) {
            throw std::invalid_argument("NoiseSchedule: alpha_bar outside (0, 1]");
        }
        if (i > 0 && !(alpha_bars_[i] < alpha_bars_[i - 1])) {
            throw std::invalid_argument("NoiseSchedule: alpha_bars must be strictly decreasing");
        }
    }
}

NoiseSchedule NoiseSchedule::from_alpha_bars(const std::vector<double>& alpha_bars)
{
    std::vector<double> betas(alpha_bars.size());
    double prev = 1.0;
    for (std::size_t i = 0; i < alpha_bars.size(); ++i) {
        betas[i] = 1.0 - alpha_bars[i] / prev;
        prev = alpha_bars[i];
    }
    return NoiseSchedule(std::move(betas), alpha_bars);
}

void NoiseSchedule::check_index(int t, int lo) const
{
    if (t < lo || t > steps()) {
        throw std::out_of_range("NoiseSchedule: step " + std::to_string(t) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(steps()) + "]");
    }
}

double NoiseSchedule::beta(int t) const
{
    check_index(t, 0);
    return t == 0 ? 0.0 : betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const
{
    check_index(t, 0);
    return t == 0 ? 1.0 : alpha_bars_[static_cast<std::size_t>(t - 1)];
}

nlohmann::json NoiseSchedule::to_json() const
{
    return {{"T", steps()}, {"betas", betas_}, {"alpha_bars", alpha_bars_}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j)
{
    NoiseSchedule s(j.at("betas").get<std::vector<double>>(), j.at("alpha_bars").get<std::vector<double>>());
    if (j.at("T").get<int>() != s.steps()) {
        throw std::invalid_argument("NoiseSchedule: T does not match array length");
    }
    return s;
}

NoiseSchedule linear_beta_schedule(int steps, double beta_min, double beta_max)
{
    if (steps < 1) {
        throw std::invalid_argument("linear_beta_schedule: T must be >= 1");
    }
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
        throw std::invalid_argument("linear_beta_schedule: need 0 < beta_min <= beta_max < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_min + frac * (beta_max - beta_min);
    }
    return NoiseSchedule(std::move(betas));
}

double alpha_bar_continuous(const std::function<double(double)>& beta_fn, double t)
{
    if (t < 0.0) {
        throw std::invalid_argument("alpha_bar_continuous: t must be >= 0");
    }
    if (t == 0.0) {
        return 1.0;
    }
    const int panels = std::max(1, static_cast<int>(std::ceil(t * kPanelsPerUnitTime)));
    const double h = t / panels;
    double integral = 0.5 * (beta_fn(0.0) + beta_fn(t));
    for (int i = 1; i < panels; ++i) {
        integral += beta_fn(i * h);
    }
    integral *= h;
    return std::exp(-0.5 * integral);
}

Vector forward_perturb_with_noise(const Vector& x0, double alpha_bar, const Vector& eps)
{
    if (x0.size() != eps.size()) {
        throw std::invalid_argument("forward_perturb: noise dimension mismatch");
    }
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

Vector forward_perturb(const Vector& x0, int t, const NoiseSchedule& schedule, Rng& rng)
{
    if (t < 1 || t > schedule.steps()) {
        throw std::out_of_range("forward_perturb: step outside [1, T]");
    }
    return forward_perturb_with_noise(x0, schedule.alpha_bar(t), rng.normal_vector(x0.size()));
}

OmegaKind parse_omega_kind(std::string_view name)
{
    if (name == "sqrt_one_minus_abar") return OmegaKind::SqrtOneMinusAlphaBar;
    if (name == "one_minus_abar") return OmegaKind::OneMinusAlphaBar;
    if (name == "constant") return OmegaKind::Constant;
    throw std::invalid_argument("unknown omega schedule kind: " + std::string(name));
}

std::string to_string(OmegaKind kind)
{
    switch (kind) {
    case OmegaKind::SqrtOneMinusAlphaBar: return "sqrt_one_minus_abar";
    case OmegaKind::OneMinusAlphaBar: return "one_minus_abar";
    case OmegaKind::Constant: return "constant";
    }
    return "constant";
}

double omega_schedule(OmegaKind kind, double omega0, int t, const NoiseSchedule& schedule)
{
    if (omega0 < 0.0) {
        throw std::invalid_argument("omega_schedule: omega0 must be >= 0");
    }
    const double abar = schedule.alpha_bar(t);
    switch (kind) {
    case OmegaKind::SqrtOneMinusAlphaBar: return omega0 * std::sqrt(1.0 - abar);
    case OmegaKind::OneMinusAlphaBar: return omega0 * (1.0 - abar);
    case OmegaKind::Constant: return omega0;
    }
    throw std::invalid_argument("omega_schedule: unknown kind");
}

} // namespace tag
