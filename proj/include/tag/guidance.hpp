#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tag/sampler.hpp"

namespace tag {

enum class LossKind { Squared, Absolute };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

/// A linear property A(x) = W x of a clean point with target c and loss
/// squared: 1/2 |A(x) - c|^2, absolute: |A(x) - c|_1.
struct ConditionSpec {
    std::string kind;
    Matrix projection;
    Vector target;
    LossKind loss = LossKind::Squared;

    /// A(x) = x_i.
    static ConditionSpec coordinate(int dim, int index, double target, LossKind loss = LossKind::Squared);
    /// A(x) = w . x.
    static ConditionSpec linear(const Vector& weights, double target, LossKind loss = LossKind::Squared);
    /// A(x) = x.
    static ConditionSpec identity(const Vector& target, LossKind loss = LossKind::Squared);

    Vector property(const Vector& x) const;
    double loss_value(const Vector& x) const;
    /// Gradient of the loss with respect to the clean point (sign subgradient, 0 at a kink).
    Vector loss_gradient(const Vector& x) const;

    nlohmann::json to_json() const;
    /// {"kind": "coordinate"|"linear", "params": ..., "target": c, "loss": "squared"|"absolute"}
    static ConditionSpec from_json(const nlohmann::json& j, int dim);
};

/// Jacobian of x0_hat(x) = (x + (1 - abar) s(x, t)) / sqrt(abar).
///
/// Exact for an analytic source; otherwise central differences of the score
/// with step `fd_step`.
Matrix tweedie_jacobian(const ScoreSource& src, const Vector& x, int t, double fd_step = 1e-4);

/// grad_{x_t} loss(A(x0_hat(x_t)), c).
Vector tfg_gradient(const ScoreSource& src, const ConditionSpec& cond, const Vector& x, int t);

/// score - rho grad loss_c + omega TLS(x, t); descent on the time
/// cross-entropy is ascent on log p(t | x).
Vector conditional_tag_score(const ScoreSource& src, const ConditionSpec& cond, const TimeSource* tls, const Vector& x,
                             int t, double rho, double omega);

/// x' = x - eta^2 grad loss_1(A_1(x0_hat(x)), c_1).
Vector reparam_single(const Vector& x, const ConditionSpec& cond1, double eta_sq, const ScoreSource& src, int t);

/// x'' = x' - eta~^2 grad loss_2(A_2(x0_hat(x')), c_2) with x' from reparam_single.
Vector reparam_unconditional(const Vector& x, const ConditionSpec& cond1, const ConditionSpec& cond2, double eta_sq,
                             double eta_tilde_sq, const ScoreSource& src, int t);

enum class MulticondVariant { SinglePredictor, UncondPredictor };

MulticondVariant parse_multicond_variant(const std::string& name);
std::string to_string(MulticondVariant variant);

struct ReparamConfig {
    /// eta_t^2; unset ties it to rho_t.
    std::optional<double> eta_sq;
    /// eta~_t^2 (unconditional variant); unset ties it to rho_t.
    std::optional<double> eta_tilde_sq;
};

struct MulticondOptions {
    MulticondVariant variant = MulticondVariant::SinglePredictor;
    /// rho_t = omega_schedule(rho.kind, rho.omega0, t).
    OmegaConfig rho{OmegaKind::Constant, 0.0};
    OmegaConfig omega{OmegaKind::Constant, 0.0};
    ReparamConfig reparam;
    /// DDIM time indices from T to 0; empty means every step.
    std::vector<int> times;
    int workers = 1;
};

/// Temporal alignment term of one DDIM step: TLS at the reparameterized point.
Vector temporal_alignment(MulticondVariant variant, const ScoreSource& src, const TimeSource& tls,
                          const ConditionSpec& cond1, const ConditionSpec& cond2, const Vector& x, int t,
                          double eta_sq, double eta_tilde_sq);

/// DDIM loops with single-condition or unconditional time predictors:
/// x_{t-1} = DDIM(x_t) + rho_t G + omega_t T, G = -(grad loss_1 + grad loss_2)
/// (independent contributions), T = TLS at the reparameterized point.
TrajectorySet sample_multicond(const ScoreSource& src, const TimeSource* tls, const ConditionSpec& cond1,
                               const ConditionSpec& cond2, const MulticondOptions& options, int n, std::uint64_t seed);

} // namespace tag
